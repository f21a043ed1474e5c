//! One experiment point: build the data, train with the configured attack
//! hooks, then score the attack.
//!
//! Ground-truth labels are read here only for scoring. What an attack
//! itself uses comes from its hook, its own party's features and model,
//! and (where the threat model grants one) a small labeled aux set.

use std::path::Path;

use super::config::ExperimentConfig;
use super::data::SplitDataset;
use crate::analysis::{agreement, cap_psnr, median, target_rate, MetricsRecord};
use crate::attacks::{
    aux_subset, bli_fit, bli_slot_accuracy, cafe_reconstruct, generate_aux_traces, leak_accuracy,
    make_trigger, mc_attack, mc_infer, noisy_sample_poison, row_psnr, select_fraction,
    AttackConfig, BackdoorHook, BliHook, CafeConfig, CafeObservation, GradientCapture,
    LabelLeakHook, LeakMethod, McHook, McMode, MissingHook, NoisyHook,
};
use crate::diffcore::{Rng, Tensor};
use crate::error::{Error, Result};
use crate::protocol::{run_training, MetricsLog, NoAttack, TrainConfig, VflSystem};

/// A reconstructed batch next to the original inputs.
#[derive(Clone, Debug)]
pub struct ReconstructionOutput {
    pub truth: Tensor,
    pub recon: Tensor,
    pub psnr: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub metrics: MetricsRecord,
    pub system: VflSystem,
    pub log: MetricsLog,
    pub data: SplitDataset,
    pub reconstruction: Option<ReconstructionOutput>,
}

/// Runs `cfg` (its sweep ignored) with `seed` for both data and training.
pub fn run_point(cfg: &ExperimentConfig, seed: u64, base_dir: &Path) -> Result<RunArtifacts> {
    let data = cfg.dataset.load(cfg.parties, seed, base_dir)?;
    let mut train = cfg.train.clone();
    train.seed = seed;
    run_on(&data, cfg, &train)
}

fn first_with_label(labels: &[usize], class: usize, skip: &[usize]) -> Result<usize> {
    (0..labels.len())
        .find(|i| labels[*i] == class && !skip.contains(i))
        .ok_or_else(|| Error::AttackInapplicable(format!("no usable training sample of class {class}")))
}

fn test_accuracy(sys: &VflSystem, data: &SplitDataset) -> Result<f64> {
    let pred = sys.predict(&data.test, &[])?;
    Ok(agreement(&pred, &data.test_labels).unwrap_or(0.0))
}

/// Accuracy on `rows` of the test set, with and without an attack applied.
fn subset_drop(clean: &[usize], attacked: &[usize], labels: &[usize], rows: &[usize]) -> Option<f64> {
    let pick = |p: &[usize]| rows.iter().map(|&r| p[r]).collect::<Vec<_>>();
    let truth = pick(labels);
    Some(agreement(&pick(clean), &truth)? - agreement(&pick(attacked), &truth)?)
}

/// Trains on `data` and scores `cfg.attack`.
pub fn run_on(data: &SplitDataset, cfg: &ExperimentConfig, train: &TrainConfig) -> Result<RunArtifacts> {
    cfg.attack.validate(data.classes)?;
    let a = cfg.attacker;
    if a == 0 || a >= data.parties() {
        return Err(Error::config(format!("attacker {a} is not a passive party")));
    }
    let classes = data.classes;
    let labels = &data.train_labels;
    let own_train = &data.train[a - 1];
    let mut rng = Rng::named(train.seed, "attack");
    let mut record = MetricsRecord::default();
    let mut reconstruction = None;

    let (system, log) = match &cfg.attack {
        AttackConfig::None => run_training(data, &cfg.arch, train, &mut NoAttack)?,
        AttackConfig::Dli | AttackConfig::Ds { .. } => {
            let method = match &cfg.attack {
                AttackConfig::Ds { known_positive } => LeakMethod::Ds {
                    known_positive: match known_positive {
                        Some(i) => *i,
                        None => first_with_label(labels, 1, &[])?,
                    },
                },
                _ => LeakMethod::Dli,
            };
            let mut hook = LabelLeakHook::new(a, method);
            let out = run_training(data, &cfg.arch, train, &mut hook)?;
            record.attack_metric = leak_accuracy(&hook.records, labels);
            out
        }
        AttackConfig::Bli {
            hidden,
            aux_traces,
            aux_per_class,
            fit_epochs,
        } => {
            let mut hook = BliHook::new(a);
            let (sys, log) = run_training(data, &cfg.arch, train, &mut hook)?;
            let local = &sys.passive(a).expect("attacker is passive").model;
            let aux = aux_subset(labels, classes, *aux_per_class);
            let aux_y: Vec<usize> = aux.iter().map(|&i| labels[i]).collect();
            let traces = generate_aux_traces(
                local,
                &own_train.select_rows(&aux),
                &aux_y,
                classes,
                train.batch_size,
                *aux_traces,
                &mut rng,
            )?;
            let inv = bli_fit(&traces, classes, hidden, *fit_epochs, 0.05, &mut rng)?;
            let last = train.epochs.saturating_sub(1);
            let mut scores = Vec::new();
            for t in hook.traces.iter().filter(|t| t.epoch == last) {
                let guess = inv.infer(&t.grad, t.indices.len())?;
                let truth: Vec<usize> = t.indices.iter().map(|&i| labels[i]).collect();
                scores.push(bli_slot_accuracy(&guess, &truth));
            }
            if !scores.is_empty() {
                record.attack_metric = Some(scores.iter().sum::<f64>() / scores.len() as f64);
            }
            (sys, log)
        }
        AttackConfig::Mc {
            mode,
            aux_per_class,
            finetune_epochs,
            gamma,
            lr,
        } => {
            let scale = match mode {
                McMode::Passive => 1.0,
                McMode::Active => *gamma,
            };
            let mut hook = McHook::new(a, scale);
            let out = run_training(data, &cfg.arch, train, &mut hook)?;
            let (local, _) = hook
                .snapshot
                .as_ref()
                .ok_or_else(|| Error::Consistency("no local model snapshot after training".into()))?;
            let aux = aux_subset(labels, classes, *aux_per_class);
            let aux_y: Vec<usize> = aux.iter().map(|&i| labels[i]).collect();
            let model = mc_attack(local, &own_train.select_rows(&aux), &aux_y, classes, *finetune_epochs, *lr, &mut rng)?;
            let pred = mc_infer(&model, &data.test[a - 1])?;
            record.attack_metric = agreement(&pred, &data.test_labels);
            out
        }
        AttackConfig::BackdoorReplace {
            fraction,
            target,
            gamma,
            trigger_value,
            trigger_width,
        } => {
            let triggered = select_fraction(data.n_train(), *fraction, &mut rng);
            let known = first_with_label(labels, *target, &triggered)?;
            let trigger = make_trigger(own_train.cols(), *trigger_width, *trigger_value);
            let mut hook = BackdoorHook::new(a, &triggered, trigger.clone(), known, *gamma);
            let (sys, log) = run_training(data, &cfg.arch, train, &mut hook)?;
            let rows: Vec<usize> = (0..data.n_test()).filter(|&i| data.test_labels[i] != *target).collect();
            let mut feats: Vec<Tensor> = data.test.iter().map(|t| t.select_rows(&rows)).collect();
            let all: Vec<usize> = (0..rows.len()).collect();
            crate::attacks::add_trigger(&mut feats[a - 1], &all, &trigger);
            let pred = sys.predict(&feats, &[])?;
            record.attack_metric = target_rate(&pred, *target);
            (sys, log)
        }
        AttackConfig::NoisySample { fraction, noise_std } => {
            let noisy = select_fraction(data.n_train(), *fraction, &mut rng);
            let base = Rng::named(train.seed, "attack/noise");
            let mut hook = NoisyHook {
                attacker: a,
                noisy: noisy.into_iter().collect(),
                std: *noise_std,
                base: base.clone(),
            };
            let (sys, log) = run_training(data, &cfg.arch, train, &mut hook)?;
            let affected = select_fraction(data.n_test(), *fraction, &mut rng);
            let mut feats = data.test.clone();
            // test keys continue after the training indices
            let keys: Vec<u64> = affected.iter().map(|&i| (data.n_train() + i) as u64).collect();
            noisy_sample_poison(&mut feats[a - 1], &affected, &keys, *noise_std, &base);
            let clean = sys.predict(&data.test, &[])?;
            let attacked = sys.predict(&feats, &[])?;
            record.attack_metric = subset_drop(&clean, &attacked, &data.test_labels, &affected);
            (sys, log)
        }
        AttackConfig::Missing { fraction } => {
            let missing = select_fraction(data.n_train(), *fraction, &mut rng);
            let mut hook = MissingHook {
                attacker: a,
                missing: missing.into_iter().collect(),
            };
            let (sys, log) = run_training(data, &cfg.arch, train, &mut hook)?;
            let affected = select_fraction(data.n_test(), *fraction, &mut rng);
            let mut mask = vec![false; data.n_test()];
            for &i in &affected {
                mask[i] = true;
            }
            let clean = sys.predict(&data.test, &[])?;
            let attacked = sys.predict(&data.test, &[(a, mask)])?;
            record.attack_metric = subset_drop(&clean, &attacked, &data.test_labels, &affected);
            (sys, log)
        }
        AttackConfig::Cafe {
            iters,
            lr,
            batch,
            init_std,
        } => {
            let (sys, log) = run_training(data, &cfg.arch, train, &mut NoAttack)?;
            if *batch > data.n_train() {
                return Err(Error::config(format!(
                    "reconstruction batch {batch} exceeds {} training samples",
                    data.n_train()
                )));
            }
            let mut indices = rng.choose_distinct(data.n_train(), *batch);
            indices.sort_unstable();
            let party = sys.passive(a).expect("attacker is passive").clone();
            let mut probe = sys.clone();
            let mut capture = GradientCapture::new(a);
            let round = probe.train_round(&indices, &mut capture)?;
            let slot = a - 1;
            let obs = CafeObservation {
                param_grads: capture
                    .param_grads
                    .pop()
                    .ok_or_else(|| Error::Consistency("no gradient captured".into()))?,
                outputs: round.outputs[slot].outputs.clone(),
                upstream: round.gradients[slot].per_sample.clone(),
            };
            let ccfg = CafeConfig {
                iters: *iters,
                lr: *lr,
                init_std: *init_std,
                ..CafeConfig::default()
            };
            let r = cafe_reconstruct(&party.model, party.vib.as_ref(), &obs, &ccfg, None, &mut rng)?;
            let truth = own_train.select_rows(&indices);
            let psnr: Vec<f64> = row_psnr(&truth, &r.x)?.into_iter().map(cap_psnr).collect();
            record.psnr = median(&psnr);
            record.attack_metric = record.psnr;
            reconstruction = Some(ReconstructionOutput {
                truth,
                recon: r.x,
                psnr,
            });
            (sys, log)
        }
    };
    record.main_acc = Some(test_accuracy(&system, data)?);
    Ok(RunArtifacts {
        metrics: record,
        system,
        log,
        data: data.clone(),
        reconstruction,
    })
}
