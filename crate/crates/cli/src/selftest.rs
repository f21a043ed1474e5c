//! Fast invariant checks over the whole stack.

use midvfl::analysis::{plugin_mi, theorem1_rhs, BoundInputs, JointCountTable};
use midvfl::attacks::{dli_infer, LabelLeakHook, LeakMethod};
use midvfl::defenses::{DefenseConfig, MidConfig, MidPlacement};
use midvfl::harness::data::gen_synthetic;
use midvfl::harness::{mask_wall_ms, run_sweep, write_csv, ExperimentConfig, SweepConfig};
use midvfl::protocol::{run_training, ArchConfig, TrainConfig};
use midvfl::{Error, Graph, Result, Rng, Tensor};

type Check = (&'static str, fn() -> Result<bool>);

fn gradient_matches_differences() -> Result<bool> {
    let mut rng = Rng::named(0, "selftest");
    let x0 = Tensor::new(vec![3, 4], (0..12).map(|_| rng.normal()).collect())?;
    let w = Tensor::new(vec![4, 2], (0..8).map(|_| rng.normal()).collect())?;
    let f = |x: &Tensor| -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let wv = g.constant(w.clone());
        let h = g.matmul(xv, wv)?;
        let r = g.relu(h);
        let (loss, _) = g.softmax_cross_entropy(r, &[0, 1, 1])?;
        let grads = g.backward(loss)?;
        Ok((g.scalar(loss), grads.require(xv)?.clone()))
    };
    let (_, analytic) = f(&x0)?;
    let h = 1e-6;
    for i in 0..x0.len() {
        let mut p = x0.clone();
        p.data_mut()[i] += h;
        let mut m = x0.clone();
        m.data_mut()[i] -= h;
        let fd = (f(&p)?.0 - f(&m)?.0) / (2.0 * h);
        if (fd - analytic.data()[i]).abs() > 1e-6 * (1.0 + fd.abs()) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn dli_is_exact_undefended() -> Result<bool> {
    let mut rng = Rng::named(1, "data");
    let data = gen_synthetic(200, 4, 8, 0.5, 2, &mut rng)?;
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 40,
        ..TrainConfig::default()
    };
    let mut hook = LabelLeakHook::new(1, LeakMethod::Dli);
    run_training(&data, &ArchConfig::default(), &cfg, &mut hook)?;
    Ok(!hook.records.is_empty()
        && hook
            .records
            .iter()
            .all(|r| r.guess.class == data.train_labels[r.index])
        && dli_infer(&[0.2, -0.5, 0.3]).class == 1)
}

fn information_quantities() -> Result<bool> {
    let t = JointCountTable::new(vec![vec![5, 0], vec![0, 5]])?;
    let mi = plugin_mi(&t)?;
    let zero = theorem1_rhs(&BoundInputs {
        i_ht: 0.0,
        i_hptp: 0.0,
        card_t: 4.0,
        min_p: 0.5,
        min_p_prime: 0.5,
        m_count: 1.0,
    })?;
    Ok((mi - std::f64::consts::LN_2).abs() < 1e-12 && zero.total == 0.0)
}

fn sweep_is_deterministic() -> Result<bool> {
    let cfg = ExperimentConfig {
        dataset: midvfl::harness::DatasetConfig::Synthetic {
            n: 120,
            classes: 3,
            dim: 6,
            spread: 0.5,
        },
        seeds: vec![0, 1],
        threads: 2,
        train: TrainConfig {
            epochs: 2,
            batch_size: 16,
            defense: DefenseConfig::Mid(MidConfig::new(0.0, MidPlacement::Active)),
            ..TrainConfig::default()
        },
        attack: midvfl::attacks::AttackConfig::Dli,
        sweep: Some(SweepConfig {
            param: "train.defense.lambda".into(),
            values: vec![toml_float(0.0), toml_float(1.0)],
        }),
        ..ExperimentConfig::default()
    };
    let render = |threads: usize| -> Result<String> {
        let mut c = cfg.clone();
        c.threads = threads;
        let rows = run_sweep(&c, std::path::Path::new("."))?;
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    };
    Ok(mask_wall_ms(&render(1)?) == mask_wall_ms(&render(2)?))
}

fn toml_float(v: f64) -> midvfl::harness::SweepValue {
    midvfl::harness::SweepValue::Float(v)
}

const CHECKS: [Check; 4] = [
    ("gradient matches central differences", gradient_matches_differences),
    ("direct label inference is exact without defense", dli_is_exact_undefended),
    ("mutual information and bound edge cases", information_quantities),
    ("sweep output is independent of worker count", sweep_is_deterministic),
];

pub fn run() -> Result<()> {
    let mut failed = 0;
    for (name, check) in CHECKS {
        let ok = match check() {
            Ok(ok) => ok,
            Err(e) => {
                eprintln!("  {name}: {e}");
                false
            }
        };
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    }
    if failed > 0 {
        return Err(Error::Consistency(format!("{failed} self-test check(s) failed")));
    }
    Ok(())
}
