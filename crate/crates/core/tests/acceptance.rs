//! End-to-end acceptance checks. Each criterion prints one
//! `criterion N: PASS|FAIL` line with the measured quantities; the process
//! exits nonzero when any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use midvfl::analysis::{median, plugin_mi, spearman, theorem1_rhs, BoundInputs, JointCountTable};
use midvfl::attacks::{
    cafe_reconstruct, dli_infer, select_fraction, simulate_observation, CafeConfig, LabelLeakHook, LeakMethod,
    MissingHook,
};
use midvfl::defenses::{
    apply_discrete_grad, apply_dp, apply_grad_sparse, mid_total_loss_value, DefenseConfig, MidConfig, MidPlacement,
    Noise,
};
use midvfl::harness::data::gen_synthetic;
use midvfl::harness::{mask_wall_ms, run_point, run_sweep, write_csv, ExperimentConfig, ResultRow};
use midvfl::models::{Linear, MlpModel, VibLayer, VibMode};
use midvfl::protocol::{
    run_training, sample_batch, ArchConfig, AttackHooks, NoAttack, Observation, TrainConfig, VflSystem, Visibility,
};
use midvfl::{Graph, Rng, Tensor, Var};

fn report(n: usize, name: &str, ok: bool, detail: String) {
    println!("criterion {n}: {} {name} ({detail})", if ok { "PASS" } else { "FAIL" });
}

fn within(start: Instant, limit: Duration) -> (bool, String) {
    let t = start.elapsed();
    (t < limit, format!("{:.1} s of {} s", t.as_secs_f64(), limit.as_secs()))
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(8)
}

fn config(text: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(text).expect("valid experiment");
    c.threads = workers();
    c
}

fn sweep(cfg: &ExperimentConfig) -> Vec<ResultRow> {
    run_sweep(cfg, Path::new(".")).expect("sweep runs")
}

fn column(rows: &[ResultRow], f: impl Fn(&ResultRow) -> Option<f64>) -> Vec<f64> {
    rows.iter().map(|r| f(r).expect("metric present")).collect()
}

fn main_acc(rows: &[ResultRow]) -> Vec<f64> {
    column(rows, |r| r.metrics.main_acc)
}

fn attack_metric(rows: &[ResultRow]) -> Vec<f64> {
    column(rows, |r| r.metrics.attack_metric)
}

fn med(v: &[f64]) -> f64 {
    median(v).expect("non-empty")
}

// ---------------------------------------------------------------------------
// gradient oracle

/// Parameter tensors of one randomly shaped program. On the first build
/// they are drawn; on rebuilds the given (perturbed) values are used.
struct Params {
    given: Option<Vec<Tensor>>,
    made: Vec<Tensor>,
    vars: Vec<Var>,
    rng: Rng,
}

impl Params {
    fn next(&mut self, shape: &[usize]) -> Tensor {
        let t = match &self.given {
            Some(v) => v[self.made.len()].clone(),
            None => {
                let n: usize = shape.iter().product();
                Tensor::new(shape.to_vec(), (0..n).map(|_| 0.7 * self.rng.normal()).collect()).unwrap()
            }
        };
        self.made.push(t.clone());
        t
    }

    fn param(&mut self, g: &mut Graph, shape: &[usize]) -> Var {
        let t = self.next(shape);
        let v = g.param(t);
        self.vars.push(v);
        v
    }
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| scale * rng.normal()).collect()).unwrap()
}

/// Builds program `seed`; the op sequence and every constant come from
/// `seed` alone, so rebuilding with perturbed parameters changes nothing
/// else.
fn program(seed: u64, given: Option<Vec<Tensor>>) -> (Graph, Params, Var) {
    let mut shape = Rng::named(seed, "shape");
    let mut ps = Params {
        given,
        made: Vec::new(),
        vars: Vec::new(),
        rng: Rng::named(seed, "values"),
    };
    let mut g = Graph::new();
    let mut b = 1 + shape.below(4);
    let mut c = 2 + shape.below(4);
    let mut x = ps.param(&mut g, &[b, c]);
    let mut extra: Vec<Var> = Vec::new();
    let steps = 2 + shape.below(5);
    for step in 0..steps {
        // the first program of every eight always goes through a bottleneck
        let op = if step == 0 && seed % 8 == 0 { 9 } else { shape.below(10) };
        match op {
            0 => {
                let c2 = 1 + shape.below(5);
                let w = ps.param(&mut g, &[c, c2]);
                let bias = ps.param(&mut g, &[c2]);
                x = g.linear(x, w, bias).unwrap();
                c = c2;
            }
            1 => x = g.relu(x),
            2 => {
                let s = g.scale(x, 0.3);
                x = g.exp(s);
            }
            3 => x = g.clamp(x, -1.5, 1.5),
            4 => {
                let p = ps.param(&mut g, &[b, c]);
                x = if shape.below(2) == 0 { g.mul(x, p).unwrap() } else { g.sub(x, p).unwrap() };
            }
            5 => {
                let c2 = 1 + shape.below(4);
                let t = g.transpose(x).unwrap();
                let p = ps.param(&mut g, &[b, c2]);
                x = g.matmul(t, p).unwrap();
                b = c;
                c = c2;
            }
            6 => {
                let r = g.relu(x);
                x = g.concat_cols(&[x, r]).unwrap();
                c *= 2;
            }
            7 => {
                let k = random_matrix(&mut shape, b, c, 1.0);
                let p = ps.param(&mut g, &[b, c]);
                let m = g.mul_const(p, k).unwrap();
                x = g.add(x, m).unwrap();
            }
            8 if c >= 2 => {
                // bare reparameterization with fixed noise
                let h = c / 2;
                let mu = g.slice_cols(x, 0, h).unwrap();
                let raw = g.slice_cols(x, h, 2 * h).unwrap();
                let lv = g.clamp(raw, -10.0, 10.0);
                let eps = random_matrix(&mut shape, b, h, 1.0);
                let kl = g.gaussian_kl(mu, lv).unwrap();
                extra.push(kl);
                x = g.reparam_with_noise(mu, lv, eps).unwrap();
                c = h;
            }
            _ => {
                // a full bottleneck layer whose weights are program parameters
                let d = 1 + shape.below(3);
                let out = 1 + shape.below(4);
                let mut layer = |dims: [usize; 2]| Linear {
                    weight: ps.next(&dims),
                    bias: ps.next(&[dims[1]]),
                };
                let encoder = MlpModel::from_layers(vec![layer([c, 2 * d]), layer([2 * d, 2 * d])]).unwrap();
                let decoder = MlpModel::from_layers(vec![layer([d, 2 * d]), layer([2 * d, out])]).unwrap();
                let vib = VibLayer::from_parts(encoder, decoder, 0.5).unwrap();
                let bound = vib.bind(&mut g);
                for (w, bb) in bound.encoder.vars().iter().chain(bound.decoder.vars()) {
                    ps.vars.push(*w);
                    ps.vars.push(*bb);
                }
                let mut noise = Rng::named(seed, "frozen-noise");
                let o = vib.forward(&mut g, &bound, x, VibMode::Train(&mut noise)).unwrap();
                let kl = g.scale(o.kl, vib.lambda());
                extra.push(kl);
                x = o.z;
                c = out;
            }
        }
    }
    let mut loss = match shape.below(4) {
        0 => {
            let labels: Vec<usize> = (0..b).map(|_| shape.below(c)).collect();
            g.softmax_cross_entropy(x, &labels).unwrap().0
        }
        1 => {
            let raw = random_matrix(&mut shape, b, c, 1.0).map(f64::abs);
            let targets = Tensor::matrix(
                b,
                c,
                (0..b)
                    .flat_map(|i| {
                        let s: f64 = raw.row(i).iter().sum();
                        raw.row(i).iter().map(move |v| v / s).collect::<Vec<_>>()
                    })
                    .collect(),
            )
            .unwrap();
            g.soft_cross_entropy(x, &targets).unwrap()
        }
        2 => g.sum_squares(x),
        _ => {
            let k = random_matrix(&mut shape, b, c, 1.0);
            g.dot_const(x, k).unwrap()
        }
    };
    for e in extra {
        loss = g.add(loss, e).unwrap();
    }
    (g, ps, loss)
}

fn gradients_match_central_differences() {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut bottlenecks = 0usize;
    for seed in 0..200u64 {
        let (g, ps, loss) = program(seed, None);
        let grads = g.backward(loss).unwrap();
        let analytic: Vec<Tensor> = ps.vars.iter().map(|v| grads.require(*v).unwrap().clone()).collect();
        let base = ps.made.clone();
        bottlenecks += usize::from(seed % 8 == 0);
        let eval = |params: Vec<Tensor>| {
            let (g, _, loss) = program(seed, Some(params));
            g.scalar(loss)
        };
        for (k, t) in base.iter().enumerate() {
            for i in 0..t.len() {
                let mut plus = base.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = base.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(plus) - eval(minus)) / (2.0 * h);
                let a = analytic[k].data()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-2);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let (fast, time) = within(start, Duration::from_secs(30));
    let ok = worst < 1e-4 && fast && bottlenecks > 0;
    report(
        1,
        "gradient oracle",
        ok,
        format!("200 programs, {checked} entries, worst relative error {worst:.2e}, {time}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// direct label inference

fn direct_label_inference_is_exact_without_defense() {
    let start = Instant::now();
    // sign oracle on raw softmax-CE gradients
    let mut rng = Rng::named(1, "dli-oracle");
    let mut oracle_ok = true;
    for _ in 0..200 {
        let (b, c) = (1 + rng.below(16), 2 + rng.below(9));
        let logits = random_matrix(&mut rng, b, c, 3.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
        let mut g = Graph::new();
        let l = g.param(logits);
        let (ce, _) = g.softmax_cross_entropy(l, &labels).unwrap();
        let grad = g.backward(ce).unwrap().require(l).unwrap().clone();
        oracle_ok &= (0..b).all(|i| dli_infer(grad.row(i)).class == labels[i]);
    }
    // inside the protocol, for several batch sizes
    let data = gen_synthetic(240, 4, 12, 0.6, 2, &mut Rng::named(2, "data")).unwrap();
    let mut records = 0;
    let mut wrong = 0;
    for batch in [1, 7, 64, data.n_train()] {
        let cfg = TrainConfig {
            epochs: if batch == 1 { 1 } else { 2 },
            batch_size: batch,
            seed: batch as u64,
            ..TrainConfig::default()
        };
        let mut hook = LabelLeakHook::new(1, LeakMethod::Dli);
        run_training(&data, &ArchConfig::default(), &cfg, &mut hook).unwrap();
        records += hook.records.len();
        wrong += hook
            .records
            .iter()
            .filter(|r| r.guess.class != data.train_labels[r.index])
            .count();
    }
    let (fast, time) = within(start, Duration::from_secs(1));
    let ok = oracle_ok && records > 0 && wrong == 0 && fast;
    report(
        2,
        "direct label inference exactness",
        ok,
        format!("{wrong} wrong of {records} protocol rows, sign oracle {oracle_ok}, {time}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// bottleneck strength against direct label inference

const SYNTHETIC_MID: &str = r#"
seeds = [0, 1, 2, 3, 4]
[dataset]
kind = "synthetic"
[train.defense]
kind = "mid"
lambda = 0.0
"#;

const PLAIN: &str = "seeds = [0, 1, 2, 3, 4]\n[dataset]\nkind = \"synthetic\"\n";

fn mid_at(lambda: f64) -> String {
    SYNTHETIC_MID.replace("lambda = 0.0", &format!("lambda = {lambda:?}"))
}

fn stronger_bottleneck_lowers_label_leakage() {
    let start = Instant::now();
    let lambdas = [0.0, 0.01, 0.1, 1.0, 10.0, 100.0];
    let values: Vec<String> = lambdas.iter().map(|l| format!("{l:?}")).collect();
    let cfg = config(&format!(
        "{SYNTHETIC_MID}[attack]\nkind = \"dli\"\n[sweep]\nparam = \"train.defense.lambda\"\nvalues = [{}]\n",
        values.join(", ")
    ));
    let rows = sweep(&cfg);
    let per = |i: usize| &rows[i * 5..(i + 1) * 5];
    let leak: Vec<f64> = (0..lambdas.len()).map(|i| med(&attack_metric(per(i)))).collect();
    let rho = spearman(&lambdas, &leak).unwrap();
    let acc0 = med(&main_acc(per(0)));
    let acc100 = med(&main_acc(per(5)));
    let near_random = (leak[5] - 0.25).abs() <= 0.15;
    let kept = acc100 >= acc0 - 0.12;
    let (fast, time) = within(start, Duration::from_secs(600));
    let ok = rho <= -0.8 && near_random && kept && fast;
    report(
        3,
        "bottleneck weight vs label leakage",
        ok,
        format!(
            "median leakage {leak:.3?}, rho {rho:.3}, main accuracy {acc0:.4} -> {acc100:.4}, {time}"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// gradient-transform defenses

fn gradient_transform_defenses_behave_as_configured() {
    let start = Instant::now();
    let mut rng = Rng::named(4, "defense-oracle");
    let zeros = Tensor::zeros(&[1, 100_000]);
    let std_of = |t: &Tensor| {
        let n = t.len() as f64;
        let m = t.sum() / n;
        (t.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let gauss = std_of(&apply_dp(&zeros, 1.0, Noise::Gauss { sigma: 0.3 }, &mut rng).unwrap());
    let laplace = std_of(&apply_dp(&zeros, 1.0, Noise::Laplace { scale: 0.2 }, &mut rng).unwrap());
    let dp_ok = (gauss / 0.3 - 1.0).abs() < 0.02 && (laplace / (0.2 * 2f64.sqrt()) - 1.0).abs() < 0.02;

    let mut gs_ok = true;
    for _ in 0..500 {
        let n = 1 + rng.below(40);
        let row: Vec<f64> = (0..n).map(|_| rng.normal() + if rng.uniform() < 0.5 { 1e-3 } else { -1e-3 }).collect();
        let r = rng.uniform();
        let out = apply_grad_sparse(&row, r);
        let dropped: Vec<usize> = (0..n).filter(|&i| out[i] == 0.0).collect();
        let kept: Vec<usize> = (0..n).filter(|&i| out[i] != 0.0).collect();
        gs_ok &= dropped.len() == (r * n as f64).floor() as usize;
        gs_ok &= kept.iter().all(|&i| out[i].to_bits() == row[i].to_bits());
        let max_dropped = dropped.iter().map(|&i| row[i].abs()).fold(0.0, f64::max);
        gs_ok &= kept.iter().all(|&i| row[i].abs() >= max_dropped);
    }

    let mut dg_ok = true;
    for _ in 0..200 {
        let bins = 2 + rng.below(30);
        let clamp = 0.1 + 3.0 * rng.uniform();
        let g = Tensor::matrix(4, 50, (0..200).map(|_| rng.uniform_range(-clamp, clamp)).collect()).unwrap();
        let q = apply_discrete_grad(&g, bins, clamp).unwrap();
        let mut distinct: Vec<u64> = q.data().iter().map(|v| v.to_bits()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        dg_ok &= distinct.len() <= bins;
        dg_ok &= g.max_abs_diff(&q) <= clamp / bins as f64 * (1.0 + 1e-12);
    }
    let (fast, time) = within(start, Duration::from_secs(10));
    let ok = dp_ok && gs_ok && dg_ok && fast;
    report(
        4,
        "gradient-transform defenses",
        ok,
        format!(
            "gauss std {gauss:.4}/0.3, laplace std {laplace:.4}/{:.4}, sparsify {gs_ok}, discretize {dg_ok}, {time}",
            0.2 * 2f64.sqrt()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// targeted backdoor

fn bottleneck_limits_gradient_replacement_backdoor() {
    let start = Instant::now();
    let attack = "[attack]\nkind = \"backdoor_replace\"\ntarget = 0\ngamma = 5.0\n";
    let clean = sweep(&config(PLAIN));
    let attacked = sweep(&config(&format!("{PLAIN}{attack}")));
    let mid = sweep(&config(&format!("{}{attack}", mid_at(100.0))));
    let clean_acc = med(&main_acc(&clean));
    let attacked_acc = med(&main_acc(&attacked));
    let undefended = med(&attack_metric(&attacked));
    let defended = med(&attack_metric(&mid));
    let (fast, time) = within(start, Duration::from_secs(600));
    let ok = undefended >= 0.7 && clean_acc - attacked_acc <= 0.05 && defended <= undefended / 2.0 && fast;
    report(
        5,
        "backdoor under the bottleneck",
        ok,
        format!(
            "backdoor accuracy {undefended:.3} undefended vs {defended:.3} defended, clean accuracy {clean_acc:.4} -> {attacked_acc:.4}, {time}"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// missing outputs

fn missing_outputs_hurt_less_under_the_bottleneck() {
    let start = Instant::now();
    // structural: every output of the attacker dropped
    let data = gen_synthetic(300, 4, 12, 0.5, 2, &mut Rng::named(6, "data")).unwrap();
    let mut sys = VflSystem::new(&data, &ArchConfig::default(), &TrainConfig::default()).unwrap();
    let all = select_fraction(data.n_train(), 1.0, &mut Rng::named(6, "attack"));
    let mut hook = MissingHook {
        attacker: 1,
        missing: all.iter().copied().collect(),
    };
    let batch: Vec<usize> = (0..32).collect();
    let round = sys.train_round(&batch, &mut hook).unwrap();
    let sent_zero = round.outputs[0].outputs.data().iter().all(|&v| v == 0.0);
    let mask = vec![true; data.n_test()];
    let with_missing = sys.predict_logits(&data.test, &[(1, mask)]).unwrap();
    let active_only = sys.active().model.predict(&data.test[1]).unwrap();
    let structural = sent_zero && with_missing == active_only;

    let attack = "[attack]\nkind = \"missing\"\nfraction = 0.25\n";
    let plain = format!("{PLAIN}{attack}");
    let undefended = med(&attack_metric(&sweep(&config(&plain))));
    let mid = format!("{}{attack}", mid_at(100.0));
    let defended = med(&attack_metric(&sweep(&config(&mid))));
    let (fast, time) = within(start, Duration::from_secs(600));
    let ok = structural && undefended >= defended && fast;
    report(
        6,
        "missing outputs",
        ok,
        format!(
            "all-missing contributes zero: {structural}, accuracy drop {undefended:.3} undefended vs {defended:.3} defended, {time}"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// feature reconstruction

const IMAGES: &str = r#"
seeds = [0, 1, 2, 3, 4]
[dataset]
kind = "images"
n = 400
height = 8
width = 16
[arch]
local_hidden = []
local_output = 32
[arch.head]
kind = "trainable"
[train]
epochs = 5
batch_size = 40
lr_local = 0.1
lr_head = 0.1
lr_vib = 0.1
[attack]
kind = "cafe"
"#;

fn bottleneck_degrades_feature_reconstruction() {
    let start = Instant::now();
    let psnr = |rows: &[ResultRow]| med(&column(rows, |r| r.metrics.psnr));
    let undefended = psnr(&sweep(&config(IMAGES)));
    let mid = format!("{IMAGES}[train.defense]\nkind = \"mid\"\nlambda = 1000.0\nplacement = \"passive\"\n");
    let defended = psnr(&sweep(&config(&mid)));

    let mut rng = Rng::named(7, "single-sample");
    let model = MlpModel::new(&[64, 8], &mut rng).unwrap();
    let x = Tensor::matrix(1, 64, (0..64).map(|_| rng.uniform()).collect()).unwrap();
    let up = random_matrix(&mut rng, 1, 8, 0.1);
    let obs = simulate_observation(&model, None, &x, &up).unwrap();
    let r = cafe_reconstruct(&model, None, &obs, &CafeConfig::default(), None, &mut rng).unwrap();
    let rel = r.x.zip_map(&x, |a, b| a - b).norm() / x.norm();

    let (fast, time) = within(start, Duration::from_secs(300));
    let ok = undefended - defended >= 5.0 && rel < 1e-3 && fast;
    report(
        7,
        "reconstruction quality",
        ok,
        format!("median PSNR {undefended:.2} dB undefended vs {defended:.2} dB defended, single-sample relative error {rel:.2e}, {time}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// information quantities

fn brute_force_mi(counts: &[Vec<u64>]) -> f64 {
    let total: u64 = counts.iter().flatten().sum();
    let n = total as f64;
    let cols = counts[0].len();
    let mut mi = 0.0;
    for (i, row) in counts.iter().enumerate() {
        for j in 0..cols {
            if row[j] == 0 {
                continue;
            }
            let mut pa = 0u64;
            for k in 0..cols {
                pa += counts[i][k];
            }
            let mut pb = 0u64;
            for r in counts {
                pb += r[j];
            }
            let p = row[j] as f64 / n;
            mi += p * (p / ((pa as f64 / n) * (pb as f64 / n))).ln();
        }
    }
    mi
}

fn bound(i: f64, ip: f64, t: f64, p: f64, pp: f64, m: f64) -> f64 {
    theorem1_rhs(&BoundInputs {
        i_ht: i,
        i_hptp: ip,
        card_t: t,
        min_p: p,
        min_p_prime: pp,
        m_count: m,
    })
    .unwrap()
    .total
}

fn information_quantities() {
    let start = Instant::now();
    let mut rng = Rng::named(8, "tables");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (r, c) = (1 + rng.below(6), 1 + rng.below(6));
        let mut counts: Vec<Vec<u64>> = (0..r).map(|_| (0..c).map(|_| rng.below(20) as u64).collect()).collect();
        counts[0][0] += 1;
        let t = JointCountTable::new(counts.clone()).unwrap();
        worst = worst.max((plugin_mi(&t).unwrap() - brute_force_mi(&counts)).abs());
    }
    let diag = plugin_mi(&JointCountTable::new(vec![vec![50, 0], vec![0, 50]]).unwrap()).unwrap();
    let degenerate = [(2.0, 0.5, 0.5), (1.0, 1.0, 1.0), (64.0, 0.01, 0.3)]
        .iter()
        .all(|&(t, p, pp)| bound(0.0, 0.0, t, p, pp, 1.0) == 0.0);

    // each comparison raises one input; the bound must not move the wrong way
    let mut violations = Vec::new();
    for k in 0..1000 {
        let mut v = [
            3.0 * rng.uniform(),
            3.0 * rng.uniform(),
            (1 + rng.below(20)) as f64,
            rng.uniform_range(0.01, 1.0),
            rng.uniform_range(0.01, 1.0),
            rng.uniform_range(1.0, 10.0),
        ];
        let before = bound(v[0], v[1], v[2], v[3], v[4], v[5]);
        let which = k % 6;
        v[which] = match which {
            2 => v[2] + (1 + rng.below(10)) as f64,
            3 | 4 => rng.uniform_range(v[which], 1.0),
            _ => v[which] + 3.0 * rng.uniform(),
        };
        let after = bound(v[0], v[1], v[2], v[3], v[4], v[5]);
        let holds = if which == 3 || which == 4 { after <= before } else { after >= before };
        if !holds {
            violations.push(which);
        }
    }
    let names = ["i_ht", "i_hptp", "card_t", "min_p", "min_p_prime", "m_count"];
    let by_input: Vec<String> = (0..6)
        .map(|w| format!("{} {}", names[w], violations.iter().filter(|&&x| x == w).count()))
        .collect();
    let (fast, time) = within(start, Duration::from_secs(5));
    let ok = worst < 1e-9 && (diag - std::f64::consts::LN_2).abs() < 1e-12 && degenerate && violations.is_empty() && fast;
    report(
        8,
        "information quantities",
        ok,
        format!(
            "plug-in MI worst error {worst:.1e}, diagonal {diag:.6}, degenerate bound zero {degenerate}, monotonicity violations {}/1000 [{}], {time}",
            violations.len(),
            by_input.join(", ")
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// protocol equivalences

fn mid(lambda: f64, placement: MidPlacement) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 16,
        defense: DefenseConfig::Mid(MidConfig::new(lambda, placement)),
        seed: 9,
        ..TrainConfig::default()
    }
}

fn protocol_loss_and_placement_equivalences() {
    let start = Instant::now();
    let data = gen_synthetic(200, 4, 12, 0.4, 2, &mut Rng::named(9, "data")).unwrap();
    let arch = ArchConfig::default();
    let idx: Vec<usize> = (5..45).collect();

    // multi-party objective with one passive party against the two-party formula
    let lambda = 0.37;
    let sys = VflSystem::new(&data, &arch, &mid(lambda, MidPlacement::Active)).unwrap();
    let l = sys.loss_on(&idx).unwrap();
    let batch: Vec<Tensor> = data.train.iter().map(|t| t.select_rows(&idx)).collect();
    let logits = sys.predict_logits(&batch, &[]).unwrap();
    let mut ce = 0.0;
    for (i, &y) in idx.iter().map(|&i| &data.train_labels[i]).enumerate() {
        let row = logits.row(i);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        ce += lse - row[y];
    }
    ce /= idx.len() as f64;
    let h = sys.passive(1).unwrap().model.predict(&batch[0]).unwrap();
    let (_, mu, lv) = sys.vib(1).unwrap().predict(&h).unwrap();
    let kl = mu
        .data()
        .iter()
        .zip(lv.data())
        .map(|(m, v)| 0.5 * (m * m + v.exp() - 1.0 - v))
        .sum::<f64>()
        / idx.len() as f64;
    let two_party = ce + lambda * kl;
    let multi = mid_total_loss_value(l.ce, &[(lambda, l.kls[0].2)]).unwrap();
    let objective_gap = (l.total - two_party).abs().max((multi - two_party).abs());

    // zero weight leaves exactly the cross-entropy
    let mut zero_ce = true;
    for placement in [MidPlacement::Active, MidPlacement::Passive] {
        let mut s = VflSystem::new(&data, &arch, &mid(0.0, placement)).unwrap();
        let out = s.train_round(&idx, &mut NoAttack).unwrap();
        zero_ce &= out.loss == out.ce && s.loss_on(&idx).unwrap().total == s.loss_on(&idx).unwrap().ce;
    }

    // passive and active placement step in lockstep at zero weight
    let mut act = VflSystem::new(&data, &arch, &mid(0.0, MidPlacement::Active)).unwrap();
    let mut pas = VflSystem::new(&data, &arch, &mid(0.0, MidPlacement::Passive)).unwrap();
    let mut rng = Rng::named(9, "batch");
    let mut lockstep = true;
    for _ in 0..30 {
        let b = sample_batch(data.n_train(), 16, &mut rng).unwrap();
        let a = act.train_round_active_mid(&b, &mut NoAttack).unwrap();
        let p = pas.train_round_passive_mid(&b, &mut NoAttack).unwrap();
        lockstep &= a.loss == p.loss
            && act.passive(1).unwrap().model == pas.passive(1).unwrap().model
            && act.vib(1) == pas.vib(1)
            && act.active().model == pas.active().model;
    }
    let (fast, time) = within(start, Duration::from_secs(60));
    let ok = objective_gap < 1e-12 && zero_ce && lockstep && fast;
    report(
        9,
        "protocol equivalences",
        ok,
        format!("objective gap {objective_gap:.1e}, zero weight is cross-entropy {zero_ce}, placements in lockstep {lockstep}, {time}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// determinism and threat-model audits

#[derive(Default)]
struct Audit {
    sample_rows: usize,
    batch_grads: usize,
    replace_calls: usize,
}

impl AttackHooks for Audit {
    fn attacker(&self) -> Option<usize> {
        Some(1)
    }
    fn observe(&mut self, obs: Observation<'_>) {
        match obs {
            Observation::SampleLevel { rows, .. } => self.sample_rows += rows.rows(),
            Observation::BatchLevel { .. } => self.batch_grads += 1,
        }
    }
    fn replace_gradient(&mut self, _: &[usize], _: &mut Tensor) {
        self.replace_calls += 1;
    }
}

fn csv_text(rows: &[ResultRow]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

fn determinism_and_threat_model_audits() {
    let start = Instant::now();
    let text = r#"
seeds = [0, 1, 2]
[dataset]
kind = "synthetic"
n = 400
[train]
epochs = 5
batch_size = 32
lr_local = 0.1
lr_head = 0.1
lr_vib = 0.1
[train.defense]
kind = "mid"
lambda = 0.1
[attack]
kind = "dli"
[sweep]
param = "train.defense.lambda"
values = [0.0, 0.1, 10.0]
"#;
    let mut cfg = config(text);
    cfg.threads = 1;
    let one = csv_text(&sweep(&cfg));
    let again = csv_text(&sweep(&cfg));
    cfg.threads = 4;
    let four = csv_text(&sweep(&cfg));
    let deterministic = mask_wall_ms(&one) == mask_wall_ms(&again) && mask_wall_ms(&one) == mask_wall_ms(&four);

    // label reads, across every attack
    let attacks = [
        "kind = \"dli\"",
        "kind = \"ds\"",
        "kind = \"bli\"\naux_traces = 20\nfit_epochs = 5",
        "kind = \"mc\"\nmode = \"active\"\nfinetune_epochs = 5",
        "kind = \"backdoor_replace\"\nfraction = 0.05",
        "kind = \"noisy_sample\"",
        "kind = \"missing\"",
    ];
    let mut passive_reads = 0;
    let mut total_reads = 0;
    for (k, attack) in attacks.iter().enumerate() {
        let classes = if k == 1 { 2 } else { 4 };
        let c = config(&format!(
            "[dataset]\nkind = \"synthetic\"\nn = 300\nclasses = {classes}\n[train]\nepochs = 2\nbatch_size = 32\nlr_local = 0.1\nlr_head = 0.1\nlr_vib = 0.1\n[train.defense]\nkind = \"mid\"\nlambda = 1.0\nplacement = \"passive\"\n[attack]\n{attack}\n"
        ));
        let art = run_point(&c, 0, Path::new(".")).unwrap();
        let active = art.system.active().id;
        for ((reader, _), n) in art.system.active().labels().access_log() {
            total_reads += n;
            if reader != active {
                passive_reads += n;
            }
        }
    }

    // per-sample gradient exposure under batch-level visibility
    let data = gen_synthetic(300, 4, 12, 0.5, 2, &mut Rng::named(10, "data")).unwrap();
    let mut audit = Audit::default();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 32,
        visibility: Visibility::BatchLevelOnly,
        ..TrainConfig::default()
    };
    let (sys, _) = run_training(&data, &ArchConfig::default(), &cfg, &mut audit).unwrap();
    let hidden = audit.sample_rows == 0
        && audit.replace_calls == 0
        && sys.audit().sample_level_rows == 0
        && audit.batch_grads > 0;

    let (fast, time) = within(start, Duration::from_secs(120));
    let ok = deterministic && passive_reads == 0 && total_reads > 0 && hidden && fast;
    report(
        10,
        "determinism and audits",
        ok,
        format!(
            "CSV identical across reruns and workers {deterministic}, passive label reads {passive_reads} of {total_reads}, per-sample rows seen {} with {} batch gradients, {time}",
            audit.sample_rows, audit.batch_grads
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// model completion

fn bottleneck_weakens_model_completion() {
    let start = Instant::now();
    let attack = "[attack]\nkind = \"mc\"\nmode = \"passive\"\naux_per_class = 1\n";
    let plain = format!("{PLAIN}{attack}");
    let undefended = attack_metric(&sweep(&config(&plain)));
    let mid = format!("{}{attack}", mid_at(100.0));
    let defended = attack_metric(&sweep(&config(&mid)));
    let (u, d) = (med(&undefended), med(&defended));
    let (fast, time) = within(start, Duration::from_secs(600));
    let ok = u >= 2.0 * 0.25 && d < u && fast;
    report(
        11,
        "model completion",
        ok,
        format!("per seed undefended {undefended:.3?} vs defended {defended:.3?}, medians {u:.3} vs {d:.3}, {time}"),
    );
    assert!(ok);
}

fn main() {
    let criteria: [fn(); 11] = [
        gradients_match_central_differences,
        direct_label_inference_is_exact_without_defense,
        stronger_bottleneck_lowers_label_leakage,
        gradient_transform_defenses_behave_as_configured,
        bottleneck_limits_gradient_replacement_backdoor,
        missing_outputs_hurt_less_under_the_bottleneck,
        bottleneck_degrades_feature_reconstruction,
        information_quantities,
        protocol_loss_and_placement_equivalences,
        determinism_and_threat_model_audits,
        bottleneck_weakens_model_completion,
    ];
    let failed = criteria
        .iter()
        .filter(|c| std::panic::catch_unwind(**c).is_err())
        .count();
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
