use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use midvfl::analysis::{theorem1_rhs, BoundInputs};
use midvfl::attacks::{aux_subset, mc_attack, mc_infer, write_pgm, write_psnr_csv, AttackConfig};
use midvfl::harness::{run_point, run_sweep, write_csv, write_csv_file, ExperimentConfig, ResultRow};
use midvfl::models::Checkpoint;
use midvfl::{Error, Result, Rng};

mod selftest;

#[derive(Parser, Debug)]
#[command(name = "midvfl", version, about = "Vertical federated learning defense and attack simulator")]
struct Cli {
    /// Experiment file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; results go to stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sweep workers.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Trains and attacks once, ignoring any sweep.
    Run,
    /// Runs every (sweep value × seed) point.
    Sweep,
    /// Model completion against a local model saved by `run`.
    AttackEval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Passive party whose model is attacked; the config's attacker by default.
        #[arg(long)]
        party: Option<usize>,
    },
    /// Evaluates the backdoor-gap information bound.
    Bound {
        #[arg(long)]
        i_ht: f64,
        #[arg(long)]
        i_hptp: f64,
        #[arg(long, default_value_t = 2.0)]
        card_t: f64,
        #[arg(long, default_value_t = 0.5)]
        min_p: f64,
        #[arg(long, default_value_t = 0.5)]
        min_p_prime: f64,
        #[arg(long, default_value_t = 1.0)]
        m: f64,
    },
    /// Quick invariant checks; exits nonzero on any failure.
    Selftest,
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, PathBuf)> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

fn emit(rows: &[ResultRow], out: Option<&Path>) -> Result<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            write_csv_file(rows, dir.join("results.csv"))
        }
        None => write_csv(rows, std::io::stdout().lock()),
    }
}

fn cmd_run(cli: &Cli) -> Result<()> {
    let (mut cfg, base) = load_config(cli)?;
    cfg.sweep = None;
    cfg.seeds.truncate(1);
    let seed = cfg.seeds[0];
    let start = std::time::Instant::now();
    let art = run_point(&cfg, seed, &base)?;
    let row = ResultRow {
        run_id: 0,
        seed,
        sweep_param: String::new(),
        sweep_value: String::new(),
        defense: cfg.train.defense.name().into(),
        attack: cfg.attack.name().into(),
        metrics: art.metrics,
        epochs: Ok(art.log.epochs.len()),
        wall_ms: start.elapsed().as_millis(),
    };
    let out = cfg.out.clone();
    emit(std::slice::from_ref(&row), out.as_deref())?;
    if let Some(dir) = out {
        art.system.checkpoint().save(dir.join("checkpoint.bin"))?;
        let mut f = std::fs::File::create(dir.join("epochs.csv"))?;
        writeln!(f, "epoch,train_loss,train_acc,test_acc")?;
        for e in &art.log.epochs {
            writeln!(f, "{},{},{},{}", e.epoch, e.train_loss, e.train_acc, e.test_acc)?;
        }
        if let Some(rec) = &art.reconstruction {
            let (h, w) = image_shape(rec.truth.cols());
            for r in 0..rec.truth.rows() {
                write_pgm(dir.join(format!("orig_{r}.pgm")), rec.truth.row(r), h, w)?;
                write_pgm(dir.join(format!("recon_{r}.pgm")), rec.recon.row(r), h, w)?;
            }
            write_psnr_csv(dir.join("psnr.csv"), &rec.psnr)?;
        }
    }
    Ok(())
}

/// Tallest `h × w` factorization with `h ≥ w`, square when possible.
fn image_shape(n: usize) -> (usize, usize) {
    let mut w = (n as f64).sqrt() as usize;
    while w > 1 && n % w != 0 {
        w -= 1;
    }
    (n / w.max(1), w.max(1))
}

fn cmd_sweep(cli: &Cli) -> Result<()> {
    let (cfg, base) = load_config(cli)?;
    let rows = run_sweep(&cfg, &base)?;
    emit(&rows, cfg.out.as_deref())
}

fn cmd_attack_eval(cli: &Cli, checkpoint: &Path, party: Option<usize>) -> Result<()> {
    let (cfg, base) = load_config(cli)?;
    let party = party.unwrap_or(cfg.attacker);
    let seed = cfg.seeds[0];
    let ckpt = Checkpoint::load(checkpoint)?;
    let local = ckpt.mlp(&format!("party{party}"))?;
    let data = cfg.dataset.load(cfg.parties, seed, &base)?;
    if party == 0 || party >= data.parties() {
        return Err(Error::Config(format!("party {party} is not a passive party")));
    }
    let (per_class, epochs, lr) = match cfg.attack {
        AttackConfig::Mc {
            aux_per_class,
            finetune_epochs,
            lr,
            ..
        } => (aux_per_class, finetune_epochs, lr),
        _ => (1, 200, 0.1),
    };
    let aux = aux_subset(&data.train_labels, data.classes, per_class);
    let aux_y: Vec<usize> = aux.iter().map(|&i| data.train_labels[i]).collect();
    let mut rng = Rng::named(seed, "attack");
    let x = data.train[party - 1].select_rows(&aux);
    let model = mc_attack(&local, &x, &aux_y, data.classes, epochs, lr, &mut rng)?;
    let pred = mc_infer(&model, &data.test[party - 1])?;
    let acc = midvfl::analysis::agreement(&pred, &data.test_labels).unwrap_or(0.0);
    println!("party,aux_labels,completion_acc");
    println!("{party},{},{acc}", aux.len());
    Ok(())
}

fn cmd_bound(i_ht: f64, i_hptp: f64, card_t: f64, min_p: f64, min_p_prime: f64, m: f64) -> Result<()> {
    let b = theorem1_rhs(&BoundInputs {
        i_ht,
        i_hptp,
        card_t,
        min_p,
        min_p_prime,
        m_count: m,
    })?;
    println!("{}", b.total);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Format::Csv = cli.format;
    let result = match &cli.command {
        Command::Run => cmd_run(&cli),
        Command::Sweep => cmd_sweep(&cli),
        Command::AttackEval { checkpoint, party } => cmd_attack_eval(&cli, checkpoint, *party),
        Command::Bound {
            i_ht,
            i_hptp,
            card_t,
            min_p,
            min_p_prime,
            m,
        } => cmd_bound(*i_ht, *i_hptp, *card_t, *min_p, *min_p_prime, *m),
        Command::Selftest => selftest::run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
