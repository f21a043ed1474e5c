//! Sweeps over (sweep value × seed) and their CSV output.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::experiment::run_point;
use crate::analysis::MetricsRecord;
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 11] = [
    "run_id",
    "seed",
    "sweep_param",
    "sweep_value",
    "defense",
    "attack",
    "main_acc",
    "attack_metric",
    "psnr",
    "epochs",
    "wall_ms",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub run_id: usize,
    pub seed: u64,
    pub sweep_param: String,
    pub sweep_value: String,
    pub defense: String,
    pub attack: String,
    pub metrics: MetricsRecord,
    /// Epochs trained, or the reason the run produced no metrics.
    pub epochs: std::result::Result<usize, String>,
    pub wall_ms: u128,
}

/// Runs every point, `threads` at a time. Rows come back in (sweep value,
/// seed) order whatever the scheduling. Failed runs become rows with empty
/// metrics; config errors abort the sweep.
pub fn run_sweep(cfg: &ExperimentConfig, base_dir: &Path) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let param = cfg.sweep.as_ref().map(|s| s.param.clone()).unwrap_or_default();
    let mut jobs = Vec::new();
    for (label, point) in cfg.points()? {
        for &seed in &cfg.seeds {
            jobs.push((jobs.len(), seed, label.clone(), point.clone()));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    let rows = pool.install(|| {
        jobs.into_par_iter()
            .map(|(run_id, seed, label, point)| {
                let start = Instant::now();
                let result = run_point(&point, seed, base_dir);
                let wall_ms = start.elapsed().as_millis();
                let (metrics, epochs) = match result {
                    Ok(r) => (r.metrics, Ok(r.log.epochs.len())),
                    Err(e @ (Error::Config(_) | Error::Io(_) | Error::Format(_))) => return Err(e),
                    Err(e) => (MetricsRecord::default(), Err(error_tag(&e))),
                };
                Ok(ResultRow {
                    run_id,
                    seed,
                    sweep_param: param.clone(),
                    sweep_value: label,
                    defense: point.train.defense.name().to_string(),
                    attack: point.attack.name().to_string(),
                    metrics,
                    epochs,
                    wall_ms,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(rows)
}

fn error_tag(e: &Error) -> String {
    match e {
        Error::Diverged { .. } => "error:diverged".into(),
        Error::ReconstructionDiverged { .. } => "error:reconstruction_diverged".into(),
        Error::AttackInapplicable(_) => "error:attack_inapplicable".into(),
        _ => "error:other".into(),
    }
}

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the header and one record per row. Missing metrics are empty
/// fields; a failed run carries its error tag in the `epochs` column.
pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(CSV_HEADER).map_err(fmt)?;
    for r in rows {
        w.write_record([
            r.run_id.to_string(),
            r.seed.to_string(),
            r.sweep_param.clone(),
            r.sweep_value.clone(),
            r.defense.clone(),
            r.attack.clone(),
            num(r.metrics.main_acc),
            num(r.metrics.attack_metric),
            num(r.metrics.psnr),
            match &r.epochs {
                Ok(n) => n.to_string(),
                Err(tag) => tag.clone(),
            },
            r.wall_ms.to_string(),
        ])
        .map_err(fmt)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_csv(rows, std::io::BufWriter::new(f))
}

/// CSV text with the `wall_ms` column blanked, for determinism comparisons.
pub fn mask_wall_ms(csv_text: &str) -> String {
    csv_text
        .lines()
        .map(|l| match l.rfind(',') {
            Some(p) => &l[..p],
            None => l,
        })
        .collect::<Vec<_>>()
        .join("\n")
}
