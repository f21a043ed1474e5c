//! Shared fixtures for the criterion benchmarks.

use midvfl::analysis::JointCountTable;
use midvfl::defenses::{DefenseConfig, MidConfig, MidPlacement};
use midvfl::harness::data::{gen_synthetic, SplitDataset};
use midvfl::models::MlpModel;
use midvfl::protocol::{ArchConfig, TrainConfig, VflSystem};
use midvfl::{Rng, Tensor};

/// The default desk-scale task: 4 classes, 20 features, two parties.
pub fn synthetic(n: usize) -> SplitDataset {
    gen_synthetic(n, 4, 20, 0.6, 2, &mut Rng::named(0, "data")).expect("valid generator arguments")
}

/// A fresh federation on [`synthetic`], with the bottleneck at the active
/// party when `lambda` is given.
pub fn system(data: &SplitDataset, lambda: Option<f64>) -> VflSystem {
    let defense = match lambda {
        Some(l) => DefenseConfig::Mid(MidConfig::new(l, MidPlacement::Active)),
        None => DefenseConfig::None,
    };
    let cfg = TrainConfig {
        defense,
        ..TrainConfig::default()
    };
    VflSystem::new(data, &ArchConfig::default(), &cfg).expect("valid system")
}

/// A local model shaped like the default passive network and a batch for it.
pub fn mlp_and_batch(batch: usize) -> (MlpModel, Tensor) {
    let mut rng = Rng::named(1, "bench");
    let model = MlpModel::new(&[10, 32, 4], &mut rng).expect("positive widths");
    let x = Tensor::matrix(batch, 10, (0..batch * 10).map(|_| rng.normal()).collect()).expect("sized data");
    (model, x)
}

/// A random `rows × cols` count table with `total` observations.
pub fn count_table(rows: usize, cols: usize, total: usize) -> JointCountTable {
    let mut rng = Rng::named(2, "bench");
    let mut counts = vec![vec![0u64; cols]; rows];
    for _ in 0..total {
        counts[rng.below(rows)][rng.below(cols)] += 1;
    }
    JointCountTable::new(counts).expect("non-empty table")
}
