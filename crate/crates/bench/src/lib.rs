//! Benchmark fixtures.

use dame_core::encoder::{EncoderParams, Utterance};
use dame_core::eval::ScoreSet;
use dame_core::margin_head::{make_gt_heads, HeadBank, MarginConfig};
use dame_core::nesting::PrefixSpec;
use dame_core::numerics::{Matrix, RngStream};
use dame_core::objective::{alignment_weights, DameObjective, WeightScheme};
use dame_core::synthdata::{Instance, InstanceBatch};

pub const FEATURES: usize = 48;
pub const HIDDEN: usize = 64;
pub const CLASSES: usize = 64;

pub fn spec() -> PrefixSpec {
    PrefixSpec::new(vec![24, 48, 96, 192]).expect("increasing dims")
}

pub fn encoder(seed: u64) -> EncoderParams {
    EncoderParams::init(FEATURES, HIDDEN, spec().full_dim(), &mut RngStream::new(seed))
}

pub fn heads(seed: u64) -> HeadBank {
    make_gt_heads(&spec(), CLASSES, &mut RngStream::new(seed)).expect("valid spec")
}

pub fn utterance(frames: usize, speaker: usize, rng: &mut RngStream) -> Utterance {
    Utterance::new(Matrix::randn(frames, FEATURES, 1.0, rng), speaker, "bench").expect("finite frames")
}

pub fn embedding(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed);
    (0..dim).map(|_| rng.gaussian()).collect()
}

pub fn score_set(targets: usize, nontargets: usize, seed: u64) -> ScoreSet {
    let mut rng = RngStream::new(seed);
    let t = (0..targets).map(|_| 1.0 + rng.gaussian()).collect();
    let n = (0..nontargets).map(|_| rng.gaussian()).collect();
    ScoreSet::new(t, n).expect("non-empty")
}

/// `speakers` instances with 1 s and 2 s chunks at 20 frames per second.
pub fn batch(speakers: usize, seed: u64) -> InstanceBatch {
    let mut rng = RngStream::new(seed);
    let instances = (0..speakers)
        .map(|s| Instance { speaker: s % CLASSES, chunks: vec![utterance(20, s, &mut rng), utterance(40, s, &mut rng)] })
        .collect();
    InstanceBatch { instances }
}

pub fn soft_objective() -> DameObjective {
    let margins = MarginConfig::new(30.0, vec![0.0, 0.0, 0.1, 0.2]).expect("valid margins");
    DameObjective::new(alignment_weights(WeightScheme::Soft, 2, 4).expect("J < K"), 0.5, vec![margins; 2])
        .expect("consistent objective")
}
