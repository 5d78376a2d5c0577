//! Paired training batches.
//!
//! Each sample draws a source record; the reference is either the source
//! itself or a different record from the same environment, each with equal
//! probability (self only during phase 1). Draw order is fixed, so a seeded
//! generator reproduces batches bit-exactly.

use log::info;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::dataset::EnvironmentLabel;
use crate::error::{Error, Result};
use crate::features::FeatureSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    /// Reference is the source record itself.
    SelfPair,
    /// Reference is a different record with the same environment label.
    SameEnvironment,
}

/// One padded training batch.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// Source mels, `[B, max_frames, 80]`.
    pub x: Array3<f64>,
    /// Reference mels, `[B, max_frames, 80]`.
    pub y: Array3<f64>,
    pub x_mask: Array2<bool>,
    pub y_mask: Array2<bool>,
    /// Source pitch in Hz (0 unvoiced), `[B, max_frames]`.
    pub pitch: Array2<f64>,
    /// Source energy, `[B, max_frames]`.
    pub energy: Array2<f64>,
    pub x_env: Vec<EnvironmentLabel>,
    pub y_env: Vec<EnvironmentLabel>,
    pub pair_kinds: Vec<PairKind>,
    /// Record indices (source, reference) into the feature set.
    pub indices: Vec<(usize, usize)>,
}

/// Assemble one batch from the train split.
///
/// `groups` indexes train records by environment (see
/// [`FeatureSet::by_environment`]); `candidates` is the flat train index
/// list. An environment with a single record falls back to a self pair with
/// a logged notice.
#[allow(clippy::too_many_arguments)]
pub fn make_batch(
    features: &FeatureSet,
    groups: &[Vec<usize>],
    candidates: &[usize],
    batch_size: usize,
    max_frames: usize,
    self_only: bool,
    self_pair_prob: f64,
    rng: &mut ChaCha20Rng,
) -> Result<TrainBatch> {
    if candidates.is_empty() {
        return Err(Error::Training("cannot batch from an empty split".into()));
    }
    let n_mels = crate::features::N_MELS;
    let b = batch_size;
    let mut x = Array3::from_elem((b, max_frames, n_mels), crate::features::log_floor());
    let mut y = x.clone();
    let mut x_mask = Array2::from_elem((b, max_frames), false);
    let mut y_mask = x_mask.clone();
    let mut pitch = Array2::<f64>::zeros((b, max_frames));
    let mut energy = Array2::<f64>::zeros((b, max_frames));
    let mut x_env = Vec::with_capacity(b);
    let mut y_env = Vec::with_capacity(b);
    let mut pair_kinds = Vec::with_capacity(b);
    let mut indices = Vec::with_capacity(b);

    for bi in 0..b {
        let src_idx = candidates[rng.random_range(0..candidates.len())];
        let src = &features.records[src_idx];

        // Decide the pairing, then the reference draw, in a fixed order.
        let want_self = self_only || rng.random::<f64>() < self_pair_prob;
        let env_group = &groups[src.environment.index()];
        let (ref_idx, kind) = if want_self {
            (src_idx, PairKind::SelfPair)
        } else {
            let pool: Vec<usize> = env_group.iter().copied().filter(|&i| i != src_idx).collect();
            if pool.is_empty() {
                info!(
                    "environment {} has a single clip; falling back to a self pair",
                    src.environment
                );
                (src_idx, PairKind::SelfPair)
            } else {
                (pool[rng.random_range(0..pool.len())], PairKind::SameEnvironment)
            }
        };
        let reference = &features.records[ref_idx];

        let t_src = src.frames();
        if t_src > max_frames {
            return Err(Error::Training(format!(
                "record {} has {} frames, over the {} maximum",
                src.record_id(),
                t_src,
                max_frames
            )));
        }
        let t_ref = reference.frames().min(max_frames);

        for ti in 0..t_src {
            x_mask[[bi, ti]] = true;
            pitch[[bi, ti]] = src.prosody.pitch[ti];
            energy[[bi, ti]] = src.prosody.energy[ti];
            for ci in 0..n_mels {
                x[[bi, ti, ci]] = src.mel.frames()[[ti, ci]];
            }
        }
        for ti in 0..t_ref {
            y_mask[[bi, ti]] = true;
            for ci in 0..n_mels {
                y[[bi, ti, ci]] = reference.mel.frames()[[ti, ci]];
            }
        }

        x_env.push(src.environment);
        y_env.push(reference.environment);
        pair_kinds.push(kind);
        indices.push((src_idx, ref_idx));
    }

    Ok(TrainBatch {
        x,
        y,
        x_mask,
        y_mask,
        pitch,
        energy,
        x_env,
        y_env,
        pair_kinds,
        indices,
    })
}
