//! Finite-difference verification of the autodiff gradients.
//!
//! The oracle side only ever calls the forward pass: each sampled
//! coordinate is perturbed by `+-h` and the loss re-evaluated, so the
//! check is independent of the backward implementation it validates.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::memory::{FeatureFrame, MemoryConfig, MemoryState};
use crate::model::{
    batch_loss, init_model, loss_and_grads, IntentionLabel, ModelConfig, TrainSample,
};
use crate::params::{ParamSet, Scope};

pub const FD_STEP: f64 = 1e-4;
/// Coordinates with both gradients below this are skipped: the central
/// difference is pure cancellation noise there.
pub const GRAD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub coords_skipped: usize,
    pub param_values: usize,
}

/// A deliberately small architecture so the full parameter space stays
/// in the low thousands and finite differences run in milliseconds.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 2,
        embed_dim: 6,
        heads: 2,
        latent_tokens: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ff_dim: 8,
        work_slots: 3,
        long_slots: 4,
    }
}

/// Random memory states at assorted occupancy levels plus random labels.
pub fn random_probe_batch(cfg: &ModelConfig, seed: u64, samples: usize) -> Vec<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mem_cfg = MemoryConfig {
        fps: 1,
        work_seconds: cfg.work_slots as f64,
        long_seconds: cfg.long_slots as f64,
    };
    let max_frames = cfg.work_slots + cfg.long_slots + 2;
    (0..samples)
        .map(|_| {
            let frames = rng.random_range(1..=max_frames);
            let mut mem = MemoryState::new(mem_cfg.clone(), cfg.input_width());
            for t in 0..frames {
                let values = (0..cfg.input_width())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                mem.push_frame(FeatureFrame::new(values, t)).unwrap();
            }
            let label = IntentionLabel::from_index(rng.random_range(0..3)).unwrap();
            TrainSample::from_state(&mem, label)
        })
        .collect()
}

fn with_perturbed(params: &ParamSet, name: &str, coord: usize, delta: f64) -> ParamSet {
    let mut out = ParamSet::new();
    for (n, p, t) in params.iter() {
        let mut t = t.clone();
        if n == name {
            t.data_mut()[coord] += delta;
        }
        out.insert(n, p, t).expect("rebuilt set");
    }
    out
}

/// Compares autodiff gradients against central finite differences on
/// `coords` randomly sampled parameter coordinates of a seeded toy model.
pub fn check_random_model(cfg: &ModelConfig, seed: u64, coords: usize) -> Result<GradCheckReport> {
    let params = init_model(cfg, seed)?;
    let batch = random_probe_batch(cfg, seed ^ 0x9e3779b97f4a7c15, 2);
    check_gradients(&params, cfg, &batch, seed.wrapping_add(1), coords)
}

/// The finite-difference comparison itself.
pub fn check_gradients(
    params: &ParamSet,
    cfg: &ModelConfig,
    batch: &[TrainSample],
    coord_seed: u64,
    coords: usize,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grads(params, cfg, batch, Scope::All)?;

    // flattened coordinate space in name order
    let layout: Vec<(&str, usize)> = params.iter().map(|(n, _, t)| (n, t.numel())).collect();
    let total: usize = layout.iter().map(|(_, n)| n).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(coord_seed);
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    for _ in 0..coords {
        let mut flat = rng.random_range(0..total);
        let (name, coord) = {
            let mut found = ("", 0);
            for (n, len) in &layout {
                if flat < *len {
                    found = (*n, flat);
                    break;
                }
                flat -= len;
            }
            found
        };

        let ad = grads[name].data()[coord];
        let plus = batch_loss(&with_perturbed(params, name, coord, FD_STEP), cfg, batch)?;
        let minus = batch_loss(&with_perturbed(params, name, coord, -FD_STEP), cfg, batch)?;
        let fd = (plus - minus) / (2.0 * FD_STEP);

        if ad.abs() <= GRAD_FLOOR && fd.abs() <= GRAD_FLOOR {
            skipped += 1;
            continue;
        }
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs());
        max_rel = max_rel.max(rel);
        checked += 1;
    }

    Ok(GradCheckReport {
        max_rel_error: max_rel,
        coords_checked: checked,
        coords_skipped: skipped,
        param_values: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_model_stays_under_two_thousand_values() {
        let params = init_model(&toy_config(), 0).unwrap();
        assert!(params.total_values() <= 2000, "{}", params.total_values());
    }

    #[test]
    fn autodiff_matches_finite_differences_on_toy_model() {
        let report = check_random_model(&toy_config(), 42, 60).unwrap();
        assert!(report.coords_checked >= 30);
        assert!(
            report.max_rel_error <= 1e-3,
            "max rel error {}",
            report.max_rel_error
        );
    }
}
