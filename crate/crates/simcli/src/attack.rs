//! Byzantine client behaviour.
//!
//! The cosine-guided attack stands in for the Sine attack: with knowledge of
//! the benign updates of its cluster it submits a vector whose cosine with the
//! benign mean is `target_cosine` and whose norm is `boost` times the mean's,
//! pointing away from its own honest direction in the orthogonal complement.

use nalgebra::DVector;
use rand::seq::index;

use ebscfl_core::rfca::{clustered_model_update, ClientUpdate, TrainTask};
use ebscfl_core::rng::{self, Rng};

use crate::config::{AttackConfig, AttackKind};
use crate::data::flip_labels;
use crate::error::SimResult;

/// `count` adversarial client indices, drawn once per seed.
pub fn pick_adversaries(n: usize, count: usize, seed: u64) -> Vec<bool> {
    let mut flags = vec![false; n];
    let mut rng = rng::substream(rng::derive_seed(seed, "sim/adversaries"), 0);
    for i in index::sample(&mut rng, n, count.min(n)) {
        flags[i] = true;
    }
    flags
}

/// What an adversary knows when it crafts its update.
pub struct AttackContext<'a> {
    pub models: &'a [DVector<f64>],
    pub task: &'a TrainTask,
    pub eta: f64,
    /// Mean of the benign updates assigned to the adversary's cluster.
    pub benign_mean: Option<&'a DVector<f64>>,
}

pub fn inject_attack(honest: ClientUpdate, spec: &AttackConfig, ctx: &AttackContext<'_>, rng: &mut Rng) -> SimResult<ClientUpdate> {
    Ok(match spec.kind {
        AttackKind::None => honest,
        AttackKind::SignFlip => ClientUpdate::new(honest.cluster, -honest.gradient),
        AttackKind::Scaling => ClientUpdate::new(honest.cluster, honest.gradient * spec.scale),
        AttackKind::LabelFlip => {
            // The attacker keeps the cluster its clean data selects and
            // trains that model on flipped labels.
            let flipped = flip_labels(ctx.task);
            let own = std::slice::from_ref(&ctx.models[honest.cluster]);
            let (_, g) = clustered_model_update(own, &flipped, ctx.eta, flipped.local_iters, rng)?;
            ClientUpdate::new(honest.cluster, g)
        }
        AttackKind::CosineGuided => match ctx.benign_mean {
            Some(mu) if mu.norm() > 0.0 => {
                let g = cosine_guided(mu, &honest.gradient, spec.target_cosine, spec.boost);
                ClientUpdate::new(honest.cluster, g)
            }
            _ => ClientUpdate::new(honest.cluster, -honest.gradient),
        },
    })
}

/// `boost * |mu| * (c * mu_hat + sqrt(1 - c^2) * v_hat)` with `v_hat` the
/// unit component of `-own` orthogonal to `mu`.
pub fn cosine_guided(mu: &DVector<f64>, own: &DVector<f64>, c: f64, boost: f64) -> DVector<f64> {
    let mu_hat = mu.normalize();
    let mut v = -own - &mu_hat * (-own).dot(&mu_hat);
    if v.norm() <= 1e-12 * own.norm().max(1.0) {
        // Own update parallel to the mean: any orthogonal direction will do.
        let k = mu_hat.iamin();
        v = DVector::from_fn(mu.len(), |i, _| if i == k { 1.0 } else { 0.0 });
        v -= &mu_hat * v.dot(&mu_hat);
    }
    let v_hat = v.normalize();
    (mu_hat * c + v_hat * (1.0 - c * c).max(0.0).sqrt()) * (boost * mu.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ebscfl_core::rfca::{cosine_weight, LossKind};
    use nalgebra::DMatrix;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn ctx_task() -> TrainTask {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 2.0]);
        let y = &x * dv(&[1.0, -1.0]);
        TrainTask::new(LossKind::Linear, x, y, 4, 3).unwrap()
    }

    #[test]
    fn sign_flip_negates() {
        let task = ctx_task();
        let models = [dv(&[0.0, 0.0])];
        let ctx = AttackContext { models: &models, task: &task, eta: 0.1, benign_mean: None };
        let spec = AttackConfig { kind: AttackKind::SignFlip, ..AttackConfig::default() };
        let mut rng = rng::substream(1, 1);
        let out = inject_attack(ClientUpdate::new(0, dv(&[1.0, -2.0])), &spec, &ctx, &mut rng).unwrap();
        assert_eq!(out.gradient, dv(&[-1.0, 2.0]));
        assert_eq!(out.cluster, 0);
    }

    #[test]
    fn label_flip_points_away_from_truth() {
        let task = ctx_task();
        let models = [dv(&[0.0, 0.0])];
        let ctx = AttackContext { models: &models, task: &task, eta: 0.1, benign_mean: None };
        let spec = AttackConfig { kind: AttackKind::LabelFlip, ..AttackConfig::default() };
        let mut rng = rng::substream(1, 1);
        let out = inject_attack(ClientUpdate::new(0, dv(&[1.0, -1.0])), &spec, &ctx, &mut rng).unwrap();
        assert!(out.gradient.dot(&dv(&[1.0, -1.0])) < 0.0);
    }

    #[test]
    fn cosine_guided_hits_target() {
        let mu = dv(&[1.0, 2.0, -1.0, 0.5]);
        let own = dv(&[0.9, 2.1, -0.8, 0.4]);
        let g = cosine_guided(&mu, &own, 0.1, 10.0);
        assert!((cosine_weight(&g, &mu) - 0.1).abs() < 1e-12);
        assert!((g.norm() - 10.0 * mu.norm()).abs() < 1e-9);
        let parallel = cosine_guided(&mu, &(&mu * 2.0), 0.1, 1.0);
        assert!((cosine_weight(&parallel, &mu) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn adversary_count_is_exact() {
        let flags = pick_adversaries(10, 4, 3);
        assert_eq!(flags.iter().filter(|&&f| f).count(), 4);
        assert_eq!(flags, pick_adversaries(10, 4, 3));
    }
}
