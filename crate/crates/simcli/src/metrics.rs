//! Attack metrics and per-round rows.
//!
//! FA is the accuracy at the current round, MA its running maximum and NA
//! the final accuracy of the attack-free twin run. An attacker counts as
//! successful once its aggregation weight exceeds the mean honest weight of
//! the same round.

use nalgebra::DVector;

use ebscfl_core::rfca::{self, ClusterState, LossKind, TrainTask};

/// `(2 NA - FA - MA) / (2 NA)`; NaN when `NA = 0`.
pub fn air(fa: f64, ma: f64, na: f64) -> f64 {
    if na == 0.0 {
        return f64::NAN;
    }
    (2.0 * na - fa - ma) / (2.0 * na)
}

/// Successful attackers over total attackers; NaN without attackers.
pub fn asr(successful: usize, attackers: usize) -> f64 {
    if attackers == 0 {
        return f64::NAN;
    }
    successful as f64 / attackers as f64
}

/// Marks attackers whose weight beats the mean honest weight this round.
pub fn mark_successful(weights: &[f64], adversary: &[bool], successful: &mut [bool]) {
    let honest: Vec<f64> = weights.iter().zip(adversary).filter(|(_, &a)| !a).map(|(&w, _)| w).collect();
    let mean = if honest.is_empty() { 0.0 } else { honest.iter().sum::<f64>() / honest.len() as f64 };
    for (i, (&w, &a)) in weights.iter().zip(adversary).enumerate() {
        if a && w > mean {
            successful[i] = true;
        }
    }
}

/// Accuracy in percent: classification accuracy, or for regression the
/// coefficient of determination clipped at zero.
pub fn score(task: &TrainTask, theta: &DVector<f64>) -> f64 {
    match task.loss {
        LossKind::Logistic => 100.0 * rfca::accuracy(task, theta).unwrap_or(0.0),
        LossKind::Linear => {
            let y = &task.targets;
            let mean = y.mean();
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64;
            let mse = 2.0 * rfca::loss(task, theta);
            if var == 0.0 {
                return if mse == 0.0 { 100.0 } else { 0.0 };
            }
            100.0 * (1.0 - mse / var).max(0.0)
        }
    }
}

/// Per held-out cluster: the loss and score of the model a client of that
/// cluster would select (lowest test loss).
pub fn evaluate(state: &ClusterState, tests: &[TrainTask]) -> Vec<(f64, f64)> {
    tests
        .iter()
        .map(|t| {
            let (best, loss) = state
                .models
                .iter()
                .map(|m| rfca::loss(t, m))
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (j, l)| if l < acc.1 { (j, l) } else { acc });
            (loss, score(t, &state.models[best]))
        })
        .collect()
}

/// Parameter error under the model-to-truth matching with the smallest total
/// error (exhaustive over permutations; `m` is small).
pub fn matched_errors(models: &[DVector<f64>], truths: &[DVector<f64>]) -> Vec<f64> {
    let m = truths.len();
    let cost: Vec<Vec<f64>> = truths.iter().map(|t| models.iter().map(|s| (s - t).norm()).collect()).collect();
    let mut perm: Vec<usize> = (0..models.len()).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    permutations(&mut perm, 0, &mut |p| {
        let total: f64 = (0..m).map(|j| cost[j][p[j]]).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, p[..m].to_vec()));
        }
    });
    let (_, p) = best.expect("at least one permutation");
    (0..m).map(|j| cost[j][p[j]]).collect()
}

fn permutations(v: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permutations(v, k + 1, f);
        v.swap(k, i);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub test_loss: Vec<f64>,
    pub test_acc: Vec<f64>,
    pub param_error: Vec<f64>,
    pub fa: f64,
    pub ma: f64,
    pub asr: f64,
    pub air: f64,
    pub bytes_client: usize,
    pub bytes_server: usize,
    pub bytes_kdc: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhaseTimes {
    pub round: usize,
    pub local_train: f64,
    pub keygen: f64,
    pub encode: f64,
    pub aggregate: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn air_formula() {
        assert_eq!(air(50.0, 50.0, 50.0), 0.0);
        // NA = 55.0 is itself a rounded inversion of the published cell.
        assert!((air(45.36, 48.40, 55.0) - 0.1477).abs() < 2e-4);
        assert!(air(1.0, 1.0, 0.0).is_nan());
    }

    #[test]
    fn asr_ratio() {
        assert_eq!(asr(4, 10), 0.4);
        assert!(asr(0, 0).is_nan());
    }

    #[test]
    fn success_marking() {
        let mut s = vec![false; 4];
        mark_successful(&[0.5, 0.9, 0.1, 0.2], &[false, true, true, false], &mut s);
        assert_eq!(s, vec![false, true, false, false]);
    }

    #[test]
    fn matching_prefers_best_assignment() {
        let t = [DVector::from_element(2, 1.0), DVector::from_element(2, -1.0)];
        let m = [DVector::from_element(2, -1.1), DVector::from_element(2, 0.9)];
        let e = matched_errors(&m, &t);
        assert!(e.iter().all(|&x| x < 0.2));
    }
}
