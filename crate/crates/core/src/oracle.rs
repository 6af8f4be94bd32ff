//! Independent reference implementations used by the self-test suite.

use crate::eval::ScoreSet;

/// EER by exhaustive enumeration: every distinct score and `+inf` is a
/// threshold, and both error counts are recomputed from scratch at each.
pub fn brute_force_eer(s: &ScoreSet) -> f64 {
    let mut thresholds: Vec<f64> = s.targets().iter().chain(s.nontargets()).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let (n_t, n_n) = (s.targets().len(), s.nontargets().len());
    let rates = |th: f64| {
        let misses = s.targets().iter().filter(|&&x| x < th).count();
        let accepts = s.nontargets().iter().filter(|&&x| x >= th).count();
        (misses as f64 / n_t as f64, accepts as f64 / n_n as f64)
    };
    let mut prev = rates(thresholds[0]);
    for &th in &thresholds {
        let (frr, far) = rates(th);
        let diff = far - frr;
        if diff == 0.0 {
            return frr;
        }
        if diff < 0.0 {
            let prev_diff = prev.1 - prev.0;
            let w = prev_diff / (prev_diff - diff);
            return prev.0 + w * (frr - prev.0);
        }
        prev = (frr, far);
    }
    unreachable!("FAR - FRR is -1 at +inf")
}
