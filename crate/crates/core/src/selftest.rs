//! Gradient checks, alignment-weight oracles and EER oracle equivalence.

use std::fmt;

use crate::encoder::{encode, encoder_gradients, EncoderParams, Utterance};
use crate::error::Result;
use crate::eval::{compute_eer, ScoreSet};
use crate::margin_head::{margin_loss, HeadBank, MarginConfig};
use crate::nesting::{DurationSet, PrefixSpec};
use crate::numerics::{grad_check, GradCheckReport, Matrix, RngStream};
use crate::objective::{alignment_weights, band_boundaries, DameObjective, WeightScheme};
use crate::oracle::brute_force_eer;
use crate::synthdata::{Instance, InstanceBatch};

pub const CHECK_NAMES: [&str; 7] = [
    "quadratic",
    "margin_loss",
    "encoder",
    "objective",
    "alignment_weights",
    "band_partition",
    "eer_oracle",
];

pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const GRADIENT_PROBES: usize = 20;
const EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestOptions {
    /// Relative tolerance of the gradient checks.
    pub tolerance: f64,
    /// Runs only checks whose name contains this string.
    pub filter: Option<String>,
    /// Flips the sign of the analytic gradient in the named check.
    pub inject_fault: Option<String>,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        SelftestOptions { tolerance: DEFAULT_TOLERANCE, filter: None, inject_fault: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelftestReport {
    pub checks: Vec<CheckOutcome>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }
}

pub fn run_selftest(opts: &SelftestOptions) -> SelftestReport {
    let selected: Vec<&'static str> = CHECK_NAMES
        .iter()
        .copied()
        .filter(|n| opts.filter.as_deref().is_none_or(|f| n.contains(f)))
        .collect();
    let checks = selected.into_iter().map(|name| run_check(name, opts)).collect();
    SelftestReport { checks }
}

fn run_check(name: &'static str, opts: &SelftestOptions) -> CheckOutcome {
    let flip = opts.inject_fault.as_deref() == Some(name);
    let result = match name {
        "quadratic" => gradient_outcome(check_quadratic(GRADIENT_PROBES, opts.tolerance, flip)),
        "margin_loss" => gradient_outcome(check_margin_loss(GRADIENT_PROBES, opts.tolerance, flip)),
        "encoder" => gradient_outcome(check_encoder(GRADIENT_PROBES, opts.tolerance, flip)),
        "objective" => gradient_outcome(check_objective(GRADIENT_PROBES, opts.tolerance, flip)),
        "alignment_weights" => check_alignment_examples(),
        "band_partition" => check_band_partition(512),
        "eer_oracle" => check_eer_oracle(1000, 100),
        _ => Err(format!("unknown check {name}")),
    };
    match result {
        Ok(detail) => CheckOutcome { name, passed: true, detail },
        Err(detail) => CheckOutcome { name, passed: false, detail },
    }
}

fn gradient_outcome(r: Result<Vec<GradCheckReport>>) -> std::result::Result<String, String> {
    let reports = r.map_err(|e| e.to_string())?;
    let worst = reports.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    let failed = reports.iter().filter(|r| !r.passed).count();
    let msg = format!("{} probes, max relative error {worst:.3e}", reports.len());
    if failed == 0 {
        Ok(msg)
    } else {
        Err(format!("{msg}, {failed} failed"))
    }
}

fn maybe_flip(mut g: Vec<f64>, flip: bool) -> Vec<f64> {
    if flip {
        g.iter_mut().for_each(|v| *v = -*v);
    }
    g
}

/// `f(x) = Σ a_i x_i² + b_i x_i`, exact under central differences.
pub fn check_quadratic(probes: usize, tol: f64, flip: bool) -> Result<Vec<GradCheckReport>> {
    let mut rng = RngStream::new(0x51);
    (0..probes)
        .map(|_| {
            let n = 1 + rng.below(8);
            let a: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
            let x: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
            let g: Vec<f64> = (0..n).map(|i| 2.0 * a[i] * x[i] + b[i]).collect();
            let f = |x: &[f64]| (0..n).map(|i| a[i] * x[i] * x[i] + b[i] * x[i]).sum();
            grad_check(f, &x, &maybe_flip(g, flip), 1e-3, tol)
        })
        .collect()
}

/// Joint check of `∂L/∂z` and `∂L/∂W` on random single-head problems.
pub fn check_margin_loss(probes: usize, tol: f64, flip: bool) -> Result<Vec<GradCheckReport>> {
    let mut rng = RngStream::new(0x52);
    (0..probes)
        .map(|_| {
            let d = 2 + rng.below(15);
            let c = 2 + rng.below(7);
            let label = rng.below(c);
            let cfg = MarginConfig::new(1.0 + 20.0 * rng.uniform(), vec![0.5 * rng.uniform()])?;
            let spec = PrefixSpec::full(d)?;
            let z: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
            let bank = HeadBank::separate(spec.clone(), vec![Matrix::randn(d, c, 1.0, &mut rng)])?;
            let out = margin_loss(&z, &bank, 0, label, &cfg)?;
            let mut x = z.clone();
            x.extend(bank.to_flat());
            let mut g = out.grad_z.clone();
            g.extend_from_slice(out.grad_w.data());
            let mut probe = bank.clone();
            let f = |x: &[f64]| {
                probe.set_flat(&x[d..]).expect("shape");
                margin_loss(&x[..d], &probe, 0, label, &cfg).map(|o| o.loss).unwrap_or(f64::NAN)
            };
            grad_check(f, &x, &maybe_flip(g, flip), EPS, tol)
        })
        .collect()
}

fn random_encoder(f: usize, h: usize, d: usize, rng: &mut RngStream) -> EncoderParams {
    let mut p = EncoderParams::init(f, h, d, rng);
    p.b1.iter_mut().for_each(|b| *b = 0.3 * rng.gaussian());
    p.b2.iter_mut().for_each(|b| *b = 0.3 * rng.gaussian());
    p
}

/// Parameter gradient of `⟨u, encode(x)⟩` for random upstream `u`.
pub fn check_encoder(probes: usize, tol: f64, flip: bool) -> Result<Vec<GradCheckReport>> {
    let mut rng = RngStream::new(0x53);
    (0..probes)
        .map(|_| {
            let (f, h, d) = (1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6));
            let t = 1 + rng.below(9);
            let p = random_encoder(f, h, d, &mut rng);
            let u = Utterance::new(Matrix::randn(t, f, 1.0, &mut rng), 0, "probe")?;
            let upstream: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
            let g = encoder_gradients(&u, &p, &upstream)?;
            let mut probe = p.clone();
            let fun = |x: &[f64]| {
                probe.set_flat(x).expect("shape");
                encode(&u, &probe).map(|z| z.values().iter().zip(&upstream).map(|(a, b)| a * b).sum()).unwrap_or(f64::NAN)
            };
            grad_check(fun, &p.to_flat(), &maybe_flip(g.params.to_flat(), flip), EPS, tol)
        })
        .collect()
}

/// Full batch loss w.r.t. encoder and every head, soft weighting with two
/// durations and three prefixes.
pub fn check_objective(probes: usize, tol: f64, flip: bool) -> Result<Vec<GradCheckReport>> {
    let mut rng = RngStream::new(0x54);
    let spec = PrefixSpec::new(vec![2, 4, 6])?;
    let durations = DurationSet::from_frames(vec![3, 5])?;
    (0..probes)
        .map(|_| {
            let (f, h, c) = (4, 5, 3 + rng.below(3));
            let enc = random_encoder(f, h, spec.full_dim(), &mut rng);
            let heads = spec.dims().iter().map(|&d| Matrix::randn(d, c, 1.0, &mut rng)).collect();
            let bank = HeadBank::separate(spec.clone(), heads)?;
            let alpha = rng.uniform();
            let cfg = MarginConfig::new(5.0, vec![0.0, 0.1, 0.3])?;
            let weights = alignment_weights(WeightScheme::Soft, 2, 3)?;
            let obj = DameObjective::new(weights, alpha, vec![cfg.clone(), cfg])?;
            let instances = (0..3)
                .map(|_| {
                    let speaker = rng.below(c);
                    let chunks = durations
                        .frames()
                        .iter()
                        .map(|&t| Utterance::new(Matrix::randn(t, f, 1.0, &mut rng), speaker, "chunk"))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Instance { speaker, chunks })
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = InstanceBatch { instances };
            let out = obj.evaluate(&enc, &bank, &batch)?;
            let ne = enc.num_params();
            let mut x = enc.to_flat();
            x.extend(bank.to_flat());
            let mut g = out.encoder_grad.to_flat();
            g.extend(out.head_grad.as_flat());
            let (mut pe, mut pb) = (enc.clone(), bank.clone());
            let fun = |x: &[f64]| {
                pe.set_flat(&x[..ne]).expect("shape");
                pb.set_flat(&x[ne..]).expect("shape");
                obj.evaluate(&pe, &pb, &batch).map(|o| o.loss).unwrap_or(f64::NAN)
            };
            grad_check(fun, &x, &maybe_flip(g, flip), EPS, tol)
        })
        .collect()
}

pub fn check_alignment_examples() -> std::result::Result<String, String> {
    let e = |e: crate::error::DameError| e.to_string();
    let hw = alignment_weights(WeightScheme::Hard, 3, 3).map_err(e)?;
    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    if hw.c.data() != eye {
        return Err(format!("HW(3,3) = {:?}", hw.c.data()));
    }
    let sw = alignment_weights(WeightScheme::Soft, 2, 4).map_err(e)?;
    let expect = [1.0, 1.0, 0.25, 0.5, 0.0625, 0.125, 1.0, 1.0];
    if sw.c.data() != expect {
        return Err(format!("SW(2,4) = {:?}", sw.c.data()));
    }
    Ok("HW(3,3) = I, SW(2,4) exact".into())
}

/// Bands `(b_{j-1}, b_j]` tile `1..=K` without overlap or gap.
pub fn check_band_partition(max_k: usize) -> std::result::Result<String, String> {
    let mut pairs = 0usize;
    for k in 1..=max_k {
        let mut owner = vec![0usize; k + 1];
        for j in 1..=k {
            let b = band_boundaries(j, k).map_err(|e| e.to_string())?;
            if b.len() != j + 1 || b[0] != 0 || b[j] != k {
                return Err(format!("J={j}, K={k}: bad endpoints {:?}", (b.first(), b.last())));
            }
            owner.iter_mut().for_each(|o| *o = 0);
            for band in 0..j {
                if b[band] >= b[band + 1] {
                    return Err(format!("J={j}, K={k}: empty band {}", band + 1));
                }
                for o in &mut owner[b[band] + 1..=b[band + 1]] {
                    *o += 1;
                }
            }
            if owner[1..].iter().any(|&o| o != 1) {
                return Err(format!("J={j}, K={k}: bands overlap or leave gaps"));
            }
            pairs += 1;
        }
    }
    Ok(format!("{pairs} (J, K) pairs up to K={max_k}"))
}

fn random_scores(rng: &mut RngStream, n: usize, shift: f64, grid: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.gaussian() + shift;
            if grid {
                (v * 4.0).round() / 4.0
            } else {
                v
            }
        })
        .collect()
}

/// Random score set with `2..=max_total` scores, ties on half of them.
pub fn random_score_set(rng: &mut RngStream, max_total: usize) -> ScoreSet {
    let total = 2 + rng.below(max_total - 1);
    let n_t = 1 + rng.below(total - 1);
    let grid = rng.below(2) == 0;
    let shift = 2.0 * rng.uniform();
    let t = random_scores(rng, n_t, shift, grid);
    let n = random_scores(rng, total - n_t, 0.0, grid);
    ScoreSet::new(t, n).expect("finite, non-empty")
}

pub fn check_eer_oracle(sets: usize, transforms: usize) -> std::result::Result<String, String> {
    let mut rng = RngStream::new(0x55);
    for i in 0..sets {
        let s = random_score_set(&mut rng, 200);
        let (fast, slow) = (compute_eer(&s), brute_force_eer(&s));
        if fast.to_bits() != slow.to_bits() {
            return Err(format!("set {i}: sweep {fast} vs brute force {slow}"));
        }
    }
    let mut worst = 0.0f64;
    for i in 0..transforms {
        let s = random_score_set(&mut rng, 200);
        let base = compute_eer(&s);
        let a = 0.1 + 5.0 * rng.uniform();
        let b = rng.gaussian();
        let c = 0.1 + rng.uniform();
        let map = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).collect::<Vec<f64>>();
        let affine = |x: f64| a * x + b;
        let cubic = |x: f64| x * x * x + c * x;
        for (label, f) in [("affine", &affine as &dyn Fn(f64) -> f64), ("cubic", &cubic)] {
            let t = ScoreSet::new(map(s.targets(), f), map(s.nontargets(), f)).map_err(|e| e.to_string())?;
            let diff = (compute_eer(&t) - base).abs();
            worst = worst.max(diff);
            if diff > 1e-12 {
                return Err(format!("transform {i} ({label}): EER moved by {diff:e}"));
            }
        }
    }
    Ok(format!("{sets} sets bitwise equal to brute force, {transforms} monotone transforms (max drift {worst:e})"))
}
