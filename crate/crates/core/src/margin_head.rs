//! Additive angular margin classifier heads over prefix embeddings.
//!
//! The target logit is `s * psi(cos θ_y)` with `psi(x) = cos(acos(x) + m)`
//! while `θ_y + m <= π`, and the monotone surrogate `x - m sin m` past that
//! point. Non-target logits are `s * cos θ_c`. Cosines are taken between the
//! normalized prefix embedding and normalized head columns, and gradients are
//! propagated through both normalizations.

use std::io::{Read, Write};

use crate::binio::{self, DecodeError, DecodeResult};
use crate::error::{DameError, Result};
use crate::nesting::PrefixSpec;
use crate::numerics::{norm, Matrix, RngStream, ZERO_NORM};

pub const HEAD_MAGIC: &[u8; 8] = b"DAMEHEAD";

/// Logit scale and per-prefix additive angular margins (radians).
#[derive(Debug, Clone, PartialEq)]
pub struct MarginConfig {
    pub scale: f64,
    /// One margin per prefix index of the head bank.
    pub margins: Vec<f64>,
}

impl MarginConfig {
    pub fn new(scale: f64, margins: Vec<f64>) -> Result<Self> {
        let cfg = MarginConfig { scale, margins };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(DameError::ConfigInvalid(format!("logit scale must be positive, got {}", self.scale)));
        }
        if let Some(m) = self.margins.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            return Err(DameError::ConfigInvalid(format!("margin {m} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Separate,
    Tied,
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    Separate(Vec<Matrix>),
    Tied(Matrix),
}

/// Per-prefix classifier weights `W_k` (`d_k x C`).
///
/// In tied mode there is one `D x C` matrix and the head for `d_k` is its
/// leading `d_k` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadBank {
    spec: PrefixSpec,
    classes: usize,
    storage: Storage,
}

/// Borrowed `rows x classes` row-major block.
#[derive(Debug, Clone, Copy)]
pub struct HeadView<'a> {
    pub rows: usize,
    pub classes: usize,
    pub data: &'a [f64],
}

impl HeadView<'_> {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.classes + c]
    }
}

/// Gradient with the same layout as the bank it was computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    storage: Storage,
}

impl HeadGradients {
    pub fn as_flat(&self) -> Vec<f64> {
        match &self.storage {
            Storage::Separate(ms) => ms.iter().flat_map(|m| m.data().iter().copied()).collect(),
            Storage::Tied(m) => m.data().to_vec(),
        }
    }

    /// Adds a `d_k x C` gradient for prefix `k`. Tied banks add into the
    /// leading rows of the shared matrix.
    pub fn accumulate(&mut self, k: usize, grad: &Matrix, scale: f64) {
        let dst = match &mut self.storage {
            Storage::Separate(ms) => ms[k].data_mut(),
            Storage::Tied(m) => &mut m.data_mut()[..grad.data().len()],
        };
        for (d, g) in dst.iter_mut().zip(grad.data()) {
            *d += scale * g;
        }
    }

    pub fn tied_matrix(&self) -> Option<&Matrix> {
        match &self.storage {
            Storage::Tied(m) => Some(m),
            Storage::Separate(_) => None,
        }
    }

    pub fn separate_matrices(&self) -> Option<&[Matrix]> {
        match &self.storage {
            Storage::Separate(ms) => Some(ms),
            Storage::Tied(_) => None,
        }
    }
}

impl HeadBank {
    pub fn mode(&self) -> HeadMode {
        match self.storage {
            Storage::Separate(_) => HeadMode::Separate,
            Storage::Tied(_) => HeadMode::Tied,
        }
    }

    pub fn spec(&self) -> &PrefixSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn num_heads(&self) -> usize {
        self.spec.len()
    }

    /// Separate heads from explicit matrices; matrix `k` must have `d_k` rows.
    pub fn separate(spec: PrefixSpec, heads: Vec<Matrix>) -> Result<Self> {
        if heads.len() != spec.len() {
            return Err(DameError::ShapeMismatch(format!("{} heads for {} prefixes", heads.len(), spec.len())));
        }
        let classes = heads[0].cols();
        for (k, h) in heads.iter().enumerate() {
            if h.rows() != spec.dim(k) || h.cols() != classes {
                return Err(DameError::ShapeMismatch(format!(
                    "head {k} is {}x{}, expected {}x{classes}",
                    h.rows(),
                    h.cols(),
                    spec.dim(k)
                )));
            }
        }
        if classes < 2 {
            return Err(DameError::ConfigInvalid("need at least 2 classes".into()));
        }
        Ok(HeadBank {
            spec,
            classes,
            storage: Storage::Separate(heads),
        })
    }

    pub fn head(&self, k: usize) -> HeadView<'_> {
        let rows = self.spec.dim(k);
        let data = match &self.storage {
            Storage::Separate(ms) => ms[k].data(),
            Storage::Tied(m) => m.leading_rows(rows),
        };
        HeadView {
            rows,
            classes: self.classes,
            data,
        }
    }

    /// The shared matrix of a tied bank.
    pub fn shared(&self) -> Option<&Matrix> {
        match &self.storage {
            Storage::Tied(m) => Some(m),
            Storage::Separate(_) => None,
        }
    }

    pub fn shared_mut(&mut self) -> Option<&mut Matrix> {
        match &mut self.storage {
            Storage::Tied(m) => Some(m),
            Storage::Separate(_) => None,
        }
    }

    /// Matrix holding the full-dimension head: the shared matrix when tied,
    /// the last separate head otherwise.
    pub fn full_head(&self) -> &Matrix {
        match &self.storage {
            Storage::Tied(m) => m,
            Storage::Separate(ms) => ms.last().expect("non-empty"),
        }
    }

    pub fn zero_gradients(&self) -> HeadGradients {
        let storage = match &self.storage {
            Storage::Separate(ms) => Storage::Separate(ms.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect()),
            Storage::Tied(m) => Storage::Tied(Matrix::zeros(m.rows(), m.cols())),
        };
        HeadGradients { storage }
    }

    pub fn num_params(&self) -> usize {
        match &self.storage {
            Storage::Separate(ms) => ms.iter().map(|m| m.data().len()).sum(),
            Storage::Tied(m) => m.data().len(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        match &self.storage {
            Storage::Separate(ms) => ms.iter().flat_map(|m| m.data().iter().copied()).collect(),
            Storage::Tied(m) => m.data().to_vec(),
        }
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(DameError::ShapeMismatch(format!(
                "{} values for {} head parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut rest = flat;
        let mut take = |m: &mut Matrix| {
            let (head, tail) = rest.split_at(m.data().len());
            m.data_mut().copy_from_slice(head);
            rest = tail;
        };
        match &mut self.storage {
            Storage::Separate(ms) => ms.iter_mut().for_each(&mut take),
            Storage::Tied(m) => take(m),
        }
        Ok(())
    }

    /// `W <- W - lr * g` on every stored matrix.
    pub fn apply_sgd(&mut self, grads: &HeadGradients, lr: f64) -> Result<()> {
        match (&mut self.storage, &grads.storage) {
            (Storage::Separate(ms), Storage::Separate(gs)) if ms.len() == gs.len() => {
                for (m, g) in ms.iter_mut().zip(gs) {
                    crate::trainer::sgd_step(m.data_mut(), g.data(), lr)?;
                }
                Ok(())
            }
            (Storage::Tied(m), Storage::Tied(g)) => crate::trainer::sgd_step(m.data_mut(), g.data(), lr),
            _ => Err(DameError::ShapeMismatch("gradient layout does not match head bank".into())),
        }
    }

    /// True when every prefix head of a tied bank is a view of the leading
    /// `d_k` rows of the one shared matrix. Always false for separate banks.
    pub fn tied_aliasing_holds(&self) -> bool {
        let Some(w) = self.shared() else { return false };
        let base = w.data().as_ptr();
        (0..self.num_heads()).all(|k| {
            let h = self.head(k);
            h.data.as_ptr() == base && h.data.len() == self.spec.dim(k) * self.classes && h.data == w.leading_rows(h.rows)
        })
    }

    pub fn is_finite(&self) -> bool {
        match &self.storage {
            Storage::Separate(ms) => ms.iter().all(Matrix::is_finite),
            Storage::Tied(m) => m.is_finite(),
        }
    }

    /// `DAMEHEAD`, mode byte (0 separate, 1 tied), `u32` K, `u32` C, K `u32`
    /// dimensions, then the stored matrices row-major as `f64` LE.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(HEAD_MAGIC)?;
        let mode = match self.mode() {
            HeadMode::Separate => 0u8,
            HeadMode::Tied => 1u8,
        };
        w.write_all(&[mode])?;
        binio::write_u32(w, binio::dim_u32(self.spec.len())?)?;
        binio::write_u32(w, binio::dim_u32(self.classes)?)?;
        for &d in self.spec.dims() {
            binio::write_u32(w, binio::dim_u32(d)?)?;
        }
        binio::write_f64s(w, &self.to_flat())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub(crate) fn read_from<R: Read>(r: &mut R) -> DecodeResult<Self> {
        binio::expect_magic(r, HEAD_MAGIC)?;
        let mode = binio::read_u8(r)?;
        let k = binio::read_u32(r)? as usize;
        let classes = binio::read_u32(r)? as usize;
        if k == 0 || k > 4096 {
            return Err(DecodeError::Format(format!("implausible head count {k}")));
        }
        let dims = (0..k)
            .map(|_| binio::read_u32(r).map(|d| d as usize))
            .collect::<DecodeResult<Vec<_>>>()?;
        let spec = PrefixSpec::new(dims).map_err(|e| DecodeError::Format(e.to_string()))?;
        let bank = match mode {
            0 => {
                let mut heads = Vec::with_capacity(k);
                for &d in spec.dims() {
                    let vals = binio::read_f64s(r, d * classes)?;
                    heads.push(Matrix::from_vec(d, classes, vals).expect("sized"));
                }
                HeadBank::separate(spec, heads)
            }
            1 => {
                let vals = binio::read_f64s(r, spec.full_dim() * classes)?;
                tie_heads(Matrix::from_vec(spec.full_dim(), classes, vals).expect("sized"), spec)
            }
            other => return Err(DecodeError::Format(format!("unknown head mode {other}"))),
        };
        bank.map_err(|e| DecodeError::Format(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = bytes;
        let b = Self::read_from(&mut cur).map_err(|e| e.to_string())?;
        if !cur.is_empty() {
            return Err(format!("{} trailing bytes", cur.len()));
        }
        Ok(b)
    }
}

/// Separate Gaussian heads, entries scaled by `1/sqrt(d_k)`.
pub fn make_gt_heads(spec: &PrefixSpec, classes: usize, rng: &mut RngStream) -> Result<HeadBank> {
    if classes < 2 {
        return Err(DameError::ConfigInvalid("need at least 2 classes".into()));
    }
    let heads = spec
        .dims()
        .iter()
        .map(|&d| Matrix::randn(d, classes, 1.0 / (d as f64).sqrt(), rng))
        .collect();
    HeadBank::separate(spec.clone(), heads)
}

/// Shares `w` (`D x C`) among all prefixes by leading rows.
pub fn tie_heads(w: Matrix, spec: PrefixSpec) -> Result<HeadBank> {
    if w.rows() != spec.full_dim() {
        return Err(DameError::ShapeMismatch(format!(
            "shared head has {} rows, full dimension is {}",
            w.rows(),
            spec.full_dim()
        )));
    }
    if w.cols() < 2 {
        return Err(DameError::ConfigInvalid("need at least 2 classes".into()));
    }
    Ok(HeadBank {
        classes: w.cols(),
        spec,
        storage: Storage::Tied(w),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginLoss {
    pub loss: f64,
    pub grad_z: Vec<f64>,
    /// `d_k x C`.
    pub grad_w: Matrix,
}

/// `(psi(x), psi'(x))` for the target cosine.
fn target_transform(x: f64, m: f64) -> (f64, f64) {
    if m == 0.0 {
        return (x, 1.0);
    }
    let (sin_m, cos_m) = m.sin_cos();
    if x > -cos_m {
        // cos(θ + m) = x cos m - sin θ sin m
        let sin_t = (1.0 - x * x).max(0.0).sqrt();
        let value = x * cos_m - sin_t * sin_m;
        let deriv = if sin_t > 0.0 { cos_m + x / sin_t * sin_m } else { cos_m };
        (value, deriv)
    } else {
        (x - m * sin_m, 1.0)
    }
}

/// Margin softmax cross-entropy for prefix `k` of the bank.
pub fn margin_loss(z_prefix: &[f64], bank: &HeadBank, k: usize, label: usize, cfg: &MarginConfig) -> Result<MarginLoss> {
    if k >= bank.num_heads() || z_prefix.len() != bank.spec().dim(k) {
        return Err(DameError::InvalidPrefix(z_prefix.len()));
    }
    let margin = *cfg.margins.get(k).ok_or_else(|| {
        DameError::ConfigInvalid(format!("no margin configured for prefix index {k}"))
    })?;
    head_loss(z_prefix, bank.head(k), label, cfg.scale, margin)
}

/// Same loss against an explicit head view.
pub fn head_loss(z: &[f64], head: HeadView<'_>, label: usize, scale: f64, margin: f64) -> Result<MarginLoss> {
    let (d, classes) = (head.rows, head.classes);
    if z.len() != d {
        return Err(DameError::InvalidPrefix(z.len()));
    }
    if label >= classes {
        return Err(DameError::LabelOutOfRange { label, classes });
    }
    let z_norm = norm(z);
    if !(z_norm >= ZERO_NORM) {
        return Err(DameError::ZeroVector);
    }
    let z_hat: Vec<f64> = z.iter().map(|v| v / z_norm).collect();

    let mut col_norm = vec![0.0; classes];
    let mut raw = vec![0.0; classes];
    for r in 0..d {
        let row = &head.data[r * classes..(r + 1) * classes];
        let zr = z_hat[r];
        for c in 0..classes {
            col_norm[c] += row[c] * row[c];
            raw[c] += row[c] * zr;
        }
    }
    for n in col_norm.iter_mut() {
        *n = n.sqrt();
        if !(*n >= ZERO_NORM) {
            return Err(DameError::ZeroVector);
        }
    }
    let cos: Vec<f64> = raw.iter().zip(&col_norm).map(|(r, n)| (r / n).clamp(-1.0, 1.0)).collect();

    let (psi, dpsi) = target_transform(cos[label], margin);
    let logits: Vec<f64> = (0..classes)
        .map(|c| scale * if c == label { psi } else { cos[c] })
        .collect();
    let arg_max = (0..classes).fold(0, |best, c| if logits[c] > logits[best] { c } else { best });
    let max = logits[arg_max];
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let rest: f64 = exps.iter().enumerate().filter(|&(c, _)| c != arg_max).map(|(_, e)| e).sum();
    let loss = rest.ln_1p() + (max - logits[label]);

    // dL/dcos_c
    let g_cos: Vec<f64> = (0..classes)
        .map(|c| {
            let p = exps[c] / sum;
            if c == label {
                scale * (p - 1.0) * dpsi
            } else {
                scale * p
            }
        })
        .collect();

    // dcos_c/dz = (ŵ_c - cos_c ẑ)/|z| ; dcos_c/dw_c = (ẑ - cos_c ŵ_c)/|w_c|
    let mut grad_z = vec![0.0; d];
    let mut grad_w = Matrix::zeros(d, classes);
    let radial: f64 = g_cos.iter().zip(&cos).map(|(g, c)| g * c).sum();
    for r in 0..d {
        let row = &head.data[r * classes..(r + 1) * classes];
        let zr = z_hat[r];
        let mut acc = 0.0;
        let grow = grad_w.row_mut(r);
        for c in 0..classes {
            let w_hat = row[c] / col_norm[c];
            acc += g_cos[c] * w_hat;
            grow[c] = g_cos[c] * (zr - cos[c] * w_hat) / col_norm[c];
        }
        grad_z[r] = (acc - radial * zr) / z_norm;
    }
    Ok(MarginLoss { loss, grad_z, grad_w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, seeded_rng};

    fn single_head(d: usize, c: usize, rng: &mut RngStream) -> HeadBank {
        make_gt_heads(&PrefixSpec::full(d).unwrap(), c, rng).unwrap()
    }

    // Softmax cross-entropy over s*cos written out directly.
    fn plain_ce(z: &[f64], w: &Matrix, y: usize, s: f64) -> f64 {
        let zn = norm(z);
        let logits: Vec<f64> = (0..w.cols())
            .map(|c| {
                let col: Vec<f64> = (0..w.rows()).map(|r| w.get(r, c)).collect();
                s * crate::numerics::dot(&col, z) / (norm(&col) * zn)
            })
            .collect();
        let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        lse - logits[y]
    }

    #[test]
    fn saturated_aligned_target() {
        let mut w = Matrix::zeros(4, 4);
        for i in 0..4 {
            w.set(i, i, 1.0);
        }
        let bank = HeadBank::separate(PrefixSpec::full(4).unwrap(), vec![w]).unwrap();
        let cfg = MarginConfig::new(30.0, vec![0.0]).unwrap();
        let out = margin_loss(&[0.0, 0.0, 2.5, 0.0], &bank, 0, 2, &cfg).unwrap();
        assert!(out.loss < 1e-12 && out.loss >= 0.0);
        assert!((out.loss - (3.0 * (-30f64).exp())).abs() < 1e-20, "{:e}", out.loss);
    }

    #[test]
    fn zero_margin_is_plain_softmax() {
        let mut rng = seeded_rng(3);
        for _ in 0..50 {
            let bank = single_head(7, 5, &mut rng);
            let z: Vec<f64> = (0..7).map(|_| rng.gaussian()).collect();
            let y = rng.below(5);
            let cfg = MarginConfig::new(30.0, vec![0.0]).unwrap();
            let got = margin_loss(&z, &bank, 0, y, &cfg).unwrap().loss;
            let want = plain_ce(&z, bank.full_head(), y, 30.0);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn explicit_angle_oracle() {
        let mut rng = seeded_rng(17);
        for _ in 0..20 {
            let bank = single_head(16, 8, &mut rng);
            let z: Vec<f64> = (0..16).map(|_| rng.gaussian()).collect();
            let y = rng.below(8);
            let w = bank.full_head();
            let zn = norm(&z);
            let cosines: Vec<f64> = (0..8)
                .map(|c| {
                    let col: Vec<f64> = (0..16).map(|r| w.get(r, c)).collect();
                    crate::numerics::dot(&col, &z) / (norm(&col) * zn)
                })
                .collect();
            let theta = cosines[y].acos();
            let target = if theta + 0.2 <= std::f64::consts::PI {
                (theta + 0.2).cos()
            } else {
                cosines[y] - 0.2 * 0.2f64.sin()
            };
            let logits: Vec<f64> = (0..8).map(|c| 30.0 * if c == y { target } else { cosines[c] }).collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let want = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m - logits[y];
            let cfg = MarginConfig::new(30.0, vec![0.2]).unwrap();
            let got = margin_loss(&z, &bank, 0, y, &cfg).unwrap().loss;
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn gradients_pass_finite_differences() {
        for seed in 0..20 {
            let mut rng = seeded_rng(200 + seed);
            let bank = single_head(16, 8, &mut rng);
            let z: Vec<f64> = (0..16).map(|_| rng.gaussian()).collect();
            let y = rng.below(8);
            let cfg = MarginConfig::new(30.0, vec![0.2]).unwrap();
            let out = margin_loss(&z, &bank, 0, y, &cfg).unwrap();
            let rz = grad_check(
                |x| margin_loss(x, &bank, 0, y, &cfg).unwrap().loss,
                &z,
                &out.grad_z,
                1e-6,
                1e-5,
            )
            .unwrap();
            assert!(rz.passed, "z seed {seed}: {rz:?}");
            let mut probe = bank.clone();
            let rw = grad_check(
                |x| {
                    probe.set_flat(x).unwrap();
                    margin_loss(&z, &probe, 0, y, &cfg).unwrap().loss
                },
                &bank.to_flat(),
                out.grad_w.data(),
                1e-6,
                1e-5,
            )
            .unwrap();
            assert!(rw.passed, "W seed {seed}: {rw:?}");
        }
    }

    #[test]
    fn scale_invariance() {
        let mut rng = seeded_rng(8);
        let bank = single_head(6, 4, &mut rng);
        let cfg = MarginConfig::new(30.0, vec![0.3]).unwrap();
        let z: Vec<f64> = (0..6).map(|_| rng.gaussian()).collect();
        let a = margin_loss(&z, &bank, 0, 1, &cfg).unwrap().loss;
        for lambda in [1e-3, 0.5, 7.0, 1e4] {
            let zs: Vec<f64> = z.iter().map(|v| v * lambda).collect();
            let b = margin_loss(&zs, &bank, 0, 1, &cfg).unwrap().loss;
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let mut rng = seeded_rng(1);
        let bank = single_head(4, 3, &mut rng);
        let cfg = MarginConfig::new(30.0, vec![0.1]).unwrap();
        assert!(matches!(
            margin_loss(&[1.0; 4], &bank, 0, 3, &cfg),
            Err(DameError::LabelOutOfRange { label: 3, classes: 3 })
        ));
        assert!(matches!(margin_loss(&[1.0; 3], &bank, 0, 0, &cfg), Err(DameError::InvalidPrefix(3))));
        assert!(matches!(margin_loss(&[0.0; 4], &bank, 0, 0, &cfg), Err(DameError::ZeroVector)));
        assert!(MarginConfig::new(0.0, vec![]).is_err());
        assert!(MarginConfig::new(30.0, vec![1.5]).is_err());
    }

    #[test]
    fn overflow_branch_stays_finite_and_monotone() {
        // target column anti-aligned with z: θ_y ≈ π, so θ_y + m > π
        let mut w = Matrix::zeros(2, 2);
        w.set(0, 0, -1.0);
        w.set(1, 0, 0.05);
        w.set(1, 1, 1.0);
        let bank = HeadBank::separate(PrefixSpec::full(2).unwrap(), vec![w]).unwrap();
        let mut last = f64::NEG_INFINITY;
        for m in [0.0, 0.1, 0.3, 0.5] {
            let cfg = MarginConfig::new(30.0, vec![m]).unwrap();
            let out = margin_loss(&[1.0, 0.0], &bank, 0, 0, &cfg).unwrap();
            assert!(out.loss.is_finite());
            assert!(out.grad_z.iter().all(|g| g.is_finite()));
            assert!(out.loss >= last);
            last = out.loss;
        }
    }

    #[test]
    fn gt_heads_shapes_and_determinism() {
        let spec = PrefixSpec::new(vec![32, 64, 128, 256]).unwrap();
        let a = make_gt_heads(&spec, 10, &mut seeded_rng(4)).unwrap();
        let b = make_gt_heads(&spec, 10, &mut seeded_rng(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mode(), HeadMode::Separate);
        for (k, d) in [32, 64, 128, 256].iter().enumerate() {
            assert_eq!(a.head(k).rows, *d);
            assert_eq!(a.head(k).data.len(), d * 10);
        }
        let tiny = make_gt_heads(&PrefixSpec::full(4).unwrap(), 2, &mut seeded_rng(0)).unwrap();
        assert_eq!(tiny.full_head().rows(), 4);
        assert_eq!(tiny.full_head().cols(), 2);
        assert!(make_gt_heads(&spec, 1, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn tied_heads_are_views() {
        let data: Vec<f64> = (0..4).flat_map(|r| vec![r as f64 + 1.0; 3]).collect();
        let w = Matrix::from_vec(4, 3, data).unwrap();
        let mut bank = tie_heads(w.clone(), PrefixSpec::new(vec![2, 4]).unwrap()).unwrap();
        assert_eq!(bank.head(0).data, &w.data()[..6]);
        assert_eq!(bank.head(0).get(1, 0), 2.0);
        bank.shared_mut().unwrap().set(0, 0, -9.0);
        assert_eq!(bank.head(0).get(0, 0), -9.0);
        assert_eq!(bank.head(1).get(0, 0), -9.0);
        assert!(std::ptr::eq(bank.head(0).data.as_ptr(), bank.head(1).data.as_ptr()));

        let single = tie_heads(w.clone(), PrefixSpec::full(4).unwrap()).unwrap();
        assert_eq!(single.head(0).data, w.data());
        assert!(tie_heads(w, PrefixSpec::full(5).unwrap()).is_err());
    }

    #[test]
    fn tied_gradient_accumulation_matches_two_pass() {
        let mut rng = seeded_rng(12);
        let w = Matrix::randn(6, 5, 1.0, &mut rng);
        let bank = tie_heads(w, PrefixSpec::new(vec![3, 6]).unwrap()).unwrap();
        let cfg = MarginConfig::new(30.0, vec![0.1, 0.2]).unwrap();
        let z: Vec<f64> = (0..6).map(|_| rng.gaussian()).collect();
        let small = margin_loss(&z[..3], &bank, 0, 2, &cfg).unwrap();
        let big = margin_loss(&z, &bank, 1, 2, &cfg).unwrap();
        let mut acc = bank.zero_gradients();
        acc.accumulate(0, &small.grad_w, 1.0);
        acc.accumulate(1, &big.grad_w, 1.0);
        let got = acc.tied_matrix().unwrap();
        for r in 0..6 {
            for c in 0..5 {
                let expect = if r < 3 { small.grad_w.get(r, c) + big.grad_w.get(r, c) } else { big.grad_w.get(r, c) };
                assert_eq!(got.get(r, c), expect);
            }
        }
    }

    #[test]
    fn serialization_round_trip() {
        let mut rng = seeded_rng(2);
        let gt = make_gt_heads(&PrefixSpec::new(vec![2, 3]).unwrap(), 4, &mut rng).unwrap();
        let bytes = gt.to_bytes();
        assert_eq!(&bytes[..8], HEAD_MAGIC);
        assert_eq!(bytes[8], 0);
        assert_eq!(HeadBank::from_bytes(&bytes).unwrap(), gt);
        let tied = tie_heads(Matrix::randn(3, 4, 1.0, &mut rng), PrefixSpec::new(vec![1, 3]).unwrap()).unwrap();
        let tb = tied.to_bytes();
        assert_eq!(tb[8], 1);
        assert_eq!(HeadBank::from_bytes(&tb).unwrap(), tied);
        let mut bad = tb.clone();
        bad[8] = 7;
        assert!(HeadBank::from_bytes(&bad).is_err());
    }
}
