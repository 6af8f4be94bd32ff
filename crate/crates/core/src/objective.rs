//! Duration–dimension alignment weights and the batch DAME loss.
//!
//! For chunk durations `ℓ_1 < … < ℓ_J` and prefixes `d_1 < … < d_K` the
//! prefixes are split into `J` contiguous bands with boundaries
//! `b_j = ⌊jK/J⌋`. Chunk `j` supervises its own band with weight 1 and every
//! other prefix with `γ_k` (0 for hard weighting, `base^{-(K-k+1)}` for soft
//! weighting). Per-chunk multi-prefix losses are then mixed with weight `α`
//! on the longest chunk and `(1-α)/(J-1)` on each shorter one, and averaged
//! over instances.

use std::fmt;
use std::str::FromStr;

use crate::encoder::{self, EncoderParams};
use crate::error::{DameError, Result};
use crate::margin_head::{margin_loss, HeadBank, HeadGradients, MarginConfig};
use crate::numerics::Matrix;
use crate::synthdata::InstanceBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    /// One-to-one duration ↔ prefix, `J = K`.
    Hard,
    /// Banded with geometric off-band weights, `J < K`.
    Soft,
    /// Every duration supervises every prefix with weight 1.
    PlainMrl,
    /// Single full-dimension head shared by all durations (`J x 1`).
    DAlmft,
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightScheme::Hard => "hw",
            WeightScheme::Soft => "sw",
            WeightScheme::PlainMrl => "plain-mrl",
            WeightScheme::DAlmft => "d-almft",
        })
    }
}

impl FromStr for WeightScheme {
    type Err = DameError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hw" | "hard" => Ok(WeightScheme::Hard),
            "sw" | "soft" => Ok(WeightScheme::Soft),
            "plain-mrl" | "mrl" => Ok(WeightScheme::PlainMrl),
            "d-almft" | "dalmft" => Ok(WeightScheme::DAlmft),
            _ => Err(DameError::ConfigInvalid(format!("unknown weighting scheme '{s}'"))),
        }
    }
}

/// `J x K` matrix `c_{j,k}` with its band boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentWeights {
    pub scheme: WeightScheme,
    pub c: Matrix,
    /// `b_0..b_J`; absent for schemes that do not band (`J > K` allowed).
    pub boundaries: Option<Vec<usize>>,
}

impl AlignmentWeights {
    pub fn durations(&self) -> usize {
        self.c.rows()
    }

    pub fn prefixes(&self) -> usize {
        self.c.cols()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.c.row(j)
    }

    /// CSV with header `j\k,1,..,K` and 1-based indices.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("j\\k");
        for k in 1..=self.prefixes() {
            out.push_str(&format!(",{k}"));
        }
        out.push('\n');
        for j in 0..self.durations() {
            out.push_str(&(j + 1).to_string());
            for v in self.row(j) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// `b_j = ⌊j·K/J⌋` for `j = 0..=J`.
pub fn band_boundaries(j: usize, k: usize) -> Result<Vec<usize>> {
    if j == 0 || j > k {
        return Err(DameError::InvalidShape(format!("band boundaries need 1 <= J <= K, got J={j}, K={k}")));
    }
    Ok((0..=j).map(|i| i * k / j).collect())
}

pub fn alignment_weights(scheme: WeightScheme, j: usize, k: usize) -> Result<AlignmentWeights> {
    alignment_weights_with_base(scheme, j, k, 2.0)
}

/// As [`alignment_weights`], with a configurable soft-weighting decay base
/// (`γ_k = base^{-(K-k+1)}`).
pub fn alignment_weights_with_base(scheme: WeightScheme, j: usize, k: usize, base: f64) -> Result<AlignmentWeights> {
    if j == 0 || k == 0 {
        return Err(DameError::SchemeShapeMismatch { j, k, reason: "J and K must be positive" });
    }
    match scheme {
        WeightScheme::Hard | WeightScheme::Soft => {
            if scheme == WeightScheme::Hard && j != k {
                return Err(DameError::SchemeShapeMismatch { j, k, reason: "hard weighting requires J = K" });
            }
            if scheme == WeightScheme::Soft && j >= k {
                return Err(DameError::SchemeShapeMismatch { j, k, reason: "soft weighting requires J < K" });
            }
            if !(base > 1.0) {
                return Err(DameError::ConfigInvalid(format!("soft weighting base must exceed 1, got {base}")));
            }
            let b = band_boundaries(j, k)?;
            let mut c = Matrix::zeros(j, k);
            for row in 0..j {
                for col in 0..k {
                    // 1-based k in the band (b_{j-1}, b_j]
                    let kk = col + 1;
                    let v = if b[row] < kk && kk <= b[row + 1] {
                        1.0
                    } else if scheme == WeightScheme::Soft {
                        base.powi(-((k - kk + 1) as i32))
                    } else {
                        0.0
                    };
                    c.set(row, col, v);
                }
            }
            Ok(AlignmentWeights { scheme, c, boundaries: Some(b) })
        }
        WeightScheme::PlainMrl => {
            let c = Matrix::from_vec(j, k, vec![1.0; j * k])?;
            Ok(AlignmentWeights { scheme, c, boundaries: band_boundaries(j, k).ok() })
        }
        WeightScheme::DAlmft => {
            let c = Matrix::from_vec(j, 1, vec![1.0; j])?;
            Ok(AlignmentWeights { scheme, c, boundaries: None })
        }
    }
}

/// `Σ_k c_{j,k} L_{j,k}`.
pub fn multi_prefix_loss(per_prefix: &[f64], c_row: &[f64]) -> Result<f64> {
    if per_prefix.len() != c_row.len() {
        return Err(DameError::ShapeMismatch(format!("{} losses, {} weights", per_prefix.len(), c_row.len())));
    }
    Ok(per_prefix.iter().zip(c_row).map(|(l, c)| c * l).sum())
}

/// Mixing coefficient of chunk `j` (0-based) among `num_durations`.
pub fn chunk_coefficient(j: usize, num_durations: usize, alpha: f64) -> f64 {
    if num_durations == 1 {
        1.0
    } else if j + 1 == num_durations {
        alpha
    } else {
        (1.0 - alpha) / (num_durations - 1) as f64
    }
}

fn check_alpha(alpha: f64, num_durations: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DameError::ConfigInvalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if num_durations == 1 && alpha != 1.0 {
        return Err(DameError::DegenerateDurations(alpha));
    }
    Ok(())
}

/// Batch loss from the `I x J` matrix of multi-prefix losses.
pub fn dame_loss(multi_prefix: &Matrix, alpha: f64) -> Result<f64> {
    let (i, j) = (multi_prefix.rows(), multi_prefix.cols());
    if i == 0 || j == 0 {
        return Err(DameError::InvalidShape("empty loss matrix".into()));
    }
    check_alpha(alpha, j)?;
    let mut total = 0.0;
    for r in 0..i {
        let row = multi_prefix.row(r);
        let longest = row[j - 1];
        let inst = if j == 1 {
            longest
        } else {
            let shorter: f64 = row[..j - 1].iter().sum();
            alpha * longest + (1.0 - alpha) / (j - 1) as f64 * shorter
        };
        total += inst;
    }
    Ok(total / i as f64)
}

/// Loss and gradients of one mini-batch.
#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub loss: f64,
    /// `I x J` multi-prefix losses.
    pub multi_prefix: Matrix,
    /// Per chunk, per prefix `L_{j,k}`; `NaN` where the chunk's coefficient
    /// for that prefix is zero and the loss was skipped.
    pub per_prefix: Vec<Vec<Vec<f64>>>,
    pub encoder_grad: EncoderParams,
    pub head_grad: HeadGradients,
    /// `dLoss/dz` for every chunk embedding, `[instance][chunk]`.
    pub embedding_grads: Vec<Vec<Vec<f64>>>,
}

/// The full DAME objective for fixed weights, α and per-chunk margins.
#[derive(Debug, Clone)]
pub struct DameObjective {
    pub weights: AlignmentWeights,
    pub alpha: f64,
    /// One margin configuration per chunk duration. Per-prefix margins are
    /// usually identical across chunks; duration-adaptive baselines vary them.
    pub chunk_margins: Vec<MarginConfig>,
}

impl DameObjective {
    pub fn new(weights: AlignmentWeights, alpha: f64, chunk_margins: Vec<MarginConfig>) -> Result<Self> {
        check_alpha(alpha, weights.durations())?;
        if chunk_margins.len() != weights.durations() {
            return Err(DameError::ShapeMismatch(format!(
                "{} margin sets for {} durations",
                chunk_margins.len(),
                weights.durations()
            )));
        }
        for m in &chunk_margins {
            m.validate()?;
            if m.margins.len() != weights.prefixes() {
                return Err(DameError::ShapeMismatch(format!(
                    "{} margins for {} prefixes",
                    m.margins.len(),
                    weights.prefixes()
                )));
            }
        }
        Ok(DameObjective { weights, alpha, chunk_margins })
    }

    pub fn evaluate(&self, enc: &EncoderParams, bank: &HeadBank, batch: &InstanceBatch) -> Result<ObjectiveOutput> {
        let num_j = self.weights.durations();
        let num_k = self.weights.prefixes();
        if bank.num_heads() != num_k {
            return Err(DameError::ShapeMismatch(format!(
                "{} heads for {num_k} weighted prefixes",
                bank.num_heads()
            )));
        }
        if bank.spec().full_dim() != enc.embed_dim() {
            return Err(DameError::ShapeMismatch(format!(
                "heads cover {} dims, encoder emits {}",
                bank.spec().full_dim(),
                enc.embed_dim()
            )));
        }
        let instances = &batch.instances;
        if instances.is_empty() {
            return Err(DameError::InvalidShape("empty batch".into()));
        }
        let inv_i = 1.0 / instances.len() as f64;
        let mut multi = Matrix::zeros(instances.len(), num_j);
        let mut per_prefix = Vec::with_capacity(instances.len());
        let mut enc_grad = EncoderParams::zeros(enc.feature_dim(), enc.hidden(), enc.embed_dim());
        let mut head_grad = bank.zero_gradients();
        let mut emb_grads = Vec::with_capacity(instances.len());

        for (i, inst) in instances.iter().enumerate() {
            if inst.chunks.len() != num_j {
                return Err(DameError::ShapeMismatch(format!(
                    "instance {i} has {} chunks, expected {num_j}",
                    inst.chunks.len()
                )));
            }
            let mut inst_losses = Vec::with_capacity(num_j);
            let mut inst_grads = Vec::with_capacity(num_j);
            for (j, chunk) in inst.chunks.iter().enumerate() {
                let chunk_coef = chunk_coefficient(j, num_j, self.alpha) * inv_i;
                let c_row = self.weights.row(j);
                let mut dz = vec![0.0; enc.embed_dim()];
                let mut losses = vec![f64::NAN; num_k];
                if chunk_coef != 0.0 && c_row.iter().any(|&c| c != 0.0) {
                    let fwd = encoder::forward(chunk, enc)?;
                    let z = fwd.embedding.values();
                    let mut active = false;
                    for (k, &c) in c_row.iter().enumerate() {
                        if c == 0.0 {
                            continue;
                        }
                        let d = bank.spec().dim(k);
                        let out = margin_loss(&z[..d], bank, k, inst.speaker, &self.chunk_margins[j])?;
                        losses[k] = out.loss;
                        let coef = chunk_coef * c;
                        for (g, v) in dz[..d].iter_mut().zip(&out.grad_z) {
                            *g += coef * v;
                        }
                        head_grad.accumulate(k, &out.grad_w, coef);
                        active = true;
                    }
                    if active {
                        let g = encoder::backward(&fwd, enc, &dz)?;
                        enc_grad.add_scaled(&g.params, 1.0);
                    }
                }
                let masked: Vec<f64> = losses.iter().map(|l| if l.is_nan() { 0.0 } else { *l }).collect();
                multi.set(i, j, multi_prefix_loss(&masked, c_row)?);
                inst_losses.push(losses);
                inst_grads.push(dz);
            }
            per_prefix.push(inst_losses);
            emb_grads.push(inst_grads);
        }
        let loss = dame_loss(&multi, self.alpha)?;
        Ok(ObjectiveOutput {
            loss,
            multi_prefix: multi,
            per_prefix,
            encoder_grad: enc_grad,
            head_grad,
            embedding_grads: emb_grads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundaries_examples() {
        assert_eq!(band_boundaries(3, 3).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(band_boundaries(2, 4).unwrap(), vec![0, 2, 4]);
        for k in 1..20 {
            assert_eq!(band_boundaries(1, k).unwrap(), vec![0, k]);
        }
        assert!(matches!(band_boundaries(5, 4), Err(DameError::InvalidShape(_))));
    }

    #[test]
    fn hard_and_soft_examples() {
        let hw = alignment_weights(WeightScheme::Hard, 3, 3).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(hw.c.get(r, c), if r == c { 1.0 } else { 0.0 });
            }
        }
        let sw = alignment_weights(WeightScheme::Soft, 2, 4).unwrap();
        assert_eq!(sw.row(0), &[1.0, 1.0, 0.25, 0.5]);
        assert_eq!(sw.row(1), &[0.0625, 0.125, 1.0, 1.0]);
        let mrl = alignment_weights(WeightScheme::PlainMrl, 2, 4).unwrap();
        assert!(mrl.c.data().iter().all(|&v| v == 1.0));
        let da = alignment_weights(WeightScheme::DAlmft, 3, 3).unwrap();
        assert_eq!((da.durations(), da.prefixes()), (3, 1));
    }

    #[test]
    fn scheme_shape_errors() {
        assert!(matches!(
            alignment_weights(WeightScheme::Hard, 2, 3),
            Err(DameError::SchemeShapeMismatch { .. })
        ));
        assert!(matches!(
            alignment_weights(WeightScheme::Soft, 3, 3),
            Err(DameError::SchemeShapeMismatch { .. })
        ));
    }

    #[test]
    fn soft_gamma_doubles() {
        let k = 9;
        let sw = alignment_weights(WeightScheme::Soft, 2, k).unwrap();
        // row 1 is out of band for k <= b_1
        let b = sw.boundaries.clone().unwrap();
        let gammas: Vec<f64> = (0..b[1]).map(|c| sw.c.get(1, c)).collect();
        for w in gammas.windows(2) {
            assert_eq!(w[1], 2.0 * w[0]);
        }
        assert!(gammas.iter().all(|&g| g > 0.0 && g <= 0.5));
    }

    #[test]
    fn csv_dump() {
        let sw = alignment_weights(WeightScheme::Soft, 2, 4).unwrap();
        assert_eq!(sw.to_csv(), "j\\k,1,2,3,4\n1,1,1,0.25,0.5\n2,0.0625,0.125,1,1\n");
    }

    #[test]
    fn multi_prefix_examples() {
        assert_eq!(multi_prefix_loss(&[1.0, 1.0, 1.0], &[0.0, 1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(multi_prefix_loss(&[2.0, 4.0, 8.0, 16.0], &[1.0, 1.0, 0.25, 0.5]).unwrap(), 16.0);
        assert_eq!(multi_prefix_loss(&[3.0, 5.0], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn dame_loss_examples() {
        let m = Matrix::from_vec(1, 2, vec![3.0, 5.0]).unwrap();
        assert_eq!(dame_loss(&m, 0.5).unwrap(), 4.0);
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(dame_loss(&m, 0.5).unwrap(), 2.0);
        assert_eq!(dame_loss(&m, 1.0).unwrap(), 2.0); // (3 + 1) / 2
        let single = Matrix::from_vec(2, 1, vec![1.0, 4.0]).unwrap();
        assert_eq!(dame_loss(&single, 1.0).unwrap(), 2.5);
        assert!(matches!(dame_loss(&single, 0.5), Err(DameError::DegenerateDurations(_))));
    }

    #[test]
    fn dame_loss_is_linear() {
        let m = Matrix::from_vec(2, 3, vec![0.3, 1.7, 2.2, 0.9, 4.1, 0.05]).unwrap();
        let base = dame_loss(&m, 0.7).unwrap();
        for lambda in [0.1, 2.0, 13.5] {
            let scaled = Matrix::from_vec(2, 3, m.data().iter().map(|v| v * lambda).collect()).unwrap();
            assert!((dame_loss(&scaled, 0.7).unwrap() - lambda * base).abs() < 1e-12);
        }
    }
}
