//! Mean-pool → affine → tanh → affine encoder with hand-derived gradients.

use std::io::{Read, Write};

use crate::binio::{self, DecodeResult};
use crate::error::{DameError, Result};
use crate::nesting::PrefixSpec;
use crate::numerics::{Matrix, RngStream};

pub const ENCODER_MAGIC: &[u8; 8] = b"DAMEENC1";

/// A frame sequence with its speaker label and originating utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    /// `T x F`, one row per frame.
    pub frames: Matrix,
    pub speaker: usize,
    pub source_id: String,
}

impl Utterance {
    pub fn new(frames: Matrix, speaker: usize, source_id: impl Into<String>) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(DameError::InvalidDuration("utterance has no frames".into()));
        }
        if !frames.is_finite() {
            return Err(DameError::NonFinite("utterance frames".into()));
        }
        Ok(Utterance {
            frames,
            speaker,
            source_id: source_id.into(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.cols()
    }

    /// Frames `start..start + len` as a new utterance with the same source.
    pub fn crop(&self, start: usize, len: usize) -> Result<Utterance> {
        if len == 0 || start + len > self.num_frames() {
            return Err(DameError::InvalidDuration(format!(
                "cannot crop {len} frames at {start} from {} frames",
                self.num_frames()
            )));
        }
        Ok(Utterance {
            frames: self.frames.slice_rows(start, len),
            speaker: self.speaker,
            source_id: self.source_id.clone(),
        })
    }

    pub fn pooled(&self) -> Vec<f64> {
        self.frames.column_mean()
    }
}

/// Encoder weights. `w1` is `F x H`, `w2` is `H x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(feature_dim: usize, hidden: usize, embed_dim: usize) -> Self {
        EncoderParams {
            w1: Matrix::zeros(feature_dim, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, embed_dim),
            b2: vec![0.0; embed_dim],
        }
    }

    /// Gaussian fan-in initialization, zero biases.
    pub fn init(feature_dim: usize, hidden: usize, embed_dim: usize, rng: &mut RngStream) -> Self {
        EncoderParams {
            w1: Matrix::randn(feature_dim, hidden, 1.0 / (feature_dim as f64).sqrt(), rng),
            b1: vec![0.0; hidden],
            w2: Matrix::randn(hidden, embed_dim, 1.0 / (hidden as f64).sqrt(), rng),
            b2: vec![0.0; embed_dim],
        }
    }

    pub fn from_parts(w1: Matrix, b1: Vec<f64>, w2: Matrix, b2: Vec<f64>) -> Result<Self> {
        if b1.len() != w1.cols() || w2.rows() != w1.cols() || b2.len() != w2.cols() {
            return Err(DameError::ShapeMismatch(format!(
                "encoder parts {}x{}, {}, {}x{}, {}",
                w1.rows(),
                w1.cols(),
                b1.len(),
                w2.rows(),
                w2.cols(),
                b2.len()
            )));
        }
        Ok(EncoderParams { w1, b1, w2, b2 })
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn num_params(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }

    /// All values in declaration order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(DameError::ShapeMismatch(format!(
                "{} values for {} encoder parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut rest = flat;
        for dst in self.slices_mut() {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub(crate) fn slices(&self) -> [&[f64]; 4] {
        [self.w1.data(), &self.b1, self.w2.data(), &self.b2]
    }

    pub(crate) fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [self.w1.data_mut(), &mut self.b1, self.w2.data_mut(), &mut self.b2]
    }

    /// `self += scale * other`.
    pub(crate) fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(ENCODER_MAGIC)?;
        binio::write_u32(w, binio::dim_u32(self.feature_dim())?)?;
        binio::write_u32(w, binio::dim_u32(self.hidden())?)?;
        binio::write_u32(w, binio::dim_u32(self.embed_dim())?)?;
        for s in self.slices() {
            binio::write_f64s(w, s)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub(crate) fn read_from<R: Read>(r: &mut R) -> DecodeResult<Self> {
        binio::expect_magic(r, ENCODER_MAGIC)?;
        let f = binio::read_u32(r)? as usize;
        let h = binio::read_u32(r)? as usize;
        let d = binio::read_u32(r)? as usize;
        if f == 0 || h == 0 || d == 0 {
            return Err(binio::DecodeError::Format(format!("degenerate encoder shape {f}x{h}x{d}")));
        }
        let w1 = binio::read_f64s(r, f * h)?;
        let b1 = binio::read_f64s(r, h)?;
        let w2 = binio::read_f64s(r, h * d)?;
        let b2 = binio::read_f64s(r, d)?;
        Ok(EncoderParams {
            w1: Matrix::from_vec(f, h, w1).expect("sized"),
            b1,
            w2: Matrix::from_vec(h, d, w2).expect("sized"),
            b2,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = bytes;
        let p = Self::read_from(&mut cur).map_err(|e| e.to_string())?;
        if !cur.is_empty() {
            return Err(format!("{} trailing bytes", cur.len()));
        }
        Ok(p)
    }
}

/// Full embedding `z` of length `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullEmbedding(pub Vec<f64>);

impl FullEmbedding {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub pooled: Vec<f64>,
    pub hidden: Vec<f64>,
    pub embedding: FullEmbedding,
    pub num_frames: usize,
}

fn check_features(u: &Utterance, p: &EncoderParams) -> Result<()> {
    if u.feature_dim() != p.feature_dim() {
        return Err(DameError::ShapeMismatch(format!(
            "utterance has {} features, encoder expects {}",
            u.feature_dim(),
            p.feature_dim()
        )));
    }
    Ok(())
}

pub fn forward_pooled(pooled: &[f64], num_frames: usize, p: &EncoderParams) -> Forward {
    let h = p.hidden();
    let d = p.embed_dim();
    let mut pre = p.b1.clone();
    for (f, &x) in pooled.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (acc, w) in pre.iter_mut().zip(p.w1.row(f)) {
            *acc += x * w;
        }
    }
    let hidden: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
    let mut z = p.b2.clone();
    for (j, &hj) in hidden.iter().enumerate().take(h) {
        for (acc, w) in z.iter_mut().zip(p.w2.row(j)) {
            *acc += hj * w;
        }
    }
    debug_assert_eq!(z.len(), d);
    Forward {
        pooled: pooled.to_vec(),
        hidden,
        embedding: FullEmbedding(z),
        num_frames,
    }
}

pub fn forward(u: &Utterance, p: &EncoderParams) -> Result<Forward> {
    check_features(u, p)?;
    Ok(forward_pooled(&u.pooled(), u.num_frames(), p))
}

/// `z = W2ᵀ tanh(W1ᵀ mean_t(frames) + b1) + b2`.
pub fn encode(u: &Utterance, p: &EncoderParams) -> Result<FullEmbedding> {
    forward(u, p).map(|f| f.embedding)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGradients {
    pub params: EncoderParams,
    /// Gradient with respect to every individual frame; identical for all
    /// frames because of mean pooling.
    pub frame: Vec<f64>,
}

/// Backward pass from a cached forward.
pub fn backward(fwd: &Forward, p: &EncoderParams, upstream: &[f64]) -> Result<EncoderGradients> {
    if upstream.len() != p.embed_dim() {
        return Err(DameError::ShapeMismatch(format!(
            "upstream gradient has {} entries, embedding has {}",
            upstream.len(),
            p.embed_dim()
        )));
    }
    if upstream.iter().any(|v| !v.is_finite()) {
        return Err(DameError::NonFinite("upstream gradient".into()));
    }
    let (f, h, d) = (p.feature_dim(), p.hidden(), p.embed_dim());
    let mut g = EncoderParams::zeros(f, h, d);
    g.b2.copy_from_slice(upstream);
    let mut d_pre = vec![0.0; h];
    for j in 0..h {
        let hj = fwd.hidden[j];
        let row = g.w2.row_mut(j);
        for (dst, u) in row.iter_mut().zip(upstream) {
            *dst = hj * u;
        }
        let back: f64 = p.w2.row(j).iter().zip(upstream).map(|(w, u)| w * u).sum();
        d_pre[j] = back * (1.0 - hj * hj);
    }
    g.b1.copy_from_slice(&d_pre);
    let mut d_pooled = vec![0.0; f];
    for (i, &x) in fwd.pooled.iter().enumerate() {
        let row = g.w1.row_mut(i);
        for (dst, dp) in row.iter_mut().zip(&d_pre) {
            *dst = x * dp;
        }
        d_pooled[i] = p.w1.row(i).iter().zip(&d_pre).map(|(w, dp)| w * dp).sum();
    }
    let inv_t = 1.0 / fwd.num_frames as f64;
    let frame = d_pooled.iter().map(|v| v * inv_t).collect();
    Ok(EncoderGradients { params: g, frame })
}

pub fn encoder_gradients(u: &Utterance, p: &EncoderParams, upstream: &[f64]) -> Result<EncoderGradients> {
    let fwd = forward(u, p)?;
    backward(&fwd, p, upstream)
}

/// Leading `d` components of `z`; `d` must be a nesting dimension.
pub fn prefix<'a>(z: &'a FullEmbedding, d: usize, spec: &PrefixSpec) -> Result<&'a [f64]> {
    if !spec.contains(d) || d > z.len() {
        return Err(DameError::InvalidPrefix(d));
    }
    Ok(&z.0[..d])
}
