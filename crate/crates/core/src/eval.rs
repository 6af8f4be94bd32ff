//! Cosine trial scoring and equal error rate.

use std::collections::HashMap;

use crate::encoder::{encode, EncoderParams, FullEmbedding, Utterance};
use crate::error::{DameError, Result};
use crate::nesting::PrefixSpec;
use crate::numerics::{dot, norm};
use crate::synthdata::{Dataset, TrialList, SHORT_CONDITIONS};

pub const S_AVG: &str = "s-avg";

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    targets: Vec<f64>,
    nontargets: Vec<f64>,
}

impl ScoreSet {
    pub fn new(targets: Vec<f64>, nontargets: Vec<f64>) -> Result<Self> {
        if targets.is_empty() || nontargets.is_empty() {
            return Err(DameError::InvalidShape("score set needs target and non-target scores".into()));
        }
        if let Some(v) = targets.iter().chain(&nontargets).find(|v| !v.is_finite()) {
            return Err(DameError::NonFinite(format!("score {v}")));
        }
        Ok(ScoreSet { targets, nontargets })
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn nontargets(&self) -> &[f64] {
        &self.nontargets
    }
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DameError::ShapeMismatch(format!("{} vs {} dims", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na >= 1e-30 && nb >= 1e-30) {
        return Err(DameError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Linear interpolation between the operating points around the first
/// threshold where `FAR - FRR <= 0`, given miss/false-accept counts there
/// and at the preceding threshold.
fn crossing(prev: (usize, usize), cur: (usize, usize), n_t: usize, n_n: usize) -> f64 {
    let frr = |misses: usize| misses as f64 / n_t as f64;
    let far = |accepts: usize| accepts as f64 / n_n as f64;
    let d_cur = far(cur.1) - frr(cur.0);
    if d_cur == 0.0 {
        return frr(cur.0);
    }
    let d_prev = far(prev.1) - frr(prev.0);
    let w = d_prev / (d_prev - d_cur);
    frr(prev.0) + w * (frr(cur.0) - frr(prev.0))
}

/// FRR(t) counts targets `< t`, FAR(t) non-targets `>= t`, swept over the
/// sorted distinct scores followed by `+inf`.
pub fn compute_eer(s: &ScoreSet) -> f64 {
    let mut t = s.targets.clone();
    let mut n = s.nontargets.clone();
    t.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    let (n_t, n_n) = (t.len(), n.len());
    // `it`/`ix` index the first target/non-target not below the threshold
    let (mut it, mut ix) = (0usize, 0usize);
    let mut prev = (0usize, n_n);
    loop {
        let next = match (t.get(it), n.get(ix)) {
            (Some(&a), Some(&b)) => a.min(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => f64::INFINITY,
        };
        let cur = (it, n_n - ix);
        if (cur.1 as f64 / n_n as f64) - (cur.0 as f64 / n_t as f64) <= 0.0 {
            return crossing(prev, cur, n_t, n_n);
        }
        prev = cur;
        while it < n_t && t[it] == next {
            it += 1;
        }
        while ix < n_n && n[ix] == next {
            ix += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub condition: String,
    pub prefix_dim: usize,
    pub eer: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn get(&self, condition: &str, prefix_dim: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.condition == condition && r.prefix_dim == prefix_dim).map(|r| r.eer)
    }

    /// `condition,prefix_dim,eer`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,prefix_dim,eer\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.condition, r.prefix_dim, r.eer));
        }
        out
    }
}

/// Memoizes full embeddings of `(utterance, leading frames)` crops.
pub struct EmbeddingCache<'a> {
    encoder: &'a EncoderParams,
    utterances: HashMap<&'a str, &'a Utterance>,
    cache: HashMap<(String, usize), FullEmbedding>,
}

impl<'a> EmbeddingCache<'a> {
    pub fn new(encoder: &'a EncoderParams, utterances: HashMap<&'a str, &'a Utterance>) -> Self {
        EmbeddingCache { encoder, utterances, cache: HashMap::new() }
    }

    /// Embedding of the first `frames` frames of utterance `id`.
    pub fn embed(&mut self, id: &str, frames: usize) -> Result<&FullEmbedding> {
        let key = (id.to_string(), frames);
        if !self.cache.contains_key(&key) {
            let u = self
                .utterances
                .get(id)
                .ok_or_else(|| DameError::ConfigInvalid(format!("trial references unknown utterance {id}")))?;
            if frames > u.num_frames() {
                return Err(DameError::InvalidDuration(format!(
                    "{id} has {} frames, trial needs {frames}",
                    u.num_frames()
                )));
            }
            let z = encode(&u.crop(0, frames)?, self.encoder)?;
            self.cache.insert(key.clone(), z);
        }
        Ok(&self.cache[&key])
    }
}

pub fn score_trials(cache: &mut EmbeddingCache<'_>, list: &TrialList, d: usize) -> Result<ScoreSet> {
    let (fe, ft) = (list.condition.enroll_frames, list.condition.test_frames);
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for t in &list.trials {
        let e = cache.embed(&t.enroll, fe)?.values()[..d].to_vec();
        let x = cache.embed(&t.test, ft)?;
        let s = cosine_score(&e, &x.values()[..d])?;
        if t.target {
            targets.push(s);
        } else {
            nontargets.push(s);
        }
    }
    ScoreSet::new(targets, nontargets)
}

/// EER per condition and requested prefix, then one `s-avg` row per prefix
/// when all short conditions are present.
pub fn evaluate(
    encoder: &EncoderParams,
    trials: &[TrialList],
    utterances: HashMap<&str, &Utterance>,
    spec: &PrefixSpec,
    prefixes: &[usize],
) -> Result<EvalReport> {
    if spec.full_dim() != encoder.embed_dim() {
        return Err(DameError::ShapeMismatch(format!(
            "nesting set ends at {}, encoder emits {}",
            spec.full_dim(),
            encoder.embed_dim()
        )));
    }
    for &d in prefixes {
        spec.index_of(d)?;
    }
    let mut cache = EmbeddingCache::new(encoder, utterances);
    let mut report = EvalReport::default();
    for list in trials {
        for &d in prefixes {
            let eer = compute_eer(&score_trials(&mut cache, list, d)?);
            report.rows.push(EvalRow { condition: list.condition.name.clone(), prefix_dim: d, eer });
        }
    }
    for &d in prefixes {
        let short: Option<Vec<f64>> = SHORT_CONDITIONS.iter().map(|c| report.get(c, d)).collect();
        if let Some(v) = short {
            let eer = (v[0] + v[1] + v[2] + v[3]) / 4.0;
            report.rows.push(EvalRow { condition: S_AVG.into(), prefix_dim: d, eer });
        }
    }
    Ok(report)
}

/// [`evaluate`] on a dataset's held-out trials.
pub fn evaluate_dataset(encoder: &EncoderParams, ds: &Dataset, spec: &PrefixSpec, prefixes: &[usize]) -> Result<EvalReport> {
    evaluate(encoder, &ds.trials, ds.eval_index(), spec, prefixes)
}
