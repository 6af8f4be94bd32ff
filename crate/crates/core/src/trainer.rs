//! Optimization loops for general training and fine-tuning, plus the
//! baselines expressed as special cases of the same objective.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::checkpoint::Checkpoint;
use crate::encoder::{EncoderParams, Utterance};
use crate::error::{DameError, Result};
use crate::margin_head::{make_gt_heads, tie_heads, HeadBank, MarginConfig};
use crate::nesting::{DurationSet, PrefixSpec};
use crate::numerics::RngStream;
use crate::objective::{alignment_weights_with_base, DameObjective, WeightScheme};
use crate::schedules::{alpha_at, lr_at, margins_at, Regime, ScheduleConfig};
use crate::synthdata::sample_instance_batch;

pub const DEFAULT_GT_EPOCHS: usize = 60;
pub const DEFAULT_FT_EPOCHS: usize = 30;
pub const DEFAULT_SCALE: f64 = 30.0;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_SPEAKERS_PER_BATCH: usize = 32;
pub const DEFAULT_BATCHES_PER_EPOCH: usize = 8;

const STREAM_ENCODER_INIT: u64 = 1;
const STREAM_HEAD_INIT: u64 = 2;
const STREAM_BATCHES: u64 = 3;

/// `p <- p - lr * g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(DameError::ShapeMismatch(format!("{} params, {} gradients", params.len(), grads.len())));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScheme {
    Sw,
    Hw,
    PlainMrl,
    /// One duration, one full-dimension head.
    Baseline,
    /// Mixed durations, one full-dimension head.
    Vlt,
    /// Fine-tuning on one long duration with a large fixed margin.
    Lmft,
    /// Fine-tuning with one full-dimension head and a margin per duration.
    DAlmft,
}

impl TrainScheme {
    pub fn weight_scheme(self) -> WeightScheme {
        match self {
            TrainScheme::Sw => WeightScheme::Soft,
            TrainScheme::Hw => WeightScheme::Hard,
            TrainScheme::PlainMrl | TrainScheme::Baseline | TrainScheme::Vlt | TrainScheme::Lmft => {
                WeightScheme::PlainMrl
            }
            TrainScheme::DAlmft => WeightScheme::DAlmft,
        }
    }

    fn single_head(self) -> bool {
        matches!(self, TrainScheme::Baseline | TrainScheme::Vlt | TrainScheme::Lmft | TrainScheme::DAlmft)
    }

    /// Margins are keyed by chunk duration rather than prefix.
    pub fn duration_margins(self) -> bool {
        self == TrainScheme::DAlmft
    }
}

impl fmt::Display for TrainScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainScheme::Sw => "sw",
            TrainScheme::Hw => "hw",
            TrainScheme::PlainMrl => "plain-mrl",
            TrainScheme::Baseline => "baseline",
            TrainScheme::Vlt => "vlt",
            TrainScheme::Lmft => "lmft",
            TrainScheme::DAlmft => "d-almft",
        })
    }
}

impl FromStr for TrainScheme {
    type Err = DameError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sw" => Ok(TrainScheme::Sw),
            "hw" => Ok(TrainScheme::Hw),
            "plain-mrl" | "mrl" => Ok(TrainScheme::PlainMrl),
            "baseline" => Ok(TrainScheme::Baseline),
            "vlt" => Ok(TrainScheme::Vlt),
            "lmft" => Ok(TrainScheme::Lmft),
            "d-almft" | "dalmft" => Ok(TrainScheme::DAlmft),
            _ => Err(DameError::ConfigInvalid(format!("unknown scheme '{s}'"))),
        }
    }
}

/// Nesting set, durations (seconds) and final margins of a named preset.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub scheme: TrainScheme,
    pub dims: &'static [usize],
    pub seconds: &'static [f64],
    pub margins: &'static [f64],
}

pub const PRESETS: [Preset; 6] = [
    Preset {
        name: "resnet34-sw",
        scheme: TrainScheme::Sw,
        dims: &[32, 64, 128, 256],
        seconds: &[1.0, 2.0],
        margins: &[0.0, 0.1, 0.2, 0.2],
    },
    Preset {
        name: "resnet34-hw",
        scheme: TrainScheme::Hw,
        dims: &[64, 128, 256],
        seconds: &[1.0, 2.0, 6.0],
        margins: &[0.0, 0.2, 0.5],
    },
    Preset {
        name: "ecapa-sw",
        scheme: TrainScheme::Sw,
        dims: &[24, 48, 96, 192],
        seconds: &[1.0, 2.0],
        margins: &[0.0, 0.0, 0.1, 0.2],
    },
    Preset {
        name: "ecapa-hw",
        scheme: TrainScheme::Hw,
        dims: &[48, 96, 192],
        seconds: &[1.0, 2.0, 6.0],
        margins: &[0.0, 0.2, 0.5],
    },
    Preset {
        name: "eres2netv2-sw",
        scheme: TrainScheme::Sw,
        dims: &[24, 48, 96, 192],
        seconds: &[1.0, 2.0],
        margins: &[0.0, 0.0, 0.1, 0.2],
    },
    Preset {
        name: "eres2netv2-hw",
        scheme: TrainScheme::Hw,
        dims: &[48, 96, 192],
        seconds: &[1.0, 2.0, 3.0],
        margins: &[0.0, 0.2, 0.4],
    },
];

pub fn find_preset(name: &str) -> Result<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
        DameError::ConfigInvalid(format!("unknown preset '{name}' (known: {})", names.join(", ")))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub regime: Regime,
    pub scheme: TrainScheme,
    pub prefixes: PrefixSpec,
    pub durations: DurationSet,
    pub scale: f64,
    /// Carries α, margins, learning rate and the epoch count.
    pub schedule: ScheduleConfig,
    pub speakers_per_batch: usize,
    pub batches_per_epoch: usize,
    pub hidden: usize,
    /// Decay base of soft off-band weights.
    pub soft_base: f64,
    pub seed: u64,
    pub pretrained: Option<PathBuf>,
    /// Fine-tune the encoder only.
    pub freeze_head: bool,
}

impl RunConfig {
    /// Schedule defaults follow the regime; margins are keyed by prefix
    /// dimension, or by chunk frames for duration-keyed schemes.
    pub fn new(
        regime: Regime,
        scheme: TrainScheme,
        prefixes: PrefixSpec,
        durations: DurationSet,
        final_margins: Vec<f64>,
    ) -> Self {
        let keys = if scheme.duration_margins() { durations.frames().to_vec() } else { prefixes.dims().to_vec() };
        let schedule = match regime {
            Regime::General => ScheduleConfig::general(keys, final_margins, DEFAULT_GT_EPOCHS),
            Regime::FineTune => ScheduleConfig::fine_tune(keys, final_margins, DEFAULT_FT_EPOCHS),
        };
        RunConfig {
            regime,
            scheme,
            prefixes,
            durations,
            scale: DEFAULT_SCALE,
            schedule,
            speakers_per_batch: DEFAULT_SPEAKERS_PER_BATCH,
            batches_per_epoch: DEFAULT_BATCHES_PER_EPOCH,
            hidden: DEFAULT_HIDDEN,
            soft_base: 2.0,
            seed: 0,
            pretrained: None,
            freeze_head: false,
        }
    }

    pub fn from_preset(name: &str, regime: Regime, fps: usize) -> Result<Self> {
        let p = find_preset(name)?;
        Ok(RunConfig::new(
            regime,
            p.scheme,
            PrefixSpec::new(p.dims.to_vec())?,
            DurationSet::from_seconds(p.seconds, fps)?,
            p.margins.to_vec(),
        ))
    }

    /// Fixed 2 s chunks, one head at `dim`, margin 0.2.
    pub fn baseline(dim: usize, fps: usize) -> Result<Self> {
        Ok(RunConfig::new(
            Regime::General,
            TrainScheme::Baseline,
            PrefixSpec::full(dim)?,
            DurationSet::from_seconds(&[2.0], fps)?,
            vec![0.2],
        ))
    }

    /// The baseline trained on 1 s and 2 s chunks.
    pub fn vlt(dim: usize, fps: usize) -> Result<Self> {
        Ok(RunConfig::new(
            Regime::General,
            TrainScheme::Vlt,
            PrefixSpec::full(dim)?,
            DurationSet::from_seconds(&[1.0, 2.0], fps)?,
            vec![0.2],
        ))
    }

    /// Every prefix supervised by 2 s chunks with margin 0.2.
    pub fn plain_mrl(prefixes: PrefixSpec, fps: usize) -> Result<Self> {
        let k = prefixes.len();
        Ok(RunConfig::new(
            Regime::General,
            TrainScheme::PlainMrl,
            prefixes,
            DurationSet::from_seconds(&[2.0], fps)?,
            vec![0.2; k],
        ))
    }

    /// 6 s chunks, one head at `dim`, margin 0.5.
    pub fn lmft(dim: usize, fps: usize) -> Result<Self> {
        Ok(RunConfig::new(
            Regime::FineTune,
            TrainScheme::Lmft,
            PrefixSpec::full(dim)?,
            DurationSet::from_seconds(&[6.0], fps)?,
            vec![0.5],
        ))
    }

    /// Durations of an HW preset, one head at `dim`, the preset's margins
    /// applied per duration.
    pub fn d_almft(preset: &str, fps: usize) -> Result<Self> {
        let p = find_preset(preset)?;
        if p.scheme != TrainScheme::Hw {
            return Err(DameError::ConfigInvalid(format!("{preset} is not a hard-weighting preset")));
        }
        Ok(RunConfig::new(
            Regime::FineTune,
            TrainScheme::DAlmft,
            PrefixSpec::full(*p.dims.last().expect("non-empty preset"))?,
            DurationSet::from_seconds(p.seconds, fps)?,
            p.margins.to_vec(),
        ))
    }

    pub fn epochs(&self) -> usize {
        self.schedule.total_epochs
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.schedule.total_epochs = epochs;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn embed_dim(&self) -> usize {
        self.prefixes.full_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DameError::ConfigInvalid(m));
        self.schedule.validate()?;
        if self.schedule.regime != self.regime {
            return bad(format!("schedule regime {} differs from run regime {}", self.schedule.regime, self.regime));
        }
        match (self.scheme, self.regime) {
            (TrainScheme::Baseline | TrainScheme::Vlt, Regime::FineTune) => {
                return bad(format!("{} is a general-training scheme", self.scheme))
            }
            (TrainScheme::Lmft | TrainScheme::DAlmft, Regime::General) => {
                return bad(format!("{} is a fine-tuning scheme", self.scheme))
            }
            _ => {}
        }
        if self.scheme.single_head() && self.prefixes.len() != 1 {
            return bad(format!("{} uses a single full-dimension head, got {}", self.scheme, self.prefixes));
        }
        let keys: &[usize] = if self.scheme.duration_margins() { self.durations.frames() } else { self.prefixes.dims() };
        if self.schedule.margin_keys != keys {
            return bad("margin slots do not match the prefixes or durations they key".into());
        }
        alignment_weights_with_base(self.scheme.weight_scheme(), self.durations.len(), self.prefixes.len(), self.soft_base)?;
        if !(self.scale > 0.0) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        if self.speakers_per_batch == 0 || self.batches_per_epoch == 0 || self.hidden == 0 {
            return bad("batch size, batches per epoch and hidden width must be positive".into());
        }
        Ok(())
    }

    fn objective_at(&self, epoch: usize) -> Result<DameObjective> {
        let j = self.durations.len();
        let weights = alignment_weights_with_base(self.scheme.weight_scheme(), j, self.prefixes.len(), self.soft_base)?;
        let alpha = if j == 1 { 1.0 } else { alpha_at(epoch, &self.schedule) };
        let margins = margins_at(epoch, &self.schedule);
        let chunk_margins = if self.scheme.duration_margins() {
            margins.iter().map(|&m| MarginConfig::new(self.scale, vec![m])).collect::<Result<Vec<_>>>()?
        } else {
            vec![MarginConfig::new(self.scale, margins)?; j]
        };
        DameObjective::new(weights, alpha, chunk_margins)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub alpha: f64,
    pub lr: f64,
    pub margins: Vec<f64>,
    /// Mean batch loss over the epoch.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub margin_keys: Vec<usize>,
    pub records: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainLog {
    /// `epoch,alpha,lr,m_<key>...,loss`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,alpha,lr");
        for k in &self.margin_keys {
            out.push_str(&format!(",m_{k}"));
        }
        out.push_str(",loss\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{}", r.epoch, r.alpha, r.lr));
            for m in &r.margins {
                out.push_str(&format!(",{m}"));
            }
            out.push_str(&format!(",{}\n", r.loss));
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// State visible to a step observer after each optimizer update.
pub struct StepState<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub encoder: &'a EncoderParams,
    pub heads: &'a HeadBank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub encoder: EncoderParams,
    pub heads: HeadBank,
    pub log: TrainLog,
}

impl TrainedModel {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(self.encoder.clone(), self.heads.clone())
    }
}

fn check_pool(cfg: &RunConfig, pool: &[Vec<Utterance>]) -> Result<usize> {
    if pool.len() < 2 {
        return Err(DameError::ConfigInvalid("need ≥ 2 speakers".into()));
    }
    if cfg.speakers_per_batch > pool.len() {
        return Err(DameError::ConfigInvalid(format!(
            "batch of {} speakers exceeds the {} available",
            cfg.speakers_per_batch,
            pool.len()
        )));
    }
    Ok(pool[0][0].feature_dim())
}

/// Trains encoder and separate heads from scratch.
pub fn train_gt(cfg: &RunConfig, pool: &[Vec<Utterance>]) -> Result<TrainedModel> {
    train_gt_observed(cfg, pool, &mut |_| {})
}

pub fn train_gt_observed(
    cfg: &RunConfig,
    pool: &[Vec<Utterance>],
    observer: &mut dyn FnMut(&StepState<'_>),
) -> Result<TrainedModel> {
    if cfg.regime != Regime::General {
        return Err(DameError::ConfigInvalid("train_gt needs the general-training regime".into()));
    }
    cfg.validate()?;
    let f = check_pool(cfg, pool)?;
    let root = RngStream::new(cfg.seed);
    let encoder = EncoderParams::init(f, cfg.hidden, cfg.embed_dim(), &mut root.substream(STREAM_ENCODER_INIT));
    let heads = make_gt_heads(&cfg.prefixes, pool.len(), &mut root.substream(STREAM_HEAD_INIT))?;
    run(cfg, pool, encoder, heads, observer)
}

/// Fine-tunes the checkpoint at `cfg.pretrained`.
pub fn train_ft(cfg: &RunConfig, pool: &[Vec<Utterance>]) -> Result<TrainedModel> {
    let path = cfg
        .pretrained
        .as_ref()
        .ok_or_else(|| DameError::ConfigInvalid("fine-tuning needs a pretrained checkpoint".into()))?;
    let ck = Checkpoint::load(path)?;
    train_ft_from(cfg, pool, &ck, &mut |_| {})
}

/// Fine-tunes an in-memory pretrained model: its full-dimension head becomes
/// the shared matrix of a tied bank over `cfg.prefixes`.
pub fn train_ft_from(
    cfg: &RunConfig,
    pool: &[Vec<Utterance>],
    pretrained: &Checkpoint,
    observer: &mut dyn FnMut(&StepState<'_>),
) -> Result<TrainedModel> {
    if cfg.regime != Regime::FineTune {
        return Err(DameError::ConfigInvalid("train_ft needs the fine-tuning regime".into()));
    }
    cfg.validate()?;
    let f = check_pool(cfg, pool)?;
    let enc = pretrained.encoder.clone();
    if enc.embed_dim() != cfg.embed_dim() || enc.feature_dim() != f {
        return Err(DameError::ConfigInvalid(format!(
            "pretrained encoder maps {} -> {}, run needs {f} -> {}",
            enc.feature_dim(),
            enc.embed_dim(),
            cfg.embed_dim()
        )));
    }
    let w = pretrained.heads.full_head().clone();
    if w.cols() != pool.len() {
        return Err(DameError::ConfigInvalid(format!(
            "pretrained head has {} classes, data has {} speakers",
            w.cols(),
            pool.len()
        )));
    }
    let heads = tie_heads(w, cfg.prefixes.clone())?;
    run(cfg, pool, enc, heads, observer)
}

fn run(
    cfg: &RunConfig,
    pool: &[Vec<Utterance>],
    mut encoder: EncoderParams,
    mut heads: HeadBank,
    observer: &mut dyn FnMut(&StepState<'_>),
) -> Result<TrainedModel> {
    let mut rng = RngStream::new(cfg.seed).substream(STREAM_BATCHES);
    let mut records = Vec::with_capacity(cfg.epochs());
    for epoch in 0..cfg.epochs() {
        let objective = cfg.objective_at(epoch)?;
        let lr = lr_at(epoch, &cfg.schedule);
        let mut total = 0.0;
        for batch in 0..cfg.batches_per_epoch {
            let b = sample_instance_batch(pool, &cfg.durations, cfg.speakers_per_batch, &mut rng)?;
            let out = objective.evaluate(&encoder, &heads, &b)?;
            if !out.loss.is_finite() {
                return Err(DameError::NonFiniteLoss { epoch });
            }
            for (p, g) in encoder.slices_mut().into_iter().zip(out.encoder_grad.slices()) {
                sgd_step(p, g, lr)?;
            }
            if !cfg.freeze_head {
                heads.apply_sgd(&out.head_grad, lr)?;
            }
            if !encoder.is_finite() || !heads.is_finite() {
                return Err(DameError::NonFiniteLoss { epoch });
            }
            total += out.loss;
            observer(&StepState { epoch, batch, loss: out.loss, encoder: &encoder, heads: &heads });
        }
        records.push(EpochRecord {
            epoch,
            alpha: objective.alpha,
            lr,
            margins: margins_at(epoch, &cfg.schedule),
            loss: total / cfg.batches_per_epoch as f64,
        });
    }
    Ok(TrainedModel {
        encoder,
        heads,
        log: TrainLog { margin_keys: cfg.schedule.margin_keys.clone(), records, checkpoint: None },
    })
}
