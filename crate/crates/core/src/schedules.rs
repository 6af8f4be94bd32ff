//! Epoch-indexed α, margin and learning-rate schedules.

use std::fmt;
use std::str::FromStr;

use crate::error::{DameError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Training from scratch with separate heads.
    General,
    /// Fine-tuning a pretrained encoder with tied heads.
    FineTune,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::General => "gt",
            Regime::FineTune => "ft",
        })
    }
}

impl FromStr for Regime {
    type Err = DameError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gt" | "general" => Ok(Regime::General),
            "ft" | "finetune" | "fine-tune" => Ok(Regime::FineTune),
            _ => Err(DameError::ConfigInvalid(format!("unknown regime '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub regime: Regime,
    pub alpha_start: f64,
    /// Final α under general training; the constant α under fine-tuning.
    pub alpha_end: f64,
    pub alpha_end_epoch: usize,
    pub margin_warm_start: usize,
    pub margin_warm_end: usize,
    /// Base `B` of the warm-up ramp `(B^t - 1)/(B - 1)`.
    pub ramp_base: f64,
    /// Keys of the margin slots (prefix dimensions, or chunk frame counts for
    /// duration-keyed margins).
    pub margin_keys: Vec<usize>,
    pub initial_margins: Vec<f64>,
    pub final_margins: Vec<f64>,
    /// Constant rate under general training; decay start under fine-tuning.
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_epochs: usize,
}

impl ScheduleConfig {
    /// α 1.0 → 0.5 by epoch 50, margins ramped over epochs 30–40, constant
    /// learning rate 0.01.
    pub fn general(margin_keys: Vec<usize>, final_margins: Vec<f64>, total_epochs: usize) -> Self {
        let initial = vec![0.0; final_margins.len()];
        ScheduleConfig {
            regime: Regime::General,
            alpha_start: 1.0,
            alpha_end: 0.5,
            alpha_end_epoch: 50,
            margin_warm_start: 30,
            margin_warm_end: 40,
            ramp_base: 1000.0,
            margin_keys,
            initial_margins: initial,
            final_margins,
            lr_start: 0.01,
            lr_end: 0.01,
            total_epochs,
        }
    }

    /// Fixed α = 0.5 and final margins, learning rate 1e-4 → 1e-5.
    pub fn fine_tune(margin_keys: Vec<usize>, final_margins: Vec<f64>, total_epochs: usize) -> Self {
        ScheduleConfig {
            regime: Regime::FineTune,
            alpha_start: 0.5,
            alpha_end: 0.5,
            initial_margins: final_margins.clone(),
            lr_start: 1e-4,
            lr_end: 1e-5,
            ..Self::general(margin_keys, final_margins, total_epochs)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DameError::ConfigInvalid(msg));
        for a in [self.alpha_start, self.alpha_end] {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("alpha {a} outside [0, 1]"));
            }
        }
        if self.regime == Regime::General {
            if self.margin_warm_start >= self.margin_warm_end {
                return bad(format!(
                    "margin warm-up start {} must precede end {}",
                    self.margin_warm_start, self.margin_warm_end
                ));
            }
        }
        if !(self.ramp_base > 1.0) {
            return bad(format!("ramp base must exceed 1, got {}", self.ramp_base));
        }
        if self.margin_keys.len() != self.final_margins.len() || self.initial_margins.len() != self.final_margins.len() {
            return bad("margin keys, initial and final margins differ in length".into());
        }
        if let Some(m) = self.final_margins.iter().chain(&self.initial_margins).find(|m| !(0.0..=1.0).contains(*m)) {
            return bad(format!("margin {m} outside [0, 1]"));
        }
        if !(self.lr_start > 0.0) || !(self.lr_end > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.total_epochs == 0 {
            return bad("need at least one epoch".into());
        }
        Ok(())
    }
}

pub fn alpha_at(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    match cfg.regime {
        Regime::FineTune => cfg.alpha_end,
        Regime::General => {
            if epoch == 0 {
                cfg.alpha_start
            } else if epoch >= cfg.alpha_end_epoch {
                cfg.alpha_end
            } else {
                let t = epoch as f64 / cfg.alpha_end_epoch as f64;
                cfg.alpha_start + (cfg.alpha_end - cfg.alpha_start) * t
            }
        }
    }
}

/// Warm-up fraction in `[0, 1]` at `epoch`.
pub fn warmup_fraction(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    if epoch <= cfg.margin_warm_start {
        0.0
    } else if epoch >= cfg.margin_warm_end {
        1.0
    } else {
        let t = (epoch - cfg.margin_warm_start) as f64 / (cfg.margin_warm_end - cfg.margin_warm_start) as f64;
        (cfg.ramp_base.powf(t) - 1.0) / (cfg.ramp_base - 1.0)
    }
}

fn slot_margin(epoch: usize, slot: usize, cfg: &ScheduleConfig) -> f64 {
    let (init, fin) = (cfg.initial_margins[slot], cfg.final_margins[slot]);
    match cfg.regime {
        Regime::FineTune => fin,
        Regime::General => {
            let r = warmup_fraction(epoch, cfg);
            if r == 0.0 {
                init
            } else if r == 1.0 {
                fin
            } else {
                init + (fin - init) * r
            }
        }
    }
}

/// Margin of the slot keyed by `key` (normally a prefix dimension).
pub fn margin_at(epoch: usize, key: usize, cfg: &ScheduleConfig) -> Result<f64> {
    let slot = cfg
        .margin_keys
        .iter()
        .position(|&k| k == key)
        .ok_or(DameError::InvalidPrefix(key))?;
    Ok(slot_margin(epoch, slot, cfg))
}

/// All slot margins at `epoch`, in key order.
pub fn margins_at(epoch: usize, cfg: &ScheduleConfig) -> Vec<f64> {
    (0..cfg.final_margins.len()).map(|s| slot_margin(epoch, s, cfg)).collect()
}

pub fn lr_at(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    match cfg.regime {
        Regime::General => cfg.lr_start,
        Regime::FineTune => {
            if epoch == 0 {
                cfg.lr_start
            } else if epoch >= cfg.total_epochs {
                cfg.lr_end
            } else {
                let t = epoch as f64 / cfg.total_epochs as f64;
                cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(t)
            }
        }
    }
}
