//! Strict sectioned `key = value` configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use dame_core::nesting::{DurationSet, PrefixSpec};
use dame_core::schedules::Regime;
use dame_core::synthdata::GeneratorConfig;
use dame_core::trainer::{find_preset, RunConfig, TrainScheme};

pub const DATA_KEYS: &[&str] = &[
    "dir",
    "speakers",
    "frame_dim",
    "coarse_dim",
    "sigma_coarse",
    "sigma_fine",
    "session_coarse",
    "session_fine",
    "fps",
    "utterances_per_speaker",
    "utterance_frames",
    "eval_speakers",
    "eval_utterances_per_speaker",
    "seed",
];

pub const TRAIN_KEYS: &[&str] = &[
    "out",
    "preset",
    "regime",
    "scheme",
    "embed_dim",
    "prefixes",
    "durations",
    "margins",
    "initial_margins",
    "scale",
    "epochs",
    "speakers_per_batch",
    "batches_per_epoch",
    "hidden",
    "soft_base",
    "seed",
    "checkpoint",
    "freeze_head",
    "alpha_start",
    "alpha_end",
    "alpha_end_epoch",
    "margin_warm_start",
    "margin_warm_end",
    "ramp_base",
    "lr_start",
    "lr_end",
];

pub const EVAL_KEYS: &[&str] = &["checkpoint", "trials", "prefixes", "out"];

const SECTIONS: [(&str, &[&str]); 3] = [("data", DATA_KEYS), ("train", TRAIN_KEYS), ("eval", EVAL_KEYS)];

/// Malformed, unknown or out-of-range configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    /// Line in the config file; `None` for command-line overrides.
    line: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CliConfig {
    entries: BTreeMap<(String, String), Entry>,
}

fn known(section: &str, key: &str) -> bool {
    SECTIONS.iter().any(|(s, keys)| *s == section && keys.contains(&key))
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = CliConfig::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.iter().any(|(s, _)| *s == name) {
                    return err(format!("line {n}: unknown section [{name}]"));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(format!("line {n}: expected 'key = value'"));
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(sec) = &section else {
                return err(format!("line {n}: key '{key}' outside any section"));
            };
            if !known(sec, key) {
                return err(format!("line {n}: unknown key '{key}' in [{sec}]"));
            }
            let slot = (sec.clone(), key.to_string());
            if let Some(prev) = cfg.entries.get(&slot) {
                return err(format!(
                    "line {n}: duplicate key '{key}' in [{sec}] (first set on line {})",
                    prev.line.unwrap_or(0)
                ));
            }
            cfg.entries.insert(slot, Entry { value: value.to_string(), line: Some(n) });
        }
        Ok(cfg)
    }

    /// Command-line override `section.key=value`; replaces any file value.
    pub fn set_override(&mut self, spec: &str) -> Result<()> {
        let Some((path, value)) = spec.split_once('=') else {
            return err(format!("override '{spec}' is not section.key=value"));
        };
        let Some((sec, key)) = path.trim().split_once('.') else {
            return err(format!("override '{spec}' is not section.key=value"));
        };
        self.set(sec, key, value.trim())
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        if !known(section, key) {
            return err(format!("unknown key '{key}' in [{section}]"));
        }
        self.entries.insert((section.into(), key.into()), Entry { value: value.into(), line: None });
        Ok(())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries.get(&(section.to_string(), key.to_string())).map(|e| e.value.as_str())
    }

    fn where_(&self, section: &str, key: &str) -> String {
        match self.entries.get(&(section.to_string(), key.to_string())).and_then(|e| e.line) {
            Some(n) => format!("line {n}: {section}.{key}"),
            None => format!("{section}.{key}"),
        }
    }

    fn parsed<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| ConfigError(format!("{}: cannot parse '{v}'", self.where_(section, key)))),
        }
    }

    fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => parse_list(v)
                .map(Some)
                .map_err(|_| ConfigError(format!("{}: cannot parse list '{v}'", self.where_(section, key)))),
        }
    }

    fn bool(&self, section: &str, key: &str) -> Result<Option<bool>> {
        match self.get(section, key) {
            None => Ok(None),
            Some("true") | Some("1") | Some("yes") => Ok(Some(true)),
            Some("false") | Some("0") | Some("no") => Ok(Some(false)),
            Some(v) => err(format!("{}: expected true or false, got '{v}'", self.where_(section, key))),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(self.get("data", "dir").unwrap_or("data"))
    }

    pub fn generator(&self) -> Result<GeneratorConfig> {
        let mut g = GeneratorConfig::default();
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = self.parsed("data", stringify!($field))? {
                    g.$field = v;
                }
            )*};
        }
        take!(
            speakers,
            frame_dim,
            coarse_dim,
            sigma_coarse,
            sigma_fine,
            session_coarse,
            session_fine,
            fps,
            utterances_per_speaker,
            utterance_frames,
            eval_speakers,
            eval_utterances_per_speaker,
            seed
        );
        Ok(g)
    }

    pub fn train_out(&self) -> PathBuf {
        PathBuf::from(self.get("train", "out").unwrap_or("run"))
    }

    /// Resolves the run from a preset or scheme defaults, then applies every
    /// explicit key on top.
    pub fn run_config(&self) -> Result<RunConfig> {
        let fps = self.generator()?.fps;
        let wrap = |e: dame_core::DameError| ConfigError(e.to_string());
        let preset = self.get("train", "preset");
        let scheme: Option<TrainScheme> = self.parsed("train", "scheme")?;
        let embed_dim: usize = self.parsed("train", "embed_dim")?.unwrap_or(192);

        let base = match (preset, scheme) {
            (Some(name), None | Some(TrainScheme::Sw | TrainScheme::Hw)) => {
                let p = find_preset(name).map_err(wrap)?;
                if let Some(s) = scheme {
                    if s != p.scheme {
                        return err(format!("preset {name} is {}, scheme says {s}", p.scheme));
                    }
                }
                RunConfig::from_preset(name, Regime::General, fps).map_err(wrap)?
            }
            (p, Some(TrainScheme::DAlmft)) => RunConfig::d_almft(p.unwrap_or("ecapa-hw"), fps).map_err(wrap)?,
            (None, Some(TrainScheme::Baseline)) => RunConfig::baseline(embed_dim, fps).map_err(wrap)?,
            (None, Some(TrainScheme::Vlt)) => RunConfig::vlt(embed_dim, fps).map_err(wrap)?,
            (None, Some(TrainScheme::Lmft)) => RunConfig::lmft(embed_dim, fps).map_err(wrap)?,
            (None, Some(TrainScheme::PlainMrl)) => {
                let spec = PrefixSpec::new(vec![embed_dim / 8, embed_dim / 4, embed_dim / 2, embed_dim]).map_err(wrap)?;
                RunConfig::plain_mrl(spec, fps).map_err(wrap)?
            }
            (None, Some(s @ (TrainScheme::Sw | TrainScheme::Hw))) => {
                if self.get("train", "prefixes").is_none() || self.get("train", "durations").is_none() {
                    return err(format!("scheme {s} without a preset needs train.prefixes and train.durations"));
                }
                let k = self.list::<usize>("train", "prefixes")?.unwrap_or_default().len();
                RunConfig::new(
                    Regime::General,
                    s,
                    PrefixSpec::new(self.list("train", "prefixes")?.unwrap_or_default()).map_err(wrap)?,
                    DurationSet::from_seconds(&self.list::<f64>("train", "durations")?.unwrap_or_default(), fps)
                        .map_err(wrap)?,
                    vec![0.0; k],
                )
            }
            (Some(name), Some(s)) => return err(format!("preset {name} cannot be combined with scheme {s}")),
            (None, None) => return err("train needs a preset or a scheme"),
        };

        let regime = self.parsed::<Regime>("train", "regime")?.unwrap_or(base.regime);
        let prefixes = match self.list("train", "prefixes")? {
            Some(d) => PrefixSpec::new(d).map_err(wrap)?,
            None => base.prefixes.clone(),
        };
        let durations = match self.list::<f64>("train", "durations")? {
            Some(s) => DurationSet::from_seconds(&s, fps).map_err(wrap)?,
            None => base.durations.clone(),
        };
        let margins = self.list("train", "margins")?.unwrap_or_else(|| base.schedule.final_margins.clone());
        let mut run = RunConfig::new(regime, base.scheme, prefixes, durations, margins);
        if let Some(e) = self.parsed("train", "epochs")? {
            run.schedule.total_epochs = e;
        }
        if let Some(m) = self.list("train", "initial_margins")? {
            run.schedule.initial_margins = m;
        }
        macro_rules! take {
            ($target:expr, $($field:ident),*) => {$(
                if let Some(v) = self.parsed("train", stringify!($field))? {
                    $target.$field = v;
                }
            )*};
        }
        take!(run, scale, speakers_per_batch, batches_per_epoch, hidden, soft_base, seed);
        take!(
            run.schedule,
            alpha_start,
            alpha_end,
            alpha_end_epoch,
            margin_warm_start,
            margin_warm_end,
            ramp_base,
            lr_start,
            lr_end
        );
        if let Some(f) = self.bool("train", "freeze_head")? {
            run.freeze_head = f;
        }
        run.pretrained = self.get("train", "checkpoint").map(PathBuf::from);
        run.validate().map_err(wrap)?;
        Ok(run)
    }

    pub fn eval_prefixes(&self) -> Result<Option<Vec<usize>>> {
        self.list("eval", "prefixes")
    }
}

pub fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, ()> {
    let v = v.trim().trim_start_matches('{').trim_end_matches('}');
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| s.trim().parse::<T>().map_err(|_| ())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let c = CliConfig::parse("# run\n[data]\nspeakers = 8 # few\n\n[train]\npreset=ecapa-sw\n").unwrap();
        assert_eq!(c.get("data", "speakers"), Some("8"));
        assert_eq!(c.generator().unwrap().speakers, 8);
        assert_eq!(c.run_config().unwrap().prefixes.dims(), &[24, 48, 96, 192]);
    }

    #[test]
    fn strictness_reports_line_numbers() {
        let e = CliConfig::parse("[data]\nseed = 1\nseed = 2\n").unwrap_err();
        assert!(e.0.contains("line 3") && e.0.contains("duplicate"), "{e}");
        let e = CliConfig::parse("[data]\n\nspeekers = 3\n").unwrap_err();
        assert!(e.0.contains("line 3") && e.0.contains("unknown key"), "{e}");
        let e = CliConfig::parse("seed = 1\n").unwrap_err();
        assert!(e.0.contains("line 1"), "{e}");
        let e = CliConfig::parse("[model]\n").unwrap_err();
        assert!(e.0.contains("unknown section"), "{e}");
        let e = CliConfig::parse("[data]\nseed = x\n").unwrap().generator().unwrap_err();
        assert!(e.0.contains("line 2"), "{e}");
    }

    #[test]
    fn overrides_win() {
        let mut c = CliConfig::parse("[train]\npreset = resnet34-sw\nepochs = 60\n").unwrap();
        c.set_override("train.epochs=3").unwrap();
        assert_eq!(c.run_config().unwrap().epochs(), 3);
        assert!(c.set_override("train.epoch=3").is_err());
        assert!(c.set_override("epochs=3").is_err());
    }

    #[test]
    fn explicit_keys_refine_presets() {
        let c = CliConfig::parse("[train]\npreset = ecapa-hw\nregime = ft\nmargins = 0, 0.1, 0.3\nlr_end = 2e-5\n").unwrap();
        let r = c.run_config().unwrap();
        assert_eq!(r.regime, Regime::FineTune);
        assert_eq!(r.schedule.final_margins, vec![0.0, 0.1, 0.3]);
        assert_eq!(r.schedule.lr_end, 2e-5);
        assert_eq!(r.durations.frames(), &[20, 40, 120]);
    }

    #[test]
    fn baselines_from_scheme() {
        let c = CliConfig::parse("[train]\nscheme = baseline\nembed_dim = 32\n").unwrap();
        let r = c.run_config().unwrap();
        assert_eq!(r.prefixes.dims(), &[32]);
        assert_eq!(r.durations.frames(), &[40]);
        let c = CliConfig::parse("[train]\nscheme = d-almft\npreset = resnet34-hw\n").unwrap();
        let r = c.run_config().unwrap();
        assert_eq!(r.prefixes.dims(), &[256]);
        assert_eq!(r.schedule.margin_keys, vec![20, 40, 120]);
        assert!(CliConfig::parse("[train]\nscheme = sw\n").unwrap().run_config().is_err());
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<usize>("{24, 48,96}").unwrap(), vec![24, 48, 96]);
        assert!(parse_list::<usize>("24,x").is_err());
    }
}
