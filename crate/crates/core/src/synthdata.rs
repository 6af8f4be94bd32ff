//! Synthetic speaker population whose identity evidence grows with duration.
//!
//! Each speaker has a unit-norm *coarse* trait on the first `F_c` feature
//! coordinates and a unit-norm *fine* trait on the rest. Every utterance adds
//! a per-utterance session offset (constant over frames) and i.i.d. per-frame
//! noise, which is much stronger on the fine block. Mean pooling over `T`
//! frames shrinks the frame noise as `σ/√T`, so short chunks recover the
//! coarse trait only while long chunks also recover the fine one.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::binio::{self, DecodeError};
use crate::encoder::Utterance;
use crate::error::{DameError, Result};
use crate::nesting::DurationSet;
use crate::numerics::{Matrix, RngStream};

pub const DATA_MAGIC: &[u8; 8] = b"DAMEDAT1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const FRAMES_FILE: &str = "frames.bin";
pub const TRIALS_DIR: &str = "trials";

const STREAM_TRAIN_POPULATION: u64 = 1;
const STREAM_EVAL_POPULATION: u64 = 2;
const STREAM_TRIALS: u64 = 3;
const STREAM_TRAIN_UTTERANCE: u64 = 1 << 40;
const STREAM_EVAL_UTTERANCE: u64 = 2 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub speakers: usize,
    pub frame_dim: usize,
    pub coarse_dim: usize,
    pub sigma_coarse: f64,
    pub sigma_fine: f64,
    /// Per-utterance session offset std on the coarse block.
    pub session_coarse: f64,
    /// Per-utterance session offset std on the fine block.
    pub session_fine: f64,
    pub fps: usize,
    pub utterances_per_speaker: usize,
    pub utterance_frames: usize,
    pub eval_speakers: usize,
    pub eval_utterances_per_speaker: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            speakers: 64,
            frame_dim: 48,
            coarse_dim: 24,
            sigma_coarse: 0.5,
            sigma_fine: 2.0,
            session_coarse: 0.1,
            session_fine: 0.2,
            fps: 20,
            utterances_per_speaker: 8,
            utterance_frames: 400,
            eval_speakers: 128,
            eval_utterances_per_speaker: 8,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DameError::ConfigInvalid(m));
        if self.speakers < 2 {
            return bad("need ≥ 2 speakers".into());
        }
        if self.eval_speakers < 2 {
            return bad("need ≥ 2 evaluation speakers".into());
        }
        if !(self.coarse_dim > 0 && self.coarse_dim < self.frame_dim) {
            return bad(format!(
                "coarse block {} must lie strictly inside frame dim {}",
                self.coarse_dim, self.frame_dim
            ));
        }
        if !(self.sigma_coarse > 0.0 && self.sigma_fine > self.sigma_coarse) {
            return bad(format!(
                "need sigma_fine > sigma_coarse > 0, got {} and {}",
                self.sigma_fine, self.sigma_coarse
            ));
        }
        if !(self.session_coarse >= 0.0 && self.session_fine >= 0.0) {
            return bad("session noise must be non-negative".into());
        }
        if self.fps == 0 || self.utterance_frames == 0 {
            return bad("fps and utterance length must be positive".into());
        }
        if self.utterance_frames < 5 * self.fps {
            return bad(format!(
                "utterances of {} frames are shorter than the 5 s trial condition at {} fps",
                self.utterance_frames, self.fps
            ));
        }
        if self.utterances_per_speaker == 0 {
            return bad("need at least one training utterance per speaker".into());
        }
        if self.eval_utterances_per_speaker < 2 {
            return bad("need ≥ 2 evaluation utterances per speaker".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub id: usize,
    pub coarse: Vec<f64>,
    pub fine: Vec<f64>,
}

impl SpeakerProfile {
    /// `[coarse; fine]`.
    pub fn traits(&self) -> Vec<f64> {
        let mut t = self.coarse.clone();
        t.extend_from_slice(&self.fine);
        t
    }
}

fn unit_gaussian(n: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        if let Ok(u) = crate::numerics::l2_normalize(&v) {
            return u;
        }
    }
}

fn population(cfg: &GeneratorConfig, count: usize, first_id: usize, stream: u64) -> Vec<SpeakerProfile> {
    let mut rng = RngStream::new(cfg.seed).substream(stream);
    let fine_dim = cfg.frame_dim - cfg.coarse_dim;
    (0..count)
        .map(|i| SpeakerProfile {
            id: first_id + i,
            coarse: unit_gaussian(cfg.coarse_dim, &mut rng),
            fine: unit_gaussian(fine_dim, &mut rng),
        })
        .collect()
}

/// Training speakers `0..C`.
pub fn make_population(cfg: &GeneratorConfig) -> Result<Vec<SpeakerProfile>> {
    if cfg.speakers < 2 {
        return Err(DameError::ConfigInvalid("need ≥ 2 speakers".into()));
    }
    Ok(population(cfg, cfg.speakers, 0, STREAM_TRAIN_POPULATION))
}

/// Held-out speakers `C..C+C_eval`, disjoint from the training population.
pub fn make_eval_population(cfg: &GeneratorConfig) -> Result<Vec<SpeakerProfile>> {
    if cfg.eval_speakers < 2 {
        return Err(DameError::ConfigInvalid("need ≥ 2 evaluation speakers".into()));
    }
    Ok(population(cfg, cfg.eval_speakers, cfg.speakers, STREAM_EVAL_POPULATION))
}

/// One utterance of `duration_frames` frames for speaker `p`.
pub fn sample_utterance(
    p: &SpeakerProfile,
    duration_frames: usize,
    cfg: &GeneratorConfig,
    rng: &mut RngStream,
    source_id: impl Into<String>,
) -> Result<Utterance> {
    if duration_frames < 1 {
        return Err(DameError::InvalidDuration("utterance needs at least one frame".into()));
    }
    let traits = p.traits();
    let f = traits.len();
    let fc = p.coarse.len();
    let session: Vec<f64> = (0..f)
        .map(|i| rng.gaussian() * if i < fc { cfg.session_coarse } else { cfg.session_fine })
        .collect();
    let mut frames = Matrix::zeros(duration_frames, f);
    for t in 0..duration_frames {
        let row = frames.row_mut(t);
        for i in 0..f {
            let sigma = if i < fc { cfg.sigma_coarse } else { cfg.sigma_fine };
            row[i] = traits[i] + session[i] + sigma * rng.gaussian();
        }
    }
    Utterance::new(frames, p.id, source_id)
}

fn utterances_for(
    profiles: &[SpeakerProfile],
    per_speaker: usize,
    cfg: &GeneratorConfig,
    stream_base: u64,
    prefix: &str,
) -> Result<Vec<Vec<Utterance>>> {
    let root = RngStream::new(cfg.seed);
    profiles
        .iter()
        .enumerate()
        .map(|(s, p)| {
            (0..per_speaker)
                .map(|u| {
                    // independent sub-stream per (speaker, utterance)
                    let mut rng = root.substream(stream_base | ((s as u64) << 16) | u as u64);
                    let id = format!("{prefix}-s{:04}-u{:02}", p.id, u);
                    sample_utterance(p, cfg.utterance_frames, cfg, &mut rng, id)
                })
                .collect()
        })
        .collect()
}

/// One training instance: `J` chunks of one speaker from distinct utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub speaker: usize,
    pub chunks: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBatch {
    pub instances: Vec<Instance>,
}

/// Draws `speakers_per_batch` distinct speakers and, for each, `J` distinct
/// source utterances cropped at random offsets to the durations in `durations`.
pub fn sample_instance_batch(
    pool: &[Vec<Utterance>],
    durations: &DurationSet,
    speakers_per_batch: usize,
    rng: &mut RngStream,
) -> Result<InstanceBatch> {
    let j = durations.len();
    if speakers_per_batch == 0 || speakers_per_batch > pool.len() {
        return Err(DameError::ConfigInvalid(format!(
            "cannot draw {speakers_per_batch} speakers from {}",
            pool.len()
        )));
    }
    for (s, utts) in pool.iter().enumerate() {
        if utts.len() < j {
            return Err(DameError::InsufficientUtterances { speaker: s, available: utts.len(), needed: j });
        }
    }
    let speakers = rng.distinct(pool.len(), speakers_per_batch);
    let mut instances = Vec::with_capacity(speakers_per_batch);
    for s in speakers {
        let utts = &pool[s];
        let picks = rng.distinct(utts.len(), j);
        let mut chunks = Vec::with_capacity(j);
        for (&u, &len) in picks.iter().zip(durations.frames()) {
            let src = &utts[u];
            if src.num_frames() < len {
                return Err(DameError::InvalidDuration(format!(
                    "{} has {} frames, chunk needs {len}",
                    src.source_id,
                    src.num_frames()
                )));
            }
            let start = rng.below(src.num_frames() - len + 1);
            chunks.push(src.crop(start, len)?);
        }
        instances.push(Instance { speaker: utts[0].speaker, chunks });
    }
    Ok(InstanceBatch { instances })
}

/// Enrollment/test durations of one trial condition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialCondition {
    pub name: String,
    pub enroll_frames: usize,
    pub test_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialProtocol {
    pub conditions: Vec<TrialCondition>,
}

/// Conditions averaged into `s-avg`.
pub const SHORT_CONDITIONS: [&str; 4] = ["5s-5s", "5s-3s", "5s-2s", "5s-1s"];
pub const FULL_CONDITION: &str = "f-f";

impl TrialProtocol {
    /// `f-f` plus 5 s enrollment against 5, 3, 2 and 1 s tests.
    pub fn standard(fps: usize, full_frames: usize) -> Self {
        let c = |name: &str, e: usize, t: usize| TrialCondition { name: name.into(), enroll_frames: e, test_frames: t };
        TrialProtocol {
            conditions: vec![
                c(FULL_CONDITION, full_frames, full_frames),
                c("5s-5s", 5 * fps, 5 * fps),
                c("5s-3s", 5 * fps, 3 * fps),
                c("5s-2s", 5 * fps, 2 * fps),
                c("5s-1s", 5 * fps, fps),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialList {
    pub condition: TrialCondition,
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn targets(&self) -> usize {
        self.trials.iter().filter(|t| t.target).count()
    }

    pub fn nontargets(&self) -> usize {
        self.trials.len() - self.targets()
    }

    /// `<label 0|1> <enroll-id> <test-id> <enroll-frames> <test-frames>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.trials {
            out.push_str(&format!(
                "{} {} {} {} {}\n",
                u8::from(t.target),
                t.enroll,
                t.test,
                self.condition.enroll_frames,
                self.condition.test_frames
            ));
        }
        out
    }

    pub fn parse(name: &str, text: &str) -> std::result::Result<Self, String> {
        let mut trials = Vec::new();
        let mut frames: Option<(usize, usize)> = None;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(format!("line {}: expected 5 fields", n + 1));
            }
            let target = match f[0] {
                "1" => true,
                "0" => false,
                other => return Err(format!("line {}: bad label '{other}'", n + 1)),
            };
            let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("line {}: bad frame count '{s}'", n + 1));
            let fr = (parse(f[3])?, parse(f[4])?);
            match frames {
                None => frames = Some(fr),
                Some(prev) if prev != fr => return Err(format!("line {}: mixed frame counts", n + 1)),
                _ => {}
            }
            trials.push(Trial { enroll: f[1].into(), test: f[2].into(), target });
        }
        let (enroll_frames, test_frames) = frames.ok_or("empty trial list")?;
        Ok(TrialList {
            condition: TrialCondition { name: name.into(), enroll_frames, test_frames },
            trials,
        })
    }
}

/// Balanced trials over held-out utterances: the first half of each
/// speaker's utterances enroll, the second half test. Every enrollment is
/// paired with all same-speaker tests and as many tests of one random other
/// speaker. All conditions share the pairs and differ only in crop lengths.
pub fn build_trials(eval: &[Vec<Utterance>], protocol: &TrialProtocol, rng: &mut RngStream) -> Result<Vec<TrialList>> {
    if eval.len() < 2 {
        return Err(DameError::ConfigInvalid("need ≥ 2 speakers for trials".into()));
    }
    let mut pairs = Vec::new();
    for (s, utts) in eval.iter().enumerate() {
        if utts.len() < 2 {
            return Err(DameError::InsufficientUtterances { speaker: s, available: utts.len(), needed: 2 });
        }
        let split = utts.len() / 2;
        for e in &utts[..split] {
            for t in &utts[split..] {
                pairs.push(Trial { enroll: e.source_id.clone(), test: t.source_id.clone(), target: true });
            }
            let other = {
                let o = rng.below(eval.len() - 1);
                if o >= s {
                    o + 1
                } else {
                    o
                }
            };
            let ou = &eval[other];
            let osplit = ou.len() / 2;
            let tests = &ou[osplit..];
            for n in 0..(utts.len() - split) {
                let t = &tests[n % tests.len()];
                pairs.push(Trial { enroll: e.source_id.clone(), test: t.source_id.clone(), target: false });
            }
        }
    }
    let longest = eval.iter().flatten().map(Utterance::num_frames).min().unwrap_or(0);
    protocol
        .conditions
        .iter()
        .map(|c| {
            if c.enroll_frames > longest || c.test_frames > longest || c.enroll_frames == 0 || c.test_frames == 0 {
                return Err(DameError::InvalidDuration(format!(
                    "condition {} needs {}/{} frames, utterances have {longest}",
                    c.name, c.enroll_frames, c.test_frames
                )));
            }
            Ok(TrialList { condition: c.clone(), trials: pairs.clone() })
        })
        .collect()
}

/// Training pool, held-out evaluation utterances and trial lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Vec<Utterance>>,
    pub eval: Vec<Vec<Utterance>>,
    pub trials: Vec<TrialList>,
}

impl Dataset {
    pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
        cfg.validate()?;
        let train_pop = make_population(cfg)?;
        let eval_pop = make_eval_population(cfg)?;
        let train = utterances_for(&train_pop, cfg.utterances_per_speaker, cfg, STREAM_TRAIN_UTTERANCE, "tr")?;
        let eval = utterances_for(&eval_pop, cfg.eval_utterances_per_speaker, cfg, STREAM_EVAL_UTTERANCE, "ev")?;
        let protocol = TrialProtocol::standard(cfg.fps, cfg.utterance_frames);
        let mut rng = RngStream::new(cfg.seed).substream(STREAM_TRIALS);
        let trials = build_trials(&eval, &protocol, &mut rng)?;
        Ok(Dataset { train, eval, trials })
    }

    pub fn num_speakers(&self) -> usize {
        self.train.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.train[0][0].feature_dim()
    }

    pub fn num_utterances(&self) -> usize {
        self.train.iter().chain(&self.eval).map(Vec::len).sum()
    }

    pub fn trial_list(&self, name: &str) -> Option<&TrialList> {
        self.trials.iter().find(|t| t.condition.name == name)
    }

    /// Evaluation utterances by id.
    pub fn eval_index(&self) -> HashMap<&str, &Utterance> {
        self.eval.iter().flatten().map(|u| (u.source_id.as_str(), u)).collect()
    }

    fn all_utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.train.iter().flatten().chain(self.eval.iter().flatten())
    }

    /// `manifest.txt`, `frames.bin` and `trials/<condition>.txt` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let trial_dir = dir.join(TRIALS_DIR);
        fs::create_dir_all(&trial_dir).map_err(|e| DameError::io(&trial_dir, e))?;

        let manifest_path = dir.join(MANIFEST_FILE);
        let mut manifest = String::new();
        for u in self.all_utterances() {
            manifest.push_str(&format!("{} {} {}\n", u.source_id, u.speaker, u.num_frames()));
        }
        fs::write(&manifest_path, manifest).map_err(|e| DameError::io(&manifest_path, e))?;

        let frames_path = dir.join(FRAMES_FILE);
        let file = fs::File::create(&frames_path).map_err(|e| DameError::io(&frames_path, e))?;
        let mut w = BufWriter::new(file);
        let write = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
            w.write_all(DATA_MAGIC)?;
            for u in self.all_utterances() {
                binio::write_u32(w, binio::dim_u32(u.num_frames())?)?;
                binio::write_u32(w, binio::dim_u32(u.feature_dim())?)?;
                binio::write_f64s(w, u.frames.data())?;
            }
            w.flush()
        };
        write(&mut w).map_err(|e| DameError::io(&frames_path, e))?;

        let mut written = vec![manifest_path, frames_path];
        for list in &self.trials {
            let p = trial_dir.join(format!("{}.txt", list.condition.name));
            fs::write(&p, list.to_text()).map_err(|e| DameError::io(&p, e))?;
            written.push(p);
        }
        Ok(written)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| DameError::io(&manifest_path, e))?;
        let corrupt = |path: &Path, reason: String| DameError::DataCorrupt { path: path.to_path_buf(), reason };
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || corrupt(&manifest_path, format!("line {}: expected '<id> <speaker> <frames>'", n + 1));
            if f.len() != 3 {
                return Err(bad());
            }
            let spk: usize = f[1].parse().map_err(|_| bad())?;
            let frames: usize = f[2].parse().map_err(|_| bad())?;
            entries.push((f[0].to_string(), spk, frames));
        }

        let frames_path = dir.join(FRAMES_FILE);
        let file = fs::File::open(&frames_path).map_err(|e| DameError::io(&frames_path, e))?;
        let mut r = BufReader::new(file);
        let decode = |e: DecodeError| match e {
            DecodeError::Io(io) => DameError::io(&frames_path, io),
            DecodeError::Format(s) => corrupt(&frames_path, s),
        };
        binio::expect_magic(&mut r, DATA_MAGIC).map_err(decode)?;
        let mut train: Vec<Vec<Utterance>> = Vec::new();
        let mut eval: Vec<Vec<Utterance>> = Vec::new();
        let mut eval_base: Option<usize> = None;
        for (id, spk, frames) in entries {
            let t = binio::read_u32(&mut r).map_err(decode)? as usize;
            let f = binio::read_u32(&mut r).map_err(decode)? as usize;
            if t != frames || f == 0 {
                return Err(corrupt(&frames_path, format!("{id}: header {t}x{f} disagrees with manifest")));
            }
            let data = binio::read_f64s(&mut r, t * f).map_err(decode)?;
            let u = Utterance::new(Matrix::from_vec(t, f, data)?, spk, id.clone())?;
            let (group, index) = if id.starts_with("tr-") {
                (&mut train, spk)
            } else if id.starts_with("ev-") {
                let base = *eval_base.get_or_insert(spk);
                if spk < base {
                    return Err(corrupt(&manifest_path, format!("{id}: evaluation speakers out of order")));
                }
                (&mut eval, spk - base)
            } else {
                return Err(corrupt(&manifest_path, format!("{id}: unknown split")));
            };
            if index > group.len() {
                return Err(corrupt(&manifest_path, format!("{id}: speakers are not contiguous")));
            }
            if index == group.len() {
                group.push(Vec::new());
            }
            group[index].push(u);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| DameError::io(&frames_path, e))? != 0 {
            return Err(corrupt(&frames_path, "trailing bytes after last utterance".into()));
        }
        if train.len() < 2 {
            return Err(corrupt(&manifest_path, "need ≥ 2 training speakers".into()));
        }

        let trial_dir = dir.join(TRIALS_DIR);
        let trials = load_trials(&trial_dir)?;
        Ok(Dataset { train, eval, trials })
    }
}

/// Reads every `<condition>.txt` in `dir`, standard conditions first in
/// protocol order, then any others by name.
pub fn load_trials(dir: &Path) -> Result<Vec<TrialList>> {
    let rd = fs::read_dir(dir).map_err(|e| DameError::io(dir, e))?;
    let mut names = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| DameError::io(dir, e))?;
        let p = entry.path();
        if p.extension().and_then(|s| s.to_str()) == Some("txt") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    let order = |n: &str| {
        std::iter::once(FULL_CONDITION)
            .chain(SHORT_CONDITIONS)
            .position(|c| c == n)
            .unwrap_or(usize::MAX)
    };
    names.sort_by(|a, b| order(a).cmp(&order(b)).then(a.cmp(b)));
    names
        .into_iter()
        .map(|name| {
            let p = dir.join(format!("{name}.txt"));
            let file = fs::File::open(&p).map_err(|e| DameError::io(&p, e))?;
            let mut text = String::new();
            for line in BufReader::new(file).lines() {
                text.push_str(&line.map_err(|e| DameError::io(&p, e))?);
                text.push('\n');
            }
            TrialList::parse(&name, &text).map_err(|reason| DameError::DataCorrupt { path: p, reason })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, norm};

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            speakers: 4,
            frame_dim: 8,
            coarse_dim: 4,
            utterances_per_speaker: 3,
            utterance_frames: 120,
            eval_speakers: 3,
            eval_utterances_per_speaker: 4,
            seed: 9,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn population_blocks_are_unit() {
        let cfg = GeneratorConfig { speakers: 2, frame_dim: 8, coarse_dim: 4, ..small() };
        let pop = make_population(&cfg).unwrap();
        assert_eq!(pop.len(), 2);
        for p in &pop {
            assert!((norm(&p.coarse) - 1.0).abs() < 1e-12);
            assert!((norm(&p.fine) - 1.0).abs() < 1e-12);
        }
        assert_eq!(pop, make_population(&cfg).unwrap());
        assert!(make_population(&GeneratorConfig { speakers: 1, ..cfg }).is_err());
    }

    #[test]
    fn coarse_traits_near_orthogonal() {
        let cfg = GeneratorConfig { speakers: 64, frame_dim: 64, coarse_dim: 32, ..small() };
        let pop = make_population(&cfg).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for a in 0..64 {
            for b in a + 1..64 {
                sum += dot(&pop[a].coarse, &pop[b].coarse);
                n += 1;
            }
        }
        assert!((sum / n as f64).abs() < 0.1);
    }

    #[test]
    fn noiseless_frames_equal_traits() {
        let cfg = GeneratorConfig { sigma_coarse: 0.0, sigma_fine: 0.0, session_coarse: 0.0, session_fine: 0.0, ..small() };
        let p = &make_population(&cfg).unwrap()[0];
        let u = sample_utterance(p, 5, &cfg, &mut RngStream::new(1), "x").unwrap();
        for t in 0..5 {
            assert_eq!(u.frames.row(t), p.traits().as_slice());
        }
        assert!(matches!(
            sample_utterance(p, 0, &cfg, &mut RngStream::new(1), "x"),
            Err(DameError::InvalidDuration(_))
        ));
    }

    #[test]
    fn long_utterance_mean_recovers_coarse_trait() {
        // squared error over 24 coordinates is (0.5^2 / 10000) chi^2_24:
        // P(< 0.03) = 0.945, P(< 0.035) = 0.998
        let cfg = GeneratorConfig { frame_dim: 48, coarse_dim: 24, session_coarse: 0.0, session_fine: 0.0, ..small() };
        let pop = make_population(&cfg).unwrap();
        let (mut within_30, mut within_35, mut sq) = (0, 0, 0.0);
        for seed in 0..100 {
            let u = sample_utterance(&pop[0], 10_000, &cfg, &mut RngStream::new(seed), "x").unwrap();
            let m = u.pooled();
            let err: Vec<f64> = m[..24].iter().zip(&pop[0].coarse).map(|(a, b)| a - b).collect();
            let e = norm(&err);
            within_30 += usize::from(e < 0.03);
            within_35 += usize::from(e < 0.035);
            sq += e * e / 24.0;
        }
        let per_coord_sd = (sq / 100.0).sqrt();
        assert!((per_coord_sd - 0.005).abs() < 0.0005, "{per_coord_sd}");
        assert!((85..=100).contains(&within_30), "{within_30}/100");
        assert!(within_35 >= 99, "{within_35}/100");
    }

    #[test]
    fn fine_block_error_shrinks_with_duration() {
        let cfg = GeneratorConfig { frame_dim: 48, coarse_dim: 24, ..small() };
        let pop = make_population(&cfg).unwrap();
        let err = |t: usize| -> f64 {
            (0..100)
                .map(|seed| {
                    let u = sample_utterance(&pop[1], t, &cfg, &mut RngStream::new(seed), "x").unwrap();
                    let m = u.pooled();
                    m[24..].iter().zip(&pop[1].fine).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
                / 100.0
        };
        assert!(err(10) > err(1000));
    }

    #[test]
    fn instance_batches_use_distinct_sources() {
        let ds = Dataset::generate(&small()).unwrap();
        let durs = DurationSet::from_seconds(&[1.0, 2.0], 20).unwrap();
        let mut rng = RngStream::new(3);
        for _ in 0..50 {
            let b = sample_instance_batch(&ds.train, &durs, 2, &mut rng).unwrap();
            assert_eq!(b.instances.len(), 2);
            assert_eq!(b.instances.iter().map(|i| i.chunks.len()).sum::<usize>(), 4);
            for inst in &b.instances {
                assert_eq!(inst.chunks[0].num_frames(), 20);
                assert_eq!(inst.chunks[1].num_frames(), 40);
                assert_ne!(inst.chunks[0].source_id, inst.chunks[1].source_id);
                assert!(inst.chunks.iter().all(|c| c.speaker == inst.speaker));
            }
        }
        let too_many = DurationSet::from_frames(vec![1, 2, 3, 4]).unwrap();
        assert!(matches!(
            sample_instance_batch(&ds.train, &too_many, 2, &mut rng),
            Err(DameError::InsufficientUtterances { needed: 4, .. })
        ));
    }

    #[test]
    fn trials_are_balanced_and_never_self_paired() {
        let ds = Dataset::generate(&small()).unwrap();
        assert_eq!(ds.trials.len(), 5);
        for list in &ds.trials {
            assert!(list.targets() >= 1);
            assert_eq!(list.targets(), list.nontargets());
            assert!(list.trials.iter().all(|t| t.enroll != t.test));
        }
        assert_eq!(ds.trial_list("5s-1s").unwrap().condition.test_frames, 20);
        assert_eq!(ds.trial_list("f-f").unwrap().condition.enroll_frames, 120);
    }

    #[test]
    fn minimal_trials() {
        let cfg = GeneratorConfig { eval_speakers: 2, eval_utterances_per_speaker: 2, ..small() };
        let pop = make_eval_population(&cfg).unwrap();
        let eval: Vec<Vec<Utterance>> = pop
            .iter()
            .map(|p| {
                (0..2)
                    .map(|u| sample_utterance(p, 120, &cfg, &mut RngStream::new(u), format!("ev-{}-{u}", p.id)).unwrap())
                    .collect()
            })
            .collect();
        let lists = build_trials(&eval, &TrialProtocol::standard(20, 120), &mut RngStream::new(0)).unwrap();
        for l in lists {
            assert!(l.targets() >= 2 && l.nontargets() >= 2);
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(&small()).unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
        let frames = fs::read(dir.path().join(FRAMES_FILE)).unwrap();
        assert_eq!(&frames[..8], DATA_MAGIC);
        let trial = fs::read_to_string(dir.path().join(TRIALS_DIR).join("5s-1s.txt")).unwrap();
        let first = trial.lines().next().unwrap();
        assert!(first.starts_with("1 ev-") && first.ends_with(" 100 20"), "{first}");
    }

    #[test]
    fn regeneration_is_bitwise_identical() {
        assert_eq!(Dataset::generate(&small()).unwrap(), Dataset::generate(&small()).unwrap());
        let other = Dataset::generate(&GeneratorConfig { seed: 10, ..small() }).unwrap();
        assert_ne!(other.train, Dataset::generate(&small()).unwrap().train);
    }
}
