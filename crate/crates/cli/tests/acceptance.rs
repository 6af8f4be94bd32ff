//! Acceptance criteria, one PASS/FAIL line each.
//!
//! `cargo test -p dame-cli --test acceptance`

use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use dame_core::checkpoint::Checkpoint;
use dame_core::encoder::{encode, EncoderParams, Utterance};
use dame_core::eval::{evaluate_dataset, EvalReport, S_AVG};
use dame_core::margin_head::{make_gt_heads, margin_loss, HeadMode, MarginConfig};
use dame_core::nesting::PrefixSpec;
use dame_core::numerics::{Matrix, RngStream};
use dame_core::objective::{alignment_weights, dame_loss, DameObjective, WeightScheme};
use dame_core::schedules::{alpha_at, lr_at, margin_at, Regime};
use dame_core::selftest::{
    check_alignment_examples, check_band_partition, check_eer_oracle, check_encoder, check_margin_loss,
    check_objective, GRADIENT_PROBES,
};
use dame_core::synthdata::{Dataset, GeneratorConfig, Instance, InstanceBatch, FULL_CONDITION, SHORT_CONDITIONS};
use dame_core::trainer::{train_ft_from, train_gt, RunConfig};
use tempfile::TempDir;

const FPS: usize = 20;
const SEEDS: std::ops::RangeInclusive<u64> = 1..=5;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn within(start: Instant, budget: Duration, r: Outcome) -> Outcome {
    let took = start.elapsed();
    let r = r.map(|m| format!("{m} ({:.2} s)", took.as_secs_f64()));
    match r {
        Ok(m) if took > budget => Err(format!("{m}, over the {} s budget", budget.as_secs())),
        other => other,
    }
}

fn alignment_oracle() -> Outcome {
    let a = check_alignment_examples()?;
    let b = check_band_partition(512)?;
    Ok(format!("{a}; {b}"))
}

fn gradient_suite() -> Outcome {
    let mut parts = Vec::new();
    for (name, f) in [
        ("margin_loss", check_margin_loss as fn(usize, f64, bool) -> _),
        ("encoder", check_encoder),
        ("objective", check_objective),
    ] {
        let reports = f(GRADIENT_PROBES, 1e-5, false).map_err(|e| format!("{name}: {e}"))?;
        let worst = reports.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
        if reports.len() < 20 || reports.iter().any(|r| !r.passed) {
            return Err(format!("{name}: {} probes, max relative error {worst:.3e}", reports.len()));
        }
        parts.push(format!("{name} {worst:.1e}"));
    }
    Ok(format!("{} probes each, worst {}", GRADIENT_PROBES, parts.join(", ")))
}

fn batch(rng: &mut RngStream, speakers: usize, lengths: &[usize], dim: usize) -> InstanceBatch {
    let instances = (0..speakers)
        .map(|s| Instance {
            speaker: s,
            chunks: lengths
                .iter()
                .map(|&t| Utterance::new(Matrix::randn(t, dim, 1.0, rng), s, format!("s{s}-{t}")).unwrap())
                .collect(),
        })
        .collect();
    InstanceBatch { instances }
}

fn loss_reductions() -> Outcome {
    let mut rng = RngStream::new(0xAC3);
    // (a) zero margin against softmax cross-entropy over s·cosθ
    let spec = PrefixSpec::new(vec![16]).unwrap();
    let zero = MarginConfig::new(30.0, vec![0.0]).unwrap();
    let mut worst_a = 0.0f64;
    for _ in 0..200 {
        let bank = make_gt_heads(&spec, 8, &mut rng).unwrap();
        let z: Vec<f64> = (0..16).map(|_| rng.gaussian()).collect();
        let y = rng.below(8);
        let head = bank.head(0);
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let logits: Vec<f64> = (0..8)
            .map(|c| {
                let (mut dot, mut wn) = (0.0, 0.0);
                for (r, zr) in z.iter().enumerate() {
                    dot += zr * head.get(r, c);
                    wn += head.get(r, c) * head.get(r, c);
                }
                30.0 * dot / (zn * wn.sqrt())
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ce = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() - logits[y];
        worst_a = worst_a.max((margin_loss(&z, &bank, 0, y, &zero).unwrap().loss - ce).abs());
    }
    if worst_a > 1e-12 {
        return Err(format!("(a) m=0 differs from cross-entropy by {worst_a:e}"));
    }

    // (b) α = 1 keeps only the longest chunk
    let mut worst_b = 0.0f64;
    for _ in 0..200 {
        let (i, j) = (1 + rng.below(16), 2 + rng.below(4));
        let m = Matrix::from_vec(i, j, (0..i * j).map(|_| rng.uniform() * 10.0).collect()).unwrap();
        let mean = (0..i).map(|r| m.get(r, j - 1)).sum::<f64>() / i as f64;
        worst_b = worst_b.max((dame_loss(&m, 1.0).unwrap() - mean).abs());
    }
    if worst_b > 1e-12 {
        return Err(format!("(b) α=1 differs from the longest-chunk mean by {worst_b:e}"));
    }

    // (c) hard weighting is one chunk to one prefix
    for k in 1..=8 {
        let eye: Vec<f64> = (0..k * k).map(|x| if x / k == x % k { 1.0 } else { 0.0 }).collect();
        if alignment_weights(WeightScheme::Hard, k, k).unwrap().c.data() != eye {
            return Err(format!("(c) HW({k},{k}) is not the identity"));
        }
    }
    let spec = PrefixSpec::new(vec![4, 8, 12]).unwrap();
    let cfg = MarginConfig::new(30.0, vec![0.0, 0.2, 0.5]).unwrap();
    let enc = EncoderParams::init(6, 10, 12, &mut rng);
    let bank = make_gt_heads(&spec, 5, &mut rng).unwrap();
    let b = batch(&mut rng, 5, &[3, 6, 12], 6);
    let obj = DameObjective::new(alignment_weights(WeightScheme::Hard, 3, 3).unwrap(), 0.5, vec![cfg.clone(); 3]).unwrap();
    let out = obj.evaluate(&enc, &bank, &b).unwrap();
    let mut direct = Matrix::zeros(5, 3);
    for (i, inst) in b.instances.iter().enumerate() {
        for (j, chunk) in inst.chunks.iter().enumerate() {
            let z = encode(chunk, &enc).unwrap();
            let l = margin_loss(&z.values()[..spec.dim(j)], &bank, j, inst.speaker, &cfg).unwrap().loss;
            direct.set(i, j, l);
            for k in 0..3 {
                let computed = !out.per_prefix[i][j][k].is_nan();
                if computed != (k == j) {
                    return Err(format!("(c) chunk {j} touched prefix {k}"));
                }
            }
        }
    }
    if out.multi_prefix != direct || out.loss.to_bits() != dame_loss(&direct, 0.5).unwrap().to_bits() {
        return Err("(c) HW loss differs from one-to-one selection".into());
    }
    Ok(format!("(a) max |Δ| {worst_a:.1e}, (b) max |Δ| {worst_b:.1e}, (c) bitwise"))
}

fn eer_oracle() -> Outcome {
    check_eer_oracle(1000, 100)
}

fn schedule_endpoints() -> Outcome {
    let gt = RunConfig::from_preset("ecapa-sw", Regime::General, FPS).map_err(|e| e.to_string())?.schedule;
    let ft = RunConfig::from_preset("ecapa-hw", Regime::FineTune, FPS).map_err(|e| e.to_string())?.schedule;
    let mut bad = Vec::new();
    if alpha_at(0, &gt).to_bits() != 1.0f64.to_bits() {
        bad.push(format!("alpha_at(0) = {}", alpha_at(0, &gt)));
    }
    if alpha_at(50, &gt).to_bits() != 0.5f64.to_bits() {
        bad.push(format!("alpha_at(50) = {}", alpha_at(50, &gt)));
    }
    for (slot, &key) in gt.margin_keys.iter().enumerate() {
        for e in 0..=29 {
            if margin_at(e, key, &gt).unwrap().to_bits() != 0.0f64.to_bits() {
                bad.push(format!("margin_at({e}, {key}) nonzero"));
            }
        }
        for e in 40..=gt.total_epochs + 10 {
            if margin_at(e, key, &gt).unwrap().to_bits() != gt.final_margins[slot].to_bits() {
                bad.push(format!("margin_at({e}, {key}) not final"));
            }
        }
    }
    if lr_at(0, &ft).to_bits() != 1e-4f64.to_bits() {
        bad.push(format!("lr_at(0) = {:e}", lr_at(0, &ft)));
    }
    if lr_at(30, &ft).to_bits() != 1e-5f64.to_bits() {
        bad.push(format!("lr_at(30) = {:e}", lr_at(30, &ft)));
    }
    check(bad.is_empty(), if bad.is_empty() { "all endpoints bitwise".into() } else { bad.join("; ") })
}

struct SeedResult {
    baseline: EvalReport,
    sw: EvalReport,
    ft: EvalReport,
    ft_steps: usize,
    aliasing_failures: usize,
}

fn short_mean(r: &EvalReport, d: usize) -> f64 {
    SHORT_CONDITIONS.iter().map(|c| r.get(c, d).unwrap()).sum::<f64>() / 4.0
}

fn run_seed(seed: u64) -> Result<SeedResult, String> {
    let e = |e: dame_core::DameError| e.to_string();
    let ds = Dataset::generate(&GeneratorConfig { seed, ..GeneratorConfig::default() }).map_err(e)?;
    let base = train_gt(&RunConfig::baseline(192, FPS).map_err(e)?.with_seed(seed), &ds.train).map_err(e)?;
    let sw_cfg = RunConfig::from_preset("ecapa-sw", Regime::General, FPS).map_err(e)?.with_seed(seed);
    let sw = train_gt(&sw_cfg, &ds.train).map_err(e)?;
    let pretrained: Checkpoint = base.checkpoint().map_err(e)?;
    let ft_cfg = RunConfig::from_preset("ecapa-hw", Regime::FineTune, FPS).map_err(e)?.with_seed(seed);
    let (mut steps, mut aliasing_failures) = (0, 0);
    let ft = train_ft_from(&ft_cfg, &ds.train, &pretrained, &mut |s| {
        steps += 1;
        if s.heads.mode() != HeadMode::Tied || !s.heads.tied_aliasing_holds() {
            aliasing_failures += 1;
        }
    })
    .map_err(e)?;
    let full = PrefixSpec::full(192).map_err(e)?;
    Ok(SeedResult {
        baseline: evaluate_dataset(&base.encoder, &ds, &full, &[192]).map_err(e)?,
        sw: evaluate_dataset(&sw.encoder, &ds, sw.heads.spec(), &[24, 192]).map_err(e)?,
        ft: evaluate_dataset(&ft.encoder, &ds, ft.heads.spec(), &[192]).map_err(e)?,
        ft_steps: steps,
        aliasing_failures,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn table_analog(runs: &[SeedResult]) -> Outcome {
    let m = |f: &dyn Fn(&SeedResult) -> f64| mean(runs.iter().map(f));
    let (b_avg, s_avg) = (m(&|r| r.baseline.get(S_AVG, 192).unwrap()), m(&|r| r.sw.get(S_AVG, 192).unwrap()));
    let (b_1, s_1) = (m(&|r| r.baseline.get("5s-1s", 192).unwrap()), m(&|r| r.sw.get("5s-1s", 192).unwrap()));
    let (b_ff, s_ff) =
        (m(&|r| r.baseline.get(FULL_CONDITION, 192).unwrap()), m(&|r| r.sw.get(FULL_CONDITION, 192).unwrap()));
    let short_gain = (b_1 - s_1) / b_1;
    let ff_loss = (s_ff - b_ff) / b_ff;
    let msg = format!(
        "s-avg {b_avg:.4} -> {s_avg:.4}, 5s-1s {b_1:.4} -> {s_1:.4} ({:+.1}%), f-f {b_ff:.4} -> {s_ff:.4} ({:+.1}%)",
        -100.0 * short_gain,
        100.0 * ff_loss
    );
    check(s_avg < b_avg && short_gain >= 0.10 && ff_loss < 0.20, msg)
}

fn prefix_advantage(runs: &[SeedResult]) -> Outcome {
    let adv = |cond: &str| {
        let full = mean(runs.iter().map(|r| r.sw.get(cond, 192).unwrap()));
        let d1 = mean(runs.iter().map(|r| r.sw.get(cond, 24).unwrap()));
        (full - d1) / full
    };
    let (short, ff) = (adv("5s-1s"), adv(FULL_CONDITION));
    check(short > ff, format!("relative advantage of d=24 over d=192: 5s-1s {short:+.3}, f-f {ff:+.3}"))
}

fn fine_tune_contracts(runs: &[SeedResult]) -> Outcome {
    let steps: usize = runs.iter().map(|r| r.ft_steps).sum();
    let broken: usize = runs.iter().map(|r| r.aliasing_failures).sum();
    let before = mean(runs.iter().map(|r| short_mean(&r.baseline, 192)));
    let after = mean(runs.iter().map(|r| short_mean(&r.ft, 192)));
    let msg = format!("(a) aliasing held on {}/{steps} steps, (b) short mean {before:.4} -> {after:.4}", steps - broken);
    check(steps > 0 && broken == 0 && after <= before, msg)
}

fn determinism() -> Outcome {
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let dame = |args: &[&str]| -> Result<(), String> {
        let o = Command::new(env!("CARGO_BIN_EXE_dame")).args(args).output().map_err(|e| e.to_string())?;
        check(o.status.success(), String::from_utf8_lossy(&o.stderr).into_owned()).map(|_| ())
    };
    let data = tmp.path().join("data");
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, format!("[data]\ndir = {}\nseed = 9\n\n[train]\npreset = ecapa-sw\nseed = 9\n", data.display()))
        .map_err(|e| e.to_string())?;
    let cfg = cfg.to_str().unwrap();
    dame(&["gen-data", "--config", cfg])?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        dame(&["train", "--config", cfg, "--out", out.to_str().unwrap()])?;
        let log = fs::read(out.join("train_log.csv")).map_err(|e| e.to_string())?;
        let ck = fs::read(out.join("checkpoint.ckpt")).map_err(|e| e.to_string())?;
        outputs.push((log, ck));
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    check(
        a.0 == b.0 && a.1 == b.1,
        format!("train log {} bytes, checkpoint {} bytes, identical: {}", a.0.len(), a.1.len(), a == b),
    )
}

fn report(id: usize, name: &str, r: &Outcome) -> bool {
    match r {
        Ok(m) => println!("PASS {id} {name}: {m}"),
        Err(m) => println!("FAIL {id} {name}: {m}"),
    }
    r.is_ok()
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut ok = true;
    let t = Instant::now();
    ok &= report(1, "alignment-weight oracle", &within(t, Duration::from_secs(1), alignment_oracle()));
    let t = Instant::now();
    ok &= report(2, "gradient suite", &within(t, Duration::from_secs(30), gradient_suite()));
    let t = Instant::now();
    ok &= report(3, "loss reductions", &within(t, Duration::from_secs(30), loss_reductions()));
    let t = Instant::now();
    ok &= report(4, "EER oracle equivalence", &within(t, Duration::from_secs(30), eer_oracle()));
    let t = Instant::now();
    ok &= report(5, "schedule endpoints", &within(t, Duration::from_secs(1), schedule_endpoints()));

    let t = Instant::now();
    let runs: Result<Vec<SeedResult>, String> = SEEDS.map(run_seed).collect();
    let trained = t.elapsed();
    match runs {
        Ok(runs) => {
            let timed = |r: Outcome| {
                r.and_then(|m| {
                    let msg = format!("{m} (5 seeds trained in {:.1} s)", trained.as_secs_f64());
                    check(trained < Duration::from_secs(600), msg)
                })
            };
            ok &= report(6, "duration-aware vs fixed-duration training", &timed(table_analog(&runs)));
            ok &= report(7, "short-condition prefix advantage", &prefix_advantage(&runs));
            ok &= report(8, "fine-tuning contracts", &fine_tune_contracts(&runs));
        }
        Err(e) => {
            for (id, name) in [(6, "duration-aware vs fixed-duration training"), (7, "short-condition prefix advantage"), (8, "fine-tuning contracts")] {
                ok &= report(id, name, &Err(format!("training failed: {e}")));
            }
        }
    }
    let t = Instant::now();
    ok &= report(9, "training determinism", &within(t, Duration::from_secs(300), determinism()));
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
