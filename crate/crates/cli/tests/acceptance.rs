//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Run alone with `cargo test -p aqa-cli --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use sha2::{Digest, Sha256};

use aqa_core::data::{
    decode_features, denormalize_score, encode_features, normalize_score, pad_length, plan_clips, ActionClass,
    FeatureSequence, NormStats,
};
use aqa_core::eval::{fisher_avg, spearman};
use aqa_core::model::{decode_params, encode_params, init_params};
use aqa_core::numerics::{Mat, Rng};
use aqa_core::protocols::{evaluate, finetune, train, zero_shot, Baseline, FinetuneInit, FinetuneSchedule, TrainConfig};
use aqa_core::synth::{generate_samples, oracle_fit, SynthSpec};

type Check = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn aqa(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_aqa")).args(args).output().expect("spawn aqa")
}

// ---------------------------------------------------------------- 1

fn grad_check() -> Check {
    let start = Instant::now();
    let out = aqa(&["grad-check", "--hidden", "8", "--dim", "5", "--steps", "6", "--trials", "20", "--step-size", "1e-5"]);
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let err: f64 = stdout
        .split_whitespace()
        .nth(3)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format!("unparsable output: {stdout}"))?;
    verdict(
        out.status.success() && err < 1e-4 && secs < 10.0,
        format!("max rel error {err:.2e} (< 1e-4), {secs:.2} s (< 10 s)"),
    )
}

// ---------------------------------------------------------------- 2

/// Rank of each entry counted directly: 1 + #smaller + (#equal − 1)/2.
fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn brute_spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (brute_ranks(a), brute_ranks(b));
    let (ma, mb) = (mean(&ra), mean(&rb));
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn spearman_oracle() -> Check {
    let mut worst = 0.0f64;
    let mut cases = 0;
    let mut compare = |a: &[f64], b: &[f64]| -> Result<(), String> {
        let got = spearman(a, b).map_err(|e| format!("{a:?} vs {b:?}: {e}"))?;
        worst = worst.max((got - brute_spearman(a, b)).abs());
        cases += 1;
        Ok(())
    };
    for n in 2..=6 {
        let straight: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let tied: Vec<f64> = (0..n).map(|i| (i / 2) as f64).collect();
        for p in permutations(n) {
            let pred: Vec<f64> = p.iter().map(|&i| i as f64 * 1.5 - 2.0).collect();
            compare(&pred, &straight)?;
            if n >= 3 {
                compare(&pred, &tied)?;
            }
        }
    }
    let mut rng = Rng::new(2024);
    let mut random = 0;
    while random < 100 {
        let n = 3 + rng.below(28);
        let a: Vec<f64> = (0..n).map(|_| rng.below(4) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.below(5) as f64 * 0.5).collect();
        if a.iter().all(|&x| x == a[0]) || b.iter().all(|&x| x == b[0]) {
            continue;
        }
        compare(&a, &b)?;
        random += 1;
    }
    let avg = fisher_avg(&[0.6177, 0.6746, 0.4955, 0.3648, 0.8410, 0.7343]).map_err(|e| e.to_string())?;
    verdict(
        worst <= 1e-12 && (avg - 0.6478).abs() <= 0.002,
        format!("{cases} cases, max |Δ| {worst:.1e} (≤ 1e-12); Fisher average {avg:.4} (0.6478 ± 0.002)"),
    )
}

// ---------------------------------------------------------------- 3

fn single_action() -> Check {
    let start = Instant::now();
    let base = SynthSpec::default();
    let spec = SynthSpec {
        num_classes: 1,
        score_maps: base.score_maps[..1].to_vec(),
        ..base
    };
    let ds = generate_samples(&spec).map_err(|e| e.to_string())?.dataset();
    let cfg = TrainConfig {
        actions: vec![ActionClass::Diving],
        iterations: 2000,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &ds).map_err(|e| e.to_string())?;
    let rho = evaluate(&out.params, &ds, &cfg.actions, &out.norm_stats)
        .map_err(|e| e.to_string())?
        .avg_rho;
    let oracle = oracle_fit(&ds).map_err(|e| e.to_string())?[&ActionClass::Diving];
    let secs = start.elapsed().as_secs_f64();
    verdict(
        rho >= 0.85 && rho >= oracle - 0.1 && secs < 60.0,
        format!("rho {rho:.4} (≥ 0.85), ridge oracle {oracle:.4} (within 0.1), {secs:.1} s (< 60 s)"),
    )
}

// ---------------------------------------------------------------- 4

/// Multi-class experiments use a smaller network and schedule than the defaults.
fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        hidden: 64,
        iterations: 1000,
        seed,
        ..TrainConfig::default()
    }
}

fn all_vs_single() -> Check {
    let mut gaps = Vec::new();
    for seed in 0..5 {
        let spec = SynthSpec {
            train_per_class: 25,
            seed,
            ..SynthSpec::default()
        };
        let ds = generate_samples(&spec).map_err(|e| e.to_string())?.dataset();
        let cfg = small_config(seed);
        let all = train(&cfg, &ds).map_err(|e| e.to_string())?;
        let all_rho = evaluate(&all.params, &ds, &cfg.actions, &all.norm_stats)
            .map_err(|e| e.to_string())?
            .avg_rho;
        let mut singles = Vec::new();
        for &a in &cfg.actions {
            let one = TrainConfig {
                actions: vec![a],
                ..cfg.clone()
            };
            let o = train(&one, &ds).map_err(|e| e.to_string())?;
            singles.push(evaluate(&o.params, &ds, &[a], &o.norm_stats).map_err(|e| e.to_string())?.avg_rho);
        }
        gaps.push(all_rho - mean(&singles));
    }
    let gap = mean(&gaps);
    verdict(gap >= 0.03, format!("all-action minus single-action mean {gap:.4} (≥ 0.03) over 5 seeds"))
}

// ---------------------------------------------------------------- 5, 6

struct TransferStudy {
    zero_shot: Vec<f64>,
    random: Vec<f64>,
    /// Per held-out class: (pretrained, random) rho at iteration 100 and best rho, one entry per fine-tune seed.
    finetune: BTreeMap<ActionClass, Vec<[f64; 4]>>,
}

fn transfer_study() -> Result<TransferStudy, String> {
    let mut study = TransferStudy {
        zero_shot: Vec::new(),
        random: Vec::new(),
        finetune: BTreeMap::new(),
    };
    let schedule = FinetuneSchedule::default();
    for seed in 0..3 {
        let ds = generate_samples(&SynthSpec {
            seed,
            ..SynthSpec::default()
        })
        .map_err(|e| e.to_string())?
        .dataset();
        let cfg = small_config(seed);
        for &held in &ActionClass::EXPERIMENT {
            let run = zero_shot(&cfg, &ds, held, Baseline::Trained).map_err(|e| e.to_string())?;
            let rnd = zero_shot(&cfg, &ds, held, Baseline::RandomInit).map_err(|e| e.to_string())?;
            study.zero_shot.push(run.result.rho);
            study.random.push(rnd.result.rho);
            if seed != 0 {
                continue;
            }
            let pre = run.outcome.ok_or("zero-shot run returned no model")?.params;
            for ft_seed in 0..5 {
                let a = finetune(FinetuneInit::Pretrained(&pre), held, 25, &ds, &schedule, &cfg, ft_seed)
                    .map_err(|e| e.to_string())?;
                let b = finetune(FinetuneInit::Random, held, 25, &ds, &schedule, &cfg, ft_seed).map_err(|e| e.to_string())?;
                let at = |h: &aqa_core::protocols::RunHistory| h.rho_at(100, held).ok_or("no history point at 100");
                let row = [
                    at(&a.history)?,
                    at(&b.history)?,
                    a.history.best_rho(held).ok_or("empty history")?,
                    b.history.best_rho(held).ok_or("empty history")?,
                ];
                study.finetune.entry(held).or_default().push(row);
            }
        }
    }
    Ok(study)
}

fn zero_shot_check(study: &TransferStudy) -> Check {
    let (zs, rnd) = (mean(&study.zero_shot), mean(&study.random));
    verdict(
        zs >= 0.15 && rnd.abs() <= 0.10,
        format!("zero-shot rho {zs:.4} (≥ 0.15), random-init rho {rnd:.4} (|·| ≤ 0.10) over 6 classes × 3 seeds"),
    )
}

fn finetune_check(study: &TransferStudy) -> Check {
    let rows: Vec<&[f64; 4]> = study.finetune.values().flatten().collect();
    let gap = mean(&rows.iter().map(|r| r[0] - r[1]).collect::<Vec<_>>());
    let wins = study
        .finetune
        .values()
        .filter(|runs| {
            let best = |i: usize| mean(&runs.iter().map(|r| r[i]).collect::<Vec<_>>());
            best(2) >= best(3)
        })
        .count();
    verdict(
        gap >= 0.1 && wins >= 4,
        format!("pretrained minus random rho at iteration 100 {gap:.4} (≥ 0.1); best-rho wins {wins}/6 (≥ 4)"),
    )
}

// ---------------------------------------------------------------- 7

const SMALL: &str = "checkpoint_every = 40\n\n[synth]\ntrain_per_class = 30\ntest_per_class = 20\n\n[train]\nhidden = 12\niterations = 80\neval_every = 40\n";

/// Digests of report.csv, every checkpoint, and for data directories every file but config.resolved.
fn artifacts(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "config.resolved") {
                let hash = format!("{:x}", Sha256::digest(fs::read(&p).unwrap()));
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), hash));
            }
        }
    }
    out.sort();
    out
}

fn cli_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let config = root.join("small.toml");
    fs::write(&config, SMALL).map_err(|e| e.to_string())?;
    let cfg = config.to_str().unwrap().to_string();
    let manifest = root.join("a_gen/manifest.csv").to_str().unwrap().to_string();
    let ckpt = root.join("a_zs/ckpt_80.aqam").to_str().unwrap().to_string();
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("gen", vec!["gen-synth", "--config", &cfg]),
        ("train", vec!["train", "--config", &cfg, "--manifest", &manifest, "--actions", "all"]),
        ("zs", vec!["zero-shot", "--config", &cfg, "--manifest", &manifest, "--holdout", "Diving"]),
        (
            "zsr",
            vec!["zero-shot", "--config", &cfg, "--manifest", &manifest, "--holdout", "Diving", "--baseline", "random"],
        ),
        (
            "ft",
            vec!["finetune", "--config", &cfg, "--manifest", &manifest, "--novel", "Diving", "--train-size", "25", "--from", &ckpt],
        ),
        ("gc", vec!["grad-check", "--trials", "3"]),
    ];
    let mut checked = 0;
    for (name, args) in &commands {
        let mut digests = Vec::new();
        for run in ["a", "b"] {
            let out = root.join(format!("{run}_{name}"));
            let mut full = args.clone();
            full.extend(["--out", out.to_str().unwrap()]);
            let result = aqa(&full);
            if !result.status.success() {
                return Err(format!("{name}: {}", String::from_utf8_lossy(&result.stderr)));
            }
            digests.push(artifacts(&out));
        }
        if digests[0] != digests[1] || digests[0].is_empty() {
            return Err(format!("{name}: outputs differ between runs"));
        }
        checked += digests[0].len();
    }
    verdict(true, format!("{} commands rerun, {checked} files byte-identical", commands.len()))
}

// ---------------------------------------------------------------- 8

fn file_formats() -> Check {
    let path = Path::new("sample.aqaf");
    let mut rng = Rng::new(8);
    let values: Vec<f64> = (0..6 * 64).map(|_| rng.normal() as f32 as f64).collect();
    let seq = FeatureSequence::new(Mat::from_vec(6, 64, values).unwrap()).unwrap();
    let bytes = encode_features(&seq);
    let back = decode_features(&bytes, path).map_err(|e| e.to_string())?;
    if back.values() != seq.values() || encode_features(&back) != bytes {
        return Err(".aqaf round trip changed values".into());
    }
    let params = init_params(16, 64, 0.1, &mut rng).unwrap();
    let pbytes = encode_params(&params);
    let pback = decode_params(&pbytes, Path::new("model.aqam")).map_err(|e| e.to_string())?;
    if pback != params || encode_params(&pback) != pbytes {
        return Err(".aqam round trip changed values".into());
    }

    let corrupt = |b: &[u8], f: &dyn Fn(&mut Vec<u8>)| {
        let mut v = b.to_vec();
        f(&mut v);
        v
    };
    type Edit = Box<dyn Fn(&mut Vec<u8>)>;
    let edits: Vec<(&str, Edit)> = vec![
        ("magic", Box::new(|v| v[0] ^= 0xff)),
        ("version", Box::new(|v| v[4] = 99)),
        ("short header", Box::new(|v| v.truncate(7))),
        ("truncated body", Box::new(|v| v.truncate(v.len() - 1))),
        ("trailing bytes", Box::new(|v| v.push(0))),
        ("dimension", Box::new(|v| v[5] = v[5].wrapping_add(1))),
    ];
    let mut rejected = 0;
    for (what, edit) in &edits {
        if decode_features(&corrupt(&bytes, edit.as_ref()), path).is_ok() {
            return Err(format!(".aqaf with bad {what} accepted"));
        }
        if decode_params(&corrupt(&pbytes, edit.as_ref()), path).is_ok() {
            return Err(format!(".aqam with bad {what} accepted"));
        }
        rejected += 2;
    }
    verdict(true, format!("exact round trips; {rejected} malformed files rejected"))
}

// ---------------------------------------------------------------- 9

fn pipeline() -> Check {
    let plan = plan_clips(103, 16, 16, 6).map_err(|e| e.to_string())?;
    let shape_ok = plan.copies.len() == 6 && plan.copies.iter().all(|c| c.clip_starts.len() == 6);
    let starts_ok = plan.copies[0].clip_starts == [0, 16, 32, 48, 64, 80];
    let pad = pad_length(97, 103).map_err(|e| e.to_string())?;

    let stats = NormStats::from_map(ActionClass::ALL.iter().map(|&a| (a, 3.7 + a.index() as f64)).collect())
        .map_err(|e| e.to_string())?;
    let mut rng = Rng::new(9);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a = ActionClass::ALL[rng.below(ActionClass::ALL.len())];
        let raw = rng.uniform() * 120.0;
        let z = normalize_score(raw, a, &stats).map_err(|e| e.to_string())?;
        let back = denormalize_score(z, a, &stats).map_err(|e| e.to_string())?;
        worst = worst.max((back - raw).abs());
    }
    verdict(
        shape_ok && starts_ok && pad == 6 && worst <= 1e-12,
        format!(
            "clips {}×{} starts {:?}; pad {pad}; normalize round trip {worst:.1e}",
            plan.copies.len(),
            plan.clips_per_copy(),
            plan.copies[0].clip_starts
        ),
    )
}

// ----------------------------------------------------------------

fn run(id: usize, name: &str, check: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} [{id}] {name}: {detail} [{secs:.1} s]");
    result.is_ok()
}

fn main() -> ExitCode {
    let mut passed = vec![
        run(1, "gradient check", grad_check),
        run(2, "spearman and fisher", spearman_oracle),
        run(3, "single-action training", single_action),
        run(4, "all-action beats single-action", all_vs_single),
    ];
    let mut study = Err("transfer study did not run".to_string());
    passed.push(run(5, "zero-shot transfer", || {
        study = transfer_study();
        study.as_ref().map_err(Clone::clone).and_then(zero_shot_check)
    }));
    passed.push(run(6, "fine-tuning from pretrained", || {
        study.as_ref().map_err(Clone::clone).and_then(finetune_check)
    }));
    passed.push(run(7, "cli determinism", cli_determinism));
    passed.push(run(8, "file formats", file_formats));
    passed.push(run(9, "clip planning and normalization", pipeline));
    let failed = passed.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", passed.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
