use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use aqa_core::data::{load_manifest, ActionClass, Dataset, FeatureSequence, Split};
use aqa_core::eval::EvalReport;
use aqa_core::model::{
    backward, compare_gradients, grad_check, init_params, load_params, save_params, ModelParams,
};
use aqa_core::numerics::{gaussian_fill, Mat, Rng};
use aqa_core::protocols::{self, Baseline, FinetuneInit, RunHistory};
use aqa_core::synth;

use crate::config::RunConfig;

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir()?.to_path_buf();
    fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
    Ok(out)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let manifest = cfg.manifest()?;
    let records = load_manifest(manifest, cfg.validate_score_ranges)?;
    let t = &cfg.train;
    let ds = Dataset::load(&records, t.steps, t.feature_dim, t.augmentation_copies)?;
    eprintln!("loaded {} samples from {}", ds.samples().len(), manifest.display());
    Ok(ds)
}

fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    report.write_csv(&out.join("report.csv"))?;
    let json = serde_json::to_string_pretty(report)?;
    fs::write(out.join("report.json"), json + "\n").context("writing report.json")?;
    Ok(())
}

fn write_history(out: &Path, history: &RunHistory) -> Result<()> {
    history.write_csv(&out.join("history.csv"))?;
    Ok(())
}

fn checkpoint_path(out: &Path, iteration: u64) -> PathBuf {
    out.join(format!("ckpt_{iteration}.aqam"))
}

fn names(actions: &[ActionClass]) -> String {
    actions.iter().map(|a| a.name()).collect::<Vec<_>>().join(",")
}

pub fn gen_synth(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let written = synth::generate(&cfg.synth, &out)?;
    cfg.write_resolved(&out, "gen-synth")?;
    println!("wrote {}", written.manifest.display());
    for action in cfg.synth.actions() {
        let count = |split| {
            written
                .data
                .samples
                .iter()
                .filter(|s| s.record.action == action && s.record.split == split)
                .count()
        };
        println!("{:<12} train {:>5}  test {:>5}", action.name(), count(Split::Train), count(Split::Test));
    }
    Ok(())
}

/// `all` selects every action with training data in the manifest.
pub fn resolve_actions(arg: Option<&[ActionClass]>, all: bool, cfg: &RunConfig, ds: &Dataset) -> Vec<ActionClass> {
    if all {
        let present = ds.actions();
        return present
            .into_iter()
            .filter(|&a| ds.split(a, Split::Train).next().is_some())
            .collect();
    }
    match arg {
        Some(list) => list.to_vec(),
        None => cfg.train.actions.clone(),
    }
}

pub fn train(mut cfg: RunConfig, actions: Option<Vec<ActionClass>>, all: bool, command: &str) -> Result<()> {
    let ds = load_dataset(&cfg)?;
    cfg.train.actions = resolve_actions(actions.as_deref(), all, &cfg, &ds);
    let out = prepare_out(&cfg)?;
    cfg.write_resolved(&out, command)?;
    eprintln!("training on {} for {} iterations", names(&cfg.train.actions), cfg.train.iterations);

    let total = cfg.train.iterations;
    let every = cfg.checkpoint_every;
    let log_every = cfg.train.eval_every;
    let outcome = protocols::train_with(&cfg.train, &ds, &mut |it, params| {
        if it % log_every == 0 || it == total {
            eprintln!("iteration {it}/{total}");
        }
        if it % every == 0 || it == total {
            save_params(&checkpoint_path(&out, it), params)?;
        }
        Ok(())
    })?;
    write_history(&out, &outcome.history)?;
    let report = protocols::evaluate(&outcome.params, &ds, &cfg.train.actions, &outcome.norm_stats)?;
    write_report(&out, &report)?;
    print_report(&report);
    Ok(())
}

fn print_report(report: &EvalReport) {
    for a in &report.per_action {
        println!("{:<12} n={:<4} rho={:.4}", a.action.name(), a.n, a.rho);
    }
    println!("{:<12} rho={:.4}", "average", report.avg_rho);
}

pub fn zero_shot(
    mut cfg: RunConfig,
    held_out: ActionClass,
    baseline: Baseline,
    actions: Option<Vec<ActionClass>>,
    command: &str,
) -> Result<()> {
    let ds = load_dataset(&cfg)?;
    if let Some(list) = actions {
        cfg.train.actions = list;
    }
    if !cfg.train.actions.contains(&held_out) {
        cfg.train.actions.push(held_out);
        cfg.train.actions.sort();
    }
    let out = prepare_out(&cfg)?;
    cfg.write_resolved(&out, command)?;
    let trained_on: Vec<ActionClass> = cfg.train.actions.iter().copied().filter(|&a| a != held_out).collect();
    match baseline {
        Baseline::Trained => eprintln!(
            "training on {} classes ({}); holding out {held_out}",
            trained_on.len(),
            names(&trained_on)
        ),
        Baseline::RandomInit => eprintln!("random-init baseline; no training; evaluating {held_out}"),
    }
    let run = protocols::zero_shot(&cfg.train, &ds, held_out, baseline)?;
    if let Some(outcome) = &run.outcome {
        write_history(&out, &outcome.history)?;
        save_params(&checkpoint_path(&out, cfg.train.iterations), &outcome.params)?;
    }
    let report = run.result.report()?;
    write_report(&out, &report)?;
    print_report(&report);
    Ok(())
}

/// Fine-tuning start point given on the command line.
#[derive(Debug, Clone)]
pub enum FromArg {
    Checkpoint(PathBuf),
    Random,
}

impl std::str::FromStr for FromArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Err("expected a checkpoint path or `random`".into());
        }
        Ok(if s == "random" {
            FromArg::Random
        } else {
            FromArg::Checkpoint(PathBuf::from(s))
        })
    }
}

pub fn finetune(cfg: RunConfig, novel: ActionClass, train_size: usize, from: FromArg, command: &str) -> Result<()> {
    let ds = load_dataset(&cfg)?;
    let pretrained: Option<ModelParams> = match &from {
        FromArg::Checkpoint(p) => Some(load_params(p)?),
        FromArg::Random => None,
    };
    let init = match &pretrained {
        Some(p) => FinetuneInit::Pretrained(p),
        None => FinetuneInit::Random,
    };
    let (anneal_every, iterations) = cfg.finetune.lookup(train_size)?;
    let out = prepare_out(&cfg)?;
    cfg.write_resolved(&out, command)?;
    eprintln!(
        "fine-tuning on {train_size} {novel} samples from {}: {iterations} iterations, lr annealed every {anneal_every}",
        match &from {
            FromArg::Checkpoint(p) => p.display().to_string(),
            FromArg::Random => "random init".into(),
        }
    );
    let outcome = protocols::finetune(init, novel, train_size, &ds, &cfg.finetune, &cfg.train, cfg.seed)?;
    write_history(&out, &outcome.history)?;
    save_params(&checkpoint_path(&out, iterations), &outcome.params)?;
    let report = protocols::evaluate(&outcome.params, &ds, &[novel], &outcome.norm_stats)?;
    write_report(&out, &report)?;
    print_report(&report);
    Ok(())
}

pub struct GradCheckArgs {
    pub hidden: usize,
    pub dim: usize,
    pub steps: usize,
    pub trials: usize,
    pub step_size: f64,
    pub tolerance: f64,
    pub init_std: f64,
    pub inject_fault: bool,
}

/// Returns whether every trial passed.
pub fn grad_check_cmd(args: &GradCheckArgs, seed: u64, out: Option<&Path>) -> Result<bool> {
    if args.trials == 0 {
        bail!("--trials must be at least 1");
    }
    if args.hidden == 0 || args.dim == 0 || args.steps == 0 {
        bail!("--hidden, --dim and --steps must be positive");
    }
    let mut csv = String::from("trial,max_rel_error,worst_entry,failures\n");
    let mut worst = 0.0f64;
    let mut all_passed = true;
    for trial in 0..args.trials {
        let mut rng = Rng::substream(seed, trial as u64);
        let params = init_params(args.hidden, args.dim, args.init_std, &mut rng)?;
        let mut x = Mat::zeros(args.steps, args.dim);
        gaussian_fill(&mut x, 1.0, &mut rng)?;
        let seq = FeatureSequence::new(x)?;
        let target = rng.normal();
        let report = if args.inject_fault {
            let mut g = backward(&params, &seq, target)?;
            let block = g.grad.w_hh.data_mut();
            let idx = (0..block.len())
                .max_by(|&a, &b| block[a].abs().total_cmp(&block[b].abs()))
                .unwrap_or(0);
            block[idx] *= 1.1;
            compare_gradients(&params, &seq, target, &g, args.step_size, args.tolerance)?
        } else {
            grad_check(&params, &seq, target, args.step_size, args.tolerance)?
        };
        worst = worst.max(report.max_rel_error);
        all_passed &= report.passed();
        let entry = report.worst.map(|e| e.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{trial},{:e},{entry},{}\n",
            report.max_rel_error,
            report.failures.len()
        ));
        if !report.passed() {
            eprintln!(
                "trial {trial}: {} entries above {:e}, worst {entry} ({:e})",
                report.failures.len(),
                args.tolerance,
                report.max_rel_error
            );
        }
    }
    println!(
        "max relative error {worst:e} over {} trials (H={}, D={}, T={}, h={:e})",
        args.trials, args.hidden, args.dim, args.steps, args.step_size
    );
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        fs::write(dir.join("grad_check.csv"), csv).context("writing grad_check.csv")?;
        let resolved = format!(
            "# aqa grad-check\nseed = {seed}\nhidden = {}\ndim = {}\nsteps = {}\ntrials = {}\nstep_size = {:?}\ntolerance = {:?}\ninit_std = {:?}\n",
            args.hidden, args.dim, args.steps, args.trials, args.step_size, args.tolerance, args.init_std
        );
        fs::write(dir.join("config.resolved"), resolved).context("writing config.resolved")?;
    }
    Ok(all_passed)
}
