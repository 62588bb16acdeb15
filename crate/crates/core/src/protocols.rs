//! Training and knowledge-transfer protocols: single- and all-action
//! training, zero-shot evaluation on an unseen action, the single-action
//! transfer matrix, and small-sample fine-tuning.
//!
//! Sampling is by epoch: the (sample, copy) pool is reshuffled each epoch
//! and batches are cut from the concatenated epoch stream, so every pair is
//! visited once before any repeats. Per-sample gradients are summed in batch
//! order. Scores are normalized by per-action standard deviations computed
//! from the protocol's own training pool.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    compute_norm_stats, denormalize_score, normalize_score, ActionClass, Dataset, FeatureSequence, NormStats, Sample,
    Split,
};
use crate::error::{Error, Result};
use crate::eval::{build_report, spearman, EvalReport};
use crate::model::{accumulate_batch_gradients, init_params, predict, Gradients, ModelParams};
use crate::numerics::Rng;
use crate::optim::{adam_step, AdamState, LrSchedule};

const STREAM_SHUFFLE: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_SUBSET: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub actions: Vec<ActionClass>,
    pub batch_videos: usize,
    pub iterations: u64,
    pub schedule: LrSchedule,
    pub init_std: f64,
    pub seed: u64,
    pub steps: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub augmentation_copies: usize,
    /// History checkpoint interval in iterations.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            actions: ActionClass::EXPERIMENT.to_vec(),
            batch_videos: 15,
            iterations: 20_000,
            schedule: LrSchedule::default(),
            init_std: 0.1,
            seed: 0,
            steps: 6,
            feature_dim: 64,
            hidden: 256,
            augmentation_copies: 6,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.actions.is_empty() {
            return Err(Error::Argument("no actions selected for training".into()));
        }
        let mut uniq = self.actions.clone();
        uniq.sort();
        uniq.dedup();
        if uniq.len() != self.actions.len() {
            return Err(Error::Argument("duplicate action in training set".into()));
        }
        for (name, v) in [
            ("batch_videos", self.batch_videos),
            ("steps", self.steps),
            ("feature_dim", self.feature_dim),
            ("hidden", self.hidden),
            ("augmentation_copies", self.augmentation_copies),
        ] {
            if v == 0 {
                return Err(Error::Argument(format!("{name} must be positive")));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::Argument("eval_every must be positive".into()));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::Argument(format!("init_std must be non-negative, got {}", self.init_std)));
        }
        self.schedule.validate()
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.dim() != self.feature_dim || dataset.steps() != self.steps {
            return Err(Error::DimensionMismatch {
                what: "dataset features",
                expected: format!("T={}, D={}", self.steps, self.feature_dim),
                found: format!("T={}, D={}", dataset.steps(), dataset.dim()),
            });
        }
        Ok(())
    }

    pub fn init_model(&self) -> Result<ModelParams> {
        init_params(
            self.hidden,
            self.feature_dim,
            self.init_std,
            &mut Rng::substream(self.seed, STREAM_INIT),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub iteration: u64,
    /// Mean batch loss over the iterations since the previous point.
    pub loss: f64,
    /// Test Spearman per tracked action, in `RunHistory::actions` order.
    pub rhos: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub actions: Vec<ActionClass>,
    pub points: Vec<HistoryPoint>,
    /// Distinct (sample, copy) pairs in the training pool.
    pub pool_size: usize,
    /// Per-sample gradient contributions by action.
    pub gradient_visits: BTreeMap<ActionClass, u64>,
}

impl RunHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.points.last().map(|p| p.loss)
    }

    pub fn rho_at(&self, iteration: u64, action: ActionClass) -> Option<f64> {
        let idx = self.actions.iter().position(|&a| a == action)?;
        self.points.iter().find(|p| p.iteration == iteration).map(|p| p.rhos[idx])
    }

    pub fn best_rho(&self, action: ActionClass) -> Option<f64> {
        let idx = self.actions.iter().position(|&a| a == action)?;
        self.points.iter().map(|p| p.rhos[idx]).reduce(f64::max)
    }

    /// `iteration,loss,<action>_rho,...`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss");
        for a in &self.actions {
            let _ = write!(out, ",{}_rho", a.name());
        }
        out.push('\n');
        for p in &self.points {
            let _ = write!(out, "{},{:?}", p.iteration, p.loss);
            for r in &p.rhos {
                let _ = write!(out, ",{r:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: RunHistory,
    pub norm_stats: NormStats,
}

struct PoolItem<'a> {
    seq: &'a FeatureSequence,
    target: f64,
    action: ActionClass,
}

struct EvalSet<'a> {
    action: ActionClass,
    seqs: Vec<&'a FeatureSequence>,
    truth: Vec<f64>,
}

fn build_pool<'a>(train: &[&'a Sample], copies: usize, stats: &NormStats) -> Result<Vec<PoolItem<'a>>> {
    let mut pool = Vec::new();
    for s in train {
        if s.copies.len() < copies {
            return Err(Error::Precondition(format!(
                "sample `{}` has {} augmentation copies, need {copies}",
                s.record.sample_id,
                s.copies.len()
            )));
        }
        let target = normalize_score(s.record.raw_score, s.record.action, stats)?;
        for seq in &s.copies[..copies] {
            pool.push(PoolItem {
                seq,
                target,
                action: s.record.action,
            });
        }
    }
    Ok(pool)
}

fn eval_sets<'a>(dataset: &'a Dataset, actions: &[ActionClass]) -> Vec<EvalSet<'a>> {
    actions
        .iter()
        .map(|&action| {
            let test: Vec<&Sample> = dataset.split(action, Split::Test).collect();
            EvalSet {
                action,
                seqs: test.iter().map(|s| &s.copies[0]).collect(),
                truth: test.iter().map(|s| s.record.raw_score).collect(),
            }
        })
        .collect()
}

/// Test rho for checkpoints; constant predictions carry no ranking and score 0.
fn checkpoint_rho(params: &ModelParams, set: &EvalSet<'_>) -> Result<f64> {
    if set.seqs.len() < 2 {
        return Ok(f64::NAN);
    }
    let pred = set.seqs.iter().map(|s| predict(params, s)).collect::<Result<Vec<_>>>()?;
    match spearman(&pred, &set.truth) {
        Ok(r) => Ok(r),
        Err(Error::DegenerateMetric(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

struct Loop<'a> {
    pool: Vec<PoolItem<'a>>,
    evals: Vec<EvalSet<'a>>,
    iterations: u64,
    schedule: LrSchedule,
    batch: usize,
    seed: u64,
    eval_every: u64,
}

impl Loop<'_> {
    fn run(
        self,
        mut params: ModelParams,
        on_step: &mut dyn FnMut(u64, &ModelParams) -> Result<()>,
    ) -> Result<(ModelParams, RunHistory)> {
        if self.pool.is_empty() {
            return Err(Error::Precondition("empty training pool".into()));
        }
        let mut history = RunHistory {
            actions: self.evals.iter().map(|e| e.action).collect(),
            points: Vec::new(),
            pool_size: self.pool.len(),
            gradient_visits: BTreeMap::new(),
        };
        let mut rng = Rng::substream(self.seed, STREAM_SHUFFLE);
        let mut order: Vec<usize> = (0..self.pool.len()).collect();
        let mut cursor = order.len();
        let mut state = AdamState::new(&params);
        let mut grads = Gradients::zeros_like(&params);
        let scale = 1.0 / self.batch as f64;
        let mut batch = Vec::with_capacity(self.batch);
        let (mut window_loss, mut window_len) = (0.0, 0u64);

        for it in 0..self.iterations {
            grads.reset();
            batch.clear();
            for _ in 0..self.batch {
                if cursor == order.len() {
                    rng.shuffle(&mut order);
                    cursor = 0;
                }
                let item = &self.pool[order[cursor]];
                cursor += 1;
                batch.push((item.seq, item.target));
                *history.gradient_visits.entry(item.action).or_default() += 1;
            }
            accumulate_batch_gradients(&params, &batch, scale, &mut grads)?;
            adam_step(&mut params, &grads.grad, &mut state, self.schedule.lr_at(it))?;
            if !params.is_finite() {
                return Err(Error::NonFinite(format!("parameters after iteration {}", it + 1)));
            }
            window_loss += grads.loss;
            window_len += 1;

            let done = it + 1;
            if done % self.eval_every == 0 || done == self.iterations {
                let rhos = self
                    .evals
                    .iter()
                    .map(|e| checkpoint_rho(&params, e))
                    .collect::<Result<Vec<_>>>()?;
                history.points.push(HistoryPoint {
                    iteration: done,
                    loss: window_loss / window_len as f64,
                    rhos,
                });
                window_loss = 0.0;
                window_len = 0;
            }
            on_step(done, &params)?;
        }
        Ok((params, history))
    }
}

fn train_samples<'a>(dataset: &'a Dataset, actions: &[ActionClass]) -> Result<Vec<&'a Sample>> {
    let mut out = Vec::new();
    for &a in actions {
        let before = out.len();
        out.extend(dataset.split(a, Split::Train));
        if out.len() == before {
            return Err(Error::Precondition(format!("no training samples for {a}")));
        }
    }
    Ok(out)
}

/// Trains a fresh model on the Train split of `config.actions`.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    train_with(config, dataset, &mut |_, _| Ok(()))
}

/// [`train`] with a callback after every iteration.
pub fn train_with(
    config: &TrainConfig,
    dataset: &Dataset,
    on_step: &mut dyn FnMut(u64, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    config.check_dataset(dataset)?;
    let train = train_samples(dataset, &config.actions)?;
    let norm_stats = compute_norm_stats(train.iter().map(|s| &s.record))?;
    let pool = build_pool(&train, config.augmentation_copies, &norm_stats)?;
    let run = Loop {
        pool,
        evals: eval_sets(dataset, &config.actions),
        iterations: config.iterations,
        schedule: config.schedule,
        batch: config.batch_videos,
        seed: config.seed,
        eval_every: config.eval_every,
    };
    let (params, history) = run.run(config.init_model()?, on_step)?;
    Ok(TrainOutcome {
        params,
        history,
        norm_stats,
    })
}

/// Test-set predictions (copy 0) denormalized into judge units.
pub fn predict_test(
    params: &ModelParams,
    dataset: &Dataset,
    action: ActionClass,
    stats: &NormStats,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for s in dataset.split(action, Split::Test) {
        pred.push(denormalize_score(predict(params, &s.copies[0])?, action, stats)?);
        truth.push(s.record.raw_score);
    }
    Ok((pred, truth))
}

/// Per-action test report for `actions`.
pub fn evaluate(params: &ModelParams, dataset: &Dataset, actions: &[ActionClass], stats: &NormStats) -> Result<EvalReport> {
    let per_action = actions
        .iter()
        .map(|&a| {
            let (pred, truth) = predict_test(params, dataset, a, stats)?;
            Ok((a, pred, truth))
        })
        .collect::<Result<Vec<_>>>()?;
    build_report(&per_action)
}

#[derive(Debug, Clone)]
pub struct ZeroShotResult {
    pub held_out: ActionClass,
    pub rho: f64,
    pub n: usize,
    /// Predictions in judge units, denormalized with the held-out class's training std.
    pub predictions: Vec<f64>,
    pub truth: Vec<f64>,
}

impl ZeroShotResult {
    pub fn report(&self) -> Result<EvalReport> {
        build_report(&[(self.held_out, self.predictions.clone(), self.truth.clone())])
    }
}

/// Evaluates a model trained on `trained_on` against the unseen `held_out` class.
pub fn zero_shot_eval(
    params: &ModelParams,
    trained_on: &[ActionClass],
    held_out: ActionClass,
    dataset: &Dataset,
) -> Result<ZeroShotResult> {
    if trained_on.contains(&held_out) {
        return Err(Error::Precondition(format!(
            "held-out action {held_out} is part of the training set"
        )));
    }
    let test_count = dataset.split(held_out, Split::Test).count();
    if test_count < 2 {
        return Err(Error::Precondition(format!(
            "held-out action {held_out} has {test_count} test samples, need at least 2"
        )));
    }
    let stats = compute_norm_stats(dataset.split(held_out, Split::Train).map(|s| &s.record))?;
    let (predictions, truth) = predict_test(params, dataset, held_out, &stats)?;
    Ok(ZeroShotResult {
        held_out,
        rho: spearman(&predictions, &truth)?,
        n: predictions.len(),
        predictions,
        truth,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// Train on every configured action except the held-out one.
    Trained,
    /// Skip training and evaluate the random initialization.
    RandomInit,
}

#[derive(Debug, Clone)]
pub struct ZeroShotRun {
    pub result: ZeroShotResult,
    pub trained_on: Vec<ActionClass>,
    pub outcome: Option<TrainOutcome>,
}

/// Full zero-shot experiment: train on `config.actions` minus `held_out`
/// (or not at all for the random baseline), then evaluate on `held_out`.
/// The run seed is mixed with the held-out class so each choice draws its
/// own initialization.
pub fn zero_shot(config: &TrainConfig, dataset: &Dataset, held_out: ActionClass, baseline: Baseline) -> Result<ZeroShotRun> {
    let trained_on: Vec<ActionClass> = config.actions.iter().copied().filter(|&a| a != held_out).collect();
    let mut cfg = config.clone();
    cfg.actions = trained_on.clone();
    cfg.seed = crate::numerics::derive_seed(config.seed, 100 + held_out.index() as u64);
    match baseline {
        Baseline::Trained => {
            let outcome = train(&cfg, dataset)?;
            let result = zero_shot_eval(&outcome.params, &trained_on, held_out, dataset)?;
            Ok(ZeroShotRun {
                result,
                trained_on,
                outcome: Some(outcome),
            })
        }
        Baseline::RandomInit => {
            cfg.validate()?;
            cfg.check_dataset(dataset)?;
            let params = cfg.init_model()?;
            let result = zero_shot_eval(&params, &trained_on, held_out, dataset)?;
            Ok(ZeroShotRun {
                result,
                trained_on,
                outcome: None,
            })
        }
    }
}

/// Row `i` holds the test rho on each class of a model trained only on class `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    pub actions: Vec<ActionClass>,
    pub rho: Vec<Vec<f64>>,
}

impl TransferMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trained_on");
        for a in &self.actions {
            let _ = write!(out, ",{a}");
        }
        out.push('\n');
        for (a, row) in self.actions.iter().zip(&self.rho) {
            out.push_str(a.name());
            for r in row {
                let _ = write!(out, ",{r:?}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn single_action_transfer_matrix(dataset: &Dataset, config: &TrainConfig) -> Result<TransferMatrix> {
    let actions = config.actions.clone();
    let mut rho = Vec::with_capacity(actions.len());
    for &src in &actions {
        let mut cfg = config.clone();
        cfg.actions = vec![src];
        let outcome = train(&cfg, dataset)?;
        let row = actions
            .iter()
            .map(|&dst| {
                if dst == src {
                    evaluate(&outcome.params, dataset, &[dst], &outcome.norm_stats).map(|r| r.avg_rho)
                } else {
                    zero_shot_eval(&outcome.params, &[src], dst, dataset).map(|z| z.rho)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rho.push(row);
    }
    Ok(TransferMatrix { actions, rho })
}

/// Maps a fine-tuning set size to `(anneal_every, iterations)`.
/// Sizes between or beyond the anchors are linearly inter/extrapolated
/// and rounded to the nearest positive integer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSchedule {
    /// `(train_size, anneal_every, iterations)` sorted by size.
    pub anchors: Vec<(usize, u64, u64)>,
}

impl Default for FinetuneSchedule {
    fn default() -> Self {
        Self {
            anchors: vec![(25, 100, 500), (75, 300, 1200), (125, 500, 2000)],
        }
    }
}

impl FinetuneSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.anchors.is_empty() {
            return Err(Error::Argument("fine-tune schedule has no anchors".into()));
        }
        for w in self.anchors.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 < w[0].1 || w[1].2 < w[0].2 {
                return Err(Error::Argument(
                    "fine-tune anchors must have increasing sizes and non-decreasing entries".into(),
                ));
            }
        }
        if self.anchors.iter().any(|a| a.1 == 0 || a.2 == 0) {
            return Err(Error::Argument("fine-tune anchors must be positive".into()));
        }
        Ok(())
    }

    pub fn lookup(&self, train_size: usize) -> Result<(u64, u64)> {
        self.validate()?;
        if let Some(a) = self.anchors.iter().find(|a| a.0 == train_size) {
            return Ok((a.1, a.2));
        }
        if self.anchors.len() == 1 {
            return Ok((self.anchors[0].1, self.anchors[0].2));
        }
        let n = self.anchors.len();
        let seg = self
            .anchors
            .windows(2)
            .position(|w| train_size < w[1].0)
            .unwrap_or(n - 2);
        let (a, b) = (self.anchors[seg], self.anchors[seg + 1]);
        let frac = (train_size as f64 - a.0 as f64) / (b.0 as f64 - a.0 as f64);
        let interp = |lo: u64, hi: u64| {
            let v = lo as f64 + frac * (hi as f64 - lo as f64);
            (v.round().max(1.0)) as u64
        };
        Ok((interp(a.1, b.1), interp(a.2, b.2)))
    }
}

/// Where fine-tuning starts from.
#[derive(Debug, Clone)]
pub enum FinetuneInit<'a> {
    Pretrained(&'a ModelParams),
    Random,
}

/// Fine-tunes on `train_size` Train samples of `novel` (chosen by a seeded
/// shuffle) with the size-scaled schedule; `base` supplies batch size,
/// lr0, anneal factor, copies, init std and the history interval.
pub fn finetune(
    init: FinetuneInit<'_>,
    novel: ActionClass,
    train_size: usize,
    dataset: &Dataset,
    schedule: &FinetuneSchedule,
    base: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut cfg = base.clone();
    cfg.actions = vec![novel];
    cfg.seed = seed;
    let (anneal_every, iterations) = schedule.lookup(train_size)?;
    cfg.schedule.anneal_every = anneal_every;
    cfg.iterations = iterations;
    cfg.validate()?;
    cfg.check_dataset(dataset)?;

    let mut available: Vec<&Sample> = dataset.split(novel, Split::Train).collect();
    if available.len() < train_size || train_size == 0 {
        return Err(Error::InsufficientSamples {
            action: novel,
            needed: train_size.max(1),
            available: available.len(),
        });
    }
    if dataset.split(novel, Split::Test).next().is_none() {
        return Err(Error::InsufficientSamples {
            action: novel,
            needed: 1,
            available: 0,
        });
    }
    Rng::substream(seed, STREAM_SUBSET).shuffle(&mut available);
    available.truncate(train_size);

    let params = match init {
        FinetuneInit::Pretrained(p) => {
            if p.hidden() != cfg.hidden || p.dim() != cfg.feature_dim {
                return Err(Error::DimensionMismatch {
                    what: "pretrained model",
                    expected: format!("H={}, D={}", cfg.hidden, cfg.feature_dim),
                    found: format!("H={}, D={}", p.hidden(), p.dim()),
                });
            }
            p.clone()
        }
        FinetuneInit::Random => cfg.init_model()?,
    };
    let norm_stats = compute_norm_stats(available.iter().map(|s| &s.record))?;
    let pool = build_pool(&available, cfg.augmentation_copies, &norm_stats)?;
    let run = Loop {
        pool,
        evals: eval_sets(dataset, &[novel]),
        iterations: cfg.iterations,
        schedule: cfg.schedule,
        batch: cfg.batch_videos,
        seed: cfg.seed,
        eval_every: cfg.eval_every,
    };
    let (params, history) = run.run(params, &mut |_, _| Ok(()))?;
    Ok(TrainOutcome {
        params,
        history,
        norm_stats,
    })
}
