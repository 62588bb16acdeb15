//! Synthetic multi-action datasets with a shared latent quality factor.
//!
//! Each sample draws a latent `q ~ N(0, I_L)`; its quality is `g = w·q` for
//! one unit vector `w` per dataset and its raw score is `μ_c + s_c·g`.
//! Step `t = 1..T` of every augmentation copy is
//!
//! ```text
//! x_t = (t/T)·U q + V_c z_t + ε_t,   z_t ~ N(0, I_k),  ε_t ~ N(0, σ_n² I)
//! ```
//!
//! with `U` (D×L) shared by all classes and `V_c` (D×k) specific to the
//! class's distractor group. Copies share `q` and redraw `z` and `ε`.
//! Features are rounded to `f32`, so in-memory samples equal what the
//! `.aqaf` files store.
//!
//! The ridge oracle regresses normalized scores on time-averaged copy-0
//! features in closed form and bounds what a learned model can reach.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{
    compute_norm_stats, normalize_score, write_features, write_manifest, ActionClass, Dataset,
    FeatureSequence, NormStats, Sample, SampleRecord, Split,
};
use crate::error::{Error, Result};
use crate::eval::spearman;
use crate::numerics::{derive_seed, gaussian_fill, Mat, Rng};

pub const ORACLE_LAMBDA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreMap {
    pub offset: f64,
    pub scale: f64,
}

/// Default maps: offsets at the judge-range midpoints, scales chosen so
/// normalized targets sit near 4–6 for every class.
pub fn default_score_maps() -> Vec<ScoreMap> {
    [
        (62.10, 12.0),
        (14.585, 3.0),
        (29.0, 6.0),
        (29.0, 6.5),
        (75.54, 15.0),
        (74.58, 14.0),
        (34.86, 7.0),
    ]
    .into_iter()
    .map(|(offset, scale)| ScoreMap { offset, scale })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub steps: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_std: f64,
    pub distractor_dim: usize,
    /// Per-dimension standard deviation contributed by the shared signal at the last step.
    pub signal_scale: f64,
    /// Per-dimension standard deviation contributed by the class distractor.
    pub distractor_scale: f64,
    /// Classes with equal group ids share one distractor mixing matrix.
    /// Empty means every class has its own.
    pub distractor_groups: Vec<usize>,
    pub score_maps: Vec<ScoreMap>,
    pub copies: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 6,
            latent_dim: 4,
            feature_dim: 64,
            steps: 6,
            train_per_class: 200,
            test_per_class: 50,
            noise_std: 0.1,
            distractor_dim: 8,
            signal_scale: 0.05,
            distractor_scale: 0.03,
            distractor_groups: Vec::new(),
            score_maps: default_score_maps()[..6].to_vec(),
            copies: 6,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_classes", self.num_classes),
            ("latent_dim", self.latent_dim),
            ("feature_dim", self.feature_dim),
            ("steps", self.steps),
            ("copies", self.copies),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Argument(format!("{name} must be positive")));
            }
        }
        if self.num_classes > ActionClass::ALL.len() {
            return Err(Error::Argument(format!(
                "at most {} classes supported, got {}",
                ActionClass::ALL.len(),
                self.num_classes
            )));
        }
        if self.score_maps.len() != self.num_classes {
            return Err(Error::Argument(format!(
                "{} score maps for {} classes",
                self.score_maps.len(),
                self.num_classes
            )));
        }
        if let Some(m) = self.score_maps.iter().find(|m| !(m.scale > 0.0) || !m.offset.is_finite()) {
            return Err(Error::Argument(format!("score map scale must be positive, got {m:?}")));
        }
        if !self.distractor_groups.is_empty() && self.distractor_groups.len() != self.num_classes {
            return Err(Error::Argument(format!(
                "{} distractor groups for {} classes",
                self.distractor_groups.len(),
                self.num_classes
            )));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("signal_scale", self.signal_scale),
            ("distractor_scale", self.distractor_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Argument(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// The action class standing in for synthetic class `c`.
    pub fn class_action(c: usize) -> ActionClass {
        if c < ActionClass::EXPERIMENT.len() {
            ActionClass::EXPERIMENT[c]
        } else {
            ActionClass::Trampoline
        }
    }

    pub fn actions(&self) -> Vec<ActionClass> {
        (0..self.num_classes).map(Self::class_action).collect()
    }

    fn group_of(&self, c: usize) -> usize {
        if self.distractor_groups.is_empty() {
            c
        } else {
            self.distractor_groups[c]
        }
    }
}

/// Generated samples with their quality scalars.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub samples: Vec<Sample>,
    /// `(sample_id, g)` in sample order.
    pub truth: Vec<(String, f64)>,
    pub steps: usize,
    pub dim: usize,
}

impl SynthData {
    pub fn dataset(&self) -> Dataset {
        Dataset::from_samples(self.samples.clone(), self.steps, self.dim).expect("generator emits consistent shapes")
    }
}

// Stream tags for derive_seed.
const STREAM_MIXING: u64 = 0;
const STREAM_SAMPLE: u64 = 1 << 32;

/// Generates features and scores in memory. Feature stems are
/// `features/<sample_id>` relative to the eventual output directory.
pub fn generate_samples(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let (d, l, k, t_steps) = (spec.feature_dim, spec.latent_dim, spec.distractor_dim, spec.steps);

    let mut rng = Rng::substream(spec.seed, STREAM_MIXING);
    let mut w: Vec<f64> = (0..l).map(|_| rng.normal()).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.iter_mut().for_each(|v| *v /= norm);

    let mut u = Mat::zeros(d, l);
    gaussian_fill(&mut u, spec.signal_scale / (l as f64).sqrt(), &mut rng)?;
    let mut groups: BTreeMap<usize, Mat> = BTreeMap::new();
    for c in 0..spec.num_classes {
        let g = spec.group_of(c);
        if let std::collections::btree_map::Entry::Vacant(slot) = groups.entry(g) {
            let mut v = Mat::zeros(d, k);
            if k > 0 {
                gaussian_fill(&mut v, spec.distractor_scale / (k as f64).sqrt(), &mut rng)?;
            }
            slot.insert(v);
        }
    }

    let mut samples = Vec::new();
    let mut truth = Vec::new();
    let mut sample_index = 0u64;
    for c in 0..spec.num_classes {
        let action = SynthSpec::class_action(c);
        let map = spec.score_maps[c];
        let v = &groups[&spec.group_of(c)];
        for (split, count) in [(Split::Train, spec.train_per_class), (Split::Test, spec.test_per_class)] {
            for i in 0..count {
                let sample_seed = derive_seed(spec.seed, STREAM_SAMPLE + sample_index);
                sample_index += 1;
                let mut srng = Rng::new(sample_seed);
                let q: Vec<f64> = (0..l).map(|_| srng.normal()).collect();
                let g: f64 = w.iter().zip(&q).map(|(a, b)| a * b).sum();
                let mut uq = vec![0.0; d];
                u.matvec_acc(&q, &mut uq);

                let n_copies = match split {
                    Split::Train => spec.copies,
                    Split::Test => 1,
                };
                let copies = (0..n_copies)
                    .map(|copy| {
                        let mut crng = Rng::substream(sample_seed, copy as u64 + 1);
                        let mut x = Mat::zeros(t_steps, d);
                        let mut z = vec![0.0; k];
                        for t in 0..t_steps {
                            let ramp = (t + 1) as f64 / t_steps as f64;
                            z.iter_mut().for_each(|zi| *zi = crng.normal());
                            let row = x.row_mut(t);
                            for (xi, s) in row.iter_mut().zip(&uq) {
                                *xi = ramp * s;
                            }
                            v.matvec_acc(&z, row);
                            for xi in row.iter_mut() {
                                *xi += spec.noise_std * crng.normal();
                                *xi = *xi as f32 as f64;
                            }
                        }
                        FeatureSequence::new(x)
                    })
                    .collect::<Result<Vec<_>>>()?;

                let sample_id = format!("{}_{}_{:04}", action.name(), split.as_str(), i);
                truth.push((sample_id.clone(), g));
                samples.push(Sample {
                    record: SampleRecord {
                        feature_path: Path::new("features").join(&sample_id),
                        sample_id,
                        action,
                        raw_score: map.offset + map.scale * g,
                        split,
                    },
                    copies,
                });
            }
        }
    }
    Ok(SynthData {
        samples,
        truth,
        steps: t_steps,
        dim: d,
    })
}

/// Files written by [`generate`].
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub truth: PathBuf,
    pub data: SynthData,
}

/// Writes `manifest.csv`, `truth.csv` and `features/*.aqaf` under `out_dir`.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutput> {
    let data = generate_samples(spec)?;
    let feature_dir = out_dir.join("features");
    fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;
    for s in &data.samples {
        let stem = out_dir.join(&s.record.feature_path);
        for (k, seq) in s.copies.iter().enumerate() {
            write_features(&crate::data::feature_file_path(&stem, k), seq)?;
        }
    }
    let records: Vec<SampleRecord> = data.samples.iter().map(|s| s.record.clone()).collect();
    let manifest = out_dir.join("manifest.csv");
    write_manifest(&manifest, &records)?;

    let truth = out_dir.join("truth.csv");
    let mut text = String::from("sample_id,g\n");
    for (id, g) in &data.truth {
        text.push_str(&format!("{id},{g:?}\n"));
    }
    fs::write(&truth, text).map_err(|e| Error::io(&truth, e))?;
    Ok(SynthOutput { manifest, truth, data })
}

/// Closed-form ridge regression from time-averaged copy-0 features to
/// normalized scores, with an intercept.
#[derive(Debug, Clone)]
pub struct RidgeOracle {
    /// Coefficients for `[x̄, 1]`.
    pub coef: Vec<f64>,
    pub stats: NormStats,
}

fn design_row(s: &Sample) -> Vec<f64> {
    let mut row = s.copies[0].time_average();
    row.push(1.0);
    row
}

impl RidgeOracle {
    pub fn fit<'a, I>(train: I, lambda: f64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Sample>,
    {
        let train: Vec<&Sample> = train.into_iter().collect();
        Self::fit_with_targets(&train, None, lambda)
    }

    /// Fits against `targets` (normalized units) instead of the samples' own scores.
    pub fn fit_with_targets(train: &[&Sample], targets: Option<&[f64]>, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::Argument(format!("ridge penalty must be positive, got {lambda}")));
        }
        if train.is_empty() {
            return Err(Error::Precondition("empty oracle training set".into()));
        }
        let stats = compute_norm_stats(train.iter().map(|s| &s.record))?;
        let y: Vec<f64> = match targets {
            Some(t) => {
                if t.len() != train.len() {
                    return Err(Error::LengthMismatch(t.len(), train.len()));
                }
                t.to_vec()
            }
            None => train
                .iter()
                .map(|s| normalize_score(s.record.raw_score, s.record.action, &stats))
                .collect::<Result<_>>()?,
        };
        let rows: Vec<Vec<f64>> = train.iter().map(|s| design_row(s)).collect();
        let p = rows[0].len();
        let x = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
        let y = DVector::from_vec(y);
        let gram = x.transpose() * &x + DMatrix::identity(p, p) * lambda;
        let rhs = x.transpose() * y;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::NonFinite("ridge normal equations not positive definite".into()))?;
        let coef = chol.solve(&rhs);
        Ok(Self {
            coef: coef.iter().copied().collect(),
            stats,
        })
    }

    pub fn predict(&self, s: &Sample) -> f64 {
        design_row(s).iter().zip(&self.coef).map(|(a, b)| a * b).sum()
    }

    /// Spearman of predictions against raw scores on the test samples of `action`.
    pub fn score(&self, dataset: &Dataset, action: ActionClass) -> Result<f64> {
        let test: Vec<&Sample> = dataset.split(action, Split::Test).collect();
        let pred: Vec<f64> = test.iter().map(|s| self.predict(s)).collect();
        let truth: Vec<f64> = test.iter().map(|s| s.record.raw_score).collect();
        spearman(&pred, &truth)
    }
}

/// Per-class oracle: fit on each class's Train split, score on its Test split.
pub fn oracle_fit(dataset: &Dataset) -> Result<BTreeMap<ActionClass, f64>> {
    dataset
        .actions()
        .into_iter()
        .map(|a| {
            let oracle = RidgeOracle::fit(dataset.split(a, Split::Train), ORACLE_LAMBDA)?;
            Ok((a, oracle.score(dataset, a)?))
        })
        .collect()
}

/// Oracle fit on every class except `held_out`, scored on `held_out`'s Test split.
pub fn oracle_transfer(dataset: &Dataset, held_out: ActionClass) -> Result<f64> {
    let train = dataset
        .samples()
        .iter()
        .filter(|s| s.record.split == Split::Train && s.record.action != held_out);
    RidgeOracle::fit(train, ORACLE_LAMBDA)?.score(dataset, held_out)
}
