//! Synthetic linear-generative scenarios that make the seen-to-unseen
//! transfer property testable at desk scale.
//!
//! Visual features are produced as `M * w_class + noise` from the class
//! word-vectors, mask features analogously per pixel with a
//! class-dependent foreground region, so a linear encoder can in
//! principle invert the generator and classify classes it never trained
//! on - exactly when the embeddings carry shared structure. One-hot
//! embeddings carry none and must collapse to chance.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::semheads::{
    detector_forward, sync_background, train_loop, Branch, FeatureBatch, ModelParams, SemError,
    TrainConfig, WordVectorTable,
};

pub const DEFAULT_SCENARIO: &str = include_str!("../data/toy_scenario.json");
pub const THRESHOLDS: &str = include_str!("../data/synth_thresholds.json");

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("generative matrix is numerically rank-deficient (column {0})")]
    RankDeficient(usize),
    #[error("visual dimension {dim} too small for {needed} one-hot embedding coordinates")]
    OneHotDim { dim: usize, needed: usize },
    #[error("invalid scenario: {0}")]
    BadScenario(String),
    #[error(transparent)]
    Sem(#[from] SemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    /// Random unit vectors: classes share a common subspace structure.
    Structured,
    /// One-hot vectors: no information shared between classes.
    OneHot,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticScenario {
    pub seed: u64,
    pub visual_dim: usize,
    pub embed_dim: usize,
    pub mask_channels: usize,
    /// Square mask grid edge length.
    pub mask_size: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub embedding_kind: EmbeddingKind,
}

impl SyntheticScenario {
    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        serde_json::from_str(text).map_err(|e| SynthError::BadScenario(e.to_string()))
    }

    pub fn default_scenario() -> Self {
        Self::from_json(DEFAULT_SCENARIO).expect("shipped scenario parses")
    }

    /// One-hot embeddings need one coordinate per class (plus background),
    /// so that mode overrides `embed_dim` with its natural dimension.
    pub fn effective_embed_dim(&self) -> usize {
        match self.embedding_kind {
            EmbeddingKind::Structured => self.embed_dim,
            EmbeddingKind::OneHot => self.n_seen + self.n_unseen + 1,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.visual_dim < self.effective_embed_dim() {
            return Err(match self.embedding_kind {
                EmbeddingKind::OneHot => SynthError::OneHotDim {
                    dim: self.visual_dim,
                    needed: self.effective_embed_dim(),
                },
                EmbeddingKind::Structured => SynthError::BadScenario(
                    "visual_dim must be >= the embedding dimension for a full-column-rank \
                     generator"
                        .into(),
                ),
            });
        }
        if self.n_seen == 0 || self.n_unseen == 0 || self.samples_per_class == 0 {
            return Err(SynthError::BadScenario("class and sample counts must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(SynthError::BadScenario("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Frozen pass/fail thresholds for the transfer experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Thresholds {
    pub structured_unseen_min_accuracy: f64,
    pub onehot_chance_multiplier: f64,
    pub seen_min_accuracy: f64,
}

impl Thresholds {
    pub fn shipped() -> Self {
        serde_json::from_str(THRESHOLDS).expect("shipped thresholds parse")
    }
}

/// Everything `generate` produces: the embedding table, a seen-only
/// training batch, and per-branch labelled test batches. Test labels are
/// row indices into the corresponding branch's table.
pub struct ScenarioData {
    pub table: WordVectorTable,
    pub train: FeatureBatch,
    pub test_seen: FeatureBatch,
    pub test_unseen: FeatureBatch,
}

/// Random unit vectors with enforced pairwise separation (cosine below
/// `MAX_CLASS_COSINE`), so no two classes are near-duplicates by accident.
const MAX_CLASS_COSINE: f64 = 0.6;

fn unit_vectors(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Array1<f64>>, SynthError> {
    let normal: Normal<f64> = Normal::new(0.0, 1.0).unwrap();
    let mut out: Vec<Array1<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _attempt in 0..1000 {
            let v = Array1::from_shape_fn(dim, |_| normal.sample(rng));
            let norm = v.dot(&v).sqrt();
            let v = v / norm;
            if out.iter().all(|u| u.dot(&v) < MAX_CLASS_COSINE) {
                out.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::BadScenario(format!(
                "cannot place {n} separated unit vectors in {dim} dimensions"
            )));
        }
    }
    Ok(out)
}

fn one_hot(dim: usize, idx: usize) -> Array1<f64> {
    let mut v = Array1::zeros(dim);
    v[idx] = 1.0;
    v
}

fn build_table(s: &SyntheticScenario, rng: &mut ChaCha8Rng) -> Result<WordVectorTable, SynthError> {
    let (bg, seen_vs, unseen_vs) = match s.embedding_kind {
        EmbeddingKind::Structured => {
            let mut vs = unit_vectors(s.n_seen + s.n_unseen + 1, s.embed_dim, rng)?;
            let bg = vs.remove(0);
            let unseen = vs.split_off(s.n_seen);
            (bg, vs, unseen)
        }
        EmbeddingKind::OneHot => {
            let needed = s.n_seen + s.n_unseen + 1;
            if s.visual_dim < needed {
                return Err(SynthError::OneHotDim { dim: s.visual_dim, needed });
            }
            let bg = one_hot(needed, 0);
            let seen = (0..s.n_seen).map(|i| one_hot(needed, 1 + i)).collect();
            let unseen = (0..s.n_unseen).map(|i| one_hot(needed, 1 + s.n_seen + i)).collect();
            (bg, seen, unseen)
        }
    };
    let seen = seen_vs.into_iter().enumerate().map(|(i, v)| (format!("seen{i}"), v)).collect();
    let unseen =
        unseen_vs.into_iter().enumerate().map(|(i, v)| (format!("unseen{i}"), v)).collect();
    Ok(WordVectorTable::from_vectors(bg, seen, unseen)?)
}

/// Modified Gram-Schmidt column-rank check.
fn check_full_column_rank(m: &Array2<f64>) -> Result<(), SynthError> {
    let mut cols: Vec<Array1<f64>> = (0..m.ncols()).map(|j| m.column(j).to_owned()).collect();
    for j in 0..cols.len() {
        for k in 0..j {
            let proj = cols[j].dot(&cols[k]);
            let q = cols[k].clone();
            cols[j] = &cols[j] - &(q * proj);
        }
        let norm = cols[j].dot(&cols[j]).sqrt();
        if norm < 1e-9 {
            return Err(SynthError::RankDeficient(j));
        }
        cols[j] /= norm;
    }
    Ok(())
}

struct Generators {
    /// visual_dim x embed_dim
    visual: Array2<f64>,
    /// mask_channels x embed_dim
    mask: Array2<f64>,
}

fn build_generators(s: &SyntheticScenario, rng: &mut ChaCha8Rng) -> Result<Generators, SynthError> {
    let normal: Normal<f64> = Normal::new(0.0, 1.0).unwrap();
    let d = s.effective_embed_dim();
    let visual = Array2::from_shape_fn((s.visual_dim, d), |_| normal.sample(rng));
    let mask = Array2::from_shape_fn((s.mask_channels, d), |_| normal.sample(rng));
    check_full_column_rank(&visual)?;
    Ok(Generators { visual, mask })
}

/// Foreground quadrant for a class: alternates over the four corners so
/// each class has a deterministic, class-dependent region.
fn foreground_region(class_index: usize, size: usize) -> impl Fn(usize, usize) -> bool {
    let half = size.div_ceil(2);
    let qx = class_index % 2;
    let qy = (class_index / 2) % 2;
    move |y, x| {
        let in_x = if qx == 0 { x < half } else { x >= size - half };
        let in_y = if qy == 0 { y < half } else { y >= size - half };
        in_x && in_y
    }
}

struct BatchBuilder {
    features: Vec<Array1<f64>>,
    mask_features: Vec<Array3<f64>>,
    mask_targets: Vec<Array2<f64>>,
    labels: Vec<usize>,
}

impl BatchBuilder {
    fn new() -> Self {
        Self { features: vec![], mask_features: vec![], mask_targets: vec![], labels: vec![] }
    }

    fn push_sample(
        &mut self,
        s: &SyntheticScenario,
        gen: &Generators,
        table: &WordVectorTable,
        branch: Branch,
        row: usize,
        class_index: usize,
        rng: &mut ChaCha8Rng,
    ) {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let sz = s.mask_size;
        let w = table.matrix(branch).row(row).to_owned();
        let w_bg = table.background().to_owned();
        let mut feat = gen.visual.dot(&w);
        feat.mapv_inplace(|v| v + s.noise_sigma * normal.sample(rng));
        let fg_feat = gen.mask.dot(&w);
        let bg_feat = gen.mask.dot(&w_bg);
        let mut mask_feat = Array3::zeros((s.mask_channels, sz, sz));
        let mut target = Array2::zeros((sz, sz));
        let in_region = foreground_region(class_index, sz);
        for y in 0..sz {
            for x in 0..sz {
                let fg = row != 0 && in_region(y, x);
                target[[y, x]] = f64::from(fg);
                let src = if fg { &fg_feat } else { &bg_feat };
                for c in 0..s.mask_channels {
                    mask_feat[[c, y, x]] = src[c] + s.noise_sigma * normal.sample(rng);
                }
            }
        }
        self.features.push(feat);
        self.mask_features.push(mask_feat);
        self.mask_targets.push(target);
        self.labels.push(row);
    }

    fn build(self, s: &SyntheticScenario) -> FeatureBatch {
        let b = self.labels.len();
        let sz = s.mask_size;
        let mut proposal_features = Array2::zeros((b, s.visual_dim));
        let mut mask_features = Array4::zeros((b, s.mask_channels, sz, sz));
        let mut mask_targets = Array3::zeros((b, sz, sz));
        for (i, f) in self.features.iter().enumerate() {
            proposal_features.row_mut(i).assign(f);
        }
        for (i, m) in self.mask_features.iter().enumerate() {
            mask_features.index_axis_mut(ndarray::Axis(0), i).assign(m);
        }
        for (i, t) in self.mask_targets.iter().enumerate() {
            mask_targets.index_axis_mut(ndarray::Axis(0), i).assign(t);
        }
        FeatureBatch {
            proposal_features,
            mask_features,
            labels: self.labels,
            det_box_pred: Array2::zeros((b, 4)),
            det_box_target: Array2::zeros((b, 4)),
            rpn_box_pred: Array2::zeros((b, 4)),
            rpn_box_target: Array2::zeros((b, 4)),
            mask_targets,
        }
    }
}

/// Draw the scenario: a seen-only training batch (with background
/// proposals mixed in) and seen/unseen test batches.
pub fn generate(s: &SyntheticScenario) -> Result<ScenarioData, SynthError> {
    generate_with_table(s, None)
}

/// Like [`generate`], but with an externally supplied word-vector table
/// (e.g. loaded from an embeddings file) instead of the scenario's own.
pub fn generate_with_table(
    s: &SyntheticScenario,
    table: Option<WordVectorTable>,
) -> Result<ScenarioData, SynthError> {
    s.validate()?;
    if let Some(t) = &table {
        if t.dim() != s.effective_embed_dim()
            || t.num_seen() != s.n_seen
            || t.num_unseen() != s.n_unseen
        {
            return Err(SynthError::BadScenario(format!(
                "supplied table is {}x({} seen, {} unseen), scenario needs {}x({}, {})",
                t.dim(),
                t.num_seen(),
                t.num_unseen(),
                s.effective_embed_dim(),
                s.n_seen,
                s.n_unseen
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let table = match table {
        Some(t) => t,
        None => build_table(s, &mut rng)?,
    };
    let gen = build_generators(s, &mut rng)?;

    let mut train = BatchBuilder::new();
    for class in 0..s.n_seen {
        for _ in 0..s.samples_per_class {
            train.push_sample(s, &gen, &table, Branch::Seen, class + 1, class, &mut rng);
        }
    }
    // Background proposals so the foreground/background split is learnable.
    for i in 0..s.n_seen * s.samples_per_class / 2 {
        train.push_sample(s, &gen, &table, Branch::Seen, 0, i % 4, &mut rng);
    }

    let mut test_seen = BatchBuilder::new();
    for class in 0..s.n_seen {
        for _ in 0..s.samples_per_class {
            test_seen.push_sample(s, &gen, &table, Branch::Seen, class + 1, class, &mut rng);
        }
    }
    let mut test_unseen = BatchBuilder::new();
    for class in 0..s.n_unseen {
        for _ in 0..s.samples_per_class {
            test_unseen.push_sample(s, &gen, &table, Branch::Unseen, class + 1, class, &mut rng);
        }
    }

    Ok(ScenarioData {
        table,
        train: train.build(s),
        test_seen: test_seen.build(s),
        test_unseen: test_unseen.build(s),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    pub seen_top1: f64,
    pub unseen_top1: f64,
    pub per_class: BTreeMap<String, f64>,
    pub chance_unseen: f64,
    pub final_loss: Option<f64>,
    /// Predicted class index (0-based within the unseen branch) per
    /// unseen test sample, for independence diagnostics.
    pub unseen_predictions: Vec<usize>,
    pub unseen_truth: Vec<usize>,
}

/// Top-1 predictions over a branch's class rows (background excluded).
fn classify(
    params: &ModelParams,
    table: &WordVectorTable,
    batch: &FeatureBatch,
    branch: Branch,
) -> Result<Vec<usize>, SemError> {
    let synced = sync_background(params.rpn.v_b(), table);
    let out = detector_forward(&params.detector, &synced, &batch.proposal_features, branch)?;
    Ok(out
        .scores
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .skip(1) // background row is not a class prediction
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i - 1)
                .unwrap()
        })
        .collect())
}

/// Train on the seen-only split and measure top-1 transfer accuracy on
/// the unseen branch.
pub fn run_transfer_experiment(
    s: &SyntheticScenario,
    train_cfg: &TrainConfig,
) -> Result<TransferReport, SynthError> {
    run_transfer_experiment_with_table(s, train_cfg, None)
}

pub fn run_transfer_experiment_with_table(
    s: &SyntheticScenario,
    train_cfg: &TrainConfig,
    table: Option<WordVectorTable>,
) -> Result<TransferReport, SynthError> {
    let data = generate_with_table(s, table)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_add(1));
    let mut params =
        ModelParams::random(s.visual_dim, s.mask_channels, s.effective_embed_dim(), &mut rng);
    let trace = if train_cfg.steps > 0 {
        train_loop(std::slice::from_ref(&data.train), &mut params, &data.table, train_cfg)?
    } else {
        Default::default()
    };

    let seen_pred = classify(&params, &data.table, &data.test_seen, Branch::Seen)?;
    let unseen_pred = classify(&params, &data.table, &data.test_unseen, Branch::Unseen)?;

    let seen_truth: Vec<usize> = data.test_seen.labels.iter().map(|&l| l - 1).collect();
    let unseen_truth: Vec<usize> = data.test_unseen.labels.iter().map(|&l| l - 1).collect();

    let accuracy = |pred: &[usize], truth: &[usize]| {
        pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
    };
    let mut per_class = BTreeMap::new();
    for (i, name) in data.table.seen_names().iter().enumerate() {
        let idx: Vec<usize> = (0..seen_truth.len()).filter(|&j| seen_truth[j] == i).collect();
        let acc = idx.iter().filter(|&&j| seen_pred[j] == i).count() as f64 / idx.len() as f64;
        per_class.insert(name.clone(), acc);
    }
    for (i, name) in data.table.unseen_names().iter().enumerate() {
        let idx: Vec<usize> = (0..unseen_truth.len()).filter(|&j| unseen_truth[j] == i).collect();
        let acc = idx.iter().filter(|&&j| unseen_pred[j] == i).count() as f64 / idx.len() as f64;
        per_class.insert(name.clone(), acc);
    }

    Ok(TransferReport {
        seen_top1: accuracy(&seen_pred, &seen_truth),
        unseen_top1: accuracy(&unseen_pred, &unseen_truth),
        per_class,
        chance_unseen: 1.0 / s.n_unseen as f64,
        final_loss: trace.losses.last().map(|l| l.total),
        unseen_predictions: unseen_pred,
        unseen_truth,
    })
}

/// Default training configuration for the shipped scenario; chosen once
/// against the frozen thresholds.
pub fn default_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.02,
        momentum: 0.9,
        steps: 120,
        loss: crate::semheads::LossConfig { logit_scale: 8.0, ..Default::default() },
    }
}

/// Re-run the experiment across noise levels; everything else fixed.
pub fn sigma_sweep(
    s: &SyntheticScenario,
    cfg: &TrainConfig,
    sigmas: &[f64],
) -> Result<Vec<TransferReport>, SynthError> {
    sigmas
        .iter()
        .map(|&sigma| {
            let scenario = SyntheticScenario { noise_sigma: sigma, ..s.clone() };
            run_transfer_experiment(&scenario, cfg)
        })
        .collect()
}

/// Pearson chi-square p-value for independence of predicted vs true
/// unseen labels. High p means no detectable association.
pub fn independence_p_value(predictions: &[usize], truth: &[usize], n_classes: usize) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let n = truth.len() as f64;
    let mut table = vec![vec![0.0; n_classes]; n_classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        table[t][p] += 1.0;
    }
    let row_sums: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<f64> =
        (0..n_classes).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    let mut stat = 0.0;
    // Collapse empty columns (classes never predicted) out of the test.
    let live_cols: Vec<usize> = (0..n_classes).filter(|&c| col_sums[c] > 0.0).collect();
    if live_cols.len() < 2 {
        return 1.0;
    }
    for (r, &rs) in row_sums.iter().enumerate() {
        if rs == 0.0 {
            continue;
        }
        for &c in &live_cols {
            let expected = rs * col_sums[c] / n;
            stat += (table[r][c] - expected).powi(2) / expected;
        }
    }
    let live_rows = row_sums.iter().filter(|&&r| r > 0.0).count();
    let df = ((live_rows - 1) * (live_cols.len() - 1)) as f64;
    if df == 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df).unwrap();
    1.0 - dist.cdf(stat)
}
