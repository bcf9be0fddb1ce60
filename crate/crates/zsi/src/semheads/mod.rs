//! Reference kernels for the semantic classification heads: word-vector
//! tables, the detector's encoder-decoder branch, the per-pixel semantic
//! mask head, the background-aware RPN, and the background
//! synchronization procedure.
//!
//! Everything here is dense double-precision linear algebra with analytic
//! gradients; see [`loss`] for the composite loss and backward pass and
//! [`gradcheck`] for the finite-difference verification harness.

pub mod embeddings;
pub mod gradcheck;
pub mod loss;
pub mod train;

use ndarray::{Array1, Array2, Array4, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embeddings::load_embeddings;
pub use gradcheck::{run_gradient_check, GradCheckConfig, GradCheckReport};
pub use loss::{backward, reconstruction_loss, zsi_loss, FeatureBatch, Gradients, LossBreakdown, LossConfig};
pub use train::{train_loop, ModelParams, TrainConfig, TrainTrace};

/// Default word-vector width.
pub const EMBED_DIM: usize = 300;
/// Default visual feature width of the detector branch.
pub const VISUAL_DIM: usize = 2048;

#[derive(Debug, Error)]
pub enum SemError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("no embedding for token {0:?}")]
    MissingToken(String),
    #[error("embedding for token {0:?} is a zero vector and cannot be normalized")]
    ZeroVector(String),
    #[error("malformed embeddings file at line {line}: {message}")]
    BadEmbeddingsFile { line: usize, message: String },
    #[error("embeddings have dimension {got}, expected {expected}")]
    EmbeddingDim { expected: usize, got: usize },
    #[error("label {0} out of range for {1} classes")]
    LabelOutOfRange(usize, usize),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Seen,
    Unseen,
}

/// Row-normalized class embedding matrices for the seen and unseen
/// branches. Row 0 of each matrix is the shared background word-vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordVectorTable {
    dim: usize,
    seen: Array2<f64>,
    unseen: Array2<f64>,
    seen_names: Vec<String>,
    unseen_names: Vec<String>,
}

fn l2_normalize_rows(m: &mut Array2<f64>) -> Result<(), usize> {
    for (i, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(i);
        }
        row /= norm;
    }
    Ok(())
}

impl WordVectorTable {
    /// Build a table from raw class vectors plus a background vector.
    /// Every row is l2-normalized.
    pub fn from_vectors(
        background: Array1<f64>,
        seen: Vec<(String, Array1<f64>)>,
        unseen: Vec<(String, Array1<f64>)>,
    ) -> Result<Self, SemError> {
        let dim = background.len();
        let build = |names: &[(String, Array1<f64>)]| -> Result<Array2<f64>, SemError> {
            let mut m = Array2::zeros((names.len() + 1, dim));
            m.row_mut(0).assign(&background);
            for (i, (name, v)) in names.iter().enumerate() {
                if v.len() != dim {
                    return Err(SemError::Shape {
                        expected: format!("dim {dim}"),
                        got: format!("dim {} for {name:?}", v.len()),
                    });
                }
                m.row_mut(i + 1).assign(v);
            }
            Ok(m)
        };
        let mut seen_m = build(&seen)?;
        let mut unseen_m = build(&unseen)?;
        let name_of = |rows: &[(String, Array1<f64>)], i: usize| {
            if i == 0 { "background".to_string() } else { rows[i - 1].0.clone() }
        };
        l2_normalize_rows(&mut seen_m).map_err(|i| SemError::ZeroVector(name_of(&seen, i)))?;
        l2_normalize_rows(&mut unseen_m).map_err(|i| SemError::ZeroVector(name_of(&unseen, i)))?;
        Ok(Self {
            dim,
            seen: seen_m,
            unseen: unseen_m,
            seen_names: seen.into_iter().map(|(n, _)| n).collect(),
            unseen_names: unseen.into_iter().map(|(n, _)| n).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_seen(&self) -> usize {
        self.seen_names.len()
    }

    pub fn num_unseen(&self) -> usize {
        self.unseen_names.len()
    }

    pub fn matrix(&self, branch: Branch) -> &Array2<f64> {
        match branch {
            Branch::Seen => &self.seen,
            Branch::Unseen => &self.unseen,
        }
    }

    pub fn seen_names(&self) -> &[String] {
        &self.seen_names
    }

    pub fn unseen_names(&self) -> &[String] {
        &self.unseen_names
    }

    /// Row index of a class name within a branch (row 0 is background).
    pub fn row_of(&self, branch: Branch, name: &str) -> Option<usize> {
        let names = match branch {
            Branch::Seen => &self.seen_names,
            Branch::Unseen => &self.unseen_names,
        };
        names.iter().position(|n| n == name).map(|i| i + 1)
    }

    pub fn background(&self) -> ArrayView1<'_, f64> {
        self.seen.row(0)
    }
}

/// Replace the background row of both branches with `v_b`, exactly as
/// learned (no re-normalization). All class rows are untouched.
pub fn sync_background(v_b: ArrayView1<f64>, table: &WordVectorTable) -> WordVectorTable {
    let mut out = table.clone();
    out.seen.row_mut(0).assign(&v_b);
    out.unseen.row_mut(0).assign(&v_b);
    out
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Encoder `T_e` and decoder `T_d` of the detector's semantic
/// classification branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorHeadParams {
    /// visual_dim x embed_dim
    pub encode_w: Array2<f64>,
    pub encode_b: Array1<f64>,
    /// embed_dim x visual_dim
    pub decode_w: Array2<f64>,
    pub decode_b: Array1<f64>,
}

impl DetectorHeadParams {
    pub fn random<R: Rng>(visual_dim: usize, embed_dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (visual_dim as f64).sqrt();
        Self {
            encode_w: gaussian_matrix(visual_dim, embed_dim, std, rng),
            encode_b: Array1::zeros(embed_dim),
            decode_w: gaussian_matrix(embed_dim, visual_dim, 1.0 / (embed_dim as f64).sqrt(), rng),
            decode_b: Array1::zeros(visual_dim),
        }
    }

    pub fn visual_dim(&self) -> usize {
        self.encode_w.nrows()
    }
}

/// 1x1-convolution encoder `E` and decoder `D` of the semantic mask head.
/// A 1x1 convolution over `C` channels is a per-pixel linear map, so the
/// weights are stored as plain matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskHeadParams {
    /// channels x embed_dim
    pub encode_w: Array2<f64>,
    pub encode_b: Array1<f64>,
    /// embed_dim x channels (channel shape transposed relative to E)
    pub decode_w: Array2<f64>,
    pub decode_b: Array1<f64>,
}

impl MaskHeadParams {
    pub fn random<R: Rng>(channels: usize, embed_dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (channels as f64).sqrt();
        Self {
            encode_w: gaussian_matrix(channels, embed_dim, std, rng),
            encode_b: Array1::zeros(embed_dim),
            decode_w: gaussian_matrix(embed_dim, channels, 1.0 / (embed_dim as f64).sqrt(), rng),
            decode_b: Array1::zeros(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.encode_w.nrows()
    }
}

/// Background-aware RPN: transform `T` plus the 2-column classifier
/// `W_bf` whose column 0 is the learnable background word-vector `v_b`
/// and column 1 the foreground vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaRpnParams {
    /// visual_dim x embed_dim
    pub transform_w: Array2<f64>,
    pub transform_b: Array1<f64>,
    /// embed_dim x 2: column 0 = v_b, column 1 = v_f
    pub bf_w: Array2<f64>,
}

impl BaRpnParams {
    pub fn random<R: Rng>(visual_dim: usize, embed_dim: usize, rng: &mut R) -> Self {
        Self {
            transform_w: gaussian_matrix(visual_dim, embed_dim, 1.0 / (visual_dim as f64).sqrt(), rng),
            transform_b: Array1::zeros(embed_dim),
            bf_w: gaussian_matrix(embed_dim, 2, 1.0 / (embed_dim as f64).sqrt(), rng),
        }
    }

    /// Initialize `v_b` from an existing background word-vector.
    pub fn with_background(mut self, v_b: ArrayView1<f64>) -> Self {
        self.bf_w.column_mut(0).assign(&v_b);
        self
    }

    pub fn v_b(&self) -> ArrayView1<'_, f64> {
        self.bf_w.column(0)
    }
}

fn check_cols(name: &str, got: usize, expected: usize) -> Result<(), SemError> {
    if got != expected {
        return Err(SemError::Shape {
            expected: format!("{name} width {expected}"),
            got: format!("{got}"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DetectorForward {
    /// B x embed_dim
    pub semantic: Array2<f64>,
    /// B x (n+1), row 0 of the table scoring column 0
    pub scores: Array2<f64>,
    /// B x visual_dim
    pub recon: Array2<f64>,
}

/// Detector branch: encode, score against the fixed table, decode.
pub fn detector_forward(
    p: &DetectorHeadParams,
    table: &WordVectorTable,
    feats: &Array2<f64>,
    branch: Branch,
) -> Result<DetectorForward, SemError> {
    check_cols("visual feature", feats.ncols(), p.encode_w.nrows())?;
    check_cols("encoder output", p.encode_w.ncols(), table.dim())?;
    let semantic = feats.dot(&p.encode_w) + &p.encode_b;
    let scores = semantic.dot(&table.matrix(branch).t());
    let recon = semantic.dot(&p.decode_w) + &p.decode_b;
    Ok(DetectorForward { semantic, scores, recon })
}

#[derive(Debug, Clone)]
pub struct MaskHeadForward {
    /// B x embed_dim x H x W
    pub semantic: Array4<f64>,
    /// B x (n+1) x H x W
    pub scores: Array4<f64>,
    /// B x C x H x W
    pub recon: Array4<f64>,
}

/// Flatten B x C x H x W to (B*H*W) x C pixel rows.
pub(crate) fn to_pixel_rows(t: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = t.dim();
    let mut out = Array2::zeros((b * h * w, c));
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let row = (bi * h + hi) * w + wi;
                for ci in 0..c {
                    out[[row, ci]] = t[[bi, ci, hi, wi]];
                }
            }
        }
    }
    out
}

pub(crate) fn from_pixel_rows(m: &Array2<f64>, b: usize, h: usize, w: usize) -> Array4<f64> {
    let c = m.ncols();
    let mut out = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let row = (bi * h + hi) * w + wi;
                for ci in 0..c {
                    out[[bi, ci, hi, wi]] = m[[row, ci]];
                }
            }
        }
    }
    out
}

/// Semantic mask head: the 1x1 convolutions are applied pixelwise, so the
/// whole head is the detector math on the pixel-flattened tensor.
pub fn mask_head_forward(
    p: &MaskHeadParams,
    table: &WordVectorTable,
    feats: &Array4<f64>,
    branch: Branch,
) -> Result<MaskHeadForward, SemError> {
    let (b, c, h, w) = feats.dim();
    check_cols("mask channels", c, p.encode_w.nrows())?;
    check_cols("encoder output", p.encode_w.ncols(), table.dim())?;
    let flat = to_pixel_rows(feats);
    let semantic = flat.dot(&p.encode_w) + &p.encode_b;
    let scores = semantic.dot(&table.matrix(branch).t());
    let recon = semantic.dot(&p.decode_w) + &p.decode_b;
    Ok(MaskHeadForward {
        semantic: from_pixel_rows(&semantic, b, h, w),
        scores: from_pixel_rows(&scores, b, h, w),
        recon: from_pixel_rows(&recon, b, h, w),
    })
}

#[derive(Debug, Clone)]
pub struct BaRpnForward {
    /// B x embed_dim
    pub semantic: Array2<f64>,
    /// B x 2: column 0 background, column 1 foreground
    pub scores: Array2<f64>,
}

pub fn ba_rpn_forward(p: &BaRpnParams, feats: &Array2<f64>) -> Result<BaRpnForward, SemError> {
    check_cols("visual feature", feats.ncols(), p.transform_w.nrows())?;
    let semantic = feats.dot(&p.transform_w) + &p.transform_b;
    let scores = semantic.dot(&p.bf_w);
    Ok(BaRpnForward { semantic, scores })
}

pub(crate) fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Merge the seen and unseen branch scores into one distribution-like
/// vector per proposal: softmax each branch independently, concatenate
/// the class probabilities, and take the background probability from the
/// seen branch. Output layout per row: `[background, seen..., unseen...]`.
pub fn merge_scores(
    seen_scores: &Array2<f64>,
    unseen_scores: &Array2<f64>,
) -> Result<Array2<f64>, SemError> {
    if seen_scores.nrows() != unseen_scores.nrows() {
        return Err(SemError::Shape {
            expected: format!("{} rows", seen_scores.nrows()),
            got: format!("{} rows", unseen_scores.nrows()),
        });
    }
    let s = softmax_rows(seen_scores);
    let u = softmax_rows(unseen_scores);
    let n_seen = s.ncols() - 1;
    let n_unseen = u.ncols() - 1;
    let mut out = Array2::zeros((s.nrows(), 1 + n_seen + n_unseen));
    for b in 0..s.nrows() {
        out[[b, 0]] = s[[b, 0]];
        for c in 0..n_seen {
            out[[b, 1 + c]] = s[[b, 1 + c]];
        }
        for c in 0..n_unseen {
            out[[b, 1 + n_seen + c]] = u[[b, 1 + c]];
        }
    }
    Ok(out)
}
