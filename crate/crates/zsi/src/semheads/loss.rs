//! Composite training loss and its analytic backward pass.
//!
//! The total loss is the sum of the BA-RPN term (binary cross-entropy +
//! smooth-l1), the detector term (cross-entropy + smooth-l1 + weighted
//! reconstruction) and the mask-head term (per-pixel binary
//! classification + weighted reconstruction). The class tables are fixed:
//! they receive no parameter gradient themselves, but the synchronized
//! background row routes its gradient back into `v_b`.
//!
//! The box-regression deltas come from the box branches outside this
//! kernel; their smooth-l1 terms enter the loss value but carry no
//! gradient for the parameters here.

use ndarray::{Array1, Array2, Array3, Array4, Axis};

use super::{
    softmax_rows, sync_background, to_pixel_rows, BaRpnParams, Branch, DetectorHeadParams,
    MaskHeadParams, SemError, WordVectorTable,
};

/// One batch of proposal-level training data.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    /// B x visual_dim RoI features.
    pub proposal_features: Array2<f64>,
    /// B x C x H x W mask features.
    pub mask_features: Array4<f64>,
    /// Per-proposal class as a row index into the seen table; 0 = background.
    pub labels: Vec<usize>,
    /// B x 4 predicted and target box deltas for the detector branch.
    pub det_box_pred: Array2<f64>,
    pub det_box_target: Array2<f64>,
    /// B x 4 predicted and target deltas for the RPN branch.
    pub rpn_box_pred: Array2<f64>,
    pub rpn_box_target: Array2<f64>,
    /// B x H x W binary mask targets, used for foreground proposals.
    pub mask_targets: Array3<f64>,
}

impl FeatureBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self, num_seen_classes: usize) -> Result<(), SemError> {
        let b = self.len();
        let (mb, _, mh, mw) = self.mask_features.dim();
        if self.proposal_features.nrows() != b || mb != b || self.mask_targets.dim() != (b, mh, mw) {
            return Err(SemError::Shape {
                expected: format!("batch size {b} across all tensors"),
                got: format!(
                    "features {}, masks {}, targets {:?}",
                    self.proposal_features.nrows(),
                    mb,
                    self.mask_targets.dim()
                ),
            });
        }
        for &l in &self.labels {
            if l > num_seen_classes {
                return Err(SemError::LabelOutOfRange(l, num_seen_classes));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Reconstruction weight in the detector term.
    pub lambda_zsd: f64,
    /// Reconstruction weight in the mask-head term.
    pub lambda_smh: f64,
    /// Scale applied to classification logits before softmax/sigmoid.
    pub logit_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_zsd: 0.5, lambda_smh: 0.5, logit_scale: 1.0 }
    }
}

/// Mean and raw-sum squared error between a tensor and its reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconLoss {
    pub mean: f64,
    pub sum: f64,
}

/// Elementwise squared reconstruction error. The loss term uses the mean
/// over elements so the weight stays scale-stable across feature widths;
/// the raw sum is reported alongside.
pub fn reconstruction_loss<'a, I>(original: I, reconstructed: I) -> ReconLoss
where
    I: IntoIterator<Item = &'a f64>,
{
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&o, &r) in original.into_iter().zip(reconstructed) {
        let d = o - r;
        sum += d * d;
        n += 1;
    }
    ReconLoss { mean: if n == 0 { 0.0 } else { sum / n as f64 }, sum }
}

fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Smooth-l1 over foreground proposals, summed across the 4 delta
/// coordinates and averaged over foreground count.
fn regression_loss(pred: &Array2<f64>, target: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut fg = 0usize;
    for (b, &label) in labels.iter().enumerate() {
        if label == 0 {
            continue;
        }
        fg += 1;
        for k in 0..pred.ncols() {
            total += smooth_l1(pred[[b, k]] - target[[b, k]]);
        }
    }
    if fg == 0 {
        0.0
    } else {
        total / fg as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ba_reg: f64,
    pub ba_cls: f64,
    pub zsd_reg: f64,
    pub zsd_cls: f64,
    pub zsd_recon: f64,
    pub zsd_recon_sum: f64,
    pub smh_bce: f64,
    pub smh_recon: f64,
    pub smh_recon_sum: f64,
}

/// Cached intermediates from the forward pass, consumed by [`backward`].
#[derive(Debug)]
pub struct ForwardState {
    /// Table after background synchronization; the same instance scores
    /// both the detector and the mask head.
    pub synced: WordVectorTable,
    rpn_semantic: Array2<f64>,
    rpn_probs: Array2<f64>,
    det_semantic: Array2<f64>,
    det_probs: Array2<f64>,
    det_recon: Array2<f64>,
    mask_flat: Array2<f64>,
    mask_semantic_flat: Array2<f64>,
    mask_scores_flat: Array2<f64>,
    mask_recon_flat: Array2<f64>,
    mask_dims: (usize, usize, usize, usize),
}

/// Full training-step forward pass: BA-RPN, background sync, detector and
/// mask head, then every loss component.
pub fn zsi_loss(
    batch: &FeatureBatch,
    det: &DetectorHeadParams,
    mask: &MaskHeadParams,
    rpn: &BaRpnParams,
    table: &WordVectorTable,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, ForwardState), SemError> {
    batch.validate(table.num_seen())?;
    let b = batch.len();
    let s = cfg.logit_scale;

    // BA-RPN forward; v_b comes out of W_bf.
    let rpn_out = super::ba_rpn_forward(rpn, &batch.proposal_features)?;
    let rpn_probs = softmax_rows(&rpn_out.scores.mapv(|v| v * s));
    let mut ba_cls = 0.0;
    for (bi, &label) in batch.labels.iter().enumerate() {
        let target = usize::from(label > 0); // column 0 = background
        ba_cls -= rpn_probs[[bi, target]].max(f64::MIN_POSITIVE).ln();
    }
    ba_cls /= b as f64;
    let ba_reg = regression_loss(&batch.rpn_box_pred, &batch.rpn_box_target, &batch.labels);

    // Synchronize the background row before the classification heads run.
    let synced = sync_background(rpn.v_b(), table);

    // Detector branch.
    let det_out = super::detector_forward(det, &synced, &batch.proposal_features, Branch::Seen)?;
    let det_probs = softmax_rows(&det_out.scores.mapv(|v| v * s));
    let mut zsd_cls = 0.0;
    for (bi, &label) in batch.labels.iter().enumerate() {
        zsd_cls -= det_probs[[bi, label]].max(f64::MIN_POSITIVE).ln();
    }
    zsd_cls /= b as f64;
    let zsd_reg = regression_loss(&batch.det_box_pred, &batch.det_box_target, &batch.labels);
    let det_rl = reconstruction_loss(batch.proposal_features.iter(), det_out.recon.iter());

    // Mask head on the pixel-flattened features.
    let (mb, mc, mh, mw) = batch.mask_features.dim();
    let mask_flat = to_pixel_rows(&batch.mask_features);
    let mask_semantic = mask_flat.dot(&mask.encode_w) + &mask.encode_b;
    let mask_scores = mask_semantic.dot(&synced.matrix(Branch::Seen).t());
    let mask_recon = mask_semantic.dot(&mask.decode_w) + &mask.decode_b;
    let smh_rl = reconstruction_loss(mask_flat.iter(), mask_recon.iter());

    // Per-pixel binary classification of the assigned class against
    // background: softmax over the (class, background) logit pair.
    let fg_count = batch.labels.iter().filter(|&&l| l > 0).count();
    let mut smh_bce = 0.0;
    if fg_count > 0 {
        let denom = (fg_count * mh * mw) as f64;
        for (bi, &label) in batch.labels.iter().enumerate() {
            if label == 0 {
                continue;
            }
            for hi in 0..mh {
                for wi in 0..mw {
                    let row = (bi * mh + hi) * mw + wi;
                    let d = s * (mask_scores[[row, label]] - mask_scores[[row, 0]]);
                    let target = batch.mask_targets[[bi, hi, wi]];
                    // log sigmoid computed stably.
                    let log_p = -softplus(-d);
                    let log_q = -softplus(d);
                    smh_bce -= (target * log_p + (1.0 - target) * log_q) / denom;
                }
            }
        }
    }

    let zsd_recon = det_rl.mean;
    let smh_recon = smh_rl.mean;
    let total = ba_reg
        + ba_cls
        + zsd_reg
        + zsd_cls
        + cfg.lambda_zsd * zsd_recon
        + smh_bce
        + cfg.lambda_smh * smh_recon;

    let breakdown = LossBreakdown {
        total,
        ba_reg,
        ba_cls,
        zsd_reg,
        zsd_cls,
        zsd_recon,
        zsd_recon_sum: det_rl.sum,
        smh_bce,
        smh_recon,
        smh_recon_sum: smh_rl.sum,
    };
    let state = ForwardState {
        synced,
        rpn_semantic: rpn_out.semantic,
        rpn_probs,
        det_semantic: det_out.semantic,
        det_probs,
        det_recon: det_out.recon,
        mask_flat,
        mask_semantic_flat: mask_semantic,
        mask_scores_flat: mask_scores,
        mask_recon_flat: mask_recon,
        mask_dims: (mb, mc, mh, mw),
    };
    Ok((breakdown, state))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Gradients for every trainable block, stored in parameter-shaped
/// containers. `rpn.bf_w` column 0 is the `v_b` gradient.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub detector: DetectorHeadParams,
    pub mask: MaskHeadParams,
    pub rpn: BaRpnParams,
}

/// Analytic gradients of the total loss. The fixed class rows of the
/// tables get no gradient; the synchronized background row accumulates
/// into `v_b` from the detector, mask-head, and BA-RPN paths.
pub fn backward(
    batch: &FeatureBatch,
    det: &DetectorHeadParams,
    mask: &MaskHeadParams,
    rpn: &BaRpnParams,
    state: &ForwardState,
    cfg: &LossConfig,
) -> Gradients {
    let b = batch.len();
    let s = cfg.logit_scale;
    let w_seen = state.synced.matrix(Branch::Seen);

    // Detector classification: dscore = s*(p - y)/B.
    let mut d_det_scores = state.det_probs.mapv(|v| v * s / b as f64);
    for (bi, &label) in batch.labels.iter().enumerate() {
        d_det_scores[[bi, label]] -= s / b as f64;
    }
    // Detector reconstruction (mean squared error, weighted).
    let n_det = state.det_recon.len() as f64;
    let d_det_recon = (&state.det_recon - &batch.proposal_features)
        .mapv(|v| cfg.lambda_zsd * 2.0 * v / n_det);

    let d_table_det = d_det_scores.t().dot(&state.det_semantic); // (S+1) x dim
    let d_det_semantic = d_det_scores.dot(w_seen) + d_det_recon.dot(&det.decode_w.t());
    let g_det = DetectorHeadParams {
        encode_w: batch.proposal_features.t().dot(&d_det_semantic),
        encode_b: d_det_semantic.sum_axis(Axis(0)),
        decode_w: state.det_semantic.t().dot(&d_det_recon),
        decode_b: d_det_recon.sum_axis(Axis(0)),
    };

    // Mask head: BCE over (class, background) pairs plus reconstruction.
    let (_, _, mh, mw) = state.mask_dims;
    let n_classes = w_seen.nrows();
    let mut d_mask_scores = Array2::zeros((state.mask_scores_flat.nrows(), n_classes));
    let fg_count = batch.labels.iter().filter(|&&l| l > 0).count();
    if fg_count > 0 {
        let denom = (fg_count * mh * mw) as f64;
        for (bi, &label) in batch.labels.iter().enumerate() {
            if label == 0 {
                continue;
            }
            for hi in 0..mh {
                for wi in 0..mw {
                    let row = (bi * mh + hi) * mw + wi;
                    let d = s * (state.mask_scores_flat[[row, label]] - state.mask_scores_flat[[row, 0]]);
                    let p = 1.0 / (1.0 + (-d).exp());
                    let g = s * (p - batch.mask_targets[[bi, hi, wi]]) / denom;
                    d_mask_scores[[row, label]] += g;
                    d_mask_scores[[row, 0]] -= g;
                }
            }
        }
    }
    let n_mask = state.mask_recon_flat.len() as f64;
    let d_mask_recon =
        (&state.mask_recon_flat - &state.mask_flat).mapv(|v| cfg.lambda_smh * 2.0 * v / n_mask);

    let d_table_mask = d_mask_scores.t().dot(&state.mask_semantic_flat);
    let d_mask_semantic = d_mask_scores.dot(w_seen) + d_mask_recon.dot(&mask.decode_w.t());
    let g_mask = MaskHeadParams {
        encode_w: state.mask_flat.t().dot(&d_mask_semantic),
        encode_b: d_mask_semantic.sum_axis(Axis(0)),
        decode_w: state.mask_semantic_flat.t().dot(&d_mask_recon),
        decode_b: d_mask_recon.sum_axis(Axis(0)),
    };

    // BA-RPN binary classification.
    let mut d_rpn_scores = state.rpn_probs.mapv(|v| v * s / b as f64);
    for (bi, &label) in batch.labels.iter().enumerate() {
        let target = usize::from(label > 0);
        d_rpn_scores[[bi, target]] -= s / b as f64;
    }
    let mut g_bf = state.rpn_semantic.t().dot(&d_rpn_scores); // dim x 2
    // The synchronized background row feeds both heads; its gradient
    // flows back into v_b (column 0 of W_bf).
    let v_b_extra = &d_table_det.row(0) + &d_table_mask.row(0);
    let mut col0: Array1<f64> = g_bf.column(0).to_owned();
    col0 += &v_b_extra;
    g_bf.column_mut(0).assign(&col0);

    let d_rpn_semantic = d_rpn_scores.dot(&rpn.bf_w.t());
    let g_rpn = BaRpnParams {
        transform_w: batch.proposal_features.t().dot(&d_rpn_semantic),
        transform_b: d_rpn_semantic.sum_axis(Axis(0)),
        bf_w: g_bf,
    };

    Gradients { detector: g_det, mask: g_mask, rpn: g_rpn }
}
