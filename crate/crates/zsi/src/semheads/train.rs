//! Plain-SGD training loop running the per-step synchronized-background
//! procedure: BA-RPN forward, background sync, head forwards, loss,
//! backward, parameter update.

use ndarray::Zip;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{backward, zsi_loss, FeatureBatch, LossBreakdown, LossConfig};
use super::{BaRpnParams, DetectorHeadParams, MaskHeadParams, SemError, WordVectorTable};

/// All trainable parameter blocks of the three heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub detector: DetectorHeadParams,
    pub mask: MaskHeadParams,
    pub rpn: BaRpnParams,
}

impl ModelParams {
    pub fn random<R: Rng>(visual_dim: usize, channels: usize, embed_dim: usize, rng: &mut R) -> Self {
        Self {
            detector: DetectorHeadParams::random(visual_dim, embed_dim, rng),
            mask: MaskHeadParams::random(channels, embed_dim, rng),
            rpn: BaRpnParams::random(visual_dim, embed_dim, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for block in z.blocks_mut() {
            block.fill(0.0);
        }
        z
    }

    /// The trainable blocks as flat slices, in `gradcheck::BLOCKS` order.
    pub fn blocks_mut(&mut self) -> [&mut [f64]; 11] {
        [
            self.detector.encode_w.as_slice_mut().unwrap(),
            self.detector.encode_b.as_slice_mut().unwrap(),
            self.detector.decode_w.as_slice_mut().unwrap(),
            self.detector.decode_b.as_slice_mut().unwrap(),
            self.mask.encode_w.as_slice_mut().unwrap(),
            self.mask.encode_b.as_slice_mut().unwrap(),
            self.mask.decode_w.as_slice_mut().unwrap(),
            self.mask.decode_b.as_slice_mut().unwrap(),
            self.rpn.transform_w.as_slice_mut().unwrap(),
            self.rpn.transform_b.as_slice_mut().unwrap(),
            self.rpn.bf_w.as_slice_mut().unwrap(),
        ]
    }

    pub fn blocks(&self) -> [&[f64]; 11] {
        [
            self.detector.encode_w.as_slice().unwrap(),
            self.detector.encode_b.as_slice().unwrap(),
            self.detector.decode_w.as_slice().unwrap(),
            self.detector.decode_b.as_slice().unwrap(),
            self.mask.encode_w.as_slice().unwrap(),
            self.mask.encode_b.as_slice().unwrap(),
            self.mask.decode_w.as_slice().unwrap(),
            self.mask.decode_b.as_slice().unwrap(),
            self.rpn.transform_w.as_slice().unwrap(),
            self.rpn.transform_b.as_slice().unwrap(),
            self.rpn.bf_w.as_slice().unwrap(),
        ]
    }

    /// Serialize to a self-describing JSON checkpoint; f64 values
    /// round-trip exactly.
    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<(), SemError> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| SemError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self, SemError> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| SemError::Checkpoint(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.1, momentum: 0.0, steps: 100, loss: LossConfig::default() }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub losses: Vec<LossBreakdown>,
}

impl TrainTrace {
    pub fn totals(&self) -> Vec<f64> {
        self.losses.iter().map(|l| l.total).collect()
    }
}

/// Run `cfg.steps` SGD steps over the batches (cycled in order). The word
/// tables stay fixed; the background word-vector lives in `params.rpn`
/// and is synchronized into the heads inside every loss evaluation.
pub fn train_loop(
    data: &[FeatureBatch],
    params: &mut ModelParams,
    table: &WordVectorTable,
    cfg: &TrainConfig,
) -> Result<TrainTrace, SemError> {
    assert!(!data.is_empty(), "training needs at least one batch");
    let mut velocity = params.zeros_like();
    let mut trace = TrainTrace::default();
    for step in 0..cfg.steps {
        let batch = &data[step % data.len()];
        let (loss, state) = zsi_loss(batch, &params.detector, &params.mask, &params.rpn, table, &cfg.loss)?;
        if !loss.total.is_finite() {
            return Err(SemError::Diverged { step, loss: loss.total });
        }
        let grads = backward(batch, &params.detector, &params.mask, &params.rpn, &state, &cfg.loss);
        let grad_params = ModelParams { detector: grads.detector, mask: grads.mask, rpn: grads.rpn };
        update(params, &mut velocity, &grad_params, cfg.learning_rate, cfg.momentum);
        trace.losses.push(loss);
    }
    Ok(trace)
}

fn update(
    params: &mut ModelParams,
    velocity: &mut ModelParams,
    grads: &ModelParams,
    lr: f64,
    momentum: f64,
) {
    macro_rules! step {
        ($field:ident . $sub:ident) => {
            Zip::from(&mut velocity.$field.$sub)
                .and(&grads.$field.$sub)
                .for_each(|v, &g| *v = momentum * *v + g);
            Zip::from(&mut params.$field.$sub)
                .and(&velocity.$field.$sub)
                .for_each(|p, &v| *p -= lr * v);
        };
    }
    step!(detector.encode_w);
    step!(detector.encode_b);
    step!(detector.decode_w);
    step!(detector.decode_b);
    step!(mask.encode_w);
    step!(mask.encode_b);
    step!(mask.decode_w);
    step!(mask.decode_b);
    step!(rpn.transform_w);
    step!(rpn.transform_b);
    step!(rpn.bf_w);
}
