//! Zero-shot instance segmentation toolkit: COCO-style annotation
//! handling, seen/unseen benchmark splits, mask geometry with RLE
//! codecs, the evaluation protocol (Recall@100, mAP@0.5, generalized
//! harmonic means), reference implementations of the semantic heads
//! with gradient checking, and a synthetic transfer lab.

pub mod annotations;
pub mod cli;
pub mod maskgeom;
pub mod metrics;
pub mod semheads;
pub mod synthlab;
