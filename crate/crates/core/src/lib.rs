//! Weakly-supervised temporal action localization trained from video-level
//! labels, with two semantic-prior branches (key-semantic matching and
//! complete-semantic reconstruction) coupled by interactive distillation,
//! a prior-driven localization head, and a proposal/NMS/mAP evaluation stack.
//!
//! Everything runs on a small dense-tensor reverse-mode autodiff engine in
//! [`numerics`]; no external ML framework is involved.

pub mod corpus;
pub mod csr;
pub mod dpid;
pub mod error;
pub mod evaluate;
pub mod ksm;
pub mod lochead;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
