//! The dual-sequence model: lyrics encoder, vocal and accompaniment decoders
//! built from SA -> lyrics-CA -> BCA -> FFN blocks, and the non-autoregressive
//! song decoder.
//!
//! Two forward implementations share the same kernels and parameter store:
//! the autodiff-graph path ([`forward`]) used for training, gradient checks
//! and teacher-forced evaluation, and the array path ([`infer`]) used for
//! step-synchronized generation with its incremental decode cache. The
//! incremental-consistency check pins the two together numerically.

pub mod forward;
pub mod infer;

use std::sync::Arc;

use crate::config::DslmConfig;
use crate::error::CoreResult;
use crate::params::{build_layout, ModelIds, ParamLayout, ParamStore};
use crate::scalar::Scalar;

/// Model structure: configuration plus the parameter layout and typed ids.
#[derive(Debug, Clone)]
pub struct Dslm {
    pub cfg: DslmConfig,
    pub layout: Arc<ParamLayout>,
    pub ids: ModelIds,
}

impl Dslm {
    pub fn new(cfg: DslmConfig) -> CoreResult<Self> {
        cfg.validate()?;
        let (layout, ids) = build_layout(&cfg);
        Ok(Dslm {
            cfg,
            layout: Arc::new(layout),
            ids,
        })
    }

    pub fn init_params<S: Scalar>(&self, seed: u64) -> ParamStore<S> {
        ParamStore::init(self.layout.clone(), seed)
    }
}
