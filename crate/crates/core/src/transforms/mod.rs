//! Permutation-equivariant set-to-set maps over prototype sets.
//!
//! Every head maps an N×D prototype set to an N×D set, preserving class order,
//! and has an exact analytic backward pass. Heads are never mutated by
//! evaluation. A head value also serves as its own gradient container: the
//! gradient of a head is the same variant with every learnable tensor replaced
//! by its derivative.

mod attention;
mod deepsets;
mod ltn;
mod norm;

use std::fmt;
use std::str::FromStr;

use crate::classifier::PrototypeSet;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};
use crate::params::Params;

pub use attention::{attention_forward, AttentionParams};
pub use deepsets::{deepsets_forward, DeepSetsParams};
pub use ltn::{ltn_forward, ltn_with_alpha, LtnParams, WeightGenerator, GENERATOR_WIDTHS};
pub use norm::{
    instance_norm_forward, layer_norm_forward, task_norm_forward, task_norm_with_alpha, NormParams,
    TaskNormParams, DEFAULT_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HeadKind {
    Identity,
    DeepSets,
    Attention,
    LayerNorm,
    InstanceNorm,
    TaskNorm,
    Ltn,
}

impl HeadKind {
    pub const ALL: [HeadKind; 7] = [
        HeadKind::Identity,
        HeadKind::DeepSets,
        HeadKind::Attention,
        HeadKind::LayerNorm,
        HeadKind::InstanceNorm,
        HeadKind::TaskNorm,
        HeadKind::Ltn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Identity => "identity",
            HeadKind::DeepSets => "deepsets",
            HeadKind::Attention => "attention",
            HeadKind::LayerNorm => "ln",
            HeadKind::InstanceNorm => "in",
            HeadKind::TaskNorm => "tasknorm",
            HeadKind::Ltn => "ltn",
        }
    }

    /// Stable numeric tag used by the checkpoint format.
    pub fn tag(self) -> u32 {
        match self {
            HeadKind::Identity => 0,
            HeadKind::DeepSets => 1,
            HeadKind::Attention => 2,
            HeadKind::LayerNorm => 3,
            HeadKind::InstanceNorm => 4,
            HeadKind::TaskNorm => 5,
            HeadKind::Ltn => 6,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.tag() == tag)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown head tag {tag}")))
    }

    /// Smallest set the head accepts.
    pub fn min_set_size(self) -> usize {
        match self {
            HeadKind::InstanceNorm | HeadKind::Ltn => 2,
            _ => 1,
        }
    }

    pub fn needs_supports(self) -> bool {
        self == HeadKind::TaskNorm
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown head '{s}', expected one of identity|deepsets|attention|ln|in|tasknorm|ltn"
                ))
            })
    }
}

/// Construction options shared by all heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    /// Hidden width of the DeepSets networks; defaults to D.
    pub hidden: Option<usize>,
    pub eps: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: None,
            eps: DEFAULT_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransformHead {
    Identity { dim: usize },
    DeepSets(DeepSetsParams),
    Attention(AttentionParams),
    LayerNorm(NormParams),
    InstanceNorm(NormParams),
    TaskNorm(TaskNormParams),
    Ltn(LtnParams),
}

/// Auxiliary episode data some heads consume.
#[derive(Debug, Clone, Copy, Default)]
pub struct TransformContext<'a> {
    /// Encoded support features, one per row. Required by task normalization.
    pub support_features: Option<&'a Matrix>,
}

impl<'a> TransformContext<'a> {
    pub fn none() -> Self {
        TransformContext::default()
    }

    pub fn with_supports(supports: &'a Matrix) -> Self {
        TransformContext {
            support_features: Some(supports),
        }
    }
}

/// Output of [`transform_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransformGrads {
    pub params: TransformHead,
    pub protos: Matrix,
    /// Gradient with respect to the context's support features, when the
    /// head reads them.
    pub support_features: Option<Matrix>,
}

impl TransformHead {
    pub fn init(kind: HeadKind, dim: usize, rng: &mut RngState) -> Result<Self> {
        Self::init_with(kind, dim, &HeadConfig::default(), rng)
    }

    pub fn init_with(kind: HeadKind, dim: usize, cfg: &HeadConfig, rng: &mut RngState) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("head dimension must be positive"));
        }
        if !(cfg.eps > 0.0) {
            return Err(Error::InvalidArgument(format!("eps must be positive, got {}", cfg.eps)));
        }
        Ok(match kind {
            HeadKind::Identity => TransformHead::Identity { dim },
            HeadKind::DeepSets => TransformHead::DeepSets(DeepSetsParams::init(dim, cfg.hidden.unwrap_or(dim), rng)?),
            HeadKind::Attention => TransformHead::Attention(AttentionParams::init(dim, cfg.eps, rng)),
            HeadKind::LayerNorm => TransformHead::LayerNorm(NormParams::identity(dim, cfg.eps)),
            HeadKind::InstanceNorm => TransformHead::InstanceNorm(NormParams::identity(dim, cfg.eps)),
            HeadKind::TaskNorm => TransformHead::TaskNorm(TaskNormParams::identity(dim, cfg.eps)),
            HeadKind::Ltn => TransformHead::Ltn(LtnParams::init(dim, cfg.eps, rng)),
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            TransformHead::Identity { .. } => HeadKind::Identity,
            TransformHead::DeepSets(_) => HeadKind::DeepSets,
            TransformHead::Attention(_) => HeadKind::Attention,
            TransformHead::LayerNorm(_) => HeadKind::LayerNorm,
            TransformHead::InstanceNorm(_) => HeadKind::InstanceNorm,
            TransformHead::TaskNorm(_) => HeadKind::TaskNorm,
            TransformHead::Ltn(_) => HeadKind::Ltn,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TransformHead::Identity { dim } => *dim,
            TransformHead::DeepSets(p) => p.dim(),
            TransformHead::Attention(p) => p.dim(),
            TransformHead::LayerNorm(p) | TransformHead::InstanceNorm(p) => p.dim(),
            TransformHead::TaskNorm(p) => p.norm.dim(),
            TransformHead::Ltn(p) => p.gamma.len(),
        }
    }

    /// The ε of normalizing heads.
    pub fn eps(&self) -> Option<f64> {
        match self {
            TransformHead::Identity { .. } | TransformHead::DeepSets(_) => None,
            TransformHead::Attention(p) => Some(p.norm.eps),
            TransformHead::LayerNorm(p) | TransformHead::InstanceNorm(p) => Some(p.eps),
            TransformHead::TaskNorm(p) => Some(p.norm.eps),
            TransformHead::Ltn(p) => Some(p.eps),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            TransformHead::Identity { dim } => TransformHead::Identity { dim: *dim },
            TransformHead::DeepSets(p) => TransformHead::DeepSets(p.zeros_like()),
            TransformHead::Attention(p) => TransformHead::Attention(p.zeros_like()),
            TransformHead::LayerNorm(p) => TransformHead::LayerNorm(p.zeros_like()),
            TransformHead::InstanceNorm(p) => TransformHead::InstanceNorm(p.zeros_like()),
            TransformHead::TaskNorm(p) => TransformHead::TaskNorm(p.zeros_like()),
            TransformHead::Ltn(p) => TransformHead::Ltn(p.zeros_like()),
        }
    }

    /// Checks parameter shapes against the head's own dimension and finiteness.
    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if dim == 0 {
            return Err(Error::invalid("head dimension must be positive"));
        }
        match self {
            TransformHead::Identity { .. } => {}
            TransformHead::DeepSets(p) => p.validate(dim)?,
            TransformHead::Attention(p) => p.validate(dim)?,
            TransformHead::LayerNorm(p) | TransformHead::InstanceNorm(p) => p.validate(dim)?,
            TransformHead::TaskNorm(p) => p.norm.validate(dim)?,
            TransformHead::Ltn(p) => p.validate(dim)?,
        }
        if !self.all_finite() {
            return Err(Error::NonFinite(format!("{} head parameters", self.kind())));
        }
        Ok(())
    }

    fn check_input<'a>(&self, protos: &PrototypeSet, ctx: &TransformContext<'a>) -> Result<Option<&'a Matrix>> {
        if protos.dim() != self.dim() {
            return Err(Error::dim("transform input", self.dim(), protos.dim()));
        }
        let kind = self.kind();
        if protos.way() < kind.min_set_size() {
            return Err(Error::InvalidArgument(format!(
                "{kind} head needs a set of at least {} prototypes, got {}",
                kind.min_set_size(),
                protos.way()
            )));
        }
        if kind.needs_supports() {
            let s = ctx
                .support_features
                .ok_or_else(|| Error::invalid("tasknorm head needs support features"))?;
            if s.rows() == 0 {
                return Err(Error::invalid("tasknorm head needs a non-empty support set"));
            }
            if s.cols() != self.dim() {
                return Err(Error::dim("tasknorm support features", self.dim(), s.cols()));
            }
            return Ok(Some(s));
        }
        Ok(None)
    }

    pub fn forward(&self, protos: &PrototypeSet, ctx: &TransformContext<'_>) -> Result<PrototypeSet> {
        let supports = self.check_input(protos, ctx)?;
        let out = match self {
            TransformHead::Identity { .. } => protos.clone(),
            TransformHead::DeepSets(p) => deepsets_forward(protos, p)?,
            TransformHead::Attention(p) => attention_forward(protos, p)?,
            TransformHead::LayerNorm(p) => layer_norm_forward(protos, p)?,
            TransformHead::InstanceNorm(p) => instance_norm_forward(protos, p)?,
            TransformHead::TaskNorm(p) => task_norm_forward(protos, p, supports.expect("checked"))?,
            TransformHead::Ltn(p) => ltn_forward(protos, p)?,
        };
        if !out.matrix().is_finite() {
            return Err(Error::NonFinite(format!("{} head output", self.kind())));
        }
        Ok(out)
    }

    pub fn backward(
        &self,
        protos: &PrototypeSet,
        ctx: &TransformContext<'_>,
        upstream: &Matrix,
    ) -> Result<TransformGrads> {
        let supports = self.check_input(protos, ctx)?;
        if upstream.rows() != protos.way() || upstream.cols() != protos.dim() {
            return Err(Error::InvalidArgument(format!(
                "upstream gradient must be {}x{}, got {}x{}",
                protos.way(),
                protos.dim(),
                upstream.rows(),
                upstream.cols()
            )));
        }
        let p = protos.matrix();
        let (params, dp, ds) = match self {
            TransformHead::Identity { dim } => (TransformHead::Identity { dim: *dim }, upstream.clone(), None),
            TransformHead::DeepSets(h) => {
                let (g, dp) = deepsets::deepsets_backward(p, h, upstream);
                (TransformHead::DeepSets(g), dp, None)
            }
            TransformHead::Attention(h) => {
                let (g, dp) = attention::attention_backward(p, h, upstream);
                (TransformHead::Attention(g), dp, None)
            }
            TransformHead::LayerNorm(h) => {
                let (g, dp) = norm::layer_norm_backward(p, h, upstream);
                (TransformHead::LayerNorm(g), dp, None)
            }
            TransformHead::InstanceNorm(h) => {
                let (g, dp) = norm::instance_norm_backward(p, h, upstream)?;
                (TransformHead::InstanceNorm(g), dp, None)
            }
            TransformHead::TaskNorm(h) => {
                let (g, dp, ds) = norm::task_norm_backward(p, h, supports.expect("checked"), upstream);
                (TransformHead::TaskNorm(g), dp, Some(ds))
            }
            TransformHead::Ltn(h) => {
                let (g, dp) = ltn::ltn_backward(p, h, upstream)?;
                (TransformHead::Ltn(g), dp, None)
            }
        };
        Ok(TransformGrads {
            params,
            protos: dp,
            support_features: ds,
        })
    }
}

impl Params for TransformHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        match self {
            TransformHead::Identity { .. } => {}
            TransformHead::DeepSets(p) => p.visit(prefix, f),
            TransformHead::Attention(p) => p.visit(prefix, f),
            TransformHead::LayerNorm(p) | TransformHead::InstanceNorm(p) => p.visit(prefix, f),
            TransformHead::TaskNorm(p) => p.visit(prefix, f),
            TransformHead::Ltn(p) => p.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        match self {
            TransformHead::Identity { .. } => {}
            TransformHead::DeepSets(p) => p.visit_mut(f),
            TransformHead::Attention(p) => p.visit_mut(f),
            TransformHead::LayerNorm(p) | TransformHead::InstanceNorm(p) => p.visit_mut(f),
            TransformHead::TaskNorm(p) => p.visit_mut(f),
            TransformHead::Ltn(p) => p.visit_mut(f),
        }
    }
}

/// `P' = T(P)`.
pub fn transform(head: &TransformHead, protos: &PrototypeSet, ctx: &TransformContext<'_>) -> Result<PrototypeSet> {
    head.forward(protos, ctx)
}

/// Gradients of `⟨upstream, T(P)⟩` with respect to the head parameters, the
/// input prototypes and, for task normalization, the support features.
pub fn transform_backward(
    head: &TransformHead,
    protos: &PrototypeSet,
    ctx: &TransformContext<'_>,
    upstream: &Matrix,
) -> Result<TransformGrads> {
    head.backward(protos, ctx, upstream)
}
