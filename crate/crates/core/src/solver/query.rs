use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::model::{margin_of, AffineNetwork, AffineStage, Image};
use crate::trigger::TriggerRegion;

pub const DEFAULT_MAX_FREE_DIMS: usize = 48;

/// An affine network over the trigger's free variables only.
///
/// The first stage has been rewritten so that each row carries coefficients
/// on the `d` trigger values and a constant that absorbs every other
/// (concrete) pixel of the base image. Later stages are shared with the
/// source [`AffineNetwork`].
#[derive(Debug, Clone)]
pub struct ReducedQuery {
    net: Arc<AffineNetwork>,
    head: AffineStage,
    target: usize,
    delta: f64,
}

impl ReducedQuery {
    /// Builds a query directly from stages over `d` variables; the first
    /// stage's columns are the free variables.
    pub fn from_stages(stages: Vec<AffineStage>, target: usize, delta: f64) -> Result<Self> {
        let mut stages = stages.into_iter();
        let head = stages
            .next()
            .ok_or_else(|| Error::Config("query needs at least one stage".into()))?;
        let tail: Vec<AffineStage> = std::iter::once(AffineStage::identity(head.in_dim(), false))
            .chain(stages)
            .collect();
        let net = AffineNetwork {
            input_dim: head.in_dim(),
            stages: tail,
        };
        let q = Self {
            net: Arc::new(net),
            head,
            target,
            delta,
        };
        q.validate()?;
        Ok(q)
    }

    fn validate(&self) -> Result<()> {
        let stages: Vec<&AffineStage> = self.stages().collect();
        for w in stages.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::Config("query stages do not chain".into()));
            }
        }
        let last = stages.last().unwrap();
        if last.relu_after {
            return Err(Error::Config("last query stage must not clamp logits".into()));
        }
        if self.target >= last.out_dim() || last.out_dim() < 2 {
            return Err(Error::Config(format!(
                "target {} out of range for {} logits",
                self.target,
                last.out_dim()
            )));
        }
        Ok(())
    }

    /// Number of free variables `d`.
    pub fn dim(&self) -> usize {
        self.head.in_dim()
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    #[cfg(test)]
    pub(crate) fn head(&self) -> &AffineStage {
        &self.head
    }

    /// All stages: the reduced head followed by the shared tail.
    pub fn stages(&self) -> impl Iterator<Item = &AffineStage> + Clone {
        std::iter::once(&self.head).chain(self.net.stages[1..].iter())
    }

    pub fn stage_count(&self) -> usize {
        self.net.stages.len()
    }

    pub fn label_count(&self) -> usize {
        self.stages().last().map_or(0, AffineStage::out_dim)
    }

    pub fn eval(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim());
        self.stages().fold(v.to_vec(), |x, s| s.apply(&x))
    }

    /// Concrete `z_target(v) - max_{j != target} z_j(v)`.
    pub fn margin(&self, v: &[f64]) -> f64 {
        margin_of(&self.eval(v), self.target)
    }
}

/// Substitutes the concrete pixels of `base` into `affine_net`, keeping the
/// `region` pixels symbolic.
pub fn embed_query(
    affine_net: &Arc<AffineNetwork>,
    base: &Image,
    region: &TriggerRegion,
    target: usize,
    delta: f64,
) -> Result<ReducedQuery> {
    embed_query_limited(affine_net, base, region, target, delta, DEFAULT_MAX_FREE_DIMS)
}

pub fn embed_query_limited(
    affine_net: &Arc<AffineNetwork>,
    base: &Image,
    region: &TriggerRegion,
    target: usize,
    delta: f64,
    max_free_dims: usize,
) -> Result<ReducedQuery> {
    if affine_net.input_dim != base.pixels().len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} inputs", affine_net.input_dim),
            actual: format!("{} pixels", base.pixels().len()),
        });
    }
    region.check_within(base.shape())?;
    let d = region.dim();
    if d > max_free_dims {
        return Err(Error::Config(format!(
            "trigger has {d} free values, above the limit of {max_free_dims}"
        )));
    }
    if target >= affine_net.output_dim() {
        return Err(Error::Config(format!(
            "target {target} out of range for {} labels",
            affine_net.output_dim()
        )));
    }
    let first = &affine_net.stages[0];
    let free = region.pixel_indices(base.shape());
    let mut fixed = base.pixels().to_vec();
    for &i in &free {
        fixed[i] = 0.0;
    }
    let mut matrix = Matrix::zeros(first.out_dim(), d);
    let mut bias = Vec::with_capacity(first.out_dim());
    for r in 0..first.out_dim() {
        let row = first.matrix.row(r);
        bias.push(first.bias[r] + dot(row, &fixed));
        let dst = matrix.row_mut(r);
        for (k, &i) in free.iter().enumerate() {
            dst[k] = row[i];
        }
    }
    Ok(ReducedQuery {
        net: Arc::clone(affine_net),
        head: AffineStage {
            matrix,
            bias,
            relu_after: first.relu_after,
        },
        target,
        delta,
    })
}
