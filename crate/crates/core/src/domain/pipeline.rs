//! Pipeline DAGs: which models feed which, the end-to-end deadline, and the
//! device whose camera feeds the pipeline.
//!
//! Pipelines are out-trees: one source model, every other model has exactly
//! one upstream. That matches how vision pipelines are composed (a detector
//! fanning out into per-object downstream models); merge nodes are rejected
//! at validation time rather than half-supported.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DeviceId, ModelId, PipelineId, ProfileSet};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PipelineSpec {
    pub pipeline_id: PipelineId,
    /// Models in declaration order. The first entry must be the source.
    pub models: Vec<ModelId>,
    /// Directed `(upstream, downstream)` pairs.
    pub edges: Vec<(ModelId, ModelId)>,
    /// End-to-end deadline for one query, milliseconds.
    pub slo_ms: f64,
    /// Device whose sensor produces this pipeline's input stream.
    pub source_device: DeviceId,
}

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("pipeline {pipeline_id}: {message}")]
    Invalid {
        pipeline_id: String,
        message: String,
    },
}

impl PipelineSpec {
    fn invalid(&self, message: impl Into<String>) -> PipelineError {
        PipelineError::Invalid {
            pipeline_id: self.pipeline_id.clone(),
            message: message.into(),
        }
    }

    /// The model queries enter through.
    pub fn source(&self) -> &ModelId {
        &self.models[0]
    }

    /// Upstream of `model`, or `None` for the source.
    pub fn parent(&self, model: &str) -> Option<&ModelId> {
        self.edges.iter().find(|(_, to)| to == model).map(|(from, _)| from)
    }

    /// Downstreams of `model`, in edge declaration order.
    pub fn children(&self, model: &str) -> Vec<&ModelId> {
        self.edges
            .iter()
            .filter(|(from, _)| from == model)
            .map(|(_, to)| to)
            .collect()
    }

    /// True if `model` has no downstream; its outputs go to the sink.
    pub fn is_leaf(&self, model: &str) -> bool {
        self.children(model).is_empty()
    }

    /// Models in topological order: a preorder walk from the source with
    /// children visited in edge declaration order. Deterministic.
    pub fn topo_order(&self) -> Vec<ModelId> {
        let mut order = Vec::with_capacity(self.models.len());
        let mut stack = vec![self.source().clone()];
        while let Some(m) = stack.pop() {
            for child in self.children(&m).into_iter().rev() {
                stack.push(child.clone());
            }
            order.push(m);
        }
        order
    }

    /// Product of the fanouts of `model`'s strict ancestors: how many
    /// queries arrive at `model` for every query entering the pipeline.
    pub fn demand_scale(&self, model: &str, profiles: &ProfileSet) -> f64 {
        let mut scale = 1.0;
        let mut cur = model;
        while let Some(parent) = self.parent(cur) {
            scale *= profiles.get(parent).map(|p| p.fanout).unwrap_or(1.0);
            cur = parent;
        }
        scale
    }

    /// Structural validation: non-empty, unique model ids, edges reference
    /// declared models, the first model is the unique source, every other
    /// model has exactly one upstream and is reachable (no cycles, no merge
    /// nodes), the SLO is positive, and every model has a profile.
    pub fn validate(&self, profiles: &ProfileSet) -> Result<(), PipelineError> {
        if self.models.is_empty() {
            return Err(self.invalid("pipeline has no models"));
        }
        if !(self.slo_ms > 0.0) {
            return Err(self.invalid(format!("slo_ms must be positive, got {}", self.slo_ms)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.models {
            if !seen.insert(m) {
                return Err(self.invalid(format!("duplicate model {m}")));
            }
            if profiles.get(m).is_none() {
                return Err(self.invalid(format!("model {m} has no profile")));
            }
        }
        for (from, to) in &self.edges {
            if !seen.contains(from) {
                return Err(self.invalid(format!("edge references undeclared model {from}")));
            }
            if !seen.contains(to) {
                return Err(self.invalid(format!("edge references undeclared model {to}")));
            }
            if from == to {
                return Err(self.invalid(format!("self-edge on {from}")));
            }
        }
        for m in &self.models {
            let upstreams = self.edges.iter().filter(|(_, to)| to == m).count();
            if m == self.source() {
                if upstreams != 0 {
                    return Err(self.invalid(format!("source model {m} has an upstream")));
                }
            } else if upstreams == 0 {
                return Err(self.invalid(format!("model {m} is unreachable from the source")));
            } else if upstreams > 1 {
                return Err(self.invalid(format!("model {m} has {upstreams} upstreams; pipelines must be trees")));
            }
        }
        // Single upstream per node plus |edges| == |models| - 1 implies a
        // tree iff everything is reachable from the source.
        if self.edges.len() != self.models.len() - 1 {
            return Err(self.invalid("edge count must be exactly models - 1"));
        }
        let order = self.topo_order();
        if order.len() != self.models.len() {
            return Err(self.invalid("not all models reachable from the source"));
        }
        Ok(())
    }
}
