//! Training losses: cross-entropy, teacher/student divergence and their β mix.

use serde::{Deserialize, Serialize};

use crate::error::{MindError, Result};
use crate::tensor::{DistillKind, Graph, NodeId, Scalar, Tensor};

/// How the distillation term compares teacher and student.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSettings {
    #[serde(default)]
    pub kind: DistillKind,
    /// Softmax temperature inside the divergence.
    #[serde(default = "one")]
    pub temperature: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for DistillSettings {
    fn default() -> Self {
        DistillSettings {
            kind: DistillKind::SymmetricKl,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub ce_part: f64,
    pub sd_part: f64,
}

pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    g.cross_entropy(logits, labels)
}

/// Divergence between teacher and student logits. No gradient reaches the teacher.
pub fn distill_loss<T: Scalar>(g: &mut Graph<T>, teacher: NodeId, student: NodeId, s: &DistillSettings) -> Result<NodeId> {
    if !(s.temperature > 0.0) {
        return Err(MindError::Contract(format!("distillation temperature must be positive, got {}", s.temperature)));
    }
    g.distill(student, teacher, s.kind, T::lit(s.temperature))
}

/// `ce + β·sd`. Without a teacher the divergence term is absent (`sd_part = 0`).
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    student: NodeId,
    labels: &[usize],
    teacher: Option<NodeId>,
    beta: f64,
    s: &DistillSettings,
) -> Result<(NodeId, LossValue)> {
    if !(beta >= 0.0) {
        return Err(MindError::Contract(format!("beta must be ≥ 0, got {beta}")));
    }
    let ce = cross_entropy(g, student, labels)?;
    let ce_part = g.value(ce).data()[0].to_f64().unwrap();
    let Some(teacher) = teacher else {
        return Ok((
            ce,
            LossValue {
                total: ce_part,
                ce_part,
                sd_part: 0.0,
            },
        ));
    };
    let sd = distill_loss(g, teacher, student, s)?;
    let sd_part = g.value(sd).data()[0].to_f64().unwrap();
    let scaled = g.scale(sd, T::lit(beta));
    let total = g.add(ce, scaled)?;
    let total_v = g.value(total).data()[0].to_f64().unwrap();
    Ok((
        total,
        LossValue {
            total: total_v,
            ce_part,
            sd_part,
        },
    ))
}

/// Detached cross-entropy of a logits batch.
pub fn cross_entropy_value<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = g.cross_entropy(z, labels)?;
    Ok(g.value(l).data()[0])
}

/// Detached divergence between two logits batches.
pub fn distill_value<T: Scalar>(teacher: &Tensor<T>, student: &Tensor<T>, s: &DistillSettings) -> Result<T> {
    let mut g = Graph::new();
    let t = g.constant(teacher.clone());
    let st = g.constant(student.clone());
    let l = distill_loss(&mut g, t, st, s)?;
    Ok(g.value(l).data()[0])
}
