//! Clean accuracy, attack success rate and cross-model transfer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::trigger::{apply_trigger, TriggerAssignment, TriggerRegion, TriggerSpec};

fn check_shape(net: &Network, data: &Dataset) -> Result<()> {
    if net.input_shape() != data.shape() {
        return Err(Error::ShapeMismatch {
            expected: net.input_shape().to_string(),
            actual: data.shape().to_string(),
        });
    }
    Ok(())
}

pub fn clean_accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_shape(net, data)?;
    let correct = data
        .images()
        .par_iter()
        .zip(data.labels())
        .map(|(img, &l)| net.predict(img).map(|p| usize::from(p.label == l)))
        .sum::<Result<usize>>()?;
    Ok(correct as f64 / data.len() as f64)
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn ser_round4<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round4(*x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub model_id: String,
    /// Model the trigger was synthesized on, for transferred reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_model_id: Option<String>,
    pub trigger: TriggerSpec,
    pub target: usize,
    #[serde(serialize_with = "ser_round4")]
    pub asr_all: f64,
    #[serde(serialize_with = "ser_round4")]
    pub asr_excluding_target_class: f64,
    pub evaluated_count: usize,
    pub successes: usize,
    /// Images whose ground truth differs from the target.
    pub non_target_count: usize,
    pub non_target_successes: usize,
}

impl AttackReport {
    pub fn with_model_id(mut self, id: impl Into<String>) -> Self {
        self.model_id = id.into();
        self
    }

    /// Unrounded `successes / evaluated_count`.
    pub fn asr_all_exact(&self) -> f64 {
        self.successes as f64 / self.evaluated_count as f64
    }

    pub fn asr_excluding_target_exact(&self) -> f64 {
        self.non_target_successes as f64 / self.non_target_count as f64
    }
}

/// Fraction of `data` classified as `target` after the trigger is placed.
pub fn attack_success_rate(
    net: &Network,
    data: &Dataset,
    region: &TriggerRegion,
    assignment: &TriggerAssignment,
    target: usize,
) -> Result<AttackReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_shape(net, data)?;
    region.check_within(data.shape())?;
    if target >= net.label_count() {
        return Err(Error::Config(format!(
            "target {target} out of range for {} labels",
            net.label_count()
        )));
    }
    let (successes, non_target_count, non_target_successes) = data
        .images()
        .par_iter()
        .zip(data.labels())
        .map(|(img, &label)| -> Result<(usize, usize, usize)> {
            let hit = net.predict(&apply_trigger(img, region, assignment)?)?.label == target;
            let other = label != target;
            Ok((
                usize::from(hit),
                usize::from(other),
                usize::from(hit && other),
            ))
        })
        .try_reduce(|| (0, 0, 0), |a, b| Ok((a.0 + b.0, a.1 + b.1, a.2 + b.2)))?;
    if non_target_count == 0 {
        return Err(Error::EmptyDataset);
    }
    let evaluated_count = data.len();
    Ok(AttackReport {
        model_id: "model".into(),
        source_model_id: None,
        trigger: TriggerSpec::new(region, assignment),
        target,
        asr_all: round4(successes as f64 / evaluated_count as f64),
        asr_excluding_target_class: round4(non_target_successes as f64 / non_target_count as f64),
        evaluated_count,
        successes,
        non_target_count,
        non_target_successes,
    })
}

/// Replays the trigger of `source` on another network.
pub fn transfer_evaluate(
    source: &AttackReport,
    target_net: &Network,
    target_model_id: &str,
    data: &Dataset,
) -> Result<AttackReport> {
    let (region, assignment) = source.trigger.resolve(target_net.input_shape())?;
    let mut report = attack_success_rate(target_net, data, &region, &assignment, source.target)?;
    report.model_id = target_model_id.into();
    report.source_model_id = Some(source.model_id.clone());
    Ok(report)
}
