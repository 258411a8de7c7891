//! Decision-following metrics: a labeler-judged compliance check per
//! rollout, recall/precision/mAP over scenarios, and minADE.

use alloc::string::String;
use alloc::vec::Vec;

use crate::geometry::RoadMap;
use crate::kinematics::{AgentState, Trajectory};
use crate::labeler::{label_actions, LabelConfig, LabelError, MetaAction};
use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no scenarios")]
    Empty,
    #[error("scenario {0:?} has no samples")]
    NoSamples(String),
    #[error("scenario {id:?}: {compliant} compliance flags but {rational} rationality flags")]
    Ragged { id: String, compliant: usize, rational: usize },
    #[error("trajectory lengths differ: {found} vs {expected}")]
    LengthMismatch { found: usize, expected: usize },
    #[error("min_run must be at least 1")]
    BadMinRun,
    #[error(transparent)]
    Label(#[from] LabelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ComplianceConfig {
    /// Shortest label run that counts as a maneuver, frames.
    pub min_run: usize,
    /// Leading frames labelled for context but not judged (the warmup).
    pub skip: usize,
    pub labels: LabelConfig,
}

impl Default for ComplianceConfig {
    fn default() -> Self {
        Self {
            min_run: 5,
            skip: 0,
            labels: LabelConfig::default(),
        }
    }
}

/// A maximal run of one label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LabelRun {
    pub action: MetaAction,
    pub start: usize,
    pub len: usize,
}

pub fn label_runs(labels: &[MetaAction]) -> Vec<LabelRun> {
    let mut runs: Vec<LabelRun> = Vec::new();
    for (t, &a) in labels.iter().enumerate() {
        match runs.last_mut() {
            Some(r) if r.action == a => r.len += 1,
            _ => runs.push(LabelRun { action: a, start: t, len: 1 }),
        }
    }
    runs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Compliance {
    pub compliant: bool,
    pub rational: bool,
}

/// Judges labels already computed for one trajectory.
pub fn judge_labels(labels: &[MetaAction], target: MetaAction, cfg: &ComplianceConfig) -> Result<Compliance, MetricsError> {
    if cfg.min_run == 0 {
        return Err(MetricsError::BadMinRun);
    }
    let judged = &labels[cfg.skip.min(labels.len())..];
    let runs: Vec<LabelRun> = label_runs(judged).into_iter().filter(|r| r.len >= cfg.min_run).collect();
    let compliant = runs.iter().any(|r| r.action == target);
    let opposite = target.mirrored();
    let mut rational = opposite == target || !runs.iter().any(|r| r.action == opposite);
    if target.is_lane_change() {
        rational &= runs.iter().filter(|r| r.action.is_lane_change()).count() <= 1;
    }
    Ok(Compliance { compliant, rational })
}

/// Labels `traj` and judges it against `target`.
pub fn check_compliance(
    traj: &Trajectory,
    target: MetaAction,
    map: &RoadMap,
    cfg: &ComplianceConfig,
) -> Result<Compliance, MetricsError> {
    let labels = label_actions(traj, map, &cfg.labels)?;
    judge_labels(&labels, target, cfg)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ComplianceVerdict {
    pub scenario_id: String,
    pub target: MetaAction,
    /// One flag per sample.
    pub compliant: Vec<bool>,
    pub rational: Vec<bool>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub min_ade: Option<f64>,
}

impl ComplianceVerdict {
    pub fn from_checks(scenario_id: String, target: MetaAction, checks: &[Compliance]) -> Self {
        Self {
            scenario_id,
            target,
            compliant: checks.iter().map(|c| c.compliant).collect(),
            rational: checks.iter().map(|c| c.rational).collect(),
            min_ade: None,
        }
    }

    fn validate(&self) -> Result<(), MetricsError> {
        if self.compliant.is_empty() {
            return Err(MetricsError::NoSamples(self.scenario_id.clone()));
        }
        if self.compliant.len() != self.rational.len() {
            return Err(MetricsError::Ragged {
                id: self.scenario_id.clone(),
                compliant: self.compliant.len(),
                rational: self.rational.len(),
            });
        }
        Ok(())
    }

    pub fn all_compliant(&self) -> bool {
        self.compliant.iter().all(|&c| c)
    }

    /// `N_p / N`: samples both compliant and rational.
    pub fn precision(&self) -> f64 {
        let np = self.compliant.iter().zip(&self.rational).filter(|(c, r)| **c && **r).count();
        np as f64 / self.compliant.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassReport {
    pub target: MetaAction,
    pub scenarios: usize,
    pub recall: f64,
    pub precision: f64,
    pub map_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub scenarios: usize,
    pub recall: f64,
    pub precision: f64,
    pub map_score: f64,
    /// Mean over scenarios that carry a minADE.
    pub min_ade: Option<f64>,
    pub per_class: Vec<ClassReport>,
}

pub fn map_score(recall: f64, precision: f64) -> f64 {
    (recall + precision) / 2.0
}

fn recall_precision(verdicts: &[&ComplianceVerdict]) -> (f64, f64) {
    let n = verdicts.len() as f64;
    let recall = verdicts.iter().filter(|v| v.all_compliant()).count() as f64 / n;
    let precision = verdicts.iter().map(|v| v.precision()).sum::<f64>() / n;
    (recall, precision)
}

pub fn aggregate(verdicts: &[ComplianceVerdict]) -> Result<MetricReport, MetricsError> {
    if verdicts.is_empty() {
        return Err(MetricsError::Empty);
    }
    for v in verdicts {
        v.validate()?;
    }
    let all: Vec<&ComplianceVerdict> = verdicts.iter().collect();
    let (recall, precision) = recall_precision(&all);
    let per_class = MetaAction::ALL
        .iter()
        .filter_map(|&target| {
            let group: Vec<&ComplianceVerdict> = verdicts.iter().filter(|v| v.target == target).collect();
            if group.is_empty() {
                return None;
            }
            let (r, p) = recall_precision(&group);
            Some(ClassReport {
                target,
                scenarios: group.len(),
                recall: r,
                precision: p,
                map_score: map_score(r, p),
            })
        })
        .collect();
    let ades: Vec<f64> = verdicts.iter().filter_map(|v| v.min_ade).collect();
    let min_ade = (!ades.is_empty()).then(|| ades.iter().sum::<f64>() / ades.len() as f64);
    Ok(MetricReport {
        scenarios: verdicts.len(),
        recall,
        precision,
        map_score: map_score(recall, precision),
        min_ade,
        per_class,
    })
}

/// Mean per-frame Euclidean displacement.
pub fn ade(sample: &[AgentState], truth: &[AgentState]) -> Result<f64, MetricsError> {
    if sample.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            found: sample.len(),
            expected: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    let total: f64 = sample.iter().zip(truth).map(|(a, b)| math::hypot(a.x - b.x, a.y - b.y)).sum();
    Ok(total / truth.len() as f64)
}

pub fn min_ade(samples: &[&[AgentState]], truth: &[AgentState]) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut best = f64::INFINITY;
    for s in samples {
        best = best.min(ade(s, truth)?);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use MetaAction::*;

    fn cfg() -> ComplianceConfig {
        ComplianceConfig::default()
    }

    #[test]
    fn runs_split_on_every_change() {
        let runs = label_runs(&[KeepLane, KeepLane, TurnLeft, KeepLane]);
        assert_eq!(runs.len(), 3);
        assert_eq!(runs[1], LabelRun { action: TurnLeft, start: 2, len: 1 });
    }

    #[test]
    fn short_runs_do_not_count() {
        let mut labels = alloc::vec![KeepLane; 20];
        labels[5..9].fill(LeftLaneChange);
        assert!(!judge_labels(&labels, LeftLaneChange, &cfg()).unwrap().compliant);
        labels[9] = LeftLaneChange;
        assert!(judge_labels(&labels, LeftLaneChange, &cfg()).unwrap().compliant);
    }

    #[test]
    fn skipped_frames_are_not_judged() {
        let mut labels = alloc::vec![KeepLane; 20];
        labels[0..6].fill(TurnLeft);
        let c = ComplianceConfig { skip: 6, ..cfg() };
        assert!(!judge_labels(&labels, TurnLeft, &c).unwrap().compliant);
    }

    #[test]
    fn opposite_turn_is_irrational() {
        let mut labels = alloc::vec![KeepLane; 30];
        labels[2..10].fill(TurnLeft);
        labels[15..25].fill(TurnRight);
        let v = judge_labels(&labels, TurnLeft, &cfg()).unwrap();
        assert!(v.compliant && !v.rational);
        let v = judge_labels(&labels, KeepLane, &cfg()).unwrap();
        assert!(v.compliant && v.rational);
    }
}
