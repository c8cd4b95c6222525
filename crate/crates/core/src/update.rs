//! Threshold refresh after a significant topology change.
//!
//! The original method re-runs the full N-1 sweep on the changed network.
//! The fast method computes the entering power limit once, then for each
//! candidate outage only re-derives `b_mod^k` and applies Ohm's law at the
//! area level: `θ^k ≈ P_mod / b_mod^k`.

use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::area::{Area, AreaError, BoundaryWeights};
use crate::netmodel::{BranchId, NetworkError, NetworkModel, Outage};
use crate::study::{
    contingency_sweep, resolve_candidates, ModelThresholds, Result, StudyError, TransferCounter, TransferPattern,
};

/// Branches taken out of service (maintenance and the like).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyChange {
    #[serde(alias = "removed")]
    pub removed_branches: Vec<BranchId>,
}

impl TopologyChange {
    pub fn new<I: IntoIterator<Item = S>, S: Into<BranchId>>(ids: I) -> Self {
        Self {
            removed_branches: ids.into_iter().map(Into::into).collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn outage(&self, model: &NetworkModel) -> Result<Outage> {
        Ok(model.outage(self.removed_branches.iter().map(|b| b.as_str()))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMethod {
    Fast,
    Original,
}

impl FromStr for UpdateMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fast" => Ok(Self::Fast),
            "original" => Ok(Self::Original),
            other => Err(format!("unknown method `{other}` (expected fast or original)")),
        }
    }
}

/// Per-candidate angle used by an update method, degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAngle {
    pub contingency_id: BranchId,
    /// `None` when the candidate islands the network or the area.
    pub theta_mod: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateResult {
    pub thresholds: ModelThresholds,
    pub angles: Vec<CandidateAngle>,
    pub max_transfer_evaluations: usize,
}

/// Weights and `b_mod` of the area with `outage` applied.
pub fn updated_weights(model: &NetworkModel, area: &Area, outage: &Outage) -> Result<BoundaryWeights, AreaError> {
    area.weights(model, outage)
}

/// Ohm's-law approximation: one transfer limit, one Kron reduction per
/// candidate.
pub fn fast_thresholds(
    model: &NetworkModel,
    area: &Area,
    pattern: &TransferPattern,
    change: &TopologyChange,
    candidates: &[BranchId],
) -> Result<UpdateResult> {
    let change = change.outage(model)?;
    let ks = resolve_candidates(model, area, candidates, &change)?;
    if !model.is_connected(&change) {
        return Err(NetworkError::IslandedNetwork {
            components: model.islanding(&change).components,
        }
        .into());
    }
    // the changed area itself must still carry a bulk susceptance
    area.weights(model, &change)?;

    let counter = TransferCounter::default();
    let transfer = counter.eval(model, area, pattern, &change)?;

    let angles: Vec<CandidateAngle> = ks
        .par_iter()
        .map(|&k| {
            let outage = change.with(k);
            let theta_mod = if model.is_connected(&outage) {
                match area.weights(model, &outage) {
                    Ok(w) => Some((transfer.p_mod / w.b_mod).to_degrees()),
                    Err(AreaError::SingularInterior | AreaError::DegenerateArea(_)) => None,
                    Err(e) => return Err(StudyError::from(e)),
                }
            } else {
                None
            };
            Ok(CandidateAngle {
                contingency_id: model.branches()[k].id.clone(),
                theta_mod,
            })
        })
        .collect::<Result<_>>()?;

    let (lo, hi) = angles
        .iter()
        .filter_map(|a| a.theta_mod)
        .fold(None, |acc: Option<(f64, f64)>, t| {
            Some(acc.map_or((t, t), |(lo, hi)| (lo.min(t), hi.max(t))))
        })
        .ok_or(StudyError::EmptyResults)?;

    Ok(UpdateResult {
        thresholds: ModelThresholds {
            warning: (hi + lo) / 2.0,
            emergency: hi,
        },
        angles,
        max_transfer_evaluations: counter.count(),
    })
}

/// Full N-1 sweep on the changed topology.
pub fn original_thresholds(
    model: &NetworkModel,
    area: &Area,
    pattern: &TransferPattern,
    change: &TopologyChange,
    candidates: &[BranchId],
    tau: f64,
) -> Result<UpdateResult> {
    let change = change.outage(model)?;
    let sweep = contingency_sweep(model, area, pattern, candidates, &change)?;
    let thresholds = sweep.thresholds(tau)?;
    let angles = sweep
        .results
        .iter()
        .filter_map(|r| match &r.contingency_id {
            crate::study::ContingencyId::Branch(id) => Some(CandidateAngle {
                contingency_id: id.clone(),
                theta_mod: r.theta_mod,
            }),
            crate::study::ContingencyId::Base => None,
        })
        .collect();
    Ok(UpdateResult {
        thresholds,
        angles,
        max_transfer_evaluations: sweep.max_transfer_evaluations,
    })
}
