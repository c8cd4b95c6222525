//! Offline N-1 study: maximum entering power, per-contingency area angles
//! and the warning/emergency thresholds.
//!
//! The sweep runs in two passes.
//!
//! 1. For every candidate outage, scale the transfer pattern until the first
//!    internal branch hits its limit and record the entering power `P_mod^i`.
//! 2. Take the worst (smallest) `P_mod^n`, place the system at that limiting
//!    condition, then outage each candidate again and read its area angle
//!    with the pre-contingency weights.
//!
//! Rows are ranked by descending `P_mod`. The warning threshold is the angle
//! at the first point where the spread of three consecutive powers reaches
//! `τ`; the emergency threshold is the angle of the last row.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::area::{Area, AreaError, BoundaryWeights};
use crate::netmodel::{BranchId, BusId, InjectionVector, NetworkError, NetworkModel, Outage};

/// Default system MVA base; `τ` and all per-unit powers refer to it.
pub const DEFAULT_MVA_BASE: f64 = 100.0;
/// Default σ threshold for the warning rule, per unit.
pub const DEFAULT_TAU: f64 = 0.5;
/// Flow sensitivities below this are treated as zero.
const SENSITIVITY_EPS: f64 = 1e-12;
/// Powers closer than this are ranked as ties (then by id).
const RANK_RESOLUTION: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Area(#[from] AreaError),
    #[error("transfer direction sums to {0}, expected 0")]
    UnbalancedDirection(f64),
    #[error("transfer direction is zero")]
    ZeroDirection,
    #[error("no limited internal branch constrains the transfer")]
    NoBindingConstraint,
    #[error("candidate set is empty")]
    EmptyCandidateSet,
    #[error("candidate `{id}` rejected: {reason}")]
    InvalidCandidate { id: BranchId, reason: &'static str },
    #[error("no non-islanding contingency results")]
    EmptyResults,
    #[error("warning rule needs at least 3 non-islanding results, got {0}")]
    TooFewContingencies(usize),
    #[error("tau must be positive, got {0}")]
    InvalidTau(f64),
    #[error("failed to read pattern: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse pattern: {0}")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T, E = StudyError> = std::result::Result<T, E>;

/// Pattern file: bus id → per-unit value for both vectors.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PatternFile {
    pub base: BTreeMap<BusId, f64>,
    pub direction: BTreeMap<BusId, f64>,
}

/// Base injections plus the unit direction along which transfer grows.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferPattern {
    pub base: InjectionVector,
    pub direction: InjectionVector,
}

impl TransferPattern {
    pub fn new(base: InjectionVector, direction: InjectionVector) -> Result<Self> {
        let sum = direction.imbalance();
        if sum.abs() > 1e-6 {
            return Err(StudyError::UnbalancedDirection(sum));
        }
        if direction.values().iter().all(|&v| v == 0.0) {
            return Err(StudyError::ZeroDirection);
        }
        Ok(Self { base, direction })
    }

    pub fn from_file(model: &NetworkModel, file: &PatternFile) -> Result<Self> {
        let base = model.injections(file.base.iter().map(|(k, v)| (k.as_str(), *v)))?;
        let direction = model.injections(file.direction.iter().map(|(k, v)| (k.as_str(), *v)))?;
        Self::new(base, direction)
    }

    pub fn load(model: &NetworkModel, path: impl AsRef<Path>) -> Result<Self> {
        let file: PatternFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_file(model, &file)
    }

    /// Injections at scale `λ`.
    pub fn at(&self, lambda: f64) -> InjectionVector {
        self.base.add_scaled(&self.direction, lambda)
    }
}

/// Outcome of one maximum-transfer search.
#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    /// Scale applied to the direction vector at the limit.
    pub lambda: f64,
    /// Entering power at the limit, per unit.
    pub p_mod: f64,
    /// Entering power of the base injections.
    pub p_base: f64,
    /// Branch that binds first.
    pub binding: usize,
}

/// Largest `λ ≥ 0` keeping every limited internal branch within its limit
/// under `base + λ·direction`, and the entering power there.
pub fn max_transfer(model: &NetworkModel, area: &Area, pattern: &TransferPattern, outage: &Outage) -> Result<Transfer> {
    let solver = model.factor(outage)?;
    let f0 = model.line_flows(&solver.solve(&pattern.base)?, outage);
    let df = model.line_flows(&solver.solve(&pattern.direction)?, outage);

    let mut best: Option<(f64, usize)> = None;
    for &k in area.internal_branches() {
        let (Some(limit), Some(f), Some(d)) = (model.branches()[k].flow_limit, f0[k], df[k]) else {
            continue;
        };
        let lambda = if f.abs() >= limit {
            0.0
        } else if d.abs() < SENSITIVITY_EPS {
            continue;
        } else if d > 0.0 {
            (limit - f) / d
        } else {
            (limit + f) / -d
        };
        if best.is_none_or(|(l, _)| lambda < l) {
            best = Some((lambda, k));
        }
    }
    let (lambda, binding) = best.ok_or(StudyError::NoBindingConstraint)?;
    let p_base = area.entering_power(model, &f0);
    let dp = area.entering_power(model, &df);
    Ok(Transfer {
        lambda,
        p_mod: p_base + lambda * dp,
        p_base,
        binding,
    })
}

/// Row label: the intact case or a single branch outage.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ContingencyId {
    Base,
    Branch(BranchId),
}

impl ContingencyId {
    pub fn is_base(&self) -> bool {
        matches!(self, Self::Base)
    }
}

impl fmt::Display for ContingencyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Base => f.write_str("base"),
            Self::Branch(id) => write!(f, "{id}"),
        }
    }
}

impl FromStr for ContingencyId {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(if s == "base" {
            Self::Base
        } else {
            Self::Branch(BranchId::from(s))
        })
    }
}

impl Serialize for ContingencyId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ContingencyId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().unwrap())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyResult {
    pub contingency_id: ContingencyId,
    /// Maximum entering power, per unit. `None` for islanding rows.
    pub p_mod: Option<f64>,
    /// Area angle at the limiting condition, degrees.
    pub theta_mod: Option<f64>,
    pub islanding: bool,
}

impl ContingencyResult {
    fn ranked(&self) -> Option<(f64, f64)> {
        match (self.islanding, &self.contingency_id, self.p_mod, self.theta_mod) {
            (false, ContingencyId::Branch(_), Some(p), Some(t)) => Some((p, t)),
            _ => None,
        }
    }
}

/// Output of [`contingency_sweep`].
#[derive(Debug, Clone)]
pub struct Sweep {
    /// Base row first among ties, ranked by descending `p_mod`; islanding
    /// rows last.
    pub results: Vec<ContingencyResult>,
    /// Pre-contingency weights used for every angle in the sweep.
    pub weights: BoundaryWeights,
    /// Scale of the limiting condition used in pass 2.
    pub limiting_lambda: f64,
    /// Number of maximum-transfer searches performed.
    pub max_transfer_evaluations: usize,
}

impl Sweep {
    /// `(p_mod, theta_mod)` of the non-islanding contingency rows, in rank
    /// order.
    pub fn ranked(&self) -> Vec<(f64, f64)> {
        ranked_pairs(&self.results)
    }

    /// Model-frame thresholds. With fewer than three ranked rows the
    /// warning rule cannot run and the warning takes the emergency value.
    pub fn thresholds(&self, tau: f64) -> Result<ModelThresholds> {
        let emergency = emergency_threshold(&self.results)?;
        let warning = match warning_threshold(&self.results, tau) {
            Err(StudyError::TooFewContingencies(_)) => emergency,
            other => other?,
        };
        Ok(ModelThresholds { warning, emergency })
    }
}

fn ranked_pairs(results: &[ContingencyResult]) -> Vec<(f64, f64)> {
    results.iter().filter_map(ContingencyResult::ranked).collect()
}

/// Internal, non-equivalenced branches not already out in `change`.
pub fn default_candidates(model: &NetworkModel, area: &Area, change: &Outage) -> Vec<BranchId> {
    area.internal_branches()
        .iter()
        .filter(|&&k| !change.contains(k) && !model.branches()[k].is_equivalenced)
        .map(|&k| model.branches()[k].id.clone())
        .collect()
}

pub(crate) fn resolve_candidates(
    model: &NetworkModel,
    area: &Area,
    candidates: &[BranchId],
    change: &Outage,
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(StudyError::EmptyCandidateSet);
    }
    let mut out = Vec::with_capacity(candidates.len());
    for id in candidates {
        let k = model.branch_index(id.as_str())?;
        let reason = if !area.is_internal(k) {
            Some("not an internal branch of the area")
        } else if model.branches()[k].is_equivalenced {
            Some("branch is equivalenced")
        } else if change.contains(k) {
            Some("branch is already out of service")
        } else if out.contains(&k) {
            Some("listed twice")
        } else {
            None
        };
        if let Some(reason) = reason {
            return Err(StudyError::InvalidCandidate { id: id.clone(), reason });
        }
        out.push(k);
    }
    Ok(out)
}

/// Counts maximum-transfer searches so callers can report the work done.
#[derive(Default)]
pub(crate) struct TransferCounter(AtomicUsize);

impl TransferCounter {
    pub(crate) fn eval(
        &self,
        model: &NetworkModel,
        area: &Area,
        pattern: &TransferPattern,
        outage: &Outage,
    ) -> Result<Transfer> {
        self.0.fetch_add(1, AtomicOrdering::Relaxed);
        max_transfer(model, area, pattern, outage)
    }

    pub(crate) fn count(&self) -> usize {
        self.0.load(AtomicOrdering::Relaxed)
    }
}

/// Two-pass N-1 sweep over `candidates` with `change` already applied.
pub fn contingency_sweep(
    model: &NetworkModel,
    area: &Area,
    pattern: &TransferPattern,
    candidates: &[BranchId],
    change: &Outage,
) -> Result<Sweep> {
    let candidates = resolve_candidates(model, area, candidates, change)?;
    if !model.is_connected(change) {
        return Err(NetworkError::IslandedNetwork {
            components: model.islanding(change).components,
        }
        .into());
    }
    let weights = area.weights(model, change)?;
    let counter = TransferCounter::default();
    let base = counter.eval(model, area, pattern, change)?;

    // pass 1
    let pass1: Vec<(usize, Option<Transfer>)> = candidates
        .par_iter()
        .map(|&k| {
            let outage = change.with(k);
            if !model.is_connected(&outage) {
                return Ok((k, None));
            }
            counter.eval(model, area, pattern, &outage).map(|t| (k, Some(t)))
        })
        .collect::<Result<_>>()?;

    let limiting_lambda = pass1
        .iter()
        .filter_map(|(k, t)| t.as_ref().map(|t| (*k, t)))
        .min_by(|a, b| {
            rank_key(a.1.p_mod)
                .total_cmp(&rank_key(b.1.p_mod))
                .then_with(|| model.branches()[b.0].id.cmp(&model.branches()[a.0].id))
        })
        .map_or(base.lambda, |(_, t)| t.lambda);
    let p_new = pattern.at(limiting_lambda);

    // pass 2
    let angle = |outage: &Outage| -> Result<f64> {
        let th = model.solve_dc(&p_new, outage)?;
        Ok(area.angle_of(&weights, &th)?)
    };
    let mut results: Vec<ContingencyResult> = pass1
        .par_iter()
        .map(|(k, t)| {
            let id = ContingencyId::Branch(model.branches()[*k].id.clone());
            Ok(match t {
                Some(t) => ContingencyResult {
                    contingency_id: id,
                    p_mod: Some(t.p_mod),
                    theta_mod: Some(angle(&change.with(*k))?),
                    islanding: false,
                },
                None => ContingencyResult {
                    contingency_id: id,
                    p_mod: None,
                    theta_mod: None,
                    islanding: true,
                },
            })
        })
        .collect::<Result<_>>()?;
    results.push(ContingencyResult {
        contingency_id: ContingencyId::Base,
        p_mod: Some(base.p_mod),
        theta_mod: Some(angle(change)?),
        islanding: false,
    });
    results.sort_by(rank_order);

    Ok(Sweep {
        results,
        weights,
        limiting_lambda,
        max_transfer_evaluations: counter.count(),
    })
}

fn rank_key(p: f64) -> f64 {
    (p / RANK_RESOLUTION).round()
}

fn rank_order(a: &ContingencyResult, b: &ContingencyResult) -> Ordering {
    match (a.p_mod, b.p_mod) {
        (Some(pa), Some(pb)) => rank_key(pb).total_cmp(&rank_key(pa)),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
    .then_with(|| a.contingency_id.cmp(&b.contingency_id))
}

/// Sample standard deviation (divisor n−1).
pub fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// 1-based index `k` of the first window `[P^{k-2}, P^{k-1}, P^k]` whose
/// sample standard deviation reaches `tau`.
pub fn select_warning_index(p_mod: &[f64], tau: f64) -> Option<usize> {
    (3..=p_mod.len()).find(|&k| sample_std(&p_mod[k - 3..k]) >= tau)
}

/// Warning angle of a ranked result list; falls back to the emergency angle
/// when no window qualifies, and never exceeds it.
pub fn warning_threshold(results: &[ContingencyResult], tau: f64) -> Result<f64> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(StudyError::InvalidTau(tau));
    }
    let ranked = ranked_pairs(results);
    if ranked.len() < 3 {
        return Err(StudyError::TooFewContingencies(ranked.len()));
    }
    let emergency = ranked[ranked.len() - 1].1;
    let p: Vec<f64> = ranked.iter().map(|r| r.0).collect();
    let warning = select_warning_index(&p, tau).map_or(emergency, |k| ranked[k - 1].1);
    Ok(warning.min(emergency))
}

/// Angle of the most severe (smallest `p_mod`) contingency.
pub fn emergency_threshold(results: &[ContingencyResult]) -> Result<f64> {
    ranked_pairs(results)
        .last()
        .map(|r| r.1)
        .ok_or(StudyError::EmptyResults)
}

/// Thresholds in the model frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelThresholds {
    pub warning: f64,
    pub emergency: f64,
}

/// Thresholds in both frames, degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub warning_model: f64,
    pub emergency_model: f64,
    pub delta_com: f64,
    pub warning_ope: f64,
    pub emergency_ope: f64,
}

impl ThresholdSet {
    pub fn with_delta(model: ModelThresholds, delta_com: f64) -> Self {
        Self {
            warning_model: model.warning,
            emergency_model: model.emergency,
            delta_com,
            warning_ope: model.warning + delta_com,
            emergency_ope: model.emergency + delta_com,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Shifts model thresholds by `θ_ope − θ_mod` taken in the normal state.
pub fn compensate_thresholds(model: ModelThresholds, theta_mod_normal: f64, theta_ope_normal: f64) -> ThresholdSet {
    ThresholdSet::with_delta(model, theta_ope_normal - theta_mod_normal)
}
