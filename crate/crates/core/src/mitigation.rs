//! Load-shed allocation on the receiving boundary and its what-if effect.
//!
//! Each receiving bus takes a share proportional to `|w_j|`. The shares are
//! normalised by `Σ|w_receiving|`, which is exactly 1 for computed weights,
//! so the plan always adds up to the requested total.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::area::{Area, AreaError, BoundaryWeights};
use crate::netmodel::{BusId, InjectionVector, NetworkError, NetworkModel, Outage};
use crate::study::DEFAULT_MVA_BASE;

#[derive(Debug, Error)]
pub enum MitigationError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Area(#[from] AreaError),
    #[error("area has no receiving buses with nonzero weight")]
    NoReceivingBuses,
    #[error("total shed must be finite and non-negative, got {0}")]
    InvalidTotal(f64),
    #[error("bus `{0}` in the plan is not a receiving boundary bus")]
    NotReceiving(BusId),
    #[error("transfer direction has no positive source to back off")]
    NoSources,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusShed {
    pub bus: BusId,
    /// MW.
    pub shed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationPlan {
    /// MW.
    pub total_shed: f64,
    pub per_bus: Vec<BusShed>,
    /// Ohm's-law estimate of the area angle change, degrees.
    pub predicted_delta_theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MitigationEffect {
    pub theta_before: f64,
    pub theta_after: f64,
}

/// Splits `total_mw` across the receiving buses by weight magnitude.
pub fn allocate_load_shed(
    weights: &BoundaryWeights,
    area: &Area,
    total_mw: f64,
    mva_base: f64,
) -> Result<MitigationPlan, MitigationError> {
    if !(total_mw.is_finite() && total_mw >= 0.0) {
        return Err(MitigationError::InvalidTotal(total_mw));
    }
    let receiving: Vec<(&BusId, f64)> = area
        .boundary_ids()
        .iter()
        .zip(area.sending_mask())
        .zip(&weights.weights)
        .filter(|((_, &s), _)| !s)
        .map(|((id, _), &w)| (id, w.abs()))
        .collect();
    let sum: f64 = receiving.iter().map(|r| r.1).sum();
    if receiving.is_empty() || sum.is_nan() || sum <= 0.0 {
        return Err(MitigationError::NoReceivingBuses);
    }
    let mut per_bus: Vec<BusShed> = receiving
        .iter()
        .map(|(id, w)| BusShed {
            bus: (*id).clone(),
            shed: total_mw * w / sum,
        })
        .collect();
    // put the rounding residue on the largest share so the sum is exact
    let residue = total_mw - per_bus.iter().map(|b| b.shed).sum::<f64>();
    if let Some(big) = per_bus.iter_mut().max_by(|a, b| a.shed.total_cmp(&b.shed)) {
        big.shed += residue;
    }
    Ok(MitigationPlan {
        total_shed: total_mw,
        per_bus,
        predicted_delta_theta: (-(total_mw / mva_base) / weights.b_mod).to_degrees(),
    })
}

/// [`allocate_load_shed`] on the default 100 MVA base.
pub fn allocate(weights: &BoundaryWeights, area: &Area, total_mw: f64) -> Result<MitigationPlan, MitigationError> {
    allocate_load_shed(weights, area, total_mw, DEFAULT_MVA_BASE)
}

/// Injections after the plan: each shed raises its bus injection, and the
/// positive entries of `direction` back off pro rata by the same total.
pub fn apply_plan(
    model: &NetworkModel,
    area: &Area,
    current: &InjectionVector,
    direction: &InjectionVector,
    plan: &MitigationPlan,
    mva_base: f64,
) -> Result<InjectionVector, MitigationError> {
    let mut after = current.clone();
    let receiving: Vec<&BusId> = area
        .boundary_ids()
        .iter()
        .zip(area.sending_mask())
        .filter(|(_, &s)| !s)
        .map(|(id, _)| id)
        .collect();
    let mut total = 0.0;
    for b in &plan.per_bus {
        if !receiving.contains(&&b.bus) {
            return Err(MitigationError::NotReceiving(b.bus.clone()));
        }
        let i = model.bus_index(b.bus.as_str())?;
        after.values_mut()[i] += b.shed / mva_base;
        total += b.shed / mva_base;
    }
    if total == 0.0 {
        return Ok(after);
    }
    let src: f64 = direction.values().iter().filter(|&&v| v > 0.0).sum();
    if src.is_nan() || src <= 0.0 {
        return Err(MitigationError::NoSources);
    }
    for (i, &d) in direction.values().iter().enumerate() {
        if d > 0.0 {
            after.values_mut()[i] -= total * d / src;
        }
    }
    Ok(after)
}

/// Area angle before and after the plan on the intact topology.
pub fn simulate_mitigation(
    model: &NetworkModel,
    area: &Area,
    weights: &BoundaryWeights,
    current: &InjectionVector,
    direction: &InjectionVector,
    plan: &MitigationPlan,
    mva_base: f64,
) -> Result<MitigationEffect, MitigationError> {
    simulate_with_outage(
        model,
        area,
        weights,
        current,
        direction,
        plan,
        mva_base,
        &Outage::none(model),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_with_outage(
    model: &NetworkModel,
    area: &Area,
    weights: &BoundaryWeights,
    current: &InjectionVector,
    direction: &InjectionVector,
    plan: &MitigationPlan,
    mva_base: f64,
    outage: &Outage,
) -> Result<MitigationEffect, MitigationError> {
    let solver = model.factor(outage)?;
    let before = solver.solve(current)?;
    let after = solver.solve(&apply_plan(model, area, current, direction, plan, mva_base)?)?;
    Ok(MitigationEffect {
        theta_before: area.angle_of(weights, &before)?,
        theta_after: area.angle_of(weights, &after)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::area::AreaDefinition;
    use crate::netmodel::tests::{branch, bus};
    use crate::study::tests::parallel_pair;
    use approx::assert_abs_diff_eq;

    fn published_area() -> (Area, BoundaryWeights) {
        let send = ["s1", "s2", "s3", "s4", "s5", "s6", "s7"];
        let recv = ["r1", "r2", "r3", "r4", "r5", "r6", "r7"];
        let mut buses: Vec<_> = send.iter().chain(&recv).map(|s| bus(s)).collect();
        buses.push(bus("hub"));
        let branches = send
            .iter()
            .chain(&recv)
            .map(|s| branch(&format!("{s}-hub"), s, "hub", 1.0, None))
            .collect();
        let m = NetworkModel::new(buses, branches, "hub".into()).unwrap();
        let area = Area::new(
            &m,
            AreaDefinition {
                boundary_buses: send.iter().chain(&recv).map(|s| BusId::from(*s)).collect(),
                sending: send.iter().map(|s| BusId::from(*s)).collect(),
                receiving: recv.iter().map(|s| BusId::from(*s)).collect(),
                interior_buses: vec!["hub".into()],
            },
        )
        .unwrap();
        let w = BoundaryWeights::from_raw(
            vec![
                0.1271, 0.5303, 0.2616, 0.0396, 0.0385, 0.0005, 0.0023, -0.1269, -0.0958, -0.0017, -0.1615, -0.2979,
                -0.2766, -0.0395,
            ],
            1.0,
        );
        (area, w)
    }

    #[test]
    fn published_weights_allocation() {
        let (area, w) = published_area();
        let plan = allocate(&w, &area, 1000.0).unwrap();
        let got: Vec<f64> = plan.per_bus.iter().map(|b| (b.shed * 10.0).round() / 10.0).collect();
        assert_eq!(got, vec![126.9, 95.8, 1.7, 161.5, 297.9, 276.6, 39.5]);
        let total: f64 = plan.per_bus.iter().map(|b| b.shed).sum();
        assert!((total - 1000.0).abs() <= 1e-9);
    }

    #[test]
    fn zero_and_single() {
        let (area, w) = published_area();
        let plan = allocate(&w, &area, 0.0).unwrap();
        assert!(plan.per_bus.iter().all(|b| b.shed == 0.0));
        assert_eq!(plan.predicted_delta_theta, 0.0);
        assert!(matches!(
            allocate(&w, &area, -1.0),
            Err(MitigationError::InvalidTotal(_))
        ));

        let (m, area, _) = parallel_pair(1.0, None);
        let w = area.weights(&m, &Outage::none(&m)).unwrap();
        let plan = allocate(&w, &area, 500.0).unwrap();
        assert_eq!(
            plan.per_bus,
            vec![BusShed {
                bus: "b".into(),
                shed: 500.0
            }]
        );
        // 5 p.u. over b_mod = 2
        assert_abs_diff_eq!(plan.predicted_delta_theta, (-2.5f64).to_degrees(), epsilon = 1e-12);
    }

    #[test]
    fn doubling_total_doubles_shares() {
        let (area, w) = published_area();
        let a = allocate(&w, &area, 300.0).unwrap();
        let b = allocate(&w, &area, 600.0).unwrap();
        for (x, y) in a.per_bus.iter().zip(&b.per_bus) {
            assert_abs_diff_eq!(2.0 * x.shed, y.shed, epsilon = 1e-9);
        }
    }

    /// Single line a-b with b = 1 on a cutset.
    fn cutset() -> (NetworkModel, Area, InjectionVector, InjectionVector) {
        let m = NetworkModel::new(
            vec![bus("g"), bus("a"), bus("b"), bus("l")],
            vec![
                branch("ga", "g", "a", 50.0, None),
                branch("ab", "a", "b", 1.0, None),
                branch("bl", "b", "l", 50.0, None),
            ],
            "l".into(),
        )
        .unwrap();
        let area = Area::new(
            &m,
            AreaDefinition {
                boundary_buses: vec!["a".into(), "b".into()],
                sending: vec!["a".into()],
                receiving: vec!["b".into()],
                interior_buses: vec![],
            },
        )
        .unwrap();
        let current = m.injections([("g", 1.0), ("l", -1.0)]).unwrap();
        let direction = m.injections([("g", 1.0), ("l", -1.0)]).unwrap();
        (m, area, current, direction)
    }

    #[test]
    fn halving_through_power_halves_angle() {
        let (m, area, current, direction) = cutset();
        let w = area.weights(&m, &Outage::none(&m)).unwrap();
        assert_eq!(w.b_mod, 1.0);
        let plan = allocate(&w, &area, 50.0).unwrap();
        let eff = simulate_mitigation(&m, &area, &w, &current, &direction, &plan, 100.0).unwrap();
        assert_abs_diff_eq!(eff.theta_before, 57.29577951308232, epsilon = 1e-9);
        assert_abs_diff_eq!(eff.theta_after, 28.64788975654116, epsilon = 1e-9);
        assert_abs_diff_eq!(
            eff.theta_after - eff.theta_before,
            plan.predicted_delta_theta,
            epsilon = 1e-9
        );
    }

    #[test]
    fn zero_plan_changes_nothing() {
        let (m, area, current, direction) = cutset();
        let w = area.weights(&m, &Outage::none(&m)).unwrap();
        let plan = allocate(&w, &area, 0.0).unwrap();
        let eff = simulate_mitigation(&m, &area, &w, &current, &direction, &plan, 100.0).unwrap();
        assert_eq!(eff.theta_after, eff.theta_before);
    }

    #[test]
    fn three_stage_shape() {
        // stage 1 intact, stage 2 one parallel line out, stage 3 shed
        let (m, area, pattern) = parallel_pair(1.0, None);
        let current = pattern.at(1.0);
        let w = area.weights(&m, &Outage::none(&m)).unwrap();
        let angle = |p: &InjectionVector, out: &Outage| area.angle_of(&w, &m.solve_dc(p, out).unwrap()).unwrap();
        let s1 = angle(&current, &Outage::none(&m));
        let out = m.outage(["p2"]).unwrap();
        let s2 = angle(&current, &out);
        let plan = allocate(&w, &area, 40.0).unwrap();
        let eff = simulate_with_outage(&m, &area, &w, &current, &pattern.direction, &plan, 100.0, &out).unwrap();
        assert_abs_diff_eq!(eff.theta_before, s2, epsilon = 1e-12);
        assert!(s2 > s1);
        assert!(eff.theta_after < s2);
    }

    #[test]
    fn plan_bus_must_be_receiving() {
        let (m, area, current, direction) = cutset();
        let plan = MitigationPlan {
            total_shed: 1.0,
            per_bus: vec![BusShed {
                bus: "a".into(),
                shed: 1.0,
            }],
            predicted_delta_theta: 0.0,
        };
        let w = area.weights(&m, &Outage::none(&m)).unwrap();
        assert!(matches!(
            simulate_mitigation(&m, &area, &w, &current, &direction, &plan, 100.0),
            Err(MitigationError::NotReceiving(_))
        ));
    }
}
