//! Monitored areas, boundary weights and the area angle.
//!
//! ```text
//!   sending side                      receiving side
//!   SB1 ──┐                          ┌── RB1
//!         ├── interior buses ... ────┤
//!   SB2 ──┘                          └── RB2
//! ```
//!
//! The area subgraph (internal branches only) is Kron-reduced onto the
//! boundary buses. With `σ` the 0/1 indicator of sending buses,
//! `b_mod = σ B_eq σᵀ` and `w = σ B_eq / b_mod`; the area angle is `w · θ`.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{AngleSolution, BusId, NetworkError, NetworkModel, Outage};

/// Weight sums must land within this distance of ±1.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;
/// Smallest bulk susceptance accepted as a real area.
pub const MIN_B_MOD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AreaError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("bus `{0}` appears more than once in the area definition")]
    DuplicateBus(BusId),
    #[error("boundary bus `{0}` is on neither or both of the sending and receiving sides")]
    SideMismatch(BusId),
    #[error("bus `{0}` is on a side list but not on the boundary")]
    NotOnBoundary(BusId),
    #[error("area needs at least one sending and one receiving bus")]
    MissingSide,
    #[error("interior block of the area susceptance matrix is singular")]
    SingularInterior,
    #[error("bulk susceptance {0} is not positive; area is degenerate")]
    DegenerateArea(f64),
    #[error("expected {expected} boundary values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("failed to read area: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse area: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Area file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaDefinition {
    #[serde(rename = "boundary")]
    pub boundary_buses: Vec<BusId>,
    pub sending: Vec<BusId>,
    pub receiving: Vec<BusId>,
    #[serde(rename = "interior", default)]
    pub interior_buses: Vec<BusId>,
}

impl AreaDefinition {
    pub fn from_json(text: &str) -> Result<Self, AreaError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AreaError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// An area resolved against a model.
#[derive(Debug, Clone)]
pub struct Area {
    definition: AreaDefinition,
    boundary: Vec<usize>,
    interior: Vec<usize>,
    sending: Vec<bool>,
    internal_branches: Vec<usize>,
}

impl Area {
    pub fn new(model: &NetworkModel, definition: AreaDefinition) -> Result<Self, AreaError> {
        let mut seen = HashSet::new();
        for id in definition.boundary_buses.iter().chain(&definition.interior_buses) {
            if !seen.insert(id.clone()) {
                return Err(AreaError::DuplicateBus(id.clone()));
            }
        }
        let mut sending = BTreeSet::new();
        for id in &definition.sending {
            if !sending.insert(id) {
                return Err(AreaError::DuplicateBus(id.clone()));
            }
        }
        let mut receiving = BTreeSet::new();
        for id in &definition.receiving {
            if !receiving.insert(id) {
                return Err(AreaError::DuplicateBus(id.clone()));
            }
        }
        let boundary_set: BTreeSet<&BusId> = definition.boundary_buses.iter().collect();
        for id in sending.iter().chain(receiving.iter()) {
            if !boundary_set.contains(id) {
                return Err(AreaError::NotOnBoundary((*id).clone()));
            }
        }
        for id in &definition.boundary_buses {
            if sending.contains(id) == receiving.contains(id) {
                return Err(AreaError::SideMismatch(id.clone()));
            }
        }
        if sending.is_empty() || receiving.is_empty() {
            return Err(AreaError::MissingSide);
        }

        let boundary = definition
            .boundary_buses
            .iter()
            .map(|id| model.bus_index(id.as_str()))
            .collect::<Result<Vec<_>, _>>()?;
        let interior = definition
            .interior_buses
            .iter()
            .map(|id| model.bus_index(id.as_str()))
            .collect::<Result<Vec<_>, _>>()?;
        let side = definition
            .boundary_buses
            .iter()
            .map(|id| sending.contains(id))
            .collect();

        let mut member = vec![false; model.bus_count()];
        for &i in boundary.iter().chain(&interior) {
            member[i] = true;
        }
        let internal_branches = (0..model.branch_count())
            .filter(|&k| {
                let (i, j) = model.branch_ends(k);
                member[i] && member[j]
            })
            .collect();

        Ok(Self {
            definition,
            boundary,
            interior,
            sending: side,
            internal_branches,
        })
    }

    pub fn definition(&self) -> &AreaDefinition {
        &self.definition
    }

    pub fn boundary_ids(&self) -> &[BusId] {
        &self.definition.boundary_buses
    }

    /// Model bus indices of the boundary, in boundary order.
    pub fn boundary(&self) -> &[usize] {
        &self.boundary
    }

    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    /// Branch indices with both ends inside the area.
    pub fn internal_branches(&self) -> &[usize] {
        &self.internal_branches
    }

    pub fn is_internal(&self, k: usize) -> bool {
        self.internal_branches.binary_search(&k).is_ok()
    }

    /// The σ vector as booleans, in boundary order.
    pub fn sending_mask(&self) -> &[bool] {
        &self.sending
    }

    pub fn is_sending(&self, bus: usize) -> bool {
        self.boundary.iter().zip(&self.sending).any(|(&b, &s)| s && b == bus)
    }

    /// Laplacian of the in-service internal branches, ordered boundary
    /// first then interior.
    pub fn b_area(&self, model: &NetworkModel, outage: &Outage) -> DMatrix<f64> {
        let n = self.boundary.len() + self.interior.len();
        let mut local = vec![usize::MAX; model.bus_count()];
        for (pos, &i) in self.boundary.iter().chain(&self.interior).enumerate() {
            local[i] = pos;
        }
        let mut b = DMatrix::zeros(n, n);
        for &k in &self.internal_branches {
            if outage.contains(k) {
                continue;
            }
            let (f, t) = model.branch_ends(k);
            let (i, j) = (local[f], local[t]);
            let s = model.branches()[k].susceptance;
            b[(i, i)] += s;
            b[(j, j)] += s;
            b[(i, j)] -= s;
            b[(j, i)] -= s;
        }
        b
    }

    /// Boundary weights of the area with `outage` applied.
    pub fn weights(&self, model: &NetworkModel, outage: &Outage) -> Result<BoundaryWeights, AreaError> {
        let b = self.b_area(model, outage);
        let boundary: Vec<usize> = (0..self.boundary.len()).collect();
        let b_eq = kron_reduce(&b, &boundary)?;
        compute_weights(&b_eq, &self.sending)
    }

    /// Boundary angles in degrees, in boundary order.
    pub fn boundary_angles(&self, angles: &AngleSolution) -> Vec<f64> {
        self.boundary.iter().map(|&i| angles.get(i).to_degrees()).collect()
    }

    /// Area angle in degrees for a full network solution.
    pub fn angle_of(&self, weights: &BoundaryWeights, angles: &AngleSolution) -> Result<f64, AreaError> {
        area_angle(weights, &self.boundary_angles(angles))
    }

    /// Power entering the area across the sending boundary, summed over
    /// internal branch flows leaving sending buses. `flows` is indexed by
    /// branch; out-of-service branches are `None`.
    pub fn entering_power(&self, model: &NetworkModel, flows: &[Option<f64>]) -> f64 {
        let mut sending = vec![false; model.bus_count()];
        for (&b, &s) in self.boundary.iter().zip(&self.sending) {
            sending[b] = s;
        }
        let mut total = 0.0;
        for &k in &self.internal_branches {
            let Some(f) = flows[k] else { continue };
            let (i, j) = model.branch_ends(k);
            if sending[i] {
                total += f;
            }
            if sending[j] {
                total -= f;
            }
        }
        total
    }
}

/// Weights over the boundary buses plus the bulk susceptance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryWeights {
    pub weights: Vec<f64>,
    pub b_mod: f64,
}

impl BoundaryWeights {
    /// Wraps externally supplied weights without checking the sum rules.
    /// Published weight tables are usually rounded and miss them slightly.
    pub fn from_raw(weights: Vec<f64>, b_mod: f64) -> Self {
        Self { weights, b_mod }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `(Σ sending, Σ receiving)` for the given σ.
    pub fn side_sums(&self, sending: &[bool]) -> (f64, f64) {
        self.weights.iter().zip(sending).fold(
            (0.0, 0.0),
            |(s, r), (&w, &is_s)| {
                if is_s {
                    (s + w, r)
                } else {
                    (s, r + w)
                }
            },
        )
    }
}

/// Schur complement of `b` onto the rows/columns listed in `boundary`.
pub fn kron_reduce(b: &DMatrix<f64>, boundary: &[usize]) -> Result<DMatrix<f64>, AreaError> {
    let n = b.nrows();
    let mut keep = vec![false; n];
    for &i in boundary {
        keep[i] = true;
    }
    let interior: Vec<usize> = (0..n).filter(|&i| !keep[i]).collect();
    let nb = boundary.len();
    let b_bb = DMatrix::from_fn(nb, nb, |r, c| b[(boundary[r], boundary[c])]);
    if interior.is_empty() {
        return Ok(b_bb);
    }
    let ni = interior.len();
    let b_ii = DMatrix::from_fn(ni, ni, |r, c| b[(interior[r], interior[c])]);
    let b_ib = DMatrix::from_fn(ni, nb, |r, c| b[(interior[r], boundary[c])]);
    let chol = b_ii.cholesky().ok_or(AreaError::SingularInterior)?;
    // guard against a numerically semidefinite block slipping through
    let diag_min = chol
        .l_dirty()
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, &d| m.min(d.abs()));
    let diag_max = chol.l_dirty().diagonal().iter().fold(0.0f64, |m, &d| m.max(d.abs()));
    if diag_min <= diag_max * 1e-10 {
        return Err(AreaError::SingularInterior);
    }
    let x = chol.solve(&b_ib);
    let mut b_eq = b_bb - b_ib.transpose() * x;
    // symmetrize away rounding
    for r in 0..nb {
        for c in r + 1..nb {
            let v = 0.5 * (b_eq[(r, c)] + b_eq[(c, r)]);
            b_eq[(r, c)] = v;
            b_eq[(c, r)] = v;
        }
    }
    Ok(b_eq)
}

pub fn compute_weights(b_eq: &DMatrix<f64>, sending: &[bool]) -> Result<BoundaryWeights, AreaError> {
    let n = b_eq.nrows();
    if sending.len() != n {
        return Err(AreaError::DimensionMismatch {
            expected: n,
            got: sending.len(),
        });
    }
    let sigma = DVector::from_iterator(n, sending.iter().map(|&s| if s { 1.0 } else { 0.0 }));
    let row = sigma.transpose() * b_eq;
    let b_mod = (&row * &sigma)[(0, 0)];
    if b_mod.is_nan() || b_mod <= MIN_B_MOD {
        return Err(AreaError::DegenerateArea(b_mod));
    }
    Ok(BoundaryWeights {
        weights: row.iter().map(|v| v / b_mod).collect(),
        b_mod,
    })
}

/// `w · θ`, degrees in, degrees out.
pub fn area_angle(weights: &BoundaryWeights, theta_deg: &[f64]) -> Result<f64, AreaError> {
    if theta_deg.len() != weights.weights.len() {
        return Err(AreaError::DimensionMismatch {
            expected: weights.weights.len(),
            got: theta_deg.len(),
        });
    }
    Ok(weights.weights.iter().zip(theta_deg).map(|(w, t)| w * t).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::tests::{branch, bus};
    use approx::assert_abs_diff_eq;

    fn ids(v: &[&str]) -> Vec<BusId> {
        v.iter().map(|s| BusId::from(*s)).collect()
    }

    #[test]
    fn kron_without_interior_is_identity() {
        let b = DMatrix::from_row_slice(2, 2, &[3.0, -3.0, -3.0, 3.0]);
        assert_eq!(kron_reduce(&b, &[0, 1]).unwrap(), b);
    }

    #[test]
    fn kron_chain_is_series_combination() {
        // a - m - b, ordered [a, b, m]
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, -1.0, 0.0, 1.0, -1.0, -1.0, -1.0, 2.0]);
        let eq = kron_reduce(&b, &[0, 1]).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert!((eq - expect).abs().max() < 1e-12);
    }

    #[test]
    fn kron_star_matches_y_delta() {
        // center c last, three leaves with b=1: Y-Δ gives 1·1/3 per pair
        let mut b = DMatrix::zeros(4, 4);
        for leaf in 0..3 {
            b[(leaf, leaf)] += 1.0;
            b[(3, 3)] += 1.0;
            b[(leaf, 3)] -= 1.0;
            b[(3, leaf)] -= 1.0;
        }
        let eq = kron_reduce(&b, &[0, 1, 2]).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { 2.0 / 3.0 } else { -1.0 / 3.0 };
                assert_abs_diff_eq!(eq[(r, c)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn isolated_interior_is_singular() {
        let b = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(kron_reduce(&b, &[0, 1]), Err(AreaError::SingularInterior)));
    }

    #[test]
    fn single_branch_weights() {
        let b_eq = DMatrix::from_row_slice(2, 2, &[10.0, -10.0, -10.0, 10.0]);
        let w = compute_weights(&b_eq, &[true, false]).unwrap();
        assert_eq!(w.weights, vec![1.0, -1.0]);
        assert_eq!(w.b_mod, 10.0);
    }

    #[test]
    fn two_senders_one_receiver() {
        let b_eq = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, -1.0, 0.0, 1.0, -1.0, -1.0, -1.0, 2.0]);
        let w = compute_weights(&b_eq, &[true, true, false]).unwrap();
        assert_eq!(w.b_mod, 2.0);
        assert_eq!(w.weights, vec![0.5, 0.5, -1.0]);
        assert_abs_diff_eq!(area_angle(&w, &[10.0, 6.0, 0.0]).unwrap(), 8.0);
    }

    #[test]
    fn degenerate_sigma() {
        let b_eq = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!(matches!(
            compute_weights(&b_eq, &[true, true]),
            Err(AreaError::DegenerateArea(_))
        ));
        assert!(matches!(
            compute_weights(&b_eq, &[false, false]),
            Err(AreaError::DegenerateArea(_))
        ));
    }

    #[test]
    fn published_weight_table_sums() {
        let sending = [0.1271, 0.5303, 0.2616, 0.0396, 0.0385, 0.0005, 0.0023];
        let receiving = [-0.1269, -0.0958, -0.0017, -0.1615, -0.2979, -0.2766, -0.0395];
        assert_abs_diff_eq!(sending.iter().sum::<f64>(), 0.9999, epsilon = 1e-12);
        assert_abs_diff_eq!(receiving.iter().sum::<f64>(), -0.9999, epsilon = 1e-12);
        let w = BoundaryWeights::from_raw(sending.iter().chain(&receiving).copied().collect(), 1.0);
        let mask: Vec<bool> = (0..14).map(|i| i < 7).collect();
        let (s, r) = w.side_sums(&mask);
        assert_abs_diff_eq!(s, 0.9999, epsilon = 1e-12);
        assert_abs_diff_eq!(r, -0.9999, epsilon = 1e-12);
    }

    #[test]
    fn angle_basics() {
        let w = BoundaryWeights::from_raw(vec![1.0, -1.0], 1.0);
        assert_eq!(area_angle(&w, &[10.0, 4.0]).unwrap(), 6.0);
        assert_eq!(area_angle(&w, &[3.3, 3.3]).unwrap(), 0.0);
        assert!(matches!(
            area_angle(&w, &[1.0]),
            Err(AreaError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn validates_definition() {
        let m = NetworkModel::new(
            vec![bus("a"), bus("b"), bus("c")],
            vec![branch("ab", "a", "b", 1.0, None), branch("bc", "b", "c", 1.0, None)],
            "a".into(),
        )
        .unwrap();
        let def = |b: &[&str], s: &[&str], r: &[&str], i: &[&str]| AreaDefinition {
            boundary_buses: ids(b),
            sending: ids(s),
            receiving: ids(r),
            interior_buses: ids(i),
        };
        assert!(Area::new(&m, def(&["a", "c"], &["a"], &["c"], &["b"])).is_ok());
        assert!(matches!(
            Area::new(&m, def(&["a", "c"], &["a"], &[], &["b"])),
            Err(AreaError::SideMismatch(_))
        ));
        assert!(matches!(
            Area::new(&m, def(&["a", "c"], &["a", "c"], &["c"], &["b"])),
            Err(AreaError::SideMismatch(_))
        ));
        assert!(matches!(
            Area::new(&m, def(&["a", "c"], &["a"], &["c"], &["a"])),
            Err(AreaError::DuplicateBus(_))
        ));
        assert!(matches!(
            Area::new(&m, def(&["a", "c"], &["a", "b"], &["c"], &[])),
            Err(AreaError::NotOnBoundary(_))
        ));
        assert!(matches!(
            Area::new(&m, def(&["a", "z"], &["a"], &["z"], &[])),
            Err(AreaError::Network(NetworkError::UnknownBus(_)))
        ));
    }

    #[test]
    fn chain_area_weights_and_entering_power() {
        let m = NetworkModel::new(
            vec![bus("a"), bus("m"), bus("b"), bus("x")],
            vec![
                branch("am", "a", "m", 1.0, None),
                branch("mb", "m", "b", 1.0, None),
                branch("bx", "b", "x", 1.0, None),
            ],
            "x".into(),
        )
        .unwrap();
        let area = Area::new(
            &m,
            AreaDefinition {
                boundary_buses: ids(&["a", "b"]),
                sending: ids(&["a"]),
                receiving: ids(&["b"]),
                interior_buses: ids(&["m"]),
            },
        )
        .unwrap();
        assert_eq!(area.internal_branches(), &[0, 1]);
        let none = Outage::none(&m);
        let w = area.weights(&m, &none).unwrap();
        assert_abs_diff_eq!(w.b_mod, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(w.weights[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.weights[1], -1.0, epsilon = 1e-12);

        let p = m.injections([("a", 0.25), ("x", -0.25)]).unwrap();
        let th = m.solve_dc(&p, &none).unwrap();
        let flows = m.line_flows(&th, &none);
        let entering = area.entering_power(&m, &flows);
        assert_abs_diff_eq!(entering, 0.25, epsilon = 1e-12);
        let theta = area.angle_of(&w, &th).unwrap().to_radians();
        assert_abs_diff_eq!(w.b_mod * theta, entering, epsilon = 1e-12);
    }

    #[test]
    fn area_file_round_trip() {
        let text = r#"{"boundary":["1","2"],"sending":["1"],"receiving":["2"],"interior":[]}"#;
        let d = AreaDefinition::from_json(text).unwrap();
        assert_eq!(d.boundary_buses, ids(&["1", "2"]));
        let back: AreaDefinition = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
        assert_eq!(back, d);
    }
}
