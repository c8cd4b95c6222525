//! Angles for boundary buses without a PMU.
//!
//! Two sources, in order of preference:
//!
//! - single-line LSE: a neighbour with voltage and current phasors gives
//!   `V_i = V_1 − z·I`;
//! - PAC: a constant model offset from the electrically closest PMU bus,
//!   `θ_i = θ_j + pac_i`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::area::Area;
use crate::netmodel::{BusId, InjectionVector, NetworkError, NetworkModel, Outage};

#[derive(Debug, Error)]
pub enum PacError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("no PMU bus reachable from `{0}`")]
    NoReachablePmu(BusId),
    #[error("boundary bus `{0}` has no measurement, LSE input or PAC entry")]
    UnresolvableBus(BusId),
    #[error("failed to read file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse file: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacEntry {
    pub target: BusId,
    pub reference: BusId,
    pub pac_deg: f64,
}

/// One row per unmeasured boundary bus. Serialized as a bare array.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PacTable {
    pub entries: Vec<PacEntry>,
}

impl PacTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PacError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn get(&self, target: &BusId) -> Option<&PacEntry> {
        self.entries.iter().find(|e| &e.target == target)
    }

    /// Buses the table needs measured.
    pub fn references(&self) -> BTreeSet<BusId> {
        self.entries.iter().map(|e| e.reference.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phasor {
    /// Per unit.
    pub magnitude: f64,
    /// Degrees.
    pub angle: f64,
}

impl Phasor {
    pub fn new(magnitude: f64, angle: f64) -> Self {
        Self { magnitude, angle }
    }

    pub fn to_complex(self) -> Complex64 {
        Complex64::from_polar(self.magnitude, self.angle.to_radians())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Impedance {
    pub r: f64,
    pub x: f64,
}

impl Impedance {
    pub fn to_complex(self) -> Complex64 {
        Complex64::new(self.r, self.x)
    }
}

/// Phasors at the measured neighbour and the line impedance towards bus i.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LseInput {
    pub v: Phasor,
    pub i: Phasor,
    pub z: Impedance,
}

/// Angle of `V_1 − z·I` in degrees; `i_line` flows from the measured bus
/// towards the estimated one.
pub fn lse_neighbor_angle(v1: Phasor, i_line: Phasor, z_line: Impedance) -> f64 {
    let vi = v1.to_complex() - z_line.to_complex() * i_line.to_complex();
    vi.arg().to_degrees()
}

/// Pseudoinverse of a connected graph Laplacian, via `(L + J/n)⁻¹ − J/n`.
fn laplacian_pinv(l: &DMatrix<f64>) -> Result<DMatrix<f64>, PacError> {
    let n = l.nrows();
    let j = DMatrix::from_element(n, n, 1.0 / n as f64);
    let inv = (l + &j).cholesky().ok_or(NetworkError::SingularSystem)?.inverse();
    Ok(inv - j)
}

/// Builds the PAC table from the base-case DC solution.
pub fn compute_pac_table(
    model: &NetworkModel,
    area: &Area,
    pmu_buses: &BTreeSet<BusId>,
    base: &InjectionVector,
) -> Result<PacTable, PacError> {
    let none = Outage::none(model);
    let theta = model.solve_dc(base, &none)?;
    let pmu: Vec<(usize, &BusId)> = pmu_buses
        .iter()
        .map(|id| Ok((model.bus_index(id.as_str())?, id)))
        .collect::<Result<_, NetworkError>>()?;
    let unmeasured: Vec<(usize, &BusId)> = area
        .boundary()
        .iter()
        .zip(area.boundary_ids())
        .filter(|(_, id)| !pmu_buses.contains(*id))
        .map(|(&i, id)| (i, id))
        .collect();
    if unmeasured.is_empty() {
        return Ok(PacTable::default());
    }
    if pmu.is_empty() {
        return Err(PacError::NoReachablePmu(unmeasured[0].1.clone()));
    }
    let pinv = laplacian_pinv(&model.susceptance_dense(&none))?;
    let distance = |i: usize, j: usize| pinv[(i, i)] + pinv[(j, j)] - 2.0 * pinv[(i, j)];

    let entries = unmeasured
        .into_iter()
        .map(|(i, target)| {
            // ids iterate sorted, so the first minimum wins ties by id
            let (j, reference) = pmu
                .iter()
                .copied()
                .fold(None, |best: Option<(usize, &BusId, f64)>, (j, id)| {
                    let d = distance(i, j);
                    match best {
                        Some((_, _, bd)) if bd <= d => best,
                        _ => Some((j, id, d)),
                    }
                })
                .map(|(j, id, _)| (j, id))
                .expect("pmu set is non-empty");
            PacEntry {
                target: target.clone(),
                reference: reference.clone(),
                pac_deg: (theta.get(i) - theta.get(j)).to_degrees(),
            }
        })
        .collect();
    Ok(PacTable { entries })
}

/// Where a boundary angle came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AngleSource {
    Measured,
    Pac,
    Lse,
    Stale,
}

/// Fills the boundary vector: measured buses pass through, then LSE, then
/// PAC from a measured reference.
pub fn estimate_boundary_angles(
    boundary: &[BusId],
    measured: &HashMap<BusId, f64>,
    table: &PacTable,
    lse: &HashMap<BusId, LseInput>,
) -> Result<Vec<(f64, AngleSource)>, PacError> {
    boundary
        .iter()
        .map(|bus| {
            if let Some(&a) = measured.get(bus) {
                return Ok((a, AngleSource::Measured));
            }
            if let Some(input) = lse.get(bus) {
                return Ok((lse_neighbor_angle(input.v, input.i, input.z), AngleSource::Lse));
            }
            if let Some(entry) = table.get(bus) {
                if let Some(&r) = measured.get(&entry.reference) {
                    return Ok((r + entry.pac_deg, AngleSource::Pac));
                }
            }
            Err(PacError::UnresolvableBus(bus.clone()))
        })
        .collect()
}
