//! DC network model.
//!
//! Buses joined by lossless series branches. The susceptance matrix is the
//! weighted graph Laplacian of the branch susceptances; DC power flow solves
//! `B θ = P` with the slack row and column removed.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

/// Tolerance used when deciding whether injections are balanced.
pub const BALANCE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("model has no buses")]
    Empty,
    #[error("duplicate bus id `{0}`")]
    DuplicateBus(BusId),
    #[error("duplicate branch id `{0}`")]
    DuplicateBranch(BranchId),
    #[error("unknown bus id `{0}`")]
    UnknownBus(BusId),
    #[error("unknown branch id `{0}`")]
    UnknownBranch(BranchId),
    #[error("branch `{0}` connects a bus to itself")]
    SelfLoop(BranchId),
    #[error("branch `{id}` has invalid susceptance {value} (must be finite and > 0)")]
    InvalidSusceptance { id: BranchId, value: f64 },
    #[error("branch `{id}` has invalid flow limit {value} (must be finite and > 0)")]
    InvalidLimit { id: BranchId, value: f64 },
    #[error("injection vector has {got} entries, model has {expected} buses")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("injection at bus `{0}` is not finite")]
    NonFiniteInjection(BusId),
    #[error("network is islanded into {} components", components.len())]
    IslandedNetwork { components: Vec<BTreeSet<BusId>> },
    #[error("reduced susceptance matrix is singular")]
    SingularSystem,
    #[error("failed to read model: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse model: {0}")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }

        impl std::borrow::Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        // Model files in the wild use both numeric and textual ids.
        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
                #[derive(Deserialize)]
                #[serde(untagged)]
                enum Raw {
                    Text(String),
                    Int(i64),
                }
                Ok(match Raw::deserialize(de)? {
                    Raw::Text(s) => Self(s),
                    Raw::Int(n) => Self(n.to_string()),
                })
            }
        }
    };
}

string_id!(BusId);
string_id!(BranchId);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    #[serde(default)]
    pub name: String,
    /// Nominal voltage in kV. Metadata only.
    #[serde(rename = "kv", default)]
    pub kv_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub id: BranchId,
    #[serde(rename = "from")]
    pub from_bus: BusId,
    #[serde(rename = "to")]
    pub to_bus: BusId,
    /// Series susceptance magnitude `1/x`, per unit.
    #[serde(rename = "b")]
    pub susceptance: f64,
    /// Flow limit in per unit; `None` means unlimited.
    #[serde(rename = "limit", default, skip_serializing_if = "Option::is_none")]
    pub flow_limit: Option<f64>,
    /// Set on lines created by an earlier network reduction.
    #[serde(rename = "equivalenced", default)]
    pub is_equivalenced: bool,
}

/// On-disk model document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub slack: BusId,
}

/// A validated, immutable DC network.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    slack: usize,
    bus_index: HashMap<BusId, usize>,
    branch_index: HashMap<BranchId, usize>,
    ends: Vec<(usize, usize)>,
}

impl NetworkModel {
    pub fn new(buses: Vec<Bus>, branches: Vec<Branch>, slack: BusId) -> Result<Self> {
        if buses.is_empty() {
            return Err(NetworkError::Empty);
        }
        let mut bus_index = HashMap::with_capacity(buses.len());
        for (i, bus) in buses.iter().enumerate() {
            if bus_index.insert(bus.id.clone(), i).is_some() {
                return Err(NetworkError::DuplicateBus(bus.id.clone()));
            }
        }
        let mut branch_index = HashMap::with_capacity(branches.len());
        let mut ends = Vec::with_capacity(branches.len());
        for (k, br) in branches.iter().enumerate() {
            if branch_index.insert(br.id.clone(), k).is_some() {
                return Err(NetworkError::DuplicateBranch(br.id.clone()));
            }
            let from = *bus_index
                .get(&br.from_bus)
                .ok_or_else(|| NetworkError::UnknownBus(br.from_bus.clone()))?;
            let to = *bus_index
                .get(&br.to_bus)
                .ok_or_else(|| NetworkError::UnknownBus(br.to_bus.clone()))?;
            if from == to {
                return Err(NetworkError::SelfLoop(br.id.clone()));
            }
            if !(br.susceptance.is_finite() && br.susceptance > 0.0) {
                return Err(NetworkError::InvalidSusceptance {
                    id: br.id.clone(),
                    value: br.susceptance,
                });
            }
            if let Some(limit) = br.flow_limit {
                if !(limit.is_finite() && limit > 0.0) {
                    return Err(NetworkError::InvalidLimit {
                        id: br.id.clone(),
                        value: limit,
                    });
                }
            }
            ends.push((from, to));
        }
        let slack = *bus_index.get(&slack).ok_or(NetworkError::UnknownBus(slack))?;
        Ok(Self {
            buses,
            branches,
            slack,
            bus_index,
            branch_index,
            ends,
        })
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        Self::new(file.buses, file.branches, file.slack)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            buses: self.buses.clone(),
            branches: self.branches.clone(),
            slack: self.buses[self.slack].id.clone(),
        }
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn slack_index(&self) -> usize {
        self.slack
    }

    pub fn slack(&self) -> &BusId {
        &self.buses[self.slack].id
    }

    pub fn bus_index(&self, id: &str) -> Result<usize> {
        self.bus_index
            .get(id)
            .copied()
            .ok_or_else(|| NetworkError::UnknownBus(BusId::from(id)))
    }

    pub fn branch_index(&self, id: &str) -> Result<usize> {
        self.branch_index
            .get(id)
            .copied()
            .ok_or_else(|| NetworkError::UnknownBranch(BranchId::from(id)))
    }

    /// Bus indices at the `from` and `to` end of branch `k`.
    pub fn branch_ends(&self, k: usize) -> (usize, usize) {
        self.ends[k]
    }

    /// Resolves branch ids into an outage set.
    pub fn outage<I, S>(&self, ids: I) -> Result<Outage>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out = Outage::none(self);
        for id in ids {
            out.insert(self.branch_index(id.as_ref())?);
        }
        Ok(out)
    }

    /// Builds a bus-indexed injection vector from `(bus id, value)` pairs.
    /// Buses not mentioned get zero.
    pub fn injections<I, S>(&self, entries: I) -> Result<InjectionVector>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: AsRef<str>,
    {
        let mut p = vec![0.0; self.bus_count()];
        for (id, value) in entries {
            let i = self.bus_index(id.as_ref())?;
            p[i] += value;
        }
        InjectionVector::new(self, p)
    }

    /// Weighted Laplacian of in-service branch susceptances, sparse.
    pub fn susceptance(&self, outage: &Outage) -> CscMatrix<f64> {
        let n = self.bus_count();
        let mut coo = CooMatrix::new(n, n);
        for (k, br) in self.branches.iter().enumerate() {
            if outage.contains(k) {
                continue;
            }
            let (i, j) = self.ends[k];
            let b = br.susceptance;
            coo.push(i, i, b);
            coo.push(j, j, b);
            coo.push(i, j, -b);
            coo.push(j, i, -b);
        }
        CscMatrix::from(&coo)
    }

    /// Dense form of [`susceptance`](Self::susceptance).
    pub fn susceptance_dense(&self, outage: &Outage) -> DMatrix<f64> {
        DMatrix::from(&self.susceptance(outage))
    }

    /// Connected components of the graph with `outage` removed.
    pub fn islanding(&self, outage: &Outage) -> Islanding {
        let components = self
            .component_indices(outage)
            .into_iter()
            .map(|c| c.into_iter().map(|i| self.buses[i].id.clone()).collect())
            .collect::<Vec<BTreeSet<BusId>>>();
        Islanding {
            islanded: components.len() > 1,
            components,
        }
    }

    pub fn is_connected(&self, outage: &Outage) -> bool {
        self.component_indices(outage).len() == 1
    }

    pub(crate) fn component_indices(&self, outage: &Outage) -> Vec<Vec<usize>> {
        let n = self.bus_count();
        let mut adj = vec![Vec::new(); n];
        for (k, &(i, j)) in self.ends.iter().enumerate() {
            if !outage.contains(k) {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        let mut label = vec![usize::MAX; n];
        let mut components = Vec::new();
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            let id = components.len();
            let mut members = vec![start];
            label[start] = id;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in &adj[u] {
                    if label[v] == usize::MAX {
                        label[v] = id;
                        members.push(v);
                        queue.push_back(v);
                    }
                }
            }
            members.sort_unstable();
            components.push(members);
        }
        components
    }

    /// Factors the slack-reduced susceptance matrix for repeated solves.
    pub fn factor(&self, outage: &Outage) -> Result<DcSolver<'_>> {
        let islands = self.islanding(outage);
        if islands.islanded {
            return Err(NetworkError::IslandedNetwork {
                components: islands.components,
            });
        }
        let n = self.bus_count();
        // reduced position of each bus, slack removed
        let reduced: Vec<Option<usize>> = (0..n)
            .scan(0usize, |next, i| {
                Some(if i == self.slack {
                    None
                } else {
                    *next += 1;
                    Some(*next - 1)
                })
            })
            .collect();
        let m = n - 1;
        let factor = if m == 0 {
            None
        } else {
            let mut coo = CooMatrix::new(m, m);
            for (k, br) in self.branches.iter().enumerate() {
                if outage.contains(k) {
                    continue;
                }
                let (i, j) = self.ends[k];
                let b = br.susceptance;
                if let Some(ri) = reduced[i] {
                    coo.push(ri, ri, b);
                }
                if let Some(rj) = reduced[j] {
                    coo.push(rj, rj, b);
                }
                if let (Some(ri), Some(rj)) = (reduced[i], reduced[j]) {
                    coo.push(ri, rj, -b);
                    coo.push(rj, ri, -b);
                }
            }
            let csc = CscMatrix::from(&coo);
            Some(CscCholesky::factor(&csc).map_err(|_| NetworkError::SingularSystem)?)
        };
        Ok(DcSolver {
            model: self,
            reduced,
            factor,
        })
    }

    /// DC power flow. Any injection imbalance is absorbed at the slack bus.
    pub fn solve_dc(&self, injections: &InjectionVector, outage: &Outage) -> Result<AngleSolution> {
        self.factor(outage)?.solve(injections)
    }

    /// Branch flows `b (θ_from − θ_to)`, in branch order; `None` for
    /// branches in `outage`.
    pub fn line_flows(&self, angles: &AngleSolution, outage: &Outage) -> Vec<Option<f64>> {
        let theta = angles.radians();
        self.branches
            .iter()
            .enumerate()
            .map(|(k, br)| {
                if outage.contains(k) {
                    None
                } else {
                    let (i, j) = self.ends[k];
                    Some(br.susceptance * (theta[i] - theta[j]))
                }
            })
            .collect()
    }
}

/// Result of a connectivity check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Islanding {
    pub islanded: bool,
    pub components: Vec<BTreeSet<BusId>>,
}

/// A set of branches taken out of service, stored as a mask over the
/// model's branch list.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Outage {
    mask: Vec<bool>,
}

impl Outage {
    pub fn none(model: &NetworkModel) -> Self {
        Self {
            mask: vec![false; model.branch_count()],
        }
    }

    pub fn contains(&self, k: usize) -> bool {
        self.mask.get(k).copied().unwrap_or(false)
    }

    pub fn insert(&mut self, k: usize) {
        self.mask[k] = true;
    }

    /// A copy of this outage with branch `k` also removed.
    pub fn with(&self, k: usize) -> Self {
        let mut out = self.clone();
        out.insert(k);
        out
    }

    pub fn union(&self, other: &Outage) -> Self {
        Self {
            mask: self.mask.iter().zip(&other.mask).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter_map(|(k, &m)| m.then_some(k))
    }

    pub fn ids(&self, model: &NetworkModel) -> Vec<BranchId> {
        self.indices().map(|k| model.branches()[k].id.clone()).collect()
    }
}

/// Per-bus active power injection, per unit; generation positive.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionVector(Vec<f64>);

impl InjectionVector {
    pub fn new(model: &NetworkModel, values: Vec<f64>) -> Result<Self> {
        if values.len() != model.bus_count() {
            return Err(NetworkError::DimensionMismatch {
                expected: model.bus_count(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(NetworkError::NonFiniteInjection(model.buses()[i].id.clone()));
        }
        Ok(Self(values))
    }

    pub fn zeros(model: &NetworkModel) -> Self {
        Self(vec![0.0; model.bus_count()])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn imbalance(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn is_balanced(&self) -> bool {
        self.imbalance().abs() <= BALANCE_TOLERANCE
    }

    /// `self + scale · other`.
    pub fn add_scaled(&self, other: &InjectionVector, scale: f64) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a + scale * b).collect())
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Bus angles in radians, slack at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleSolution(Vec<f64>);

impl AngleSolution {
    pub fn radians(&self) -> &[f64] {
        &self.0
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.0.iter().map(|t| t.to_degrees()).collect()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }
}

/// A factored DC system bound to one topology.
pub struct DcSolver<'a> {
    model: &'a NetworkModel,
    reduced: Vec<Option<usize>>,
    factor: Option<CscCholesky<f64>>,
}

impl DcSolver<'_> {
    pub fn solve(&self, injections: &InjectionVector) -> Result<AngleSolution> {
        let n = self.model.bus_count();
        if injections.0.len() != n {
            return Err(NetworkError::DimensionMismatch {
                expected: n,
                got: injections.0.len(),
            });
        }
        let mut theta = vec![0.0; n];
        let Some(factor) = &self.factor else {
            return Ok(AngleSolution(theta));
        };
        let mut rhs = DVector::zeros(n - 1);
        for (i, r) in self.reduced.iter().enumerate() {
            if let Some(r) = r {
                rhs[*r] = injections.0[i];
            }
        }
        let x = factor.solve(&rhs);
        for (i, r) in self.reduced.iter().enumerate() {
            if let Some(r) = r {
                theta[i] = x[(*r, 0)];
            }
        }
        Ok(AngleSolution(theta))
    }
}
