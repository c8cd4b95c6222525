//! Read-only mitigation what-ifs against a fixed model snapshot.

use std::path::Path;

use aam_core::area::{Area, AreaDefinition, AreaError, BoundaryWeights};
use aam_core::mitigation::{allocate_load_shed, simulate_with_outage, MitigationError, MitigationPlan};
use aam_core::netmodel::{InjectionVector, NetworkModel, Outage};
use aam_core::study::{StudyError, TransferPattern, DEFAULT_MVA_BASE};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhatIfRequest {
    pub total_mw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub plan: MitigationPlan,
    pub theta_before: f64,
    pub theta_after: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum WhatIfError {
    #[error(transparent)]
    Area(#[from] AreaError),
    #[error(transparent)]
    Study(#[from] StudyError),
    #[error(transparent)]
    Network(#[from] aam_core::netmodel::NetworkError),
}

/// Model, area and operating point the what-ifs run against.
#[derive(Debug, Clone)]
pub struct WhatIf {
    model: NetworkModel,
    area: Area,
    weights: BoundaryWeights,
    injections: InjectionVector,
    direction: InjectionVector,
    outage: Outage,
    mva_base: f64,
}

impl WhatIf {
    pub fn new(
        model: NetworkModel,
        area: Area,
        injections: InjectionVector,
        direction: InjectionVector,
        outage: Outage,
        mva_base: f64,
    ) -> Result<Self, AreaError> {
        let weights = area.weights(&model, &outage)?;
        Ok(Self {
            model,
            area,
            weights,
            injections,
            direction,
            outage,
            mva_base,
        })
    }

    /// Operating point from the pattern's base injections.
    pub fn load(model: &Path, area: &Path, pattern: &Path, outage: &[String]) -> Result<Self, WhatIfError> {
        let model = NetworkModel::load(model)?;
        let area = Area::new(&model, AreaDefinition::load(area)?)?;
        let pattern = TransferPattern::load(&model, pattern)?;
        let outage = model.outage(outage)?;
        Ok(Self::new(
            model,
            area,
            pattern.base,
            pattern.direction,
            outage,
            DEFAULT_MVA_BASE,
        )?)
    }

    /// Replaces the computed weights, e.g. with a published table.
    pub fn with_weights(mut self, weights: BoundaryWeights) -> Self {
        self.weights = weights;
        self
    }

    pub fn weights(&self) -> &BoundaryWeights {
        &self.weights
    }

    pub fn run(&self, total_mw: f64) -> Result<WhatIfResponse, MitigationError> {
        let plan = allocate_load_shed(&self.weights, &self.area, total_mw, self.mva_base)?;
        let eff = simulate_with_outage(
            &self.model,
            &self.area,
            &self.weights,
            &self.injections,
            &self.direction,
            &plan,
            self.mva_base,
            &self.outage,
        )?;
        Ok(WhatIfResponse {
            plan,
            theta_before: eff.theta_before,
            theta_after: eff.theta_after,
        })
    }
}
