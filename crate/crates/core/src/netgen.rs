//! Random cutset test systems.
//!
//! Buses are split into five groups: sending-side externals, sending
//! boundary, area interior, receiving boundary and receiving-side externals.
//! Branches never skip a group, so every path from a source to a sink
//! crosses the area and the boundary is a cutset.

use crate::area::AreaDefinition;
use crate::netmodel::{Branch, Bus, BusId, NetworkModel};
use crate::study::PatternFile;
use rand::Rng;

/// Smallest system the generator builds.
pub const MIN_BUSES: usize = 10;

#[derive(Debug, Clone)]
pub struct CutsetSystem {
    pub model: NetworkModel,
    pub area: AreaDefinition,
    /// Sending-side external buses.
    pub sources: Vec<BusId>,
    /// Receiving-side external buses.
    pub sinks: Vec<BusId>,
}

impl CutsetSystem {
    /// Zero base with a uniform source-to-sink direction.
    pub fn uniform_pattern(&self) -> PatternFile {
        let mut direction = std::collections::BTreeMap::new();
        for s in &self.sources {
            direction.insert(s.clone(), 1.0 / self.sources.len() as f64);
        }
        for s in &self.sinks {
            direction.insert(s.clone(), -1.0 / self.sinks.len() as f64);
        }
        PatternFile {
            base: Default::default(),
            direction,
        }
    }
}

struct Builder<'r, R: Rng> {
    rng: &'r mut R,
    branches: Vec<Branch>,
}

impl<R: Rng> Builder<'_, R> {
    fn link(&mut self, from: &BusId, to: &BusId) {
        let b = self.rng.random_range(2.0..20.0);
        let limit = self.rng.random_range(0.5..5.0);
        self.branches.push(Branch {
            id: format!("L{:03}", self.branches.len() + 1).into(),
            from_bus: from.clone(),
            to_bus: to.clone(),
            susceptance: b,
            flow_limit: Some(limit),
            is_equivalenced: false,
        });
    }

    /// Random spanning tree over `group` plus `extra` chords.
    fn mesh(&mut self, group: &[BusId], extra: usize) {
        for i in 1..group.len() {
            let j = self.rng.random_range(0..i);
            self.link(&group[j], &group[i]);
        }
        if group.len() < 2 {
            return;
        }
        for _ in 0..extra {
            let i = self.rng.random_range(0..group.len());
            let mut j = self.rng.random_range(0..group.len() - 1);
            if j >= i {
                j += 1;
            }
            self.link(&group[i], &group[j]);
        }
    }

    /// Each bus of `from` gets one branch to a random bus of `to`.
    fn attach(&mut self, from: &[BusId], to: &[BusId]) {
        for f in from {
            let t = &to[self.rng.random_range(0..to.len())];
            self.link(f, t);
        }
    }
}

/// Builds a connected cutset system with `n` buses (at least
/// [`MIN_BUSES`]).
pub fn random_cutset_system<R: Rng>(rng: &mut R, n: usize) -> CutsetSystem {
    let n = n.max(MIN_BUSES);
    let n_ext = (n / 5).max(2);
    let max_side = ((n - 2 * n_ext - 1) / 2).min(4);
    let n_sb = rng.random_range(1..=max_side);
    let n_rb = rng.random_range(1..=max_side);
    let n_int = n - 2 * n_ext - n_sb - n_rb;

    let names = |p: &str, k: usize| -> Vec<BusId> { (1..=k).map(|i| format!("{p}{i}").into()).collect() };
    let src = names("G", n_ext);
    let sb = names("SB", n_sb);
    let int = names("H", n_int);
    let rb = names("RB", n_rb);
    let snk = names("LD", n_ext);

    let mut b = Builder {
        rng,
        branches: Vec::new(),
    };
    b.mesh(&src, n_ext / 2);
    b.attach(&sb, &src);
    let area_buses: Vec<BusId> = int.iter().chain(&sb).chain(&rb).cloned().collect();
    // tree over the interior first so every boundary bus hangs off it
    b.mesh(&int, 0);
    b.attach(&sb, &int);
    b.attach(&rb, &int);
    let chords = area_buses.len() / 2;
    for _ in 0..chords {
        let i = b.rng.random_range(0..area_buses.len());
        let mut j = b.rng.random_range(0..area_buses.len() - 1);
        if j >= i {
            j += 1;
        }
        let (x, y) = (area_buses[i].clone(), area_buses[j].clone());
        b.link(&x, &y);
    }
    b.attach(&rb, &snk);
    b.mesh(&snk, n_ext / 2);
    let branches = b.branches;

    let buses = src
        .iter()
        .chain(&sb)
        .chain(&int)
        .chain(&rb)
        .chain(&snk)
        .map(|id| Bus {
            id: id.clone(),
            name: id.as_str().to_owned(),
            kv_level: 500.0,
        })
        .collect();
    let model = NetworkModel::new(buses, branches, snk[0].clone()).expect("generated model is valid");
    let area = AreaDefinition {
        boundary_buses: sb.iter().chain(&rb).cloned().collect(),
        sending: sb.clone(),
        receiving: rb.clone(),
        interior_buses: int,
    };
    CutsetSystem {
        model,
        area,
        sources: src,
        sinks: snk,
    }
}
