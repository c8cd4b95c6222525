//! Checks against the meshed corridor fixtures. Expected values were
//! produced by an independent numpy implementation of the same DC model.

use std::collections::HashMap;
use std::path::Path;

use aam_core::area::{Area, AreaDefinition};
use aam_core::netmodel::{ModelFile, NetworkModel};
use aam_core::study::{
    contingency_sweep, default_candidates, max_transfer, ContingencyId, PatternFile, TransferPattern,
};
use aam_core::update::{fast_thresholds, original_thresholds, TopologyChange};
use serde::Deserialize;

#[derive(Deserialize)]
struct Row {
    id: String,
    p_mod: f64,
    theta_mod: f64,
}

#[derive(Deserialize)]
struct Pair {
    warning: f64,
    emergency: f64,
}

#[derive(Deserialize)]
struct Oracle {
    change: Vec<String>,
    tau: f64,
    original: Pair,
    fast: Pair,
    p_mod_with_change: f64,
    b_mod_with_change: f64,
    sweep: Vec<Row>,
    spearman: f64,
    max_weight_closeness: f64,
}

#[derive(Deserialize)]
struct Fixture {
    model: ModelFile,
    area: AreaDefinition,
    pattern: PatternFile,
    oracle: Oracle,
}

struct Loaded {
    model: NetworkModel,
    area: Area,
    pattern: TransferPattern,
    oracle: Oracle,
}

fn load(name: &str) -> Loaded {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    let f: Fixture = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let model = NetworkModel::from_file(f.model).unwrap();
    let area = Area::new(&model, f.area).unwrap();
    let pattern = TransferPattern::from_file(&model, &f.pattern).unwrap();
    Loaded {
        model,
        area,
        pattern,
        oracle: f.oracle,
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Average ranks, ties sharing the mean position.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn check_sweep(name: &str) {
    let fx = load(name);
    let change = TopologyChange::new(fx.oracle.change.iter().cloned())
        .outage(&fx.model)
        .unwrap();
    let cands = default_candidates(&fx.model, &fx.area, &change);
    let sweep = contingency_sweep(&fx.model, &fx.area, &fx.pattern, &cands, &change).unwrap();
    let got: HashMap<String, (f64, f64)> = sweep
        .results
        .iter()
        .filter_map(|r| match &r.contingency_id {
            ContingencyId::Branch(id) if !r.islanding => {
                Some((id.as_str().to_owned(), (r.p_mod.unwrap(), r.theta_mod.unwrap())))
            }
            _ => None,
        })
        .collect();
    assert_eq!(got.len(), fx.oracle.sweep.len());
    for row in &fx.oracle.sweep {
        let (p, th) = got[&row.id];
        assert!((p - row.p_mod).abs() < 1e-8, "{} p {p} vs {}", row.id, row.p_mod);
        assert!(
            (th - row.theta_mod).abs() < 1e-8,
            "{} theta {th} vs {}",
            row.id,
            row.theta_mod
        );
    }
    let base = max_transfer(&fx.model, &fx.area, &fx.pattern, &change).unwrap();
    assert!(rel(base.p_mod, fx.oracle.p_mod_with_change) < 1e-10);
    let w = fx.area.weights(&fx.model, &change).unwrap();
    assert!(rel(w.b_mod, fx.oracle.b_mod_with_change) < 1e-10);
}

#[test]
fn capped_sweep_matches_oracle() {
    check_sweep("corridor_capped.json");
}

#[test]
fn uncapped_sweep_matches_oracle() {
    check_sweep("corridor_uncapped.json");
}

fn check_thresholds(name: &str) -> (f64, f64) {
    let fx = load(name);
    let change = TopologyChange::new(fx.oracle.change.iter().cloned());
    let outage = change.outage(&fx.model).unwrap();
    let cands = default_candidates(&fx.model, &fx.area, &outage);
    let orig = original_thresholds(&fx.model, &fx.area, &fx.pattern, &change, &cands, fx.oracle.tau).unwrap();
    let fast = fast_thresholds(&fx.model, &fx.area, &fx.pattern, &change, &cands).unwrap();
    assert!(rel(orig.thresholds.warning, fx.oracle.original.warning) < 1e-9);
    assert!(rel(orig.thresholds.emergency, fx.oracle.original.emergency) < 1e-9);
    assert!(rel(fast.thresholds.warning, fx.oracle.fast.warning) < 1e-9);
    assert!(rel(fast.thresholds.emergency, fx.oracle.fast.emergency) < 1e-9);
    assert_eq!(fast.max_transfer_evaluations, 1);
    let evaluated = orig.angles.iter().filter(|a| a.theta_mod.is_some()).count();
    assert!(orig.max_transfer_evaluations > evaluated);
    (
        rel(fast.thresholds.emergency, orig.thresholds.emergency),
        rel(fast.thresholds.warning, orig.thresholds.warning),
    )
}

#[test]
fn capped_fast_update_within_bounds() {
    let (e, w) = check_thresholds("corridor_capped.json");
    assert!(e <= 0.03, "emergency mismatch {e}");
    assert!(w <= 0.10, "warning mismatch {w}");
}

#[test]
fn uncapped_thresholds_match_oracle() {
    check_thresholds("corridor_uncapped.json");
}

#[test]
fn angle_falls_as_power_rises() {
    let fx = load("corridor_uncapped.json");
    let p: Vec<f64> = fx.oracle.sweep.iter().map(|r| r.p_mod).collect();
    let th: Vec<f64> = fx.oracle.sweep.iter().map(|r| r.theta_mod).collect();
    let rho = spearman(&p, &th);
    assert!((rho - fx.oracle.spearman).abs() < 1e-9);
    assert!(rho <= -0.8, "rho {rho}");

    let change = TopologyChange::new(fx.oracle.change.iter().cloned())
        .outage(&fx.model)
        .unwrap();
    let cands = default_candidates(&fx.model, &fx.area, &change);
    let sweep = contingency_sweep(&fx.model, &fx.area, &fx.pattern, &cands, &change).unwrap();
    let (p, th): (Vec<f64>, Vec<f64>) = sweep
        .results
        .iter()
        .filter(|r| !r.contingency_id.is_base() && !r.islanding)
        .map(|r| (r.p_mod.unwrap(), r.theta_mod.unwrap()))
        .unzip();
    assert!(spearman(&p, &th) <= -0.8);
}

fn closeness(name: &str) -> f64 {
    let fx = load(name);
    let change = TopologyChange::new(fx.oracle.change.iter().cloned())
        .outage(&fx.model)
        .unwrap();
    let cands = default_candidates(&fx.model, &fx.area, &change);
    let sweep = contingency_sweep(&fx.model, &fx.area, &fx.pattern, &cands, &change).unwrap();
    let limiting = fx.pattern.at(sweep.limiting_lambda);
    let w = fx.area.weights(&fx.model, &change).unwrap();
    let mut worst: f64 = 0.0;
    for id in &cands {
        let k = fx.model.branch_index(id.as_str()).unwrap();
        let out = change.with(k);
        if !fx.model.is_connected(&out) {
            continue;
        }
        let th = fx.model.solve_dc(&limiting, &out).unwrap();
        let wk = fx.area.weights(&fx.model, &out).unwrap();
        let pre = fx.area.angle_of(&w, &th).unwrap();
        let post = fx.area.angle_of(&wk, &th).unwrap();
        worst = worst.max(rel(pre, post));
    }
    worst
}

#[test]
fn pre_and_post_weights_agree() {
    for name in ["corridor_capped.json", "corridor_uncapped.json"] {
        let c = closeness(name);
        let fx = load(name);
        assert!((c - fx.oracle.max_weight_closeness).abs() < 1e-9, "{name}: {c}");
        assert!(c <= 0.05, "{name}: {c}");
    }
}

#[test]
fn spearman_helper() {
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    // scipy.stats.spearmanr([1,2,2,3],[1,3,2,4]) = 0.9486832980505138
    assert!((spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]) - 0.9486832980505138).abs() < 1e-12);
}
