//! Python bindings. Files use the same JSON formats as the `aam` CLI;
//! results come back as plain dicts and lists.

use std::collections::HashMap;
use std::fmt::Display;

use aam_core::area::{Area, AreaDefinition};
use aam_core::mitigation::{allocate, simulate_mitigation};
use aam_core::monitor::{ChannelMap, Monitor, MonitorConfig, StatusLog};
use aam_core::netmodel::{NetworkModel, Outage};
use aam_core::pac::{lse_neighbor_angle, Impedance, Phasor};
use aam_core::replay::{read_replay_csv, write_replay_csv, Scenario};
use aam_core::study::{
    compensate_thresholds as compensate, contingency_sweep, default_candidates, select_warning_index, ModelThresholds,
    TransferPattern, DEFAULT_TAU,
};
use aam_core::update::{fast_thresholds, original_thresholds, TopologyChange};
use aam_core::wire::{self, ChannelSample, PhasorFrame, Quality};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;

fn err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Converts through JSON so Python sees the same shapes as the files.
fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn load(model: &str, area: &str) -> PyResult<(NetworkModel, Area)> {
    let model = NetworkModel::load(model).map_err(err)?;
    let def = AreaDefinition::load(area).map_err(err)?;
    let area = Area::new(&model, def).map_err(err)?;
    Ok((model, area))
}

/// Bus angles in degrees for per-unit injections keyed by bus id.
#[pyfunction]
#[pyo3(signature = (model, injections, outage=vec![]))]
fn solve_dc(model: &str, injections: HashMap<String, f64>, outage: Vec<String>) -> PyResult<HashMap<String, f64>> {
    let model = NetworkModel::load(model).map_err(err)?;
    let p = model
        .injections(injections.iter().map(|(k, v)| (k.as_str(), *v)))
        .map_err(err)?;
    let out = model.outage(outage).map_err(err)?;
    let th = model.solve_dc(&p, &out).map_err(err)?;
    Ok(model
        .buses()
        .iter()
        .zip(th.degrees())
        .map(|(b, a)| (b.id.to_string(), a))
        .collect())
}

/// Boundary weights and `b_mod`: `{"buses", "weights", "b_mod"}`.
#[pyfunction]
#[pyo3(signature = (model, area, outage=vec![]))]
fn weights<'py>(py: Python<'py>, model: &str, area: &str, outage: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    let (model, area) = load(model, area)?;
    let out = model.outage(outage).map_err(err)?;
    let w = area.weights(&model, &out).map_err(err)?;
    to_py(
        py,
        &serde_json::json!({"buses": area.boundary_ids(), "weights": w.weights, "b_mod": w.b_mod}),
    )
}

#[pyfunction]
fn area_angle(weights: Vec<f64>, angles: Vec<f64>) -> PyResult<f64> {
    if weights.len() != angles.len() {
        return Err(PyValueError::new_err("weights and angles differ in length"));
    }
    Ok(weights.iter().zip(&angles).map(|(w, a)| w * a).sum())
}

/// Contingency sweep and model-frame thresholds: `{"sweep", "warning", "emergency"}`.
#[pyfunction]
#[pyo3(signature = (model, area, pattern, tau=DEFAULT_TAU))]
fn study<'py>(py: Python<'py>, model: &str, area: &str, pattern: &str, tau: f64) -> PyResult<Bound<'py, PyAny>> {
    let (model, area) = load(model, area)?;
    let pattern = TransferPattern::load(&model, pattern).map_err(err)?;
    let none = Outage::none(&model);
    let cands = default_candidates(&model, &area, &none);
    let sweep = contingency_sweep(&model, &area, &pattern, &cands, &none).map_err(err)?;
    let t = sweep.thresholds(tau).map_err(err)?;
    to_py(
        py,
        &serde_json::json!({"sweep": sweep.results, "warning": t.warning, "emergency": t.emergency}),
    )
}

/// Thresholds after removing `removed` branches, by the fast or original
/// method: `{"warning", "emergency", "max_transfer_evaluations"}`.
#[pyfunction]
#[pyo3(signature = (model, area, pattern, removed, method="fast", tau=DEFAULT_TAU))]
fn update_thresholds<'py>(
    py: Python<'py>,
    model: &str,
    area: &str,
    pattern: &str,
    removed: Vec<String>,
    method: &str,
    tau: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let (model, area) = load(model, area)?;
    let pattern = TransferPattern::load(&model, pattern).map_err(err)?;
    let change = TopologyChange::new(removed);
    let cands = default_candidates(&model, &area, &change.outage(&model).map_err(err)?);
    let r = match method {
        "fast" => fast_thresholds(&model, &area, &pattern, &change, &cands),
        "original" => original_thresholds(&model, &area, &pattern, &change, &cands, tau),
        other => return Err(PyValueError::new_err(format!("unknown method {other:?}"))),
    }
    .map_err(err)?;
    to_py(
        py,
        &serde_json::json!({
            "warning": r.thresholds.warning,
            "emergency": r.thresholds.emergency,
            "max_transfer_evaluations": r.max_transfer_evaluations,
        }),
    )
}

/// 1-based index of the first three-wide window with sample std ≥ `tau`.
#[pyfunction]
fn warning_index(p_mod: Vec<f64>, tau: f64) -> Option<usize> {
    select_warning_index(&p_mod, tau)
}

#[pyfunction]
fn compensate_thresholds<'py>(
    py: Python<'py>,
    warning: f64,
    emergency: f64,
    theta_mod_normal: f64,
    theta_ope_normal: f64,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(
        py,
        &compensate(
            ModelThresholds { warning, emergency },
            theta_mod_normal,
            theta_ope_normal,
        ),
    )
}

/// Load-shed plan for `total_mw` and its effect at the pattern's base
/// injections: `{"plan", "theta_before", "theta_after"}`.
#[pyfunction]
fn mitigate<'py>(
    py: Python<'py>,
    model: &str,
    area: &str,
    pattern: &str,
    total_mw: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let (model, area) = load(model, area)?;
    let pattern = TransferPattern::load(&model, pattern).map_err(err)?;
    let w = area.weights(&model, &Outage::none(&model)).map_err(err)?;
    let plan = allocate(&w, &area, total_mw).map_err(err)?;
    let eff = simulate_mitigation(&model, &area, &w, &pattern.base, &pattern.direction, &plan, 100.0).map_err(err)?;
    to_py(
        py,
        &serde_json::json!({"plan": plan, "theta_before": eff.theta_before, "theta_after": eff.theta_after}),
    )
}

/// Angle in degrees of `V − z·I`; phasors are `(magnitude, degrees)`,
/// impedance `(r, x)`.
#[pyfunction]
fn lse_angle(v: (f64, f64), i: (f64, f64), z: (f64, f64)) -> f64 {
    lse_neighbor_angle(
        Phasor::new(v.0, v.1),
        Phasor::new(i.0, i.1),
        Impedance { r: z.0, x: z.1 },
    )
}

/// One wire frame; channels are `(angle, quality code)` pairs.
#[pyfunction]
fn encode_frame<'py>(
    py: Python<'py>,
    stream_id: u16,
    timestamp_us: u64,
    channels: Vec<(f64, u8)>,
) -> PyResult<Bound<'py, PyBytes>> {
    let channels = channels
        .into_iter()
        .map(|(angle, q)| {
            let quality = Quality::from_u8(q).ok_or_else(|| PyValueError::new_err(format!("bad quality code {q}")))?;
            Ok(ChannelSample { angle, quality })
        })
        .collect::<PyResult<_>>()?;
    let frame = PhasorFrame {
        stream_id,
        timestamp_us,
        channels,
    };
    Ok(PyBytes::new(py, &wire::encode_frame(&frame).map_err(err)?))
}

/// `(stream_id, timestamp_us, [(angle, quality code)])`.
type FrameTuple = (u16, u64, Vec<(f64, u8)>);

/// Inverse of [`encode_frame`].
#[pyfunction]
fn decode_frame(data: &[u8]) -> PyResult<FrameTuple> {
    let f = wire::decode_frame(data).map_err(err)?;
    let channels = f.channels.iter().map(|c| (c.angle, c.quality as u8)).collect();
    Ok((f.stream_id, f.timestamp_us, channels))
}

/// Writes the scenario's replay CSV; returns the frame count.
#[pyfunction]
fn synthesize(scenario: &str, out: &str) -> PyResult<usize> {
    let frames = Scenario::load(scenario).and_then(|s| s.synthesize()).map_err(err)?;
    let file = std::fs::File::create(out).map_err(err)?;
    write_replay_csv(file, &frames).map_err(err)?;
    Ok(frames.len())
}

/// Runs the monitor over a single-stream replay CSV; returns the status log.
#[pyfunction]
#[pyo3(signature = (config, map, replay, stream_id=1))]
fn monitor_file(config: &str, map: &str, replay: &str, stream_id: u16) -> PyResult<String> {
    let config = MonitorConfig::load(config).map_err(err)?;
    let map = ChannelMap::load(map).map_err(err)?;
    let loaded = read_replay_csv(std::fs::File::open(replay).map_err(err)?, stream_id).map_err(err)?;
    let mut mon = Monitor::new(config, map).map_err(err)?;
    let mut log = StatusLog::new(Vec::new()).map_err(err)?;
    for f in loaded.frames {
        let ts = f.timestamp_us;
        log.record(&mon.process(ts, &[f])).map_err(err)?;
    }
    String::from_utf8(log.into_inner()).map_err(err)
}

#[pymodule]
fn aam(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(solve_dc, m)?)?;
    m.add_function(wrap_pyfunction!(weights, m)?)?;
    m.add_function(wrap_pyfunction!(area_angle, m)?)?;
    m.add_function(wrap_pyfunction!(study, m)?)?;
    m.add_function(wrap_pyfunction!(update_thresholds, m)?)?;
    m.add_function(wrap_pyfunction!(warning_index, m)?)?;
    m.add_function(wrap_pyfunction!(compensate_thresholds, m)?)?;
    m.add_function(wrap_pyfunction!(mitigate, m)?)?;
    m.add_function(wrap_pyfunction!(lse_angle, m)?)?;
    m.add_function(wrap_pyfunction!(encode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(decode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(monitor_file, m)?)?;
    Ok(())
}
