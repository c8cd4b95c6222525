//! Scenario synthesis and recorded-stream playback.
//!
//! A scenario is a base operating point plus timed events. Between events
//! the network sits at its DC solution; each channel follows the steady
//! target through a first-order lag (`τ = 0.5 s`), so a step change takes a
//! few seconds to settle. Optional Gaussian noise is added per channel from
//! a seeded generator.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::area::{AreaDefinition, AreaError};
use crate::monitor::wrap_degrees;
use crate::netmodel::{BranchId, BusId, NetworkError, NetworkModel, Outage};
use crate::study::DEFAULT_MVA_BASE;
use crate::wire::{ChannelSample, PhasorFrame, Quality};

/// Time constant of the synthetic response, seconds.
pub const LAG_TAU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Area(#[from] AreaError),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("network islanded by event at t = {t} s")]
    IslandedAtEvent { t: f64 },
    #[error("failed to read file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    BranchOutage { ids: Vec<BranchId> },
    InjectionStep { bus: BusId, delta_mw: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    /// Seconds from scenario start.
    pub t: f64,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Model file, relative to the scenario file.
    pub model: PathBuf,
    /// Area file, relative to the scenario file.
    pub area: PathBuf,
    /// Starting injections, per unit.
    #[serde(default)]
    pub injections: BTreeMap<BusId, f64>,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
    /// Seconds.
    pub duration: f64,
    /// Hz.
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
    /// Degrees.
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_stream_id")]
    pub stream_id: u16,
    #[serde(default)]
    pub start_timestamp_us: u64,
    #[serde(default = "default_mva_base")]
    pub mva_base: f64,
    /// Buses streamed as channels 0.., default the area boundary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<BusId>>,
}

fn default_frame_rate() -> f64 {
    30.0
}

fn default_stream_id() -> u16 {
    1
}

fn default_mva_base() -> f64 {
    DEFAULT_MVA_BASE
}

impl Scenario {
    /// Reads a scenario and makes its file references absolute.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReplayError> {
        let path = path.as_ref();
        let mut s: Scenario = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        s.model = dir.join(&s.model);
        s.area = dir.join(&s.area);
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        let bad = |m: String| Err(ReplayError::Invalid(m));
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return bad("frame_rate must be positive".into());
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return bad("duration must be non-negative".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be non-negative".into());
        }
        let mut last = 0.0;
        for e in &self.events {
            if !(e.t >= 0.0 && e.t <= self.duration) {
                return bad(format!("event time {} outside [0, {}]", e.t, self.duration));
            }
            if e.t < last {
                return bad("events are not in time order".into());
            }
            last = e.t;
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.frame_rate + 1e-9).floor() as usize + 1
    }

    /// Loads the referenced model and area, then synthesizes.
    pub fn synthesize(&self) -> Result<Vec<PhasorFrame>, ReplayError> {
        let model = NetworkModel::load(&self.model)?;
        let channels = match &self.channels {
            Some(c) => c.clone(),
            None => AreaDefinition::load(&self.area)?.boundary_buses,
        };
        synthesize_scenario(self, &model, &channels)
    }
}

/// Frames for `scenario` on `model`, one channel per bus in `channels`.
pub fn synthesize_scenario(
    scenario: &Scenario,
    model: &NetworkModel,
    channels: &[BusId],
) -> Result<Vec<PhasorFrame>, ReplayError> {
    scenario.validate()?;
    let idx: Vec<usize> = channels
        .iter()
        .map(|b| model.bus_index(b.as_str()))
        .collect::<Result<_, _>>()?;

    // steady targets, one per segment
    let mut p = model.injections(scenario.injections.iter().map(|(k, v)| (k.as_str(), *v)))?;
    let mut outage = Outage::none(model);
    let solve = |p: &_, out: &Outage, t: f64| -> Result<Vec<f64>, ReplayError> {
        let th = model.solve_dc(p, out).map_err(|e| match e {
            NetworkError::IslandedNetwork { .. } => ReplayError::IslandedAtEvent { t },
            e => e.into(),
        })?;
        Ok(idx.iter().map(|&i| th.get(i).to_degrees()).collect())
    };
    let mut segments: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut start = 0.0;
    let mut events = scenario.events.iter().peekable();
    loop {
        // apply every event at `start`
        while let Some(e) = events.next_if(|e| e.t <= start) {
            match &e.action {
                Action::BranchOutage { ids } => {
                    for id in ids {
                        outage.insert(model.branch_index(id.as_str())?);
                    }
                }
                Action::InjectionStep { bus, delta_mw } => {
                    let i = model.bus_index(bus.as_str())?;
                    p.values_mut()[i] += delta_mw / scenario.mva_base;
                }
            }
        }
        segments.push((start, solve(&p, &outage, start)?));
        match events.peek() {
            Some(e) => start = e.t,
            None => break,
        }
    }

    let dt = 1.0 / scenario.frame_rate;
    let alpha = 1.0 - (-dt / LAG_TAU).exp();
    let noise = (scenario.noise_std > 0.0).then(|| Normal::new(0.0, scenario.noise_std).expect("validated std"));
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut y = segments[0].1.clone();
    let mut seg = 0;
    let n = scenario.frame_count();
    let mut frames = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * dt;
        while seg + 1 < segments.len() && segments[seg + 1].0 <= t + 1e-12 {
            seg += 1;
        }
        if k > 0 {
            for (yi, &target) in y.iter_mut().zip(&segments[seg].1) {
                *yi += (target - *yi) * alpha;
            }
        }
        let channels = y
            .iter()
            .map(|&v| {
                let v = match &noise {
                    Some(d) => v + d.sample(&mut rng),
                    None => v,
                };
                ChannelSample {
                    angle: wrap_degrees(v),
                    quality: Quality::Good,
                }
            })
            .collect();
        frames.push(PhasorFrame {
            stream_id: scenario.stream_id,
            timestamp_us: scenario.start_timestamp_us + (k as f64 * 1e6 / scenario.frame_rate).round() as u64,
            channels,
        });
    }
    Ok(frames)
}

/// Writes frames as replay CSV: `timestamp_us,ch0,ch0_q,ch1,ch1_q,...`.
/// All frames are expected to carry the same channel count.
pub fn write_replay_csv<W: Write>(out: W, frames: &[PhasorFrame]) -> Result<(), ReplayError> {
    let n = frames.first().map_or(0, |f| f.channels.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["timestamp_us".to_owned()];
    for c in 0..n {
        header.push(format!("ch{c}"));
        header.push(format!("ch{c}_q"));
    }
    w.write_record(&header)?;
    for f in frames {
        let mut row = vec![f.timestamp_us.to_string()];
        for c in &f.channels {
            row.push(c.angle.to_string());
            row.push((c.quality as u8).to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayLoad {
    pub frames: Vec<PhasorFrame>,
    /// Rows skipped because they did not parse.
    pub malformed: usize,
}

/// Parses replay CSV. Bad rows are skipped and counted. Frames come back
/// sorted by timestamp.
pub fn read_replay_csv<R: Read>(input: R, stream_id: u16) -> Result<ReplayLoad, ReplayError> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header = r.headers()?.clone();
    if header.get(0) != Some("timestamp_us") || header.len() % 2 != 1 {
        return Err(ReplayError::Invalid("bad replay header".into()));
    }
    let nchan = (header.len() - 1) / 2;
    let mut out = ReplayLoad::default();
    for rec in r.records() {
        let parsed = rec.ok().and_then(|rec| {
            if rec.len() != header.len() {
                return None;
            }
            let timestamp_us = rec[0].trim().parse().ok()?;
            let channels = (0..nchan)
                .map(|c| {
                    let angle = rec[1 + 2 * c].trim().parse().ok()?;
                    let q = rec[2 + 2 * c].trim().parse().ok()?;
                    Some(ChannelSample {
                        angle,
                        quality: Quality::from_u8(q)?,
                    })
                })
                .collect::<Option<Vec<_>>>()?;
            Some(PhasorFrame {
                stream_id,
                timestamp_us,
                channels,
            })
        });
        match parsed {
            Some(f) => out.frames.push(f),
            None => out.malformed += 1,
        }
    }
    out.frames.sort_by_key(|f| f.timestamp_us);
    Ok(out)
}

/// Emission offset of each frame from the first, scaled by `1/speed`.
/// An infinite speed gives all zeros.
pub fn schedule_offsets(frames: &[PhasorFrame], speed: f64) -> Vec<Duration> {
    let t0 = frames.first().map_or(0, |f| f.timestamp_us);
    frames
        .iter()
        .map(|f| {
            if speed.is_infinite() {
                Duration::ZERO
            } else {
                Duration::from_secs_f64((f.timestamp_us - t0) as f64 / 1e6 / speed)
            }
        })
        .collect()
}

/// Calls `emit` for every frame at its scheduled wall-clock time.
pub fn pace<F: FnMut(&PhasorFrame)>(frames: &[PhasorFrame], speed: f64, mut emit: F) {
    let start = Instant::now();
    for (f, off) in frames.iter().zip(schedule_offsets(frames, speed)) {
        if let Some(wait) = off.checked_sub(start.elapsed()) {
            std::thread::sleep(wait);
        }
        emit(f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayStats {
    pub delivered: usize,
    pub malformed: usize,
}

/// Plays a replay CSV file through `emit` at `speed`.
pub fn replay_file<F: FnMut(&PhasorFrame)>(
    path: impl AsRef<Path>,
    stream_id: u16,
    speed: f64,
    emit: F,
) -> Result<ReplayStats, ReplayError> {
    if speed.is_nan() || speed <= 0.0 {
        return Err(ReplayError::Invalid("speed must be positive".into()));
    }
    let load = read_replay_csv(std::fs::File::open(path)?, stream_id)?;
    pace(&load.frames, speed, emit);
    Ok(ReplayStats {
        delivered: load.frames.len(),
        malformed: load.malformed,
    })
}
