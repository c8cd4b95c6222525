//! Real-time area angle monitor.
//!
//! Frames are ingested per channel (unwrapped, last value held through BAD
//! and MISSING samples), then once per aligned frame period the boundary
//! vector is assembled and the area angle classified.
//!
//! Each alarm level is debounced on its own:
//!
//! ```text
//!   angle ≥ warning_ope   held t_area   → warning level on
//!   angle < warning_ope   held t_area   → warning level off
//!   (same for emergency_ope)
//!
//!   reported = EMERGENCY if emergency on, else WARNING if warning on,
//!              else NORMAL
//! ```
//!
//! While any needed boundary bus is stale past `stale_limit` the reported
//! status is DATA_UNAVAILABLE and both debouncers are frozen with their
//! pending timers cleared.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::area::BoundaryWeights;
use crate::netmodel::BusId;
use crate::pac::{estimate_boundary_angles, AngleSource, Impedance, LseInput, PacTable, Phasor};
use crate::study::ThresholdSet;
use crate::wire::PhasorFrame;

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("frame for stream {stream} at {timestamp_us} is older than {last_us}")]
    OutOfOrderFrame {
        stream: u16,
        timestamp_us: u64,
        last_us: u64,
    },
    #[error("invalid monitor configuration: {0}")]
    Config(String),
    #[error("failed to read file: {0}")]
    Io(#[from] io::Error),
    #[error("failed to parse file: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Normal,
    Warning,
    Emergency,
    DataUnavailable,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Normal => "NORMAL",
            Self::Warning => "WARNING",
            Self::Emergency => "EMERGENCY",
            Self::DataUnavailable => "DATA_UNAVAILABLE",
        }
    }

    /// Alarm severity; DATA_UNAVAILABLE has none.
    pub fn severity(self) -> Option<u8> {
        match self {
            Self::Normal => Some(0),
            Self::Warning => Some(1),
            Self::Emergency => Some(2),
            Self::DataUnavailable => None,
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Status {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "NORMAL" => Ok(Self::Normal),
            "WARNING" => Ok(Self::Warning),
            "EMERGENCY" => Ok(Self::Emergency),
            "DATA_UNAVAILABLE" => Ok(Self::DataUnavailable),
            other => Err(format!("unknown status `{other}`")),
        }
    }
}

/// Instantaneous class of an angle against operation-frame thresholds.
pub fn instantaneous_class(angle: f64, thresholds: &ThresholdSet) -> Status {
    if angle >= thresholds.emergency_ope {
        Status::Emergency
    } else if angle >= thresholds.warning_ope {
        Status::Warning
    } else {
        Status::Normal
    }
}

/// Binds one angle channel to a boundary bus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AngleBinding {
    #[serde(default)]
    pub stream: u16,
    pub channel: u16,
    pub bus: BusId,
}

/// Single-line LSE inputs for a boundary bus. Channel numbers refer to
/// `stream`. Magnitude channels are optional and default to 1.0 p.u.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LseBinding {
    pub bus: BusId,
    #[serde(default)]
    pub stream: u16,
    pub v_channel: u16,
    pub i_channel: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_mag_channel: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_mag_channel: Option<u16>,
    pub z: Impedance,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelMap {
    pub angles: Vec<AngleBinding>,
    #[serde(default)]
    pub lse: Vec<LseBinding>,
}

type ChannelKey = (u16, u16);

impl ChannelMap {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MonitorError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Channel `i` of `stream` bound to `buses[i]`.
    pub fn sequential(stream: u16, buses: &[BusId]) -> Self {
        Self {
            angles: buses
                .iter()
                .enumerate()
                .map(|(i, b)| AngleBinding {
                    stream,
                    channel: i as u16,
                    bus: b.clone(),
                })
                .collect(),
            lse: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), MonitorError> {
        let mut buses = HashSet::new();
        let mut keys = HashSet::new();
        for b in &self.angles {
            if !buses.insert(&b.bus) {
                return Err(MonitorError::Config(format!("bus `{}` bound twice", b.bus)));
            }
            if !keys.insert((b.stream, b.channel)) {
                return Err(MonitorError::Config(format!(
                    "channel {}:{} bound twice",
                    b.stream, b.channel
                )));
            }
        }
        Ok(())
    }

    pub fn streams(&self) -> BTreeSet<u16> {
        self.angles
            .iter()
            .map(|b| b.stream)
            .chain(self.lse.iter().map(|l| l.stream))
            .collect()
    }

    fn angle_keys(&self) -> HashSet<ChannelKey> {
        self.angles
            .iter()
            .map(|b| (b.stream, b.channel))
            .chain(
                self.lse
                    .iter()
                    .flat_map(|l| [(l.stream, l.v_channel), (l.stream, l.i_channel)]),
            )
            .collect()
    }

    fn magnitude_keys(&self) -> HashSet<ChannelKey> {
        self.lse
            .iter()
            .flat_map(|l| {
                l.v_mag_channel
                    .into_iter()
                    .chain(l.i_mag_channel)
                    .map(move |c| (l.stream, c))
            })
            .collect()
    }
}

/// Everything the monitor needs besides the channel map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub boundary: Vec<BusId>,
    pub weights: BoundaryWeights,
    pub thresholds: ThresholdSet,
    #[serde(default)]
    pub pac: PacTable,
    /// Seconds.
    #[serde(default = "default_t_area")]
    pub t_area: f64,
    /// Hz.
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
    /// Seconds.
    #[serde(default = "default_stale_limit")]
    pub stale_limit: f64,
}

fn default_t_area() -> f64 {
    5.0
}

fn default_frame_rate() -> f64 {
    30.0
}

fn default_stale_limit() -> f64 {
    1.0
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<(), MonitorError> {
        let bad = |m: &str| Err(MonitorError::Config(m.to_owned()));
        if self.t_area.is_nan() || self.t_area <= 0.0 {
            return bad("t_area must be positive");
        }
        if self.stale_limit.is_nan() || self.stale_limit <= 0.0 {
            return bad("stale_limit must be positive");
        }
        if self.frame_rate.is_nan() || self.frame_rate <= 0.0 {
            return bad("frame_rate must be positive");
        }
        if self.weights.len() != self.boundary.len() {
            return bad("weights and boundary differ in length");
        }
        if self.thresholds.warning_ope > self.thresholds.emergency_ope {
            return bad("warning threshold above emergency threshold");
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MonitorError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    fn stale_limit_us(&self) -> u64 {
        seconds_to_us(self.stale_limit)
    }
}

pub(crate) fn seconds_to_us(s: f64) -> u64 {
    (s * 1e6).round() as u64
}

/// Wraps an angle difference into [−180, 180).
pub fn wrap_degrees(a: f64) -> f64 {
    if (-180.0..180.0).contains(&a) {
        return a;
    }
    let w = (a + 180.0).rem_euclid(360.0) - 180.0;
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// Hysteresis on one boolean condition with a symmetric hold time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Debounce {
    pub on: bool,
    /// Start of the current run where the raw condition differs from `on`.
    pub pending_since: Option<u64>,
}

impl Debounce {
    fn step(&mut self, condition: bool, now: u64, hold_us: u64) -> bool {
        if condition == self.on {
            self.pending_since = None;
            return false;
        }
        let since = *self.pending_since.get_or_insert(now);
        if now.saturating_sub(since) >= hold_us {
            self.on = condition;
            self.pending_since = None;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertState {
    /// Reported status.
    pub status: Status,
    pub warning: Debounce,
    pub emergency: Debounce,
    pub last_area_angle: Option<f64>,
    pub last_timestamp_us: Option<u64>,
}

impl Default for AlertState {
    fn default() -> Self {
        Self {
            status: Status::Normal,
            warning: Debounce::default(),
            emergency: Debounce::default(),
            last_area_angle: None,
            last_timestamp_us: None,
        }
    }
}

impl AlertState {
    /// Alarm level the debouncers currently hold.
    pub fn level(&self) -> Status {
        if self.emergency.on {
            Status::Emergency
        } else if self.warning.on {
            Status::Warning
        } else {
            Status::Normal
        }
    }

    /// Level the state is currently timing towards, if any, and since when.
    pub fn candidate(&self) -> Option<(Status, u64)> {
        if let Some(t) = self.emergency.pending_since {
            let s = if self.emergency.on {
                if self.warning.on {
                    Status::Warning
                } else {
                    Status::Normal
                }
            } else {
                Status::Emergency
            };
            return Some((s, t));
        }
        self.warning.pending_since.map(|t| {
            (
                if self.warning.on {
                    Status::Normal
                } else {
                    Status::Warning
                },
                t,
            )
        })
    }
}

/// Next alert state for one tick. `angle = None` means data unavailable.
pub fn classify_status(
    state: &AlertState,
    angle: Option<f64>,
    now_us: u64,
    thresholds: &ThresholdSet,
    t_area: f64,
) -> AlertState {
    let mut next = state.clone();
    next.last_timestamp_us = Some(now_us);
    next.last_area_angle = angle;
    match angle {
        None => {
            next.warning.pending_since = None;
            next.emergency.pending_since = None;
            next.status = Status::DataUnavailable;
        }
        Some(a) => {
            let hold = seconds_to_us(t_area);
            next.warning.step(a >= thresholds.warning_ope, now_us, hold);
            next.emergency.step(a >= thresholds.emergency_ope, now_us, hold);
            next.status = next.level();
        }
    }
    next
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct ChannelState {
    last_raw: Option<f64>,
    value: Option<f64>,
    last_usable_us: Option<u64>,
    held: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryAngle {
    pub bus: BusId,
    /// Degrees; `None` when unavailable.
    pub angle: Option<f64>,
    pub source: Option<AngleSource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub from: Status,
    pub to: Status,
}

/// Output of one evaluation tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub timestamp_us: u64,
    pub area_angle: Option<f64>,
    pub status: Status,
    pub transitions: Vec<Transition>,
    pub boundary_angles: Vec<BoundaryAngle>,
}

impl TickRecord {
    /// One status-log line, newline included.
    pub fn status_line(&self) -> String {
        format_status_line(self.timestamp_us, self.area_angle, self.status)
    }
}

pub const STATUS_LOG_HEADER: &str = "timestamp_us,area_angle_deg,status\n";

pub fn format_status_line(timestamp_us: u64, angle: Option<f64>, status: Status) -> String {
    match angle {
        Some(a) => format!("{timestamp_us},{a:.6},{status}\n"),
        None => format!("{timestamp_us},,{status}\n"),
    }
}

/// Writes the status log CSV.
pub struct StatusLog<W: Write> {
    out: W,
}

impl<W: Write> StatusLog<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        out.write_all(STATUS_LOG_HEADER.as_bytes())?;
        Ok(Self { out })
    }

    pub fn record(&mut self, tick: &TickRecord) -> io::Result<()> {
        self.out.write_all(tick.status_line().as_bytes())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// The single-writer monitor.
#[derive(Debug, Clone)]
pub struct Monitor {
    config: MonitorConfig,
    map: ChannelMap,
    angle_keys: HashSet<ChannelKey>,
    tracked: HashSet<ChannelKey>,
    channels: HashMap<ChannelKey, ChannelState>,
    last_frame_us: HashMap<u16, u64>,
    state: AlertState,
    out_of_order: u64,
    ticks: u64,
}

impl Monitor {
    pub fn new(config: MonitorConfig, map: ChannelMap) -> Result<Self, MonitorError> {
        config.validate()?;
        map.validate()?;
        let angle_keys = map.angle_keys();
        let tracked = angle_keys.union(&map.magnitude_keys()).copied().collect();
        Ok(Self {
            config,
            map,
            angle_keys,
            tracked,
            channels: HashMap::new(),
            last_frame_us: HashMap::new(),
            state: AlertState::default(),
            out_of_order: 0,
            ticks: 0,
        })
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn state(&self) -> &AlertState {
        &self.state
    }

    pub fn out_of_order(&self) -> u64 {
        self.out_of_order
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    /// Updates per-channel values from one frame. Older frames for a
    /// stream are dropped and counted.
    pub fn ingest_frame(&mut self, frame: &PhasorFrame) -> Result<(), MonitorError> {
        if let Some(&last) = self.last_frame_us.get(&frame.stream_id) {
            if frame.timestamp_us < last {
                self.out_of_order += 1;
                return Err(MonitorError::OutOfOrderFrame {
                    stream: frame.stream_id,
                    timestamp_us: frame.timestamp_us,
                    last_us: last,
                });
            }
        }
        self.last_frame_us.insert(frame.stream_id, frame.timestamp_us);
        for (i, sample) in frame.channels.iter().enumerate() {
            let key = (frame.stream_id, i as u16);
            if !self.tracked.contains(&key) {
                continue;
            }
            let is_angle = self.angle_keys.contains(&key);
            let ch = self.channels.entry(key).or_default();
            if !sample.quality.is_usable() || !sample.angle.is_finite() {
                ch.held = true;
                continue;
            }
            let raw = sample.angle;
            ch.value = Some(match (is_angle, ch.last_raw, ch.value) {
                (true, Some(prev_raw), Some(prev)) => prev + wrap_degrees(raw - prev_raw),
                _ => raw,
            });
            ch.last_raw = Some(raw);
            ch.last_usable_us = Some(frame.timestamp_us);
            ch.held = false;
        }
        Ok(())
    }

    /// Value of a channel if it has been usable within the stale limit.
    fn channel_value(&self, key: ChannelKey, now: u64) -> Option<(f64, bool)> {
        let ch = self.channels.get(&key)?;
        let at = ch.last_usable_us?;
        if now.saturating_sub(at) > self.config.stale_limit_us() {
            return None;
        }
        Some((ch.value?, ch.held))
    }

    /// Boundary angles at `now`, or `None` if any bus cannot be resolved.
    fn assemble(&self, now: u64) -> Option<Vec<BoundaryAngle>> {
        let mut measured = HashMap::new();
        let mut held = HashSet::new();
        for b in &self.map.angles {
            match self.channel_value((b.stream, b.channel), now) {
                Some((v, h)) => {
                    measured.insert(b.bus.clone(), v);
                    if h {
                        held.insert(b.bus.clone());
                    }
                }
                // bound but stale past the limit
                None if self.config.boundary.contains(&b.bus) => return None,
                None => {}
            }
        }
        let mut lse = HashMap::new();
        for l in &self.map.lse {
            let get = |c: u16| self.channel_value((l.stream, c), now).map(|v| v.0);
            let mag = |c: Option<u16>| match c {
                Some(c) => get(c),
                None => Some(1.0),
            };
            if let (Some(va), Some(ia), Some(vm), Some(im)) = (
                get(l.v_channel),
                get(l.i_channel),
                mag(l.v_mag_channel),
                mag(l.i_mag_channel),
            ) {
                lse.insert(
                    l.bus.clone(),
                    LseInput {
                        v: Phasor::new(vm, va),
                        i: Phasor::new(im, ia),
                        z: l.z,
                    },
                );
            }
        }
        let est = estimate_boundary_angles(&self.config.boundary, &measured, &self.config.pac, &lse).ok()?;
        Some(
            self.config
                .boundary
                .iter()
                .zip(est)
                .map(|(bus, (angle, source))| BoundaryAngle {
                    bus: bus.clone(),
                    angle: Some(angle),
                    source: Some(if source == AngleSource::Measured && held.contains(bus) {
                        AngleSource::Stale
                    } else {
                        source
                    }),
                })
                .collect(),
        )
    }

    /// Computes the area angle at `now` and advances the alert state.
    pub fn evaluate_tick(&mut self, now_us: u64) -> TickRecord {
        self.ticks += 1;
        let boundary = self.assemble(now_us);
        let angle = boundary.as_ref().map(|b| {
            b.iter()
                .zip(&self.config.weights.weights)
                .map(|(a, w)| w * a.angle.unwrap_or(0.0))
                .sum::<f64>()
        });
        let before = self.state.status;
        self.state = classify_status(&self.state, angle, now_us, &self.config.thresholds, self.config.t_area);
        let after = self.state.status;
        let transitions = if before != after {
            vec![Transition {
                from: before,
                to: after,
            }]
        } else {
            Vec::new()
        };
        let boundary_angles = boundary.unwrap_or_else(|| {
            self.config
                .boundary
                .iter()
                .map(|bus| BoundaryAngle {
                    bus: bus.clone(),
                    angle: None,
                    source: None,
                })
                .collect()
        });
        TickRecord {
            timestamp_us: now_us,
            area_angle: angle,
            status: after,
            transitions,
            boundary_angles,
        }
    }

    /// Ingests every frame of one aligned instant, then ticks.
    pub fn process(&mut self, timestamp_us: u64, frames: &[PhasorFrame]) -> TickRecord {
        for f in frames {
            let _ = self.ingest_frame(f);
        }
        self.evaluate_tick(timestamp_us)
    }
}

/// Groups frames from several streams by timestamp.
///
/// An instant is released once every expected stream has delivered it, or
/// once some stream has moved `max_wait_us` past it.
#[derive(Debug, Clone)]
pub struct Aligner {
    expected: BTreeSet<u16>,
    max_wait_us: u64,
    pending: BTreeMap<u64, Vec<PhasorFrame>>,
    newest_us: u64,
    released_us: Option<u64>,
    pub late: u64,
}

impl Aligner {
    pub fn new(expected: BTreeSet<u16>, max_wait_us: u64) -> Self {
        Self {
            expected,
            max_wait_us,
            pending: BTreeMap::new(),
            newest_us: 0,
            released_us: None,
            late: 0,
        }
    }

    /// Adds a frame and returns the instants that became complete, oldest
    /// first.
    pub fn push(&mut self, frame: PhasorFrame) -> Vec<(u64, Vec<PhasorFrame>)> {
        let ts = frame.timestamp_us;
        if self.released_us.is_some_and(|r| ts <= r) {
            self.late += 1;
            return Vec::new();
        }
        self.newest_us = self.newest_us.max(ts);
        self.pending.entry(ts).or_default().push(frame);
        let mut out = Vec::new();
        while let Some((&t, frames)) = self.pending.first_key_value() {
            let complete = self.expected.iter().all(|s| frames.iter().any(|f| f.stream_id == *s));
            if complete || self.newest_us.saturating_sub(t) > self.max_wait_us {
                let (t, mut frames) = self.pending.pop_first().unwrap();
                frames.sort_by_key(|f| f.stream_id);
                self.released_us = Some(t);
                out.push((t, frames));
            } else {
                break;
            }
        }
        out
    }

    /// Releases everything still pending.
    pub fn flush(&mut self) -> Vec<(u64, Vec<PhasorFrame>)> {
        let out: Vec<_> = std::mem::take(&mut self.pending)
            .into_iter()
            .map(|(t, mut f)| {
                f.sort_by_key(|f| f.stream_id);
                (t, f)
            })
            .collect();
        if let Some((t, _)) = out.last() {
            self.released_us = Some(*t);
        }
        out
    }
}
