//! The live monitor loop and what it publishes.
//!
//! One task owns the [`Monitor`] and is the only writer. After each tick it
//! replaces the shared snapshot, appends to the history ring and broadcasts
//! a tick event, in that order. Readers never block the writer.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::sync::{Arc, RwLock};

use aam_core::monitor::{
    Aligner, ChannelMap, Monitor, MonitorConfig, MonitorError, Status, StatusLog, TickRecord, Transition,
};
use aam_core::netmodel::BusId;
use aam_core::pac::AngleSource;
use aam_core::study::ThresholdSet;
use aam_core::wire::PhasorFrame;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, watch};

use crate::stream::{FrameReceiver, StreamError};

/// One hour of ticks at 30 Hz.
pub const DEFAULT_HISTORY: usize = 30 * 3600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusAngle {
    /// Degrees; `null` when unavailable.
    pub angle: Option<f64>,
    pub source: Option<AngleSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub timestamp_us: u64,
    pub area_angle: Option<f64>,
    pub status: Status,
    pub thresholds: ThresholdSet,
    pub boundary_angles: BTreeMap<BusId, BusAngle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub timestamp_us: u64,
    pub area_angle: Option<f64>,
    pub status: Status,
    pub transitions: Vec<Transition>,
}

impl StreamEvent {
    pub fn of(tick: &TickRecord) -> Self {
        Self {
            timestamp_us: tick.timestamp_us,
            area_angle: tick.area_angle,
            status: tick.status,
            transitions: tick.transitions.clone(),
        }
    }
}

/// WebSocket message: a full snapshot first, ticks afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Snapshot(Snapshot),
    Tick(StreamEvent),
}

/// Bounded in-memory tick history.
#[derive(Debug)]
pub struct History {
    ring: RwLock<VecDeque<Arc<StreamEvent>>>,
    capacity: usize,
}

impl History {
    pub fn new(capacity: usize) -> Self {
        Self {
            ring: RwLock::new(VecDeque::with_capacity(capacity.min(4096))),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&self, ev: Arc<StreamEvent>) {
        let mut ring = self.ring.write().unwrap();
        if ring.len() == self.capacity {
            ring.pop_front();
        }
        ring.push_back(ev);
    }

    /// Events with `from ≤ timestamp ≤ to`, oldest first.
    pub fn range(&self, from: Option<u64>, to: Option<u64>) -> Vec<StreamEvent> {
        let ring = self.ring.read().unwrap();
        let lo = from.unwrap_or(0);
        let hi = to.unwrap_or(u64::MAX);
        let start = ring.partition_point(|e| e.timestamp_us < lo);
        ring.range(start..)
            .take_while(|e| e.timestamp_us <= hi)
            .map(|e| (**e).clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.ring.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Where the monitor publishes; shared with the API.
#[derive(Debug)]
pub struct Hub {
    thresholds: ThresholdSet,
    snapshot: watch::Sender<Option<Arc<Snapshot>>>,
    events: broadcast::Sender<Arc<StreamEvent>>,
    pub history: History,
}

impl Hub {
    pub fn new(thresholds: ThresholdSet, history: usize, event_queue: usize) -> Self {
        Self {
            thresholds,
            snapshot: watch::channel(None).0,
            events: broadcast::channel(event_queue.max(1)).0,
            history: History::new(history),
        }
    }

    pub fn thresholds(&self) -> &ThresholdSet {
        &self.thresholds
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.snapshot.borrow().clone()
    }

    pub fn watch_snapshot(&self) -> watch::Receiver<Option<Arc<Snapshot>>> {
        self.snapshot.subscribe()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<StreamEvent>> {
        self.events.subscribe()
    }

    pub fn publish(&self, tick: &TickRecord) {
        let snap = Snapshot {
            timestamp_us: tick.timestamp_us,
            area_angle: tick.area_angle,
            status: tick.status,
            thresholds: self.thresholds,
            boundary_angles: tick
                .boundary_angles
                .iter()
                .map(|b| {
                    (
                        b.bus.clone(),
                        BusAngle {
                            angle: b.angle,
                            source: b.source,
                        },
                    )
                })
                .collect(),
        };
        let ev = Arc::new(StreamEvent::of(tick));
        self.snapshot.send_replace(Some(Arc::new(snap)));
        self.history.push(ev.clone());
        let _ = self.events.send(ev);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PipelineStats {
    pub frames: u64,
    pub ticks: u64,
    /// Frames older than the last seen for their stream.
    pub out_of_order: u64,
    /// Frames that arrived after their instant was already evaluated.
    pub late: u64,
    /// Messages that failed to decode, over all receivers.
    pub rejected: u64,
}

/// Aligner, monitor, status log and hub, driven one frame at a time.
pub struct Pipeline {
    monitor: Monitor,
    aligner: Aligner,
    hub: Arc<Hub>,
    log: Option<StatusLog<Box<dyn Write + Send>>>,
    frames: u64,
}

impl Pipeline {
    pub fn new(config: MonitorConfig, map: ChannelMap, hub: Arc<Hub>) -> Result<Self, MonitorError> {
        let streams = map.streams();
        // wait up to three frame periods for a missing stream
        let max_wait_us = (3e6 / config.frame_rate).round() as u64;
        Ok(Self {
            monitor: Monitor::new(config, map)?,
            aligner: Aligner::new(streams, max_wait_us),
            hub,
            log: None,
            frames: 0,
        })
    }

    pub fn with_status_log(mut self, out: Box<dyn Write + Send>) -> std::io::Result<Self> {
        self.log = Some(StatusLog::new(out)?);
        Ok(self)
    }

    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    pub fn monitor(&self) -> &Monitor {
        &self.monitor
    }

    pub fn push_frame(&mut self, frame: PhasorFrame) -> std::io::Result<Vec<TickRecord>> {
        self.frames += 1;
        let ready = self.aligner.push(frame);
        self.evaluate(ready)
    }

    /// Evaluates whatever is still buffered; call at end of input.
    pub fn finish(&mut self) -> std::io::Result<Vec<TickRecord>> {
        let ready = self.aligner.flush();
        let ticks = self.evaluate(ready)?;
        if let Some(log) = &mut self.log {
            log.flush()?;
        }
        Ok(ticks)
    }

    fn evaluate(&mut self, ready: Vec<(u64, Vec<PhasorFrame>)>) -> std::io::Result<Vec<TickRecord>> {
        let mut ticks = Vec::with_capacity(ready.len());
        for (ts, frames) in ready {
            let tick = self.monitor.process(ts, &frames);
            if let Some(log) = &mut self.log {
                log.record(&tick)?;
            }
            self.hub.publish(&tick);
            ticks.push(tick);
        }
        Ok(ticks)
    }

    pub fn stats(&self) -> PipelineStats {
        PipelineStats {
            frames: self.frames,
            ticks: self.monitor.ticks(),
            out_of_order: self.monitor.out_of_order(),
            late: self.aligner.late,
            rejected: 0,
        }
    }
}

/// Connects to every endpoint and feeds the pipeline until all streams
/// end. Frames from the receivers are serialized through one queue.
pub async fn run_from_streams(mut pipeline: Pipeline, endpoints: &[String]) -> Result<PipelineStats, StreamError> {
    let (tx, mut rx) = mpsc::channel::<PhasorFrame>(1024);
    let mut readers = Vec::new();
    for ep in endpoints {
        let mut recv = FrameReceiver::connect(ep.as_str()).await?;
        let tx = tx.clone();
        readers.push(tokio::spawn(async move {
            loop {
                match recv.next_frame().await {
                    Ok(Some(f)) => {
                        if tx.send(f).await.is_err() {
                            break;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        tracing::warn!("stream error: {e}");
                        break;
                    }
                }
            }
            recv.rejected
        }));
    }
    drop(tx);
    while let Some(f) = rx.recv().await {
        pipeline.push_frame(f)?;
    }
    pipeline.finish()?;
    let mut stats = pipeline.stats();
    for r in readers {
        stats.rejected += r.await.unwrap_or(0);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use aam_core::area::BoundaryWeights;
    use aam_core::study::ModelThresholds;
    use aam_core::wire::{ChannelSample, Quality};

    fn config() -> MonitorConfig {
        MonitorConfig {
            boundary: vec!["A".into(), "B".into()],
            weights: BoundaryWeights::from_raw(vec![1.0, -1.0], 1.0),
            thresholds: ThresholdSet::with_delta(
                ModelThresholds {
                    warning: 20.0,
                    emergency: 25.0,
                },
                0.0,
            ),
            pac: Default::default(),
            t_area: 1.0,
            frame_rate: 10.0,
            stale_limit: 1.0,
        }
    }

    fn frame(stream: u16, ts: u64, a: f64) -> PhasorFrame {
        PhasorFrame {
            stream_id: stream,
            timestamp_us: ts,
            channels: vec![ChannelSample {
                angle: a,
                quality: Quality::Good,
            }],
        }
    }

    #[test]
    fn history_range_and_capacity() {
        let h = History::new(3);
        for t in 1..=5 {
            h.push(Arc::new(StreamEvent {
                timestamp_us: t,
                area_angle: None,
                status: Status::Normal,
                transitions: vec![],
            }));
        }
        assert_eq!(h.len(), 3);
        let ts = |v: Vec<StreamEvent>| v.into_iter().map(|e| e.timestamp_us).collect::<Vec<_>>();
        assert_eq!(ts(h.range(None, None)), vec![3, 4, 5]);
        assert_eq!(ts(h.range(Some(4), None)), vec![4, 5]);
        assert_eq!(ts(h.range(None, Some(3))), vec![3]);
        assert!(h.range(Some(6), None).is_empty());
    }

    #[test]
    fn two_streams_are_aligned_then_published() {
        let map = ChannelMap {
            angles: vec![
                aam_core::monitor::AngleBinding {
                    stream: 1,
                    channel: 0,
                    bus: "A".into(),
                },
                aam_core::monitor::AngleBinding {
                    stream: 2,
                    channel: 0,
                    bus: "B".into(),
                },
            ],
            lse: vec![],
        };
        let hub = Arc::new(Hub::new(config().thresholds, 100, 16));
        let mut events = hub.subscribe();
        let mut p = Pipeline::new(config(), map, hub.clone()).unwrap();
        assert!(hub.snapshot().is_none());
        assert!(p.push_frame(frame(1, 0, 10.0)).unwrap().is_empty());
        let ticks = p.push_frame(frame(2, 0, 4.0)).unwrap();
        assert_eq!(ticks.len(), 1);
        assert_eq!(ticks[0].area_angle, Some(6.0));
        let snap = hub.snapshot().unwrap();
        assert_eq!(snap.area_angle, Some(6.0));
        assert_eq!(
            snap.boundary_angles[&BusId::from("A")].source,
            Some(AngleSource::Measured)
        );
        assert_eq!(events.try_recv().unwrap().timestamp_us, 0);
        // stream 2 goes quiet; stream 1 carries on past the wait
        for k in 1..=5 {
            p.push_frame(frame(1, k * 100_000, 10.0)).unwrap();
        }
        assert!(p.stats().ticks >= 2);
        p.finish().unwrap();
        assert_eq!(p.stats().ticks, 6);
        assert_eq!(hub.history.len(), 6);
    }

    #[test]
    fn status_log_is_written() {
        let hub = Arc::new(Hub::new(config().thresholds, 10, 4));
        let buf = Arc::new(std::sync::Mutex::new(Vec::new()));
        struct Shared(Arc<std::sync::Mutex<Vec<u8>>>);
        impl Write for Shared {
            fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
                self.0.lock().unwrap().write(b)
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let mut p = Pipeline::new(config(), ChannelMap::sequential(1, &config().boundary), hub)
            .unwrap()
            .with_status_log(Box::new(Shared(buf.clone())))
            .unwrap();
        let f = PhasorFrame {
            stream_id: 1,
            timestamp_us: 5,
            channels: vec![
                ChannelSample {
                    angle: 30.0,
                    quality: Quality::Good,
                },
                ChannelSample {
                    angle: 1.5,
                    quality: Quality::Good,
                },
            ],
        };
        p.push_frame(f).unwrap();
        p.finish().unwrap();
        let text = String::from_utf8(buf.lock().unwrap().clone()).unwrap();
        assert_eq!(text, "timestamp_us,area_angle_deg,status\n5,28.500000,NORMAL\n");
    }
}
