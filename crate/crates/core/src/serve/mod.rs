//! Streaming scorer: per-camera windows, run detection and packet delivery.
//!
//! Each camera keeps the 32 most recent segments. Every arriving segment
//! rescores the window; the score of the newest segment extends that
//! camera's timeline, and runs of high scores on the timeline become
//! packets. Windows shorter than 32 segments are tiled cyclically before
//! scoring.

pub mod detect;
pub mod emitter;
pub mod latency;
pub mod packet;
pub mod queue;
pub mod window;

use std::collections::BTreeMap;
use std::io::BufRead;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TeGConfig, TeGParams};

pub use detect::{detect, Event, RunDetector};
pub use emitter::{read_spool, Delivery, Emitter, EndpointConfig, SpoolEntry, TOKEN_ENV};
pub use latency::{latency_report, LatencyBudget};
pub use packet::{AnomalyPacket, DEFAULT_ANOMALY_TYPE, PACKET_SCHEMA};
pub use queue::DropOldestQueue;
pub use window::{SegmentFeatures, StreamWindow, WindowScores};

/// One segment of one camera, as read from a stream file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub camera_id: String,
    pub timestamp_ms: u64,
    pub short: Vec<f64>,
    pub medium: Vec<f64>,
    pub long: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeConfig {
    pub threshold: f64,
    pub min_run: usize,
    pub queue_capacity: usize,
    pub anomaly_type: String,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_run: 1,
            queue_capacity: 256,
            anomaly_type: DEFAULT_ANOMALY_TYPE.into(),
        }
    }
}

impl ServeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.min_run == 0 {
            return Err(Error::config("min_run must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelinePoint {
    pub timestamp_ms: u64,
    pub score: f64,
}

struct CameraState {
    window: StreamWindow,
    detector: RunDetector,
    timeline: Vec<TimelinePoint>,
}

pub struct StreamScorer<'a> {
    params: &'a TeGParams,
    model: &'a TeGConfig,
    config: ServeConfig,
    cameras: BTreeMap<String, CameraState>,
    scoring_ms: f64,
    segments: usize,
}

impl<'a> StreamScorer<'a> {
    pub fn new(params: &'a TeGParams, model: &'a TeGConfig, config: ServeConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params,
            model,
            config,
            cameras: BTreeMap::new(),
            scoring_ms: 0.0,
            segments: 0,
        })
    }

    fn packet(&self, camera: &str, timeline: &[TimelinePoint], e: Event) -> Result<AnomalyPacket> {
        AnomalyPacket::new(
            &self.config.anomaly_type,
            camera,
            timeline[e.start].timestamp_ms,
            timeline[e.end].timestamp_ms,
            e.peak,
        )
    }

    /// Scores one segment; returns a packet when it closes an event.
    pub fn push(&mut self, rec: StreamRecord) -> Result<Option<AnomalyPacket>> {
        let (threshold, min_run) = (self.config.threshold, self.config.min_run);
        let state = self
            .cameras
            .entry(rec.camera_id.clone())
            .or_insert_with(|| CameraState {
                window: StreamWindow::new(rec.camera_id.clone()),
                detector: RunDetector::new(threshold, min_run),
                timeline: Vec::new(),
            });
        let started = Instant::now();
        let features = SegmentFeatures {
            short: rec.short,
            medium: rec.medium,
            long: rec.long,
        };
        let scores = state
            .window
            .push_segment(features, rec.timestamp_ms, self.params, self.model)?;
        self.scoring_ms += started.elapsed().as_secs_f64() * 1e3;
        self.segments += 1;
        let score = scores.newest();
        state.timeline.push(TimelinePoint {
            timestamp_ms: rec.timestamp_ms,
            score,
        });
        let closed = state.detector.push(score);
        let state = &self.cameras[&rec.camera_id];
        closed
            .map(|e| self.packet(&rec.camera_id, &state.timeline, e))
            .transpose()
    }

    /// Closes runs still open at the end of the stream.
    pub fn finish(&mut self) -> Result<Vec<AnomalyPacket>> {
        let mut out = Vec::new();
        let open: Vec<(String, Event)> = self
            .cameras
            .iter_mut()
            .filter_map(|(id, s)| s.detector.finish().map(|e| (id.clone(), e)))
            .collect();
        for (id, e) in open {
            out.push(self.packet(&id, &self.cameras[&id].timeline, e)?);
        }
        Ok(out)
    }

    /// Newest-segment score of every push, per camera.
    pub fn timelines(&self) -> BTreeMap<String, Vec<TimelinePoint>> {
        self.cameras
            .iter()
            .map(|(id, s)| (id.clone(), s.timeline.clone()))
            .collect()
    }

    pub fn mean_scoring_ms(&self) -> f64 {
        if self.segments == 0 {
            0.0
        } else {
            self.scoring_ms / self.segments as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeSummary {
    pub segments: usize,
    pub packets: Vec<AnomalyPacket>,
    pub deliveries: Vec<Delivery>,
    pub dropped: u64,
    pub timelines: BTreeMap<String, Vec<TimelinePoint>>,
    pub mean_scoring_ms: f64,
}

impl ServeSummary {
    pub fn delivered(&self) -> usize {
        self.deliveries
            .iter()
            .filter(|d| matches!(d, Delivery::Delivered { .. }))
            .count()
    }

    pub fn spooled(&self) -> usize {
        self.deliveries.len() - self.delivered()
    }
}

/// Parses a line-delimited JSON stream of segment records.
pub fn read_stream<R: BufRead>(reader: R) -> impl Iterator<Item = Result<StreamRecord>> {
    reader.lines().filter_map(|line| match line {
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(serde_json::from_str(&l).map_err(Error::from)),
        Err(e) => Some(Err(Error::io("<stream>", e))),
    })
}

/// Replays `records` through a scorer. Packets flow through a bounded
/// queue to a delivery thread when an emitter is given.
pub fn run_stream(
    records: impl IntoIterator<Item = Result<StreamRecord>>,
    params: &TeGParams,
    model: &TeGConfig,
    config: ServeConfig,
    emitter: Option<&Emitter>,
) -> Result<ServeSummary> {
    let queue = DropOldestQueue::new(config.queue_capacity);
    let mut scorer = StreamScorer::new(params, model, config)?;
    let mut packets = Vec::new();

    let (produced, deliveries) = std::thread::scope(|scope| {
        let queue = &queue;
        let worker = emitter.map(|em| {
            scope.spawn(move || -> Result<Vec<Delivery>> {
                let mut out = Vec::new();
                while let Some(p) = queue.pop() {
                    out.push(em.emit(&p)?);
                }
                Ok(out)
            })
        });
        let live = worker.is_some();
        let produce = || -> Result<()> {
            let mut publish = |p: AnomalyPacket| {
                if live {
                    queue.push(p.clone());
                }
                packets.push(p);
            };
            for rec in records {
                if let Some(p) = scorer.push(rec?)? {
                    publish(p);
                }
            }
            scorer.finish()?.into_iter().for_each(&mut publish);
            Ok(())
        };
        let produced = produce();
        queue.close();
        let deliveries = match worker {
            Some(w) => w.join().expect("delivery thread panicked"),
            None => Ok(Vec::new()),
        };
        (produced, deliveries)
    });
    produced?;
    Ok(ServeSummary {
        segments: scorer.segments,
        packets,
        deliveries: deliveries?,
        dropped: queue.dropped(),
        timelines: scorer.timelines(),
        mean_scoring_ms: scorer.mean_scoring_ms(),
    })
}
