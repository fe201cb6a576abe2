use serde::{Deserialize, Serialize};

/// A maximal run of above-threshold scores; `end` is inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub start: usize,
    pub end: usize,
    pub peak: f64,
}

impl Event {
    pub fn segments(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Runs of consecutive scores `>= threshold` lasting at least `min_run`.
pub fn detect(scores: &[f64], threshold: f64, min_run: usize) -> Vec<Event> {
    let mut d = RunDetector::new(threshold, min_run);
    let mut events: Vec<Event> = scores.iter().filter_map(|&s| d.push(s)).collect();
    events.extend(d.finish());
    events
}

/// Incremental form of [`detect`]: feeding scores one at a time yields the
/// same events.
#[derive(Debug, Clone)]
pub struct RunDetector {
    threshold: f64,
    min_run: usize,
    index: usize,
    open: Option<Event>,
}

impl RunDetector {
    pub fn new(threshold: f64, min_run: usize) -> Self {
        Self {
            threshold,
            min_run: min_run.max(1),
            index: 0,
            open: None,
        }
    }

    /// Number of scores seen so far.
    pub fn position(&self) -> usize {
        self.index
    }

    /// Returns an event when this score closes one.
    pub fn push(&mut self, score: f64) -> Option<Event> {
        let i = self.index;
        self.index += 1;
        if score >= self.threshold {
            match &mut self.open {
                Some(e) => {
                    e.end = i;
                    e.peak = e.peak.max(score);
                }
                None => {
                    self.open = Some(Event {
                        start: i,
                        end: i,
                        peak: score,
                    })
                }
            }
            None
        } else {
            self.take_open()
        }
    }

    /// Closes a run still open at the end of the stream.
    pub fn finish(&mut self) -> Option<Event> {
        self.take_open()
    }

    fn take_open(&mut self) -> Option<Event> {
        self.open.take().filter(|e| e.segments() >= self.min_run)
    }
}
