//! Per-frame latency and state-size measurement on preloaded frames.

use std::fmt::Write as _;
use std::time::Instant;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::ModelParams;
use crate::pipeline::Tracker;
use crate::synth::{generate, Script, Sequence};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSample {
    pub frame: usize,
    pub latency_ms: f64,
    pub state_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub samples: Vec<BenchSample>,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
    pub peak_state_bytes: usize,
}

/// Median of `values`; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Nearest-rank percentile, `p` in `(0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Frame 1 is the init call; every later frame is one `track`.
pub fn bench_sequence(tracker: &Tracker, seq: &Sequence) -> Result<BenchReport> {
    let mut samples = Vec::with_capacity(seq.len());
    let start = Instant::now();
    let mut state = tracker.init(&seq.frames[0], &seq.groundtruth[0])?;
    let init_ms = start.elapsed().as_secs_f64() * 1e3;
    samples.push(BenchSample {
        frame: 1,
        latency_ms: init_ms,
        state_bytes: state.to_bytes().len(),
    });
    for (i, frame) in seq.frames.iter().enumerate().skip(1) {
        let t = Instant::now();
        tracker.track(&mut state, frame)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        samples.push(BenchSample {
            frame: i + 1,
            latency_ms: ms,
            state_bytes: state.to_bytes().len(),
        });
    }
    Ok(BenchReport::from_samples(samples))
}

/// A bouncing target on a 128×96 canvas, long enough for any frame count.
pub fn bench_script() -> Script {
    "target 50 40 12 12\nvelocity 1.3 0.7\nbounce".parse().expect("static script")
}

/// Random model for `config`, synthetic sequence, full benchmark.
pub fn bench(config: &ModelConfig, n_frames: usize) -> Result<BenchReport> {
    let params = ModelParams::random(config, config.weight_seed)?;
    let tracker = Tracker::new(params, config.clone())?;
    let seq = generate(config.weight_seed, n_frames.max(1), (128, 96), &bench_script())?;
    bench_sequence(&tracker, &seq)
}

impl BenchReport {
    pub fn from_samples(samples: Vec<BenchSample>) -> Self {
        // The init frame does more work than a track step; keep it out of the summary.
        let steady: Vec<f64> = samples.iter().skip(1).map(|s| s.latency_ms).collect();
        let lat = if steady.is_empty() {
            samples.iter().map(|s| s.latency_ms).collect()
        } else {
            steady
        };
        let median_ms = median(&lat);
        Self {
            median_ms,
            p95_ms: percentile(&lat, 95.0),
            fps: 1e3 / median_ms,
            peak_state_bytes: samples.iter().map(|s| s.state_bytes).max().unwrap_or(0),
            samples,
        }
    }

    /// Median latency over 1-based frames `first..=last`.
    pub fn median_between(&self, first: usize, last: usize) -> f64 {
        let v: Vec<f64> = self
            .samples
            .iter()
            .filter(|s| (first..=last).contains(&s.frame))
            .map(|s| s.latency_ms)
            .collect();
        median(&v)
    }

    /// Per-frame rows followed by `#`-prefixed summary lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,latency_ms,state_bytes\n");
        for r in &self.samples {
            let _ = writeln!(s, "{},{:.6},{}", r.frame, r.latency_ms, r.state_bytes);
        }
        let _ = writeln!(s, "# median_ms,p95_ms,fps,peak_state_bytes");
        let _ = writeln!(
            s,
            "# {:.6},{:.6},{:.2},{}",
            self.median_ms, self.p95_ms, self.fps, self.peak_state_bytes
        );
        s
    }
}
