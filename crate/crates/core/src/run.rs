//! One-pass tracking over a sequence directory: boxes.txt and JSONL trace.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use crate::bbox::BBox;
use crate::error::Result;
use crate::image::Frame;
use crate::pipeline::{FrameRecord, Tracker};
use crate::synth::frame_paths;

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// One box per frame; the first is the initial box.
    pub boxes: Vec<BBox>,
    /// One record per tracked frame (frames 2 onward).
    pub records: Vec<FrameRecord>,
}

/// Tracks `frames` from `init`. `timing` adds wall-clock latency to records,
/// which makes the trace non-reproducible.
pub fn run_frames<'a>(
    tracker: &Tracker,
    frames: impl IntoIterator<Item = Result<Frame>> + 'a,
    init: BBox,
    timing: bool,
) -> Result<RunOutput> {
    let mut frames = frames.into_iter();
    let mut boxes = Vec::new();
    let mut records = Vec::new();
    let Some(first) = frames.next() else {
        return Ok(RunOutput { boxes, records });
    };
    let mut state = tracker.init(&first?, &init)?;
    boxes.push(init);
    for (i, frame) in frames.enumerate() {
        let frame = frame?;
        let t = Instant::now();
        let out = tracker.track(&mut state, &frame)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        let mut rec = FrameRecord::new(i as u64 + 2, &out);
        if timing {
            rec.latency_ms = Some(ms);
        }
        boxes.push(out.bbox);
        records.push(rec);
    }
    Ok(RunOutput { boxes, records })
}

pub fn run_directory(tracker: &Tracker, dir: &Path, init: BBox, timing: bool) -> Result<RunOutput> {
    let paths = frame_paths(dir)?;
    run_frames(tracker, paths.iter().map(|p| Frame::read_ppm(p)), init, timing)
}

pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    fs::write(path, crate::synth::format_boxes(boxes))?;
    Ok(())
}

pub fn write_trace(path: &Path, records: &[FrameRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
