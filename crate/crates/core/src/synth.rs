//! Deterministic synthetic sequences: a textured rectangle over a noise
//! background, with scripted motion changes, occlusion, camera shift and blur.
//!
//! Script format, one directive per line, frames numbered from 1:
//!
//! ```text
//! target 40 30 24 16        # initial top-left x, y, w, h
//! velocity 1.5 0            # pixels per frame
//! bounce                    # reflect velocity at the frame border
//! at 20 velocity -2 1       # motion step change from frame 20
//! at 30 occlude 5           # overdraw the target on frames 30..34
//! at 40 shift 6 -3          # camera moves everything by (6, -3) from frame 40
//! at 50 blur 4 2            # box blur of radius 2 on frames 50..53
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::image::Frame;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Event {
    Velocity { vx: f64, vy: f64 },
    Occlude { frames: usize },
    Shift { dx: i64, dy: i64 },
    Blur { frames: usize, radius: usize },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Script {
    /// Top-left `x, y, w, h`; defaults to a centered box a fifth of the frame.
    pub target: Option<[f64; 4]>,
    pub velocity: (f64, f64),
    pub bounce: bool,
    /// `(frame, event)`, frame numbers from 1.
    pub events: Vec<(usize, Event)>,
}

impl FromStr for Script {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut script = Script::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| Error::Script(format!("line {}: {m}: {line:?}", n + 1));
            let words: Vec<&str> = line.split_whitespace().collect();
            let nums = |ws: &[&str]| -> Result<Vec<f64>> {
                ws.iter()
                    .map(|w| w.parse::<f64>().ok().filter(|v| v.is_finite()))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| err("expected numbers"))
            };
            let count = |v: f64| -> Result<usize> {
                (v >= 0.0 && v.fract() == 0.0).then_some(v as usize).ok_or_else(|| err("expected a non-negative integer"))
            };
            match words.as_slice() {
                ["target", rest @ ..] => match nums(rest)?.as_slice() {
                    &[x, y, w, h] if w >= 1.0 && h >= 1.0 => script.target = Some([x, y, w, h]),
                    _ => return Err(err("target needs x y w h with w, h >= 1")),
                },
                ["velocity", rest @ ..] => match nums(rest)?.as_slice() {
                    &[vx, vy] => script.velocity = (vx, vy),
                    _ => return Err(err("velocity needs vx vy")),
                },
                ["bounce"] => script.bounce = true,
                ["at", frame, kind, rest @ ..] => {
                    let frame = count(nums(&[frame])?[0])?;
                    if frame == 0 {
                        return Err(err("frames are numbered from 1"));
                    }
                    let args = nums(rest)?;
                    let event = match (*kind, args.as_slice()) {
                        ("velocity", &[vx, vy]) => Event::Velocity { vx, vy },
                        ("occlude", &[k]) => Event::Occlude { frames: count(k)? },
                        ("shift", &[dx, dy]) if dx.fract() == 0.0 && dy.fract() == 0.0 => Event::Shift {
                            dx: dx as i64,
                            dy: dy as i64,
                        },
                        ("blur", &[k, r]) => Event::Blur {
                            frames: count(k)?,
                            radius: count(r)?,
                        },
                        _ => return Err(err("unknown event or wrong arguments")),
                    };
                    script.events.push((frame, event));
                }
                _ => return Err(err("unknown directive")),
            }
        }
        Ok(script)
    }
}

impl Script {
    pub fn load(path: &Path) -> Result<Self> {
        fs::read_to_string(path)?.parse()
    }
}

/// Frames plus one ground-truth box per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub groundtruth: Vec<BBox>,
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.ppm")
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, f) in self.frames.iter().enumerate() {
            f.write_ppm(&dir.join(frame_file_name(i + 1)))?;
        }
        fs::write(dir.join("groundtruth.txt"), format_boxes(&self.groundtruth))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let frames = frame_paths(dir)?
            .iter()
            .map(|p| Frame::read_ppm(p))
            .collect::<Result<Vec<_>>>()?;
        let gt_path = dir.join("groundtruth.txt");
        let groundtruth = read_boxes(&gt_path)?;
        if groundtruth.len() != frames.len() {
            return Err(Error::Format {
                path: gt_path,
                detail: format!("{} boxes for {} frames", groundtruth.len(), frames.len()),
            });
        }
        Ok(Self { frames, groundtruth })
    }
}

/// `frame_NNNNNN.ppm` files in `dir`, numbered contiguously from 1.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("frame_") && n.ends_with(".ppm"))
        .collect();
    names.sort();
    for (i, n) in names.iter().enumerate() {
        if *n != frame_file_name(i + 1) {
            return Err(Error::Format {
                path: dir.to_path_buf(),
                detail: format!("expected {} but found {n}", frame_file_name(i + 1)),
            });
        }
    }
    if names.is_empty() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            detail: "no frame_*.ppm files".into(),
        });
    }
    Ok(names.into_iter().map(|n| dir.join(n)).collect())
}

pub fn format_boxes(boxes: &[BBox]) -> String {
    boxes.iter().map(|b| format!("{b}\n")).collect()
}

pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse::<BBox>().map_err(|e| Error::Format {
                path: path.to_path_buf(),
                detail: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn generate(seed: u64, n_frames: usize, size: (usize, usize), script: &Script) -> Result<Sequence> {
    let (w, h) = size;
    if n_frames == 0 {
        return Err(Error::Script("need at least one frame".into()));
    }
    if w < 2 || h < 2 {
        return Err(Error::Script(format!("frame size {w}x{h} is too small")));
    }
    let mut rng = SplitMix64::seed_from_u64(seed);
    let background: Vec<u8> = (0..w * h * 3).map(|_| rng.random_range(40..216)).collect();
    let palette: [[u8; 3]; 2] = [rng.random(), rng.random()];
    let occluder: [u8; 3] = rng.random();
    let cell = rng.random_range(2..5usize);

    let [mut x, mut y, tw, th] = script.target.unwrap_or_else(|| {
        let (bw, bh) = ((w / 5).max(1) as f64, (h / 5).max(1) as f64);
        [(w as f64 - bw) / 2.0, (h as f64 - bh) / 2.0, bw, bh]
    });
    let (mut vx, mut vy) = script.velocity;
    let (mut cam_x, mut cam_y) = (0i64, 0i64);
    let mut occluded_until = 0;
    let mut blur: Option<(usize, usize)> = None;

    let mut frames = Vec::with_capacity(n_frames);
    let mut groundtruth = Vec::with_capacity(n_frames);
    for f in 1..=n_frames {
        if f > 1 {
            x += vx;
            y += vy;
        }
        for &(at, event) in script.events.iter().filter(|(at, _)| *at == f) {
            match event {
                Event::Velocity { vx: nx, vy: ny } => (vx, vy) = (nx, ny),
                Event::Occlude { frames } => occluded_until = at + frames,
                Event::Shift { dx, dy } => {
                    cam_x += dx;
                    cam_y += dy;
                }
                Event::Blur { frames, radius } => blur = Some((at + frames, radius)),
            }
        }
        if script.bounce {
            let (fw, fh) = (w as f64, h as f64);
            if x < 0.0 || x + tw > fw {
                vx = -vx;
                x = x.clamp(0.0, (fw - tw).max(0.0));
            }
            if y < 0.0 || y + th > fh {
                vy = -vy;
                y = y.clamp(0.0, (fh - th).max(0.0));
            }
        }
        let (sx, sy) = (x + cam_x as f64, y + cam_y as f64);
        let clipped = clip_box(sx, sy, tw, th, w, h)
            .ok_or_else(|| Error::Script(format!("target leaves the {w}x{h} frame at frame {f}")))?;

        let mut frame = Frame::from_fn(w, h, |px, py| {
            let bx = (px as i64 - cam_x).rem_euclid(w as i64) as usize;
            let by = (py as i64 - cam_y).rem_euclid(h as i64) as usize;
            let i = (by * w + bx) * 3;
            [background[i], background[i + 1], background[i + 2]]
        });
        let occluded = f < occluded_until;
        for py in 0..h {
            for px in 0..w {
                let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
                if cx >= sx && cx < sx + tw && cy >= sy && cy < sy + th {
                    let rgb = if occluded {
                        occluder
                    } else {
                        let u = ((cx - sx) as usize / cell + (cy - sy) as usize / cell) % 2;
                        palette[u]
                    };
                    frame.set(px, py, rgb);
                }
            }
        }
        if let Some((until, radius)) = blur {
            if f < until && radius > 0 {
                frame = box_blur(&frame, radius);
            }
        }
        frames.push(frame);
        groundtruth.push(clipped);
    }
    Ok(Sequence { frames, groundtruth })
}

/// Generates and writes the sequence to `out`.
pub fn synth_sequence(
    seed: u64,
    n_frames: usize,
    size: (usize, usize),
    script: &Script,
    out: &Path,
) -> Result<Sequence> {
    let seq = generate(seed, n_frames, size, script)?;
    seq.write(out)?;
    Ok(seq)
}

fn clip_box(x: f64, y: f64, w: f64, h: f64, fw: usize, fh: usize) -> Option<BBox> {
    let x0 = x.max(0.0);
    let y0 = y.max(0.0);
    let x1 = (x + w).min(fw as f64);
    let y1 = (y + h).min(fh as f64);
    (x1 > x0 && y1 > y0).then(|| BBox::from_xywh(x0 as f32, y0 as f32, (x1 - x0) as f32, (y1 - y0) as f32))
}

/// Separable box filter with edge clamping; integer rounding to nearest.
pub fn box_blur(frame: &Frame, radius: usize) -> Frame {
    let (w, h) = (frame.width(), frame.height());
    let r = radius as i64;
    let n = (2 * r + 1) as u32;
    let pass = |src: &[u8], horizontal: bool| -> Vec<u8> {
        let mut out = vec![0u8; src.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut sum = 0u32;
                    for d in -r..=r {
                        let (sx, sy) = if horizontal {
                            ((x as i64 + d).clamp(0, w as i64 - 1) as usize, y)
                        } else {
                            (x, (y as i64 + d).clamp(0, h as i64 - 1) as usize)
                        };
                        sum += src[(sy * w + sx) * 3 + c] as u32;
                    }
                    out[(y * w + x) * 3 + c] = ((sum + n / 2) / n) as u8;
                }
            }
        }
        out
    };
    let once = pass(frame.pixels(), true);
    Frame::new(w, h, pass(&once, false)).expect("same size")
}
