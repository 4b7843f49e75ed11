//! Square context crops with bilinear resampling and mean fill.

use crate::bbox::BBox;
use crate::image::Frame;
use crate::numerics::Tensor;

/// Side of the square region around `bbox` once the context margin is added.
pub fn context_side(bbox: &BBox, context: f32) -> f64 {
    let (w, h) = (bbox.w as f64, bbox.h as f64);
    let pad = context as f64 * (w + h);
    ((w + pad) * (h + pad)).sqrt()
}

/// Crops the context square around `bbox` and resamples it to `out_size`.
pub fn crop_patch(frame: &Frame, bbox: &BBox, out_size: usize, context: f32) -> Tensor {
    let side = context_side(bbox, context);
    crop_region(frame, bbox.cx as f64, bbox.cy as f64, side, out_size)
}

/// Resamples the square of side `side` centered on `(cx, cy)` to a
/// `3×out×out` tensor of raw pixel values.
///
/// Output pixel `j` samples source coordinate
/// `cx − side/2 + (j + 0.5)·side/out − 0.5` (pixel centers at integers).
/// Samples whose coordinate falls outside `[−0.5, extent − 0.5]` on either
/// axis take the frame's channel mean.
pub fn crop_region(frame: &Frame, cx: f64, cy: f64, side: f64, out: usize) -> Tensor {
    let (fw, fh) = (frame.width(), frame.height());
    let means = frame.channel_means().map(|m| m as f32);
    let scale = side / out as f64;
    let axis = |center: f64, extent: usize| -> Vec<Option<(usize, usize, f32)>> {
        (0..out)
            .map(|j| {
                let s = center - side / 2.0 + (j as f64 + 0.5) * scale - 0.5;
                if !(s >= -0.5 && s <= extent as f64 - 0.5) {
                    return None;
                }
                let s = s.clamp(0.0, (extent - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(extent - 1);
                Some((i0, i1, (s - i0 as f64) as f32))
            })
            .collect()
    };
    let xs = axis(cx, fw);
    let ys = axis(cy, fh);
    let px = frame.pixels();
    let at = |x: usize, y: usize, c: usize| px[(y * fw + x) * 3 + c] as f32;
    let plane = out * out;
    let mut data = vec![0.0f32; 3 * plane];
    for (r, ys) in ys.iter().enumerate() {
        for (col, xs) in xs.iter().enumerate() {
            let idx = r * out + col;
            match (ys, xs) {
                (Some((y0, y1, fy)), Some((x0, x1, fx))) => {
                    for c in 0..3 {
                        let top = lerp(at(*x0, *y0, c), at(*x1, *y0, c), *fx);
                        let bottom = lerp(at(*x0, *y1, c), at(*x1, *y1, c), *fx);
                        data[c * plane + idx] = lerp(top, bottom, *fy);
                    }
                }
                _ => {
                    for (c, m) in means.iter().enumerate() {
                        data[c * plane + idx] = *m;
                    }
                }
            }
        }
    }
    Tensor::new(&[3, out, out], data).expect("crop shape")
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}
