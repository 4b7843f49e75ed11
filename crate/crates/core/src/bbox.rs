use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Axis-aligned box in center form, pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self { cx, cy, w, h }
    }

    /// From the top-left `x,y,w,h` convention used on disk.
    pub fn from_xywh(x: f32, y: f32, w: f32, h: f32) -> Self {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    pub fn to_xywh(&self) -> [f32; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    pub fn area(&self) -> f32 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        let dx = self.cx as f64 - other.cx as f64;
        let dy = self.cy as f64 - other.cy as f64;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let [ax, ay, aw, ah] = self.to_xywh().map(|v| v as f64);
        let [bx, by, bw, bh] = other.to_xywh().map(|v| v as f64);
        let iw = ((ax + aw).min(bx + bw) - ax.max(bx)).max(0.0);
        let ih = ((ay + ah).min(by + bh) - ay.max(by)).max(0.0);
        let inter = iw * ih;
        let union = aw.max(0.0) * ah.max(0.0) + bw.max(0.0) * bh.max(0.0) - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Forces `w, h` into `[1, frame side]` and the center into the frame.
    pub fn clamped(&self, frame_w: usize, frame_h: usize) -> Self {
        let (fw, fh) = (frame_w as f32, frame_h as f32);
        Self {
            cx: self.cx.clamp(0.0, fw),
            cy: self.cy.clamp(0.0, fh),
            w: self.w.clamp(1.0, fw.max(1.0)),
            h: self.h.clamp(1.0, fh.max(1.0)),
        }
    }
}

/// `x,y,w,h` with four decimals; the `boxes.txt` line format.
impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [x, y, w, h] = self.to_xywh();
        write!(f, "{x:.4},{y:.4},{w:.4},{h:.4}")
    }
}

impl FromStr for BBox {
    type Err = Error;

    /// Parses top-left `x,y,w,h` (commas, tabs or spaces).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let vals: Vec<f32> = s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f32>())
            .collect::<Result<_, _>>()
            .map_err(|_| Error::Input(format!("cannot parse box {s:?}")))?;
        match vals.as_slice() {
            [x, y, w, h] if vals.iter().all(|v| v.is_finite()) => Ok(Self::from_xywh(*x, *y, *w, *h)),
            _ => Err(Error::Input(format!("expected x,y,w,h, got {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xywh_round_trip_and_parse() {
        let b: BBox = "10,20,30,40".parse().unwrap();
        assert_eq!(b, BBox::new(25.0, 40.0, 30.0, 40.0));
        assert_eq!(b.to_xywh(), [10.0, 20.0, 30.0, 40.0]);
        assert_eq!(b.to_string(), "10.0000,20.0000,30.0000,40.0000");
        assert!("1,2,3".parse::<BBox>().is_err());
        assert!("1,2,3,nan".parse::<BBox>().is_err());
    }

    #[test]
    fn iou_cases() {
        let a = BBox::from_xywh(0.0, 0.0, 10.0, 10.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::from_xywh(20.0, 0.0, 10.0, 10.0)), 0.0);
        let half = BBox::from_xywh(5.0, 0.0, 10.0, 10.0);
        assert!((a.iou(&half) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn clamp_keeps_sizes_positive() {
        let b = BBox::new(-5.0, 500.0, 0.2, 1000.0).clamped(100, 80);
        assert_eq!(b, BBox::new(0.0, 80.0, 1.0, 80.0));
    }
}
