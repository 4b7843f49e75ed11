//! Head output to box: argmax over foreground probability, offset decode.

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::model::HeadOutput;

/// The winning cell and its box in search-patch pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub row: usize,
    pub col: usize,
    pub score: f32,
    pub patch_box: BBox,
}

/// Foreground softmax probability of every cell, row-major.
pub fn foreground_scores(head: &HeadOutput) -> Result<Vec<f32>> {
    let s = head.cls.shape();
    if s.len() != 3 || s[0] != 2 || head.reg.shape() != [4, s[1], s[2]] {
        return Err(Error::dim(
            "decode",
            format!("cls {:?} with reg {:?}", s, head.reg.shape()),
        ));
    }
    let plane = s[1] * s[2];
    let (bg, fg) = head.cls.data().split_at(plane);
    Ok(bg
        .iter()
        .zip(fg)
        .map(|(&b, &f)| {
            let m = b.max(f);
            let (eb, ef) = ((b - m).exp(), (f - m).exp());
            ef / (eb + ef)
        })
        .collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Patch-coordinate center of cell `(row, col)` on a `map`-wide grid.
pub fn cell_center(row: usize, col: usize, map: usize, stride: usize, patch: usize) -> (f32, f32) {
    let half = (map as f32 - 1.0) / 2.0;
    let base = patch as f32 / 2.0;
    (
        base + (col as f32 - half) * stride as f32,
        base + (row as f32 - half) * stride as f32,
    )
}

/// Box from a cell center and `(l, t, r, b)` offsets in cell units.
pub fn box_from_offsets(center: (f32, f32), offsets: [f32; 4], stride: usize) -> BBox {
    let [l, t, r, b] = offsets;
    let s = stride as f32;
    BBox::new(
        center.0 + (r - l) / 2.0 * s,
        center.1 + (b - t) / 2.0 * s,
        (l + r) * s,
        (t + b) * s,
    )
}

pub fn decode(head: &HeadOutput, stride: usize, patch: usize) -> Result<Decoded> {
    let scores = foreground_scores(head)?;
    let (h, w) = (head.cls.dim(1), head.cls.dim(2));
    if h != w {
        return Err(Error::dim("decode", format!("non-square map {h}x{w}")));
    }
    let best = argmax(&scores);
    let (row, col) = (best / w, best % w);
    let plane = h * w;
    let reg = head.reg.data();
    let offsets = [0, 1, 2, 3].map(|k| reg[k * plane + best]);
    let patch_box = box_from_offsets(cell_center(row, col, w, stride, patch), offsets, stride);
    Ok(Decoded {
        row,
        col,
        score: scores[best],
        patch_box,
    })
}

/// Maps a patch-coordinate box into the frame, given the crop it came from.
pub fn patch_to_image(b: &BBox, crop_cx: f32, crop_cy: f32, crop_side: f32, patch: usize) -> BBox {
    let k = crop_side / patch as f32;
    let half = patch as f32 / 2.0;
    BBox::new(
        crop_cx + (b.cx - half) * k,
        crop_cy + (b.cy - half) * k,
        b.w * k,
        b.h * k,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn head(cls: Tensor, reg: Tensor) -> HeadOutput {
        HeadOutput { cls, reg }
    }

    #[test]
    fn hand_computed_offsets() {
        // Stride 8 with the full-size 21-cell map on a 287 patch.
        let c = cell_center(10, 10, 21, 8, 287);
        assert_eq!(c, (143.5, 143.5));
        let b = box_from_offsets(c, [2.0, 2.0, 2.0, 2.0], 8);
        assert_eq!(b, BBox::new(143.5, 143.5, 32.0, 32.0));
        let skew = box_from_offsets((0.0, 0.0), [1.0, 3.0, 2.0, 1.0], 8);
        assert_eq!(skew, BBox::new(4.0, -8.0, 24.0, 32.0));
    }

    #[test]
    fn ties_pick_lowest_row_major_index() {
        let out = head(Tensor::zeros(&[2, 5, 5]), Tensor::zeros(&[4, 5, 5]));
        let d = decode(&out, 1, 32).unwrap();
        assert_eq!((d.row, d.col), (0, 0));
        assert_eq!(d.score, 0.5);
        assert_eq!(d.patch_box.cx, 16.0 - 2.0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn score_is_the_winning_softmax_probability() {
        let mut cls = Tensor::zeros(&[2, 3, 3]);
        cls.data_mut()[9 + 4] = 2.0;
        cls.data_mut()[4] = -1.0;
        let d = decode(&head(cls, Tensor::zeros(&[4, 3, 3])), 1, 9).unwrap();
        assert_eq!((d.row, d.col), (1, 1));
        let expect = 1.0 / (1.0 + (-3.0f32).exp());
        assert!((d.score - expect).abs() < 1e-7);
    }

    #[test]
    fn saturated_scores_stay_in_unit_interval() {
        let cls = Tensor::vector(&[-1e30, 1e30, 0.0, 0.0, 5e3, -5e3, 0.0, 0.0]).reshape(&[2, 2, 2]).unwrap();
        let s = foreground_scores(&head(cls, Tensor::zeros(&[4, 2, 2]))).unwrap();
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn patch_to_image_scales_about_the_crop_center() {
        let b = BBox::new(20.0, 16.0, 4.0, 8.0);
        let img = patch_to_image(&b, 100.0, 50.0, 64.0, 32);
        assert_eq!(img, BBox::new(108.0, 50.0, 8.0, 16.0));
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let out = head(Tensor::zeros(&[2, 3, 3]), Tensor::zeros(&[4, 3, 2]));
        assert!(decode(&out, 1, 9).is_err());
    }
}
