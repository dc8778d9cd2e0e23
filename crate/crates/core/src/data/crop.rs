//! Template/search cropping with benchmark-style area factors.
//!
//! Template crops cover 2² times the object area, search crops 4² times,
//! both square and centered on the box (plus optional jitter for training).
//! Regions outside the frame are padded with the frame's mean color.

use crate::data::types::{BoundingBox, Frame, SamplePair, Sequence};
use crate::error::{DytxError, Result};
use crate::rng::RandomState;
use crate::tensor::Tensor;
use crate::Tensor32;

pub const TEMPLATE_FACTOR: f64 = 2.0;
pub const SEARCH_FACTOR: f64 = 4.0;

/// Maps between crop pixel coordinates and frame pixel coordinates.
#[derive(Debug, Clone, Copy)]
pub struct CropWindow {
    /// Frame x of the crop's left edge.
    pub x0: f64,
    /// Frame y of the crop's top edge.
    pub y0: f64,
    /// Crop side length in frame pixels.
    pub side: f64,
    /// Output resolution.
    pub out_size: usize,
}

impl CropWindow {
    /// Normalized crop coordinates of a frame-space box.
    pub fn box_to_crop(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox::new(
            (b.cx - self.x0) / self.side,
            (b.cy - self.y0) / self.side,
            b.w / self.side,
            b.h / self.side,
        )
    }

    /// Frame-space box from normalized crop coordinates.
    pub fn box_to_frame(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox::new(
            self.x0 + b.cx * self.side,
            self.y0 + b.cy * self.side,
            b.w * self.side,
            b.h * self.side,
        )
    }
}

fn frame_mean(frame: &Frame) -> [f32; 3] {
    let mut acc = [0.0f64; 3];
    let n = (frame.height * frame.width) as f64;
    for px in frame.pixels.chunks_exact(3) {
        for c in 0..3 {
            acc[c] += px[c] as f64;
        }
    }
    [
        (acc[0] / n) as f32,
        (acc[1] / n) as f32,
        (acc[2] / n) as f32,
    ]
}

fn sample_bilinear(frame: &Frame, x: f64, y: f64, pad: [f32; 3], c: usize) -> f32 {
    let at = |xi: i64, yi: i64| -> f32 {
        if xi < 0 || yi < 0 || xi >= frame.width as i64 || yi >= frame.height as i64 {
            pad[c]
        } else {
            frame.pixel(yi as usize, xi as usize, c)
        }
    };
    let xf = x - 0.5;
    let yf = y - 0.5;
    let x0 = xf.floor();
    let y0 = yf.floor();
    let tx = (xf - x0) as f32;
    let ty = (yf - y0) as f32;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
    let bot = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
    top * (1.0 - ty) + bot * ty
}

/// Square crop of `side` frame pixels centered at (cx, cy), resampled to
/// `out_size`². Returns the [3, out, out] tensor and the window mapping.
pub fn crop_region(frame: &Frame, cx: f64, cy: f64, side: f64, out_size: usize) -> (Tensor32, CropWindow) {
    let pad = frame_mean(frame);
    let win = CropWindow {
        x0: cx - side / 2.0,
        y0: cy - side / 2.0,
        side,
        out_size,
    };
    let scale = side / out_size as f64;
    let mut data = vec![0.0f32; 3 * out_size * out_size];
    for c in 0..3 {
        for oy in 0..out_size {
            for ox in 0..out_size {
                let fx = win.x0 + (ox as f64 + 0.5) * scale;
                let fy = win.y0 + (oy as f64 + 0.5) * scale;
                data[(c * out_size + oy) * out_size + ox] = sample_bilinear(frame, fx, fy, pad, c);
            }
        }
    }
    (
        Tensor::new(vec![3, out_size, out_size], data),
        win,
    )
}

fn crop_side(b: &BoundingBox, factor: f64) -> f64 {
    (factor * factor * b.w * b.h).sqrt().max(4.0)
}

/// One training sample: template from `t_template`, search from `t_search`.
///
/// `jitter` shifts the search center by up to ±jitter·side in each axis.
pub fn crop_pair(
    seq: &Sequence,
    t_template: usize,
    t_search: usize,
    template_size: usize,
    search_size: usize,
    jitter: f64,
    rng: &mut RandomState,
) -> Result<SamplePair> {
    let n = seq.frames.len();
    if t_template >= n || t_search >= n {
        return Err(DytxError::Contract(format!(
            "frame indices ({t_template}, {t_search}) out of range for {n} frames"
        )));
    }
    let zf = &seq.frames[t_template];
    let xf = &seq.frames[t_search];
    let zb = &zf.gt_box;
    let xb = &xf.gt_box;

    let (template, _) = crop_region(zf, zb.cx, zb.cy, crop_side(zb, TEMPLATE_FACTOR), template_size);

    let side = crop_side(xb, SEARCH_FACTOR);
    let jx = if jitter > 0.0 { rng.uniform_in(-jitter, jitter) * side } else { 0.0 };
    let jy = if jitter > 0.0 { rng.uniform_in(-jitter, jitter) * side } else { 0.0 };
    let (search, win) = crop_region(xf, xb.cx + jx, xb.cy + jy, side, search_size);

    let mut target = win.box_to_crop(xb);
    target.cx = target.cx.clamp(0.0, 1.0);
    target.cy = target.cy.clamp(0.0, 1.0);
    target.w = target.w.clamp(1e-4, 1.0);
    target.h = target.h.clamp(1e-4, 1.0);
    Ok(SamplePair {
        template,
        search,
        target_box: target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate::{generate_sequence, GenConfig};

    fn seq(seed: u64) -> Sequence {
        generate_sequence(&GenConfig::for_difficulty(1), &mut RandomState::new(seed)).unwrap()
    }

    #[test]
    fn zero_jitter_centers_target() {
        let s = seq(3);
        let mut rng = RandomState::new(0);
        let p = crop_pair(&s, 0, 5, 32, 64, 0.0, &mut rng).unwrap();
        assert!((p.target_box.cx - 0.5).abs() < 1e-9);
        assert!((p.target_box.cy - 0.5).abs() < 1e-9);
        assert_eq!(p.template.shape(), &[3, 32, 32]);
        assert_eq!(p.search.shape(), &[3, 64, 64]);
    }

    #[test]
    fn square_object_search_side_is_four_times() {
        let b = BoundingBox::new(50.0, 50.0, 16.0, 16.0);
        assert!((crop_side(&b, SEARCH_FACTOR) - 64.0).abs() < 1e-9);
        assert!((crop_side(&b, TEMPLATE_FACTOR) - 32.0).abs() < 1e-9);
    }

    #[test]
    fn back_projection_recovers_gt_within_half_pixel() {
        let s = seq(9);
        let mut rng = RandomState::new(1);
        for t in [1usize, 7, 15] {
            let xb = s.frames[t].gt_box;
            let side = crop_side(&xb, SEARCH_FACTOR);
            let jx = rng.uniform_in(-0.2, 0.2) * side;
            let jy = rng.uniform_in(-0.2, 0.2) * side;
            let (_, win) = crop_region(&s.frames[t], xb.cx + jx, xb.cy + jy, side, 64);
            let normalized = win.box_to_crop(&xb);
            let back = win.box_to_frame(&normalized);
            assert!((back.cx - xb.cx).abs() < 0.5);
            assert!((back.cy - xb.cy).abs() < 0.5);
            assert!((back.w - xb.w).abs() < 0.5);
            assert!((back.h - xb.h).abs() < 0.5);
        }
    }

    #[test]
    fn out_of_frame_crop_is_mean_padded() {
        let s = seq(12);
        let f = &s.frames[0];
        let mean = frame_mean(f);
        // crop far outside the frame: every sample is padding
        let (t, _) = crop_region(f, -500.0, -500.0, 40.0, 16);
        for c in 0..3 {
            for i in 0..16 * 16 {
                assert_eq!(t.data()[c * 256 + i], mean[c]);
            }
        }
    }

    #[test]
    fn jitter_beyond_edge_keeps_box_normalized() {
        let s = seq(21);
        let mut rng = RandomState::new(7);
        for _ in 0..20 {
            let p = crop_pair(&s, 0, 10, 32, 64, 0.45, &mut rng).unwrap();
            p.target_box.validate_normalized().unwrap();
        }
    }

    #[test]
    fn bad_frame_index_errors() {
        let s = seq(2);
        let mut rng = RandomState::new(0);
        assert!(crop_pair(&s, 0, 999, 32, 64, 0.0, &mut rng).is_err());
    }
}
