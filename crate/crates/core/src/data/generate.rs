//! Synthetic tracking-sequence generator with five difficulty levels.
//!
//! Difficulty presets (committed reference table):
//!
//! | level | distractors | similarity | occlusion p | motion px | noise | clutter | deform |
//! |-------|-------------|------------|-------------|-----------|-------|---------|--------|
//! | 0     | 0           | –          | 0.00        | 2         | 0.01  | 0.00    | 0.00   |
//! | 1     | 1           | 0.30       | 0.05        | 4         | 0.02  | 0.25    | 0.05   |
//! | 2     | 2           | 0.50       | 0.10        | 6         | 0.03  | 0.50    | 0.10   |
//! | 3     | 3           | 0.75       | 0.20        | 9         | 0.05  | 0.75    | 0.15   |
//! | 4     | 4           | 0.95       | 0.30        | 12        | 0.08  | 1.00    | 0.20   |
//!
//! Every frame is quantized to 8-bit steps so a PNG round-trip is exact.

use crate::data::types::{Attribute, BoundingBox, Frame, Sequence};
use crate::error::{DytxError, Result};
use crate::rng::RandomState;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub frame_size: usize,
    pub length: usize,
    /// Target side range in pixels.
    pub target_min: f64,
    pub target_max: f64,
    pub n_distractors: usize,
    /// 0 = visually unrelated, 1 = near-identical to the target.
    pub distractor_similarity: f64,
    /// Per-frame probability that an occluder covers part of the target.
    pub occlusion_prob: f64,
    /// Maximum per-frame center displacement, pixels.
    pub motion: f64,
    /// Gaussian pixel noise std.
    pub noise: f64,
    /// Background clutter density, 0..1.
    pub clutter: f64,
    /// Relative amplitude of slow size changes.
    pub deformation: f64,
    /// Difficulty label recorded on the sequence.
    pub difficulty: u8,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig::for_difficulty(1)
    }
}

impl GenConfig {
    pub fn for_difficulty(level: u8) -> GenConfig {
        let level = level.min(4);
        let (n_distractors, similarity, occ, motion, noise, clutter, deform) = match level {
            0 => (0, 0.0, 0.00, 2.0, 0.01, 0.00, 0.00),
            1 => (1, 0.30, 0.05, 4.0, 0.02, 0.25, 0.05),
            2 => (2, 0.50, 0.10, 6.0, 0.03, 0.50, 0.10),
            3 => (3, 0.75, 0.20, 9.0, 0.05, 0.75, 0.15),
            _ => (4, 0.95, 0.30, 12.0, 0.08, 1.00, 0.20),
        };
        GenConfig {
            frame_size: 128,
            length: 24,
            target_min: 14.0,
            target_max: 26.0,
            n_distractors,
            distractor_similarity: similarity,
            occlusion_prob: occ,
            motion,
            noise,
            clutter,
            deformation: deform,
            difficulty: level,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(DytxError::Config("sequence length must be ≥ 2".into()));
        }
        if self.target_max >= self.frame_size as f64 / 2.0 {
            return Err(DytxError::Config(format!(
                "target size {} too large for {}px frame",
                self.target_max, self.frame_size
            )));
        }
        if self.target_min < 4.0 || self.target_min > self.target_max {
            return Err(DytxError::Config("bad target size range".into()));
        }
        Ok(())
    }

    pub fn attributes(&self) -> Vec<Attribute> {
        let mut a = Vec::new();
        if self.occlusion_prob > 0.0 {
            a.push(Attribute::Occlusion);
        }
        if self.n_distractors > 0 {
            a.push(Attribute::Distractor);
        }
        if self.motion >= 8.0 {
            a.push(Attribute::FastMotion);
        }
        if self.deformation > 0.0 {
            a.push(Attribute::Deformation);
        }
        if self.clutter >= 0.5 {
            a.push(Attribute::Clutter);
        }
        a
    }
}

#[derive(Clone, Copy)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f32; 3],
    /// Second tone for a simple two-band texture.
    color2: [f32; 3],
    vx: f64,
    vy: f64,
}

fn draw_ellipse(pixels: &mut [f32], size: usize, b: &Blob) {
    let y0 = ((b.cy - b.ry).floor().max(0.0)) as usize;
    let y1 = ((b.cy + b.ry).ceil().min(size as f64 - 1.0)) as usize;
    let x0 = ((b.cx - b.rx).floor().max(0.0)) as usize;
    let x1 = ((b.cx + b.rx).ceil().min(size as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = (x as f64 + 0.5 - b.cx) / b.rx;
            let dy = (y as f64 + 0.5 - b.cy) / b.ry;
            let r2 = dx * dx + dy * dy;
            if r2 <= 1.0 {
                let c = if dy < 0.0 { b.color } else { b.color2 };
                let idx = (y * size + x) * 3;
                pixels[idx] = c[0];
                pixels[idx + 1] = c[1];
                pixels[idx + 2] = c[2];
            }
        }
    }
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn rand_color(rng: &mut RandomState) -> [f32; 3] {
    [
        rng.uniform() as f32,
        rng.uniform() as f32,
        rng.uniform() as f32,
    ]
}

fn step_blob(b: &mut Blob, cfg: &GenConfig, rng: &mut RandomState, margin: f64) {
    b.vx += rng.normal() * cfg.motion * 0.5;
    b.vy += rng.normal() * cfg.motion * 0.5;
    let sp = (b.vx * b.vx + b.vy * b.vy).sqrt();
    if sp > cfg.motion {
        b.vx *= cfg.motion / sp;
        b.vy *= cfg.motion / sp;
    }
    b.cx += b.vx;
    b.cy += b.vy;
    let hi = cfg.frame_size as f64 - margin;
    if b.cx < margin {
        b.cx = 2.0 * margin - b.cx;
        b.vx = -b.vx;
    }
    if b.cx > hi {
        b.cx = 2.0 * hi - b.cx;
        b.vx = -b.vx;
    }
    if b.cy < margin {
        b.cy = 2.0 * margin - b.cy;
        b.vy = -b.vy;
    }
    if b.cy > hi {
        b.cy = 2.0 * hi - b.cy;
        b.vy = -b.vy;
    }
    b.cx = b.cx.clamp(margin, hi);
    b.cy = b.cy.clamp(margin, hi);
}

/// Generate one synthetic sequence. Pure function of (config, rng state).
pub fn generate_sequence(cfg: &GenConfig, rng: &mut RandomState) -> Result<Sequence> {
    cfg.validate()?;
    let size = cfg.frame_size;
    let seed_tag = rng.uniform_in(0.0, 1e9) as u64;

    // background: smooth two-corner gradient plus clutter blobs
    let bg_a = rand_color(rng);
    let bg_b = rand_color(rng);
    let n_clutter = (cfg.clutter * 14.0).round() as usize;
    let mut clutter_blobs = Vec::new();
    for _ in 0..n_clutter {
        let r = rng.uniform_in(3.0, 10.0);
        clutter_blobs.push(Blob {
            cx: rng.uniform_in(0.0, size as f64),
            cy: rng.uniform_in(0.0, size as f64),
            rx: r,
            ry: rng.uniform_in(3.0, 10.0),
            color: mix(bg_a, rand_color(rng), 0.5),
            color2: mix(bg_b, rand_color(rng), 0.5),
            vx: 0.0,
            vy: 0.0,
        });
    }

    let half0 = cfg.target_max / 2.0;
    let t_color = rand_color(rng);
    let t_color2 = mix(t_color, rand_color(rng), 0.6);
    let base_rx = rng.uniform_in(cfg.target_min, cfg.target_max) / 2.0;
    let base_ry = rng.uniform_in(cfg.target_min, cfg.target_max) / 2.0;
    // keep the box inside the frame even at the largest breathed size
    let margin = base_rx.max(base_ry) * (1.0 + cfg.deformation) + 2.0;
    let mut target = Blob {
        cx: rng.uniform_in(margin.max(half0 + 2.0), size as f64 - margin.max(half0 + 2.0)),
        cy: rng.uniform_in(margin.max(half0 + 2.0), size as f64 - margin.max(half0 + 2.0)),
        rx: base_rx,
        ry: base_ry,
        color: t_color,
        color2: t_color2,
        vx: rng.uniform_in(-1.0, 1.0),
        vy: rng.uniform_in(-1.0, 1.0),
    };

    let sim = cfg.distractor_similarity as f32;
    let mut distractors: Vec<Blob> = (0..cfg.n_distractors)
        .map(|_| {
            let own = rand_color(rng);
            let own2 = rand_color(rng);
            Blob {
                cx: rng.uniform_in(half0, size as f64 - half0),
                cy: rng.uniform_in(half0, size as f64 - half0),
                rx: base_rx * (1.0 + (1.0 - sim as f64) * rng.uniform_in(-0.4, 0.4)),
                ry: base_ry * (1.0 + (1.0 - sim as f64) * rng.uniform_in(-0.4, 0.4)),
                color: mix(own, t_color, sim),
                color2: mix(own2, t_color2, sim),
                vx: rng.uniform_in(-1.0, 1.0),
                vy: rng.uniform_in(-1.0, 1.0),
            }
        })
        .collect();

    let deform_phase = rng.uniform_in(0.0, std::f64::consts::TAU);
    let mut frames = Vec::with_capacity(cfg.length);
    for t in 0..cfg.length {
        let mut pixels = vec![0.0f32; size * size * 3];
        for y in 0..size {
            for x in 0..size {
                let u = x as f32 / size as f32;
                let v = y as f32 / size as f32;
                let c = mix(bg_a, bg_b, (u + v) * 0.5);
                let idx = (y * size + x) * 3;
                pixels[idx..idx + 3].copy_from_slice(&c);
            }
        }
        for b in &clutter_blobs {
            draw_ellipse(&mut pixels, size, b);
        }
        for d in &distractors {
            draw_ellipse(&mut pixels, size, d);
        }

        // slow size breathing plus jitter
        let ph = deform_phase + t as f64 * 0.5;
        let mut tf = target;
        tf.rx = (base_rx * (1.0 + cfg.deformation * ph.sin())).max(2.0);
        tf.ry = (base_ry * (1.0 + cfg.deformation * (ph * 0.7).cos())).max(2.0);
        draw_ellipse(&mut pixels, size, &tf);

        // occluder: a rectangle covering up to ~60% of the target
        if rng.uniform() < cfg.occlusion_prob {
            let ow = tf.rx * rng.uniform_in(0.8, 1.6);
            let oh = tf.ry * rng.uniform_in(0.8, 1.6);
            let ox = tf.cx + rng.uniform_in(-tf.rx, tf.rx) * 0.5;
            let oy = tf.cy + rng.uniform_in(-tf.ry, tf.ry) * 0.5;
            let oc = rand_color(rng);
            let y0 = (oy - oh / 2.0).max(0.0) as usize;
            let y1 = ((oy + oh / 2.0).min(size as f64 - 1.0)) as usize;
            let x0 = (ox - ow / 2.0).max(0.0) as usize;
            let x1 = ((ox + ow / 2.0).min(size as f64 - 1.0)) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let idx = (y * size + x) * 3;
                    pixels[idx..idx + 3].copy_from_slice(&oc);
                }
            }
        }

        // sensor noise, then 8-bit quantization for lossless PNG round-trips
        for p in pixels.iter_mut() {
            let n = rng.normal() as f32 * cfg.noise as f32;
            *p = ((*p + n).clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }

        let gt = BoundingBox::new(tf.cx, tf.cy, (2.0 * tf.rx).max(1.0), (2.0 * tf.ry).max(1.0));
        frames.push(Frame {
            pixels,
            height: size,
            width: size,
            gt_box: gt,
        });

        step_blob(&mut target, cfg, rng, margin);
        let mut drng = rng.fork(31 + t as u64);
        for d in distractors.iter_mut() {
            step_blob(d, cfg, &mut drng, 8.0);
        }
    }

    Ok(Sequence {
        name: format!("seq_d{}_{:08}", cfg.difficulty, seed_tag % 100_000_000),
        frames,
        difficulty: cfg.difficulty,
        attributes: cfg.attributes(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_same_seed() {
        let cfg = GenConfig::for_difficulty(2);
        let a = generate_sequence(&cfg, &mut RandomState::new(11)).unwrap();
        let b = generate_sequence(&cfg, &mut RandomState::new(11)).unwrap();
        assert_eq!(a.name, b.name);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.pixels, fb.pixels);
            assert_eq!(format!("{:?}", fa.gt_box), format!("{:?}", fb.gt_box));
        }
    }

    #[test]
    fn gt_boxes_stay_inside_frame() {
        for level in 0..=4u8 {
            let cfg = GenConfig::for_difficulty(level);
            let seq = generate_sequence(&cfg, &mut RandomState::new(40 + level as u64)).unwrap();
            assert_eq!(seq.frames.len(), cfg.length);
            for f in &seq.frames {
                let (x1, y1, x2, y2) = f.gt_box.corners();
                assert!(x1 >= -1e-9 && y1 >= -1e-9, "{x1} {y1}");
                assert!(x2 <= f.width as f64 + 1e-9 && y2 <= f.height as f64 + 1e-9);
                assert!(f.gt_box.w >= 1.0 && f.gt_box.h >= 1.0);
            }
        }
    }

    #[test]
    fn difficulty_presets_match_committed_table() {
        let c0 = GenConfig::for_difficulty(0);
        assert_eq!(c0.n_distractors, 0);
        assert_eq!(c0.occlusion_prob, 0.0);
        let c4 = GenConfig::for_difficulty(4);
        assert!(c4.n_distractors >= 3);
        assert!(c4.occlusion_prob >= 0.3);
        assert!(c4.distractor_similarity >= 0.9);
    }

    #[test]
    fn attributes_follow_config() {
        let a = GenConfig::for_difficulty(0).attributes();
        assert!(a.is_empty());
        let a = GenConfig::for_difficulty(4).attributes();
        for want in [
            Attribute::Occlusion,
            Attribute::Distractor,
            Attribute::FastMotion,
            Attribute::Deformation,
            Attribute::Clutter,
        ] {
            assert!(a.contains(&want), "missing {want:?}");
        }
    }

    #[test]
    fn oversized_target_rejected() {
        let cfg = GenConfig {
            target_max: 120.0,
            ..GenConfig::for_difficulty(0)
        };
        assert!(generate_sequence(&cfg, &mut RandomState::new(1)).is_err());
    }

    #[test]
    fn pixels_are_8bit_quantized() {
        let cfg = GenConfig::for_difficulty(3);
        let seq = generate_sequence(&cfg, &mut RandomState::new(5)).unwrap();
        for p in &seq.frames[0].pixels {
            let q = (p * 255.0).round() / 255.0;
            assert!((p - q).abs() < 1e-6);
        }
    }
}
