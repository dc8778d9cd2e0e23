//! Dataset I/O in a tracking-benchmark directory layout:
//!
//! ```text
//! <root>/<seq>/img/00000001.png
//! <root>/<seq>/groundtruth.txt   one "x,y,w,h" line per frame (pixels)
//! <root>/<seq>/meta.txt          key=value lines (difficulty, attributes)
//! ```
//!
//! PNG is lossless for the 8-bit-quantized frames the generator produces.

use std::fs;
use std::path::Path;

use crate::data::types::{Attribute, BoundingBox, Frame, Sequence};
use crate::error::{DytxError, Result};

fn frame_to_rgb8(frame: &Frame) -> Vec<u8> {
    frame
        .pixels
        .iter()
        .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn write_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    let img_dir = dir.join("img");
    fs::create_dir_all(&img_dir)?;
    let mut gt = String::new();
    for (i, frame) in seq.frames.iter().enumerate() {
        let path = img_dir.join(format!("{:08}.png", i + 1));
        let buf = frame_to_rgb8(frame);
        let img = image::RgbImage::from_raw(frame.width as u32, frame.height as u32, buf)
            .ok_or_else(|| DytxError::Other("frame buffer size mismatch".into()))?;
        img.save(&path)
            .map_err(|e| DytxError::Other(format!("writing {}: {e}", path.display())))?;
        let (x, y, w, h) = frame.gt_box.to_xywh();
        gt.push_str(&format!("{x:.3},{y:.3},{w:.3},{h:.3}\n"));
    }
    fs::write(dir.join("groundtruth.txt"), gt)?;
    let attrs: Vec<&str> = seq.attributes.iter().map(|a| a.as_str()).collect();
    fs::write(
        dir.join("meta.txt"),
        format!("difficulty={}\nattributes={}\n", seq.difficulty, attrs.join(",")),
    )?;
    Ok(())
}

fn parse_gt_line(line: &str, lineno: usize) -> Result<BoundingBox> {
    let parts: Vec<&str> = line.trim().split(',').collect();
    if parts.len() != 4 {
        return Err(DytxError::Parse {
            line: lineno,
            msg: format!("expected 4 comma-separated values, got {}", parts.len()),
        });
    }
    let mut v = [0.0f64; 4];
    for (i, p) in parts.iter().enumerate() {
        v[i] = p.trim().parse().map_err(|_| DytxError::Parse {
            line: lineno,
            msg: format!("invalid number '{p}'"),
        })?;
    }
    Ok(BoundingBox::from_xywh(v[0], v[1], v[2], v[3]))
}

pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let gt_path = dir.join("groundtruth.txt");
    let gt_text = fs::read_to_string(&gt_path).map_err(|e| {
        DytxError::Other(format!("missing ground truth {}: {e}", gt_path.display()))
    })?;
    let boxes: Vec<BoundingBox> = gt_text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_gt_line(l, i + 1))
        .collect::<Result<_>>()?;

    let mut difficulty = 0u8;
    let mut attributes = Vec::new();
    let meta_path = dir.join("meta.txt");
    if meta_path.exists() {
        for (i, line) in fs::read_to_string(&meta_path)?.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| DytxError::Parse {
                line: i + 1,
                msg: format!("expected key=value, got '{line}'"),
            })?;
            match key.trim() {
                "difficulty" => {
                    difficulty = value.trim().parse().map_err(|_| DytxError::Parse {
                        line: i + 1,
                        msg: format!("invalid difficulty '{value}'"),
                    })?;
                }
                "attributes" => {
                    attributes = value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .filter_map(|s| Attribute::parse(s.trim()))
                        .collect();
                }
                _ => {}
            }
        }
    }

    let mut frames = Vec::with_capacity(boxes.len());
    for (i, gt_box) in boxes.iter().enumerate() {
        let path = dir.join("img").join(format!("{:08}.png", i + 1));
        let img = image::open(&path)
            .map_err(|e| DytxError::Other(format!("reading {}: {e}", path.display())))?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels: Vec<f32> = img.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
        frames.push(Frame {
            pixels,
            height: h,
            width: w,
            gt_box: *gt_box,
        });
    }
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".to_string());
    Ok(Sequence {
        name,
        frames,
        difficulty,
        attributes,
    })
}

/// Read every sequence directory under `root`, sorted by name.
pub fn read_dataset(root: &Path) -> Result<Vec<Sequence>> {
    let mut dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("groundtruth.txt").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(DytxError::Other(format!(
            "no sequences found under {}",
            root.display()
        )));
    }
    dirs.iter().map(|d| read_sequence(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate::{generate_sequence, GenConfig};
    use crate::rng::RandomState;

    #[test]
    fn round_trip_is_lossless() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            length: 4,
            ..GenConfig::for_difficulty(3)
        };
        let seq = generate_sequence(&cfg, &mut RandomState::new(77)).unwrap();
        let dir = tmp.path().join(&seq.name);
        write_sequence(&seq, &dir).unwrap();
        let back = read_sequence(&dir).unwrap();
        assert_eq!(back.frames.len(), seq.frames.len());
        assert_eq!(back.difficulty, seq.difficulty);
        assert_eq!(back.attributes, seq.attributes);
        for (a, b) in seq.frames.iter().zip(&back.frames) {
            assert_eq!(a.pixels, b.pixels, "pixel round trip not exact");
            assert!((a.gt_box.cx - b.gt_box.cx).abs() < 1e-3);
            assert!((a.gt_box.w - b.gt_box.w).abs() < 1e-3);
        }
    }

    #[test]
    fn annotation_line_parses_xywh() {
        let b = parse_gt_line("10,20,30,40", 1).unwrap();
        let (x, y, w, h) = b.to_xywh();
        assert_eq!((x, y, w, h), (10.0, 20.0, 30.0, 40.0));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_gt_line("10,20,abc,40", 7).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("7"), "{msg}");
    }

    #[test]
    fn missing_groundtruth_is_explicit_error() {
        let tmp = tempfile::tempdir().unwrap();
        let err = read_sequence(tmp.path()).unwrap_err();
        assert!(err.to_string().contains("ground truth"));
    }
}
