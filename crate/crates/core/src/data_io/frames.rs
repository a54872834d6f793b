use std::path::{Path, PathBuf};

use image::{imageops::FilterType, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial sizes must be divisible by the encoder's total downsampling.
pub const SPATIAL_MULTIPLE: usize = 8;

/// Ordered RGB frames `[3, H, W]` with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Tensor>,
    pub frame_interval: f64,
    pub source_id: String,
}

impl FrameSequence {
    pub fn new(frames: Vec<Tensor>, source_id: impl Into<String>) -> Result<Self> {
        let seq = Self {
            frames,
            frame_interval: 1.0,
            source_id: source_id.into(),
        };
        seq.validate()?;
        Ok(seq)
    }

    /// Like [`FrameSequence::new`] but allows a single frame, for recursive
    /// prediction windows and the copy-last baseline.
    pub fn window(frames: Vec<Tensor>, source_id: impl Into<String>) -> Result<Self> {
        let seq = Self {
            frames,
            frame_interval: 1.0,
            source_id: source_id.into(),
        };
        seq.validate_frames(1)?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_frames(2)
    }

    fn validate_frames(&self, min_len: usize) -> Result<()> {
        if self.frames.len() < min_len {
            return Err(Error::Dataset(format!(
                "sequence `{}` has {} frame(s), need at least {min_len}",
                self.source_id,
                self.frames.len()
            )));
        }
        let dims = self.frames[0].dims().to_vec();
        if dims.len() != 3 || dims[0] != 3 {
            return Err(Error::Structural(format!("frames must be [3, H, W], got {dims:?}")));
        }
        if !dims[1].is_multiple_of(SPATIAL_MULTIPLE)
            || !dims[2].is_multiple_of(SPATIAL_MULTIPLE)
            || dims[1] == 0
            || dims[2] == 0
        {
            return Err(Error::Structural(format!(
                "frame size {}x{} is not a positive multiple of {SPATIAL_MULTIPLE}",
                dims[1], dims[2]
            )));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.dims() != dims.as_slice() {
                return Err(Error::Structural(format!(
                    "frame {i} has shape {:?}, expected {dims:?}",
                    f.dims()
                )));
            }
            if f.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::Dataset(format!("frame {i} has values outside [-1, 1]")));
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].dims()[1]
    }

    pub fn width(&self) -> usize {
        self.frames[0].dims()[2]
    }

    pub fn last(&self) -> &Tensor {
        self.frames.last().expect("validated non-empty")
    }

    /// Frames `start..end` as a new window.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Self::window(self.frames[start..end].to_vec(), self.source_id.clone())
    }

    pub fn into_frames(self) -> Vec<Tensor> {
        self.frames
    }
}

/// Maps 8-bit RGB into `[3, H, W]` with `v -> 2v/255 - 1`.
pub fn normalize_frame(raw: &RgbImage) -> Tensor {
    let (w, h) = (raw.width() as usize, raw.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (x, y, px) in raw.enumerate_pixels() {
        for c in 0..3 {
            t.set(c, y as usize, x as usize, normalize_value(px.0[c]));
        }
    }
    t
}

pub fn normalize_value(v: u8) -> f64 {
    2.0 * f64::from(v) / 255.0 - 1.0
}

/// 8-bit image recovered from a normalized frame.
#[derive(Clone, Debug)]
pub struct Denormalized {
    pub image: RgbImage,
    /// Number of values outside `[-1, 1]` that were clamped.
    pub clamped: usize,
}

pub fn denormalize_frame(frame: &Tensor) -> Result<Denormalized> {
    let (c, h, w) = frame.chw();
    if c != 3 {
        return Err(Error::Structural(format!("expected 3 channels, got {c}")));
    }
    let mut clamped = 0;
    let mut image = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in image.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = frame.at(ch, y as usize, x as usize);
            if !(-1.0..=1.0).contains(&v) {
                clamped += 1;
            }
            px.0[ch] = denormalize_value(v);
        }
    }
    Ok(Denormalized { image, clamped })
}

pub fn denormalize_value(v: f64) -> u8 {
    let v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
    ((v + 1.0) * 255.0 / 2.0).round() as u8
}

fn is_frame_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Image files of a directory in lexicographic order.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let read = std::fs::read_dir(dir).map_err(|e| Error::Ingestion {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut files = Vec::new();
    for entry in read {
        let p = entry?.path();
        if p.is_file() && is_frame_file(&p) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

pub fn load_frame(path: &Path, target: Option<(usize, usize)>) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut rgb = img.to_rgb8();
    if let Some((h, w)) = target {
        if (rgb.height() as usize, rgb.width() as usize) != (h, w) {
            rgb = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
        }
    }
    Ok(normalize_frame(&rgb))
}

/// Loads every PNG/JPEG in `dir` (lexicographic order), resized to
/// `target = (H, W)` and normalized into `[-1, 1]`.
pub fn load_frame_folder(dir: &Path, target: (usize, usize)) -> Result<FrameSequence> {
    let files = list_frame_files(dir)?;
    if files.len() < 2 {
        return Err(Error::Dataset(format!(
            "{} contains {} frame image(s), need at least 2",
            dir.display(),
            files.len()
        )));
    }
    let frames = files
        .iter()
        .map(|f| load_frame(f, Some(target)))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, dir.display().to_string())
}

pub fn save_frame(frame: &Tensor, path: &Path) -> Result<()> {
    let d = denormalize_frame(frame)?;
    d.image.save(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(normalize_value(0), -1.0);
        assert_eq!(normalize_value(255), 1.0);
        assert_eq!(normalize_value(128), 2.0 * 128.0 / 255.0 - 1.0);
        assert!((normalize_value(128) - 0.003_921_568_627_45).abs() < 1e-12);
    }

    #[test]
    fn every_byte_round_trips() {
        for v in 0..=255u8 {
            assert_eq!(denormalize_value(normalize_value(v)), v);
        }
    }

    #[test]
    fn out_of_range_values_are_clamped_and_counted() {
        let t = Tensor::from_vec(&[3, 1, 2], vec![1.5, -2.0, 0.0, 0.0, 1.0, -1.0]).unwrap();
        let d = denormalize_frame(&t).unwrap();
        assert_eq!(d.clamped, 2);
        assert_eq!(d.image.get_pixel(0, 0).0[0], 255);
        assert_eq!(d.image.get_pixel(1, 0).0[0], 0);
    }

    #[test]
    fn sequence_rejects_bad_sizes() {
        let f = Tensor::zeros(&[3, 12, 16]);
        assert!(matches!(
            FrameSequence::new(vec![f.clone(), f], "x"),
            Err(Error::Structural(_))
        ));
        let f = Tensor::zeros(&[3, 8, 8]);
        assert!(matches!(FrameSequence::new(vec![f], "x"), Err(Error::Dataset(_))));
    }
}
