//! Moving-shape scenes with exact ground-truth flow.
//!
//! Shapes move with constant integer velocities over a constant background,
//! never touch the canvas border and never overlap, so the flow between
//! consecutive frames is single-valued and warping frame `t` by it
//! reproduces frame `t + 1` exactly.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::flow::FlowField;
use super::frames::{normalize_value, FrameSequence, SPATIAL_MULTIPLE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// `[height, width]` of the bounding box.
    pub size: [usize; 2],
    pub color: [u8; 3],
    /// Top-left corner `[x, y]` in frame 0.
    pub start: [i64; 2],
    /// `[vx, vy]` in pixels per frame.
    pub velocity: [i64; 2],
}

impl ShapeSpec {
    fn origin_at(&self, t: usize) -> (i64, i64) {
        (
            self.start[0] + self.velocity[0] * t as i64,
            self.start[1] + self.velocity[1] * t as i64,
        )
    }

    /// Membership of a box-relative pixel.
    fn covers(&self, dx: usize, dy: usize) -> bool {
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => {
                let [h, w] = self.size;
                let ry = h as f64 / 2.0;
                let rx = w as f64 / 2.0;
                let ny = (dy as f64 + 0.5 - ry) / ry;
                let nx = (dx as f64 + 0.5 - rx) / rx;
                nx * nx + ny * ny <= 1.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    /// `[height, width]`.
    pub canvas: [usize; 2],
    pub shapes: Vec<ShapeSpec>,
    /// Constant background color.
    pub background: [u8; 3],
    pub num_frames: usize,
}

/// Unit directions indexed by motion class, counter-clockwise from +x in
/// image coordinates (y grows downwards).
pub const DIRECTIONS: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

const BACKGROUND: i32 = -1;

impl SyntheticSceneSpec {
    fn owner_map(&self, t: usize) -> Result<Vec<i32>> {
        let [h, w] = self.canvas;
        let mut owner = vec![BACKGROUND; h * w];
        for (k, s) in self.shapes.iter().enumerate() {
            let (x0, y0) = s.origin_at(t);
            let [sh, sw] = s.size;
            if x0 < 1 || y0 < 1 || x0 + sw as i64 > w as i64 - 1 || y0 + sh as i64 > h as i64 - 1 {
                return Err(Error::Spec(format!(
                    "shape {k} at frame {t} spans x {x0}..{} y {y0}..{}, outside the canvas interior",
                    x0 + sw as i64,
                    y0 + sh as i64
                )));
            }
            for dy in 0..sh {
                for dx in 0..sw {
                    if !s.covers(dx, dy) {
                        continue;
                    }
                    let p = (y0 as usize + dy) * w + x0 as usize + dx;
                    if owner[p] != BACKGROUND {
                        return Err(Error::Spec(format!("shapes {} and {k} overlap at frame {t}", owner[p])));
                    }
                    owner[p] = k as i32;
                }
            }
        }
        Ok(owner)
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.canvas;
        if h == 0 || w == 0 || h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::Spec(format!(
                "canvas {h}x{w} must be a positive multiple of {SPATIAL_MULTIPLE}"
            )));
        }
        if self.num_frames < 2 {
            return Err(Error::Spec("need at least 2 frames".into()));
        }
        for (k, s) in self.shapes.iter().enumerate() {
            if s.size[0] == 0 || s.size[1] == 0 {
                return Err(Error::Spec(format!("shape {k} has an empty size")));
            }
            if s.color == self.background {
                return Err(Error::Spec(format!("shape {k} has the background color")));
            }
        }
        for t in 0..self.num_frames {
            self.owner_map(t)?;
        }
        Ok(())
    }
}

fn render(spec: &SyntheticSceneSpec, owner: &[i32]) -> Tensor {
    let [h, w] = spec.canvas;
    let mut t = Tensor::zeros(&[3, h, w]);
    for c in 0..3 {
        let plane = t.channel_mut(c);
        for (p, &o) in owner.iter().enumerate() {
            let color = if o == BACKGROUND {
                spec.background
            } else {
                spec.shapes[o as usize].color
            };
            plane[p] = normalize_value(color[c]);
        }
    }
    t
}

/// Renders the scene and the `T - 1` sampling-offset flows between
/// consecutive frames. Identical specs give bit-identical output.
///
/// A pixel covered by shape `k` in frame `t + 1` gets flow `-v_k`; a pixel
/// uncovered by shape `k` between the two frames also gets `-v_k` (it samples
/// the background that shape `k` left behind); every other pixel gets zero.
pub fn generate_moving_shapes(spec: &SyntheticSceneSpec) -> Result<(FrameSequence, Vec<FlowField>)> {
    spec.validate()?;
    let [h, w] = spec.canvas;
    let owners = (0..spec.num_frames)
        .map(|t| spec.owner_map(t))
        .collect::<Result<Vec<_>>>()?;
    let frames: Vec<Tensor> = owners.iter().map(|o| render(spec, o)).collect();
    let mut flows = Vec::with_capacity(spec.num_frames - 1);
    for t in 0..spec.num_frames - 1 {
        let (src, dst) = (&owners[t], &owners[t + 1]);
        let mut data = Tensor::zeros(&[2, h, w]);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let k = if dst[p] != BACKGROUND { dst[p] } else { src[p] };
                if k == BACKGROUND {
                    continue;
                }
                let [vx, vy] = spec.shapes[k as usize].velocity;
                // the warp replicates the border, so clamp like it does
                let sx = (x as i64 - vx).clamp(0, w as i64 - 1);
                let sy = (y as i64 - vy).clamp(0, h as i64 - 1);
                let sp = sy as usize * w + sx as usize;
                if src[sp] != dst[p] {
                    return Err(Error::Spec(format!(
                        "frame {t}->{}: pixel ({x}, {y}) has no single-valued source; shapes pass too close",
                        t + 1
                    )));
                }
                data.data_mut()[p] = -vx as f64;
                data.data_mut()[h * w + p] = -vy as f64;
            }
        }
        flows.push(FlowField::new(data)?);
    }
    let seq = FrameSequence::new(frames, "synthetic")?;
    Ok((seq, flows))
}

/// Parameters for drawing random scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSampler {
    pub canvas: [usize; 2],
    pub num_frames: usize,
    pub num_shapes: usize,
    /// Inclusive range of box side lengths.
    pub size_range: (usize, usize),
    /// Per-axis speed used with [`DIRECTIONS`].
    pub speed: i64,
    /// Fixed velocity for every shape; overrides `direction` and `speed`.
    pub velocity: Option<[i64; 2]>,
    /// Shared motion class for every shape; random per shape when `None`.
    pub direction: Option<usize>,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            canvas: [64, 64],
            num_frames: 10,
            num_shapes: 2,
            size_range: (10, 16),
            speed: 2,
            velocity: None,
            direction: None,
        }
    }
}

const MAX_ATTEMPTS: usize = 500;

impl SceneSampler {
    /// Draws a valid scene; deterministic in `seed`.
    pub fn sample(&self, seed: u64) -> Result<SyntheticSceneSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let background = [
            rng.random_range(40..=90u8),
            rng.random_range(40..=90u8),
            rng.random_range(40..=90u8),
        ];
        for _ in 0..MAX_ATTEMPTS {
            let spec = SyntheticSceneSpec {
                canvas: self.canvas,
                shapes: (0..self.num_shapes)
                    .map(|_| self.draw_shape(&mut rng, background))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| Error::Spec("shape cannot stay inside the canvas at this speed".into()))?,
                background,
                num_frames: self.num_frames,
            };
            if spec.validate().is_ok() && generate_moving_shapes(&spec).is_ok() {
                return Ok(spec);
            }
        }
        Err(Error::Spec(format!(
            "could not place {} non-overlapping shapes in {MAX_ATTEMPTS} attempts",
            self.num_shapes
        )))
    }

    fn draw_shape(&self, rng: &mut ChaCha8Rng, background: [u8; 3]) -> Option<ShapeSpec> {
        let [ch, cw] = self.canvas;
        let velocity = match (self.velocity, self.direction) {
            (Some(v), _) => v,
            (None, Some(d)) => {
                let (dx, dy) = DIRECTIONS[d % 8];
                [dx * self.speed, dy * self.speed]
            }
            (None, None) => {
                let (dx, dy) = DIRECTIONS[rng.random_range(0..8)];
                [dx * self.speed, dy * self.speed]
            }
        };
        let size = [
            rng.random_range(self.size_range.0..=self.size_range.1),
            rng.random_range(self.size_range.0..=self.size_range.1),
        ];
        let travel = |v: i64| v * (self.num_frames as i64 - 1);
        let range = |extent: usize, len: usize, v: i64| -> Option<(i64, i64)> {
            let lo = 1 - travel(v).min(0);
            let hi = extent as i64 - 1 - len as i64 - travel(v).max(0);
            (lo <= hi).then_some((lo, hi))
        };
        let (xlo, xhi) = range(cw, size[1], velocity[0])?;
        let (ylo, yhi) = range(ch, size[0], velocity[1])?;
        let kind = if rng.random_bool(0.5) {
            ShapeKind::Rectangle
        } else {
            ShapeKind::Ellipse
        };
        let color = loop {
            let c = [
                rng.random_range(110..=230u8),
                rng.random_range(110..=230u8),
                rng.random_range(110..=230u8),
            ];
            let contrast: i32 = c
                .iter()
                .zip(&background)
                .map(|(a, b)| (*a as i32 - *b as i32).abs())
                .sum();
            if contrast >= 150 {
                break c;
            }
        };
        Some(ShapeSpec {
            kind,
            size,
            color,
            start: [rng.random_range(xlo..=xhi), rng.random_range(ylo..=yhi)],
            velocity,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(start: [i64; 2], velocity: [i64; 2]) -> ShapeSpec {
        ShapeSpec {
            kind: ShapeKind::Rectangle,
            size: [6, 8],
            color: [200, 40, 40],
            start,
            velocity,
        }
    }

    fn scene(shapes: Vec<ShapeSpec>, frames: usize) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            canvas: [32, 32],
            shapes,
            background: [60, 60, 60],
            num_frames: frames,
        }
    }

    #[test]
    fn static_scene_has_identical_frames_and_zero_flow() {
        let (seq, flows) = generate_moving_shapes(&scene(vec![rect([5, 5], [0, 0])], 4)).unwrap();
        assert!(seq.frames().windows(2).all(|p| p[0] == p[1]));
        assert!(flows.iter().all(|f| f.max_magnitude() == 0.0));
        assert_eq!(flows.len(), 3);
    }

    #[test]
    fn leaving_the_canvas_is_rejected_before_rendering() {
        let err = generate_moving_shapes(&scene(vec![rect([20, 5], [3, 0])], 4)).unwrap_err();
        assert!(matches!(err, Error::Spec(_)));
        let err = generate_moving_shapes(&scene(vec![rect([0, 5], [0, 0])], 2)).unwrap_err();
        assert!(matches!(err, Error::Spec(_)));
    }

    #[test]
    fn overlapping_shapes_are_rejected() {
        let err = generate_moving_shapes(&scene(vec![rect([4, 4], [0, 0]), rect([8, 6], [0, 0])], 2)).unwrap_err();
        assert!(matches!(err, Error::Spec(_)));
    }

    #[test]
    fn sampler_is_deterministic_and_valid() {
        let s = SceneSampler::default();
        let a = s.sample(11).unwrap();
        assert_eq!(a, s.sample(11).unwrap());
        assert_ne!(a, s.sample(12).unwrap());
        generate_moving_shapes(&a).unwrap();
        for (d, &(dx, dy)) in DIRECTIONS.iter().enumerate() {
            let spec = SceneSampler {
                direction: Some(d),
                ..SceneSampler::default()
            }
            .sample(d as u64)
            .unwrap();
            assert!(spec.shapes.iter().all(|s| s.velocity == [2 * dx, 2 * dy]));
        }
    }

    #[test]
    fn scene_spec_serializes_to_toml() {
        let spec = scene(vec![rect([5, 5], [2, 0])], 3);
        let text = toml::to_string(&spec).unwrap();
        let back: SyntheticSceneSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
