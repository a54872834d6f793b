use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magic float at the start of every Middlebury `.flo` file.
pub const FLO_MAGIC: f32 = 202_021.25;
const FLO_HEADER_BYTES: usize = 12;
const FLO_MAX_DIM: i32 = 1 << 16;

/// Per-pixel displacement `[2, H, W]`, channel 0 horizontal (`u`), channel 1
/// vertical (`v`), in pixels.
///
/// Values are sampling offsets: warping a source frame by this field reads
/// the source at `(x + u, y + v)` for output pixel `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    data: Tensor,
}

impl FlowField {
    pub const CONVENTION: &'static str = "sampling-offset";

    pub fn new(data: Tensor) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 3 || dims[0] != 2 {
            return Err(Error::Structural(format!("flow must be [2, H, W], got {dims:?}")));
        }
        if !data.is_finite() {
            return Err(Error::Structural("flow contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: Tensor::zeros(&[2, h, w]),
        }
    }

    pub fn constant(h: usize, w: usize, u: f64, v: f64) -> Self {
        let mut data = Tensor::zeros(&[2, h, w]);
        data.channel_mut(0).fill(u);
        data.channel_mut(1).fill(v);
        Self { data }
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn u(&self) -> &[f64] {
        self.data.channel(0)
    }

    pub fn v(&self) -> &[f64] {
        self.data.channel(1)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn max_magnitude(&self) -> f64 {
        self.u().iter().zip(self.v()).fold(0.0, |m, (u, v)| m.max(u.hypot(*v)))
    }
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

/// Serializes to the Middlebury layout (little-endian).
pub fn encode_flo(flow: &FlowField) -> Result<Vec<u8>> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(FLO_HEADER_BYTES + 8 * h * w);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    let (u, v) = (flow.u(), flow.v());
    for p in 0..h * w {
        for value in [u[p], v[p]] {
            let f = value as f32;
            if !f.is_finite() {
                return Err(format_err(out.len(), format!("value {value} is not representable")));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    let word = |offset: usize| -> Result<[u8; 4]> {
        bytes
            .get(offset..offset + 4)
            .map(|b| b.try_into().expect("4 bytes"))
            .ok_or_else(|| format_err(bytes.len(), format!("truncated: expected 4 bytes at offset {offset}")))
    };
    let magic = f32::from_le_bytes(word(0)?);
    if magic != FLO_MAGIC {
        return Err(format_err(0, format!("bad magic {magic}, expected {FLO_MAGIC}")));
    }
    let w = i32::from_le_bytes(word(4)?);
    if !(1..=FLO_MAX_DIM).contains(&w) {
        return Err(format_err(4, format!("invalid width {w}")));
    }
    let h = i32::from_le_bytes(word(8)?);
    if !(1..=FLO_MAX_DIM).contains(&h) {
        return Err(format_err(8, format!("invalid height {h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = FLO_HEADER_BYTES + 8 * w * h;
    if bytes.len() < need {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: {} bytes, need {need}", bytes.len()),
        ));
    }
    if bytes.len() > need {
        return Err(format_err(need, format!("{} trailing bytes", bytes.len() - need)));
    }
    let mut data = Tensor::zeros(&[2, h, w]);
    let plane = h * w;
    for p in 0..plane {
        for c in 0..2 {
            let offset = FLO_HEADER_BYTES + 8 * p + 4 * c;
            let f = f32::from_le_bytes(word(offset)?);
            if !f.is_finite() {
                return Err(format_err(offset, format!("non-finite value {f}")));
            }
            data.data_mut()[c * plane + p] = f64::from(f);
        }
    }
    Ok(FlowField { data })
}

pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    let bytes = encode_flo(flow)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    decode_flo(&std::fs::read(path)?)
}

/// Color-wheel rendering: hue is the flow direction, saturation the
/// magnitude divided by `max_magnitude` (default: largest magnitude in the
/// field), value fixed at 1. Zero flow is white.
pub fn flow_to_color(flow: &FlowField, max_magnitude: Option<f64>) -> RgbImage {
    let (h, w) = (flow.height(), flow.width());
    let max = max_magnitude.unwrap_or_else(|| flow.max_magnitude());
    let mut img = RgbImage::new(w as u32, h as u32);
    let (u, v) = (flow.u(), flow.v());
    for (x, y, px) in img.enumerate_pixels_mut() {
        let p = y as usize * w + x as usize;
        let mag = u[p].hypot(v[p]);
        let sat = if max > 0.0 { (mag / max).min(1.0) } else { 0.0 };
        let hue = flow_hue_degrees(u[p], v[p]);
        px.0 = hsv_to_rgb8(hue, sat, 1.0);
    }
    img
}

/// Direction of `(u, v)` in degrees, `[0, 360)`, measured from +x.
pub fn flow_hue_degrees(u: f64, v: f64) -> f64 {
    v.atan2(u).to_degrees().rem_euclid(360.0)
}

fn hsv_to_rgb8(hue: f64, sat: f64, val: f64) -> [u8; 3] {
    let c = val * sat;
    let hp = hue / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    let to8 = |f: f64| ((f + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [to8(r), to8(g), to8(b)]
}

/// Hue in degrees of an 8-bit RGB color (undefined hue of greys maps to 0).
pub fn rgb_hue_degrees([r, g, b]: [u8; 3]) -> f64 {
    let (r, g, b) = (f64::from(r), f64::from(g), f64::from(b));
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d == 0.0 {
        return 0.0;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    h * 60.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_file_layout() {
        let bytes = encode_flo(&FlowField::zeros(2, 2)).unwrap();
        assert_eq!(bytes.len(), 12 + 32);
        assert_eq!(&bytes[0..4], &202_021.25f32.to_le_bytes());
        assert_eq!(&bytes[4..8], &2i32.to_le_bytes());
        assert_eq!(decode_flo(&bytes).unwrap(), FlowField::zeros(2, 2));
    }

    #[test]
    fn interleaving_is_row_major_u_then_v() {
        let mut t = Tensor::zeros(&[2, 1, 2]);
        t.data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let bytes = encode_flo(&FlowField::new(t).unwrap()).unwrap();
        let floats: Vec<f32> = bytes[12..]
            .chunks(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(floats, [1.0, 3.0, 2.0, 4.0]);
        // width 2, height 1
        assert_eq!(&bytes[4..12], &[2, 0, 0, 0, 1, 0, 0, 0]);
    }

    #[test]
    fn format_errors_carry_offsets() {
        let mut bytes = encode_flo(&FlowField::constant(2, 3, 3.5, -1.25)).unwrap();
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(matches!(decode_flo(&bad), Err(Error::Format { offset: 0, .. })));
        let trunc = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_flo(trunc), Err(Error::Format { offset, .. }) if offset == trunc.len() as u64));
        bytes[12 + 8..12 + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_flo(&bytes), Err(Error::Format { offset: 20, .. })));
        assert!(matches!(decode_flo(&[0u8; 2]), Err(Error::Format { .. })));
    }

    #[test]
    fn zero_flow_is_white() {
        let img = flow_to_color(&FlowField::zeros(4, 4), None);
        assert!(img.pixels().all(|p| p.0 == [255, 255, 255]));
    }

    #[test]
    fn opposite_directions_have_opposite_hues() {
        let right = flow_to_color(&FlowField::constant(1, 1, 1.0, 0.0), None);
        let left = flow_to_color(&FlowField::constant(1, 1, -1.0, 0.0), None);
        let a = rgb_hue_degrees(right.get_pixel(0, 0).0);
        let b = rgb_hue_degrees(left.get_pixel(0, 0).0);
        let d = (a - b).rem_euclid(360.0);
        assert!((d - 180.0).abs() < 1.0, "hues {a} and {b}");
    }

    #[test]
    fn scaled_flows_share_hue_map() {
        let mut t = Tensor::zeros(&[2, 2, 2]);
        t.data_mut()
            .copy_from_slice(&[1.0, -2.0, 0.5, 0.0, 0.3, 1.0, -1.0, 2.0]);
        let a = FlowField::new(t.clone()).unwrap();
        let b = FlowField::new(t.map(|v| 3.0 * v)).unwrap();
        assert_eq!(flow_to_color(&a, None), flow_to_color(&b, None));
    }
}
