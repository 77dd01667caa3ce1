//! Color-wheel encoding of flow fields and Middlebury `.flo` serialization.
//!
//! The encoding is the standard HSV wheel: hue is the flow direction
//! `atan2(v, u)`, saturation is the magnitude scaled by the chosen
//! normalizer, value is full. Zero flow therefore encodes to white.

use super::{FlowError, FlowField};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::RgbImage;
use serde::{Deserialize, Serialize};

/// How magnitudes map to saturation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Normalization {
    /// Scale by the maximum magnitude of the frame (clamped away from zero).
    PerFrameMax,
    /// Scale by a fixed magnitude, preserving cross-frame comparability.
    FixedMax(f32),
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h_deg / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round().clamp(0.0, 255.0) as u8,
        ((g + m) * 255.0).round().clamp(0.0, 255.0) as u8,
        ((b + m) * 255.0).round().clamp(0.0, 255.0) as u8,
    ]
}

/// Encodes a flow field as a 3-channel color-wheel image.
pub fn encode_flow_rgb(field: &FlowField, normalization: Normalization) -> RgbImage {
    let (h, w) = field.u.dim();
    let scale = match normalization {
        Normalization::FixedMax(m) => m.max(1e-6),
        Normalization::PerFrameMax => field
            .u
            .iter()
            .zip(field.v.iter())
            .map(|(&u, &v)| (u * u + v * v).sqrt())
            .fold(0.0f32, f32::max)
            .max(1e-6),
    } as f64;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let u = field.u[[y as usize, x as usize]] as f64;
        let v = field.v[[y as usize, x as usize]] as f64;
        let mag = (u * u + v * v).sqrt();
        let hue = v.atan2(u).to_degrees().rem_euclid(360.0);
        let sat = (mag / scale).clamp(0.0, 1.0);
        image::Rgb(hsv_to_rgb(hue, sat, 1.0))
    })
}

const FLO_MAGIC: f32 = 202021.25;

/// Serializes a field in the Middlebury two-channel binary layout.
pub fn encode_flo(field: &FlowField) -> Vec<u8> {
    let (h, w) = field.u.dim();
    let mut out = Vec::with_capacity(12 + h * w * 8);
    out.write_f32::<LittleEndian>(FLO_MAGIC).unwrap();
    out.write_i32::<LittleEndian>(w as i32).unwrap();
    out.write_i32::<LittleEndian>(h as i32).unwrap();
    for y in 0..h {
        for x in 0..w {
            out.write_f32::<LittleEndian>(field.u[[y, x]]).unwrap();
            out.write_f32::<LittleEndian>(field.v[[y, x]]).unwrap();
        }
    }
    out
}

/// Parses a Middlebury `.flo` buffer.
pub fn decode_flo(bytes: &[u8]) -> Result<FlowField, FlowError> {
    let mut cursor = std::io::Cursor::new(bytes);
    let magic = cursor.read_f32::<LittleEndian>().map_err(|_| FlowError::BadFlo("truncated header".into()))?;
    if magic != FLO_MAGIC {
        return Err(FlowError::BadFlo(format!("bad magic {magic}")));
    }
    let w = cursor.read_i32::<LittleEndian>().map_err(|_| FlowError::BadFlo("truncated width".into()))?;
    let h = cursor.read_i32::<LittleEndian>().map_err(|_| FlowError::BadFlo("truncated height".into()))?;
    if w <= 0 || h <= 0 || (w as u64) * (h as u64) > 1 << 28 {
        return Err(FlowError::BadFlo(format!("implausible dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let mut u = ndarray::Array2::zeros((h, w));
    let mut v = ndarray::Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            u[[y, x]] = cursor.read_f32::<LittleEndian>().map_err(|_| FlowError::BadFlo("truncated data".into()))?;
            v[[y, x]] = cursor.read_f32::<LittleEndian>().map_err(|_| FlowError::BadFlo("truncated data".into()))?;
        }
    }
    FlowField::new(u, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn rgb_to_hue_deg(p: &image::Rgb<u8>) -> f64 {
        let r = p[0] as f64 / 255.0;
        let g = p[1] as f64 / 255.0;
        let b = p[2] as f64 / 255.0;
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

    fn uniform_field(u: f32, v: f32, w: usize, h: usize) -> FlowField {
        FlowField::new(Array2::from_elem((h, w), u), Array2::from_elem((h, w), v)).unwrap()
    }

    #[test]
    fn zero_field_is_white() {
        let field = FlowField::zeros(8, 6);
        let img = encode_flow_rgb(&field, Normalization::PerFrameMax);
        for p in img.pixels() {
            assert_eq!(p.0, [255, 255, 255]);
        }
    }

    #[test]
    fn opposite_directions_are_180_degrees_apart() {
        let pos = encode_flow_rgb(&uniform_field(3.0, 0.0, 4, 4), Normalization::PerFrameMax);
        let neg = encode_flow_rgb(&uniform_field(-3.0, 0.0, 4, 4), Normalization::PerFrameMax);
        let hp = rgb_to_hue_deg(pos.get_pixel(0, 0));
        let hn = rgb_to_hue_deg(neg.get_pixel(0, 0));
        let diff = (hp - hn).rem_euclid(360.0);
        assert!((diff - 180.0).abs() < 2.0, "hue difference {diff}");
    }

    #[test]
    fn negated_field_flips_hue_everywhere() {
        // Random-ish field with magnitudes above the noise floor.
        let u = Array2::from_shape_fn((6, 7), |(y, x)| 1.0 + (x as f32 * 0.7 + y as f32 * 0.3).sin());
        let v = Array2::from_shape_fn((6, 7), |(y, x)| 1.5 + (x as f32 * 0.2 - y as f32 * 0.5).cos());
        let field = FlowField::new(u, v).unwrap();
        let a = encode_flow_rgb(&field, Normalization::PerFrameMax);
        let b = encode_flow_rgb(&field.negated(), Normalization::PerFrameMax);
        for (pa, pb) in a.pixels().zip(b.pixels()) {
            let diff = (rgb_to_hue_deg(pa) - rgb_to_hue_deg(pb)).rem_euclid(360.0);
            assert!((diff - 180.0).abs() < 3.0, "hue difference {diff}");
        }
    }

    #[test]
    fn lone_peak_saturates_fully_under_per_frame_max() {
        let mut u = Array2::zeros((5, 5));
        u[[2, 3]] = 7.5f32;
        let field = FlowField::new(u, Array2::zeros((5, 5))).unwrap();
        let img = encode_flow_rgb(&field, Normalization::PerFrameMax);
        // Full saturation at hue 0 is pure red.
        assert_eq!(img.get_pixel(3, 2).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(0, 0).0, [255, 255, 255]);
    }

    #[test]
    fn per_frame_max_is_scale_invariant() {
        let u = Array2::from_shape_fn((6, 6), |(y, x)| (x as f32 - 2.5) * (y as f32 + 1.0) * 0.3);
        let v = Array2::from_shape_fn((6, 6), |(y, x)| (y as f32 - 2.0) * 0.4 - x as f32 * 0.1);
        let field = FlowField::new(u.clone(), v.clone()).unwrap();
        let scaled = FlowField::new(u.mapv(|x| x * 3.7), v.mapv(|x| x * 3.7)).unwrap();
        let a = encode_flow_rgb(&field, Normalization::PerFrameMax);
        let b = encode_flow_rgb(&scaled, Normalization::PerFrameMax);
        for (pa, pb) in a.pixels().zip(b.pixels()) {
            for c in 0..3 {
                assert!(pa[c].abs_diff(pb[c]) <= 1, "{pa:?} vs {pb:?}");
            }
        }
    }

    #[test]
    fn fixed_max_preserves_relative_magnitude() {
        let weak = encode_flow_rgb(&uniform_field(1.0, 0.0, 2, 2), Normalization::FixedMax(10.0));
        let strong = encode_flow_rgb(&uniform_field(8.0, 0.0, 2, 2), Normalization::FixedMax(10.0));
        // Stronger motion is more saturated: the non-red channels drop.
        assert!(weak.get_pixel(0, 0)[1] > strong.get_pixel(0, 0)[1]);
    }

    #[test]
    fn flo_roundtrip_is_exact() {
        let u = Array2::from_shape_fn((4, 5), |(y, x)| x as f32 * 0.25 - y as f32);
        let v = Array2::from_shape_fn((4, 5), |(y, x)| y as f32 * 1.5 + x as f32 * 0.1);
        let field = FlowField::new(u, v).unwrap();
        let bytes = encode_flo(&field);
        let back = decode_flo(&bytes).unwrap();
        assert_eq!(back, field);
        assert!(decode_flo(&bytes[..8]).is_err());
        let mut bad = bytes.clone();
        bad[0] ^= 0x55;
        assert!(decode_flo(&bad).is_err());
    }
}
