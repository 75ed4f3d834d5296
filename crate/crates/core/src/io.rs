//! File interchange: PNG images, mask sidecars, and line-delimited template records.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::domain::{Component, ComponentMask, FaceImage, FacialTemplate};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[-1, 1] -> [0, 255]`, the inverse of `x / 127.5 - 1`.
pub fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

fn png_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path.display().to_string(), e.to_string())
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| png_error(path, e))?;
    w.write_image_data(bytes).map_err(|e| png_error(path, e))?;
    w.finish().map_err(|e| png_error(path, e))?;
    Ok(())
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(|e| png_error(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| png_error(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_error(path, "only 8-bit PNGs are supported"));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

/// Writes an RGB image; pixels are quantised to 8 bits.
pub fn save_image<T: Scalar>(img: &FaceImage<T>, path: &Path) -> Result<()> {
    let s = img.side();
    let plane = s * s;
    let d = img.data();
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(to_u8(d[c * plane + i].as_f64()));
        }
    }
    write_png(path, s, s, png::ColorType::Rgb, &bytes)
}

pub fn load_image<T: Scalar>(path: &Path) -> Result<FaceImage<T>> {
    let (w, h, color, bytes) = read_png(path)?;
    let channels = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(png_error(path, format!("unsupported colour type {other:?}"))),
    };
    let plane = w * h;
    let mut data = vec![T::zero(); 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = T::lit(from_u8(bytes[i * channels + c]));
        }
    }
    FaceImage::new(Tensor::from_vec(&[3, h, w], data)?)
}

/// Quantises through the 8-bit PNG representation without touching disk.
pub fn quantize<T: Scalar>(img: &FaceImage<T>) -> FaceImage<T> {
    let px = img.pixels().map(|v| T::lit(from_u8(to_u8(v.as_f64()))));
    FaceImage::new(px).expect("quantised pixels stay in range")
}

/// Tiles images left-to-right (columns) and top-to-bottom (rows).
pub fn save_grid<T: Scalar>(rows: &[Vec<&FaceImage<T>>], path: &Path) -> Result<()> {
    let s = rows
        .first()
        .and_then(|r| r.first())
        .map(|i| i.side())
        .ok_or_else(|| Error::Data("empty grid".into()))?;
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let (gw, gh) = (cols * s, rows.len() * s);
    let mut bytes = vec![0u8; gw * gh * 3];
    let plane = s * s;
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let d = img.data();
            for y in 0..s {
                for x in 0..s {
                    let o = ((r * s + y) * gw + c * s + x) * 3;
                    for ch in 0..3 {
                        bytes[o + ch] = to_u8(d[ch * plane + y * s + x].as_f64());
                    }
                }
            }
        }
    }
    write_png(path, gw, gh, png::ColorType::Rgb, &bytes)
}

/// Writes masks as one grey PNG whose bit `k` marks component `k`.
pub fn save_mask_sidecar(masks: &BTreeMap<Component, ComponentMask>, path: &Path) -> Result<()> {
    let m0 = masks
        .values()
        .next()
        .ok_or_else(|| Error::Data("no masks to write".into()))?;
    let (h, w) = (m0.height(), m0.width());
    let mut bytes = vec![0u8; h * w];
    for (c, m) in masks {
        for (b, bit) in bytes.iter_mut().zip(m.bits()) {
            if *bit {
                *b |= 1 << c.index();
            }
        }
    }
    write_png(path, w, h, png::ColorType::Grayscale, &bytes)
}

pub fn load_mask_sidecar(path: &Path) -> Result<BTreeMap<Component, ComponentMask>> {
    let (w, h, color, bytes) = read_png(path)?;
    if color != png::ColorType::Grayscale {
        return Err(png_error(path, "mask sidecar must be greyscale"));
    }
    let mut out = BTreeMap::new();
    for c in Component::ALL {
        let bits = bytes.iter().map(|b| b & (1 << c.index()) != 0).collect();
        out.insert(c, ComponentMask::from_bits(c, h, w, bits)?);
    }
    Ok(out)
}

/// One line of a templates file: an id and base64 of little-endian f32 values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateRecord {
    pub id: String,
    pub template: String,
}

impl TemplateRecord {
    pub fn encode<T: Scalar>(id: impl Into<String>, t: &FacialTemplate<T>) -> Self {
        let vals: Vec<f32> = t.values().iter().map(|v| v.as_f64() as f32).collect();
        TemplateRecord {
            id: id.into(),
            template: B64.encode(f32::to_le_bytes_vec(&vals)),
        }
    }

    pub fn decode<T: Scalar>(&self) -> Result<FacialTemplate<T>> {
        let bytes = B64
            .decode(&self.template)
            .map_err(|e| Error::format(&self.id, format!("bad base64: {e}")))?;
        let vals = f32::from_le_bytes_slice(&bytes)
            .ok_or_else(|| Error::format(&self.id, "byte length is not a multiple of 4"))?;
        FacialTemplate::new(vals.into_iter().map(|v| T::lit(v as f64)).collect())
    }
}

pub fn write_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            Error::format(path.display().to_string(), format!("line {}: {e}", n + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn template_records_are_bit_exact(vals in prop::collection::vec(-10.0f32..10.0, 1..64)) {
            let t = FacialTemplate::new(vals.clone()).unwrap();
            let rec = TemplateRecord::encode("x", &t);
            let back: FacialTemplate<f32> = rec.decode().unwrap();
            prop_assert_eq!(back.values(), &vals[..]);
        }

        #[test]
        fn u8_quantisation_is_idempotent(v in 0u8..=255) {
            prop_assert_eq!(to_u8(from_u8(v)), v);
        }
    }

    #[test]
    fn png_round_trip_is_lossless_after_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let mut px = Tensor::<f32>::zeros(&[3, 32, 32]);
        for (i, v) in px.data_mut().iter_mut().enumerate() {
            *v = ((i % 97) as f32 / 48.0) - 1.0;
        }
        let img = quantize(&FaceImage::new(px).unwrap());
        let p = dir.path().join("a.png");
        save_image(&img, &p).unwrap();
        let back: FaceImage<f32> = load_image(&p).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn bad_base64_is_format_error() {
        let rec = TemplateRecord {
            id: "x".into(),
            template: "!!!".into(),
        };
        assert!(matches!(rec.decode::<f32>(), Err(Error::Format { .. })));
    }
}
