use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};

use super::{read_bytes, read_json, write_bytes, write_json, DataError, Result};
use crate::diffcore::{Architecture, Model, Tensor};
use crate::explain::ImportanceMap;
use crate::stimuli::GrayImage;

const FMAP_MAGIC: &[u8; 4] = b"FMAP";
const HMDL_MAGIC: &[u8; 4] = b"HMDL";
pub const CHECKPOINT_VERSION: u16 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(DataError::Truncated {
                offset: self.pos,
                needed: n - (self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4.min(self.bytes.len()))?;
        if found != expected {
            return Err(DataError::Magic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn encode_fmap(map: &ImportanceMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * map.values().len());
    out.extend_from_slice(FMAP_MAGIC);
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    for &v in map.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_fmap(image_id: &str, bytes: &[u8]) -> Result<ImportanceMap> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(FMAP_MAGIC)?;
    let w = u32::from_le_bytes(r.array()?) as usize;
    let h = u32::from_le_bytes(r.array()?) as usize;
    let mut values = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        values.push(f32::from_le_bytes(r.array()?) as f64);
    }
    if !r.done() {
        return Err(DataError::Malformed(format!(
            "{} trailing bytes after {w}x{h} map",
            bytes.len() - r.pos
        )));
    }
    ImportanceMap::new(image_id, w, h, values).map_err(|e| DataError::Malformed(e.to_string()))
}

/// The map's id is the file stem.
pub fn read_fmap(path: &Path) -> Result<ImportanceMap> {
    let id = stem(path);
    decode_fmap(&id, &read_bytes(path)?)
}

pub fn write_fmap(path: &Path, map: &ImportanceMap) -> Result<()> {
    write_bytes(path, &encode_fmap(map))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

enum Plane {
    Eight(Vec<u8>),
    Sixteen(Vec<u16>),
}

fn decode_gray(path: &Path) -> Result<(usize, usize, Plane)> {
    let bytes = read_bytes(path)?;
    let bad = |message: String| DataError::Image {
        path: path.display().to_string(),
        message,
    };
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| bad(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(b) => Ok((w, h, Plane::Eight(b.into_raw()))),
        DynamicImage::ImageLuma16(b) => Ok((w, h, Plane::Sixteen(b.into_raw()))),
        other => Err(bad(format!("expected 8/16-bit grayscale, got {:?}", other.color()))),
    }
}

fn unit_values(plane: Plane) -> Vec<f64> {
    match plane {
        Plane::Eight(v) => v.into_iter().map(|x| x as f64 / 255.0).collect(),
        Plane::Sixteen(v) => v.into_iter().map(|x| x as f64 / 65535.0).collect(),
    }
}

/// Grayscale PNG heatmap rescaled to [0, 1]; id is the file stem.
pub fn read_heatmap(path: &Path) -> Result<ImportanceMap> {
    let (w, h, plane) = decode_gray(path)?;
    ImportanceMap::new(stem(path), w, h, unit_values(plane)).map_err(|e| DataError::Malformed(e.to_string()))
}

/// Grayscale PNG as a `[1, H, W]` tensor in [0, 1].
pub fn read_image(path: &Path) -> Result<Tensor> {
    let (w, h, plane) = decode_gray(path)?;
    Tensor::new(vec![1, h, w], unit_values(plane)).map_err(|e| DataError::Malformed(e.to_string()))
}

/// Writes values clamped to [0, 1] as an 8- or 16-bit grayscale PNG.
pub fn write_gray_png(path: &Path, image: &GrayImage, sixteen_bit: bool) -> Result<()> {
    let (w, h) = (image.width as u32, image.height as u32);
    let mut out = Cursor::new(Vec::new());
    let res = if sixteen_bit {
        let raw: Vec<u16> = image
            .values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        ImageBuffer::<Luma<u16>, _>::from_raw(w, h, raw)
            .expect("buffer size matches")
            .write_to(&mut out, ImageFormat::Png)
    } else {
        ImageBuffer::<Luma<u8>, _>::from_raw(w, h, image.to_u8())
            .expect("buffer size matches")
            .write_to(&mut out, ImageFormat::Png)
    };
    res.map_err(|e| DataError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    write_bytes(path, &out.into_inner())
}

/// `HMDL`, u16 version, then one block per parameter: u16 name length,
/// name, u8 rank, u32 extents, f64 values. Blocks run to end of file.
pub fn encode_checkpoint(params: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(HMDL_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(HMDL_MAGIC)?;
    let version = u16::from_le_bytes(r.array()?);
    if version != CHECKPOINT_VERSION {
        return Err(DataError::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let mut params = BTreeMap::new();
    while !r.done() {
        let n = u16::from_le_bytes(r.array()?) as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| DataError::Malformed("parameter name is not UTF-8".into()))?;
        let rank = r.array::<1>()?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(r.array()?) as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(f64::from_le_bytes(r.array()?));
        }
        let t = Tensor::new(shape, values).map_err(|e| DataError::Malformed(format!("{name}: {e}")))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(DataError::Malformed(format!("duplicate parameter {name}")));
        }
    }
    Ok(params)
}

fn arch_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the checkpoint at `path` and the architecture next to it with a
/// `.json` extension.
pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    write_bytes(path, &encode_checkpoint(&model.params))?;
    write_json(&arch_path(path), &model.arch)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let params = decode_checkpoint(&read_bytes(path)?)?;
    let arch: Architecture = read_json(&arch_path(path))?;
    Model::from_params(arch, params).map_err(|e| DataError::Malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmap_round_trip() {
        let m = ImportanceMap::new("x", 3, 2, vec![0.0, 0.25, 1.5, 3.0, 0.125, 7.0]).unwrap();
        let back = decode_fmap("x", &encode_fmap(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn fmap_errors() {
        let m = ImportanceMap::new("x", 2, 2, vec![1.0; 4]).unwrap();
        let mut b = encode_fmap(&m);
        assert!(matches!(
            decode_fmap("x", &b[..b.len() - 1]),
            Err(DataError::Truncated { .. })
        ));
        b[0] = b'G';
        assert!(matches!(decode_fmap("x", &b), Err(DataError::Magic { .. })));
        assert!(matches!(decode_fmap("x", b"FM"), Err(DataError::Magic { .. })));
    }

    #[test]
    fn checkpoint_round_trip_and_version() {
        let arch = Architecture::toy_convnet(1, 8, 2, 3);
        let model = Model::init(arch, 5).unwrap();
        let bytes = encode_checkpoint(&model.params);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), model.params);
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_checkpoint(&v2),
            Err(DataError::Version { found: 2, .. })
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let vals: Vec<f64> = (0..12).map(|i| (i * 997) as f64 / 65535.0).collect();
        let g = GrayImage::new(4, 3, vals.clone()).unwrap();
        let p = dir.path().join("a.png");
        write_gray_png(&p, &g, true).unwrap();
        let t = read_image(&p).unwrap();
        assert_eq!(t.shape(), &[1, 3, 4]);
        assert_eq!(t.values(), vals.as_slice());
        let q = dir.path().join("b.png");
        write_gray_png(&q, &GrayImage::new(2, 1, vec![0.0, 1.0]).unwrap(), false).unwrap();
        let h = read_heatmap(&q).unwrap();
        assert_eq!(h.values(), &[0.0, 1.0]);
        assert_eq!(h.image_id, "b");
    }
}
