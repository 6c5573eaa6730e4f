//! Binary serialization for feature bundles and sidecar artifacts.
//!
//! All files share one convention: a 4-byte magic, a little-endian `u16`
//! format version, fixed-width little-endian integer headers, `f32`
//! little-endian value blobs in row-major order, and boolean masks packed as
//! bit rows (LSB-first within a byte, each row padded to a whole byte).
//! Values are `f64` in memory and quantized to `f32` on write.
//!
//! Bundle layout (`MMNR`):
//!
//! ```text
//! magic "MMNR" | version u16 | H u32 | W u32 | D_rgb u32 | D_pc u32
//! | flags u8 | id_len u16 | sample id bytes
//! | rgb patch blob H*W*D_rgb   | rgb class token D_rgb   (flag bit 0)
//! | pc  patch blob H*W*D_pc    | pc  class token D_pc    (flag bit 1)
//! | cloud positions H*W*3
//! | rgb validity bits | pc validity bits | cloud validity bits
//! | ground-truth mask bits                                (flag bit 2)
//! ```
//!
//! Flag bit 3 marks the sample label as anomalous. Readers validate the
//! declared payload size against the actual file length before allocating,
//! so corrupted headers surface as typed errors rather than panics or
//! runaway allocations.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureGrid, OrganizedPointCloud};

/// Current version written for every artifact kind.
pub const FORMAT_VERSION: u16 = 1;

/// Magic for feature bundles.
pub const BUNDLE_MAGIC: [u8; 4] = *b"MMNR";
/// Magic for score-map sidecars.
pub const MAP_MAGIC: [u8; 4] = *b"MMNM";
/// Magic for named vector-set sidecars (prototypes, centers).
pub const VECTOR_MAGIC: [u8; 4] = *b"MMNV";

const FLAG_RGB_TOKEN: u8 = 1 << 0;
const FLAG_PC_TOKEN: u8 = 1 << 1;
const FLAG_GT_MASK: u8 = 1 << 2;
const FLAG_ANOMALOUS: u8 = 1 << 3;
const KNOWN_FLAGS: u8 = FLAG_RGB_TOKEN | FLAG_PC_TOKEN | FLAG_GT_MASK | FLAG_ANOMALOUS;

/// Sample-level ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
}

/// One sample's worth of aligned multimodal data: an RGB patch-feature grid,
/// a point-cloud patch-feature grid, the organized cloud itself, and
/// (optionally) a pixel ground-truth mask. All share the same `H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub sample_id: String,
    pub label: Label,
    pub rgb: FeatureGrid,
    pub pc: FeatureGrid,
    pub cloud: OrganizedPointCloud,
    /// Pixel-level defect mask (`H * W`, row-major) when the sample is
    /// annotated.
    pub gt_mask: Option<Vec<bool>>,
}

impl FeatureBundle {
    /// Validates the cross-field shape invariant.
    pub fn new(
        sample_id: String,
        label: Label,
        rgb: FeatureGrid,
        pc: FeatureGrid,
        cloud: OrganizedPointCloud,
        gt_mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        let (h, w) = (rgb.height(), rgb.width());
        for (gh, gw) in [(pc.height(), pc.width()), (cloud.height(), cloud.width())] {
            if (gh, gw) != (h, w) {
                return Err(Error::ShapeMismatch {
                    expected_h: h,
                    expected_w: w,
                    got_h: gh,
                    got_w: gw,
                });
            }
        }
        if let Some(mask) = &gt_mask {
            if mask.len() != h * w {
                return Err(Error::DimMismatch {
                    expected: h * w,
                    got: mask.len(),
                });
            }
        }
        Ok(FeatureBundle {
            sample_id,
            label,
            rgb,
            pc,
            cloud,
            gt_mask,
        })
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }
}

// ---------------------------------------------------------------------------
// low-level wire helpers
// ---------------------------------------------------------------------------

/// Append-only byte sink for the wire format.
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new(magic: [u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(&magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        ByteWriter { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Length-prefixed UTF-8 string (u16 length).
    pub fn str16(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.buf.extend_from_slice(s.as_bytes());
    }

    /// `f64` slice quantized to little-endian `f32`.
    pub fn f32_blob(&mut self, values: &[f64]) {
        self.buf.reserve(values.len() * 4);
        for v in values {
            self.buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }

    /// Bool mask as bit rows: LSB-first, each row padded to a whole byte.
    pub fn bit_rows(&mut self, mask: &[bool], width: usize) {
        for row in mask.chunks(width) {
            let mut byte = 0u8;
            for (i, bit) in row.iter().enumerate() {
                if *bit {
                    byte |= 1 << (i % 8);
                }
                if i % 8 == 7 {
                    self.buf.push(byte);
                    byte = 0;
                }
            }
            if width % 8 != 0 {
                self.buf.push(byte);
            }
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

/// Bounded cursor over a byte slice; every read is length-checked and
/// reports the section that came up short.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], path: impl Into<PathBuf>) -> Self {
        ByteReader {
            bytes,
            pos: 0,
            path: path.into(),
        }
    }

    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.clone(),
                section,
                needed: n - (self.bytes.len() - self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::BadMagic {
                path: self.path.clone(),
                expected,
                found: [got[0], got[1], got[2], got[3]],
            });
        }
        Ok(())
    }

    pub fn version(&mut self) -> Result<()> {
        let v = self.u16("version")?;
        if v != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: self.path.clone(),
                found: v,
                supported: FORMAT_VERSION,
            });
        }
        Ok(())
    }

    pub fn u8(&mut self, section: &'static str) -> Result<u8> {
        Ok(self.take(1, section)?[0])
    }

    pub fn u16(&mut self, section: &'static str) -> Result<u16> {
        let b = self.take(2, section)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, section: &'static str) -> Result<u32> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn str16(&mut self, section: &'static str) -> Result<String> {
        let len = self.u16(section)? as usize;
        let bytes = self.take(len, section)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::MalformedHeader {
            path: self.path.clone(),
            reason: format!("{section} is not valid UTF-8"),
        })
    }

    pub fn f32_blob(&mut self, count: usize, section: &'static str) -> Result<Vec<f64>> {
        let bytes = self.take(count * 4, section)?;
        let mut out = Vec::with_capacity(count);
        for chunk in bytes.chunks_exact(4) {
            out.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
        }
        Ok(out)
    }

    pub fn bit_rows(
        &mut self,
        height: usize,
        width: usize,
        section: &'static str,
    ) -> Result<Vec<bool>> {
        let row_bytes = width.div_ceil(8);
        let mut out = Vec::with_capacity(height * width);
        for _ in 0..height {
            let row = self.take(row_bytes, section)?;
            for v in 0..width {
                out.push(row[v / 8] & (1 << (v % 8)) != 0);
            }
        }
        Ok(out)
    }

    /// Remaining unread byte count.
    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::MalformedHeader {
                path: self.path.clone(),
                reason: format!("{} trailing bytes after payload", self.remaining()),
            });
        }
        Ok(())
    }

    pub fn malformed(&self, reason: impl Into<String>) -> Error {
        Error::MalformedHeader {
            path: self.path.clone(),
            reason: reason.into(),
        }
    }
}

// ---------------------------------------------------------------------------
// bundle encode / decode
// ---------------------------------------------------------------------------

/// Serializes a bundle to its wire representation.
pub fn bundle_to_bytes(bundle: &FeatureBundle) -> Vec<u8> {
    let (h, w) = (bundle.height(), bundle.width());
    let mut flags = 0u8;
    if bundle.rgb.class_token().is_some() {
        flags |= FLAG_RGB_TOKEN;
    }
    if bundle.pc.class_token().is_some() {
        flags |= FLAG_PC_TOKEN;
    }
    if bundle.gt_mask.is_some() {
        flags |= FLAG_GT_MASK;
    }
    if bundle.label == Label::Anomalous {
        flags |= FLAG_ANOMALOUS;
    }

    let mut wtr = ByteWriter::new(BUNDLE_MAGIC);
    wtr.u32(h as u32);
    wtr.u32(w as u32);
    wtr.u32(bundle.rgb.dim() as u32);
    wtr.u32(bundle.pc.dim() as u32);
    wtr.u8(flags);
    wtr.str16(&bundle.sample_id);

    wtr.f32_blob(bundle.rgb.data());
    if let Some(t) = bundle.rgb.class_token() {
        wtr.f32_blob(t);
    }
    wtr.f32_blob(bundle.pc.data());
    if let Some(t) = bundle.pc.class_token() {
        wtr.f32_blob(t);
    }
    wtr.f32_blob(bundle.cloud.positions());

    wtr.bit_rows(bundle.rgb.validity(), w);
    wtr.bit_rows(bundle.pc.validity(), w);
    wtr.bit_rows(bundle.cloud.validity(), w);
    if let Some(mask) = &bundle.gt_mask {
        wtr.bit_rows(mask, w);
    }
    wtr.into_bytes()
}

/// Decodes a bundle from its wire representation. `path` labels errors.
pub fn bundle_from_bytes(bytes: &[u8], path: impl Into<PathBuf>) -> Result<FeatureBundle> {
    let mut rdr = ByteReader::new(bytes, path);
    rdr.magic(BUNDLE_MAGIC)?;
    rdr.version()?;
    let h = rdr.u32("height")? as usize;
    let w = rdr.u32("width")? as usize;
    let d_rgb = rdr.u32("rgb dim")? as usize;
    let d_pc = rdr.u32("pc dim")? as usize;
    let flags = rdr.u8("flags")?;
    if flags & !KNOWN_FLAGS != 0 {
        return Err(rdr.malformed(format!("unknown flag bits 0x{:02x}", flags & !KNOWN_FLAGS)));
    }
    if h == 0 || w == 0 || d_rgb == 0 || d_pc == 0 {
        return Err(rdr.malformed(format!(
            "degenerate shape {h}x{w} (dims rgb={d_rgb}, pc={d_pc})"
        )));
    }

    // Reject headers whose declared payload cannot fit in the file before
    // allocating anything proportional to it.
    let cells = (h as u64) * (w as u64);
    let row_bits = (w as u64).div_ceil(8) * h as u64;
    let mut expected = cells * 4 * (d_rgb as u64 + d_pc as u64 + 3) + 3 * row_bits;
    if flags & FLAG_RGB_TOKEN != 0 {
        expected += d_rgb as u64 * 4;
    }
    if flags & FLAG_PC_TOKEN != 0 {
        expected += d_pc as u64 * 4;
    }
    if flags & FLAG_GT_MASK != 0 {
        expected += row_bits;
    }
    if expected > rdr.remaining() as u64 {
        return Err(Error::Truncated {
            path: PathBuf::new(),
            section: "payload",
            needed: (expected - rdr.remaining() as u64) as usize,
        });
    }

    let sample_id = rdr.str16("sample id")?;

    let rgb_data = rdr.f32_blob(h * w * d_rgb, "rgb patch blob")?;
    let rgb_token = if flags & FLAG_RGB_TOKEN != 0 {
        Some(rdr.f32_blob(d_rgb, "rgb class token")?)
    } else {
        None
    };
    let pc_data = rdr.f32_blob(h * w * d_pc, "pc patch blob")?;
    let pc_token = if flags & FLAG_PC_TOKEN != 0 {
        Some(rdr.f32_blob(d_pc, "pc class token")?)
    } else {
        None
    };
    let positions = rdr.f32_blob(h * w * 3, "cloud positions")?;

    let rgb_valid = rdr.bit_rows(h, w, "rgb validity")?;
    let pc_valid = rdr.bit_rows(h, w, "pc validity")?;
    let cloud_valid = rdr.bit_rows(h, w, "cloud validity")?;
    let gt_mask = if flags & FLAG_GT_MASK != 0 {
        Some(rdr.bit_rows(h, w, "ground-truth mask")?)
    } else {
        None
    };
    rdr.expect_end()?;

    let rgb = FeatureGrid::from_parts(h, w, d_rgb, rgb_data, rgb_valid, rgb_token)?;
    let pc = FeatureGrid::from_parts(h, w, d_pc, pc_data, pc_valid, pc_token)?;
    let cloud = OrganizedPointCloud::from_parts(h, w, positions, cloud_valid)?;
    let label = if flags & FLAG_ANOMALOUS != 0 {
        Label::Anomalous
    } else {
        Label::Normal
    };
    FeatureBundle::new(sample_id, label, rgb, pc, cloud, gt_mask)
}

/// Writes a bundle to disk.
pub fn write_bundle(path: &Path, bundle: &FeatureBundle) -> Result<()> {
    fs::write(path, bundle_to_bytes(bundle)).map_err(|e| Error::io(path, e))
}

/// Reads a bundle from disk.
pub fn read_bundle(path: &Path) -> Result<FeatureBundle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    bundle_from_bytes(&bytes, path)
}

// ---------------------------------------------------------------------------
// score-map sidecars
// ---------------------------------------------------------------------------

/// Serializes an `H x W` score map (`MMNM`).
pub fn map_to_bytes(height: usize, width: usize, scores: &[f64]) -> Result<Vec<u8>> {
    if scores.len() != height * width {
        return Err(Error::DimMismatch {
            expected: height * width,
            got: scores.len(),
        });
    }
    let mut wtr = ByteWriter::new(MAP_MAGIC);
    wtr.u32(height as u32);
    wtr.u32(width as u32);
    wtr.f32_blob(scores);
    Ok(wtr.into_bytes())
}

/// Decodes an `MMNM` score map: `(height, width, scores)`.
pub fn map_from_bytes(bytes: &[u8], path: impl Into<PathBuf>) -> Result<(usize, usize, Vec<f64>)> {
    let mut rdr = ByteReader::new(bytes, path);
    rdr.magic(MAP_MAGIC)?;
    rdr.version()?;
    let h = rdr.u32("height")? as usize;
    let w = rdr.u32("width")? as usize;
    let cells = (h as u64) * (w as u64) * 4;
    if cells > rdr.remaining() as u64 {
        return Err(Error::Truncated {
            path: PathBuf::new(),
            section: "map payload",
            needed: (cells - rdr.remaining() as u64) as usize,
        });
    }
    let scores = rdr.f32_blob(h * w, "map payload")?;
    rdr.expect_end()?;
    Ok((h, w, scores))
}

pub fn write_map(path: &Path, height: usize, width: usize, scores: &[f64]) -> Result<()> {
    fs::write(path, map_to_bytes(height, width, scores)?).map_err(|e| Error::io(path, e))
}

pub fn read_map(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    map_from_bytes(&bytes, path)
}

// ---------------------------------------------------------------------------
// named vector-set sidecars
// ---------------------------------------------------------------------------

/// A labelled list of equal-length vectors (`MMNV`); used for text
/// prototypes and other small vector artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSet {
    pub name: String,
    pub vectors: Vec<Vec<f64>>,
}

impl VectorSet {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dim = self.vectors.first().map(|v| v.len()).unwrap_or(0);
        if self.vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::InvalidConfig(
                "vector set requires equal-length vectors".into(),
            ));
        }
        let mut wtr = ByteWriter::new(VECTOR_MAGIC);
        wtr.str16(&self.name);
        wtr.u32(self.vectors.len() as u32);
        wtr.u32(dim as u32);
        for v in &self.vectors {
            wtr.f32_blob(v);
        }
        Ok(wtr.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8], path: impl Into<PathBuf>) -> Result<Self> {
        let mut rdr = ByteReader::new(bytes, path);
        rdr.magic(VECTOR_MAGIC)?;
        rdr.version()?;
        let name = rdr.str16("name")?;
        let count = rdr.u32("count")? as usize;
        let dim = rdr.u32("dim")? as usize;
        let payload = (count as u64) * (dim as u64) * 4;
        if payload > rdr.remaining() as u64 {
            return Err(Error::Truncated {
                path: PathBuf::new(),
                section: "vector payload",
                needed: (payload - rdr.remaining() as u64) as usize,
            });
        }
        let mut vectors = Vec::with_capacity(count);
        for _ in 0..count {
            vectors.push(rdr.f32_blob(dim, "vector payload")?);
        }
        rdr.expect_end()?;
        Ok(VectorSet { name, vectors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        VectorSet::from_bytes(&bytes, path)
    }
}
