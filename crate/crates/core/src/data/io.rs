//! Dataset file format.
//!
//! Layout (all integers little endian):
//!   magic   4 bytes  "MGD1"
//!   version u32      currently 1
//!   n, h, w, c       u64 each; c is always 3
//!   label_offset     u64, absolute offset of the label table
//!   pixels  n*c*h*w bytes, one per channel value, value = byte / 255
//!   labels  n bytes
//!   splits  n bytes  (0 train, 1 val, 2 test)
//!   provenance n records of 17 bytes:
//!     kind u8 (0 bona fide, 1 morph), two u32, one f64 (bit pattern).
//!     Bona fide: identity, 0, 0.0. Morph: src_a, src_b, alpha.
//!
//! Pixels are stored at 8-bit depth; generation already quantizes to that
//! grid, so save followed by load reproduces the dataset bit for bit.

use super::{Dataset, Provenance, Split};
use crate::error::{CoreError, Result};
use morphguard_tensor::checkpoint::Reader;
use std::path::Path;

const MAGIC: &[u8; 4] = b"MGD1";
const VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 8 * 5;

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let n = ds.n() as u64;
    let (h, w) = (ds.height() as u64, ds.width() as u64);
    let pixel_bytes = n * 3 * h * w;
    let mut buf = Vec::with_capacity((HEADER_LEN + pixel_bytes + n * (2 + 17)) as usize);

    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [n, h, w, 3, HEADER_LEN + pixel_bytes] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..ds.n() {
        for &v in ds.image(i) {
            buf.push((v * 255.0).round() as u8);
        }
    }
    for i in 0..ds.n() {
        buf.push(ds.label(i));
    }
    for i in 0..ds.n() {
        buf.push(ds.split(i) as u8);
    }
    for i in 0..ds.n() {
        match ds.provenance(i) {
            Provenance::BonaFide { identity } => {
                buf.push(0);
                buf.extend_from_slice(&identity.to_le_bytes());
                buf.extend_from_slice(&0u32.to_le_bytes());
                buf.extend_from_slice(&0f64.to_bits().to_le_bytes());
            }
            Provenance::Morph { src_a, src_b, alpha } => {
                buf.push(1);
                buf.extend_from_slice(&src_a.to_le_bytes());
                buf.extend_from_slice(&src_b.to_le_bytes());
                buf.extend_from_slice(&alpha.to_bits().to_le_bytes());
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes);
    r.expect_magic(MAGIC).map_err(CoreError::from)?;
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(CoreError::Format(format!(
            "dataset version {version}, this build reads {VERSION}"
        )));
    }
    let n = r.u64("example count")? as usize;
    let h = r.u64("height")? as usize;
    let w = r.u64("width")? as usize;
    let c = r.u64("channel count")? as usize;
    if c != 3 {
        return Err(CoreError::Format(format!("expected 3 channels, found {c}")));
    }
    let pixel_bytes = n
        .checked_mul(3)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .filter(|_| n > 0 && h > 0 && w > 0)
        .ok_or_else(|| {
            CoreError::Format(format!("implausible dimensions n={n} h={h} w={w}"))
        })?;
    let label_offset = r.u64("label table offset")?;
    if label_offset != HEADER_LEN + pixel_bytes as u64 {
        return Err(CoreError::Format(format!(
            "label table offset {label_offset} does not follow the pixel block"
        )));
    }

    let mut images = Vec::with_capacity(n.min(bytes.len()));
    for i in 0..n {
        let raw = r.take(3 * h * w, "pixel block")?;
        let img: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();
        debug_assert_eq!(img.len(), 3 * h * w, "image {i}");
        images.push(img);
    }
    let labels: Vec<u8> = r.take(n, "label table")?.to_vec();
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(CoreError::Format(format!("label {bad} outside {{0, 1}}")));
    }
    let splits = r
        .take(n, "split table")?
        .iter()
        .map(|&b| Split::from_u8(b))
        .collect::<Result<Vec<_>>>()?;
    let mut provenance = Vec::with_capacity(n);
    for _ in 0..n {
        let rec = r.take(17, "provenance record")?;
        let a = u32::from_le_bytes(rec[1..5].try_into().unwrap());
        let b = u32::from_le_bytes(rec[5..9].try_into().unwrap());
        let f = f64::from_bits(u64::from_le_bytes(rec[9..17].try_into().unwrap()));
        provenance.push(match rec[0] {
            0 => Provenance::BonaFide { identity: a },
            1 => Provenance::Morph { src_a: a, src_b: b, alpha: f },
            k => return Err(CoreError::Format(format!("unknown provenance kind {k}"))),
        });
    }
    if !r.at_end() {
        return Err(CoreError::Format(format!(
            "{} trailing bytes after the provenance table",
            bytes.len() as u64 - r.offset()
        )));
    }
    Dataset::from_parts(h, w, images, labels, splits, provenance)
}
