use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use super::{byte_to_pixel, pixel_to_byte, Dataset};
use crate::error::{Error, Result};
use crate::model::{Image, Shape};

const IMAGES_RANK3: u32 = 0x0000_0803;
const IMAGES_RANK4: u32 = 0x0000_0804;
const LABELS: u32 = 0x0000_0801;

fn read_all(mut source: impl Read) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    source.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        return Ok(out);
    }
    Ok(raw)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Idx(format!("{} file truncated in header", self.what)))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().unwrap()))
    }

    fn payload(&self, len: usize) -> Result<&'a [u8]> {
        let rest = &self.bytes[self.pos..];
        if rest.len() < len {
            return Err(Error::Idx(format!(
                "{} payload truncated: expected {len} bytes, found {}",
                self.what,
                rest.len()
            )));
        }
        if rest.len() > len {
            return Err(Error::Idx(format!(
                "{} payload has {} trailing bytes",
                self.what,
                rest.len() - len
            )));
        }
        Ok(rest)
    }
}

fn parse_images(bytes: &[u8]) -> Result<(Shape, Vec<Image>)> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        what: "images",
    };
    let magic = cur.u32()?;
    let (count, shape) = match magic {
        IMAGES_RANK3 => {
            let n = cur.u32()? as usize;
            let h = cur.u32()? as usize;
            let w = cur.u32()? as usize;
            (n, Shape::new(h, w, 1))
        }
        IMAGES_RANK4 => {
            let n = cur.u32()? as usize;
            let h = cur.u32()? as usize;
            let w = cur.u32()? as usize;
            let c = cur.u32()? as usize;
            (n, Shape::new(h, w, c))
        }
        other => {
            return Err(Error::Idx(format!(
                "wrong images magic 0x{other:08x} (expected 0x{IMAGES_RANK3:08x} or 0x{IMAGES_RANK4:08x})"
            )))
        }
    };
    let data = cur.payload(count * shape.len())?;
    let images = if shape.is_empty() {
        (0..count).map(|_| Image::zeros(shape)).collect()
    } else {
        data.chunks_exact(shape.len())
            .map(|chunk| Image::new(shape, chunk.iter().map(|&b| byte_to_pixel(b)).collect()))
            .collect::<Result<Vec<_>>>()?
    };
    Ok((shape, images))
}

fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        what: "labels",
    };
    let magic = cur.u32()?;
    if magic != LABELS {
        return Err(Error::Idx(format!(
            "wrong labels magic 0x{magic:08x} (expected 0x{LABELS:08x})"
        )));
    }
    let n = cur.u32()? as usize;
    Ok(cur.payload(n)?.iter().map(|&b| b as usize).collect())
}

/// Reads an IDX image file and its label file.
pub fn load_idx(images: impl Read, labels: impl Read) -> Result<Dataset> {
    let (shape, images) = parse_images(&read_all(images)?)?;
    let labels = parse_labels(&read_all(labels)?)?;
    if images.len() != labels.len() {
        return Err(Error::Idx(format!(
            "count mismatch: {} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    Dataset::new(shape, images, labels)
}

/// Reads an IDX image file on its own.
pub fn load_idx_images(images: impl Read) -> Result<(Shape, Vec<Image>)> {
    parse_images(&read_all(images)?)
}

pub fn load_idx_files(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    load_idx(
        std::fs::File::open(images.as_ref())?,
        std::fs::File::open(labels.as_ref())?,
    )
}

/// Writes the image half of a dataset: rank-3 magic for one channel,
/// rank-4 otherwise.
pub fn write_idx_images(out: &mut impl Write, shape: Shape, images: &[Image]) -> Result<()> {
    let n = images.len() as u32;
    if shape.channels == 1 {
        for v in [IMAGES_RANK3, n, shape.height as u32, shape.width as u32] {
            out.write_all(&v.to_be_bytes())?;
        }
    } else {
        for v in [
            IMAGES_RANK4,
            n,
            shape.height as u32,
            shape.width as u32,
            shape.channels as u32,
        ] {
            out.write_all(&v.to_be_bytes())?;
        }
    }
    for img in images {
        let bytes: Vec<u8> = img.pixels().iter().map(|&p| pixel_to_byte(p)).collect();
        out.write_all(&bytes)?;
    }
    Ok(())
}

pub fn write_idx_labels(out: &mut impl Write, labels: &[usize]) -> Result<()> {
    out.write_all(&LABELS.to_be_bytes())?;
    out.write_all(&(labels.len() as u32).to_be_bytes())?;
    let bytes = labels
        .iter()
        .map(|&l| {
            u8::try_from(l).map_err(|_| Error::Idx(format!("label {l} does not fit a byte")))
        })
        .collect::<Result<Vec<u8>>>()?;
    out.write_all(&bytes)?;
    Ok(())
}

/// Serializes a dataset back to `(images, labels)` IDX byte buffers.
pub fn save_idx(data: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut images = Vec::new();
    write_idx_images(&mut images, data.shape(), data.images())?;
    let mut labels = Vec::new();
    write_idx_labels(&mut labels, data.labels())?;
    Ok((images, labels))
}
