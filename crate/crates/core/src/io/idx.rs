//! IDX containers (the MNIST layout): big-endian magic and dims, u8 payload.

use std::path::Path;

use super::{read_file, write_atomic, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn parse(bytes: &[u8], magic: u32, origin: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let be = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::format(origin, "truncated header"))
    };
    let found = be(0)?;
    if found != magic {
        return Err(Error::format(
            origin,
            format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    let rank = (magic & 0xff) as usize;
    let dims: Vec<usize> = (0..rank)
        .map(|d| be(4 + 4 * d).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let header = 4 + 4 * rank;
    let count: usize = dims.iter().product();
    if bytes.len() != header + count {
        return Err(Error::format(
            origin,
            format!(
                "payload has {} bytes, dims {dims:?} require {count}",
                bytes.len() - header.min(bytes.len())
            ),
        ));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Load images as `[count, 1, rows, cols]` scaled to `[0, 1]`, with optional
/// labels.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let (dims, pixels) = parse(&read_file(images)?, IMAGE_MAGIC, images)?;
    let data = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    let images_t = Tensor::from_vec(&[dims[0], 1, dims[1], dims[2]], data);
    let labels = match labels {
        Some(path) => {
            let (ldims, values) = parse(&read_file(path)?, LABEL_MAGIC, path)?;
            if ldims[0] != dims[0] {
                return Err(Error::format(
                    path,
                    format!("{} labels for {} images", ldims[0], dims[0]),
                ));
            }
            Some(values.into_iter().map(usize::from).collect())
        }
        None => None,
    };
    Ok(Dataset {
        images: images_t,
        labels,
    })
}

/// Write single-channel images in `[0, 1]`, quantized to u8.
pub fn write_idx_images(images: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Config(format!(
            "IDX images must be [n, 1, rows, cols], got {s:?}"
        )));
    }
    let mut out = IMAGE_MAGIC.to_be_bytes().to_vec();
    for d in [s[0], s[2], s[3]] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    write_atomic(path, &out)
}

pub fn write_idx_labels(labels: &[usize], path: &Path) -> Result<()> {
    let mut out = LABEL_MAGIC.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::Config(format!("label {l} does not fit in u8")))?);
    }
    write_atomic(path, &out)
}
