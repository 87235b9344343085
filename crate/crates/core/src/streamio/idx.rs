//! IDX binary arrays of unsigned bytes.
//!
//! ```text
//! 0x00 0x00 | type 0x08 | ndim u8 | ndim x u32 big-endian dims | prod(dims) bytes
//! ```
//!
//! Image files have dims `(N, H, W)` or `(N, C, H, W)`; label files have `(N)`.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const UBYTE: u8 = 0x08;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let err = |offset: usize, message: String| Error::Idx { offset, message };
    if bytes.len() < 4 {
        return Err(err(0, format!("header needs 4 bytes, file has {}", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(0, format!("bad magic {:02x} {:02x}, expected 00 00", bytes[0], bytes[1])));
    }
    if bytes[2] != UBYTE {
        return Err(err(2, format!("element type {:#04x} unsupported, expected 0x08", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(err(3, "zero dimensions".into()));
    }
    let body = 4 + 4 * ndim;
    if bytes.len() < body {
        return Err(err(4, format!("{ndim} dims need {body} header bytes, file has {}", bytes.len())));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let want = dims.iter().product::<usize>();
    let got = bytes.len() - body;
    if got != want {
        let kind = if got < want { "truncated body" } else { "trailing bytes after body" };
        return Err(err(body, format!("{kind}: expected {want} bytes, found {got}")));
    }
    Ok(IdxArray { dims, data: bytes[body..].to_vec() })
}

pub fn encode_idx(array: &IdxArray) -> Result<Vec<u8>> {
    if array.dims.is_empty() || array.dims.len() > u8::MAX as usize {
        return Err(Error::Invalid(format!("IDX needs 1..=255 dims, got {}", array.dims.len())));
    }
    if array.dims.iter().product::<usize>() != array.data.len() {
        return Err(Error::Invalid(format!("dims {:?} do not match {} bytes", array.dims, array.data.len())));
    }
    let mut out = vec![0, 0, UBYTE, array.dims.len() as u8];
    for &d in &array.dims {
        let d = u32::try_from(d).map_err(|_| Error::Invalid(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    Ok(out)
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&std::fs::read(path)?)
}

pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    std::fs::write(path, encode_idx(array)?)?;
    Ok(())
}

/// Images in `[0, 1]` with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<u16>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Decodes an image array and a label array, checking dims against `expect` when given.
pub fn dataset_from_arrays(images: &IdxArray, labels: &IdxArray, expect: Option<[usize; 3]>) -> Result<Dataset> {
    let chw = match images.dims.as_slice() {
        &[_, h, w] => [1, h, w],
        &[_, c, h, w] => [c, h, w],
        d => return Err(Error::Config(format!("image array must have 3 or 4 dims, got {d:?}"))),
    };
    if let Some(e) = expect {
        if e != chw {
            return Err(Error::Config(format!("images are {chw:?}, config expects {e:?}")));
        }
    }
    if labels.dims.len() != 1 || labels.dims[0] != images.dims[0] {
        return Err(Error::Config(format!(
            "label dims {:?} do not match {} images",
            labels.dims, images.dims[0]
        )));
    }
    let per = chw.iter().product::<usize>();
    let images_t = if per == 0 {
        Vec::new()
    } else {
        images
            .data
            .chunks_exact(per)
            .map(|c| crate::codes::from_bytes(&chw, c))
            .collect::<Result<_>>()?
    };
    Ok(Dataset { images: images_t, labels: labels.data.iter().map(|&b| b as u16).collect() })
}

pub fn read_idx_dataset(images: &Path, labels: &Path, expect: Option<[usize; 3]>) -> Result<Dataset> {
    dataset_from_arrays(&read_idx(images)?, &read_idx(labels)?, expect)
}
