//! Little-endian checkpoint container.
//!
//! ```text
//! header   "AQMC" | version u32 | section count u32
//! section  tag [u8; 4] | payload length u64 | payload | crc32(payload) u32
//! ```
//!
//! Sections, in order:
//! - `CONF`: stack configuration as UTF-8 TOML.
//! - `PARM`: every encoder then decoder parameter of every level, f32, in layer order.
//! - `CBKS`: per codebook a flag byte (bit 0 frozen, bit 1 initialized) then `K * D` f32 rows.
//! - `MEMO`: capacity u64 | policy u8 | seen u64 | entry count u64, then per entry
//!   level u8 | label u16 (`0xFFFF` = none) | timestamp u32 | payload bytes.
//!
//! Entry payload sizes follow from the level, so each entry occupies exactly its
//! accounted byte size and the file length is `model_bytes + sum of entry sizes`.

use std::path::Path;

use crate::aqm::{AqmStack, StackConfig};
use crate::codes::{CompressedSample, IndexGrid, Payload};
use crate::error::{Error, Result};
use crate::memory::{entry_bytes, MemoryBuffer, Policy, NO_LABEL};

pub const MAGIC: &[u8; 4] = b"AQMC";
pub const VERSION: u32 = 1;
const HEADER_BYTES: usize = 12;
const SECTION_OVERHEAD: usize = 4 + 8 + 4;
const MEMO_HEADER_BYTES: usize = 8 + 1 + 8 + 8;
const TAGS: [&[u8; 4]; 4] = [b"CONF", b"PARM", b"CBKS", b"MEMO"];

/// The parallel flag is an execution choice that never changes results, so it is
/// not persisted and does not count towards the model size.
fn config_text(config: &StackConfig) -> Result<String> {
    let config = StackConfig { parallel: false, ..config.clone() };
    toml::to_string(&config).map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))
}

/// Serialized model size: everything in the container except entry records.
pub fn model_bytes(stack: &AqmStack) -> usize {
    // Validated configs always serialize.
    let conf = config_text(stack.config()).expect("stack config serializes").len();
    let codebooks: usize = stack.modules().iter().map(|m| m.codebooks().len()).sum();
    HEADER_BYTES
        + TAGS.len() * SECTION_OVERHEAD
        + conf
        + 4 * stack.param_count()
        + codebooks
        + 4 * stack.codebook_elements()
        + MEMO_HEADER_BYTES
}

fn push_f32s<'a>(out: &mut Vec<u8>, values: impl Iterator<Item = &'a f64>) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
}

pub fn to_bytes(stack: &AqmStack, memory: &MemoryBuffer) -> Result<Vec<u8>> {
    let mut params = Vec::with_capacity(4 * stack.param_count());
    let mut books = Vec::new();
    for m in stack.modules() {
        for net in [m.encoder(), m.decoder()] {
            for t in net.params().values() {
                push_f32s(&mut params, t.data().iter());
            }
        }
        for cb in m.codebooks() {
            books.push(cb.is_frozen() as u8 | (cb.is_initialized() as u8) << 1);
            push_f32s(&mut books, cb.embeddings().iter());
        }
    }
    let mut memo = Vec::with_capacity(MEMO_HEADER_BYTES + memory.used());
    memo.extend_from_slice(&(memory.capacity() as u64).to_le_bytes());
    memo.push(match memory.policy() {
        Policy::Reservoir => 0,
        Policy::Kde => 1,
    });
    memo.extend_from_slice(&memory.seen().to_le_bytes());
    memo.extend_from_slice(&(memory.len() as u64).to_le_bytes());
    for e in memory.entries() {
        memo.push(e.sample.level);
        memo.extend_from_slice(&e.label.unwrap_or(NO_LABEL).to_le_bytes());
        memo.extend_from_slice(&e.timestamp.to_le_bytes());
        memo.extend_from_slice(e.sample.payload_data());
    }

    let conf = config_text(stack.config())?;
    let mut out = Vec::with_capacity(model_bytes(stack) + memory.used());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(TAGS.len() as u32).to_le_bytes());
    section(&mut out, TAGS[0], conf.as_bytes());
    section(&mut out, TAGS[1], &params);
    section(&mut out, TAGS[2], &books);
    section(&mut out, TAGS[3], &memo);
    Ok(out)
}

pub fn save(stack: &AqmStack, memory: &MemoryBuffer, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(stack, memory)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(AqmStack, MemoryBuffer)> {
    from_bytes(&std::fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "{}: need {n} bytes at offset {}, only {} left",
                self.what,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "{}: {} trailing bytes at offset {}",
                self.what,
                self.buf.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

/// Parses a container; every section checksum is verified before any content is used.
pub fn from_bytes(bytes: &[u8]) -> Result<(AqmStack, MemoryBuffer)> {
    let mut r = Reader::new(bytes, "header");
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, expected {VERSION}")));
    }
    let count = r.u32()? as usize;
    if count != TAGS.len() {
        return Err(Error::Checkpoint(format!("{count} sections, expected {}", TAGS.len())));
    }
    let mut payloads = Vec::with_capacity(count);
    for tag in TAGS {
        r.what = "section table";
        let got = r.take(4)?;
        if got != tag {
            return Err(Error::Checkpoint(format!(
                "expected section {} at offset {}, found {:?}",
                String::from_utf8_lossy(tag),
                r.pos - 4,
                String::from_utf8_lossy(got)
            )));
        }
        let len = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("section too large".into()))?;
        let payload = r.take(len)?;
        let crc = r.u32()?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::Checksum { section: String::from_utf8_lossy(tag).into_owned() });
        }
        payloads.push(payload);
    }
    r.finish()?;

    let conf = std::str::from_utf8(payloads[0]).map_err(|e| Error::Checkpoint(format!("CONF: {e}")))?;
    let config: StackConfig = toml::from_str(conf).map_err(|e| Error::Checkpoint(format!("CONF: {e}")))?;
    let mut stack = AqmStack::new(config)?;

    let mut p = Reader::new(payloads[1], "PARM");
    let mut c = Reader::new(payloads[2], "CBKS");
    for m in stack.modules_mut() {
        for dec in [false, true] {
            let net = if dec { m.decoder_mut() } else { m.encoder_mut() };
            for t in net.params_mut().values_mut() {
                let vals = p.f32s(t.numel())?;
                t.data_mut().copy_from_slice(&vals);
            }
        }
        for cb in m.codebooks_mut() {
            let flags = c.u8()?;
            if flags & !0b11 != 0 {
                return Err(Error::Checkpoint(format!("CBKS: unknown flag bits {flags:#04x}")));
            }
            let rows = c.f32s(cb.size() * cb.dim())?;
            cb.set_embeddings(rows);
            if flags & 0b10 != 0 {
                cb.mark_initialized();
            }
            cb.reset_ema_state();
            cb.set_frozen(flags & 0b01 != 0);
        }
    }
    p.finish()?;
    c.finish()?;

    let mut mr = Reader::new(payloads[3], "MEMO");
    let capacity = mr.u64()? as usize;
    let policy = match mr.u8()? {
        0 => Policy::Reservoir,
        1 => Policy::Kde,
        other => return Err(Error::Checkpoint(format!("MEMO: unknown policy {other}"))),
    };
    let seen = mr.u64()?;
    let n = mr.u64()?;
    let mut memory = MemoryBuffer::new(capacity, stack.model_bytes(), stack.payload_bytes(0), policy)?;
    for _ in 0..n {
        let level = mr.u8()?;
        let label = mr.u16()?;
        let timestamp = mr.u32()?;
        let lv = level as usize;
        if lv > stack.num_levels() {
            return Err(Error::Checkpoint(format!("MEMO: entry level {level} beyond {}", stack.num_levels())));
        }
        let data = mr.take(stack.payload_bytes(lv))?.to_vec();
        let payload = if lv == 0 {
            Payload::Raw(data)
        } else {
            let m = stack.level(lv);
            Payload::Indices(IndexGrid::from_bytes(data, m.index_bits(), m.indices_per_sample())?)
        };
        let sample = CompressedSample { level, payload };
        debug_assert_eq!(entry_bytes(&sample), 7 + stack.payload_bytes(lv));
        // Indices must be in range for the level's codebooks.
        if lv > 0 {
            let idx = stack.sample_indices(&sample)?;
            let k = stack.level(lv).config().codebook_size as u32;
            if let Some(bad) = idx.iter().find(|&&i| i >= k) {
                return Err(Error::Checkpoint(format!("MEMO: index {bad} outside codebook of {k}")));
            }
        }
        memory.insert(timestamp, (label != NO_LABEL).then_some(label), sample)?;
    }
    mr.finish()?;
    memory.set_seen(seen);
    Ok((stack, memory))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aqm::{InputShape, LevelConfig};

    fn stack() -> AqmStack {
        let cfg = StackConfig::new(InputShape::new(1, 8, 8), vec![LevelConfig::new(4, 8, 1)]);
        AqmStack::new(cfg).unwrap()
    }

    #[test]
    fn empty_file_size_is_model_bytes() {
        let s = stack();
        let m = MemoryBuffer::new(100_000, s.model_bytes(), 64, Policy::Reservoir).unwrap();
        assert_eq!(to_bytes(&s, &m).unwrap().len(), s.model_bytes());
    }

    #[test]
    fn model_bytes_counts_floats() {
        let s = stack();
        let conf = config_text(s.config()).unwrap().len();
        let fixed = HEADER_BYTES + 4 * SECTION_OVERHEAD + MEMO_HEADER_BYTES + conf + 1;
        assert_eq!(s.model_bytes() - fixed, 4 * (s.param_count() + 8 * 4));
    }

    #[test]
    fn version_mismatch_rejected() {
        let s = stack();
        let m = MemoryBuffer::new(100_000, s.model_bytes(), 64, Policy::Reservoir).unwrap();
        let mut b = to_bytes(&s, &m).unwrap();
        b[4] = 9;
        let err = from_bytes(&b).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn truncation_rejected() {
        let s = stack();
        let m = MemoryBuffer::new(100_000, s.model_bytes(), 64, Policy::Reservoir).unwrap();
        let b = to_bytes(&s, &m).unwrap();
        assert!(from_bytes(&b[..b.len() - 3]).is_err());
    }
}
