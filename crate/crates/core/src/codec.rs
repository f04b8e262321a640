//! Binary container shared by model and dataset files.
//!
//! ```text
//! magic[4] | version: u32 | body_len: u64 | body | crc32: u32
//! body = header_len: u32 | header (JSON) | count: u32 | record*
//! record = name_len: u32 | name (UTF-8) | rank: u32 | extent: u64 * rank | f64 * n
//! ```
//!
//! Integers and floats are little-endian. The CRC covers every byte before it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) struct Decoded {
    pub header: Vec<u8>,
    pub tensors: BTreeMap<String, Tensor>,
}

pub(crate) fn encode<'a>(
    magic: [u8; 4],
    version: u32,
    header: &[u8],
    tensors: impl Iterator<Item = (&'a String, &'a Tensor)>,
) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(&(header.len() as u32).to_le_bytes());
    body.extend_from_slice(header);
    let tensors: Vec<_> = tensors.collect();
    body.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(body.len() + 20);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        if end > self.buf.len() {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub(crate) fn decode(bytes: &[u8], magic: [u8; 4], version: u32) -> Result<Decoded> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let found: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    let v = r.u32("version")?;
    if v != version {
        return Err(Error::Version { found: v, expected: version });
    }
    let body_len = r.u64("body length")? as usize;
    let end = 16usize.checked_add(body_len).ok_or(Error::Truncated("body"))?;
    if bytes.len() < end + 4 {
        return Err(Error::Truncated("body"));
    }
    if bytes.len() > end + 4 {
        return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - end - 4)));
    }
    let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader {
        buf: &bytes[..end],
        pos: 16,
    };
    let hlen = r.u32("header length")? as usize;
    let header = r.take(hlen, "header")?.to_vec();
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Malformed(format!("tensor {name} is too large")))?;
        let raw = r.take(n.checked_mul(8).ok_or(Error::Truncated("tensor data"))?, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Malformed(e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Malformed(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != end {
        return Err(Error::Malformed("body length disagrees with its contents".into()));
    }
    Ok(Decoded { header, tensors })
}

/// Writes through a temporary sibling file and renames it into place, so an
/// interrupted write never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
