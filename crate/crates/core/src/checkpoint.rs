//! Binary tensor snapshots.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "MSUN"  version
//! scale_count  scale[scale_count]
//! meta_len  meta (UTF-8, key=value lines)
//! tensor_count
//! repeated: name_len  name (UTF-8)  rank  dim[rank]  f32 payload (LE)
//! ```
//!
//! The scale table and metadata form the header; plain tensor dumps write
//! an empty scale table and empty metadata.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSUN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Snapshot {
    pub scales: Vec<u32>,
    pub meta: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn put(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format {
        what: "snapshot",
        msg: format!("{what} {v} does not fit in u32"),
    })
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Truncated(format!("snapshot {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.bytes(n, what)?;
        String::from_utf8(b).map_err(|_| Error::Format {
            what: "snapshot",
            msg: format!("{what} is not valid UTF-8"),
        })
    }
}

impl Snapshot {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let io = |e| Error::io("<snapshot>", e);
        w.write_all(MAGIC).map_err(io)?;
        put(w, VERSION).map_err(io)?;
        put(w, to_u32(self.scales.len(), "scale count")?).map_err(io)?;
        for &s in &self.scales {
            put(w, s).map_err(io)?;
        }
        put(w, to_u32(self.meta.len(), "metadata length")?).map_err(io)?;
        w.write_all(self.meta.as_bytes()).map_err(io)?;
        put(w, to_u32(self.tensors.len(), "tensor count")?).map_err(io)?;
        for (name, t) in &self.tensors {
            put(w, to_u32(name.len(), "name length")?).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            put(w, to_u32(t.rank(), "rank")?).map_err(io)?;
            for &d in t.shape() {
                put(w, to_u32(d, "dimension")?).map_err(io)?;
            }
            let mut payload = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&payload).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut rd = Reader { inner: r };
        let magic = rd.bytes(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                what: "snapshot",
                found: u32::from_be_bytes([magic[0], magic[1], magic[2], magic[3]]),
                expected: u32::from_be_bytes(*MAGIC),
            });
        }
        let version = rd.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                what: "snapshot",
                msg: format!("unsupported version {version}"),
            });
        }
        let ns = rd.u32("scale count")? as usize;
        let scales = (0..ns).map(|_| rd.u32("scale")).collect::<Result<Vec<_>>>()?;
        let meta = rd.string("metadata")?;
        let count = rd.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = rd.string("tensor name")?;
            let rank = rd.u32("rank")? as usize;
            let dims = (0..rank)
                .map(|_| rd.u32("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = rd.bytes(n * 4, &format!("payload of `{name}`"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        Ok(Snapshot {
            scales,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}
