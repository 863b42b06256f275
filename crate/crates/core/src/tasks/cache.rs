//! Episode cache file, little-endian throughout.
//!
//! ```text
//! header:  b"CXEP", version u32, n_way, k_shot, n_query, channels, height, width, count (u32 each)
//! episode: classes[n_way] u32
//!          support: (class u32, index u32)[n_way·k_shot], pixels f64[n_way·k_shot·c·h·w]
//!          query:   (class u32, index u32)[n_way·n_query], pixels f64[n_way·n_query·c·h·w]
//! ```
//! Labels are implied by position: sample `i` of a set has label `i / shots`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Array;

use super::{Episode, LabeledSet, SampleId};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CXEP";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheHeader {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub count: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::EpisodeCache(msg.into())
}

fn u32_of(v: usize) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| bad(format!("{v} does not fit in u32")))
}

fn header_of(episodes: &[Episode]) -> Result<CacheHeader> {
    let first = episodes.first().ok_or_else(|| bad("no episodes to write"))?;
    let n_way = first.n_way();
    let s = first.support.images.shape();
    let h = CacheHeader {
        n_way,
        k_shot: first.support.len() / n_way,
        n_query: first.query.len() / n_way,
        channels: s[1],
        height: s[2],
        width: s[3],
        count: episodes.len(),
    };
    for e in episodes {
        let ok = e.n_way() == n_way
            && e.support.len() == n_way * h.k_shot
            && e.query.len() == n_way * h.n_query
            && e.support.images.shape()[1..] == s[1..]
            && e.query.images.shape()[1..] == s[1..];
        if !ok {
            return Err(bad("episodes differ in shape"));
        }
    }
    Ok(h)
}

pub fn write_episode_cache(path: &Path, episodes: &[Episode]) -> Result<()> {
    let h = header_of(episodes)?;
    let file = fs::File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [h.n_way, h.k_shot, h.n_query, h.channels, h.height, h.width, h.count] {
        buf.extend_from_slice(&u32_of(v)?);
    }
    for e in episodes {
        for &c in &e.classes {
            buf.extend_from_slice(&u32_of(c)?);
        }
        for set in [&e.support, &e.query] {
            for id in &set.ids {
                buf.extend_from_slice(&u32_of(id.class)?);
                buf.extend_from_slice(&u32_of(id.index)?);
            }
            for &p in set.images.data() {
                buf.extend_from_slice(&p.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(Error::io(path))?;
        buf.clear();
    }
    w.write_all(&buf).map_err(Error::io(path))?;
    w.flush().map_err(Error::io(path))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|_| bad("truncated file"))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }

    fn set(&mut self, n: usize, shots: usize, h: &CacheHeader) -> Result<LabeledSet> {
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(SampleId {
                class: self.u32()?,
                index: self.u32()?,
            });
        }
        let px = h.channels * h.height * h.width;
        let images = Array::new(vec![n, h.channels, h.height, h.width], self.f64s(n * px)?)?;
        Ok(LabeledSet {
            images,
            labels: (0..n).map(|i| i / shots).collect(),
            ids,
        })
    }
}

pub fn read_episode_cache(path: &Path) -> Result<(CacheHeader, Vec<Episode>)> {
    let file = fs::File::open(path).map_err(Error::io(path))?;
    let mut r = Reader {
        inner: BufReader::new(file),
    };
    if &r.bytes::<4>()? != MAGIC {
        return Err(bad("not an episode cache (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
    }
    let h = CacheHeader {
        n_way: r.u32()?,
        k_shot: r.u32()?,
        n_query: r.u32()?,
        channels: r.u32()?,
        height: r.u32()?,
        width: r.u32()?,
        count: r.u32()?,
    };
    if h.n_way == 0 || h.k_shot == 0 || h.n_query == 0 {
        return Err(bad("header has zero-sized sets"));
    }
    let mut episodes = Vec::with_capacity(h.count);
    for _ in 0..h.count {
        let classes = (0..h.n_way).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let support = r.set(h.n_way * h.k_shot, h.k_shot, &h)?;
        let query = r.set(h.n_way * h.n_query, h.n_query, &h)?;
        episodes.push(Episode { support, query, classes });
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest).map_err(Error::io(path))? != 0 {
        return Err(bad("trailing bytes after last episode"));
    }
    Ok((h, episodes))
}
