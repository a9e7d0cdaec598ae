//! Snapshot stream persistence.
//!
//! Binary "LOBS1" layout (little-endian): magic `LOBS`, u32 version = 1,
//! u32 depth, u32 count, u32 tick size, then `count` records of one u32
//! time stamp followed by `depth * 4` i64 values in column order
//! `pb, vb, pa, va` per level. A CSV export with the matching header is
//! provided for external tooling.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{LobLevel, LobSnapshot};

const MAGIC: &[u8; 4] = b"LOBS";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad snapshot stream: {0}")]
    Format(String),
}

/// A loaded snapshot stream plus the tick-size metadata it was written
/// with.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnapshotStream {
    pub snapshots: Vec<LobSnapshot>,
    pub tick_size: u32,
}

pub fn write_lobs1(
    path: &Path,
    snapshots: &[LobSnapshot],
    tick_size: u32,
) -> Result<(), StreamError> {
    let depth = snapshots.first().map_or(super::SNAPSHOT_DEPTH, |s| s.depth());
    for (i, s) in snapshots.iter().enumerate() {
        if s.depth() != depth {
            return Err(StreamError::Format(format!(
                "snapshot {i} has depth {}, stream started with {depth}",
                s.depth()
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(depth as u32).to_le_bytes())?;
    w.write_all(&(snapshots.len() as u32).to_le_bytes())?;
    w.write_all(&tick_size.to_le_bytes())?;
    for s in snapshots {
        w.write_all(&s.time.to_le_bytes())?;
        for l in &s.levels {
            w.write_all(&l.bid_price.to_le_bytes())?;
            w.write_all(&l.bid_volume.to_le_bytes())?;
            w.write_all(&l.ask_price.to_le_bytes())?;
            w.write_all(&l.ask_volume.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_lobs1(path: &Path) -> Result<SnapshotStream, StreamError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(StreamError::Format("missing LOBS magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(StreamError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let depth = read_u32(&mut r)? as usize;
    let count = read_u32(&mut r)? as usize;
    let tick_size = read_u32(&mut r)?;
    if depth == 0 {
        return Err(StreamError::Format("zero depth".into()));
    }
    let mut snapshots = Vec::with_capacity(count);
    for _ in 0..count {
        let time = read_u32(&mut r)?;
        let mut levels = Vec::with_capacity(depth);
        for _ in 0..depth {
            levels.push(LobLevel {
                bid_price: read_i64(&mut r)?,
                bid_volume: read_i64(&mut r)?,
                ask_price: read_i64(&mut r)?,
                ask_volume: read_i64(&mut r)?,
            });
        }
        snapshots.push(LobSnapshot { time, levels });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(StreamError::Format("trailing bytes after records".into()));
    }
    Ok(SnapshotStream {
        snapshots,
        tick_size,
    })
}

/// CSV export with header `time,pb1,vb1,pa1,va1,...` matching the stream
/// depth.
pub fn write_csv(path: &Path, snapshots: &[LobSnapshot]) -> Result<(), StreamError> {
    let depth = snapshots.first().map_or(super::SNAPSHOT_DEPTH, |s| s.depth());
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = String::from("time");
    for i in 1..=depth {
        header.push_str(&format!(",pb{i},vb{i},pa{i},va{i}"));
    }
    writeln!(w, "{header}")?;
    for s in snapshots {
        write!(w, "{}", s.time)?;
        for l in &s.levels {
            write!(
                w,
                ",{},{},{},{}",
                l.bid_price, l.bid_volume, l.ask_price, l.ask_volume
            )?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, StreamError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_i64(r: &mut impl Read) -> Result<i64, StreamError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(i64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::book::{OrderBook, Side};

    fn sample_snapshots() -> Vec<LobSnapshot> {
        let mut book = OrderBook::new(1, 10_000);
        let mut out = Vec::new();
        for t in 1..=5u32 {
            book.set_time(t);
            book.submit_limit_order(Side::Bid, 9_999 - t as i64, 100, 0)
                .unwrap();
            book.submit_limit_order(Side::Ask, 10_001 + t as i64, 50, 1)
                .unwrap();
            out.push(book.snapshot(10, t));
        }
        out
    }

    #[test]
    fn lobs1_round_trip_is_bit_exact() {
        let snaps = sample_snapshots();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.lobs");
        let b = dir.path().join("b.lobs");
        write_lobs1(&a, &snaps, 1).unwrap();
        let loaded = read_lobs1(&a).unwrap();
        assert_eq!(loaded.snapshots, snaps);
        assert_eq!(loaded.tick_size, 1);
        write_lobs1(&b, &loaded.snapshots, loaded.tick_size).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn rejects_corrupt_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.lobs");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(read_lobs1(&p).is_err());
    }

    #[test]
    fn csv_header_matches_contract() {
        let snaps = sample_snapshots();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.csv");
        write_csv(&p, &snaps).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("time,pb1,vb1,pa1,va1,"));
        assert!(first.ends_with("pb10,vb10,pa10,va10"));
        assert_eq!(text.lines().count(), 6);
    }
}
