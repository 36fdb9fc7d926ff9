//! Interval profile file format and validated in-memory profile set.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header : "NUGPROF1" | interval_size u64 | block_count u64
//! record : interval_id u64 | actual_size u64 | flags u32 (bit0 = partial)
//!          | entry_count u32 | entry_count x (bb_id u64, bbv u64, cstamp u64)
//! ```
//!
//! Records run to end of file. Entries are written in ascending `bb_id` order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ir::BlockTable;

pub const MAGIC: &[u8; 8] = b"NUGPROF1";
pub const FLAG_PARTIAL: u32 = 1;

const HEADER_LEN: usize = 24;
const ENTRY_LEN: usize = 24;
const RECORD_HEAD_LEN: usize = 24;

/// One touched block within an interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSample {
    pub bb_id: u64,
    /// Entries into the block during the interval (the IRBB vector component).
    pub count: u64,
    /// Global instruction counter after the block's last entry in the interval.
    pub cstamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntervalProfile {
    pub interval_id: u64,
    pub actual_size: u64,
    pub partial: bool,
    /// Sorted by `bb_id`; every touched block has both a count and a stamp.
    pub entries: Vec<BlockSample>,
}

impl IntervalProfile {
    pub fn get(&self, bb_id: u64) -> Option<&BlockSample> {
        self.entries
            .binary_search_by_key(&bb_id, |e| e.bb_id)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn count(&self, bb_id: u64) -> u64 {
        self.get(bb_id).map_or(0, |e| e.count)
    }

    /// The block entered last in this interval.
    pub fn last_block(&self) -> Option<&BlockSample> {
        self.entries.iter().max_by_key(|e| e.cstamp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSet {
    pub interval_size: u64,
    pub intervals: Vec<IntervalProfile>,
    pub block_table: BlockTable,
}

impl ProfileSet {
    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn block_count(&self) -> u64 {
        self.block_table.len() as u64
    }

    /// Intervals eligible for sampling (every interval except a partial tail).
    pub fn full_intervals(&self) -> &[IntervalProfile] {
        match self.intervals.last() {
            Some(last) if last.partial => &self.intervals[..self.intervals.len() - 1],
            _ => &self.intervals,
        }
    }

    pub fn partial_interval(&self) -> Option<&IntervalProfile> {
        self.intervals.last().filter(|i| i.partial)
    }

    /// Counter value at which interval `i` begins.
    pub fn interval_start(&self, i: usize) -> Result<u64> {
        self.check_index(i)?;
        Ok(self.intervals[..i].iter().map(|p| p.actual_size).sum())
    }

    /// Counter value at which interval `i` ends (its boundary).
    pub fn interval_end(&self, i: usize) -> Result<u64> {
        Ok(self.interval_start(i)? + self.intervals[i].actual_size)
    }

    /// `(start, end)` counter positions for every interval.
    pub fn boundaries(&self) -> Vec<(u64, u64)> {
        let mut pos = 0;
        self.intervals
            .iter()
            .map(|p| {
                let start = pos;
                pos += p.actual_size;
                (start, pos)
            })
            .collect()
    }

    pub fn check_index(&self, i: usize) -> Result<()> {
        if i < self.intervals.len() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                index: i,
                len: self.intervals.len(),
            })
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let entries: usize = self.intervals.iter().map(|p| p.entries.len()).sum();
        let mut out = Vec::with_capacity(
            HEADER_LEN + self.intervals.len() * RECORD_HEAD_LEN + entries * ENTRY_LEN,
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.interval_size.to_le_bytes());
        out.extend_from_slice(&self.block_count().to_le_bytes());
        for p in &self.intervals {
            encode_record(&mut out, p);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, &self.encode())
    }

    /// Decodes and fully validates a profile against `table`.
    pub fn decode(bytes: &[u8], table: &BlockTable) -> Result<ProfileSet> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut r = Reader { bytes, pos: 8 };
        let interval_size = r.u64().expect("header length checked");
        let block_count = r.u64().expect("header length checked");
        if block_count != table.len() as u64 {
            return Err(Error::BlockTableMismatch(format!(
                "profile was recorded for {block_count} blocks, table has {}",
                table.len()
            )));
        }
        let mut intervals = Vec::new();
        while r.pos < bytes.len() {
            let next_id = intervals.len() as u64;
            let truncated = || Error::CorruptRecord {
                interval_id: next_id,
                reason: "truncated record".into(),
            };
            let interval_id = r.u64().ok_or_else(truncated)?;
            let actual_size = r.u64().ok_or_else(truncated)?;
            let flags = r.u32().ok_or_else(truncated)?;
            let n = r.u32().ok_or_else(truncated)? as usize;
            if flags & !FLAG_PARTIAL != 0 {
                return Err(Error::CorruptRecord {
                    interval_id,
                    reason: format!("unknown flag bits {flags:#x}"),
                });
            }
            if r.remaining() < n.saturating_mul(ENTRY_LEN) {
                return Err(truncated());
            }
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                entries.push(BlockSample {
                    bb_id: r.u64().ok_or_else(truncated)?,
                    count: r.u64().ok_or_else(truncated)?,
                    cstamp: r.u64().ok_or_else(truncated)?,
                });
            }
            intervals.push(IntervalProfile {
                interval_id,
                actual_size,
                partial: flags & FLAG_PARTIAL != 0,
                entries,
            });
        }
        let set = ProfileSet {
            interval_size,
            intervals,
            block_table: table.clone(),
        };
        set.validate()?;
        Ok(set)
    }

    /// Checks every record invariant; the error names the first offending interval.
    pub fn validate(&self) -> Result<()> {
        if self.interval_size == 0 {
            return Err(Error::CorruptRecord {
                interval_id: 0,
                reason: "interval size is zero".into(),
            });
        }
        let table = &self.block_table;
        let s = self.interval_size;
        let n = self.intervals.len();
        let mut start = 0u64;
        for (i, p) in self.intervals.iter().enumerate() {
            let id = p.interval_id;
            let corrupt = |reason: String| Error::CorruptRecord {
                interval_id: id,
                reason,
            };
            if id != i as u64 {
                return Err(corrupt(format!("expected interval id {i}")));
            }
            if p.partial && i + 1 != n {
                return Err(corrupt("partial interval is not the last".into()));
            }
            if p.actual_size == 0 || p.entries.is_empty() {
                return Err(corrupt("empty interval".into()));
            }
            let end = start
                .checked_add(p.actual_size)
                .ok_or_else(|| corrupt("counter overflow".into()))?;

            let mut mass = 0u64;
            let mut prev_bb = None;
            let mut stamps = Vec::with_capacity(p.entries.len());
            for e in &p.entries {
                let len = table.inst_count(e.bb_id).ok_or_else(|| {
                    Error::BlockTableMismatch(format!(
                        "interval {id} references block {} of {}",
                        e.bb_id,
                        table.len()
                    ))
                })?;
                if prev_bb.is_some_and(|b| b >= e.bb_id) {
                    return Err(corrupt(format!(
                        "entries not strictly ascending at block {}",
                        e.bb_id
                    )));
                }
                prev_bb = Some(e.bb_id);
                if e.count == 0 {
                    return Err(corrupt(format!("block {} has a zero count", e.bb_id)));
                }
                if e.cstamp <= start || e.cstamp > end {
                    return Err(corrupt(format!(
                        "stamp {} of block {} outside ({start}, {end}]",
                        e.cstamp, e.bb_id
                    )));
                }
                mass = e
                    .count
                    .checked_mul(len)
                    .and_then(|m| m.checked_add(mass))
                    .ok_or_else(|| corrupt("instruction mass overflow".into()))?;
                stamps.push(e.cstamp);
            }
            if mass != p.actual_size {
                return Err(corrupt(format!(
                    "block vector accounts for {mass} instructions, actual size is {}",
                    p.actual_size
                )));
            }
            stamps.sort_unstable();
            if stamps.windows(2).any(|w| w[0] == w[1]) {
                return Err(corrupt("two blocks share a count stamp".into()));
            }
            let last = p.last_block().expect("entries nonempty");
            if last.cstamp != end {
                return Err(corrupt(format!(
                    "last stamp {} does not reach the interval end {end}",
                    last.cstamp
                )));
            }
            let last_len = table.inst_count(last.bb_id).expect("checked above");
            if p.actual_size - last_len >= s {
                return Err(corrupt(format!(
                    "boundary at {} was crossed before the final block",
                    start + s
                )));
            }
            if !p.partial && p.actual_size < s {
                return Err(corrupt(format!(
                    "full interval of {} instructions is below the interval size {s}",
                    p.actual_size
                )));
            }
            start = end;
        }
        Ok(())
    }
}

fn encode_record(out: &mut Vec<u8>, p: &IntervalProfile) {
    out.extend_from_slice(&p.interval_id.to_le_bytes());
    out.extend_from_slice(&p.actual_size.to_le_bytes());
    let flags = if p.partial { FLAG_PARTIAL } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(p.entries.len() as u32).to_le_bytes());
    for e in &p.entries {
        out.extend_from_slice(&e.bb_id.to_le_bytes());
        out.extend_from_slice(&e.count.to_le_bytes());
        out.extend_from_slice(&e.cstamp.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let slice = self.bytes.get(self.pos..self.pos + N)?;
        self.pos += N;
        Some(slice.try_into().expect("slice has length N"))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }
}

pub fn read_profile(path: &Path, table: &BlockTable) -> Result<ProfileSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ProfileSet::decode(&bytes, table)
}

/// Executions of `bb_id` from program start through the end of `through_interval`.
pub fn cumulative_count(profiles: &ProfileSet, bb_id: u64, through_interval: usize) -> Result<u64> {
    profiles.check_index(through_interval)?;
    Ok(profiles.intervals[..=through_interval]
        .iter()
        .map(|p| p.count(bb_id))
        .sum())
}

pub fn total_instructions(profiles: &ProfileSet) -> u64 {
    profiles.intervals.iter().map(|p| p.actual_size).sum()
}
