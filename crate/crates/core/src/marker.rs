//! Markers: (block, execution count) pairs that pin interval boundaries.
//!
//! A block's `required_count` is counted from program start, so a runtime hook
//! only needs a private per-block counter to recognise the point.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::{cumulative_count, ProfileSet};
use crate::selection::SelectionResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkerKind {
    Warmup,
    Start,
    End,
}

impl MarkerKind {
    pub fn name(self) -> &'static str {
        match self {
            MarkerKind::Warmup => "warmup",
            MarkerKind::Start => "start",
            MarkerKind::End => "end",
        }
    }

    pub fn bit(self) -> u64 {
        match self {
            MarkerKind::Warmup => 1,
            MarkerKind::Start => 2,
            MarkerKind::End => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub kind: MarkerKind,
    pub bb_id: u64,
    pub required_count: u64,
    pub relaxed: bool,
    /// IR instructions between the marker point and the true boundary.
    pub slack: u64,
}

/// Alternative relaxed choice ranked by executions from program start, which
/// is what actually drives hook cost on hardware.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelaxedDiagnostics {
    pub candidates: usize,
    pub by_cumulative_count: Marker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuggetSpec {
    pub interval_id: u64,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup: Option<Marker>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Marker>,
    pub end: Marker,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relaxed_diagnostics: Option<RelaxedDiagnostics>,
}

impl NuggetSpec {
    pub fn markers(&self) -> impl Iterator<Item = &Marker> {
        self.warmup
            .iter()
            .chain(self.start.iter())
            .chain(std::iter::once(&self.end))
    }
}

pub fn write_specs(specs: &[NuggetSpec], path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(specs).expect("specs serialize");
    s.push('\n');
    crate::write_atomic(path, s.as_bytes())
}

pub fn read_specs(path: &Path) -> Result<Vec<NuggetSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Exact marker: the interval's last-entered block and its cumulative count.
pub fn derive_end_marker(profiles: &ProfileSet, interval: usize) -> Result<Marker> {
    profiles.check_index(interval)?;
    let last = profiles.intervals[interval]
        .last_block()
        .ok_or_else(|| Error::CorruptRecord {
            interval_id: interval as u64,
            reason: "interval has no blocks".into(),
        })?;
    Ok(Marker {
        kind: MarkerKind::End,
        bb_id: last.bb_id,
        required_count: cumulative_count(profiles, last.bb_id, interval)?,
        relaxed: false,
        slack: 0,
    })
}

/// Lower-overhead marker within `search_distance` instructions of the boundary:
/// the candidate entered least often in this interval (ties: later stamp,
/// then lower block id).
pub fn derive_relaxed_marker(
    profiles: &ProfileSet,
    interval: usize,
    search_distance: u64,
) -> Result<Marker> {
    derive_relaxed_marker_with_diagnostics(profiles, interval, search_distance).map(|(m, _)| m)
}

pub fn derive_relaxed_marker_with_diagnostics(
    profiles: &ProfileSet,
    interval: usize,
    search_distance: u64,
) -> Result<(Marker, RelaxedDiagnostics)> {
    let boundary = profiles.interval_end(interval)?;
    let p = &profiles.intervals[interval];
    let floor = boundary.saturating_sub(search_distance);
    let candidates: Vec<_> = p.entries.iter().filter(|e| e.cstamp >= floor).collect();

    let to_marker = |e: &crate::profile::BlockSample| -> Result<Marker> {
        let slack = boundary - e.cstamp;
        Ok(Marker {
            kind: MarkerKind::End,
            bb_id: e.bb_id,
            required_count: cumulative_count(profiles, e.bb_id, interval)?,
            relaxed: slack > 0,
            slack,
        })
    };
    let rank = |key: fn(&Marker, u64) -> u64| -> Result<Marker> {
        let mut best: Option<(u64, u64, u64, Marker)> = None;
        for e in &candidates {
            let m = to_marker(e)?;
            let k = key(&m, e.count);
            // Smaller key, then larger stamp, then lower block id.
            let better = match &best {
                None => true,
                Some((bk, bstamp, bbb, _)) => {
                    (k, std::cmp::Reverse(e.cstamp), e.bb_id)
                        < (*bk, std::cmp::Reverse(*bstamp), *bbb)
                }
            };
            if better {
                best = Some((k, e.cstamp, e.bb_id, m));
            }
        }
        Ok(best.expect("the last block is always a candidate").3)
    };
    let by_interval = rank(|_, local| local)?;
    let by_cumulative = rank(|m, _| m.required_count)?;
    Ok((
        by_interval,
        RelaxedDiagnostics {
            candidates: candidates.len(),
            by_cumulative_count: by_cumulative,
        },
    ))
}

/// Markers for every chosen interval. `warmup_intervals` whole intervals
/// precede the region of interest when available; end markers are relaxed when
/// `search_distance > 0`, start and warmup markers are always exact.
pub fn build_nugget_spec(
    profiles: &ProfileSet,
    selection: &SelectionResult,
    warmup_intervals: u64,
    search_distance: u64,
) -> Result<Vec<NuggetSpec>> {
    selection
        .chosen
        .iter()
        .map(|c| {
            let i = usize::try_from(c.interval_id).map_err(|_| Error::IndexOutOfRange {
                index: usize::MAX,
                len: profiles.len(),
            })?;
            profiles.check_index(i)?;
            let (end, relaxed_diagnostics) = if search_distance > 0 {
                let (m, d) = derive_relaxed_marker_with_diagnostics(profiles, i, search_distance)?;
                (m, Some(d))
            } else {
                (derive_end_marker(profiles, i)?, None)
            };
            let start = match i {
                0 => None,
                _ => Some(Marker {
                    kind: MarkerKind::Start,
                    ..derive_end_marker(profiles, i - 1)?
                }),
            };
            let w = warmup_intervals as usize;
            let warmup = if w > 0 && i > w {
                Some(Marker {
                    kind: MarkerKind::Warmup,
                    ..derive_end_marker(profiles, i - w - 1)?
                })
            } else {
                None
            };
            Ok(NuggetSpec {
                interval_id: c.interval_id,
                weight: c.weight,
                warmup,
                start,
                end,
                relaxed_diagnostics,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{BlockEntry, BlockTable};
    use crate::profile::{BlockSample, IntervalProfile};
    use crate::selection::{Chosen, Method};
    use std::collections::BTreeMap;

    fn table(lens: &[u64]) -> BlockTable {
        BlockTable {
            entries: lens
                .iter()
                .enumerate()
                .map(|(i, &l)| BlockEntry {
                    bb_id: i as u64,
                    function_name: "f".into(),
                    block_label: format!("b{i}"),
                    inst_count: l,
                })
                .collect(),
        }
    }

    /// Interval of 1000 instructions: block X (len 2) entered 40 times, block Y
    /// (len 10) twice, block Z (len 900) once, last entry is X at the boundary.
    fn xyz() -> ProfileSet {
        let set = ProfileSet {
            interval_size: 1000,
            block_table: table(&[2, 10, 900]),
            intervals: vec![IntervalProfile {
                interval_id: 0,
                actual_size: 1000,
                partial: false,
                entries: vec![
                    BlockSample {
                        bb_id: 0,
                        count: 40,
                        cstamp: 1000,
                    },
                    BlockSample {
                        bb_id: 1,
                        count: 2,
                        cstamp: 950,
                    },
                    BlockSample {
                        bb_id: 2,
                        count: 1,
                        cstamp: 900,
                    },
                ],
            }],
        };
        set.validate().unwrap();
        set
    }

    #[test]
    fn end_marker_is_last_stamp() {
        let m = derive_end_marker(&xyz(), 0).unwrap();
        assert_eq!(
            (m.bb_id, m.required_count, m.slack, m.relaxed),
            (0, 40, 0, false)
        );
        assert!(matches!(
            derive_end_marker(&xyz(), 1),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn relaxed_zero_distance_is_exact() {
        assert_eq!(
            derive_relaxed_marker(&xyz(), 0, 0).unwrap(),
            derive_end_marker(&xyz(), 0).unwrap()
        );
    }

    #[test]
    fn relaxed_prefers_rare_block() {
        let m = derive_relaxed_marker(&xyz(), 0, 60).unwrap();
        assert_eq!(m.bb_id, 1);
        assert_eq!(m.slack, 50);
        assert!(m.relaxed);
        let m = derive_relaxed_marker(&xyz(), 0, 100).unwrap();
        assert_eq!(m.bb_id, 2);
        assert_eq!(m.slack, 100);
        let m = derive_relaxed_marker(&xyz(), 0, 99).unwrap();
        assert_eq!(m.bb_id, 1);
    }

    fn selection(ids: &[u64]) -> SelectionResult {
        SelectionResult {
            method: Method::Random,
            seed: 0,
            k_used: None,
            chosen: ids
                .iter()
                .map(|&i| Chosen {
                    interval_id: i,
                    weight: 1.0 / ids.len() as f64,
                })
                .collect(),
            silhouette_by_k: BTreeMap::new(),
            assignments: vec![],
        }
    }

    /// Six intervals of one 5-instruction block, S = 10.
    fn uniform() -> ProfileSet {
        let intervals = (0..6)
            .map(|i| IntervalProfile {
                interval_id: i,
                actual_size: 10,
                partial: false,
                entries: vec![BlockSample {
                    bb_id: 0,
                    count: 2,
                    cstamp: 10 * (i + 1),
                }],
            })
            .collect();
        let set = ProfileSet {
            interval_size: 10,
            intervals,
            block_table: table(&[5]),
        };
        set.validate().unwrap();
        set
    }

    #[test]
    fn spec_index_arithmetic() {
        let set = uniform();
        let specs = build_nugget_spec(&set, &selection(&[0, 5]), 1, 0).unwrap();
        assert!(specs[0].start.is_none() && specs[0].warmup.is_none());
        assert_eq!(specs[0].end.required_count, 2);
        let s5 = &specs[1];
        assert_eq!(s5.warmup.as_ref().unwrap().required_count, 8); // end of interval 3
        assert_eq!(s5.start.as_ref().unwrap().required_count, 10); // end of interval 4
        assert_eq!(s5.end.required_count, 12);
        assert_eq!(s5.warmup.as_ref().unwrap().kind, MarkerKind::Warmup);
        assert_eq!(s5.start.as_ref().unwrap().kind, MarkerKind::Start);
    }

    #[test]
    fn warmup_needs_a_full_preceding_window() {
        let set = uniform();
        let specs = build_nugget_spec(&set, &selection(&[1, 2]), 1, 0).unwrap();
        assert!(specs[0].warmup.is_none());
        assert!(specs[0].start.is_some());
        assert_eq!(specs[1].warmup.as_ref().unwrap().required_count, 2);
        let none = build_nugget_spec(&set, &selection(&[5]), 0, 0).unwrap();
        assert!(none[0].warmup.is_none());
    }

    #[test]
    fn unknown_interval_rejected() {
        assert!(build_nugget_spec(&uniform(), &selection(&[6]), 0, 0).is_err());
    }

    #[test]
    fn json_shape() {
        let specs = build_nugget_spec(&uniform(), &selection(&[3]), 1, 4).unwrap();
        let v: serde_json::Value = serde_json::to_value(&specs).unwrap();
        assert_eq!(v[0]["interval_id"], 3);
        assert_eq!(v[0]["end"]["kind"], "end");
        for key in ["bb_id", "required_count", "relaxed", "slack"] {
            assert!(v[0]["start"].get(key).is_some(), "{key}");
        }
        let back: Vec<NuggetSpec> = serde_json::from_value(v).unwrap();
        assert_eq!(back, specs);
    }
}
