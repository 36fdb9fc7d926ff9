//! Nugget emission: the base IR plus hooks in the marker blocks only.
//!
//! Each distinct marker block receives one call to `__nugget_marker_hook`
//! carrying a slot index, a kind mask and the baked thresholds, plus a global
//! assembly label per marker kind (`__nugget_mark_<kind>_<interval>`) so a
//! simulator can track the marker by program counter instead of by hook.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analyze::insert_at_program_entry;
use crate::error::{Error, Result};
use crate::ir::{attach_block_label_symbol, BlockTable, IRModule};
use crate::marker::{MarkerKind, NuggetSpec};

pub const MARKER_HOOK_SYMBOL: &str = "__nugget_marker_hook";
pub const MARKER_INIT_SYMBOL: &str = "__nugget_marker_init";

pub const ROI_OUT_ENV: &str = "NUGGET_ROI_OUT";
pub const DEFAULT_ROI_OUT: &str = "./nugget.roi";
/// Destination of WARMUP / ROI_BEGIN / ROI_END event lines (default: stderr).
pub const EVENT_OUT_ENV: &str = "NUGGET_EVENT_OUT";

/// Exit status of a nugget whose end marker never fired.
pub const MARKER_MISSED_EXIT: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RoiAction {
    /// Read the monotonic clock at ROI begin and end.
    #[default]
    Timer,
    /// Also write an event line at ROI begin and end.
    Announce,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NuggetBuild {
    pub spec: NuggetSpec,
    pub roi_action: RoiAction,
    pub module_out: IRModule,
    pub marker_symbols: BTreeMap<MarkerKind, String>,
    /// Number of marker hook call sites inserted.
    pub hook_sites: usize,
}

pub fn marker_symbol(kind: MarkerKind, interval_id: u64) -> String {
    format!("__nugget_mark_{}_{interval_id}", kind.name())
}

/// One hook site: a block and the thresholds it watches.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Site {
    mask: u64,
    warmup: u64,
    start: u64,
    end: u64,
    kinds: Vec<MarkerKind>,
}

pub fn marker_hook_line(slot: usize, mask: u64, warmup: u64, start: u64, end: u64) -> String {
    format!(
        "  call void @{MARKER_HOOK_SYMBOL}(i64 {slot}, i64 {mask}, i64 {warmup}, i64 {start}, i64 {end})"
    )
}

pub fn instrument_nugget(
    module: &IRModule,
    table: &BlockTable,
    spec: &NuggetSpec,
    action: RoiAction,
) -> Result<NuggetBuild> {
    let mut sites: BTreeMap<u64, Site> = BTreeMap::new();
    for m in spec.markers() {
        if table.get(m.bb_id).is_none() {
            return Err(Error::UnknownBlock(m.bb_id));
        }
        let site = sites.entry(m.bb_id).or_default();
        site.mask |= m.kind.bit();
        match m.kind {
            MarkerKind::Warmup => site.warmup = m.required_count,
            MarkerKind::Start => site.start = m.required_count,
            MarkerKind::End => site.end = m.required_count,
        }
        site.kinds.push(m.kind);
    }

    let mut out = module.clone();
    let mut marker_symbols = BTreeMap::new();
    for (slot, (&bb_id, site)) in sites.iter().enumerate() {
        let block = out.block_mut(bb_id).ok_or(Error::UnknownBlock(bb_id))?;
        block.insert_call_before_terminator(&marker_hook_line(
            slot,
            site.mask,
            site.warmup,
            site.start,
            site.end,
        ));
        for &kind in &site.kinds {
            let sym = marker_symbol(kind, spec.interval_id);
            attach_block_label_symbol(&mut out, bb_id, &sym)?;
            marker_symbols.insert(kind, sym);
        }
    }
    out.declare_function(
        MARKER_HOOK_SYMBOL,
        &format!("declare void @{MARKER_HOOK_SYMBOL}(i64, i64, i64, i64, i64)"),
    );
    out.declare_function(
        MARKER_INIT_SYMBOL,
        &format!("declare void @{MARKER_INIT_SYMBOL}()"),
    );
    insert_at_program_entry(&mut out, &format!("  call void @{MARKER_INIT_SYMBOL}()"));

    Ok(NuggetBuild {
        spec: spec.clone(),
        roi_action: action,
        module_out: out,
        marker_symbols,
        hook_sites: sites.len(),
    })
}

const MARKER_RUNTIME_TEMPLATE: &str = r#"/* Nugget marker runtime. Generated; do not edit. */
#define _POSIX_C_SOURCE 200809L
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <time.h>
#include <unistd.h>

#define NUGGET_INTERVAL_ID UINT64_C(@INTERVAL_ID@)
#define NUGGET_SLOTS @SLOTS@
#define NUGGET_HAS_START @HAS_START@
#define NUGGET_ANNOUNCE @ANNOUNCE@
#define NUGGET_THREAD_SAFE @THREAD_SAFE@
#define NUGGET_ROI_ENV "@ROI_ENV@"
#define NUGGET_ROI_DEFAULT "@ROI_DEFAULT@"
#define NUGGET_EVENT_ENV "@EVENT_ENV@"
#define NUGGET_MISSED_EXIT @MISSED_EXIT@

#define MASK_WARMUP 1u
#define MASK_START 2u
#define MASK_END 4u

#if NUGGET_THREAD_SAFE
#define NUGGET_INC(p) __atomic_add_fetch((p), 1, __ATOMIC_RELAXED)
#define NUGGET_LOAD(p) __atomic_load_n((p), __ATOMIC_ACQUIRE)
#define NUGGET_STORE(p, v) __atomic_store_n((p), (v), __ATOMIC_RELEASE)
#else
#define NUGGET_INC(p) (++*(p))
#define NUGGET_LOAD(p) (*(p))
#define NUGGET_STORE(p, v) (*(p) = (v))
#endif

/* Present only when linked together with the analysis runtime. */
extern uint64_t __nugget_counter_value(void) __attribute__((weak));

static uint64_t nugget_counts[NUGGET_SLOTS];
static int nugget_slot_done[NUGGET_SLOTS];
static int nugget_initialized;
static int nugget_started;
static int nugget_finished;
static uint64_t nugget_roi_begin_ns;

static uint64_t nugget_now_ns(void) {
  struct timespec ts;
  clock_gettime(CLOCK_MONOTONIC, &ts);
  return (uint64_t)ts.tv_sec * UINT64_C(1000000000) + (uint64_t)ts.tv_nsec;
}

static void nugget_event(const char *what) {
  const char *path = getenv(NUGGET_EVENT_ENV);
  FILE *f = (path && *path) ? fopen(path, "a") : stderr;
  if (!f) f = stderr;
  if (__nugget_counter_value)
    fprintf(f, "%s\t%llu\t%llu\n", what, (unsigned long long)NUGGET_INTERVAL_ID,
            (unsigned long long)__nugget_counter_value());
  else
    fprintf(f, "%s\t%llu\t-\n", what, (unsigned long long)NUGGET_INTERVAL_ID);
  if (f != stderr) fclose(f);
  else fflush(f);
}

static void nugget_write_roi(uint64_t ns, const char *status) {
  const char *path = getenv(NUGGET_ROI_ENV);
  if (!path || !*path) path = NUGGET_ROI_DEFAULT;
  FILE *f = fopen(path, "a");
  if (!f) {
    fprintf(stderr, "nugget: cannot open ROI output %s\n", path);
    _exit(1);
  }
  fprintf(f, "%llu\t%llu\t%s\n", (unsigned long long)NUGGET_INTERVAL_ID, (unsigned long long)ns,
          status);
  if (fclose(f) != 0) {
    fprintf(stderr, "nugget: ROI write failed\n");
    _exit(1);
  }
}

static void nugget_begin_roi(void) {
  nugget_roi_begin_ns = nugget_now_ns();
  NUGGET_STORE(&nugget_started, 1);
  if (NUGGET_ANNOUNCE) nugget_event("ROI_BEGIN");
}

static void nugget_end_roi(void) {
  uint64_t end = nugget_now_ns();
  NUGGET_STORE(&nugget_finished, 1);
  if (NUGGET_ANNOUNCE) nugget_event("ROI_END");
  if (!NUGGET_LOAD(&nugget_started)) {
    nugget_write_roi(0, "MARKER_MISSED");
    fflush(NULL);
    _exit(NUGGET_MISSED_EXIT);
  }
  nugget_write_roi(end - nugget_roi_begin_ns, "OK");
  fflush(NULL);
  _exit(0);
}

static void nugget_atexit(void) {
  if (NUGGET_LOAD(&nugget_finished)) return;
  nugget_write_roi(0, "MARKER_MISSED");
  fflush(NULL);
  _exit(NUGGET_MISSED_EXIT);
}

void __nugget_marker_init(void) {
  if (nugget_initialized) return;
  nugget_initialized = 1;
  atexit(nugget_atexit);
  if (!NUGGET_HAS_START) nugget_begin_roi();
}

void __nugget_marker_hook(uint64_t slot, uint64_t mask, uint64_t warmup, uint64_t start,
                          uint64_t end) {
  if (NUGGET_LOAD(&nugget_slot_done[slot])) return;
  uint64_t c = NUGGET_INC(&nugget_counts[slot]);
  uint64_t last = 0;
  if (mask & MASK_WARMUP) {
    if (c == warmup) nugget_event("WARMUP");
    if (warmup > last) last = warmup;
  }
  if (mask & MASK_START) {
    if (c == start) nugget_begin_roi();
    if (start > last) last = start;
  }
  if (mask & MASK_END) {
    if (c == end) nugget_end_roi();
    if (end > last) last = end;
  }
  if (c >= last) NUGGET_STORE(&nugget_slot_done[slot], 1);
}
"#;

/// Marker runtime translation unit for one nugget.
pub fn emit_marker_runtime(build: &NuggetBuild, thread_safe: bool) -> String {
    MARKER_RUNTIME_TEMPLATE
        .replace("@INTERVAL_ID@", &build.spec.interval_id.to_string())
        .replace("@SLOTS@", &build.hook_sites.max(1).to_string())
        .replace(
            "@HAS_START@",
            if build.spec.start.is_some() { "1" } else { "0" },
        )
        .replace(
            "@ANNOUNCE@",
            if build.roi_action == RoiAction::Announce {
                "1"
            } else {
                "0"
            },
        )
        .replace("@THREAD_SAFE@", if thread_safe { "1" } else { "0" })
        .replace("@ROI_ENV@", ROI_OUT_ENV)
        .replace("@ROI_DEFAULT@", DEFAULT_ROI_OUT)
        .replace("@EVENT_ENV@", EVENT_OUT_ENV)
        .replace("@MISSED_EXIT@", &MARKER_MISSED_EXIT.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiRecord {
    pub interval_id: u64,
    pub roi_ns: u64,
    pub ok: bool,
}

/// Parses one `interval_id<TAB>roi_ns<TAB>status` line.
pub fn parse_roi_line(line: &str) -> Option<RoiRecord> {
    let mut f = line.trim_end().split('\t');
    let interval_id = f.next()?.parse().ok()?;
    let roi_ns = f.next()?.parse().ok()?;
    let ok = match f.next()? {
        "OK" => true,
        "MARKER_MISSED" => false,
        _ => return None,
    };
    f.next().is_none().then_some(RoiRecord {
        interval_id,
        roi_ns,
        ok,
    })
}
