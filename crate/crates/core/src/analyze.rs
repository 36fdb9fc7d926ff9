//! Interval-analysis instrumentation.
//!
//! Every defined block gets a call to `__nugget_bb_hook(bb_id, inst_count)`
//! just before its terminator. The runtime support (a C translation unit
//! produced by [`emit_runtime_support`]) keeps the global instruction counter
//! and per-interval vectors and writes the profile file. [`HookState`] is the
//! same state machine in Rust; replaying a recorded block trace through it must
//! reproduce the runtime's profile byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ir::{BlockTable, IRModule};
use crate::profile::{BlockSample, IntervalProfile, ProfileSet};

pub const HOOK_SYMBOL: &str = "__nugget_bb_hook";
pub const INIT_SYMBOL: &str = "__nugget_init";
pub const FINI_SYMBOL: &str = "__nugget_fini";
pub const COUNTER_SYMBOL: &str = "__nugget_counter_value";

pub const PROFILE_PATH_ENV: &str = "NUGGET_PROFILE_PATH";
pub const DEFAULT_PROFILE_PATH: &str = "./nugget.profile";
/// When set, the runtime also appends every executed block id (u64 LE) here.
pub const TRACE_PATH_ENV: &str = "NUGGET_TRACE_PATH";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalysisConfig {
    /// Target IR instructions per interval.
    pub interval_size: u64,
    pub profile_path_env: String,
    pub thread_safe: bool,
}

impl AnalysisConfig {
    pub fn new(interval_size: u64) -> Result<Self> {
        if interval_size == 0 {
            return Err(Error::Config("interval size must be at least 1".into()));
        }
        Ok(AnalysisConfig {
            interval_size,
            profile_path_env: PROFILE_PATH_ENV.to_string(),
            thread_safe: false,
        })
    }

    pub fn thread_safe(mut self, on: bool) -> Self {
        self.thread_safe = on;
        self
    }
}

pub fn hook_call_line(bb_id: u64, inst_count: u64) -> String {
    format!("  call void @{HOOK_SYMBOL}(i64 {bb_id}, i64 {inst_count})")
}

/// Inserts `line` at the top of `main`'s entry block, if the module defines `main`.
pub(crate) fn insert_at_program_entry(module: &mut IRModule, line: &str) -> bool {
    match module.function_mut("main").filter(|f| f.is_definition) {
        Some(main) => {
            main.blocks[0].insert_after_allocas(line);
            true
        }
        None => false,
    }
}

pub fn instrument_for_analysis(
    module: &IRModule,
    table: &BlockTable,
    _config: &AnalysisConfig,
) -> Result<IRModule> {
    let mut out = module.clone();
    let mut n = 0usize;
    for (entry, block) in table.entries.iter().zip(out.blocks_mut()) {
        block.insert_call_before_terminator(&hook_call_line(entry.bb_id, entry.inst_count));
        n += 1;
    }
    let blocks = module.definitions().map(|f| f.blocks.len()).sum::<usize>();
    if n != table.len() || blocks != table.len() {
        return Err(Error::BlockTableMismatch(format!(
            "module has {blocks} blocks, table has {}",
            table.len()
        )));
    }
    out.declare_function(
        HOOK_SYMBOL,
        &format!("declare void @{HOOK_SYMBOL}(i64, i64)"),
    );
    out.declare_function(INIT_SYMBOL, &format!("declare void @{INIT_SYMBOL}()"));
    insert_at_program_entry(&mut out, &format!("  call void @{INIT_SYMBOL}()"));
    Ok(out)
}

/// Rust model of the runtime hook state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HookState {
    pub interval_size: u64,
    pub global_counter: u64,
    pub interval_id: u64,
    /// Counter value at which the current interval began.
    pub interval_start: u64,
    pub bbv: BTreeMap<u64, u64>,
    pub cstamp: BTreeMap<u64, u64>,
}

impl HookState {
    pub fn new(interval_size: u64) -> Self {
        assert!(interval_size >= 1, "interval size must be at least 1");
        HookState {
            interval_size,
            global_counter: 0,
            interval_id: 0,
            interval_start: 0,
            bbv: BTreeMap::new(),
            cstamp: BTreeMap::new(),
        }
    }

    /// Counter value that closes the current interval.
    pub fn boundary(&self) -> u64 {
        self.interval_start + self.interval_size
    }

    /// One completed block. Emits at most one interval record; when a single
    /// block overshoots the boundary the record's size absorbs the excess.
    pub fn step(&mut self, bb_id: u64, inst_count: u64) -> Option<IntervalProfile> {
        self.global_counter += inst_count;
        *self.bbv.entry(bb_id).or_insert(0) += 1;
        self.cstamp.insert(bb_id, self.global_counter);
        (self.global_counter >= self.boundary()).then(|| self.take_record(false))
    }

    /// Emits the trailing partial interval, if any hook fired since the last boundary.
    pub fn finalize(&mut self) -> Option<IntervalProfile> {
        (self.global_counter > self.interval_start).then(|| self.take_record(true))
    }

    fn take_record(&mut self, partial: bool) -> IntervalProfile {
        let bbv = std::mem::take(&mut self.bbv);
        let cstamp = std::mem::take(&mut self.cstamp);
        let entries = bbv
            .into_iter()
            .map(|(bb_id, count)| BlockSample {
                bb_id,
                count,
                cstamp: cstamp[&bb_id],
            })
            .collect();
        let record = IntervalProfile {
            interval_id: self.interval_id,
            actual_size: self.global_counter - self.interval_start,
            partial,
            entries,
        };
        self.interval_id += 1;
        self.interval_start = self.global_counter;
        record
    }
}

/// Replays a block-execution sequence through [`HookState`].
pub fn replay_trace<I>(trace: I, table: &BlockTable, interval_size: u64) -> Result<ProfileSet>
where
    I: IntoIterator<Item = u64>,
{
    let mut state = HookState::new(interval_size);
    let mut intervals = Vec::new();
    for bb in trace {
        let len = table.inst_count(bb).ok_or(Error::UnknownBlock(bb))?;
        intervals.extend(state.step(bb, len));
    }
    intervals.extend(state.finalize());
    Ok(ProfileSet {
        interval_size,
        intervals,
        block_table: table.clone(),
    })
}

/// Reads a trace file written by the runtime (`NUGGET_TRACE_PATH`).
pub fn read_trace(path: &Path) -> Result<Vec<u64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Config(format!(
            "{}: trace length {} is not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

const RUNTIME_TEMPLATE: &str = r#"/* Interval-analysis runtime support. Generated; do not edit. */
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>

#define NUGGET_INTERVAL_SIZE UINT64_C(@INTERVAL_SIZE@)
#define NUGGET_BLOCK_COUNT UINT64_C(@BLOCK_COUNT@)
#define NUGGET_THREAD_SAFE @THREAD_SAFE@
#define NUGGET_PROFILE_ENV "@PROFILE_ENV@"
#define NUGGET_PROFILE_DEFAULT "@PROFILE_DEFAULT@"
#define NUGGET_TRACE_ENV "@TRACE_ENV@"

#if NUGGET_THREAD_SAFE
#include <pthread.h>
static pthread_mutex_t nugget_lock = PTHREAD_MUTEX_INITIALIZER;
#define NUGGET_LOCK() pthread_mutex_lock(&nugget_lock)
#define NUGGET_UNLOCK() pthread_mutex_unlock(&nugget_lock)
#else
#define NUGGET_LOCK() ((void)0)
#define NUGGET_UNLOCK() ((void)0)
#endif

enum { NUGGET_FRESH = 0, NUGGET_OPEN = 1, NUGGET_DONE = 2 };

static int nugget_state;
static FILE *nugget_profile;
static FILE *nugget_trace;
static uint64_t nugget_counter;
static uint64_t nugget_interval_start;
static uint64_t nugget_interval_id;
static uint64_t *nugget_bbv;
static uint64_t *nugget_cstamp;
static uint64_t *nugget_touched;
static uint64_t nugget_ntouched;

static void nugget_die(const char *what) {
  fprintf(stderr, "nugget: %s\n", what);
  abort();
}

static void nugget_put_u64(FILE *f, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; i++) b[i] = (unsigned char)(v >> (8 * i));
  if (fwrite(b, 1, 8, f) != 8) nugget_die("profile write failed");
}

static void nugget_put_u32(FILE *f, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; i++) b[i] = (unsigned char)(v >> (8 * i));
  if (fwrite(b, 1, 4, f) != 4) nugget_die("profile write failed");
}

static int nugget_cmp_u64(const void *a, const void *b) {
  uint64_t x = *(const uint64_t *)a, y = *(const uint64_t *)b;
  return (x > y) - (x < y);
}

static void nugget_emit(uint32_t flags) {
  qsort(nugget_touched, nugget_ntouched, sizeof(uint64_t), nugget_cmp_u64);
  nugget_put_u64(nugget_profile, nugget_interval_id);
  nugget_put_u64(nugget_profile, nugget_counter - nugget_interval_start);
  nugget_put_u32(nugget_profile, flags);
  nugget_put_u32(nugget_profile, (uint32_t)nugget_ntouched);
  for (uint64_t i = 0; i < nugget_ntouched; i++) {
    uint64_t bb = nugget_touched[i];
    nugget_put_u64(nugget_profile, bb);
    nugget_put_u64(nugget_profile, nugget_bbv[bb]);
    nugget_put_u64(nugget_profile, nugget_cstamp[bb]);
    nugget_bbv[bb] = 0;
    nugget_cstamp[bb] = 0;
  }
  nugget_ntouched = 0;
  nugget_interval_id++;
  nugget_interval_start = nugget_counter;
}

static void nugget_close(void) {
  if (nugget_state != NUGGET_OPEN) return;
  if (nugget_counter > nugget_interval_start) nugget_emit(1u);
  if (fclose(nugget_profile) != 0) nugget_die("profile close failed");
  if (nugget_trace && fclose(nugget_trace) != 0) nugget_die("trace close failed");
  nugget_profile = NULL;
  nugget_trace = NULL;
  nugget_state = NUGGET_DONE;
}

static void nugget_atexit(void) {
  NUGGET_LOCK();
  nugget_close();
  NUGGET_UNLOCK();
}

static void nugget_open(void) {
  const char *path = getenv(NUGGET_PROFILE_ENV);
  if (!path || !*path) path = NUGGET_PROFILE_DEFAULT;
  nugget_profile = fopen(path, "wb");
  if (!nugget_profile) nugget_die("cannot open profile output");
  setvbuf(nugget_profile, NULL, _IOFBF, 1 << 20);
  uint64_t n = NUGGET_BLOCK_COUNT ? NUGGET_BLOCK_COUNT : 1;
  nugget_bbv = calloc(n, sizeof(uint64_t));
  nugget_cstamp = calloc(n, sizeof(uint64_t));
  nugget_touched = calloc(n, sizeof(uint64_t));
  if (!nugget_bbv || !nugget_cstamp || !nugget_touched) nugget_die("out of memory");
  if (fwrite("NUGPROF1", 1, 8, nugget_profile) != 8) nugget_die("profile write failed");
  nugget_put_u64(nugget_profile, NUGGET_INTERVAL_SIZE);
  nugget_put_u64(nugget_profile, NUGGET_BLOCK_COUNT);
  const char *tpath = getenv(NUGGET_TRACE_ENV);
  if (tpath && *tpath) {
    nugget_trace = fopen(tpath, "wb");
    if (!nugget_trace) nugget_die("cannot open trace output");
    setvbuf(nugget_trace, NULL, _IOFBF, 1 << 20);
  }
  nugget_state = NUGGET_OPEN;
  atexit(nugget_atexit);
}

void __nugget_init(void) {
  NUGGET_LOCK();
  if (nugget_state == NUGGET_FRESH) nugget_open();
  NUGGET_UNLOCK();
}

void __nugget_fini(void) { nugget_atexit(); }

uint64_t __nugget_counter_value(void) { return nugget_counter; }

void __nugget_bb_hook(uint64_t bb, uint64_t len) {
  NUGGET_LOCK();
  if (__builtin_expect(nugget_state != NUGGET_OPEN, 0)) {
    if (nugget_state == NUGGET_DONE) {
      NUGGET_UNLOCK();
      return;
    }
    nugget_open();
  }
  if (__builtin_expect(bb >= NUGGET_BLOCK_COUNT, 0)) nugget_die("block id out of range");
  nugget_counter += len;
  if (nugget_bbv[bb]++ == 0) nugget_touched[nugget_ntouched++] = bb;
  nugget_cstamp[bb] = nugget_counter;
  if (nugget_trace) nugget_put_u64(nugget_trace, bb);
  if (nugget_counter - nugget_interval_start >= NUGGET_INTERVAL_SIZE) nugget_emit(0u);
  NUGGET_UNLOCK();
}
"#;

/// The runtime-support translation unit, with interval size, block count and
/// locking mode baked in.
pub fn emit_runtime_support(config: &AnalysisConfig, block_count: u64) -> String {
    RUNTIME_TEMPLATE
        .replace("@INTERVAL_SIZE@", &config.interval_size.to_string())
        .replace("@BLOCK_COUNT@", &block_count.to_string())
        .replace("@THREAD_SAFE@", if config.thread_safe { "1" } else { "0" })
        .replace("@PROFILE_ENV@", &config.profile_path_env)
        .replace("@PROFILE_DEFAULT@", DEFAULT_PROFILE_PATH)
        .replace("@TRACE_ENV@", TRACE_PATH_ENV)
}
