//! Fixture programs and helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard};

use nugget::analyze::{read_trace, AnalysisConfig, PROFILE_PATH_ENV};
use nugget::harness::{Pipeline, ToolchainConfig};
use nugget::ir::BlockTable;
use nugget::nugget::{EVENT_OUT_ENV, ROI_OUT_ENV};
use nugget::profile::ProfileSet;

pub const INTERVAL_SIZE: u64 = 10_000;

pub struct Fixture {
    pub name: &'static str,
    pub sources: &'static [&'static str],
    /// Small input used for traced analysis runs.
    pub args: &'static [&'static str],
    /// Input that runs for a measurable time.
    pub heavy_args: &'static [&'static str],
    pub threaded: bool,
}

impl Fixture {
    pub fn args(&self) -> Vec<String> {
        self.args.iter().map(|s| s.to_string()).collect()
    }

    pub fn heavy_args(&self) -> Vec<String> {
        self.heavy_args.iter().map(|s| s.to_string()).collect()
    }

    pub fn source_paths(&self) -> Vec<PathBuf> {
        self.sources.iter().map(|s| fixture_dir().join(s)).collect()
    }
}

macro_rules! fixture {
    ($name:literal, [$($src:literal),+], [$($arg:literal),*], [$($heavy:literal),*], $threaded:literal) => {
        Fixture {
            name: $name,
            sources: &[$($src),+],
            args: &[$($arg),*],
            heavy_args: &[$($heavy),*],
            threaded: $threaded,
        }
    };
}

pub const FIXTURES: &[Fixture] = &[
    fixture!("loops", ["loops.c"], ["200"], ["400000"], false),
    fixture!("fib", ["fib.c"], ["18"], ["32"], false),
    fixture!("branchy", ["branchy.c"], ["20000"], ["8000000"], false),
    fixture!("quicksort", ["quicksort.c"], ["5000"], ["2000000"], false),
    fixture!("sieve", ["sieve.c"], ["30000"], ["30000000"], false),
    fixture!("strings", ["strings.c"], ["3000"], ["400000"], false),
    fixture!("list", ["list.c"], ["4000"], ["1000000"], false),
    fixture!("float_kernel", ["float_kernel.c"], ["60"], ["40000"], false),
    fixture!("vm", ["vm.c"], ["3000"], ["5000000"], false),
    fixture!(
        "multi",
        ["multi_main.c", "multi_util.c"],
        ["3000"],
        ["2000000"],
        false
    ),
    fixture!(
        "phases",
        ["phases.c"],
        ["100", "60", "40"],
        ["200000", "120000", "80000"],
        false
    ),
    fixture!("threads", ["threads.c"], ["3000"], ["3000000"], true),
];

pub fn fixture(name: &str) -> &'static Fixture {
    FIXTURES
        .iter()
        .find(|f| f.name == name)
        .unwrap_or_else(|| panic!("no fixture {name}"))
}

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Fresh, empty scratch directory under the target directory.
pub fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("create scratch dir");
    dir
}

/// Serializes wall-clock measurements within one test binary.
pub fn timing_lock() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn prepared(fx: &Fixture, dir: &Path) -> Pipeline {
    let p = Pipeline::new(ToolchainConfig::default(), dir);
    p.prepare(&fx.source_paths(), Some(fx.name))
        .expect("prepare");
    p
}

/// A fixture analyzed with a recorded block trace.
pub struct Analyzed {
    pub fixture: &'static Fixture,
    pub pipeline: Pipeline,
    pub table: BlockTable,
    pub profiles: ProfileSet,
    pub profile_bytes: Vec<u8>,
    pub trace: Vec<u64>,
}

pub fn analyze(fx: &'static Fixture, dir: &Path, interval_size: u64) -> Analyzed {
    let pipeline = prepared(fx, dir);
    let config = AnalysisConfig::new(interval_size)
        .unwrap()
        .thread_safe(fx.threaded);
    let bin = pipeline
        .build_analysis(&config, "-O2")
        .expect("build analysis");
    let profile = dir.join("nugget.profile");
    let trace_path = dir.join("trace.bin");
    let profiles = pipeline
        .run_analysis(&bin, &fx.args(), &profile, Some(&trace_path))
        .expect("run analysis");
    Analyzed {
        fixture: fx,
        table: BlockTable::read_map(&dir.join("bbid.map")).unwrap(),
        profile_bytes: std::fs::read(&profile).unwrap(),
        trace: read_trace(&trace_path).unwrap(),
        profiles,
        pipeline,
    }
}

/// Global instruction counter right after the `required`-th execution of
/// `bb`, found by walking the block trace.
pub fn replay_to(trace: &[u64], table: &BlockTable, bb: u64, required: u64) -> Option<u64> {
    let mut counter = 0u64;
    let mut seen = 0u64;
    for &b in trace {
        counter += table.inst_count(b).expect("traced block in table");
        if b == bb {
            seen += 1;
            if seen == required {
                return Some(counter);
            }
        }
    }
    None
}

/// Executions per block over the whole trace.
pub fn trace_counts(trace: &[u64]) -> BTreeMap<u64, u64> {
    let mut m = BTreeMap::new();
    for &b in trace {
        *m.entry(b).or_insert(0) += 1;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub what: String,
    pub interval_id: u64,
    pub counter: Option<u64>,
}

/// Output of one nugget run: exit code, ROI file and event lines.
pub struct NuggetOutcome {
    pub code: Option<i32>,
    pub roi: String,
    pub events: Vec<Event>,
}

pub fn run_nugget_binary(bin: &Path, args: &[String], scratch: &Path) -> NuggetOutcome {
    let roi = scratch.join("roi.txt");
    let events = scratch.join("events.txt");
    let profile = scratch.join("side.profile");
    for f in [&roi, &events, &profile] {
        let _ = std::fs::remove_file(f);
    }
    let status = Command::new(bin)
        .args(args)
        .env(ROI_OUT_ENV, &roi)
        .env(EVENT_OUT_ENV, &events)
        .env(PROFILE_PATH_ENV, &profile)
        .output()
        .expect("spawn nugget");
    let events = std::fs::read_to_string(&events)
        .unwrap_or_default()
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            Event {
                what: f[0].to_string(),
                interval_id: f[1].parse().unwrap(),
                counter: f[2].parse().ok(),
            }
        })
        .collect();
    NuggetOutcome {
        code: status.status.code(),
        roi: std::fs::read_to_string(&roi).unwrap_or_default(),
        events,
    }
}

/// Function owning each block.
pub fn block_functions(table: &BlockTable) -> Vec<String> {
    table
        .entries
        .iter()
        .map(|e| e.function_name.clone())
        .collect()
}
