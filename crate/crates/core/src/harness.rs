//! Pipeline orchestration: external toolchain, timed runs, extrapolation and
//! reports.
//!
//! All artifacts of one workload live in a single output directory:
//!
//! | file | stage |
//! |---|---|
//! | `base.ll`, `workload.json` | prepare |
//! | `bbid.map`, `analysis.ll`, `analysis_rt.c`, `analysis.bin`, `nugget.profile` | analyze |
//! | `selection.json` | select |
//! | `nuggets.json`, `nugget_<id>.ll`, `nugget_<id>_rt.c`, `nugget_<id>.bin` | nugget |
//! | `base.bin`, `report.json`, `report.csv` | validate |

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analyze::{
    emit_runtime_support, instrument_for_analysis, AnalysisConfig, PROFILE_PATH_ENV, TRACE_PATH_ENV,
};
use crate::error::{Error, Result};
use crate::ir::{build_block_table, BlockTable, IRModule};
use crate::marker::{build_nugget_spec, read_specs, write_specs, NuggetSpec};
use crate::nugget::{
    emit_marker_runtime, instrument_nugget, parse_roi_line, NuggetBuild, RoiAction,
    MARKER_MISSED_EXIT, ROI_OUT_ENV,
};
use crate::profile::{read_profile, ProfileSet};
use crate::selection::{select_kmeans, select_random, Method, SelectionResult};
use crate::write_atomic;

pub const DEFAULT_REPS: usize = 3;
pub const DEFAULT_BACKEND_OPT: &str = "-O2";

/// Argv templates for the external toolchain.
///
/// Placeholders: `{input}` and `{output}` are single paths, `{inputs}`
/// expands to one argument per input, `{opt}` is the backend optimization flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolchainConfig {
    pub source_to_ir: Vec<String>,
    pub ir_link: Vec<String>,
    pub ir_optimize: Vec<String>,
    pub compile_runtime: Vec<String>,
    /// Compiles IR plus runtime objects into an executable. Must not run the
    /// IR optimizer again: the base IR carries memory attributes that would let
    /// it move or drop hook calls.
    pub compile_link: Vec<String>,
    pub backend_opt: String,
}

fn argv(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).collect()
}

impl Default for ToolchainConfig {
    fn default() -> Self {
        ToolchainConfig {
            source_to_ir: argv(&[
                "clang",
                "-O2",
                "-Xclang",
                "-disable-llvm-passes",
                "-S",
                "-emit-llvm",
                "{input}",
                "-o",
                "{output}",
            ]),
            ir_link: argv(&[
                // A relocatable link keeps every symbol, so nothing is
                // internalized or dropped before the single optimization step.
                "clang",
                "-flto",
                "-fuse-ld=lld",
                "-nostdlib",
                "-no-pie",
                "-Wl,-r",
                "-Wl,--plugin-opt=emit-llvm",
                "-Wl,--lto-O0",
                "{inputs}",
                "-o",
                "{output}",
            ]),
            ir_optimize: argv(&[
                "clang",
                "-O2",
                "-S",
                "-emit-llvm",
                "{input}",
                "-o",
                "{output}",
            ]),
            compile_runtime: argv(&["clang", "-O2", "-c", "{input}", "-o", "{output}"]),
            compile_link: argv(&[
                "clang",
                "{opt}",
                "-Xclang",
                "-disable-llvm-passes",
                "-Wno-override-module",
                "{inputs}",
                "-o",
                "{output}",
                "-lm",
                "-pthread",
            ]),
            backend_opt: DEFAULT_BACKEND_OPT.to_string(),
        }
    }
}

impl ToolchainConfig {
    pub fn load(path: &Path) -> Result<ToolchainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    fn templates(&self) -> [(&'static str, &[String]); 5] {
        [
            ("source_to_ir", &self.source_to_ir),
            ("ir_link", &self.ir_link),
            ("ir_optimize", &self.ir_optimize),
            ("compile_runtime", &self.compile_runtime),
            ("compile_link", &self.compile_link),
        ]
    }

    /// Every template is non-empty and names a resolvable program.
    pub fn check(&self) -> Result<()> {
        for (name, t) in self.templates() {
            let tool = t
                .first()
                .ok_or_else(|| Error::Config(format!("toolchain template {name} is empty")))?;
            if resolve_program(tool).is_none() {
                return Err(Error::ToolchainFailure {
                    tool: tool.clone(),
                    diagnostics: format!("{tool}: not found (template {name})"),
                });
            }
        }
        Ok(())
    }
}

fn resolve_program(tool: &str) -> Option<PathBuf> {
    let p = Path::new(tool);
    if p.components().count() > 1 {
        return p.is_file().then(|| p.to_path_buf());
    }
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths)
            .map(|d| d.join(tool))
            .find(|c| c.is_file())
    })
}

/// Substitutes placeholders into an argv template.
pub fn expand_template(
    template: &[String],
    inputs: &[&Path],
    output: &Path,
    opt: &str,
) -> Vec<OsString> {
    let mut out = Vec::with_capacity(template.len() + inputs.len());
    for arg in template {
        match arg.as_str() {
            "{inputs}" => out.extend(inputs.iter().map(|p| p.as_os_str().to_owned())),
            "{input}" => out.push(inputs.first().map_or_else(OsString::new, |p| p.into())),
            "{output}" => out.push(output.into()),
            "{opt}" => out.push(opt.into()),
            _ => out.push(arg.into()),
        }
    }
    out
}

fn run_tool(template: &[String], inputs: &[&Path], output: &Path, opt: &str) -> Result<()> {
    let args = expand_template(template, inputs, output, opt);
    let (tool, rest) = args
        .split_first()
        .ok_or_else(|| Error::Config("empty toolchain template".into()))?;
    let tool_name = tool.to_string_lossy().into_owned();
    let out = Command::new(tool)
        .args(rest)
        .stdin(Stdio::null())
        .output()
        .map_err(|e| Error::ToolchainFailure {
            tool: tool_name.clone(),
            diagnostics: e.to_string(),
        })?;
    if !out.status.success() {
        return Err(Error::ToolchainFailure {
            tool: tool_name,
            diagnostics: format!(
                "{}\n{}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim_end()
            ),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub name: String,
    /// Program arguments used for the analysis run and for validation.
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default)]
    pub interval_size: u64,
    #[serde(default)]
    pub thread_safe: bool,
}

/// One workload's output directory plus the toolchain that fills it.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub toolchain: ToolchainConfig,
    pub out_dir: PathBuf,
}

impl Pipeline {
    pub fn new(toolchain: ToolchainConfig, out_dir: impl Into<PathBuf>) -> Pipeline {
        Pipeline {
            toolchain,
            out_dir: out_dir.into(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn base_ir(&self) -> PathBuf {
        self.path("base.ll")
    }

    pub fn nugget_binary(&self, interval_id: u64) -> PathBuf {
        self.path(&format!("nugget_{interval_id}.bin"))
    }

    fn ensure_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))
    }

    /// Scratch path inside the output directory. Names are fixed, not
    /// per-process, because toolchain outputs embed their input paths.
    fn tmp(&self, name: &str) -> PathBuf {
        self.path(&format!(".tmp.{name}"))
    }

    fn commit(&self, tmp: &Path, name: &str) -> Result<PathBuf> {
        let dst = self.path(name);
        std::fs::rename(tmp, &dst).map_err(|e| Error::io(&dst, e))?;
        Ok(dst)
    }

    pub fn workload(&self) -> Result<Workload> {
        let path = self.path("workload.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }

    fn write_workload(&self, w: &Workload) -> Result<()> {
        let mut text = serde_json::to_string_pretty(w).expect("workload serializes");
        text.push('\n');
        write_atomic(&self.path("workload.json"), text.as_bytes())
    }

    /// Source files to one optimized base IR module: per-source IR, one link
    /// when there are several inputs, then a single optimization pass.
    /// Inputs ending in `.ll` or `.bc` skip the first step.
    pub fn prepare(&self, sources: &[PathBuf], name: Option<&str>) -> Result<PathBuf> {
        if sources.is_empty() {
            return Err(Error::Config("no input sources".into()));
        }
        self.toolchain.check()?;
        self.ensure_dir()?;
        let mut irs = Vec::new();
        let mut temps = Vec::new();
        for (i, src) in sources.iter().enumerate() {
            let is_ir = matches!(src.extension().and_then(|e| e.to_str()), Some("ll" | "bc"));
            if is_ir {
                irs.push(src.clone());
            } else {
                let out = self.tmp(&format!("src{i}.ll"));
                run_tool(&self.toolchain.source_to_ir, &[src], &out, "")?;
                irs.push(out.clone());
                temps.push(out);
            }
        }
        let to_optimize = if irs.len() > 1 {
            let linked = self.tmp("linked.bc");
            let refs: Vec<&Path> = irs.iter().map(|p| p.as_path()).collect();
            run_tool(&self.toolchain.ir_link, &refs, &linked, "")?;
            temps.push(linked.clone());
            linked
        } else {
            irs[0].clone()
        };
        let base_tmp = self.tmp("base.ll");
        let result = run_tool(&self.toolchain.ir_optimize, &[&to_optimize], &base_tmp, "");
        for t in &temps {
            let _ = std::fs::remove_file(t);
        }
        result?;
        // Reject anything the IR model cannot represent before it becomes the
        // immutable input of every later stage.
        let base_text = std::fs::read_to_string(&base_tmp).map_err(|e| Error::io(&base_tmp, e))?;
        crate::ir::parse_module(&base_text)?;
        let base = self.commit(&base_tmp, "base.ll")?;
        let name = name.map(str::to_string).unwrap_or_else(|| {
            sources[0]
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "workload".into())
        });
        self.write_workload(&Workload {
            name,
            args: Vec::new(),
            interval_size: 0,
            thread_safe: false,
        })?;
        Ok(base)
    }

    pub fn load_base(&self) -> Result<(IRModule, BlockTable)> {
        let module = IRModule::from_file(&self.base_ir())?;
        let table = build_block_table(&module);
        Ok((module, table))
    }

    /// Compiles `ir` together with generated runtime translation units.
    pub fn compile(&self, ir: &Path, runtimes: &[&Path], output: &Path, opt: &str) -> Result<()> {
        let mut objs = Vec::with_capacity(runtimes.len());
        let mut result = Ok(());
        for rt in runtimes {
            let obj = self.tmp(&format!(
                "{}.o",
                rt.file_name().unwrap_or_default().to_string_lossy()
            ));
            result = run_tool(&self.toolchain.compile_runtime, &[rt], &obj, opt);
            objs.push(obj);
            if result.is_err() {
                break;
            }
        }
        let bin_tmp = self.tmp("link.bin");
        if result.is_ok() {
            let mut inputs = vec![ir];
            inputs.extend(objs.iter().map(|o| o.as_path()));
            result = run_tool(&self.toolchain.compile_link, &inputs, &bin_tmp, opt);
        }
        for o in &objs {
            let _ = std::fs::remove_file(o);
        }
        result?;
        std::fs::rename(&bin_tmp, output).map_err(|e| Error::io(output, e))
    }

    /// Builds the analysis binary from `base.ll` and writes `bbid.map`,
    /// `analysis.ll` and `analysis_rt.c`.
    pub fn build_analysis(&self, config: &AnalysisConfig, opt: &str) -> Result<PathBuf> {
        let (module, table) = self.load_base()?;
        table.write_map(&self.path("bbid.map"))?;
        let instrumented = instrument_for_analysis(&module, &table, config)?;
        instrumented.write_to(&self.path("analysis.ll"))?;
        let rt = emit_runtime_support(config, table.len() as u64);
        write_atomic(&self.path("analysis_rt.c"), rt.as_bytes())?;
        let bin = self.path("analysis.bin");
        self.compile(
            &self.path("analysis.ll"),
            &[&self.path("analysis_rt.c")],
            &bin,
            opt,
        )?;
        Ok(bin)
    }

    /// Runs an analysis binary; the profile lands at `profile_out`.
    pub fn run_analysis(
        &self,
        binary: &Path,
        args: &[String],
        profile_out: &Path,
        trace_out: Option<&Path>,
    ) -> Result<ProfileSet> {
        let table = BlockTable::read_map(&self.path("bbid.map"))?;
        let tmp = self.tmp("profile");
        let mut cmd = Command::new(binary);
        cmd.args(args)
            .env(PROFILE_PATH_ENV, &tmp)
            .stdout(Stdio::null());
        if let Some(t) = trace_out {
            let _ = std::fs::remove_file(t);
            cmd.env(TRACE_PATH_ENV, t);
        }
        let out = cmd
            .stderr(Stdio::piped())
            .output()
            .map_err(|e| Error::io(binary, e))?;
        if !out.status.success() {
            let _ = std::fs::remove_file(&tmp);
            return Err(Error::NonZeroExit {
                program: binary.display().to_string(),
                status: out.status.to_string(),
            });
        }
        let profiles = read_profile(&tmp, &table)?;
        std::fs::rename(&tmp, profile_out).map_err(|e| Error::io(profile_out, e))?;
        Ok(profiles)
    }

    /// The `analyze` stage. Threading support is switched on when requested or
    /// when the module creates threads.
    pub fn analyze(
        &self,
        interval_size: u64,
        args: &[String],
        thread_safe: bool,
    ) -> Result<ProfileSet> {
        self.toolchain.check()?;
        let (module, _) = self.load_base()?;
        let thread_safe = thread_safe || uses_threads(&module);
        let config = AnalysisConfig::new(interval_size)?.thread_safe(thread_safe);
        let bin = self.build_analysis(&config, &self.toolchain.backend_opt)?;
        let profiles = self.run_analysis(&bin, args, &self.path("nugget.profile"), None)?;
        let mut w = self.workload()?;
        w.args = args.to_vec();
        w.interval_size = interval_size;
        w.thread_safe = thread_safe;
        self.write_workload(&w)?;
        Ok(profiles)
    }

    pub fn load_profiles(&self) -> Result<ProfileSet> {
        let table = BlockTable::read_map(&self.path("bbid.map"))?;
        read_profile(&self.path("nugget.profile"), &table)
    }

    /// The `select` stage. `samples` is n for random sampling and the maximum
    /// cluster count for k-means.
    pub fn select(&self, method: Method, samples: usize, seed: u64) -> Result<SelectionResult> {
        let profiles = self.load_profiles()?;
        let sel = match method {
            Method::Random => select_random(&profiles, samples, seed)?,
            Method::KMeans => select_kmeans(&profiles, samples, seed)?,
        };
        sel.write(&self.path("selection.json"))?;
        Ok(sel)
    }

    /// The `nugget` stage: marker specs plus one binary per selected interval.
    pub fn nuggets(
        &self,
        warmup_intervals: u64,
        search_distance: u64,
        action: RoiAction,
    ) -> Result<Vec<NuggetSpec>> {
        self.toolchain.check()?;
        let profiles = self.load_profiles()?;
        let selection = SelectionResult::read(&self.path("selection.json"))?;
        let specs = build_nugget_spec(&profiles, &selection, warmup_intervals, search_distance)?;
        write_specs(&specs, &self.path("nuggets.json"))?;
        let (module, table) = self.load_base()?;
        let thread_safe = self.workload()?.thread_safe || uses_threads(&module);
        for spec in &specs {
            self.build_nugget(&module, &table, spec, action, thread_safe)?;
        }
        Ok(specs)
    }

    /// Emits and compiles one nugget.
    pub fn build_nugget(
        &self,
        module: &IRModule,
        table: &BlockTable,
        spec: &NuggetSpec,
        action: RoiAction,
        thread_safe: bool,
    ) -> Result<PathBuf> {
        let build = instrument_nugget(module, table, spec, action)?;
        self.emit_and_compile(
            &build,
            &format!("nugget_{}", spec.interval_id),
            thread_safe,
            &[],
        )
    }

    /// Builds a nugget on top of the analysis instrumentation (`analysis.ll`
    /// and `analysis_rt.c` from [`Pipeline::build_analysis`]). Its
    /// announcements carry the global instruction counter, so the ROI span can
    /// be checked against the profile's boundaries.
    pub fn build_counting_nugget(&self, spec: &NuggetSpec, thread_safe: bool) -> Result<PathBuf> {
        let table = BlockTable::read_map(&self.path("bbid.map"))?;
        let analysis = IRModule::from_file(&self.path("analysis.ll"))?;
        let build = instrument_nugget(&analysis, &table, spec, RoiAction::Announce)?;
        let stem = format!("counting_{}", spec.interval_id);
        self.emit_and_compile(&build, &stem, thread_safe, &[&self.path("analysis_rt.c")])
    }

    fn emit_and_compile(
        &self,
        build: &NuggetBuild,
        stem: &str,
        thread_safe: bool,
        extra_runtimes: &[&Path],
    ) -> Result<PathBuf> {
        let ll = self.path(&format!("{stem}.ll"));
        build.module_out.write_to(&ll)?;
        let rt = self.path(&format!("{stem}_rt.c"));
        write_atomic(&rt, emit_marker_runtime(build, thread_safe).as_bytes())?;
        let bin = self.path(&format!("{stem}.bin"));
        let mut runtimes = vec![rt.as_path()];
        runtimes.extend_from_slice(extra_runtimes);
        self.compile(&ll, &runtimes, &bin, &self.toolchain.backend_opt)?;
        Ok(bin)
    }

    /// Compiles the unmodified base IR with the nugget backend settings.
    pub fn build_base_binary(&self) -> Result<PathBuf> {
        let rt = self.path("base_rt.c");
        write_atomic(&rt, b"/* Intentionally empty. */\n")?;
        let bin = self.path("base.bin");
        self.compile(&self.base_ir(), &[&rt], &bin, &self.toolchain.backend_opt)?;
        Ok(bin)
    }

    /// The `validate` stage: ground truth from `base.bin`, one ROI time per
    /// nugget, then extrapolation.
    pub fn validate(&self, reps: usize) -> Result<ValidationReport> {
        if reps == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        self.toolchain.check()?;
        let workload = self.workload()?;
        let profiles = self.load_profiles()?;
        let selection = SelectionResult::read(&self.path("selection.json"))?;
        let specs = read_specs(&self.path("nuggets.json"))?;

        let base = self.build_base_binary()?;
        let roi_file = self.tmp("roi");
        // Rounds interleave the full run with every nugget so slow drift in
        // machine speed hits truth and samples alike.
        let mut truth_samples = Vec::with_capacity(reps);
        let mut rows: Vec<NuggetRow> = specs
            .iter()
            .map(|s| NuggetRow {
                interval_id: s.interval_id,
                weight: s.weight,
                roi_ns: 0,
                roi_samples_ns: Vec::with_capacity(reps),
                status: RowStatus::Ok,
            })
            .collect();
        for _ in 0..reps {
            truth_samples.extend(run_and_time(&base, &workload.args, 1)?.samples_ns);
            for row in rows.iter_mut().filter(|r| r.status == RowStatus::Ok) {
                let run = run_nugget(
                    &self.nugget_binary(row.interval_id),
                    &workload.args,
                    &roi_file,
                    1,
                )?;
                row.status = run.status;
                row.roi_samples_ns.extend(run.samples_ns);
            }
        }
        for row in rows.iter_mut().filter(|r| r.status == RowStatus::Ok) {
            row.roi_ns = median(&row.roi_samples_ns);
        }
        let truth = Timing {
            median_ns: median(&truth_samples),
            samples_ns: truth_samples,
        };
        let report = ValidationReport::assemble(
            &workload.name,
            &selection,
            &profiles,
            truth,
            rows,
            MachineDescriptor::current(),
        )?;
        report.write(&self.path("report.json"), &self.path("report.csv"))?;
        Ok(report)
    }
}

/// True when the module spawns threads, in which case runtimes must be
/// thread-safe.
pub fn uses_threads(module: &IRModule) -> bool {
    ["pthread_create", "thrd_create"]
        .iter()
        .any(|s| module.has_symbol_declared(s))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub samples_ns: Vec<u64>,
    pub median_ns: u64,
}

/// Median of the samples; the mean of the two middle values for even counts.
pub fn median(samples: &[u64]) -> u64 {
    assert!(!samples.is_empty(), "median of no samples");
    let mut s = samples.to_vec();
    s.sort_unstable();
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        ((s[m - 1] as u128 + s[m] as u128) / 2) as u64
    }
}

/// Runs `binary` `reps` times in sequence, timing each run on the monotonic
/// clock.
pub fn run_and_time(binary: &Path, args: &[String], reps: usize) -> Result<Timing> {
    if reps == 0 {
        return Err(Error::Config("repetitions must be at least 1".into()));
    }
    let mut samples_ns = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        let status = Command::new(binary)
            .args(args)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .status()
            .map_err(|e| Error::io(binary, e))?;
        let ns = t0.elapsed().as_nanos() as u64;
        if !status.success() {
            return Err(Error::NonZeroExit {
                program: binary.display().to_string(),
                status: status.to_string(),
            });
        }
        samples_ns.push(ns);
    }
    let median_ns = median(&samples_ns);
    Ok(Timing {
        samples_ns,
        median_ns,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RowStatus {
    Ok,
    MarkerMissed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NuggetRun {
    pub samples_ns: Vec<u64>,
    pub median_ns: u64,
    pub status: RowStatus,
}

/// Runs a nugget `reps` times; each run must exit 0 with an `OK` ROI record.
/// A missed marker stops the repetitions and is reported, not raised.
pub fn run_nugget(
    binary: &Path,
    args: &[String],
    roi_file: &Path,
    reps: usize,
) -> Result<NuggetRun> {
    if reps == 0 {
        return Err(Error::Config("repetitions must be at least 1".into()));
    }
    let mut samples_ns = Vec::with_capacity(reps);
    for _ in 0..reps {
        let _ = std::fs::remove_file(roi_file);
        let status = Command::new(binary)
            .args(args)
            .env(ROI_OUT_ENV, roi_file)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map_err(|e| Error::io(binary, e))?;
        let text = std::fs::read_to_string(roi_file).unwrap_or_default();
        let _ = std::fs::remove_file(roi_file);
        let record = text.lines().last().and_then(parse_roi_line);
        match (status.code(), record) {
            (Some(0), Some(r)) if r.ok => samples_ns.push(r.roi_ns),
            (Some(MARKER_MISSED_EXIT), _) => {
                return Ok(NuggetRun {
                    samples_ns,
                    median_ns: 0,
                    status: RowStatus::MarkerMissed,
                })
            }
            _ => {
                return Err(Error::NonZeroExit {
                    program: binary.display().to_string(),
                    status: status.to_string(),
                })
            }
        }
    }
    let median_ns = median(&samples_ns);
    Ok(NuggetRun {
        samples_ns,
        median_ns,
        status: RowStatus::Ok,
    })
}

/// predicted = N_full·Σ wᵢ·roiᵢ + (partial/S)·Σ wᵢ·roiᵢ.
pub fn extrapolate_runtime(
    selection: &SelectionResult,
    roi_times: &BTreeMap<u64, u64>,
    profiles: &ProfileSet,
) -> Result<f64> {
    let partial = profiles.partial_interval().map_or(0, |p| p.actual_size);
    extrapolate(
        selection.chosen.iter().map(|c| (c.interval_id, c.weight)),
        roi_times,
        profiles.full_intervals().len() as u64,
        partial,
        profiles.interval_size,
    )
}

fn extrapolate(
    chosen: impl Iterator<Item = (u64, f64)>,
    roi_times: &BTreeMap<u64, u64>,
    full_intervals: u64,
    partial_size: u64,
    interval_size: u64,
) -> Result<f64> {
    let mut per_interval = 0.0;
    for (id, w) in chosen {
        let t = roi_times.get(&id).ok_or(Error::MissingRoi(id))?;
        per_interval += w * *t as f64;
    }
    Ok(full_intervals as f64 * per_interval
        + partial_size as f64 / interval_size as f64 * per_interval)
}

pub fn prediction_error(predicted: f64, truth: f64) -> Result<f64> {
    if truth == 0.0 {
        return Err(Error::ZeroTruth);
    }
    Ok((predicted - truth) / truth)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineDescriptor {
    pub hostname: String,
    pub os: String,
    pub arch: String,
    pub cpu_model: String,
    pub logical_cpus: usize,
}

impl MachineDescriptor {
    pub fn current() -> MachineDescriptor {
        let read = |p: &str| std::fs::read_to_string(p).unwrap_or_default();
        let cpu_model = read("/proc/cpuinfo")
            .lines()
            .find(|l| l.starts_with("model name"))
            .and_then(|l| l.split_once(':'))
            .map(|(_, v)| v.trim().to_string())
            .unwrap_or_else(|| "unknown".into());
        MachineDescriptor {
            hostname: read("/proc/sys/kernel/hostname").trim().to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            cpu_model,
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuggetRow {
    pub interval_id: u64,
    pub weight: f64,
    pub roi_ns: u64,
    pub roi_samples_ns: Vec<u64>,
    pub status: RowStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub workload: String,
    pub method: Method,
    pub seed: u64,
    pub interval_size: u64,
    pub full_intervals: u64,
    pub partial_size: u64,
    pub ground_truth_ns: u64,
    pub ground_truth_samples_ns: Vec<u64>,
    pub nuggets: Vec<NuggetRow>,
    /// False when any nugget row is not `OK`; the prediction fields are then absent.
    pub complete: bool,
    pub predicted_total_ns: Option<f64>,
    pub prediction_error: Option<f64>,
    pub machine: MachineDescriptor,
}

impl ValidationReport {
    pub fn assemble(
        workload: &str,
        selection: &SelectionResult,
        profiles: &ProfileSet,
        truth: Timing,
        nuggets: Vec<NuggetRow>,
        machine: MachineDescriptor,
    ) -> Result<ValidationReport> {
        let mut report = ValidationReport {
            workload: workload.to_string(),
            method: selection.method,
            seed: selection.seed,
            interval_size: profiles.interval_size,
            full_intervals: profiles.full_intervals().len() as u64,
            partial_size: profiles.partial_interval().map_or(0, |p| p.actual_size),
            ground_truth_ns: truth.median_ns,
            ground_truth_samples_ns: truth.samples_ns,
            nuggets,
            complete: false,
            predicted_total_ns: None,
            prediction_error: None,
            machine,
        };
        report.complete = report.nuggets.iter().all(|r| r.status == RowStatus::Ok);
        if report.complete {
            let (predicted, error) = report.recompute()?;
            report.predicted_total_ns = Some(predicted);
            report.prediction_error = Some(error);
        }
        Ok(report)
    }

    /// Prediction and prediction error recomputed from the report's own rows.
    pub fn recompute(&self) -> Result<(f64, f64)> {
        let roi: BTreeMap<u64, u64> = self
            .nuggets
            .iter()
            .filter(|r| r.status == RowStatus::Ok)
            .map(|r| (r.interval_id, r.roi_ns))
            .collect();
        let predicted = extrapolate(
            self.nuggets.iter().map(|r| (r.interval_id, r.weight)),
            &roi,
            self.full_intervals,
            self.partial_size,
            self.interval_size,
        )?;
        let error = prediction_error(predicted, self.ground_truth_ns as f64)?;
        Ok((predicted, error))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("workload,interval_id,weight,roi_ns,status\n");
        for r in &self.nuggets {
            let status = match r.status {
                RowStatus::Ok => "OK",
                RowStatus::MarkerMissed => "MARKER_MISSED",
            };
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                self.workload, r.interval_id, r.weight, r.roi_ns, status
            ));
        }
        s
    }

    pub fn write(&self, json: &Path, csv: &Path) -> Result<()> {
        write_atomic(json, self.to_json().as_bytes())?;
        write_atomic(csv, self.to_csv().as_bytes())
    }

    pub fn read(path: &Path) -> Result<ValidationReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    fn predicted(&self) -> Result<f64> {
        match self.predicted_total_ns {
            Some(p) if self.complete => Ok(p),
            _ => {
                let missing = self
                    .nuggets
                    .iter()
                    .find(|r| r.status != RowStatus::Ok)
                    .map_or(0, |r| r.interval_id);
                Err(Error::MissingRoi(missing))
            }
        }
    }
}

/// (predicted_A/predicted_B − truth_A/truth_B) / (truth_A/truth_B).
pub fn speedup_error(a: &ValidationReport, b: &ValidationReport) -> Result<f64> {
    if a.workload != b.workload {
        return Err(Error::WorkloadMismatch(format!(
            "workloads differ: {} vs {}",
            a.workload, b.workload
        )));
    }
    let picks = |r: &ValidationReport| -> Vec<(u64, u64)> {
        r.nuggets
            .iter()
            .map(|n| (n.interval_id, n.weight.to_bits()))
            .collect()
    };
    if picks(a) != picks(b) {
        return Err(Error::WorkloadMismatch("selections differ".into()));
    }
    let (pa, pb) = (a.predicted()?, b.predicted()?);
    if a.ground_truth_ns == 0 || b.ground_truth_ns == 0 || pb == 0.0 {
        return Err(Error::ZeroTruth);
    }
    let predicted = pa / pb;
    let truth = a.ground_truth_ns as f64 / b.ground_truth_ns as f64;
    Ok((predicted - truth) / truth)
}
