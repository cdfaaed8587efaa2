use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use scalebench_core::backends::{self, BackendId, Chunking, Primitive, DEFAULT_SORT_CUTOFF};
use scalebench_core::harness::{DEFAULT_REPS, DEFAULT_WARMUPS};
use scalebench_core::kernels::KernelRegistry;
use scalebench_core::placement::Allocator;
use scalebench_core::report::{self, Artifact, Format, ReportOptions};
use scalebench_core::results::{PointKey, PointRecord, ResultSet};
use scalebench_core::sweep::{
    self, PlanPoint, PointCheck, PointOutcome, SweepConfig, SweepPlan, Tuning, DEFAULT_MAX_EXP,
    DEFAULT_MIN_EXP,
};
use scalebench_core::Error;

const MAX_THREADS_ENV: &str = "SCALEBENCH_MAX_THREADS";

#[derive(Parser)]
#[command(
    name = "scalebench",
    version,
    about = "Scalability micro-benchmarks for parallel algorithms"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Time every point of a sweep and write a result file.
    Run(RunArgs),
    /// Render tables from one or more result files.
    Report(ReportArgs),
    /// List registered kernels and compiled-in backends.
    List,
    /// Run and verify every point of a sweep once, without timing.
    Verify(PlanArgs),
    /// Measure one point read as JSON from stdin (used by `run --isolate`).
    #[command(name = "__point", hide = true)]
    Point,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Kernels to run (comma separated).
    #[arg(long, value_delimiter = ',', default_values_t = scalebench_core::kernels::BUILTIN_KERNELS.map(String::from))]
    kernels: Vec<String>,
    /// Backends to run (comma separated); defaults to every compiled-in backend.
    #[arg(long, value_delimiter = ',')]
    backends: Vec<BackendId>,
    /// Largest thread count; overrides the environment variable SCALEBENCH_MAX_THREADS.
    #[arg(long)]
    max_threads: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MIN_EXP)]
    min_exp: u32,
    #[arg(long, default_value_t = DEFAULT_MAX_EXP)]
    max_exp: u32,
    /// Allocators to compare: first_touch, default.
    #[arg(long, value_delimiter = ',', default_value = "first_touch")]
    allocators: Vec<Allocator>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Skip points whose estimated footprint exceeds this (e.g. 512M, 8G).
    #[arg(long, value_parser = parse_bytes)]
    memory_budget: Option<u64>,
    /// Inputs shorter than this run on the sequential path (flagged as fallback).
    #[arg(long, default_value_t = 0)]
    seq_threshold: usize,
    #[arg(long, default_value = "static")]
    chunking: Chunking,
    #[arg(long, default_value_t = 1)]
    min_chunk: usize,
    /// Block size below which the pool sort switches to a sequential sort.
    #[arg(long, default_value_t = DEFAULT_SORT_CUTOFF)]
    sort_cutoff: usize,
    /// Run unsupported primitives sequentially instead of skipping them.
    #[arg(long)]
    fallback_unsupported: bool,
    /// Allow thread counts above the number of logical cores.
    #[arg(long)]
    oversubscribe: bool,
    /// Pin worker k to CPU k.
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    pin: Toggle,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    plan: PlanArgs,
    #[arg(long, default_value_t = DEFAULT_REPS)]
    reps: usize,
    #[arg(long, default_value_t = DEFAULT_WARMUPS)]
    warmup: usize,
    #[arg(long, default_value = "results.json")]
    out: PathBuf,
    /// Measure each point in a fresh process.
    #[arg(long)]
    isolate: bool,
    /// Do not print per-point progress.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Result files; records are merged before rendering.
    #[arg(required = true, num_args = 1..=2)]
    inputs: Vec<PathBuf>,
    /// Tables to emit: speedup, efficiency, allocator, sweet-spot, plot.
    #[arg(long, value_delimiter = ',')]
    artifacts: Vec<Artifact>,
    #[arg(long, default_value = "md")]
    format: Format,
    /// Output file, or a directory when several CSV artifacts are requested.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Problem size for the per-size tables (default: largest measured).
    #[arg(long)]
    size: Option<u64>,
    /// Efficiency threshold.
    #[arg(long, default_value_t = scalebench_core::analysis::DEFAULT_EFFICIENCY_THRESHOLD)]
    threshold: f64,
}

/// A problem with the invocation itself; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_bytes(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (digits, unit) = t.split_at(split);
    let value: u64 = digits
        .parse()
        .map_err(|_| format!("invalid byte count `{s}`"))?;
    let shift = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 0,
        "k" | "kb" | "kib" => 10,
        "m" | "mb" | "mib" => 20,
        "g" | "gb" | "gib" => 30,
        "t" | "tb" | "tib" => 40,
        other => return Err(format!("unknown unit `{other}` in `{s}`")),
    };
    value
        .checked_mul(1 << shift)
        .ok_or_else(|| format!("byte count `{s}` overflows"))
}

fn resolve_max_threads(flag: Option<usize>) -> anyhow::Result<(usize, String)> {
    if let Some(t) = flag {
        return Ok((t, "flag".into()));
    }
    match std::env::var(MAX_THREADS_ENV) {
        Ok(v) => {
            let t = v
                .trim()
                .parse()
                .map_err(|_| usage(format!("{MAX_THREADS_ENV}=`{v}` is not a thread count")))?;
            Ok((t, format!("env:{MAX_THREADS_ENV}")))
        }
        Err(_) => Ok((backends::logical_cores(), "detected".into())),
    }
}

fn build_plan(args: &PlanArgs, reps: usize, warmups: usize) -> anyhow::Result<SweepPlan> {
    let (max_threads, source) = resolve_max_threads(args.max_threads)?;
    if max_threads > backends::logical_cores() && !args.oversubscribe {
        return Err(usage(format!(
            "max threads {max_threads} exceeds the {} logical cores; pass --oversubscribe to allow it",
            backends::logical_cores()
        )));
    }
    let defaults = SweepConfig::default();
    let config = SweepConfig {
        kernels: args.kernels.clone(),
        backends: if args.backends.is_empty() {
            defaults.backends.clone()
        } else {
            args.backends.clone()
        },
        max_threads,
        max_threads_source: source,
        min_exp: args.min_exp,
        max_exp: args.max_exp,
        allocators: args.allocators.clone(),
        seed: args.seed,
        reps,
        warmups,
        memory_budget: args.memory_budget.unwrap_or(defaults.memory_budget),
        tuning: Tuning {
            chunking: args.chunking,
            min_chunk: args.min_chunk,
            seq_threshold: args.seq_threshold,
            sort_cutoff: args.sort_cutoff,
        },
        oversubscribe: args.oversubscribe,
        fallback_unsupported: args.fallback_unsupported,
        pin: args.pin == Toggle::On,
    };
    let plan = sweep::build_plan(&config).map_err(|e| usage(e.to_string()))?;
    plan.validate_against(&KernelRegistry::builtin())
        .map_err(|e| usage(e.to_string()))?;
    Ok(plan)
}

fn describe(record: &PointRecord) -> String {
    if record.skipped {
        format!(
            "skipped ({})",
            record.note.as_deref().unwrap_or("no reason")
        )
    } else if !record.valid {
        format!("FAILED ({})", record.note.as_deref().unwrap_or("no detail"))
    } else {
        let median = record.median_ns.unwrap_or(f64::NAN);
        let tag = if record.fallback { " [fallback]" } else { "" };
        format!("median {median:.0} ns{tag}")
    }
}

fn point_key(point: &PlanPoint) -> String {
    format!(
        "{}/{}/t{}/n2^{}/{}",
        point.kernel, point.backend, point.threads, point.size_exp, point.allocator
    )
}

/// Measures a point in a child process so crashes and leaks stay contained.
fn execute_isolated(plan: &SweepPlan, point: &PlanPoint) -> anyhow::Result<PointOutcome> {
    let exe = std::env::current_exe().context("locating own executable")?;
    let mut child = Command::new(exe)
        .arg("__point")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .context("spawning point process")?;
    let request = serde_json::json!({ "plan": plan, "point": point });
    child
        .stdin
        .take()
        .context("point process stdin")?
        .write_all(request.to_string().as_bytes())?;
    let output = child.wait_with_output()?;
    if output.status.success() {
        return serde_json::from_slice(&output.stdout).context("decoding point process output");
    }
    let registry = KernelRegistry::builtin();
    let element = registry
        .get(&point.kernel)
        .map(|k| k.default_element())
        .context("kernel vanished from registry")?;
    let stderr = String::from_utf8_lossy(&output.stderr);
    Ok(PointOutcome {
        record: PointRecord {
            key: PointKey {
                kernel: point.kernel.clone(),
                backend: point.backend,
                threads: point.threads,
                size: point.size() as u64,
                allocator: point.allocator,
                element_type: element,
            },
            reps: plan.config.reps,
            durations_ns: Vec::new(),
            median_ns: None,
            throughput: None,
            valid: false,
            fallback: false,
            skipped: false,
            skip_reason: None,
            note: Some(format!(
                "point process failed ({}): {}",
                output.status,
                stderr.trim()
            )),
        },
        warnings: Vec::new(),
    })
}

fn cmd_point() -> anyhow::Result<ExitCode> {
    let mut input = String::new();
    std::io::stdin().read_to_string(&mut input)?;
    let mut request: serde_json::Value = serde_json::from_str(&input)?;
    let plan: SweepPlan = serde_json::from_value(request["plan"].take())?;
    let point: PlanPoint = serde_json::from_value(request["point"].take())?;
    let outcome = sweep::execute_point(&plan, &point, &KernelRegistry::builtin())?;
    println!("{}", serde_json::to_string(&outcome)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let plan = build_plan(&args.plan, args.reps, args.warmup)?;
    let registry = KernelRegistry::builtin();
    let points = plan.points();
    let total = points.len();
    if !args.quiet {
        eprintln!(
            "running {total} points, threads {:?}, max threads from {}",
            plan.thread_grid, plan.config.max_threads_source
        );
    }
    let mut results = ResultSet::new(sweep::new_metadata(&plan));
    results.metadata.pinned = plan.config.pin;
    for (i, point) in points.iter().enumerate() {
        let outcome = if args.isolate {
            execute_isolated(&plan, point)?
        } else {
            sweep::execute_point(&plan, point, &registry)?
        };
        if !outcome.warnings.is_empty() {
            results.metadata.pinned = false;
            results.metadata.warnings.extend(outcome.warnings);
        }
        if !args.quiet {
            eprintln!(
                "[{}/{total}] {}: {}",
                i + 1,
                point_key(point),
                describe(&outcome.record)
            );
        }
        results.records.push(outcome.record);
    }
    report::save_results(&results, &args.out)?;
    results.metadata.warnings.sort();
    results.metadata.warnings.dedup();
    for warning in &results.metadata.warnings {
        eprintln!("warning: {warning}");
    }

    let failures = results.verification_failures();
    if failures.is_empty() {
        eprintln!(
            "wrote {} records to {}",
            results.records.len(),
            args.out.display()
        );
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("{} point(s) failed verification:", failures.len());
        for record in failures {
            eprintln!(
                "  {}: {}",
                record.key,
                record.note.as_deref().unwrap_or("no detail")
            );
        }
        eprintln!(
            "wrote {} records to {}",
            results.records.len(),
            args.out.display()
        );
        Ok(ExitCode::from(1))
    }
}

fn cmd_verify(args: PlanArgs) -> anyhow::Result<ExitCode> {
    let plan = build_plan(&args, 1, 0)?;
    let mut failed = 0usize;
    let checks = sweep::verify_plan_with(&plan, &KernelRegistry::builtin(), |point, check| {
        let status = match check {
            PointCheck::Passed => "ok".to_owned(),
            PointCheck::Skipped(reason) => format!("skipped ({reason:?})"),
            PointCheck::Failed(why) => {
                failed += 1;
                format!("FAILED: {why}")
            }
        };
        println!("{}: {status}", point_key(point));
    })?;
    println!("{} points checked, {failed} failed", checks.len());
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_list() -> ExitCode {
    let registry = KernelRegistry::builtin();
    println!("kernels:");
    for id in registry.ids() {
        let kernel = registry.get(id).expect("listed kernel");
        println!(
            "  {id:<16} {:<8} default element {}",
            kernel.primitive(),
            kernel.default_element()
        );
    }
    println!("backends:");
    for d in backends::list_backends() {
        let supported: Vec<String> = [
            Primitive::Map,
            Primitive::Reduce,
            Primitive::Scan,
            Primitive::Sort,
            Primitive::Find,
        ]
        .into_iter()
        .filter(|p| d.supports(*p))
        .map(|p| p.to_string())
        .collect();
        println!(
            "  {:<8} {:<22} {}",
            d.id.name(),
            d.name,
            supported.join(", ")
        );
    }
    ExitCode::SUCCESS
}

fn write_output(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<ExitCode> {
    let sets = args
        .inputs
        .iter()
        .map(|p| report::load_results(p))
        .collect::<Result<Vec<_>, _>>()?;
    let results = report::merge_results(sets)?;
    let artifacts = if args.artifacts.is_empty() {
        let mut chosen = vec![Artifact::Speedup, Artifact::Efficiency, Artifact::SweetSpot];
        if results.allocators().len() > 1 {
            chosen.push(Artifact::Allocator);
        }
        chosen
    } else {
        args.artifacts.clone()
    };
    if !(args.threshold > 0.0 && args.threshold <= 1.0) {
        bail!(usage(format!(
            "threshold {} must be in (0, 1]",
            args.threshold
        )));
    }
    let opts = ReportOptions {
        size: args.size,
        threshold: args.threshold,
    };

    let mut rendered = Vec::new();
    for artifact in &artifacts {
        rendered.push((
            *artifact,
            report::render(&results, *artifact, args.format, &opts)?,
        ));
    }
    if args.format == Format::Csv && rendered.len() > 1 {
        if let Some(dir) = &args.out {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            for (artifact, text) in &rendered {
                write_output(Some(&dir.join(format!("{artifact}.csv"))), text)?;
            }
            return Ok(ExitCode::SUCCESS);
        }
    }
    let text: Vec<String> = rendered.into_iter().map(|(_, t)| t).collect();
    write_output(args.out.as_deref(), &text.join("\n"))?;
    Ok(ExitCode::SUCCESS)
}

fn exit_status(err: &anyhow::Error) -> u8 {
    let usage_error = err.chain().any(|cause| {
        cause.downcast_ref::<Usage>().is_some()
            || matches!(
                cause.downcast_ref::<Error>(),
                Some(Error::InvalidArgument(_) | Error::PlanValidation(_))
            )
    });
    if usage_error {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Report(args) => cmd_report(args),
        Cmd::List => Ok(cmd_list()),
        Cmd::Verify(args) => cmd_verify(args),
        Cmd::Point => cmd_point(),
    };
    outcome.unwrap_or_else(|err| {
        eprintln!("error: {err:#}");
        ExitCode::from(exit_status(&err))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_counts() {
        assert_eq!(parse_bytes("1024"), Ok(1024));
        assert_eq!(parse_bytes("512M"), Ok(512 << 20));
        assert_eq!(parse_bytes("8GiB"), Ok(8 << 30));
        assert!(parse_bytes("lots").is_err());
        assert!(parse_bytes("3X").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
