//! `ssnbench` command line.
//!
//! Exit status: 0 ok, 1 usage or I/O error, 2 the oracle (or the
//! enumerator) found a serializability violation.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::bench::{run_bench, Group, WorkloadConfig};
use crate::engine::CommitPath;
use crate::error::{Error, Result};
use crate::oracle::enumerate::{enumerate_interleavings, family, EnumConfig, FAMILIES};
use crate::oracle::graph::Report;
use crate::oracle::script::{replay_with, ReplayConfig, ScheduleScript};
use crate::oracle::trace::{read_trace, write_trace};
use crate::schedulers::{Certifier, Scheme};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VIOLATION: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "ssnbench", version, about = "Multi-version store benchmark, replay and serializability checker")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run the microbenchmark and print statistics.
    Bench(BenchArgs),
    /// Check a trace for dependency cycles.
    Check {
        /// Trace file; `-` or omitted reads stdin.
        path: Option<String>,
    },
    /// Replay a schedule script and print each transaction's outcome.
    Replay(ReplayArgs),
    /// Replay every interleaving of a program family.
    Enumerate(EnumArgs),
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Number of records.
    #[arg(long, default_value_t = 100)]
    db: usize,
    /// Client group, `threads=N,footprint=MIN-MAX,writes=M[,read-only][,read-mostly][,snapshot][,scan]`.
    /// Repeatable. Default: one group `threads=4,footprint=8-12,writes=3`.
    #[arg(long = "group", value_name = "GROUP")]
    groups: Vec<Group>,
    #[arg(long, default_value_t = Scheme::Si)]
    scheme: Scheme,
    #[arg(long, default_value_t = Certifier::Ssn)]
    certifier: Certifier,
    #[arg(long, default_value_t = CommitPath::Parallel)]
    commit: CommitPath,
    /// Staleness threshold for read-mostly clients; 0 tracks every read.
    #[arg(long, default_value_t = 0)]
    threshold: u64,
    /// Take a safe snapshot every N commits; 0 disables the schedule.
    #[arg(long, default_value_t = 0)]
    snapshot_interval: u64,
    /// Offered transactions across all clients.
    #[arg(long, default_value_t = 1000)]
    txns: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Move on after an abort instead of retrying.
    #[arg(long)]
    no_retry: bool,
    #[arg(long, default_value_t = 10_000)]
    retry_cap: u64,
    /// Never write a record the transaction already read.
    #[arg(long)]
    no_rewrite: bool,
    /// Do not yield between operations.
    #[arg(long)]
    no_yield: bool,
    /// Write the trace to PATH, or stdout for `-`.
    #[arg(long, value_name = "PATH")]
    emit_trace: Option<String>,
    /// Write statistics to PATH or `-`. Default: stdout, or stderr when the
    /// trace goes to stdout.
    #[arg(long, value_name = "PATH")]
    stats: Option<String>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    script: PathBuf,
    #[arg(long, default_value_t = Scheme::Si)]
    scheme: Scheme,
    #[arg(long, default_value_t = Certifier::Ssn)]
    certifier: Certifier,
    #[arg(long, default_value_t = CommitPath::Serial)]
    commit: CommitPath,
    /// Record certifier verdicts without aborting.
    #[arg(long)]
    observe: bool,
    /// Write the trace to PATH, or stdout for `-`.
    #[arg(long, value_name = "PATH")]
    emit_trace: Option<String>,
}

#[derive(Args, Debug)]
struct EnumArgs {
    /// Built-in family: write-skew, three-party, rw-chain, repeatable-read, or all.
    #[arg(long, conflicts_with = "file")]
    family: Option<String>,
    /// Script whose per-transaction steps form the programs.
    file: Option<PathBuf>,
    #[arg(long, default_value_t = Scheme::Rc)]
    scheme: Scheme,
    #[arg(long, default_value_t = Certifier::Ssn)]
    certifier: Certifier,
    /// Abort on violations instead of only recording them.
    #[arg(long)]
    enforce: bool,
    /// Print every cyclic history.
    #[arg(long)]
    verbose: bool,
}

enum Sink {
    Stdout,
    Stderr,
    File(File),
}

impl Sink {
    fn open(target: &str) -> Result<Self> {
        Ok(if target == "-" {
            Sink::Stdout
        } else {
            Sink::File(File::create(target)?)
        })
    }

    fn writer(&mut self) -> Box<dyn Write + '_> {
        match self {
            Sink::Stdout => Box::new(io::stdout().lock()),
            Sink::Stderr => Box::new(io::stderr().lock()),
            Sink::File(f) => Box::new(f),
        }
    }
}

fn bench(a: BenchArgs) -> Result<i32> {
    let trace_sink = a.emit_trace.as_deref().map(Sink::open).transpose()?;
    let mut stats_sink = match (&a.stats, &trace_sink) {
        (Some(p), _) => Sink::open(p)?,
        (None, Some(Sink::Stdout)) => Sink::Stderr,
        (None, _) => Sink::Stdout,
    };
    let cfg = WorkloadConfig {
        db_size: a.db,
        groups: if a.groups.is_empty() { vec![Group::default()] } else { a.groups },
        txns: a.txns,
        retry: !a.no_retry,
        retry_cap: a.retry_cap,
        seed: a.seed,
        scheme: a.scheme,
        certifier: a.certifier,
        commit_path: a.commit,
        safe_snapshot_interval: a.snapshot_interval,
        staleness_threshold: a.threshold,
        no_rewrite: a.no_rewrite,
        capture_trace: trace_sink.is_some(),
        yield_between_ops: !a.no_yield,
    };
    let out = run_bench(&cfg)?;
    if let (Some(mut sink), Some(trace)) = (trace_sink, &out.trace) {
        let mut w = io::BufWriter::new(sink.writer());
        write_trace(&mut w, trace)?;
        w.flush()?;
    }
    let mut w = stats_sink.writer();
    writeln!(
        w,
        "config db={} scheme={} certifier={} commit={} txns={} seed={} retry={} threshold={} snapshot_interval={} no_rewrite={}",
        cfg.db_size,
        cfg.scheme,
        cfg.certifier,
        cfg.commit_path,
        cfg.txns,
        cfg.seed,
        cfg.retry,
        cfg.staleness_threshold,
        cfg.safe_snapshot_interval,
        cfg.no_rewrite
    )?;
    for (i, g) in cfg.groups.iter().enumerate() {
        writeln!(w, "config group={i} {g}")?;
    }
    w.write_all(out.stats.render().as_bytes())?;
    Ok(EXIT_OK)
}

fn check(path: Option<String>) -> Result<i32> {
    let events = match path.as_deref() {
        None | Some("-") => read_trace(io::stdin().lock())?,
        Some(p) => read_trace(BufReader::new(File::open(p)?))?,
    };
    let report = Report::check(&events)?;
    print!("{}", report.render());
    if report.violations.unattributed().next().is_some() {
        eprintln!("ssnbench: an SCC has no member failing the exclusion test");
    }
    Ok(if report.serializable() { EXIT_OK } else { EXIT_VIOLATION })
}

fn read_script(path: &PathBuf) -> Result<ScheduleScript> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    ScheduleScript::parse(&text)
}

fn replay(a: ReplayArgs) -> Result<i32> {
    let script = read_script(&a.script)?;
    let cfg = ReplayConfig {
        scheme: a.scheme,
        certifier: a.certifier,
        commit_path: a.commit,
        enforce: !a.observe,
        strict: true,
    };
    let r = replay_with(&script, &cfg)?;
    if let Some(target) = &a.emit_trace {
        let mut sink = Sink::open(target)?;
        write_trace(sink.writer(), &r.trace)?;
    }
    print!("{}", r.render());
    Ok(EXIT_OK)
}

fn enumerate(a: EnumArgs) -> Result<i32> {
    let scripts: Vec<(String, ScheduleScript)> = match (&a.family, &a.file) {
        (Some(name), _) if name == "all" => FAMILIES
            .iter()
            .map(|(n, _)| (n.to_string(), family(n).expect("built-in")))
            .collect(),
        (Some(name), _) => {
            let s = family(name).ok_or_else(|| Error::InvalidConfig(format!("unknown family `{name}`")))?;
            vec![(name.clone(), s)]
        }
        (None, Some(p)) => vec![(p.display().to_string(), read_script(p)?)],
        (None, None) => return Err(Error::InvalidConfig("give --family NAME or a script file".into())),
    };
    let cfg = EnumConfig {
        scheme: a.scheme,
        certifier: a.certifier,
        enforce: a.enforce,
    };
    let mut code = EXIT_OK;
    for (name, s) in scripts {
        let summary = enumerate_interleavings(&s, cfg, |h| {
            if a.verbose && h.cyclic() {
                println!("# cyclic history, online violation: {}", h.online_violation);
                print!("{}", h.script);
            }
        })?;
        print!("family={name} {}", summary.render());
        if !summary.sound() {
            code = EXIT_VIOLATION;
        }
    }
    Ok(code)
}

/// Runs the tool and returns its exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let r = match cli.cmd {
        Cmd::Bench(a) => bench(a),
        Cmd::Check { path } => check(path),
        Cmd::Replay(a) => replay(a),
        Cmd::Enumerate(a) => enumerate(a),
    };
    match r {
        Ok(code) => code,
        Err(e) => {
            eprintln!("ssnbench: {e}");
            EXIT_USAGE
        }
    }
}
