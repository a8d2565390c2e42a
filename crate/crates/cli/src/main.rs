use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use etsan::ir::{parse::resolve_type, parse_types, print_program, Variant};
use etsan::pipeline::{prepare, run};
use etsan::report::{ExecReport, ReportMode, Value};
use etsan::{layout, Config, LayoutTable, TypeUniverse};

#[derive(Parser)]
#[command(name = "etsan", version, about = "Type and bounds checking interpreter for a small C-like IR")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Instrument and run a program.
    Run {
        file: PathBuf,
        #[command(flatten)]
        opts: RunOpts,
        /// Also write the report as JSON.
        #[arg(long, value_name = "FILE")]
        json: Option<PathBuf>,
    },
    /// Print the instrumented program.
    Instrument {
        file: PathBuf,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Sub-objects of type T at byte offset K.
    Layout {
        typefile: PathBuf,
        #[arg(value_name = "T")]
        ty: String,
        #[arg(value_name = "K", allow_negative_numbers = true)]
        k: i64,
        #[arg(long)]
        json: bool,
    },
    /// The layout hash table of type T.
    Table {
        typefile: PathBuf,
        #[arg(value_name = "T")]
        ty: String,
        #[arg(long)]
        json: bool,
    },
    /// Check counts and error buckets for several programs.
    Stats {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[command(flatten)]
        opts: RunOpts,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RunOpts {
    /// TOML configuration file; flags override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// log, count or abort=N.
    #[arg(long)]
    mode: Option<ReportMode>,
    /// full, bounds or type.
    #[arg(long)]
    variant: Option<Variant>,
    /// Skip check-removal optimizations.
    #[arg(long)]
    no_opt: bool,
    /// Run without any instrumentation.
    #[arg(long)]
    no_instrument: bool,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunOpts {
    fn config(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if self.no_opt {
            cfg.optimize = etsan::ir::OptConfig::none();
        }
        if self.no_instrument {
            cfg.instrument = false;
        }
        if let Some(s) = self.seed {
            cfg.space.seed = s;
        }
        Ok(cfg)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load_type(path: &Path, ty: &str) -> Result<(TypeUniverse, etsan::TypeId)> {
    let src = read(path)?;
    let mut u = parse_types(&src).map_err(|e| anyhow::anyhow!("{}:{e}", path.display()))?;
    let t = resolve_type(&mut u, ty).map_err(|e| anyhow::anyhow!("type `{ty}`: {}", e.msg))?;
    Ok((u, t))
}

fn print_report(r: &ExecReport) {
    for e in &r.log {
        eprintln!("{e}");
    }
    let result = match &r.halted_by {
        etsan::report::HaltReason::Completed => match r.return_value {
            Some(Value::Int(v)) => format!("completed, returned {v}"),
            Some(Value::Float(v)) => format!("completed, returned {v}"),
            None => "completed".to_string(),
        },
        etsan::report::HaltReason::AbortAfterN => "aborted".to_string(),
        etsan::report::HaltReason::Fault(m) => format!("fault: {m}"),
    };
    println!("{} [{} {}]: {result}", r.program, r.variant, r.mode);
    println!(
        "checks: type={} bounds={} legacy={}",
        r.counters.type_checks, r.counters.bounds_checks, r.counters.legacy_checks
    );
    println!("buckets: {}", r.buckets.len());
    for b in &r.buckets {
        println!(
            "  {} static={} dynamic={} offset={} count={} first={}",
            b.kind, b.static_type, b.dynamic_type, b.offset, b.count, b.first_site
        );
    }
}

fn cmd_run(file: &Path, opts: &RunOpts, json_out: Option<&Path>) -> Result<i32> {
    let cfg = opts.config()?;
    let src = read(file)?;
    let name = file.display().to_string();
    let (report, _) = match run(&name, &src, &cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{name}:{e}");
            return Ok(1);
        }
    };
    print_report(&report);
    if let Some(p) = json_out {
        fs::write(p, report.to_json()).with_context(|| format!("cannot write {}", p.display()))?;
    }
    Ok(report.exit_code())
}

fn cmd_instrument(file: &Path, opts: &RunOpts) -> Result<i32> {
    let cfg = opts.config()?;
    let src = read(file)?;
    let name = file.display().to_string();
    match prepare(&name, &src, &cfg) {
        Ok(p) => {
            print!("{}", print_program(&p.program));
            let s = p.program.static_checks();
            eprintln!("static: {s}");
            eprintln!(
                "removed: type_check={} bounds_check={} narrow={}",
                p.opt.type_checks_removed, p.opt.bounds_checks_removed, p.opt.narrows_removed
            );
            Ok(0)
        }
        Err(e) => {
            eprintln!("{name}:{e}");
            Ok(1)
        }
    }
}

fn cmd_layout(typefile: &Path, ty: &str, k: i64, as_json: bool) -> Result<i32> {
    let (u, t) = load_type(typefile, ty)?;
    let subs = layout(&u, t, k);
    if as_json {
        let items: Vec<_> = subs.iter().map(|s| json!({ "type": u.name(s.ty), "offset": s.delta })).collect();
        println!("{}", serde_json::to_string_pretty(&items)?);
    } else {
        for s in &subs {
            println!("({}, {})", u.name(s.ty), s.delta);
        }
    }
    Ok(0)
}

fn cmd_table(typefile: &Path, ty: &str, as_json: bool) -> Result<i32> {
    let (u, t) = load_type(typefile, ty)?;
    let table = LayoutTable::build(&u, t);
    let owner = u.name(t);
    if as_json {
        let items: Vec<_> = table
            .entries()
            .iter()
            .map(|(s, k, e)| {
                json!({
                    "type": owner,
                    "sub": u.name(*s),
                    "offset": k,
                    "lo": e.bounds.lo,
                    "hi": e.bounds.hi,
                    "flexible": e.flexible,
                })
            })
            .collect();
        println!("{}", serde_json::to_string_pretty(&items)?);
    } else {
        for (s, k, e) in table.entries() {
            let fam = if e.flexible { " [flexible]" } else { "" };
            println!("({owner}, {}, {k}) -> {}{fam}", u.name(s), e.bounds);
        }
    }
    Ok(0)
}

fn cmd_stats(files: &[PathBuf], opts: &RunOpts, as_json: bool) -> Result<i32> {
    let cfg = opts.config()?;
    let mut rows = Vec::new();
    let mut failed = false;
    for f in files {
        let src = read(f)?;
        let name = f.display().to_string();
        match run(&name, &src, &cfg) {
            Ok((r, _)) => rows.push(r),
            Err(e) => {
                eprintln!("{name}:{e}");
                failed = true;
            }
        }
    }
    if as_json {
        let items: Vec<_> = rows
            .iter()
            .map(|r| {
                json!({
                    "program": r.program,
                    "type_checks": r.counters.type_checks,
                    "bounds_checks": r.counters.bounds_checks,
                    "legacy_checks": r.counters.legacy_checks,
                    "buckets": r.buckets.len(),
                })
            })
            .collect();
        println!("{}", serde_json::to_string_pretty(&items)?);
    } else {
        let width = rows.iter().map(|r| r.program.len()).max().unwrap_or(7).max(7);
        println!("{:width$}  {:>12} {:>12} {:>12} {:>8}", "program", "#type", "#bounds", "#legacy", "#buckets");
        let mut total = etsan::report::Counters::default();
        let mut buckets = 0;
        for r in &rows {
            println!(
                "{:width$}  {:>12} {:>12} {:>12} {:>8}",
                r.program,
                r.counters.type_checks,
                r.counters.bounds_checks,
                r.counters.legacy_checks,
                r.buckets.len()
            );
            total.add(&r.counters);
            buckets += r.buckets.len();
        }
        println!(
            "{:width$}  {:>12} {:>12} {:>12} {:>8}",
            "total", total.type_checks, total.bounds_checks, total.legacy_checks, buckets
        );
    }
    Ok(if failed { 1 } else { 0 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run { file, opts, json } => cmd_run(file, opts, json.as_deref()),
        Cmd::Instrument { file, opts } => cmd_instrument(file, opts),
        Cmd::Layout { typefile, ty, k, json } => cmd_layout(typefile, ty, *k, *json),
        Cmd::Table { typefile, ty, json } => cmd_table(typefile, ty, *json),
        Cmd::Stats { files, opts, json } => cmd_stats(files, opts, *json),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
