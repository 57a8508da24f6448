use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use swarm_core::engine::trace::{describe, read_jsonl, write_jsonl};
use swarm_core::engine::{run, TraceEvent};
use swarm_core::generate::{generate, TaskTemplate, Template};
use swarm_core::needs::PriorityLaw;
use swarm_core::scenario::Scenario;
use swarm_core::sweep::{read_csv, run_sweep_traced, summary_files, write_csv, Scale, SweepRow, SweepSpec};

#[derive(Parser)]
#[command(name = "swarm", version, about = "Needs-prioritized multi-robot cooperation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a scenario from a template.
    Generate {
        /// Template JSON; defaults to 20 robots and 3 static tasks.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        law: Option<PriorityLaw>,
        /// Directory for scenario.json; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one scenario to completion.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Override the scenario's law.
        #[arg(long)]
        law: Option<PriorityLaw>,
        /// Directory for metrics.json and trace.jsonl; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the event trace.
        #[arg(long)]
        trace: bool,
    },
    /// Run a batch of generated trials and write one CSV row per trial.
    Sweep {
        #[arg(long, value_enum, default_value_t = Kind::Static)]
        kind: Kind,
        /// Law for scale and dynamic sweeps; restricts a static sweep to one law.
        #[arg(long)]
        law: Option<PriorityLaw>,
        #[arg(long, default_value_t = 10)]
        trials: u32,
        /// Seed of trial 0; trial k uses seed + k.
        #[arg(long)]
        seed: Option<u64>,
        /// Template JSON overriding the default world settings.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Directory for results.csv; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write traces/<variation>.jsonl (needs --out).
        #[arg(long)]
        trace: bool,
    },
    /// Aggregate sweep rows into a summary table and plot-data files.
    Summarize {
        rows: PathBuf,
        /// Directory for the tables; summary.csv goes to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretty-print a trace.
    Replay { trace: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    /// Every needs law on 20 robots and 3 tasks.
    Static,
    /// One law from R5+T1 up to R20+T4.
    Scale,
    /// One law under the staggered arrival styles.
    Dynamic,
}

enum Failure {
    Invalid(anyhow::Error),
    Rows(usize),
    Other(anyhow::Error),
}

fn invalid<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Invalid)
}

fn other<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Other)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
    match out {
        Some(dir) => write_file(dir, name, bytes),
        None => Ok(io::stdout().write_all(bytes)?),
    }
}

fn trace_bytes(trace: &[TraceEvent]) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_jsonl(trace, &mut buf)?;
    Ok(buf)
}

fn load_template(path: &Path) -> anyhow::Result<Template> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing template {}", path.display()))
}

/// 20 robots and 3 static tasks, laid out like a static sweep trial.
fn default_template() -> Template {
    let spec = SweepSpec::static_comparison(1);
    let tasks = Scale::new(20, 3)
        .required()
        .into_iter()
        .map(|required| TaskTemplate {
            required,
            duration: spec.task_duration,
            timeout: spec.task_timeout,
            arrival_tick: 0,
            center: None,
        })
        .collect();
    Template { tasks, ..spec.template }
}

fn cmd_generate(scenario: Option<PathBuf>, seed: u64, law: Option<PriorityLaw>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut template = invalid(match scenario {
        Some(p) => load_template(&p),
        None => Ok(default_template()),
    })?;
    if let Some(law) = law {
        template.law = law;
    }
    let sc = invalid(generate(&template, seed).map_err(Into::into))?;
    let mut text = sc.to_json();
    text.push('\n');
    other(emit(out.as_deref(), "scenario.json", text.as_bytes()))
}

fn cmd_run(scenario: PathBuf, law: Option<PriorityLaw>, out: Option<PathBuf>, trace: bool) -> Result<(), Failure> {
    let mut sc = invalid(Scenario::load(&scenario).with_context(|| format!("loading {}", scenario.display())))?;
    if let Some(law) = law {
        sc.law = law;
    }
    let output = match run(&sc) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("run failed: {e}");
            return Err(Failure::Rows(1));
        }
    };
    let mut metrics = other(serde_json::to_string_pretty(&output.metrics).map_err(Into::into))?;
    metrics.push('\n');
    other(emit(out.as_deref(), "metrics.json", metrics.as_bytes()))?;
    if trace {
        let bytes = other(trace_bytes(&output.trace))?;
        other(emit(out.as_deref(), "trace.jsonl", &bytes))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    kind: Kind,
    law: Option<PriorityLaw>,
    trials: u32,
    seed: Option<u64>,
    scenario: Option<PathBuf>,
    out: Option<PathBuf>,
    trace: bool,
) -> Result<(), Failure> {
    if trials == 0 {
        return Err(Failure::Invalid(anyhow::anyhow!("--trials must be at least 1")));
    }
    if trace && out.is_none() {
        return Err(Failure::Invalid(anyhow::anyhow!("--trace needs --out")));
    }
    let law_or_default = law.unwrap_or(PriorityLaw::TPlusLowE);
    let mut spec = match kind {
        Kind::Static => {
            let mut s = SweepSpec::static_comparison(trials);
            if let Some(l) = law {
                s.laws = vec![l];
            }
            s
        }
        Kind::Scale => SweepSpec::scaling(law_or_default, trials),
        Kind::Dynamic => SweepSpec::dynamic(law_or_default, trials),
    };
    if let Some(s) = seed {
        spec.base_seed = s;
    }
    if let Some(p) = scenario {
        let t = invalid(load_template(&p))?;
        spec.template = t;
    }
    let results = run_sweep_traced(&spec);
    let rows: Vec<SweepRow> = results.iter().map(|(r, _)| r.clone()).collect();
    let mut csv = Vec::new();
    other(write_csv(&rows, &mut csv).map_err(Into::into))?;
    other(emit(out.as_deref(), "results.csv", &csv))?;
    if let (true, Some(dir)) = (trace, out.as_deref()) {
        for (v, (_, events)) in spec.variations().iter().zip(&results) {
            let bytes = other(trace_bytes(events))?;
            other(write_file(dir, &format!("traces/{}.jsonl", v.label()), &bytes))?;
        }
    }
    let failed = rows.iter().filter(|r| r.is_error()).count();
    for r in rows.iter().filter(|r| r.is_error()) {
        eprintln!("{} {} {} trial {}: {}", r.law, r.scale, r.style, r.trial, r.error);
    }
    if failed > 0 {
        return Err(Failure::Rows(failed));
    }
    Ok(())
}

fn cmd_summarize(rows: PathBuf, out: Option<PathBuf>) -> Result<(), Failure> {
    let file = invalid(fs::File::open(&rows).with_context(|| format!("opening {}", rows.display())))?;
    let data = invalid(read_csv(file).with_context(|| format!("parsing {}", rows.display())))?;
    let files = invalid(summary_files(&data).map_err(Into::into))?;
    match out {
        Some(dir) => {
            for (name, bytes) in &files {
                other(write_file(&dir, name, bytes))?;
            }
        }
        None => {
            let (_, summary) = files.first().expect("summary table");
            other(emit(None, "summary.csv", summary))?;
        }
    }
    let failed = data.iter().filter(|r| r.is_error()).count();
    if failed > 0 {
        eprintln!("{failed} failed rows left out of the summary");
        return Err(Failure::Rows(failed));
    }
    Ok(())
}

fn cmd_replay(trace: PathBuf) -> Result<(), Failure> {
    let file = invalid(fs::File::open(&trace).with_context(|| format!("opening {}", trace.display())))?;
    let events = invalid(read_jsonl(BufReader::new(file)).with_context(|| format!("parsing {}", trace.display())))?;
    let mut stdout = io::stdout().lock();
    for e in &events {
        other(writeln!(stdout, "{}", describe(e)).map_err(Into::into))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate { scenario, seed, law, out } => cmd_generate(scenario, seed, law, out),
        Command::Run { scenario, law, out, trace } => cmd_run(scenario, law, out, trace),
        Command::Sweep { kind, law, trials, seed, scenario, out, trace } => {
            cmd_sweep(kind, law, trials, seed, scenario, out, trace)
        }
        Command::Summarize { rows, out } => cmd_summarize(rows, out),
        Command::Replay { trace } => cmd_replay(trace),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Rows(n)) => {
            eprintln!("{n} failed run(s)");
            ExitCode::from(1)
        }
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
