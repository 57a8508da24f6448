//! Batches of runs over laws, team sizes, arrival styles and trials, with
//! CSV output and per-variation summaries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use thiserror::Error;

use crate::engine::{run, RunOutput, TraceEvent};
use crate::generate::{generate, GenerateError, TaskTemplate, Template};
use crate::needs::PriorityLaw;
use crate::scenario::Scenario;

/// Team size: robots and tasks, written `R20+T3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Scale {
    pub robots: usize,
    pub tasks: usize,
}

impl Scale {
    pub const fn new(robots: usize, tasks: usize) -> Self {
        Self { robots, tasks }
    }

    /// The four team sizes of the scaling study.
    pub const LADDER: [Scale; 4] = [Scale::new(5, 1), Scale::new(10, 2), Scale::new(15, 3), Scale::new(20, 4)];

    /// Robots shared as evenly as possible, earlier tasks taking the remainder.
    pub fn required(&self) -> Vec<usize> {
        let base = self.robots / self.tasks;
        let extra = self.robots % self.tasks;
        (0..self.tasks).map(|i| base + usize::from(i < extra)).collect()
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}+T{}", self.robots, self.tasks)
    }
}

impl FromStr for Scale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("bad scale {s:?}, expected like R20+T3");
        let (r, t) = s.split_once('+').ok_or_else(bad)?;
        let robots = r.strip_prefix('R').and_then(|n| n.parse().ok()).ok_or_else(bad)?;
        let tasks = t.strip_prefix('T').and_then(|n| n.parse().ok()).ok_or_else(bad)?;
        if tasks == 0 || robots < tasks {
            return Err(bad());
        }
        Ok(Scale { robots, tasks })
    }
}

/// When tasks appear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Style {
    Static,
    /// One task at a time.
    OneOneOne,
    /// Two at once, then the rest.
    TwoOne,
    /// One, then the rest together.
    OneTwo,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::Static, Style::OneOneOne, Style::TwoOne, Style::OneTwo];
    pub const DYNAMIC: [Style; 3] = [Style::OneOneOne, Style::TwoOne, Style::OneTwo];

    pub fn name(&self) -> &'static str {
        match self {
            Style::Static => "static",
            Style::OneOneOne => "1+1+1",
            Style::TwoOne => "2+1",
            Style::OneTwo => "1+2",
        }
    }

    /// Which arrival batch task `i` belongs to.
    fn batch(&self, i: usize) -> u64 {
        match self {
            Style::Static => 0,
            Style::OneOneOne => i as u64,
            Style::TwoOne => u64::from(i >= 2),
            Style::OneTwo => u64::from(i >= 1),
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Style {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Style::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown style {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    /// Shared settings; robots and tasks are filled per variation.
    pub template: Template,
    pub laws: Vec<PriorityLaw>,
    pub scales: Vec<Scale>,
    pub styles: Vec<Style>,
    pub trials: u32,
    /// Trial `k` uses seed `base_seed + k` under every law, so laws are
    /// compared on identical worlds.
    pub base_seed: u64,
    pub task_duration: u64,
    pub task_timeout: u64,
    /// Ticks between arrival batches in dynamic styles.
    pub arrival_gap: u64,
}

impl SweepSpec {
    /// Static 20-robot, 3-task comparison of the four needs laws.
    pub fn static_comparison(trials: u32) -> Self {
        Self {
            template: Template::default(),
            laws: vec![PriorityLaw::HighE, PriorityLaw::LowE, PriorityLaw::TPlusHighE, PriorityLaw::TPlusLowE],
            scales: vec![Scale::new(20, 3)],
            styles: vec![Style::Static],
            trials,
            base_seed: 1,
            task_duration: 20,
            task_timeout: 2000,
            arrival_gap: 120,
        }
    }

    pub fn scaling(law: PriorityLaw, trials: u32) -> Self {
        Self {
            laws: vec![law],
            scales: Scale::LADDER.to_vec(),
            ..Self::static_comparison(trials)
        }
    }

    /// Dynamic arrivals with the wider battery spread.
    pub fn dynamic(law: PriorityLaw, trials: u32) -> Self {
        let mut spec = Self {
            laws: vec![law],
            styles: Style::DYNAMIC.to_vec(),
            ..Self::static_comparison(trials)
        };
        spec.template.battery_sd = 30.0;
        spec
    }

    pub fn variations(&self) -> Vec<Variation> {
        let mut out = Vec::new();
        for law in &self.laws {
            for scale in &self.scales {
                for style in &self.styles {
                    for trial in 0..self.trials {
                        out.push(Variation {
                            law: *law,
                            scale: *scale,
                            style: *style,
                            trial,
                            seed: self.base_seed.wrapping_add(u64::from(trial)),
                        });
                    }
                }
            }
        }
        out
    }

    pub fn scenario(&self, v: &Variation) -> Result<Scenario, GenerateError> {
        if v.style != Style::Static && v.scale.tasks < 2 {
            return Err(GenerateError::InvalidTemplate(format!(
                "style {} needs at least two tasks",
                v.style
            )));
        }
        let tasks = v
            .scale
            .required()
            .into_iter()
            .enumerate()
            .map(|(i, required)| TaskTemplate {
                required,
                duration: self.task_duration,
                timeout: self.task_timeout,
                arrival_tick: v.style.batch(i) * self.arrival_gap,
                center: None,
            })
            .collect();
        let template = Template {
            robots: v.scale.robots,
            tasks,
            law: v.law,
            ..self.template.clone()
        };
        generate(&template, v.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variation {
    pub law: PriorityLaw,
    pub scale: Scale,
    pub style: Style,
    pub trial: u32,
    pub seed: u64,
}

impl Variation {
    /// File-name friendly key, e.g. `t_low_e_R20+T3_static_0`.
    pub fn label(&self) -> String {
        format!("{}_{}_{}_{}", self.law, self.scale, self.style, self.trial)
    }
}

fn fixed<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{x:.6}"))
}

/// One CSV line. Field order is the file's column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub law: String,
    pub scale: String,
    pub style: String,
    pub trial: u32,
    pub seed: u64,
    pub conflict_frequency: u64,
    #[serde(serialize_with = "fixed")]
    pub energy_moving: f64,
    #[serde(serialize_with = "fixed")]
    pub energy_idle: f64,
    #[serde(serialize_with = "fixed")]
    pub energy_comm: f64,
    #[serde(serialize_with = "fixed")]
    pub energy_comm_negotiation: f64,
    #[serde(serialize_with = "fixed")]
    pub total_distance: f64,
    #[serde(serialize_with = "fixed")]
    pub residual_max: f64,
    #[serde(serialize_with = "fixed")]
    pub residual_min: f64,
    #[serde(serialize_with = "fixed")]
    pub residual_mean: f64,
    pub ticks: u64,
    pub tasks_completed: u32,
    pub tasks_timed_out: u32,
    pub error: String,
}

pub const CSV_COLUMNS: [&str; 18] = [
    "law",
    "scale",
    "style",
    "trial",
    "seed",
    "conflict_frequency",
    "energy_moving",
    "energy_idle",
    "energy_comm",
    "energy_comm_negotiation",
    "total_distance",
    "residual_max",
    "residual_min",
    "residual_mean",
    "ticks",
    "tasks_completed",
    "tasks_timed_out",
    "error",
];

impl SweepRow {
    fn blank(v: &Variation) -> Self {
        Self {
            law: v.law.name().into(),
            scale: v.scale.to_string(),
            style: v.style.to_string(),
            trial: v.trial,
            seed: v.seed,
            conflict_frequency: 0,
            energy_moving: 0.0,
            energy_idle: 0.0,
            energy_comm: 0.0,
            energy_comm_negotiation: 0.0,
            total_distance: 0.0,
            residual_max: 0.0,
            residual_min: 0.0,
            residual_mean: 0.0,
            ticks: 0,
            tasks_completed: 0,
            tasks_timed_out: 0,
            error: String::new(),
        }
    }

    pub fn from_output(v: &Variation, out: &RunOutput) -> Self {
        let m = &out.metrics;
        Self {
            conflict_frequency: m.conflict_frequency,
            energy_moving: m.energy_moving,
            energy_idle: m.energy_idle,
            energy_comm: m.energy_comm,
            energy_comm_negotiation: m.energy_comm_negotiation,
            total_distance: m.total_distance,
            residual_max: m.residual_max,
            residual_min: m.residual_min,
            residual_mean: m.residual_mean,
            ticks: m.ticks_elapsed,
            tasks_completed: m.tasks_completed,
            tasks_timed_out: m.tasks_timed_out,
            ..Self::blank(v)
        }
    }

    pub fn failed(v: &Variation, error: impl fmt::Display) -> Self {
        Self {
            error: error.to_string(),
            ..Self::blank(v)
        }
    }

    pub fn is_error(&self) -> bool {
        !self.error.is_empty()
    }

    pub fn total_energy(&self) -> f64 {
        self.energy_moving + self.energy_idle + self.energy_comm
    }

    /// Communication energy per task of the team size.
    pub fn per_task_comm(&self) -> f64 {
        let tasks = self.scale.parse::<Scale>().map_or(1, |s| s.tasks);
        self.energy_comm / tasks as f64
    }
}

pub fn run_variation(spec: &SweepSpec, v: &Variation) -> SweepRow {
    match spec.scenario(v) {
        Err(e) => SweepRow::failed(v, e),
        Ok(scenario) => match run(&scenario) {
            Ok(out) => SweepRow::from_output(v, &out),
            Err(e) => SweepRow::failed(v, e),
        },
    }
}

/// Run every variation in parallel; rows come back in variation order.
pub fn run_sweep(spec: &SweepSpec) -> Vec<SweepRow> {
    spec.variations()
        .par_iter()
        .map(|v| run_variation(spec, v))
        .collect()
}

/// Like [`run_sweep`] but keeps each run's trace; failed rows get an empty one.
pub fn run_sweep_traced(spec: &SweepSpec) -> Vec<(SweepRow, Vec<TraceEvent>)> {
    spec.variations()
        .par_iter()
        .map(|v| match spec.scenario(v).map_err(|e| e.to_string()).and_then(|s| run(&s).map_err(|e| e.to_string())) {
            Ok(out) => (SweepRow::from_output(v, &out), out.trace),
            Err(e) => (SweepRow::failed(v, e), Vec::new()),
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("no rows to summarize")]
    Empty,
}

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), SweepError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<SweepRow>, SweepError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single value.
    pub sd: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Group {
    pub n: usize,
    pub stats: BTreeMap<&'static str, Stat>,
}

/// Metrics aggregated by (law, scale, style); failed rows are left out.
pub type Summary = BTreeMap<(String, String, String), Group>;

type Metric = (&'static str, fn(&SweepRow) -> f64);

const SUMMARY_METRICS: [Metric; 13] = [
    ("conflict_frequency", |r| r.conflict_frequency as f64),
    ("energy_moving", |r| r.energy_moving),
    ("energy_idle", |r| r.energy_idle),
    ("energy_comm", |r| r.energy_comm),
    ("energy_comm_negotiation", |r| r.energy_comm_negotiation),
    ("total_distance", |r| r.total_distance),
    ("per_task_comm", SweepRow::per_task_comm),
    ("residual_max", |r| r.residual_max),
    ("residual_min", |r| r.residual_min),
    ("residual_mean", |r| r.residual_mean),
    ("ticks", |r| r.ticks as f64),
    ("tasks_completed", |r| r.tasks_completed as f64),
    ("tasks_timed_out", |r| r.tasks_timed_out as f64),
];

pub fn summarize(rows: &[SweepRow]) -> Result<Summary, SweepError> {
    if rows.is_empty() {
        return Err(SweepError::Empty);
    }
    let mut groups: BTreeMap<(String, String, String), Vec<&SweepRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.is_error()) {
        groups
            .entry((r.law.clone(), r.scale.clone(), r.style.clone()))
            .or_default()
            .push(r);
    }
    Ok(groups
        .into_iter()
        .map(|(key, rs)| {
            let stats = SUMMARY_METRICS
                .iter()
                .map(|(name, f)| {
                    let xs: Vec<f64> = rs.iter().map(|r| f(r)).collect();
                    (*name, Stat::of(&xs))
                })
                .collect();
            (key, Group { n: rs.len(), stats })
        })
        .collect())
}

/// Plot-data file name and the metrics it carries.
pub const PLOT_FILES: [(&str, &[&str]); 5] = [
    ("conflicts.csv", &["conflict_frequency"]),
    (
        "energy_split.csv",
        &["energy_moving", "energy_idle", "energy_comm", "energy_comm_negotiation"],
    ),
    ("distance.csv", &["total_distance"]),
    ("per_task_comm.csv", &["per_task_comm"]),
    ("residual_battery.csv", &["residual_max", "residual_min", "residual_mean"]),
];

/// Write a table with `<metric>_mean, <metric>_sd` columns per metric.
pub fn write_table<W: Write>(summary: &Summary, metrics: &[&str], out: W) -> Result<(), SweepError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["law".to_string(), "scale".into(), "style".into(), "n".into()];
    for m in metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_sd"));
    }
    w.write_record(&header)?;
    for ((law, scale, style), group) in summary {
        let mut rec = vec![law.clone(), scale.clone(), style.clone(), group.n.to_string()];
        for m in metrics {
            let s = group.stats.get(m).copied().unwrap_or_default();
            rec.push(format!("{:.6}", s.mean));
            rec.push(format!("{:.6}", s.sd));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Summary table plus one plot-data file per figure family, as
/// `(file name, bytes)` pairs.
pub fn summary_files(rows: &[SweepRow]) -> Result<Vec<(String, Vec<u8>)>, SweepError> {
    let summary = summarize(rows)?;
    let all: Vec<&str> = SUMMARY_METRICS.iter().map(|(n, _)| *n).collect();
    let mut files = Vec::new();
    for (name, metrics) in std::iter::once(("summary.csv", all.as_slice())).chain(PLOT_FILES) {
        let mut buf = Vec::new();
        write_table(&summary, metrics, &mut buf)?;
        files.push((name.to_string(), buf));
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(law: &str, conflicts: u64) -> SweepRow {
        let v = Variation {
            law: law.parse().unwrap(),
            scale: Scale::new(5, 1),
            style: Style::Static,
            trial: 0,
            seed: 1,
        };
        SweepRow {
            conflict_frequency: conflicts,
            ..SweepRow::blank(&v)
        }
    }

    #[test]
    fn scale_names_and_split() {
        let s: Scale = "R20+T3".parse().unwrap();
        assert_eq!(s, Scale::new(20, 3));
        assert_eq!(s.to_string(), "R20+T3");
        assert_eq!(s.required(), vec![7, 7, 6]);
        assert_eq!(Scale::new(20, 4).required(), vec![5; 4]);
        assert!("R2+T3".parse::<Scale>().is_err());
        assert!("20+3".parse::<Scale>().is_err());
    }

    #[test]
    fn style_batches() {
        let at = |s: Style| (0..3).map(|i| s.batch(i)).collect::<Vec<_>>();
        assert_eq!(at(Style::Static), vec![0, 0, 0]);
        assert_eq!(at(Style::OneOneOne), vec![0, 1, 2]);
        assert_eq!(at(Style::TwoOne), vec![0, 0, 1]);
        assert_eq!(at(Style::OneTwo), vec![0, 1, 1]);
        for s in Style::ALL {
            assert_eq!(s.name().parse::<Style>().unwrap(), s);
        }
    }

    #[test]
    fn variation_counts() {
        let spec = SweepSpec::static_comparison(10);
        assert_eq!(spec.variations().len(), 40);
        let spec = SweepSpec::scaling(PriorityLaw::TPlusLowE, 2);
        assert_eq!(spec.variations().len(), 8);
        let one = SweepSpec {
            laws: vec![PriorityLaw::LowE],
            ..SweepSpec::static_comparison(3)
        };
        assert_eq!(one.variations().len(), 3);
    }

    #[test]
    fn same_seed_under_every_law() {
        let spec = SweepSpec::static_comparison(2);
        let vs = spec.variations();
        let a = spec.scenario(&vs[0]).unwrap();
        let b = spec.scenario(&vs[2]).unwrap();
        assert_eq!(vs[0].seed, vs[2].seed);
        assert_ne!(vs[0].law, vs[2].law);
        assert_eq!(a.robots, b.robots);
        assert_eq!(a.tasks, b.tasks);
    }

    #[test]
    fn stats() {
        let one = Stat::of(&[5.0]);
        assert_eq!((one.mean, one.sd), (5.0, 0.0));
        let two = Stat::of(&[1.0, 3.0]);
        assert_eq!(two.mean, 2.0);
        assert!((two.sd - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn csv_header_and_round_trip() {
        let rows = vec![row("low_e", 3), row("high_e", 5)];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
        assert!(text.contains(",0.000000,"));
        assert_eq!(read_csv(&buf[..]).unwrap(), rows);

        let mut empty = Vec::new();
        write_csv(&[], &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().trim(), CSV_COLUMNS.join(","));
    }

    #[test]
    fn summary_of_a_single_row_is_the_row() {
        let s = summarize(&[row("low_e", 4)]).unwrap();
        let stats = &s[&("low_e".into(), "R5+T1".into(), "static".into())];
        assert_eq!(stats.n, 1);
        assert_eq!(stats.stats["conflict_frequency"], Stat { mean: 4.0, sd: 0.0 });
        assert!(matches!(summarize(&[]), Err(SweepError::Empty)));
    }

    #[test]
    fn failed_rows_are_excluded_from_summaries() {
        let mut bad = row("low_e", 100);
        bad.error = "boom".into();
        let s = summarize(&[row("low_e", 1), row("low_e", 3), bad]).unwrap();
        let stats = &s[&("low_e".into(), "R5+T1".into(), "static".into())];
        assert_eq!(stats.n, 2);
        assert_eq!(stats.stats["conflict_frequency"].mean, 2.0);
    }

    #[test]
    fn plot_files_are_produced() {
        let files = summary_files(&[row("low_e", 1), row("high_e", 2)]).unwrap();
        let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "summary.csv",
                "conflicts.csv",
                "energy_split.csv",
                "distance.csv",
                "per_task_comm.csv",
                "residual_battery.csv"
            ]
        );
        let conflicts = String::from_utf8(files[1].1.clone()).unwrap();
        assert_eq!(conflicts.lines().next().unwrap(), "law,scale,style,n,conflict_frequency_mean,conflict_frequency_sd");
        assert!(conflicts.contains("low_e,R5+T1,static,1,1.000000,0.000000"));
    }
}
