//! Monte-Carlo checks of assignment procedures.
//!
//! Evaluates a script over many synthetic units and tabulates what it
//! assigned. Work is split across threads and merged, so the report is
//! the same for any thread count.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::Serialize;
use sha1::{Digest, Sha1};
use thiserror::Error;

use crate::interpreter::{EvalError, ExperimentContext, Inputs, Overrides, Script};
use crate::ir::{list_units, ScriptIR, UnitRef};
use crate::value::Value;

/// Distinct values above which a parameter's frequency table is omitted
/// (numeric summaries are still kept).
pub const MAX_CELLS: usize = 1_000;

/// Label of the cell counting units where a parameter was not set.
pub const UNSET: &str = "<unset>";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulationError {
    #[error("n must be at least 1")]
    NoUnits,
    #[error("evaluation failed for inputs {inputs}: {source}")]
    Evaluation {
        inputs: String,
        #[source]
        source: EvalError,
    },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameters `{0}` and `{1}` were not tracked as a pair")]
    PairNotTracked(String, String),
    #[error("expected count {expected:.3} in cell {cell} is below 5")]
    ExpectedTooSmall { cell: usize, expected: f64 },
    #[error("observed has {observed} cells but expected has {expected}")]
    CellMismatch { observed: usize, expected: usize },
    #[error("expected probabilities must be non-negative and sum to 1")]
    BadProbabilities,
    #[error("thread pool: {0}")]
    Pool(String),
}

/// How unit inputs are generated for index `i`.
#[derive(Debug, Clone, PartialEq)]
pub enum UnitSpec {
    /// `name = i`.
    Sequential(String),
    /// `name` = first 16 hex digits of SHA1 of `i`, a pseudo-random id.
    Hashed(String),
    /// Mixed-radix grid: the last name varies fastest. `n` must be the
    /// product of the sizes.
    Grid(Vec<(String, u64)>),
}

impl UnitSpec {
    pub fn inputs(&self, i: u64) -> Inputs {
        let mut out = Inputs::new();
        match self {
            UnitSpec::Sequential(name) => {
                out.insert(name.clone(), Value::Int(i as i64));
            }
            UnitSpec::Hashed(name) => {
                let digest = Sha1::digest(i.to_string().as_bytes());
                out.insert(name.clone(), Value::Str(crate::ir::hex_lower(&digest[..8])));
            }
            UnitSpec::Grid(dims) => {
                let mut rest = i;
                for (name, size) in dims.iter().rev() {
                    out.insert(name.clone(), Value::Int((rest % size) as i64));
                    rest /= size;
                }
            }
        }
        out
    }

    pub fn grid_size(&self) -> Option<u64> {
        match self {
            UnitSpec::Grid(dims) => Some(dims.iter().map(|(_, s)| *s).product()),
            _ => None,
        }
    }
}

pub type InputGenerator<'a> = &'a (dyn Fn(u64) -> Inputs + Sync);

pub struct SimulationOptions<'a> {
    pub n: u64,
    pub units: UnitSpec,
    /// Extra inputs per unit index, merged under the unit inputs.
    pub extra_inputs: Option<InputGenerator<'a>>,
    pub overrides: Overrides,
    /// Parameter pairs to cross-tabulate.
    pub pairs: Vec<(String, String)>,
    pub context: ExperimentContext,
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
}

impl<'a> SimulationOptions<'a> {
    pub fn new(n: u64, units: UnitSpec) -> Self {
        SimulationOptions {
            n,
            units,
            extra_inputs: None,
            overrides: Overrides::new(),
            pairs: Vec::new(),
            context: ExperimentContext::new("simulation", "draft").expect("valid names"),
            jobs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyTable {
    /// Count per canonical value text, including [`UNSET`] when nonzero.
    /// `None` when there were more than [`MAX_CELLS`] distinct values.
    pub counts: Option<BTreeMap<String, u64>>,
    pub distinct: usize,
    pub unset: u64,
}

impl FrequencyTable {
    pub fn frequency(&self, value: &Value, n: u64) -> f64 {
        self.counts
            .as_ref()
            .and_then(|c| c.get(&value.to_canonical()))
            .map_or(0.0, |c| *c as f64 / n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NumericSummary {
    pub count: u64,
    pub mean: f64,
    /// Sample variance (n - 1 denominator).
    pub variance: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointTable {
    pub a: String,
    pub b: String,
    /// Count per (a value, b value) cell, canonical text keys.
    pub counts: BTreeMap<String, BTreeMap<String, u64>>,
    /// Test of independence between `a` and `b`.
    pub independence: ChiSquare,
    /// Largest |P(a,b) - P(a)P(b)| over all cells.
    pub max_deviation: f64,
}

impl JointTable {
    /// P(b = value | a = given), from the joint counts.
    pub fn conditional(&self, a: &Value, b: &Value) -> Option<f64> {
        let row = self.counts.get(&a.to_canonical())?;
        let total: u64 = row.values().sum();
        Some(row.get(&b.to_canonical()).copied().unwrap_or(0) as f64 / total as f64)
    }

    /// Rows of P(b | a).
    pub fn conditional_table(&self) -> BTreeMap<String, BTreeMap<String, f64>> {
        self.counts
            .iter()
            .map(|(a, row)| {
                let total: u64 = row.values().sum();
                let probs = row
                    .iter()
                    .map(|(b, c)| (b.clone(), *c as f64 / total as f64))
                    .collect();
                (a.clone(), probs)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub n: u64,
    /// Parameters in script order.
    pub parameters: IndexMap<String, FrequencyTable>,
    pub numeric: IndexMap<String, NumericSummary>,
    pub joint: Vec<JointTable>,
    /// Units whose script returned a falsy value.
    pub not_in_experiment: u64,
}

impl SimulationReport {
    pub fn frequency(&self, param: &str, value: &Value) -> Option<f64> {
        self.parameters
            .get(param)
            .map(|t| t.frequency(value, self.n))
    }

    pub fn joint(&self, a: &str, b: &str) -> Option<&JointTable> {
        self.joint.iter().find(|j| j.a == a && j.b == b)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("reports always serialize")
    }

    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "units: {}", self.n);
        if self.not_in_experiment > 0 {
            let _ = writeln!(out, "not in experiment: {}", self.not_in_experiment);
        }
        for (name, table) in &self.parameters {
            let _ = writeln!(out, "\n{name}");
            match &table.counts {
                Some(counts) => {
                    let width = counts.keys().map(|k| k.chars().count()).max().unwrap_or(0);
                    for (value, count) in counts {
                        let _ = writeln!(
                            out,
                            "  {value:<width$}  {count:>10}  {:>8.4}",
                            *count as f64 / self.n as f64
                        );
                    }
                }
                None => {
                    let _ = writeln!(out, "  {} distinct values", table.distinct);
                }
            }
            if let Some(s) = self.numeric.get(name) {
                let _ = writeln!(
                    out,
                    "  mean {:.4}  variance {:.4}  min {}  max {}",
                    s.mean, s.variance, s.min, s.max
                );
            }
        }
        for j in &self.joint {
            let _ = writeln!(out, "\n{} x {}", j.a, j.b);
            let rows: Vec<(String, String, u64)> = j
                .counts
                .iter()
                .flat_map(|(a, row)| row.iter().map(move |(b, c)| (a.clone(), b.clone(), *c)))
                .collect();
            let wa = rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(0);
            let wb = rows.iter().map(|r| r.1.chars().count()).max().unwrap_or(0);
            for (a, b, c) in rows {
                let _ = writeln!(
                    out,
                    "  {a:<wa$}  {b:<wb$}  {c:>10}  {:>8.4}",
                    c as f64 / self.n as f64
                );
            }
            let _ = writeln!(
                out,
                "  chi-square {:.3} (dof {})  max |P(a,b) - P(a)P(b)| {:.5}",
                j.independence.statistic, j.independence.dof, j.max_deviation
            );
        }
        out
    }
}

#[derive(Default, Clone)]
struct Moments {
    count: u64,
    mean: f64,
    m2: f64,
    min: f64,
    max: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        if self.count == 0 {
            self.min = x;
            self.max = x;
        } else {
            self.min = self.min.min(x);
            self.max = self.max.max(x);
        }
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    fn merge(mut self, o: Moments) -> Moments {
        if o.count == 0 {
            return self;
        }
        if self.count == 0 {
            return o;
        }
        let n = self.count + o.count;
        let d = o.mean - self.mean;
        self.m2 += o.m2 + d * d * (self.count as f64 * o.count as f64) / n as f64;
        self.mean += d * o.count as f64 / n as f64;
        self.min = self.min.min(o.min);
        self.max = self.max.max(o.max);
        self.count = n;
        self
    }
}

#[derive(Default, Clone)]
struct Partial {
    counts: Vec<HashMap<String, u64>>,
    numeric: Vec<Option<Moments>>,
    non_numeric: Vec<bool>,
    joint: Vec<HashMap<(String, String), u64>>,
    not_in_experiment: u64,
}

impl Partial {
    fn new(params: usize, pairs: usize) -> Self {
        Partial {
            counts: vec![HashMap::new(); params],
            numeric: vec![None; params],
            non_numeric: vec![false; params],
            joint: vec![HashMap::new(); pairs],
            not_in_experiment: 0,
        }
    }

    fn merge(mut self, o: Partial) -> Partial {
        for (mine, theirs) in self.counts.iter_mut().zip(o.counts) {
            for (k, c) in theirs {
                *mine.entry(k).or_insert(0) += c;
            }
        }
        for (mine, theirs) in self.numeric.iter_mut().zip(o.numeric) {
            *mine = match (mine.take(), theirs) {
                (Some(a), Some(b)) => Some(a.merge(b)),
                (a, b) => a.or(b),
            };
        }
        for (mine, theirs) in self.non_numeric.iter_mut().zip(o.non_numeric) {
            *mine |= theirs;
        }
        for (mine, theirs) in self.joint.iter_mut().zip(o.joint) {
            for (k, c) in theirs {
                *mine.entry(k).or_insert(0) += c;
            }
        }
        self.not_in_experiment += o.not_in_experiment;
        self
    }
}

fn cell(v: Option<&Value>) -> String {
    v.map_or_else(|| UNSET.to_string(), Value::to_canonical)
}

pub fn simulate(script: &Script, opts: &SimulationOptions<'_>) -> Result<SimulationReport, SimulationError> {
    if opts.n == 0 {
        return Err(SimulationError::NoUnits);
    }
    let params: Vec<String> = script.parameters().to_vec();
    let index_of = |p: &str| {
        params
            .iter()
            .position(|x| x == p)
            .ok_or_else(|| SimulationError::UnknownParameter(p.to_string()))
    };
    let pairs: Vec<(usize, usize)> = opts
        .pairs
        .iter()
        .map(|(a, b)| Ok((index_of(a)?, index_of(b)?)))
        .collect::<Result<_, SimulationError>>()?;

    let run = |range: std::ops::Range<u64>| -> Result<Partial, SimulationError> {
        range
            .into_par_iter()
            .try_fold(
                || Partial::new(params.len(), pairs.len()),
                |mut acc, i| {
                    let mut inputs = opts.extra_inputs.map(|g| g(i)).unwrap_or_default();
                    inputs.extend(opts.units.inputs(i));
                    let ev = script
                        .evaluate(&inputs, &opts.overrides, &opts.context)
                        .map_err(|source| SimulationError::Evaluation {
                            inputs: serde_json::to_string(&inputs).expect("values always serialize"),
                            source,
                        })?;
                    if !ev.in_experiment {
                        acc.not_in_experiment += 1;
                    }
                    let values: Vec<Option<&Value>> = params.iter().map(|p| ev.params.get(p)).collect();
                    for (k, v) in values.iter().enumerate() {
                        *acc.counts[k].entry(cell(*v)).or_insert(0) += 1;
                        match v {
                            Some(Value::Int(_) | Value::Float(_) | Value::Bool(_)) => acc.numeric[k]
                                .get_or_insert_with(Moments::default)
                                .push(v.and_then(|x| x.as_f64()).expect("numeric")),
                            Some(_) => acc.non_numeric[k] = true,
                            None => {}
                        }
                    }
                    for (j, (a, b)) in pairs.iter().enumerate() {
                        *acc.joint[j]
                            .entry((cell(values[*a]), cell(values[*b])))
                            .or_insert(0) += 1;
                    }
                    Ok(acc)
                },
            )
            .try_reduce(|| Partial::new(params.len(), pairs.len()), |a, b| Ok(a.merge(b)))
    };

    let total = match opts.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| SimulationError::Pool(e.to_string()))?
            .install(|| run(0..opts.n))?,
        None => run(0..opts.n)?,
    };

    let mut parameters = IndexMap::new();
    let mut numeric = IndexMap::new();
    for (k, name) in params.iter().enumerate() {
        let counts: BTreeMap<String, u64> = total.counts[k].iter().map(|(v, c)| (v.clone(), *c)).collect();
        let unset = counts.get(UNSET).copied().unwrap_or(0);
        let distinct = counts.len();
        parameters.insert(
            name.clone(),
            FrequencyTable {
                counts: (distinct <= MAX_CELLS).then_some(counts),
                distinct,
                unset,
            },
        );
        if let (Some(m), false) = (&total.numeric[k], total.non_numeric[k]) {
            numeric.insert(
                name.clone(),
                NumericSummary {
                    count: m.count,
                    mean: m.mean,
                    variance: if m.count > 1 { m.m2 / (m.count - 1) as f64 } else { 0.0 },
                    min: m.min,
                    max: m.max,
                },
            );
        }
    }
    let joint = pairs
        .iter()
        .zip(&total.joint)
        .map(|((a, b), cells)| joint_table(&params[*a], &params[*b], cells, opts.n))
        .collect();
    Ok(SimulationReport {
        n: opts.n,
        parameters,
        numeric,
        joint,
        not_in_experiment: total.not_in_experiment,
    })
}

fn joint_table(a: &str, b: &str, cells: &HashMap<(String, String), u64>, n: u64) -> JointTable {
    let mut counts: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    let mut row_tot: BTreeMap<&str, u64> = BTreeMap::new();
    let mut col_tot: BTreeMap<&str, u64> = BTreeMap::new();
    for ((x, y), c) in cells {
        counts.entry(x.clone()).or_default().insert(y.clone(), *c);
        *row_tot.entry(x).or_insert(0) += c;
        *col_tot.entry(y).or_insert(0) += c;
    }
    let nf = n as f64;
    let mut statistic = 0.0;
    let mut max_deviation: f64 = 0.0;
    for (x, rt) in &row_tot {
        for (y, ct) in &col_tot {
            let observed = cells
                .get(&(x.to_string(), y.to_string()))
                .copied()
                .unwrap_or(0) as f64;
            let expected = *rt as f64 * *ct as f64 / nf;
            statistic += (observed - expected).powi(2) / expected;
            max_deviation = max_deviation.max(((observed - expected) / nf).abs());
        }
    }
    JointTable {
        a: a.to_string(),
        b: b.to_string(),
        counts,
        independence: ChiSquare {
            statistic,
            dof: row_tot.len().saturating_sub(1) * col_tot.len().saturating_sub(1),
        },
        max_deviation,
    }
}

/// Pearson's goodness-of-fit statistic.
pub fn chi_square(observed: &[u64], expected: &[f64]) -> Result<ChiSquare, SimulationError> {
    if observed.len() != expected.len() {
        return Err(SimulationError::CellMismatch {
            observed: observed.len(),
            expected: expected.len(),
        });
    }
    let sum: f64 = expected.iter().sum();
    if expected.iter().any(|p| p.is_nan() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(SimulationError::BadProbabilities);
    }
    let n: u64 = observed.iter().sum();
    let mut statistic = 0.0;
    for (i, (o, p)) in observed.iter().zip(expected).enumerate() {
        let e = p * n as f64;
        if e < 5.0 {
            return Err(SimulationError::ExpectedTooSmall { cell: i, expected: e });
        }
        statistic += (*o as f64 - e).powi(2) / e;
    }
    Ok(ChiSquare {
        statistic,
        dof: observed.len().saturating_sub(1),
    })
}

/// The input to sweep when the caller names none: the only variable any
/// random operator uses as a unit, if there is exactly one.
pub fn sweep_unit(ir: &ScriptIR) -> Option<String> {
    let mut names = BTreeSet::new();
    for unit in list_units(ir).values() {
        if let UnitRef::Vars(vars) = unit {
            names.extend(vars.iter().cloned());
        }
    }
    let mut it = names.into_iter();
    match (it.next(), it.next()) {
        (Some(only), None) => Some(only),
        _ => None,
    }
}

/// Largest per-cell |P(a,b) - P(a)P(b)| for a tracked pair.
pub fn independence_table(report: &SimulationReport, a: &str, b: &str) -> Result<f64, SimulationError> {
    for p in [a, b] {
        if !report.parameters.contains_key(p) {
            return Err(SimulationError::UnknownParameter(p.to_string()));
        }
    }
    report
        .joint
        .iter()
        .find(|j| (j.a == a && j.b == b) || (j.a == b && j.b == a))
        .map(|j| j.max_deviation)
        .ok_or_else(|| SimulationError::PairNotTracked(a.to_string(), b.to_string()))
}
