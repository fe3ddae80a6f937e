//! Namespaces: a segment pool over one primary unit, shared by mutually
//! exclusive experiments, plus launch values for everyone else.
//!
//! Each unit hashes to one of `num_segments` segments under the salt
//! `name._segment._segment`. Experiment names starting with `_` are
//! reserved, so no parameter draw can share that salt. Allocation picks
//! segments from the free pool with a shuffle salted by
//! `name.experiment._alloc`; replaying the same actions reproduces the
//! same segment map.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostic::{has_errors, Diagnostic};
use crate::interpreter::{
    Assignment, AssignmentCache, EvalError, ExperimentContext, ExposureHook, Inputs, Overrides,
    Script,
};
use crate::ir::{validate_with, ValidateOptions};
use crate::random::{self, RandomError, SaltContext};
use crate::value::Value;

pub const DEFAULT_SEGMENTS: u32 = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NamespaceError {
    #[error("namespace `{0}` already exists")]
    DuplicateNamespace(String),
    #[error("no namespace named `{0}`")]
    UnknownNamespace(String),
    #[error("invalid name {name:?}: {reason}")]
    InvalidName { name: String, reason: String },
    #[error("a namespace needs at least one segment")]
    ZeroSegments,
    #[error("an experiment needs at least one segment")]
    ZeroAllocation,
    #[error("requested {requested} segments but only {available} are free")]
    InsufficientSegments { requested: u32, available: u32 },
    #[error("script has errors: {}", summarize(.0))]
    InvalidScript(Vec<Diagnostic>),
    #[error("experiment `{0}` already exists in this namespace")]
    DuplicateExperiment(String),
    #[error("no experiment named `{0}`")]
    UnknownExperiment(String),
    #[error("store is at version {actual}, request was based on {expected}")]
    VersionConflict { expected: u64, actual: u64 },
    #[error("store i/o: {0}")]
    Io(String),
    #[error("store file corrupt at line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

fn summarize(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .filter(|d| d.is_error())
        .map(|d| d.message.as_str())
        .collect::<Vec<_>>()
        .join("; ")
}

fn invalid_name(name: &str, reason: impl ToString) -> NamespaceError {
    NamespaceError::InvalidName {
        name: name.to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentStatus {
    Active,
    Deallocated,
}

#[derive(Debug, Clone)]
pub struct ExperimentDef {
    pub name: String,
    pub script: Script,
    /// Segments allocated at launch; kept after deallocation for audit.
    pub segments: BTreeSet<u32>,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub status: ExperimentStatus,
}

impl ExperimentDef {
    pub fn parameters(&self) -> &[String] {
        self.script.parameters()
    }

    pub fn is_active(&self) -> bool {
        self.status == ExperimentStatus::Active
    }
}

#[derive(Debug, Clone)]
pub struct Namespace {
    name: String,
    primary_unit: String,
    segment_salt: SaltContext,
    segment_map: Vec<Option<Arc<str>>>,
    launch_defaults: BTreeMap<String, Value>,
    experiments: IndexMap<String, ExperimentDef>,
}

impl Namespace {
    pub fn new(
        name: &str,
        primary_unit: &str,
        num_segments: u32,
        launch_defaults: BTreeMap<String, Value>,
    ) -> Result<Self, NamespaceError> {
        let segment_salt =
            SaltContext::new(name, "_segment", "_segment").map_err(|e| invalid_name(name, e))?;
        if !crate::ir::is_identifier(primary_unit) {
            return Err(invalid_name(primary_unit, "primary unit must be an identifier"));
        }
        if num_segments == 0 {
            return Err(NamespaceError::ZeroSegments);
        }
        Ok(Namespace {
            name: name.to_string(),
            primary_unit: primary_unit.to_string(),
            segment_salt,
            segment_map: vec![None; num_segments as usize],
            launch_defaults,
            experiments: IndexMap::new(),
        })
    }

    /// Rebuilds a namespace from stored experiments, deriving the segment
    /// map from the active ones.
    pub fn restore(
        name: &str,
        primary_unit: &str,
        num_segments: u32,
        launch_defaults: BTreeMap<String, Value>,
        experiments: Vec<ExperimentDef>,
    ) -> Result<Self, NamespaceError> {
        let mut ns = Namespace::new(name, primary_unit, num_segments, launch_defaults)?;
        for exp in experiments {
            if exp.is_active() {
                let tag: Arc<str> = exp.name.as_str().into();
                for s in &exp.segments {
                    let slot = ns.segment_map.get_mut(*s as usize).ok_or_else(|| {
                        invalid_name(&exp.name, format!("segment {s} out of range"))
                    })?;
                    if slot.is_some() {
                        return Err(invalid_name(&exp.name, format!("segment {s} allocated twice")));
                    }
                    *slot = Some(tag.clone());
                }
            }
            if ns.experiments.insert(exp.name.clone(), exp).is_some() {
                return Err(invalid_name(name, "duplicate experiment"));
            }
        }
        Ok(ns)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn primary_unit(&self) -> &str {
        &self.primary_unit
    }

    pub fn num_segments(&self) -> u32 {
        self.segment_map.len() as u32
    }

    /// Experiment name per segment, `None` where unallocated.
    pub fn segment_map(&self) -> &[Option<Arc<str>>] {
        &self.segment_map
    }

    pub fn launch_defaults(&self) -> &BTreeMap<String, Value> {
        &self.launch_defaults
    }

    pub fn experiments(&self) -> impl Iterator<Item = &ExperimentDef> {
        self.experiments.values()
    }

    pub fn experiment(&self, name: &str) -> Option<&ExperimentDef> {
        self.experiments.get(name)
    }

    pub fn free_segments(&self) -> u32 {
        self.segment_map.iter().filter(|s| s.is_none()).count() as u32
    }

    pub fn segment_of(&self, unit: &Value) -> Result<u32, RandomError> {
        let draw = random::hash_draw(&self.segment_salt, &random::units_of(unit), None)?;
        Ok((draw.value % self.segment_map.len() as u64) as u32)
    }

    /// Launches `script` on `count` segments drawn from the free pool.
    pub fn allocate(
        &mut self,
        experiment: &str,
        script: Script,
        count: u32,
        created_at: u64,
    ) -> Result<&ExperimentDef, NamespaceError> {
        ExperimentContext::new(&self.name, experiment).map_err(|e| invalid_name(experiment, e))?;
        if experiment.starts_with('_') {
            return Err(invalid_name(experiment, "names starting with '_' are reserved"));
        }
        if self.experiments.contains_key(experiment) {
            return Err(NamespaceError::DuplicateExperiment(experiment.to_string()));
        }
        let inputs = [self.primary_unit.clone()];
        let diags = validate_with(
            script.ir(),
            ValidateOptions {
                registry: script.registry(),
                inputs: &inputs,
            },
        );
        if has_errors(&diags) {
            return Err(NamespaceError::InvalidScript(diags));
        }
        if count == 0 {
            return Err(NamespaceError::ZeroAllocation);
        }
        let free: Vec<Value> = (0..self.num_segments())
            .filter(|s| self.segment_map[*s as usize].is_none())
            .map(|s| Value::Int(s.into()))
            .collect();
        if count as usize > free.len() {
            return Err(NamespaceError::InsufficientSegments {
                requested: count,
                available: free.len() as u32,
            });
        }
        let salt = SaltContext::new(&self.name, experiment, "_alloc")
            .map_err(|e| invalid_name(experiment, e))?;
        let pool_size = Value::Int(free.len() as i64);
        let chosen = random::sample(&free, count.into(), &salt, &[pool_size])
            .expect("count was checked against the pool");
        let segments: BTreeSet<u32> = chosen
            .iter()
            .map(|v| v.as_int().expect("segment ids are integers") as u32)
            .collect();
        let tag: Arc<str> = experiment.into();
        for s in &segments {
            self.segment_map[*s as usize] = Some(tag.clone());
        }
        self.experiments.insert(
            experiment.to_string(),
            ExperimentDef {
                name: experiment.to_string(),
                script,
                segments,
                created_at,
                status: ExperimentStatus::Active,
            },
        );
        Ok(&self.experiments[experiment])
    }

    /// Returns the experiment's segments to the free pool. Deallocating
    /// twice is a no-op; the previous status is returned either way.
    pub fn deallocate(&mut self, experiment: &str) -> Result<ExperimentStatus, NamespaceError> {
        let def = self
            .experiments
            .get_mut(experiment)
            .ok_or_else(|| NamespaceError::UnknownExperiment(experiment.to_string()))?;
        let prior = def.status;
        if prior == ExperimentStatus::Active {
            for s in &def.segments {
                self.segment_map[*s as usize] = None;
            }
            def.status = ExperimentStatus::Deallocated;
        }
        Ok(prior)
    }

    pub fn set_launch_value(&mut self, parameter: &str, value: Value) {
        self.launch_defaults.insert(parameter.to_string(), value);
    }

    pub fn unset_launch_value(&mut self, parameter: &str) -> Option<Value> {
        self.launch_defaults.remove(parameter)
    }

    /// Parameters set by more than one active experiment. Segments keep
    /// them apart, so this is informational.
    pub fn shared_parameters(&self) -> BTreeMap<String, Vec<String>> {
        let mut by_param: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for exp in self.experiments.values().filter(|e| e.is_active()) {
            for p in exp.parameters() {
                by_param.entry(p.clone()).or_default().push(exp.name.clone());
            }
        }
        by_param.retain(|_, exps| exps.len() > 1);
        by_param
    }

    /// Routes a unit to its experiment, if any, and evaluates it there.
    pub fn assign(
        &self,
        unit: &Value,
        extra_inputs: &Inputs,
        overrides: &Overrides,
        cache: Option<&AssignmentCache>,
        hook: Option<&ExposureHook>,
    ) -> Result<NamespaceAssignment, EvalError> {
        let segment = self.segment_of(unit).map_err(|source| EvalError::Random {
            op: "segment".into(),
            source,
        })?;
        let mut inputs = extra_inputs.clone();
        inputs.insert(self.primary_unit.clone(), unit.clone());

        let experiment = self.segment_map[segment as usize].clone();
        let assignment = match &experiment {
            None => None,
            Some(exp) => {
                let def = &self.experiments[exp.as_ref()];
                let ctx = ExperimentContext::new(&self.name, exp).map_err(|source| {
                    EvalError::Random {
                        op: "segment".into(),
                        source,
                    }
                })?;
                let data = match cache {
                    Some(c) => c.get_or_evaluate(&def.script, &inputs, overrides, &ctx)?,
                    None => Arc::new(def.script.evaluate(&inputs, overrides, &ctx)?),
                };
                let a = Assignment::from_shared(data);
                Some(match hook {
                    Some(h) => a.with_hook(h.clone()),
                    None => a,
                })
            }
        };
        Ok(NamespaceAssignment {
            namespace: self.name.clone(),
            segment,
            experiment: experiment.map(|e| e.to_string()),
            assignment,
            defaults: self.launch_defaults.clone(),
            inputs,
            overrides: overrides.clone(),
        })
    }
}

/// Result of routing one unit through a namespace.
#[derive(Debug)]
pub struct NamespaceAssignment {
    pub namespace: String,
    pub segment: u32,
    pub experiment: Option<String>,
    assignment: Option<Assignment>,
    defaults: BTreeMap<String, Value>,
    inputs: Inputs,
    overrides: Overrides,
}

impl NamespaceAssignment {
    /// The experiment's value if its script set `name` (logging an
    /// exposure), else an override, else the launch value, else `default`.
    pub fn get(&self, name: &str, default: Option<Value>) -> Value {
        if let Some(a) = &self.assignment {
            if a.params.contains_key(name) {
                return a.get(name, None);
            }
        }
        self.overrides
            .get(name)
            .or_else(|| self.defaults.get(name))
            .cloned()
            .or(default)
            .unwrap_or(Value::Null)
    }

    pub fn assignment(&self) -> Option<&Assignment> {
        self.assignment.as_ref()
    }

    pub fn exposure_logged(&self) -> bool {
        self.assignment.as_ref().is_some_and(|a| a.exposed())
    }

    pub fn in_experiment(&self) -> bool {
        self.assignment.as_ref().is_some_and(|a| a.in_experiment)
    }

    /// Every parameter this unit would see: the experiment's values in
    /// script order, then launch values, then frozen names that are not
    /// inputs. Reading this does not log an exposure.
    pub fn params(&self) -> IndexMap<String, Value> {
        let mut out: IndexMap<String, Value> = self
            .assignment
            .as_ref()
            .map(|a| a.params.clone())
            .unwrap_or_default();
        for (k, v) in &self.defaults {
            if !out.contains_key(k) {
                out.insert(k.clone(), self.overrides.get(k).unwrap_or(v).clone());
            }
        }
        for (k, v) in &self.overrides {
            if !out.contains_key(k) && !self.inputs.contains_key(k) {
                out.insert(k.clone(), v.clone());
            }
        }
        out
    }
}
