//! Versioned namespace store with lock-free reads.
//!
//! The whole store is an immutable [`StoreState`] behind an atomic pointer.
//! Readers load the current pointer and never block. Writers go through
//! one mutex: check the expected version, apply the action to a copy,
//! append it to the log file, then swap the pointer.
//!
//! # File format
//!
//! One JSON record per line:
//!
//! ```text
//! {"kind":"action","version":3,"action":{"action":"set_launch_value",...}}
//! {"kind":"snapshot","version":100,"namespaces":[...]}
//! ```
//!
//! Loading starts from the last snapshot and replays the actions after it.
//! A final line without a trailing newline is a torn write and is dropped.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use arc_swap::ArcSwap;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::interpreter::{
    AssignmentCache, EvalError, ExposureHook, Inputs, Overrides, Script,
};
use crate::ir;
use crate::namespace::{ExperimentStatus, Namespace, NamespaceAssignment, NamespaceError};
use crate::registry::OperatorRegistry;
use crate::value::Value;

/// Actions between automatic snapshots.
pub const SNAPSHOT_EVERY: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    CreateNamespace {
        name: String,
        primary_unit: String,
        num_segments: u32,
        #[serde(default)]
        launch_defaults: BTreeMap<String, Value>,
    },
    AllocateExperiment {
        namespace: String,
        experiment: String,
        /// Script IR in its JSON form.
        script: Json,
        segments: u32,
        created_at: u64,
    },
    DeallocateExperiment {
        namespace: String,
        experiment: String,
    },
    SetLaunchValue {
        namespace: String,
        parameter: String,
        value: Value,
    },
    UnsetLaunchValue {
        namespace: String,
        parameter: String,
    },
}

#[derive(Debug, Clone, Default)]
pub struct StoreState {
    pub version: u64,
    pub namespaces: BTreeMap<String, Arc<Namespace>>,
}

impl StoreState {
    pub fn namespace(&self, name: &str) -> Result<&Arc<Namespace>, NamespaceError> {
        self.namespaces
            .get(name)
            .ok_or_else(|| NamespaceError::UnknownNamespace(name.to_string()))
    }

    /// Applies `action` to a copy of this state, bumping the version.
    pub fn apply(
        &self,
        action: &Action,
        registry: Option<&Arc<OperatorRegistry>>,
    ) -> Result<StoreState, NamespaceError> {
        let mut next = self.clone();
        next.version += 1;
        match action {
            Action::CreateNamespace {
                name,
                primary_unit,
                num_segments,
                launch_defaults,
            } => {
                if next.namespaces.contains_key(name) {
                    return Err(NamespaceError::DuplicateNamespace(name.clone()));
                }
                let ns = Namespace::new(name, primary_unit, *num_segments, launch_defaults.clone())?;
                next.namespaces.insert(name.clone(), Arc::new(ns));
            }
            Action::AllocateExperiment {
                namespace,
                experiment,
                script,
                segments,
                created_at,
            } => {
                let ir = ir::from_json(script).map_err(|e| {
                    NamespaceError::InvalidScript(vec![crate::Diagnostic::error(e.to_string())])
                })?;
                let mut script = Script::new(ir);
                if let Some(r) = registry {
                    script = script.with_registry(r.clone());
                }
                next.edit(namespace, |ns| {
                    ns.allocate(experiment, script, *segments, *created_at).map(|_| ())
                })?;
            }
            Action::DeallocateExperiment {
                namespace,
                experiment,
            } => next.edit(namespace, |ns| ns.deallocate(experiment).map(|_| ()))?,
            Action::SetLaunchValue {
                namespace,
                parameter,
                value,
            } => next.edit(namespace, |ns| {
                ns.set_launch_value(parameter, value.clone());
                Ok(())
            })?,
            Action::UnsetLaunchValue {
                namespace,
                parameter,
            } => next.edit(namespace, |ns| {
                ns.unset_launch_value(parameter);
                Ok(())
            })?,
        }
        Ok(next)
    }

    fn edit(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Namespace) -> Result<(), NamespaceError>,
    ) -> Result<(), NamespaceError> {
        let slot = self
            .namespaces
            .get_mut(name)
            .ok_or_else(|| NamespaceError::UnknownNamespace(name.to_string()))?;
        let mut ns = Namespace::clone(slot);
        f(&mut ns)?;
        *slot = Arc::new(ns);
        Ok(())
    }

    /// Parameters set by active experiments in more than one namespace,
    /// mapped to those namespaces. Such parameters can reach one unit
    /// twice, which segment exclusivity cannot prevent.
    pub fn cross_namespace_parameters(&self) -> BTreeMap<String, Vec<String>> {
        let mut by_param: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for ns in self.namespaces.values() {
            let mut params: Vec<&String> = ns
                .experiments()
                .filter(|e| e.is_active())
                .flat_map(|e| e.parameters())
                .collect();
            params.sort();
            params.dedup();
            for p in params {
                by_param.entry(p.clone()).or_default().push(ns.name().to_string());
            }
        }
        by_param.retain(|_, v| v.len() > 1);
        by_param
    }
}

#[derive(Serialize, Deserialize)]
struct ExperimentRecord {
    name: String,
    script: Json,
    segments: Vec<u32>,
    created_at: u64,
    status: ExperimentStatus,
}

#[derive(Serialize, Deserialize)]
struct NamespaceRecord {
    name: String,
    primary_unit: String,
    num_segments: u32,
    launch_defaults: BTreeMap<String, Value>,
    experiments: Vec<ExperimentRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Action { version: u64, action: Action },
    Snapshot { version: u64, namespaces: Vec<NamespaceRecord> },
}

fn snapshot_of(state: &StoreState) -> Record {
    Record::Snapshot {
        version: state.version,
        namespaces: state
            .namespaces
            .values()
            .map(|ns| NamespaceRecord {
                name: ns.name().to_string(),
                primary_unit: ns.primary_unit().to_string(),
                num_segments: ns.num_segments(),
                launch_defaults: ns.launch_defaults().clone(),
                experiments: ns
                    .experiments()
                    .map(|e| ExperimentRecord {
                        name: e.name.clone(),
                        script: ir::to_json(e.script.ir()),
                        segments: e.segments.iter().copied().collect(),
                        created_at: e.created_at,
                        status: e.status,
                    })
                    .collect(),
            })
            .collect(),
    }
}

fn restore(
    version: u64,
    records: Vec<NamespaceRecord>,
    registry: Option<&Arc<OperatorRegistry>>,
    line: usize,
) -> Result<StoreState, NamespaceError> {
    let corrupt = |message: String| NamespaceError::Corrupt { line, message };
    let mut namespaces = BTreeMap::new();
    for rec in records {
        let ns = Namespace::restore(
            &rec.name,
            &rec.primary_unit,
            rec.num_segments,
            rec.launch_defaults,
            rec.experiments
                .into_iter()
                .map(|e| {
                    let ir = ir::from_json(&e.script).map_err(|err| corrupt(err.to_string()))?;
                    let mut script = Script::new(ir);
                    if let Some(r) = registry {
                        script = script.with_registry(r.clone());
                    }
                    Ok(crate::namespace::ExperimentDef {
                        name: e.name,
                        script,
                        segments: e.segments.into_iter().collect(),
                        created_at: e.created_at,
                        status: e.status,
                    })
                })
                .collect::<Result<Vec<_>, NamespaceError>>()?,
        )
        .map_err(|e| corrupt(e.to_string()))?;
        namespaces.insert(rec.name, Arc::new(ns));
    }
    Ok(StoreState {
        version,
        namespaces,
    })
}

fn io_err(e: std::io::Error) -> NamespaceError {
    NamespaceError::Io(e.to_string())
}

struct LogFile {
    path: PathBuf,
    file: File,
    since_snapshot: u64,
}

impl LogFile {
    fn append(&mut self, record: &Record) -> Result<(), NamespaceError> {
        let mut line = serde_json::to_string(record).expect("records always serialize");
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(io_err)?;
        self.file.sync_data().map_err(io_err)
    }
}

/// Reads a store file, dropping a torn final line. Returns the state and
/// the number of actions after the last snapshot.
fn load(
    path: &Path,
    registry: Option<&Arc<OperatorRegistry>>,
) -> Result<(StoreState, u64), NamespaceError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((StoreState::default(), 0)),
        Err(e) => return Err(io_err(e)),
    };
    let mut lines = Vec::new();
    let mut reader = BufReader::new(file);
    let mut good_len = 0u64;
    loop {
        let mut buf = String::new();
        let n = reader.read_line(&mut buf).map_err(io_err)?;
        if n == 0 {
            break;
        }
        if !buf.ends_with('\n') {
            // Torn write: the process died mid-append.
            break;
        }
        good_len += n as u64;
        lines.push(buf);
    }
    let on_disk = std::fs::metadata(path).map_err(io_err)?.len();
    if on_disk != good_len {
        let f = OpenOptions::new().write(true).open(path).map_err(io_err)?;
        f.set_len(good_len).map_err(io_err)?;
        f.sync_data().map_err(io_err)?;
    }

    let mut records = Vec::with_capacity(lines.len());
    for (i, text) in lines.iter().enumerate() {
        if text.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(text).map_err(|e| NamespaceError::Corrupt {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push((i + 1, rec));
    }
    let start = records
        .iter()
        .rposition(|(_, r)| matches!(r, Record::Snapshot { .. }));
    let mut state = StoreState::default();
    let mut since = 0;
    let tail = match start {
        Some(idx) => {
            let rest = records.split_off(idx + 1);
            if let Some((line, Record::Snapshot { version, namespaces })) = records.pop() {
                state = restore(version, namespaces, registry, line)?;
            }
            rest
        }
        None => records,
    };
    for (line, rec) in tail {
        match rec {
            Record::Action { version, action } => {
                if version != state.version + 1 {
                    return Err(NamespaceError::Corrupt {
                        line,
                        message: format!("expected version {}, found {version}", state.version + 1),
                    });
                }
                state = state.apply(&action, registry).map_err(|e| NamespaceError::Corrupt {
                    line,
                    message: e.to_string(),
                })?;
                since += 1;
            }
            Record::Snapshot { .. } => unreachable!("only records after the last snapshot"),
        }
    }
    Ok((state, since))
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Owns the store and serves assignments from its current snapshot.
pub struct NamespaceManager {
    state: ArcSwap<StoreState>,
    writer: Mutex<Option<LogFile>>,
    registry: Option<Arc<OperatorRegistry>>,
    cache: AssignmentCache,
    hook: Option<ExposureHook>,
}

impl Default for NamespaceManager {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl NamespaceManager {
    pub fn in_memory() -> Self {
        NamespaceManager {
            state: ArcSwap::from_pointee(StoreState::default()),
            writer: Mutex::new(None),
            registry: None,
            cache: AssignmentCache::default(),
            hook: None,
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, NamespaceError> {
        Self::open_with_registry(path, None)
    }

    pub fn open_with_registry(
        path: impl AsRef<Path>,
        registry: Option<Arc<OperatorRegistry>>,
    ) -> Result<Self, NamespaceError> {
        let path = path.as_ref().to_path_buf();
        let (state, since) = load(&path, registry.as_ref())?;
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err)?;
        file.seek(SeekFrom::End(0)).map_err(io_err)?;
        Ok(NamespaceManager {
            state: ArcSwap::from_pointee(state),
            writer: Mutex::new(Some(LogFile {
                path,
                file,
                since_snapshot: since,
            })),
            registry,
            cache: AssignmentCache::default(),
            hook: None,
        })
    }

    /// Scripts allocated after this call may use the registry's operators.
    pub fn with_registry(mut self, registry: Arc<OperatorRegistry>) -> Self {
        self.registry = Some(registry);
        self
    }

    /// Called once per exposed assignment.
    pub fn with_exposure_hook(mut self, hook: ExposureHook) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn snapshot(&self) -> Arc<StoreState> {
        self.state.load_full()
    }

    pub fn version(&self) -> u64 {
        self.state.load().version
    }

    /// Applies one action if the store is still at `expected` (any version
    /// when `None`). Returns the states before and after.
    pub fn commit(
        &self,
        expected: Option<u64>,
        action: Action,
    ) -> Result<(Arc<StoreState>, Arc<StoreState>), NamespaceError> {
        let mut writer = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let before = self.state.load_full();
        if let Some(v) = expected {
            if v != before.version {
                return Err(NamespaceError::VersionConflict {
                    expected: v,
                    actual: before.version,
                });
            }
        }
        let after = Arc::new(before.apply(&action, self.registry.as_ref())?);
        if let Some(log) = writer.as_mut() {
            log.append(&Record::Action {
                version: after.version,
                action,
            })?;
            log.since_snapshot += 1;
            if log.since_snapshot >= SNAPSHOT_EVERY {
                log.append(&snapshot_of(&after))?;
                log.since_snapshot = 0;
            }
        }
        self.state.store(after.clone());
        Ok((before, after))
    }

    /// Rewrites the store file as a single snapshot.
    pub fn compact(&self) -> Result<(), NamespaceError> {
        let mut writer = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let Some(log) = writer.as_mut() else {
            return Ok(());
        };
        let state = self.state.load_full();
        let tmp = log.path.with_extension("compact.tmp");
        let mut line = serde_json::to_string(&snapshot_of(&state)).expect("records always serialize");
        line.push('\n');
        {
            let mut f = File::create(&tmp).map_err(io_err)?;
            f.write_all(line.as_bytes()).map_err(io_err)?;
            f.sync_all().map_err(io_err)?;
        }
        std::fs::rename(&tmp, &log.path).map_err(io_err)?;
        log.file = OpenOptions::new()
            .append(true)
            .open(&log.path)
            .map_err(io_err)?;
        log.since_snapshot = 0;
        Ok(())
    }

    pub fn create_namespace(
        &self,
        expected: Option<u64>,
        name: &str,
        primary_unit: &str,
        num_segments: u32,
        launch_defaults: BTreeMap<String, Value>,
    ) -> Result<u64, NamespaceError> {
        let action = Action::CreateNamespace {
            name: name.to_string(),
            primary_unit: primary_unit.to_string(),
            num_segments,
            launch_defaults,
        };
        Ok(self.commit(expected, action)?.1.version)
    }

    pub fn allocate(
        &self,
        expected: Option<u64>,
        namespace: &str,
        experiment: &str,
        script: &crate::ScriptIR,
        segments: u32,
    ) -> Result<u64, NamespaceError> {
        let action = Action::AllocateExperiment {
            namespace: namespace.to_string(),
            experiment: experiment.to_string(),
            script: ir::to_json(script),
            segments,
            created_at: now_ms(),
        };
        Ok(self.commit(expected, action)?.1.version)
    }

    /// Returns the new version and the experiment's status before the call.
    pub fn deallocate(
        &self,
        expected: Option<u64>,
        namespace: &str,
        experiment: &str,
    ) -> Result<(u64, ExperimentStatus), NamespaceError> {
        let action = Action::DeallocateExperiment {
            namespace: namespace.to_string(),
            experiment: experiment.to_string(),
        };
        let (before, after) = self.commit(expected, action)?;
        let prior = before
            .namespace(namespace)?
            .experiment(experiment)
            .map(|e| e.status)
            .ok_or_else(|| NamespaceError::UnknownExperiment(experiment.to_string()))?;
        Ok((after.version, prior))
    }

    pub fn set_launch_value(
        &self,
        expected: Option<u64>,
        namespace: &str,
        parameter: &str,
        value: Value,
    ) -> Result<u64, NamespaceError> {
        let action = Action::SetLaunchValue {
            namespace: namespace.to_string(),
            parameter: parameter.to_string(),
            value,
        };
        Ok(self.commit(expected, action)?.1.version)
    }

    pub fn assign(
        &self,
        namespace: &str,
        unit: &Value,
        extra_inputs: &Inputs,
        overrides: &Overrides,
    ) -> Result<NamespaceAssignment, AssignError> {
        let state = self.state.load();
        let ns = state
            .namespace(namespace)
            .map_err(|_| AssignError::UnknownNamespace(namespace.to_string()))?;
        ns.assign(unit, extra_inputs, overrides, Some(&self.cache), self.hook.as_ref())
            .map_err(AssignError::Eval)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AssignError {
    #[error("no namespace named `{0}`")]
    UnknownNamespace(String),
    #[error(transparent)]
    Eval(EvalError),
}
