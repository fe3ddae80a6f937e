//! HTTP API over a [`NamespaceManager`].
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/namespaces` | summaries, store version, cross-namespace warnings |
//! | POST | `/namespaces` | create |
//! | GET | `/namespaces/:ns` | experiments with their scripts |
//! | GET | `/namespaces/:ns/segments` | segment map |
//! | POST | `/namespaces/:ns/experiments` | allocate |
//! | POST | `/namespaces/:ns/experiments/:exp/deallocate` | deallocate |
//! | PUT, DELETE | `/namespaces/:ns/defaults/:param` | launch values |
//! | GET | `/namespaces/:ns/assignment?unit=..&ns_<ns>=p:v,..` | assign one unit |
//! | POST | `/compile` | DSL to IR with diagnostics |
//! | POST | `/simulate` | Monte-Carlo report for a draft |
//!
//! Mutations carry the `expected_version` the client last read and return
//! the new `version`. A stale version gets 409.

mod error;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use planout::dsl::{decompile, parse};
use planout::interpreter::{ExperimentContext, Inputs};
use planout::ir::{self, list_parameters, list_units};
use planout::namespace::{ExperimentDef, DEFAULT_SEGMENTS};
use planout::overrides::parse_override_string;
use planout::simulator::{simulate, sweep_unit, SimulationOptions, UnitSpec};
use planout::store::Action;
use planout::{Diagnostic, Namespace, NamespaceManager, Overrides, Script, ScriptIR, Value};
use serde::Deserialize;
use serde_json::{json, Value as JsonValue};
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use error::ApiError;

/// Largest `n` accepted by `/simulate`.
pub const MAX_SIMULATION_UNITS: u64 = 5_000_000;

type ApiResult<T = Json<JsonValue>> = Result<T, ApiError>;

#[derive(Clone)]
pub struct AppState {
    manager: Arc<NamespaceManager>,
    cors_origin: Option<String>,
}

impl AppState {
    pub fn new(manager: Arc<NamespaceManager>) -> Self {
        AppState {
            manager,
            cors_origin: None,
        }
    }

    /// Restricts CORS to one origin. Any origin is allowed otherwise.
    pub fn with_cors_origin(mut self, origin: impl Into<String>) -> Self {
        self.cors_origin = Some(origin.into());
        self
    }

    pub fn manager(&self) -> &Arc<NamespaceManager> {
        &self.manager
    }
}

pub fn router(state: AppState) -> Router {
    let origin = match state.cors_origin.as_deref().map(HeaderValue::from_str) {
        Some(Ok(v)) => AllowOrigin::exact(v),
        _ => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST, Method::PUT, Method::DELETE])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    Router::new()
        .route("/namespaces", get(list_namespaces).post(create_namespace))
        .route("/namespaces/:ns", get(namespace_detail))
        .route("/namespaces/:ns/segments", get(segments))
        .route("/namespaces/:ns/experiments", post(allocate))
        .route("/namespaces/:ns/experiments/:exp/deallocate", post(deallocate))
        .route(
            "/namespaces/:ns/defaults/:param",
            put(set_default).delete(unset_default),
        )
        .route("/namespaces/:ns/assignment", get(assignment))
        .route("/compile", post(compile))
        .route("/simulate", post(simulate_draft))
        .layer(cors)
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn namespace_summary(ns: &Namespace) -> JsonValue {
    let experiments: Vec<JsonValue> = ns
        .experiments()
        .map(|e| {
            json!({
                "name": e.name,
                "status": e.status,
                "segments": e.segments.len(),
                "created_at": e.created_at,
                "parameters": e.parameters(),
            })
        })
        .collect();
    json!({
        "name": ns.name(),
        "primary_unit": ns.primary_unit(),
        "num_segments": ns.num_segments(),
        "free_segments": ns.free_segments(),
        "launch_defaults": ns.launch_defaults(),
        "experiments": experiments,
    })
}

fn experiment_detail(e: &ExperimentDef) -> JsonValue {
    json!({
        "name": e.name,
        "status": e.status,
        "created_at": e.created_at,
        "segments": e.segments,
        "parameters": e.parameters(),
        "digest": e.script.digest(),
        "source": decompile(e.script.ir()),
        "ir": ir::to_json(e.script.ir()),
    })
}

async fn list_namespaces(State(st): State<AppState>) -> ApiResult {
    let state = st.manager.snapshot();
    let namespaces: Vec<JsonValue> = state.namespaces.values().map(|ns| namespace_summary(ns)).collect();
    Ok(Json(json!({
        "version": state.version,
        "namespaces": namespaces,
        "shared_parameters": state.cross_namespace_parameters(),
    })))
}

#[derive(Deserialize)]
struct CreateNamespace {
    expected_version: u64,
    name: String,
    primary_unit: String,
    #[serde(default = "default_segments")]
    num_segments: u32,
    #[serde(default)]
    launch_defaults: BTreeMap<String, Value>,
}

fn default_segments() -> u32 {
    DEFAULT_SEGMENTS
}

async fn create_namespace(
    State(st): State<AppState>,
    body: Result<Json<CreateNamespace>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<JsonValue>)> {
    let Json(b) = body?;
    let version = st.manager.create_namespace(
        Some(b.expected_version),
        &b.name,
        &b.primary_unit,
        b.num_segments,
        b.launch_defaults,
    )?;
    Ok((StatusCode::CREATED, Json(json!({ "version": version }))))
}

async fn namespace_detail(State(st): State<AppState>, Path(name): Path<String>) -> ApiResult {
    let state = st.manager.snapshot();
    let ns = state.namespace(&name)?;
    let mut body = namespace_summary(ns);
    body["experiments"] = ns.experiments().map(experiment_detail).collect();
    body["shared_parameters"] = json!(ns.shared_parameters());
    Ok(Json(json!({ "version": state.version, "namespace": body })))
}

async fn segments(State(st): State<AppState>, Path(name): Path<String>) -> ApiResult {
    let state = st.manager.snapshot();
    let ns = state.namespace(&name)?;
    let mut allocation: BTreeMap<&str, u32> = BTreeMap::new();
    for exp in ns.segment_map().iter().flatten() {
        *allocation.entry(exp).or_default() += 1;
    }
    Ok(Json(json!({
        "version": state.version,
        "num_segments": ns.num_segments(),
        "free_segments": ns.free_segments(),
        "allocation": allocation,
        "segments": ns.segment_map().iter().map(|s| s.as_deref()).collect::<Vec<_>>(),
    })))
}

/// A script given either as DSL text or as IR JSON.
#[derive(Deserialize)]
struct ScriptSource {
    #[serde(default)]
    script: Option<String>,
    #[serde(default)]
    ir: Option<JsonValue>,
}

impl ScriptSource {
    fn compile(&self) -> Result<ScriptIR, ApiError> {
        match (&self.script, &self.ir) {
            (Some(src), None) => parse(src).map_err(ApiError::invalid_script),
            (None, Some(j)) => ir::from_json(j)
                .map_err(|e| ApiError::invalid_script(vec![Diagnostic::error(e.to_string())])),
            _ => Err(ApiError::bad_request(
                "give exactly one of `script` (source text) or `ir`",
            )),
        }
    }
}

#[derive(Deserialize)]
struct Allocate {
    expected_version: u64,
    name: String,
    segments: u32,
    #[serde(flatten)]
    source: ScriptSource,
}

async fn allocate(
    State(st): State<AppState>,
    Path(ns): Path<String>,
    body: Result<Json<Allocate>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<JsonValue>)> {
    let Json(b) = body?;
    let ir = b.source.compile()?;
    let version = st
        .manager
        .allocate(Some(b.expected_version), &ns, &b.name, &ir, b.segments)?;
    let state = st.manager.snapshot();
    let exp = state.namespace(&ns)?.experiment(&b.name).map(experiment_detail);
    Ok((
        StatusCode::CREATED,
        Json(json!({ "version": version, "experiment": exp })),
    ))
}

#[derive(Deserialize)]
struct Versioned {
    expected_version: u64,
}

async fn deallocate(
    State(st): State<AppState>,
    Path((ns, exp)): Path<(String, String)>,
    body: Result<Json<Versioned>, JsonRejection>,
) -> ApiResult {
    let Json(b) = body?;
    let (version, prior) = st.manager.deallocate(Some(b.expected_version), &ns, &exp)?;
    Ok(Json(json!({ "version": version, "prior_status": prior })))
}

#[derive(Deserialize)]
struct SetDefault {
    expected_version: u64,
    value: Value,
}

async fn set_default(
    State(st): State<AppState>,
    Path((ns, param)): Path<(String, String)>,
    body: Result<Json<SetDefault>, JsonRejection>,
) -> ApiResult {
    let Json(b) = body?;
    let version = st
        .manager
        .set_launch_value(Some(b.expected_version), &ns, &param, b.value)?;
    Ok(Json(json!({ "version": version })))
}

async fn unset_default(
    State(st): State<AppState>,
    Path((ns, param)): Path<(String, String)>,
    body: Result<Json<Versioned>, JsonRejection>,
) -> ApiResult {
    let Json(b) = body?;
    let action = Action::UnsetLaunchValue {
        namespace: ns,
        parameter: param,
    };
    let (_, after) = st.manager.commit(Some(b.expected_version), action)?;
    Ok(Json(json!({ "version": after.version })))
}

/// Query values are typed like override values. `ns_<namespace>` holds
/// the override string; everything else is an input.
async fn assignment(
    State(st): State<AppState>,
    Path(ns_name): Path<String>,
    query: Result<Query<HashMap<String, String>>, QueryRejection>,
) -> ApiResult {
    let Query(query) = query?;
    let state = st.manager.snapshot();
    let ns = state.namespace(&ns_name)?;
    let override_key = format!("ns_{ns_name}");
    let overrides = match query.get(&override_key) {
        Some(raw) => parse_override_string(raw)?,
        None => Overrides::new(),
    };
    let mut inputs: Inputs = query
        .iter()
        .filter(|(k, _)| **k != override_key)
        .map(|(k, v)| (k.clone(), Value::parse_typed(v)))
        .collect();
    let unit = inputs.remove(ns.primary_unit()).ok_or_else(|| {
        ApiError::bad_request(format!(
            "missing primary unit `{}` in query",
            ns.primary_unit()
        ))
    })?;
    let a = st.manager.assign(&ns_name, &unit, &inputs, &overrides)?;
    // The caller receives every parameter, so this counts as a read.
    if let Some(assignment) = a.assignment() {
        assignment.expose();
    }
    Ok(Json(json!({
        "version": state.version,
        "namespace": a.namespace,
        "segment": a.segment,
        "experiment": a.experiment,
        "in_experiment": a.in_experiment(),
        "params": a.params(),
        "overrides": overrides,
        "exposure_logged": a.exposure_logged(),
    })))
}

async fn compile(body: Result<Json<ScriptSource>, JsonRejection>) -> ApiResult {
    let Json(b) = body?;
    let ir = b.compile()?;
    let diagnostics = ir::validate(&ir);
    if diagnostics.iter().any(Diagnostic::is_error) {
        return Err(ApiError::invalid_script(diagnostics));
    }
    Ok(Json(json!({
        "ir": ir::to_json(&ir),
        "digest": ir.digest(),
        "source": decompile(&ir),
        "parameters": list_parameters(&ir),
        "units": list_units(&ir),
        "diagnostics": diagnostics,
    })))
}

#[derive(Deserialize)]
struct SimulateRequest {
    #[serde(flatten)]
    source: ScriptSource,
    n: u64,
    /// Input swept sequentially. Inferred when the script randomizes over
    /// exactly one input.
    #[serde(default)]
    unit: Option<String>,
    /// Sweep a grid instead: `[["viewerid", 500], ["storyid", 400]]`.
    #[serde(default)]
    grid: Option<Vec<(String, u64)>>,
    /// Use hashed ids instead of `0..n`.
    #[serde(default)]
    hashed: bool,
    #[serde(default)]
    pairs: Vec<(String, String)>,
    #[serde(default)]
    overrides: String,
    /// Inputs held constant for every unit.
    #[serde(default)]
    inputs: Inputs,
    #[serde(default)]
    namespace: Option<String>,
    #[serde(default)]
    experiment: Option<String>,
}

async fn simulate_draft(body: Result<Json<SimulateRequest>, JsonRejection>) -> ApiResult {
    let Json(b) = body?;
    let ir = b.source.compile()?;
    let diagnostics = ir::validate(&ir);
    if diagnostics.iter().any(Diagnostic::is_error) {
        return Err(ApiError::invalid_script(diagnostics));
    }
    if b.n > MAX_SIMULATION_UNITS {
        return Err(ApiError::bad_request(format!(
            "n is limited to {MAX_SIMULATION_UNITS}"
        )));
    }
    let units = match (&b.grid, &b.unit) {
        (Some(_), Some(_)) => return Err(ApiError::bad_request("give `unit` or `grid`, not both")),
        (Some(dims), None) => UnitSpec::Grid(dims.clone()),
        (None, unit) => {
            let name = match unit {
                Some(u) => u.clone(),
                None => sweep_unit(&ir).ok_or_else(|| {
                    ApiError::bad_request("cannot infer the unit input; set `unit` or `grid`")
                })?,
            };
            if b.hashed {
                UnitSpec::Hashed(name)
            } else {
                UnitSpec::Sequential(name)
            }
        }
    };
    if let Some(size) = units.grid_size() {
        if size != b.n {
            return Err(ApiError::bad_request(format!(
                "grid has {size} cells but n is {}",
                b.n
            )));
        }
    }
    let context = ExperimentContext::new(
        b.namespace.as_deref().unwrap_or("simulation"),
        b.experiment.as_deref().unwrap_or("draft"),
    )
    .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let overrides = parse_override_string(&b.overrides)?;
    let script = Script::new(ir);
    let report = tokio::task::spawn_blocking(move || {
        let constant = b.inputs;
        let extra = move |_: u64| constant.clone();
        let mut opts = SimulationOptions::new(b.n, units);
        opts.extra_inputs = Some(&extra);
        opts.overrides = overrides;
        opts.pairs = b.pairs;
        opts.context = context;
        simulate(&script, &opts)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    let body = serde_json::to_value(report)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    Ok(Json(body))
}
