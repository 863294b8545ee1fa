//! HTTP API over a loaded model: single-step prediction, query scoring,
//! explanations and interactive planning sessions.
//!
//! Every body is JSON. Errors use `{"error", "message", "offset"?}`.

mod error;
mod sessions;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use retro_core::engine::{evaluate_query, predict_single_step, Beam, Candidate, EnergyTrace};
use retro_core::explain::{
    apex_contributions, attention_heatmaps, reaction_type_trace, ApexConfig, ContributionGraph, ExplainTask,
    HeatmapReport, TypeTraceResult,
};
use retro_core::model::Model;
use retro_core::molgraph::{parse_smiles, MolGraph};
use retro_core::planner::{
    BuildingBlocks, FrontierStats, MoleculeNode, NodeStatus, PlanLimits, PlanSession, ReactionNode, Route,
    SearchTree,
};
use retro_core::reaction::{extract_labels, parse_reaction, EditKind, ReactionRecord, RetroLabels, RowError};

pub use error::{ApiError, ErrorBody};
pub use sessions::{SessionSlot, SessionStore};

/// Schema version of tree snapshots.
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Idle time after which a planning session is dropped.
    pub session_ttl: Duration,
    pub max_sessions: usize,
    /// Longest time a request may take before a 503.
    pub request_timeout: Duration,
    /// Directory served for paths no endpoint claims.
    pub static_dir: Option<PathBuf>,
    /// Loss settings for explanations, including frozen overall weights.
    pub apex: ApexConfig,
    pub default_limits: PlanLimits,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            session_ttl: Duration::from_secs(30 * 60),
            max_sessions: 1024,
            request_timeout: Duration::from_secs(120),
            static_dir: None,
            apex: ApexConfig::default(),
            default_limits: PlanLimits::default(),
        }
    }
}

/// Shared, read-only model and building blocks plus the session store.
pub struct AppState {
    pub model: Arc<Model>,
    /// Building-block sets by profile name; `"default"` is used when a
    /// request names none.
    pub blocks: HashMap<String, Arc<BuildingBlocks>>,
    pub sessions: SessionStore,
    pub config: ServiceConfig,
}

impl AppState {
    pub fn new(model: Model, blocks: BuildingBlocks, config: ServiceConfig) -> Arc<AppState> {
        Arc::new(AppState {
            model: Arc::new(model),
            blocks: HashMap::from([("default".to_string(), Arc::new(blocks))]),
            sessions: SessionStore::new(config.session_ttl, config.max_sessions),
            config,
        })
    }
}

type Shared = Arc<AppState>;
type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs blocking work off the async workers, bounded by the request timeout.
async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    match tokio::time::timeout(state.config.request_timeout, tokio::task::spawn_blocking(f)).await {
        Ok(Ok(r)) => r,
        Ok(Err(join)) => Err(ApiError::internal(format!("worker failed: {join}"))),
        Err(_) => Err(ApiError::timeout()),
    }
}

fn parse(smiles: &str) -> Result<MolGraph, ApiError> {
    parse_smiles(smiles).map_err(|e| ApiError::smiles(&e))
}

fn check_class(model: &Model, class: Option<u8>) -> Result<Option<u8>, ApiError> {
    match class {
        Some(c) if !(1..=10).contains(&c) => Err(ApiError::invalid(format!("class {c} outside 1..=10"))),
        Some(c) if model.config.reaction_types => Ok(Some(c)),
        _ => Ok(None),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BondEditView {
    pub a: usize,
    pub b: usize,
    pub kind: EditKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateView {
    pub rank: usize,
    pub reactants: Vec<String>,
    pub total_energy: f64,
    /// `ΔE1..ΔE4`.
    pub deltas: [f64; 4],
    pub trace: EnergyTrace,
    pub lg_id: usize,
    pub leaving_group: String,
    /// `[gate, product atom]`.
    pub connections: Vec<(usize, usize)>,
    pub bond_edits: Vec<BondEditView>,
    /// Nonzero `[product atom, change]`.
    pub h_changes: Vec<(usize, i8)>,
}

impl CandidateView {
    pub fn new(model: &Model, rank: usize, c: &Candidate) -> Self {
        CandidateView {
            rank,
            reactants: c.smiles.clone(),
            total_energy: c.energy(),
            deltas: c.trace.deltas(),
            trace: c.trace,
            lg_id: c.lg_id,
            leaving_group: model.vocab.entry(c.lg_id).canonical.clone(),
            connections: c.connections.clone(),
            bond_edits: c.bond_edits.iter().map(|&(a, b, kind)| BondEditView { a, b, kind }).collect(),
            h_changes: c.h_delta.iter().enumerate().filter(|(_, d)| **d != 0).map(|(i, d)| (i, *d)).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BeamSizes {
    pub n_lg: Option<usize>,
    pub n_conn: Option<usize>,
    pub n_bond: Option<usize>,
    pub greedy: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictRequest {
    pub smiles: String,
    pub class: Option<u8>,
    pub topk: Option<usize>,
    pub beam: Option<BeamSizes>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictResponse {
    pub product: String,
    pub candidates: Vec<CandidateView>,
}

async fn predict(State(state): State<Shared>, Json(req): Json<PredictRequest>) -> ApiResult<PredictResponse> {
    let product = parse(&req.smiles)?;
    let class = check_class(&state.model, req.class)?;
    let d = Beam::default();
    let sizes = req.beam.unwrap_or_default();
    let beam = Beam {
        n_lg: sizes.n_lg.unwrap_or(d.n_lg),
        n_conn: sizes.n_conn.unwrap_or(d.n_conn),
        n_bond: sizes.n_bond.unwrap_or(d.n_bond),
        k_out: req.topk.unwrap_or(d.k_out),
        greedy: sizes.greedy.unwrap_or(false),
    };
    let model = state.model.clone();
    let candidates = blocking(&state, move || {
        let out = predict_single_step(&model, &product, class, &beam)?;
        Ok(out.iter().enumerate().map(|(i, c)| CandidateView::new(&model, i + 1, c)).collect())
    })
    .await?;
    Ok(Json(PredictResponse {
        product: req.smiles,
        candidates,
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRequest {
    pub product: String,
    pub reactants: String,
    pub class: Option<u8>,
}

async fn query(State(state): State<Shared>, Json(req): Json<QueryRequest>) -> ApiResult<CandidateView> {
    let product = parse(&req.product)?;
    let reactants = parse(&req.reactants)?.split_components();
    let class = check_class(&state.model, req.class)?;
    let model = state.model.clone();
    let view = blocking(&state, move || {
        let c = evaluate_query(&model, &product, &reactants, class)?;
        Ok(CandidateView::new(&model, 1, &c))
    })
    .await?;
    Ok(Json(view))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitsOverride {
    pub max_expansions: Option<usize>,
    pub max_depth: Option<usize>,
    pub topk_per_expand: Option<usize>,
    pub max_routes: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub target: String,
    pub blocks_profile: Option<String>,
    pub limits: Option<LimitsOverride>,
    /// Reaction type used when an expansion names none.
    pub class: Option<u8>,
}

/// Consistent view of one session's search tree.
#[derive(Debug, Clone, Serialize)]
pub struct TreeSnapshot {
    pub version: u32,
    pub session_id: String,
    pub created: u64,
    pub target: String,
    pub root: usize,
    pub limits: PlanLimits,
    pub budget_remaining: usize,
    pub stats: FrontierStats,
    pub molecules: Vec<MoleculeNode>,
    pub reactions: Vec<ReactionNode>,
    pub routes: Vec<Route>,
}

fn snapshot(id: &str, slot: &SessionSlot, s: &PlanSession) -> TreeSnapshot {
    let SearchTree {
        root,
        molecules,
        reactions,
        ..
    } = &s.tree;
    TreeSnapshot {
        version: SNAPSHOT_VERSION,
        session_id: id.to_string(),
        created: slot.created,
        target: molecules[*root].smiles.clone(),
        root: *root,
        limits: s.limits,
        budget_remaining: s.limits.max_expansions.saturating_sub(s.expansions),
        stats: s.stats(),
        molecules: molecules.clone(),
        reactions: reactions.clone(),
        routes: s.routes(s.limits.max_routes),
    }
}

async fn create_session(
    State(state): State<Shared>,
    Json(req): Json<CreateSessionRequest>,
) -> Result<(StatusCode, Json<TreeSnapshot>), ApiError> {
    let profile = req.blocks_profile.as_deref().unwrap_or("default");
    let blocks = state
        .blocks
        .get(profile)
        .cloned()
        .ok_or_else(|| ApiError::invalid(format!("unknown blocks profile '{profile}'")))?;
    let d = state.config.default_limits;
    let o = req.limits.unwrap_or(LimitsOverride {
        max_expansions: None,
        max_depth: None,
        topk_per_expand: None,
        max_routes: None,
    });
    let limits = PlanLimits {
        max_expansions: o.max_expansions.unwrap_or(d.max_expansions),
        max_depth: o.max_depth.unwrap_or(d.max_depth),
        topk_per_expand: o.topk_per_expand.unwrap_or(d.topk_per_expand),
        max_routes: o.max_routes.unwrap_or(d.max_routes),
    };
    let mut session = PlanSession::new(&req.target, blocks, limits)?;
    session.reaction_type = check_class(&state.model, req.class)?;
    let id = state.sessions.insert(session).ok_or_else(|| {
        let mut e = ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "too_many_sessions", "session capacity reached");
        e.retry_after = Some(60);
        e
    })?;
    let slot = state.sessions.get(&id).ok_or_else(ApiError::unknown_session)?;
    let snap = snapshot(&id, &slot, &slot.session.lock().unwrap());
    Ok((StatusCode::CREATED, Json(snap)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpandRequest {
    pub node_id: usize,
    /// Reaction type for this expansion only.
    pub class: Option<u8>,
    pub topk: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpandResponse {
    pub node_id: usize,
    /// Reaction nodes added under the molecule, cheapest first.
    pub reactions: Vec<ReactionNode>,
    /// Molecule nodes those reactions use.
    pub molecules: Vec<MoleculeNode>,
    pub node_status: NodeStatus,
    pub root_status: NodeStatus,
    pub budget_remaining: usize,
}

async fn expand(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<ExpandRequest>,
) -> ApiResult<ExpandResponse> {
    let slot = state.sessions.get(&id).ok_or_else(ApiError::unknown_session)?;
    let class = match req.class {
        Some(_) => check_class(&state.model, req.class)?,
        None => None,
    };
    if req.topk == Some(0) {
        return Err(ApiError::invalid("topk must be at least 1"));
    }
    let model = state.model.clone();
    blocking(&state, move || {
        let mut s = slot.session.lock().unwrap();
        let node = s
            .tree
            .molecules
            .get(req.node_id)
            .ok_or_else(|| ApiError::from(retro_core::planner::PlanError::UnknownNode(req.node_id)))?;
        if node.expanded {
            return Err(retro_core::planner::PlanError::AlreadyExpanded(req.node_id).into());
        }
        if node.depth >= s.limits.max_depth {
            return Err(ApiError::new(StatusCode::CONFLICT, "depth_limit", "molecule is at the depth limit"));
        }
        if s.expansions >= s.limits.max_expansions {
            return Err(ApiError::new(StatusCode::TOO_MANY_REQUESTS, "budget_exhausted", "expansion budget exhausted"));
        }
        let reaction_type = class.or(s.reaction_type);
        let saved = s.limits.topk_per_expand;
        if let Some(k) = req.topk {
            s.limits.topk_per_expand = k;
        }
        let added = s.expand_as(model.as_ref(), req.node_id, reaction_type);
        s.limits.topk_per_expand = saved;
        let added = added?;
        let reactions: Vec<ReactionNode> = added.iter().map(|&r| s.tree.reactions[r].clone()).collect();
        let mut mol_ids: Vec<usize> = reactions.iter().flat_map(|r| r.children.iter().copied()).collect();
        mol_ids.sort_unstable();
        mol_ids.dedup();
        Ok(Json(ExpandResponse {
            node_id: req.node_id,
            molecules: mol_ids.iter().map(|&m| s.tree.molecules[m].clone()).collect(),
            reactions,
            node_status: s.tree.molecules[req.node_id].status,
            root_status: s.tree.molecules[s.tree.root].status,
            budget_remaining: s.limits.max_expansions.saturating_sub(s.expansions),
        }))
    })
    .await
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunRequest {
    /// Most expansions to perform; the remaining budget when absent.
    pub steps: Option<usize>,
}

async fn run_search(
    State(state): State<Shared>,
    Path(id): Path<String>,
    body: Option<Json<RunRequest>>,
) -> ApiResult<TreeSnapshot> {
    let slot = state.sessions.get(&id).ok_or_else(ApiError::unknown_session)?;
    let steps = body.and_then(|b| b.0.steps).unwrap_or(usize::MAX);
    let model = state.model.clone();
    blocking(&state, move || {
        let mut s = slot.session.lock().unwrap();
        for _ in 0..steps {
            if s.step(model.as_ref())?.is_none() {
                break;
            }
        }
        Ok(Json(snapshot(&id, &slot, &s)))
    })
    .await
}

async fn tree(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<TreeSnapshot> {
    let slot = state.sessions.get(&id).ok_or_else(ApiError::unknown_session)?;
    blocking(&state, move || {
        let s = slot.session.lock().unwrap();
        Ok(Json(snapshot(&id, &slot, &s)))
    })
    .await
}

async fn delete_session(State(state): State<Shared>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    if state.sessions.remove(&id) {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::unknown_session())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainParams {
    /// Atom-mapped `reactants>>product`.
    pub reaction: String,
    pub task: Option<String>,
    pub class: Option<u8>,
}

fn row_error(e: RowError) -> ApiError {
    match e {
        RowError::Smiles { source, .. } => ApiError::smiles(&source),
        other => ApiError::invalid(other.to_string()),
    }
}

fn labelled(p: &ExplainParams) -> Result<(ReactionRecord, RetroLabels, ExplainTask), ApiError> {
    let task = match &p.task {
        Some(t) => t.parse().map_err(ApiError::invalid)?,
        None => ExplainTask::Overall,
    };
    let record = parse_reaction("query", p.class, &p.reaction).map_err(row_error)?;
    let labels = extract_labels(&record, retro_core::reaction::DEFAULT_MAX_H_CHANGE)
        .map_err(|e| ApiError::invalid(e.to_string()))?;
    Ok((record, labels, task))
}

async fn explain_apex(State(state): State<Shared>, Query(p): Query<ExplainParams>) -> ApiResult<ContributionGraph> {
    let (record, labels, task) = labelled(&p)?;
    let model = state.model.clone();
    let cfg = state.config.apex;
    blocking(&state, move || Ok(Json(apex_contributions(&model, &record, &labels, task, &cfg)?))).await
}

async fn explain_trace(State(state): State<Shared>, Query(p): Query<ExplainParams>) -> ApiResult<TypeTraceResult> {
    let (record, labels, task) = labelled(&p)?;
    let model = state.model.clone();
    let cfg = state.config.apex;
    blocking(&state, move || Ok(Json(reaction_type_trace(&model, &record, &labels, task, &cfg)?))).await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadsParams {
    pub smiles: String,
}

async fn model_heads(State(state): State<Shared>, Query(p): Query<HeadsParams>) -> ApiResult<HeatmapReport> {
    let g = parse(&p.smiles)?;
    let model = state.model.clone();
    blocking(&state, move || Ok(Json(attention_heatmaps(&model, &g)))).await
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelInfo {
    pub config: retro_core::model::ModelConfig,
    pub leaving_groups: usize,
    pub parameters: usize,
}

async fn model_info(State(state): State<Shared>) -> Json<ModelInfo> {
    Json(ModelInfo {
        config: state.model.config.clone(),
        leaving_groups: state.model.vocab.len(),
        parameters: state.model.params.scalar_count(),
    })
}

pub fn router(state: Shared) -> Router {
    let api = Router::new()
        .route("/predict", post(predict))
        .route("/query", post(query))
        .route("/plan/session", post(create_session))
        .route("/plan/session/{id}", axum::routing::delete(delete_session))
        .route("/plan/session/{id}/expand", post(expand))
        .route("/plan/session/{id}/run", post(run_search))
        .route("/plan/session/{id}/tree", get(tree))
        .route("/explain/apex", get(explain_apex))
        .route("/explain/trace", get(explain_trace))
        .route("/model/heads", get(model_heads))
        .route("/model", get(model_info));
    let api = match &state.config.static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    };
    api.with_state(state)
}

/// Serves until ctrl-c, evicting idle sessions once a minute.
pub async fn serve(addr: SocketAddr, state: Shared) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let sweeper = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            sweeper.sessions.evict_expired();
        }
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
