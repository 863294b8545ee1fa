//! Atom-perturbation contributions, reaction-type tracing and attention-bias
//! heatmaps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EncodeOptions, Model, Sample, SampleError, TrainState, REACTION_TYPES};
use crate::nn::{Mat, Tape};
use crate::reaction::{ReactionRecord, RetroLabels};
use crate::trainer::{adaptive_weights, LossHistory, LOSS_EPS};

/// Loss below which change rates are not reported.
pub const DEGENERATE_LOSS: f64 = LOSS_EPS;
/// RV above this marks a head as dominated by the global item.
pub const GLOBAL_DOMINATED: f64 = 0.90;
/// RV below this marks a head as dominated by the local item.
pub const LOCAL_DOMINATED: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainTask {
    Rcp,
    Lgm,
    Lgc,
    Overall,
}

impl std::str::FromStr for ExplainTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "rcp" => Ok(ExplainTask::Rcp),
            "lgm" => Ok(ExplainTask::Lgm),
            "lgc" => Ok(ExplainTask::Lgc),
            "overall" => Ok(ExplainTask::Overall),
            other => Err(format!("unknown task '{other}' (rcp, lgm, lgc, overall)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExplainError {
    #[error("unperturbed loss {0:e} is too small for change rates")]
    DegenerateLoss(f64),
    #[error("leaving group has no gates, so there is no connection loss")]
    NoConnectionLabels,
    #[error("model has no reaction-type embeddings")]
    ModeError,
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("non-finite loss")]
    Numerics,
}

/// How task losses are combined and computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApexConfig {
    /// Coefficients of `L_B, L_H, L_LG, L_LGC` for the overall task.
    pub weights: [f64; 4],
    /// Include the contrastive term in the leaving-group loss.
    pub contrastive: bool,
}

impl Default for ApexConfig {
    fn default() -> Self {
        ApexConfig {
            weights: [1.0; 4],
            contrastive: true,
        }
    }
}

impl ApexConfig {
    /// Weights frozen at the last recorded training step; unit weights
    /// without training state. Three recorded tasks means the two
    /// reaction-center losses were fused and share a weight.
    pub fn from_train_state(state: Option<&TrainState>, tau: f64) -> ApexConfig {
        let Some(state) = state else { return ApexConfig::default() };
        let history = LossHistory {
            initial: state.initial_losses.clone(),
            prev: state.prev_losses.clone(),
            prev2: state.prev2_losses.clone(),
        };
        let w = adaptive_weights(&history, tau);
        let weights = match w.as_slice() {
            [rc, lg, lgc] => [*rc, *rc, *lg, *lgc],
            [b, h, lg, lgc] => [*b, *h, *lg, *lgc],
            _ => [1.0; 4],
        };
        ApexConfig {
            weights,
            ..ApexConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionGraph {
    pub task: ExplainTask,
    pub base_loss: f64,
    /// Loss with each atom masked, by product atom index.
    pub masked_losses: Vec<f64>,
    /// `(L_v − L_0) / L_0` by product atom index.
    pub scores: Vec<f64>,
}

impl ContributionGraph {
    /// One `index<TAB>score` line per atom.
    pub fn to_text(&self) -> String {
        self.scores.iter().enumerate().map(|(i, s)| format!("{i}\t{s}\n")).collect()
    }
}

/// Loss of `task` for one sample.
pub fn task_loss(model: &Model, sample: &Sample, task: ExplainTask, cfg: &ApexConfig) -> Result<f64, ExplainError> {
    let mut t = Tape::new(&model.params);
    let v = model.task_losses_on(&mut t, sample, cfg.contrastive, &EncodeOptions::default());
    let val = |x| t.value(x).scalar();
    let loss = match task {
        ExplainTask::Rcp => val(v.bond) + val(v.hydrogen),
        ExplainTask::Lgm => val(v.lg),
        ExplainTask::Lgc => val(v.lgc.ok_or(ExplainError::NoConnectionLabels)?),
        ExplainTask::Overall => {
            let w = cfg.weights;
            w[0] * val(v.bond) + w[1] * val(v.hydrogen) + w[2] * val(v.lg) + v.lgc.map_or(0.0, |x| w[3] * val(x))
        }
    };
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(ExplainError::Numerics)
    }
}

/// Per-atom change rates of a prepared sample's loss when the atom is masked.
pub fn apex_on_sample(model: &Model, sample: &Sample, task: ExplainTask, cfg: &ApexConfig) -> Result<ContributionGraph, ExplainError> {
    let base_loss = task_loss(model, sample, task, cfg)?;
    if base_loss <= DEGENERATE_LOSS {
        return Err(ExplainError::DegenerateLoss(base_loss));
    }
    let masked_losses = (0..sample.product.n)
        .into_par_iter()
        .map(|v| {
            let mut s = sample.clone();
            s.product = sample.product.masked(v);
            task_loss(model, &s, task, cfg)
        })
        .collect::<Result<Vec<f64>, _>>()?;
    let scores = masked_losses.iter().map(|l| (l - base_loss) / base_loss).collect();
    Ok(ContributionGraph {
        task,
        base_loss,
        masked_losses,
        scores,
    })
}

/// Per-atom contributions for a labelled reaction, using every bond and
/// hydrogen label.
pub fn apex_contributions(
    model: &Model,
    record: &ReactionRecord,
    labels: &RetroLabels,
    task: ExplainTask,
    cfg: &ApexConfig,
) -> Result<ContributionGraph, ExplainError> {
    let sample = Sample::new(model, record, labels, false)?;
    apex_on_sample(model, &sample, task, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeTraceResult {
    pub task: ExplainTask,
    /// Per atom, the score under each reaction type `1..=10`.
    pub vectors: Vec<[f64; REACTION_TYPES]>,
    /// Per atom, the type (1-based) with the largest score.
    pub hard: Vec<u8>,
    /// Per atom, mixture weights over the types.
    pub soft: Vec<[f64; REACTION_TYPES]>,
}

/// Index of the first maximum, as a 1-based reaction type.
pub fn hard_label(v: &[f64; REACTION_TYPES]) -> u8 {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best as u8 + 1
}

/// Non-negative parts normalized to sum to 1; uniform when no score is
/// positive.
pub fn soft_label(v: &[f64; REACTION_TYPES]) -> [f64; REACTION_TYPES] {
    let clamped = v.map(|x| if x > 0.0 { x } else { 0.0 });
    let total: f64 = clamped.iter().sum();
    if total > 0.0 {
        clamped.map(|x| x / total)
    } else {
        [1.0 / REACTION_TYPES as f64; REACTION_TYPES]
    }
}

/// Contributions under each mutated reaction type in turn.
pub fn reaction_type_trace(
    model: &Model,
    record: &ReactionRecord,
    labels: &RetroLabels,
    task: ExplainTask,
    cfg: &ApexConfig,
) -> Result<TypeTraceResult, ExplainError> {
    if !model.config.reaction_types {
        return Err(ExplainError::ModeError);
    }
    let mut sample = Sample::new(model, record, labels, false)?;
    let n = sample.product.n;
    let mut vectors = vec![[0.0; REACTION_TYPES]; n];
    for ty in 1..=REACTION_TYPES as u8 {
        sample.reaction_type = Some(ty);
        let c = apex_on_sample(model, &sample, task, cfg)?;
        for (row, s) in vectors.iter_mut().zip(c.scores) {
            row[ty as usize - 1] = s;
        }
    }
    Ok(TypeTraceResult {
        task,
        hard: vectors.iter().map(hard_label).collect(),
        soft: vectors.iter().map(soft_label).collect(),
        vectors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadClass {
    GlobalDominated,
    LocalDominated,
    Mixed,
}

impl HeadClass {
    pub fn of(rv: f64) -> HeadClass {
        if rv > GLOBAL_DOMINATED {
            HeadClass::GlobalDominated
        } else if rv < LOCAL_DOMINATED {
            HeadClass::LocalDominated
        } else {
            HeadClass::Mixed
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadHeatmap {
    pub head: usize,
    pub rv: f64,
    pub class: HeadClass,
    /// Atom-by-atom attention bias (local plus global item), row-major.
    pub bias: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapReport {
    /// Sorted by RV, largest first.
    pub heads: Vec<HeadHeatmap>,
}

fn centered(x: &Mat) -> Mat {
    let mut out = x.clone();
    for c in 0..x.cols {
        let mean = (0..x.rows).map(|r| x.get(r, c)).sum::<f64>() / x.rows as f64;
        for r in 0..x.rows {
            out.set(r, c, x.get(r, c) - mean);
        }
    }
    out
}

fn frobenius(a: &Mat, b: &Mat) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// RV coefficient of two same-shaped matrices after column centering; 0 when
/// either is constant by column.
pub fn rv_coefficient(x: &Mat, y: &Mat) -> f64 {
    assert_eq!(x.shape(), y.shape(), "rv shape mismatch");
    if x.rows == 0 {
        return 0.0;
    }
    let (xc, yc) = (centered(x), centered(y));
    let denom = (frobenius(&xc, &xc) * frobenius(&yc, &yc)).sqrt();
    if denom > 0.0 {
        (frobenius(&xc, &yc) / denom).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

fn atom_block(m: &Mat, n: usize) -> Mat {
    Mat::from_vec(n, n, (0..n * n).map(|i| m.get(i / n, i % n)).collect())
}

/// Per-head bias of the reaction-center encoder compared with its global
/// item over the atom block.
pub fn attention_heatmaps(model: &Model, molecule: &crate::molgraph::MolGraph) -> HeatmapReport {
    let input = model.input(molecule);
    let n = input.n;
    let total = model.attention_bias(&input);
    let (_, global) = model.bias_item_matrices(&input);
    let mut heads: Vec<HeadHeatmap> = total
        .iter()
        .enumerate()
        .map(|(h, b)| {
            let bias = atom_block(b, n);
            let rv = global.as_ref().map_or(0.0, |g| rv_coefficient(&bias, &atom_block(&g[h], n)));
            HeadHeatmap {
                head: h,
                rv,
                class: HeadClass::of(rv),
                bias: (0..n).map(|r| bias.row(r).to_vec()).collect(),
            }
        })
        .collect();
    heads.sort_by(|a, b| b.rv.total_cmp(&a.rv).then(a.head.cmp(&b.head)));
    HeatmapReport { heads }
}
