//! Joint training with self-adaptive task weights, ablation switches and
//! top-k evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{predict_single_step, reactant_set_key, Beam};
use crate::model::{Checkpoint, EncodeOptions, LossBreakdown, Model, ModelConfig, NumericsError, Sample, TrainState};
use crate::nn::{Grads, Mat, Tape};
use crate::reaction::{ReactionRecord, RetroLabels};

/// Floor applied to recorded losses before taking ratios.
pub const LOSS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablations {
    /// Drop the contrastive leaving-group term.
    pub no_cl: bool,
    /// Plain sum of task losses instead of adaptive weights.
    pub no_sa: bool,
    /// One encoder per task group.
    pub no_jl: bool,
    pub mask_local: bool,
    pub mask_global: bool,
}

impl Ablations {
    /// Carries the architectural switches into a model configuration.
    pub fn apply(&self, config: &mut ModelConfig) {
        config.separate_encoders = self.no_jl;
        config.mask_local = self.mask_local;
        config.mask_global = self.mask_global;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Temperature of the task-weight softmax.
    pub tau_weights: f64,
    /// Rescale gradients whose global norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Weight `L_B + L_H` as one task (three tasks) or separately (four).
    pub fuse_rcp: bool,
    /// Supervise only changed bonds and atoms.
    pub positive_only: bool,
    pub ablations: Ablations,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            tau_weights: 1.0,
            clip_norm: Some(5.0),
            fuse_rcp: true,
            positive_only: false,
            ablations: Ablations::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn task_count(&self) -> usize {
        if self.fuse_rcp {
            3
        } else {
            4
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("tau_weights", self.tau_weights),
            ("batch_size", self.batch_size as f64),
        ];
        for (name, x) in positive {
            if !(x > 0.0) {
                return Err(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err("momentum must be in [0, 1)".into());
        }
        Ok(())
    }
}

/// Recorded task losses: the first observed value and the two most recent.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossHistory {
    pub initial: Vec<Option<f64>>,
    pub prev: Vec<Option<f64>>,
    pub prev2: Vec<Option<f64>>,
}

impl LossHistory {
    pub fn new(tasks: usize) -> Self {
        LossHistory {
            initial: vec![None; tasks],
            prev: vec![None; tasks],
            prev2: vec![None; tasks],
        }
    }

    /// Records this step's losses; tasks without samples keep their history.
    pub fn record(&mut self, losses: &[Option<f64>]) {
        for (i, l) in losses.iter().enumerate() {
            if let Some(l) = l {
                let l = l.max(LOSS_EPS);
                self.initial[i].get_or_insert(l);
                self.prev2[i] = self.prev[i];
                self.prev[i] = Some(l);
            }
        }
    }

    /// Loss-decline rates `L^(t−1) / L^(t−2)`, 1 where undefined.
    pub fn rates(&self) -> Vec<f64> {
        self.prev
            .iter()
            .zip(&self.prev2)
            .map(|(p, q)| match (p, q) {
                (Some(p), Some(q)) => p / q,
                _ => 1.0,
            })
            .collect()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.initial.iter().map(|l| l.map_or(1.0, |l| 1.0 / l)).collect()
    }
}

pub fn softmax_factors(rates: &[f64], tau: f64) -> Vec<f64> {
    let mut s: Vec<f64> = rates.iter().map(|r| r / tau).collect();
    crate::nn::softmax_in_place(&mut s);
    s
}

/// Task weights `softmax(r/τ)_i · α_i`.
pub fn adaptive_weights(h: &LossHistory, tau: f64) -> Vec<f64> {
    softmax_factors(&h.rates(), tau)
        .into_iter()
        .zip(h.alphas())
        .map(|(s, a)| s * a)
        .collect()
}

/// What one optimizer step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    /// Batch means over records that supervise each task.
    pub losses: LossBreakdown,
    /// Softmax factors, empty when weighting is bypassed.
    pub factors: Vec<f64>,
    pub weights: Vec<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

impl StepRecord {
    /// `step, L_B, L_H, L_lg, L_lgc, w_1..w_K, total`, tab separated.
    pub fn log_line(&self) -> String {
        let mut fields = vec![
            self.step.to_string(),
            format!("{:.6}", self.losses.l_b),
            format!("{:.6}", self.losses.l_h),
            format!("{:.6}", self.losses.l_lg),
            format!("{:.6}", self.losses.l_lgc),
        ];
        fields.extend(self.weights.iter().map(|w| format!("{w:.6}")));
        fields.push(format!("{:.6}", self.total));
        fields.join("\t")
    }
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub history: LossHistory,
    pub velocity: Vec<Mat>,
    pub step: u64,
}

struct RecordPass {
    grads: Grads,
    /// `L_B, L_H, L_lg, L_lgc`; the last is `None` without gates.
    values: [Option<f64>; 4],
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Self {
        let velocity = model.params.ids().map(|id| {
            let m = model.params.value(id);
            Mat::zeros(m.rows, m.cols)
        });
        Trainer {
            velocity: velocity.collect(),
            history: LossHistory::new(config.task_count()),
            model,
            config,
            step: 0,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint, config: TrainConfig) -> Self {
        let mut t = Trainer::new(ck.model, config);
        if let Some(state) = ck.train {
            t.step = state.step;
            if state.initial_losses.len() == t.config.task_count() {
                t.history = LossHistory {
                    initial: state.initial_losses,
                    prev: state.prev_losses,
                    prev2: state.prev2_losses,
                };
            }
        }
        if let Some(v) = ck.velocity {
            t.velocity = v;
        }
        t
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: Some(TrainState {
                step: self.step,
                initial_losses: self.history.initial.clone(),
                prev_losses: self.history.prev.clone(),
                prev2_losses: self.history.prev2.clone(),
            }),
            velocity: Some(self.velocity.clone()),
        }
    }

    pub fn sample(&self, record: &ReactionRecord, labels: &RetroLabels) -> Result<Sample, crate::model::SampleError> {
        Sample::new(&self.model, record, labels, self.config.positive_only)
    }

    /// Task values in weighting order from the four raw losses.
    fn grouped(&self, v: [Option<f64>; 4]) -> Vec<Option<f64>> {
        if self.config.fuse_rcp {
            vec![v[0].zip(v[1]).map(|(b, h)| b + h), v[2], v[3]]
        } else {
            v.to_vec()
        }
    }

    /// Current per-task weights and softmax factors.
    pub fn current_weights(&self) -> (Vec<f64>, Vec<f64>) {
        if self.config.ablations.no_sa {
            return (vec![1.0; self.config.task_count()], Vec::new());
        }
        let factors = softmax_factors(&self.history.rates(), self.config.tau_weights);
        let weights = factors.iter().zip(self.history.alphas()).map(|(s, a)| s * a).collect();
        (weights, factors)
    }

    fn record_pass(&self, s: &Sample, coeffs: &[f64; 4]) -> RecordPass {
        let mut t = Tape::new(&self.model.params);
        let contrastive = !self.config.ablations.no_cl;
        let v = self.model.task_losses_on(&mut t, s, contrastive, &EncodeOptions::default());
        let mut terms = vec![(v.bond, coeffs[0]), (v.hydrogen, coeffs[1]), (v.lg, coeffs[2])];
        terms.extend(v.lgc.map(|x| (x, coeffs[3])));
        let root = t.weighted_sum(&terms);
        RecordPass {
            grads: t.backward(root),
            values: [
                Some(t.value(v.bond).scalar()),
                Some(t.value(v.hydrogen).scalar()),
                Some(t.value(v.lg).scalar()),
                v.lgc.map(|x| t.value(x).scalar()),
            ],
        }
    }

    /// One weighted gradient step on `batch`.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<StepRecord, NumericsError> {
        let (weights, factors) = self.current_weights();
        let counts = [
            batch.len(),
            batch.len(),
            batch.len(),
            batch.iter().filter(|s| !s.gate_atoms.is_empty()).count(),
        ];
        let task_weight = |raw: usize| -> f64 {
            let task = if self.config.fuse_rcp { raw.saturating_sub(1) } else { raw };
            weights[task]
        };
        let mut coeffs = [0.0; 4];
        for (i, c) in coeffs.iter_mut().enumerate() {
            if counts[i] > 0 {
                *c = task_weight(i) / counts[i] as f64;
            }
        }
        let passes: Vec<RecordPass> = batch.par_iter().map(|s| self.record_pass(s, &coeffs)).collect();

        let mut grads = Grads::default();
        let mut sums = [0.0; 4];
        for p in passes {
            for (i, v) in p.values.iter().enumerate() {
                sums[i] += v.unwrap_or(0.0);
            }
            grads.merge(p.grads);
        }
        let means: [Option<f64>; 4] =
            std::array::from_fn(|i| (counts[i] > 0).then(|| sums[i] / counts[i] as f64));
        if means.iter().flatten().any(|x| !x.is_finite()) {
            return Err(NumericsError("training loss".into()));
        }
        let grouped = self.grouped(means);
        let total: f64 = grouped.iter().zip(&weights).map(|(l, w)| l.unwrap_or(0.0) * w).sum();

        let norm = grads.norm();
        if !norm.is_finite() {
            return Err(NumericsError("gradient".into()));
        }
        if let Some(clip) = self.config.clip_norm {
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        let (lr, mu) = (self.config.learning_rate, self.config.momentum);
        for id in self.model.params.ids().collect::<Vec<_>>() {
            let vel = &mut self.velocity[id.0];
            match grads.get(id) {
                Some(g) => {
                    for (v, g) in vel.data.iter_mut().zip(&g.data) {
                        *v = mu * *v + g;
                    }
                }
                None => {
                    for v in &mut vel.data {
                        *v *= mu;
                    }
                }
            }
            // Velocities are kept at checkpoint precision, like the weights.
            for v in &mut vel.data {
                *v = *v as f32 as f64;
            }
            let p = self.model.params.value_mut(id);
            for (x, v) in p.data.iter_mut().zip(&vel.data) {
                *x -= lr * v;
            }
        }
        self.model.params.round_to_f32();
        self.history.record(&grouped);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            losses: LossBreakdown {
                l_b: means[0].unwrap_or(0.0),
                l_h: means[1].unwrap_or(0.0),
                l_lg: means[2].unwrap_or(0.0),
                l_lgc: means[3].unwrap_or(0.0),
                n_b: counts[0],
                n_h: counts[1],
                n_lg: counts[2],
                n_lgc: counts[3],
            },
            factors,
            weights,
            total,
            grad_norm: norm,
        })
    }

    /// Runs up to `max_steps` steps over shuffled epochs, writing one log
    /// line per step when `log` is given. Stops early when `stop` says so.
    pub fn fit(
        &mut self,
        samples: &[Sample],
        max_steps: usize,
        mut log: Option<&mut dyn Write>,
        mut stop: impl FnMut(&Trainer, &StepRecord) -> bool,
    ) -> Result<Vec<StepRecord>, NumericsError> {
        let mut records = Vec::new();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        'outer: for epoch in 0..self.config.epochs.max(1) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(epoch as u64));
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.config.batch_size) {
                if records.len() >= max_steps {
                    break 'outer;
                }
                let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
                let rec = self.train_step(&batch)?;
                if let Some(w) = log.as_deref_mut() {
                    let _ = writeln!(w, "{}", rec.log_line());
                }
                let done = stop(self, &rec);
                records.push(rec);
                if done {
                    break 'outer;
                }
            }
        }
        Ok(records)
    }
}

/// Top-k accuracies, overall and per subtask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkTable {
    pub ks: Vec<usize>,
    pub overall: Vec<f64>,
    /// Reaction-center prediction: bond set and hydrogen changes.
    pub reaction_center: Vec<f64>,
    /// Leaving-group matching.
    pub lg_matching: Vec<f64>,
    /// Gate connections given the true leaving group.
    pub lg_connecting: Vec<f64>,
    pub records: usize,
}

fn hits(rank: Option<usize>, ks: &[usize]) -> Vec<f64> {
    ks.iter().map(|&k| f64::from(u8::from(rank.is_some_and(|r| r < k)))).collect()
}

fn rank_of<T: PartialEq>(items: &[T], truth: &T) -> Option<usize> {
    items.iter().position(|x| x == truth)
}

/// Per-record hit vectors `[overall, reaction center, lg, connection]`.
fn evaluate_record(model: &Model, record: &ReactionRecord, labels: &RetroLabels, ks: &[usize], beam: &Beam) -> [Vec<f64>; 4] {
    use crate::engine::Predictor;
    let k_max = ks.iter().copied().max().unwrap_or(1);
    let truth_key = reactant_set_key(
        &record
            .reactants
            .iter()
            .filter(|g| g.atoms().iter().any(|a| a.atom_map.is_some()))
            .cloned()
            .collect::<Vec<_>>(),
    );
    let beam = Beam {
        k_out: beam.k_out.max(k_max),
        ..*beam
    };
    let overall = predict_single_step(model, &record.product, record.class, &beam)
        .map(|c| rank_of(&c.iter().map(|c| c.key()).collect::<Vec<_>>(), &truth_key))
        .unwrap_or(None);

    let Ok(pred) = Predictor::new(model, &record.product, record.class) else {
        return [hits(overall, ks), hits(None, ks), hits(None, ks), hits(None, ks)];
    };
    let out = &pred.outputs;
    let n = record.product.len();
    let map_index = |m: u32| record.product.atom_by_map(m).expect("labels align with product");

    // Reaction center: the argmax bond set together with argmax hydrogens;
    // ranks beyond 1 come from single-bond flips ordered by confidence.
    let truth_bonds: Vec<(usize, usize)> = {
        let mut v: Vec<_> = labels
            .rc_bonds
            .iter()
            .map(|e| {
                let (a, b) = (map_index(e.a), map_index(e.b));
                (a.min(b), a.max(b))
            })
            .collect();
        v.sort_unstable();
        v
    };
    let k = model.config.k;
    let h_ok = (0..n).all(|v| {
        let row = out.p_hydro.row(v);
        let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
        let m = record.product.atom(v).atom_map.expect("mapped product");
        best as i32 == labels.h_delta_of(m) as i32 + k as i32
    });
    let bonds = record.product.bonds();
    let p: Vec<f64> = bonds.iter().map(|b| out.p_bond.get(b.a, b.b)).collect();
    let seed: Vec<usize> = (0..bonds.len()).filter(|&i| p[i] >= 0.5).collect();
    let mut sets = vec![(0.0, seed.clone())];
    for i in 0..bonds.len() {
        let mut s = seed.clone();
        if let Some(pos) = s.iter().position(|&x| x == i) {
            s.remove(pos);
        } else {
            s.push(i);
        }
        sets.push(((p[i] - 0.5).abs(), s));
    }
    sets[1..].sort_by(|a, b| a.0.total_cmp(&b.0));
    let bond_sets: Vec<Vec<(usize, usize)>> = sets
        .into_iter()
        .map(|(_, s)| {
            let mut v: Vec<_> = s.iter().map(|&i| (bonds[i].a.min(bonds[i].b), bonds[i].a.max(bonds[i].b))).collect();
            v.sort_unstable();
            v
        })
        .collect();
    let rc_rank = if h_ok { rank_of(&bond_sets, &truth_bonds) } else { None };

    let lg_truth = labels.lg_id(&model.vocab);
    let mut lg_order: Vec<usize> = (0..out.p_lg.len()).collect();
    lg_order.sort_by(|a, b| out.p_lg[*b].total_cmp(&out.p_lg[*a]).then(a.cmp(b)));
    let lg_rank = lg_truth.and_then(|t| rank_of(&lg_order, &t));

    let conn_rank = lg_truth.map(|t| {
        let conn = model.conn_probs(out, t);
        if conn.rows == 0 {
            return 0;
        }
        // Gates are scored independently; the rank is the worst gate's.
        let mut worst = 0;
        for c in &labels.gate_connections {
            let target = map_index(c.product_map);
            let row = conn.row(c.gate);
            let better = row.iter().filter(|&&x| x > row[target]).count();
            worst = worst.max(better);
        }
        worst
    });
    [hits(overall, ks), hits(rc_rank, ks), hits(lg_rank, ks), hits(conn_rank, ks)]
}

/// Top-k accuracies of `model` on labelled records; records are evaluated in
/// parallel.
pub fn evaluate_topk(model: &Model, data: &[(ReactionRecord, RetroLabels)], ks: &[usize], beam: &Beam) -> TopkTable {
    let rows: Vec<[Vec<f64>; 4]> = data
        .par_iter()
        .map(|(r, l)| evaluate_record(model, r, l, ks, beam))
        .collect();
    let mean = |i: usize| -> Vec<f64> {
        (0..ks.len())
            .map(|j| {
                if rows.is_empty() {
                    0.0
                } else {
                    rows.iter().map(|r| r[i][j]).sum::<f64>() / rows.len() as f64
                }
            })
            .collect()
    };
    TopkTable {
        ks: ks.to_vec(),
        overall: mean(0),
        reaction_center: mean(1),
        lg_matching: mean(2),
        lg_connecting: mean(3),
        records: rows.len(),
    }
}
