//! Reaction-center, leaving-group matching and connection heads, and their
//! losses.

use std::collections::HashMap;

use thiserror::Error;

use super::encoder::{EncodeOptions, Encoding, NumericsError};
use super::input::GraphInput;
use super::{Model, TaskGroup};
use crate::nn::{sigmoid, softmax_in_place, Mat, Tape, Var};
use crate::reaction::{ReactionRecord, RetroLabels};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SampleError {
    #[error("leaving group '{0}' is not in the vocabulary")]
    UnknownLeavingGroup(String),
    #[error("labels refer to atom map {0}, absent from the product")]
    Misaligned(u32),
    #[error("hydrogen change {0} outside the model's class range")]
    HydrogenClass(i8),
    #[error("leaving group has {0} gates, model supports {1}")]
    TooManyGates(usize, usize),
}

/// One training example with every target laid out on the product's atom
/// indices.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub product: GraphInput,
    pub reaction_type: Option<u8>,
    /// Row-major `N×N`; supervised on bonded pairs `u < v`.
    pub bond_targets: Vec<Option<f64>>,
    pub h_targets: Vec<Option<usize>>,
    pub lg_target: usize,
    pub lg_graph: GraphInput,
    pub gate_atoms: Vec<usize>,
    /// Row-major `gates×N`.
    pub conn_targets: Vec<Option<f64>>,
}

impl Sample {
    /// `positive_only` restricts bond and hydrogen supervision to changed
    /// bonds and atoms.
    pub fn new(
        model: &Model,
        record: &ReactionRecord,
        labels: &RetroLabels,
        positive_only: bool,
    ) -> Result<Sample, SampleError> {
        let product = &record.product;
        let n = product.len();
        let index: HashMap<u32, usize> = product
            .atoms()
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.atom_map.map(|m| (m, i)))
            .collect();
        let at = |m: u32| index.get(&m).copied().ok_or(SampleError::Misaligned(m));

        let mut bond_targets = vec![None; n * n];
        if !positive_only {
            for b in product.bonds() {
                bond_targets[b.a.min(b.b) * n + b.a.max(b.b)] = Some(0.0);
            }
        }
        for e in &labels.rc_bonds {
            let (a, b) = (at(e.a)?, at(e.b)?);
            bond_targets[a.min(b) * n + a.max(b)] = Some(1.0);
        }

        let k = model.config.k;
        let mut h_targets = if positive_only { vec![None; n] } else { vec![Some(k as usize); n] };
        for (&m, &delta) in &labels.h_delta {
            if delta.abs() > k {
                return Err(SampleError::HydrogenClass(delta));
            }
            if !positive_only || delta != 0 {
                h_targets[at(m)?] = Some((delta + k) as usize);
            }
        }

        let lg_target = labels
            .lg_id(&model.vocab)
            .ok_or_else(|| SampleError::UnknownLeavingGroup(labels.leaving_group.clone()))?;
        let entry = model.vocab.entry(lg_target);
        if entry.gates.len() > model.config.max_gates {
            return Err(SampleError::TooManyGates(entry.gates.len(), model.config.max_gates));
        }
        let mut conn_targets = vec![Some(0.0); entry.gates.len() * n];
        for c in &labels.gate_connections {
            conn_targets[c.gate * n + at(c.product_map)?] = Some(1.0);
        }
        let reaction_type = if model.config.reaction_types { record.class } else { None };
        Ok(Sample {
            id: record.id.clone(),
            product: model.input(product),
            reaction_type,
            bond_targets,
            h_targets,
            lg_target,
            lg_graph: model.input(&entry.graph),
            gate_atoms: entry.gates.clone(),
            conn_targets,
        })
    }
}

/// Per-task loss nodes for one sample.
#[derive(Debug, Clone, Copy)]
pub struct TaskVars {
    pub bond: Var,
    pub hydrogen: Var,
    pub lg: Var,
    pub lg_product: Var,
    pub lg_contrast: Option<Var>,
    /// `None` when the leaving group has no gates.
    pub lgc: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_b: f64,
    pub l_h: f64,
    pub l_lg: f64,
    pub l_lgc: f64,
    pub n_b: usize,
    pub n_h: usize,
    pub n_lg: usize,
    pub n_lgc: usize,
}

/// Head probabilities for one product.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub n: usize,
    /// Symmetric `N×N` bond-change probabilities.
    pub p_bond: Mat,
    /// `N×(2k+1)`, classes ordered `−k..=k`.
    pub p_hydro: Mat,
    pub lg_logits: Vec<f64>,
    /// Temperature softmax of `lg_logits`.
    pub p_lg: Vec<f64>,
    /// Product-side keys of the connection head, `N×d`.
    pub conn_keys: Mat,
}

impl Model {
    /// Symmetrized bond-change logits, `N×N`.
    pub fn bond_logits_on(&self, t: &mut Tape, atoms: Var) -> Var {
        let hd = &self.heads;
        let (wq, wk) = (t.param(hd.bond_wq), t.param(hd.bond_wk));
        let q = t.matmul(atoms, wq);
        let k = t.matmul(atoms, wk);
        let per_head = self.head_scores(t, q, k);
        let (w, b) = (t.param(hd.bond_w), t.param(hd.bond_b));
        let z = t.head_sum(&per_head, w, b);
        let zt = t.transpose(z);
        let s = t.add(z, zt);
        t.scale(s, 0.5)
    }

    fn head_scores(&self, t: &mut Tape, q: Var, k: Var) -> Vec<Var> {
        let d_k = self.config.d_k;
        let scale = 1.0 / (d_k as f64).sqrt();
        (0..self.config.n_head)
            .map(|h| {
                let qh = t.slice_cols(q, h * d_k, d_k);
                let kh = t.slice_cols(k, h * d_k, d_k);
                let s = t.matmul_t(qh, kh);
                t.scale(s, scale)
            })
            .collect()
    }

    pub fn hydrogen_logits_on(&self, t: &mut Tape, atoms: Var) -> Var {
        let (w, b) = (t.param(self.heads.atom_w), t.param(self.heads.atom_b));
        let x = t.matmul(atoms, w);
        t.add_row(x, b)
    }

    /// Leaving-group logits from a graph-level row; with `contrastive` the
    /// contrastive token is added first.
    pub fn lg_logits_on(&self, t: &mut Tape, graph_rep: Var, contrastive: bool) -> Var {
        let mut x = graph_rep;
        if contrastive {
            let c = t.param(self.heads.contrast);
            x = t.add(x, c);
        }
        let (w, b) = (t.param(self.heads.lg_w), t.param(self.heads.lg_b));
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }

    /// Connection keys for the product atoms, `N×d`.
    pub fn conn_keys_on(&self, t: &mut Tape, atoms: Var) -> Var {
        let wk = t.param(self.heads.conn_wk);
        t.matmul(atoms, wk)
    }

    /// Gate-by-atom connection logits. Gate `g` is represented by its slot
    /// embedding next to the encoded gate atom of the leaving group.
    pub fn conn_logits_on(&self, t: &mut Tape, keys: Var, lg: Encoding, gate_atoms: &[usize]) -> Var {
        let hd = &self.heads;
        let slots = t.param(hd.gate_slots);
        let slot_rows = t.lookup_sum(vec![(slots, (0..gate_atoms.len() as u32).collect())]);
        let gate_rows = t.lookup_sum(vec![(lg.reps, gate_atoms.iter().map(|&g| g as u32).collect())]);
        let rep = t.concat_cols(&[slot_rows, gate_rows]);
        let wq = t.param(hd.conn_wq);
        let q = t.matmul(rep, wq);
        let per_head = self.head_scores(t, q, keys);
        let (w, b) = (t.param(hd.conn_w), t.param(hd.conn_b));
        t.head_sum(&per_head, w, b)
    }

    /// Builds the four task losses of one sample. Without `contrastive`, the
    /// leaving-group loss is the product-mode term alone.
    pub fn task_losses_on(&self, t: &mut Tape, s: &Sample, contrastive: bool, opts: &EncodeOptions) -> TaskVars {
        let tau = self.config.lg_temperature;
        let shared = !self.config.separate_encoders;
        let prod_rcp = self.encode_on(t, &s.product, s.reaction_type, TaskGroup::Rcp, opts);
        let prod_lgm = if shared {
            prod_rcp
        } else {
            self.encode_on(t, &s.product, s.reaction_type, TaskGroup::Lgm, opts)
        };
        let prod_lgc = if shared {
            prod_rcp
        } else {
            self.encode_on(t, &s.product, s.reaction_type, TaskGroup::Lgc, opts)
        };

        let atoms = prod_rcp.atoms(t);
        let bond_logits = self.bond_logits_on(t, atoms);
        let bond = t.bce_with_logits(bond_logits, s.bond_targets.clone());
        let h_logits = self.hydrogen_logits_on(t, atoms);
        let hydrogen = t.cross_entropy(h_logits, s.h_targets.clone(), 1.0);

        let graph_rep = prod_lgm.super_node(t);
        let logits = self.lg_logits_on(t, graph_rep, false);
        let product_term = t.cross_entropy(logits, vec![Some(s.lg_target)], tau);
        let needs_lg_for_lgm = contrastive;
        let needs_lg_for_lgc = !s.gate_atoms.is_empty();
        let lg_lgm = needs_lg_for_lgm.then(|| self.encode_on(t, &s.lg_graph, None, TaskGroup::Lgm, &EncodeOptions::default()));
        let lg_contrast = lg_lgm.map(|enc| {
            let rep = enc.super_node(t);
            let c_logits = self.lg_logits_on(t, rep, true);
            t.cross_entropy(c_logits, vec![Some(s.lg_target)], tau)
        });
        let lg = match lg_contrast {
            Some(c) => t.weighted_sum(&[(product_term, 0.5), (c, 0.5)]),
            None => product_term,
        };

        let lgc = needs_lg_for_lgc.then(|| {
            let lg_enc = match lg_lgm {
                Some(enc) if shared => enc,
                _ => self.encode_on(t, &s.lg_graph, None, TaskGroup::Lgc, &EncodeOptions::default()),
            };
            let prod_atoms = if shared { atoms } else { prod_lgc.atoms(t) };
            let keys = self.conn_keys_on(t, prod_atoms);
            let conn = self.conn_logits_on(t, keys, lg_enc, &s.gate_atoms);
            t.bce_with_logits(conn, s.conn_targets.clone())
        });
        TaskVars {
            bond,
            hydrogen,
            lg,
            lg_product: product_term,
            lg_contrast,
            lgc,
        }
    }

    /// Forward-only loss values for one sample.
    pub fn sample_losses(&self, s: &Sample, contrastive: bool) -> LossBreakdown {
        let mut t = Tape::new(&self.params);
        let v = self.task_losses_on(&mut t, s, contrastive, &EncodeOptions::default());
        let n_b = s.bond_targets.iter().flatten().count();
        let n_h = s.h_targets.iter().flatten().count();
        LossBreakdown {
            l_b: t.value(v.bond).scalar(),
            l_h: t.value(v.hydrogen).scalar(),
            l_lg: t.value(v.lg).scalar(),
            l_lgc: v.lgc.map_or(0.0, |x| t.value(x).scalar()),
            n_b,
            n_h,
            n_lg: 1,
            n_lgc: usize::from(v.lgc.is_some()),
        }
    }

    /// Head probabilities for a product (inference path, product mode only).
    pub fn head_outputs(&self, input: &GraphInput, reaction_type: Option<u8>) -> Result<HeadOutputs, NumericsError> {
        let mut t = Tape::new(&self.params);
        let opts = EncodeOptions::default();
        let rcp = self.encode_on(&mut t, input, reaction_type, TaskGroup::Rcp, &opts);
        let atoms = rcp.atoms(&mut t);
        let bond = self.bond_logits_on(&mut t, atoms);
        let hydro = self.hydrogen_logits_on(&mut t, atoms);
        let lgm = if self.config.separate_encoders {
            self.encode_on(&mut t, input, reaction_type, TaskGroup::Lgm, &opts)
        } else {
            rcp
        };
        let rep = lgm.super_node(&mut t);
        let lg = self.lg_logits_on(&mut t, rep, false);
        let lgc_atoms = if self.config.separate_encoders {
            let e = self.encode_on(&mut t, input, reaction_type, TaskGroup::Lgc, &opts);
            e.atoms(&mut t)
        } else {
            atoms
        };
        let keys = self.conn_keys_on(&mut t, lgc_atoms);

        let p_bond = t.value(bond).map(sigmoid);
        let mut p_hydro = t.value(hydro).clone();
        for r in 0..p_hydro.rows {
            softmax_in_place(p_hydro.row_mut(r));
        }
        let lg_logits = t.value(lg).data.clone();
        let mut p_lg: Vec<f64> = lg_logits.iter().map(|x| x / self.config.lg_temperature).collect();
        softmax_in_place(&mut p_lg);
        let out = HeadOutputs {
            n: input.n,
            p_bond,
            p_hydro,
            lg_logits,
            p_lg,
            conn_keys: t.value(keys).clone(),
        };
        if !(out.p_bond.is_finite() && out.p_hydro.is_finite() && out.p_lg.iter().all(|x| x.is_finite())) {
            return Err(NumericsError("head outputs".into()));
        }
        Ok(out)
    }

    /// Connection probabilities (`gates×N`) for vocabulary entry `lg_id`.
    pub fn conn_probs(&self, outputs: &HeadOutputs, lg_id: usize) -> Mat {
        let entry = self.vocab.entry(lg_id);
        if entry.gates.is_empty() {
            return Mat::zeros(0, outputs.n);
        }
        let mut t = Tape::new(&self.params);
        let lg_input = self.input(&entry.graph);
        let lg = self.encode_on(&mut t, &lg_input, None, TaskGroup::Lgc, &EncodeOptions::default());
        let keys = t.constant(outputs.conn_keys.clone());
        let logits = self.conn_logits_on(&mut t, keys, lg, &entry.gates);
        t.value(logits).map(sigmoid)
    }
}
