//! Single-step prediction as a chain of five decisions scored by energy.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::mapping::{map_reactants, MappingLimits};
use super::surgery::{apply_edits, edited_graph, reactant_set_key, split_reactants, Edits, SurgeryError};
use crate::model::{HeadOutputs, Model, NumericsError};
use crate::molgraph::{BondOrder, MolGraph};
use crate::nn::Mat;
use crate::reaction::{extract_labels, EditKind, LabelError, ReactionRecord, RetroLabels};

/// Per-action energies `−ln p` of one decision chain.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyTrace {
    pub lg_matching: f64,
    /// Always zero: attaching the chosen group involves no choice.
    pub initializing: f64,
    pub lg_connecting: f64,
    pub bond_changing: f64,
    pub hydrogen_changing: f64,
}

impl EnergyTrace {
    pub fn actions(&self) -> [f64; 5] {
        [
            self.lg_matching,
            self.initializing,
            self.lg_connecting,
            self.bond_changing,
            self.hydrogen_changing,
        ]
    }

    pub fn total(&self) -> f64 {
        self.actions().iter().sum()
    }

    /// Cumulative energy after each action.
    pub fn profile(&self) -> [f64; 5] {
        let mut acc = 0.0;
        self.actions().map(|e| {
            acc += e;
            acc
        })
    }

    /// `ΔE1..ΔE4`: matching, connecting, bond changes, hydrogen fitness.
    pub fn deltas(&self) -> [f64; 4] {
        [self.lg_matching, self.lg_connecting, self.bond_changing, self.hydrogen_changing]
    }
}

/// One complete decision chain and the reactants it produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub reactants: Vec<MolGraph>,
    pub smiles: Vec<String>,
    pub lg_id: usize,
    /// `(gate, product atom)`.
    pub connections: Vec<(usize, usize)>,
    pub bond_edits: Vec<(usize, usize, EditKind)>,
    /// Per product atom.
    pub h_delta: Vec<i8>,
    pub trace: EnergyTrace,
    pub legal: bool,
}

impl Candidate {
    pub fn key(&self) -> String {
        self.smiles.join(".")
    }

    pub fn energy(&self) -> f64 {
        self.trace.total()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Beam {
    pub n_lg: usize,
    pub n_conn: usize,
    pub n_bond: usize,
    pub k_out: usize,
    /// One choice per action instead of a joint beam.
    pub greedy: bool,
}

impl Default for Beam {
    fn default() -> Self {
        Beam {
            n_lg: 10,
            n_conn: 4,
            n_bond: 4,
            k_out: 10,
            greedy: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("no legal candidate survived the beam")]
    EmptyBeam,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("beam sizes must be at least 1")]
    Beam,
}

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("not scorable: {0}")]
    NotScorable(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl From<LabelError> for QueryError {
    fn from(e: LabelError) -> Self {
        QueryError::NotScorable(e.to_string())
    }
}

fn nll(p: f64) -> f64 {
    // `+ 0.0` turns `−ln 1 = −0.0` into `0.0`.
    -p.max(f64::MIN_POSITIVE).ln() + 0.0
}

/// Reactant-side orders tried for a changed bond, most preferred first.
fn edit_kinds(order: BondOrder) -> Vec<EditKind> {
    use BondOrder::*;
    let mut kinds = vec![EditKind::Delete];
    let (down, up) = match order {
        Single => (None, Some(Double)),
        Double => (Some(Single), Some(Triple)),
        Triple => (Some(Double), None),
        Aromatic => (Some(Single), Some(Double)),
    };
    kinds.extend(down.into_iter().chain(up).map(EditKind::Order));
    kinds
}

/// A fully specified decision chain before surgery.
#[derive(Debug, Clone, PartialEq)]
struct Derivation {
    lg_id: usize,
    connections: Vec<(usize, usize)>,
    /// Changed product bonds, as indices into `product.bonds()`.
    changed: Vec<usize>,
    kinds: Vec<EditKind>,
    h_class: Vec<usize>,
}

/// Head outputs for one product plus cached connection matrices.
pub struct Predictor<'m> {
    model: &'m Model,
    product: MolGraph,
    pub outputs: HeadOutputs,
    conn: HashMap<usize, Mat>,
}

impl<'m> Predictor<'m> {
    pub fn new(model: &'m Model, product: &MolGraph, reaction_type: Option<u8>) -> Result<Self, NumericsError> {
        let reaction_type = reaction_type.filter(|_| model.config.reaction_types);
        let outputs = model.head_outputs(&model.input(product), reaction_type)?;
        Ok(Predictor {
            model,
            product: product.clone(),
            outputs,
            conn: HashMap::new(),
        })
    }

    fn conn_for(&mut self, lg: usize) -> &Mat {
        let (model, outputs) = (self.model, &self.outputs);
        self.conn.entry(lg).or_insert_with(|| model.conn_probs(outputs, lg))
    }

    fn k(&self) -> i8 {
        self.model.config.k
    }

    fn trace(&mut self, d: &Derivation) -> EnergyTrace {
        let lg_matching = nll(self.outputs.p_lg[d.lg_id]);
        let conn = self.conn_for(d.lg_id).clone();
        let lg_connecting = d.connections.iter().fold(0.0, |acc, &(g, a)| acc + nll(conn.get(g, a)));
        let mut bond_changing = 0.0;
        for (i, b) in self.product.bonds().iter().enumerate() {
            let p = self.outputs.p_bond.get(b.a, b.b);
            bond_changing += if d.changed.contains(&i) { nll(p) } else { nll(1.0 - p) };
        }
        let hydrogen_changing = d
            .h_class
            .iter()
            .enumerate()
            .fold(0.0, |acc, (v, &c)| acc + nll(self.outputs.p_hydro.get(v, c)));
        EnergyTrace {
            lg_matching,
            initializing: 0.0,
            lg_connecting,
            bond_changing,
            hydrogen_changing,
        }
    }

    fn edits(&self, d: &Derivation, h_class: &[usize]) -> Edits {
        let entry = self.model.vocab.entry(d.lg_id);
        let bonds = self.product.bonds();
        Edits {
            connections: d.connections.iter().map(|&(g, a)| (g, a, entry.gate_orders[g])).collect(),
            bond_edits: d
                .changed
                .iter()
                .zip(&d.kinds)
                .map(|(&i, &k)| (bonds[i].a.min(bonds[i].b), bonds[i].a.max(bonds[i].b), k))
                .collect(),
            h_delta: h_class.iter().map(|&c| c as i8 - self.k()).collect(),
        }
    }

    /// Hydrogen energy with every atom at its most probable class.
    fn hydrogen_floor(&self) -> f64 {
        (0..self.product.len())
            .map(|v| {
                let row = self.outputs.p_hydro.row(v);
                let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                nll(row[best])
            })
            .sum()
    }

    /// Hydrogen classes for fixed bond edits: the most probable class per
    /// atom, moved by at most one when that makes the atom's valence legal.
    fn repair_hydrogens(&self, d: &Derivation) -> Option<(Vec<usize>, f64, bool)> {
        let n = self.product.len();
        let zero: Vec<usize> = vec![self.k() as usize; n];
        let entry = self.model.vocab.entry(d.lg_id);
        let mut g = edited_graph(&self.product, Some(entry), &self.edits(d, &zero)).ok()?;
        let classes = self.model.config.hydrogen_classes();
        let (mut chosen, mut energy, mut legal) = (Vec::with_capacity(n), 0.0, true);
        for v in 0..n {
            let probs = self.outputs.p_hydro.row(v);
            let best = (0..classes).fold(0, |b, c| if probs[c] > probs[b] { c } else { b });
            let mut options = vec![best];
            let mut near: Vec<usize> = [best.wrapping_sub(1), best + 1].into_iter().filter(|&c| c < classes).collect();
            near.sort_by(|a, b| probs[*b].total_cmp(&probs[*a]));
            options.extend(near);
            let base = self.product.atom(v).total_h() as i32;
            let saved = g.atom(v).clone();
            let mut pick = None;
            for &c in &options {
                let h = base + c as i32 - self.k() as i32;
                if h < 0 {
                    continue;
                }
                g.atom_mut(v).fix_hydrogens(h as u8);
                let ok = g.valence_state(v).legal;
                *g.atom_mut(v) = saved.clone();
                if ok {
                    pick = Some(c);
                    break;
                }
            }
            let c = pick.unwrap_or_else(|| {
                legal = false;
                best
            });
            if base + c as i32 - (self.k() as i32) < 0 {
                return None;
            }
            energy += nll(probs[c]);
            chosen.push(c);
        }
        Some((chosen, energy, legal))
    }

    /// Resolves edit kinds and hydrogens for a bond set, then performs the
    /// surgery. Among legal kind assignments the lowest hydrogen energy wins,
    /// earlier (deletion-first) assignments on ties.
    fn realize(&mut self, lg_id: usize, connections: Vec<(usize, usize)>, changed: Vec<usize>) -> Option<Candidate> {
        let bonds = self.product.bonds();
        let options: Vec<Vec<EditKind>> = changed.iter().map(|&i| edit_kinds(bonds[i].order)).collect();
        let combos: usize = options.iter().map(Vec::len).product();
        let floor = self.hydrogen_floor();
        let mut best: Option<(f64, Derivation)> = None;
        for idx in 0..combos.min(81) {
            let mut rest = idx;
            let kinds: Vec<EditKind> = options
                .iter()
                .map(|o| {
                    let k = o[rest % o.len()];
                    rest /= o.len();
                    k
                })
                .collect();
            let mut d = Derivation {
                lg_id,
                connections: connections.clone(),
                changed: changed.clone(),
                kinds,
                h_class: Vec::new(),
            };
            let Some((h_class, energy, legal)) = self.repair_hydrogens(&d) else { continue };
            if !legal || best.as_ref().is_some_and(|(e, _)| *e <= energy) {
                continue;
            }
            d.h_class = h_class;
            best = Some((energy, d));
            if energy <= floor {
                break;
            }
        }
        let (_, d) = best?;
        let entry = self.model.vocab.entry(d.lg_id);
        let surgery = apply_edits(&self.product, Some(entry), &self.edits(&d, &d.h_class)).ok()?;
        let trace = self.trace(&d);
        let edits = self.edits(&d, &d.h_class);
        Some(Candidate {
            reactants: surgery.reactants,
            smiles: surgery.smiles,
            lg_id: d.lg_id,
            connections: d.connections,
            bond_edits: edits.bond_edits,
            h_delta: edits.h_delta,
            trace,
            legal: surgery.legal,
        })
    }

    fn top_lgs(&self, n: usize) -> Vec<usize> {
        let p = &self.outputs.p_lg;
        let mut ids: Vec<usize> = (0..p.len()).collect();
        ids.sort_by(|a, b| p[*b].total_cmp(&p[*a]).then(a.cmp(b)));
        ids.truncate(n);
        ids
    }

    /// Up to `n` gate assignments by connection energy.
    fn top_assignments(&mut self, lg: usize, n: usize) -> Vec<Vec<(usize, usize)>> {
        let conn = self.conn_for(lg).clone();
        let mut partial: Vec<(f64, Vec<(usize, usize)>)> = vec![(0.0, Vec::new())];
        for g in 0..conn.rows {
            let mut next = Vec::new();
            for (e, a) in &partial {
                for atom in 0..conn.cols {
                    let mut a = a.clone();
                    a.push((g, atom));
                    next.push((e + nll(conn.get(g, atom)), a));
                }
            }
            next.sort_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.cmp(&y.1)));
            next.truncate(n);
            partial = next;
        }
        partial.into_iter().map(|(_, a)| a).collect()
    }

    /// The thresholded bond set and its Hamming-1 neighbours, best first.
    fn bond_sets(&self, n: usize) -> Vec<Vec<usize>> {
        let bonds = self.product.bonds();
        let p: Vec<f64> = bonds.iter().map(|b| self.outputs.p_bond.get(b.a, b.b)).collect();
        let seed: Vec<usize> = (0..bonds.len()).filter(|&i| p[i] >= 0.5).collect();
        let mut sets = vec![(0.0, seed.clone())];
        for i in 0..bonds.len() {
            let mut s = seed.clone();
            let cost = if let Some(pos) = s.iter().position(|&x| x == i) {
                s.remove(pos);
                nll(1.0 - p[i]) - nll(p[i])
            } else {
                s.push(i);
                s.sort_unstable();
                nll(p[i]) - nll(1.0 - p[i])
            };
            sets.push((cost, s));
        }
        sets.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        sets.truncate(n);
        sets.into_iter().map(|(_, s)| s).collect()
    }

    /// Candidates ranked by total energy (ties by reactant SMILES). Each
    /// reactant set found by the beam is re-derived through [`Self::score`],
    /// so a ranked energy is exactly what a query on those reactants returns;
    /// sets the query cannot derive are dropped.
    pub fn predict(&mut self, beam: &Beam) -> Result<Vec<Candidate>, PredictError> {
        if beam.n_lg == 0 || beam.n_conn == 0 || beam.n_bond == 0 || beam.k_out == 0 {
            return Err(PredictError::Beam);
        }
        let (n_lg, n_conn, n_bond) = if beam.greedy { (1, 1, 1) } else { (beam.n_lg, beam.n_conn, beam.n_bond) };
        let bond_sets = self.bond_sets(n_bond);
        let mut best: BTreeMap<String, Candidate> = BTreeMap::new();
        for lg in self.top_lgs(n_lg) {
            for assignment in self.top_assignments(lg, n_conn) {
                for changed in &bond_sets {
                    let Some(c) = self.realize(lg, assignment.clone(), changed.clone()) else { continue };
                    if !c.legal {
                        continue;
                    }
                    match best.get(&c.key()) {
                        Some(old) if old.energy() <= c.energy() => {}
                        _ => {
                            best.insert(c.key(), c);
                        }
                    }
                }
            }
        }
        let mut out: Vec<Candidate> = Vec::with_capacity(best.len());
        for (_, c) in best {
            if let Ok(scored) = self.score(&c.reactants) {
                out.push(scored);
            }
        }
        out.sort_by(|a, b| a.energy().total_cmp(&b.energy()).then_with(|| a.key().cmp(&b.key())));
        out.truncate(beam.k_out);
        if out.is_empty() {
            return Err(PredictError::EmptyBeam);
        }
        Ok(out)
    }

    /// Lowest-energy decision chain that turns the product into exactly
    /// `proposal`.
    pub fn score(&mut self, proposal: &[MolGraph]) -> Result<Candidate, QueryError> {
        let target_key = reactant_set_key(proposal);
        let mut product = self.product.clone();
        product.assign_sequential_maps();
        let mut merged = MolGraph::new();
        let mut spans = Vec::new();
        for g in proposal {
            let start = merged.append(g);
            spans.push(start..start + g.len());
        }
        for v in 0..merged.len() {
            merged.atom_mut(v).atom_map = None;
        }
        let limits = MappingLimits {
            max_h_change: self.k(),
            ..MappingLimits::default()
        };
        let maps = map_reactants(&product, &merged, limits);
        if maps.is_empty() {
            return Err(QueryError::NotScorable("proposal does not contain the product's atoms".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut best: Option<Candidate> = None;
        let mut last_error = None;
        for phi in maps {
            let mut mapped = merged.clone();
            for (u, &r) in phi.iter().enumerate() {
                mapped.atom_mut(r).atom_map = Some(u as u32 + 1);
            }
            let record = ReactionRecord {
                id: String::new(),
                class: None,
                product: product.clone(),
                reactants: spans.iter().map(|s| mapped.subgraph(&s.clone().collect::<Vec<_>>()).0).collect(),
            };
            let labels = match extract_labels(&record, self.k()) {
                Ok(l) => l,
                Err(e) => {
                    last_error = Some(QueryError::from(e));
                    continue;
                }
            };
            if !seen.insert(serde_json::to_string(&labels).expect("labels serialize")) {
                continue;
            }
            match self.score_labels(&labels, &target_key) {
                Ok(c) => {
                    if best.as_ref().is_none_or(|b| c.energy() < b.energy()) {
                        best = Some(c);
                    }
                }
                Err(e) => last_error = Some(e),
            }
        }
        best.ok_or_else(|| last_error.unwrap_or_else(|| QueryError::NotScorable("no derivation".into())))
    }

    fn score_labels(&mut self, labels: &RetroLabels, target_key: &str) -> Result<Candidate, QueryError> {
        let lg_id = labels
            .lg_id(&self.model.vocab)
            .ok_or_else(|| QueryError::NotScorable(format!("leaving group '{}' is not in the vocabulary", labels.leaving_group)))?;
        let entry = self.model.vocab.entry(lg_id);
        if entry.gates.len() > self.model.config.max_gates {
            return Err(QueryError::NotScorable("too many gates".into()));
        }
        let edits = Edits::from_labels(&self.product_with_maps(), labels)
            .map_err(|e: SurgeryError| QueryError::NotScorable(e.to_string()))?;
        let mut changed: Vec<(usize, EditKind)> = edits
            .bond_edits
            .iter()
            .map(|&(a, b, k)| (self.product.bond_between(a, b).expect("labelled bond exists"), k))
            .collect();
        changed.sort_by_key(|c| c.0);
        let k = self.k() as i32;
        let h_class: Vec<usize> = edits.h_delta.iter().map(|&d| (d as i32 + k) as usize).collect();
        let mut connections: Vec<(usize, usize)> = edits.connections.iter().map(|&(g, a, _)| (g, a)).collect();
        connections.sort_unstable();
        let mut variants = vec![connections.clone()];
        if connections.len() == 2 {
            let swapped = vec![(0, connections[1].1), (1, connections[0].1)];
            let swapped_edits = Edits {
                connections: swapped.iter().map(|&(g, a)| (g, a, entry.gate_orders[g])).collect(),
                ..edits.clone()
            };
            if apply_edits(&self.product, Some(entry), &swapped_edits).is_ok_and(|s| s.key() == target_key) {
                variants.push(swapped);
            }
        }
        let surgery = split_reactants(&{
            let mut g = edited_graph(&self.product, Some(entry), &edits)
                .map_err(|e| QueryError::NotScorable(e.to_string()))?;
            g.clear_atom_maps();
            g
        });
        if surgery.key() != target_key {
            return Err(QueryError::NotScorable("edits do not reproduce the proposal".into()));
        }
        let mut best: Option<Candidate> = None;
        for conns in variants {
            let d = Derivation {
                lg_id,
                connections: conns,
                changed: changed.iter().map(|c| c.0).collect(),
                kinds: changed.iter().map(|c| c.1).collect(),
                h_class: h_class.clone(),
            };
            let trace = self.trace(&d);
            if best.as_ref().is_none_or(|b| trace.total() < b.energy()) {
                let e = self.edits(&d, &d.h_class);
                best = Some(Candidate {
                    reactants: surgery.reactants.clone(),
                    smiles: surgery.smiles.clone(),
                    lg_id,
                    connections: d.connections,
                    bond_edits: e.bond_edits,
                    h_delta: e.h_delta,
                    trace,
                    legal: surgery.legal,
                });
            }
        }
        Ok(best.expect("at least one variant"))
    }

    fn product_with_maps(&self) -> MolGraph {
        let mut p = self.product.clone();
        p.assign_sequential_maps();
        p
    }
}

/// Ranked single-step predictions for `product`.
pub fn predict_single_step(
    model: &Model,
    product: &MolGraph,
    reaction_type: Option<u8>,
    beam: &Beam,
) -> Result<Vec<Candidate>, PredictError> {
    Predictor::new(model, product, reaction_type)?.predict(beam)
}

/// Energy of the most probable decision chain that yields `proposal`.
pub fn evaluate_query(
    model: &Model,
    product: &MolGraph,
    proposal: &[MolGraph],
    reaction_type: Option<u8>,
) -> Result<Candidate, QueryError> {
    Predictor::new(model, product, reaction_type)?.score(proposal)
}
