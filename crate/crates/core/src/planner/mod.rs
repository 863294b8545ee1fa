//! Multi-step route search: best-first AND-OR search over single-step
//! predictions, with accumulated energy as the route cost.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{predict_single_step, Beam, Candidate, EnergyTrace, PredictError};
use crate::model::{Model, NumericsError};
use crate::molgraph::{canonical_smiles, parse_smiles, MolGraph, SmilesError};

/// Purchasable molecules, stored and looked up by canonical SMILES.
#[derive(Debug, Clone, Default)]
pub struct BuildingBlocks {
    smiles: HashSet<String>,
    pub source: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum BlockError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {source}")]
    Smiles { line: usize, source: SmilesError },
}

fn canonical(smiles: &str) -> Result<String, SmilesError> {
    parse_smiles(smiles).map(|g| canonical_smiles(&g))
}

impl BuildingBlocks {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_smiles<S: AsRef<str>>(items: impl IntoIterator<Item = S>) -> Result<Self, SmilesError> {
        let mut blocks = Self::new();
        for s in items {
            blocks.insert(s.as_ref())?;
        }
        Ok(blocks)
    }

    /// One SMILES per line; blank lines and `#` comments are skipped.
    pub fn load(path: &Path) -> Result<Self, BlockError> {
        let text = std::fs::read_to_string(path).map_err(|source| BlockError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut blocks = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            blocks.insert(line).map_err(|source| BlockError::Smiles { line: i + 1, source })?;
        }
        blocks.source = Some(path.to_path_buf());
        Ok(blocks)
    }

    pub fn insert(&mut self, smiles: &str) -> Result<bool, SmilesError> {
        Ok(self.smiles.insert(canonical(smiles)?))
    }

    /// Membership after canonicalization; unparseable input is never a member.
    pub fn contains(&self, smiles: &str) -> bool {
        canonical(smiles).is_ok_and(|c| self.smiles.contains(&c))
    }

    pub fn contains_canonical(&self, canonical: &str) -> bool {
        self.smiles.contains(canonical)
    }

    pub fn len(&self) -> usize {
        self.smiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.smiles.is_empty()
    }
}

/// Estimated remaining cost of making a molecule. The search is optimal
/// when the estimate never exceeds the true cost.
pub trait ValueFunction: Send + Sync {
    fn estimate(&self, smiles: &str) -> f64;
}

/// The zero estimate, which makes the search uniform-cost.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroValue;

impl ValueFunction for ZeroValue {
    fn estimate(&self, _: &str) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanLimits {
    pub max_expansions: usize,
    pub max_depth: usize,
    pub topk_per_expand: usize,
    /// Solved routes to return.
    pub max_routes: usize,
}

impl Default for PlanLimits {
    fn default() -> Self {
        PlanLimits {
            max_expansions: 100,
            max_depth: 6,
            topk_per_expand: 5,
            max_routes: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeStatus {
    Open,
    Expanded,
    Solved,
    Dead,
}

/// OR node: one molecule, shared by every reaction that needs it.
#[derive(Debug, Clone, Serialize)]
pub struct MoleculeNode {
    pub id: usize,
    pub smiles: String,
    #[serde(skip)]
    pub graph: MolGraph,
    /// Cheapest accumulated energy over paths from the root.
    pub g_cost: f64,
    /// Fewest steps from the root.
    pub depth: usize,
    pub status: NodeStatus,
    pub in_blocks: bool,
    pub expanded: bool,
    /// Reactions that use this molecule.
    pub parents: Vec<usize>,
    /// Reactions that make it.
    pub children: Vec<usize>,
}

/// AND node: one single-step prediction.
#[derive(Debug, Clone, Serialize)]
pub struct ReactionNode {
    pub id: usize,
    pub parent: usize,
    pub energy: f64,
    pub g_cost: f64,
    pub trace: EnergyTrace,
    pub reactants: Vec<String>,
    pub status: NodeStatus,
    pub children: Vec<usize>,
    #[serde(skip)]
    pub candidate: Option<Candidate>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchTree {
    pub root: usize,
    pub molecules: Vec<MoleculeNode>,
    pub reactions: Vec<ReactionNode>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    /// Molecules whose expansion produced nothing usable.
    #[serde(skip)]
    exhausted: HashSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteStep {
    pub product: String,
    pub reactants: Vec<String>,
    pub trace: EnergyTrace,
    /// Steps from the target.
    pub depth: usize,
}

/// A solved route; steps are listed depth first from the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub target: String,
    pub cost: f64,
    pub steps: Vec<RouteStep>,
}

impl Route {
    /// Indented tree, one reaction per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}  total {:.4}\n", self.target, self.cost);
        for s in &self.steps {
            let indent = "  ".repeat(s.depth + 1);
            let _ = writeln!(out, "{indent}{} <= {}  [{:.4}]", s.product, s.reactants.join(" + "), s.trace.total());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierStats {
    pub expansions: usize,
    pub molecules: usize,
    pub reactions: usize,
    pub open: usize,
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("target is not valid SMILES: {0}")]
    InvalidTarget(SmilesError),
    #[error("no route found after {} expansions ({} molecules, {} still open)", .0.expansions, .0.molecules, .0.open)]
    NoRouteFound(FrontierStats),
    #[error("molecule node {0} is already expanded")]
    AlreadyExpanded(usize),
    #[error("molecule node {0} is not open")]
    NotOpen(usize),
    #[error("no molecule node {0}")]
    UnknownNode(usize),
    #[error("invalid limits: {0}")]
    Limits(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type ExpansionKey = (String, Option<u8>);

/// Source of single-step proposals for the search.
pub trait Expander {
    /// Up to `k` candidates for `product`, cheapest first.
    fn propose(&self, product: &MolGraph, reaction_type: Option<u8>, k: usize) -> Result<Vec<Candidate>, PredictError>;
}

impl Expander for Model {
    fn propose(&self, product: &MolGraph, reaction_type: Option<u8>, k: usize) -> Result<Vec<Candidate>, PredictError> {
        let beam = Beam {
            k_out: k,
            ..Beam::default()
        };
        predict_single_step(self, product, reaction_type, &beam)
    }
}

/// One interactive or batch search over a target.
pub struct PlanSession {
    pub tree: SearchTree,
    pub limits: PlanLimits,
    pub reaction_type: Option<u8>,
    pub expansions: usize,
    /// Priority of each molecule popped by [`Self::step`], in order.
    pub pops: Vec<f64>,
    blocks: Arc<BuildingBlocks>,
    value: Box<dyn ValueFunction>,
    cache: HashMap<ExpansionKey, Vec<Candidate>>,
}

impl PlanSession {
    pub fn new(target: &str, blocks: Arc<BuildingBlocks>, limits: PlanLimits) -> Result<Self, PlanError> {
        if limits.max_depth == 0 || limits.topk_per_expand == 0 || limits.max_routes == 0 {
            return Err(PlanError::Limits("depth, top-k and route count must be positive".into()));
        }
        let graph = parse_smiles(target).map_err(PlanError::InvalidTarget)?;
        let smiles = canonical_smiles(&graph);
        let root = MoleculeNode {
            id: 0,
            in_blocks: blocks.contains_canonical(&smiles),
            smiles: smiles.clone(),
            graph,
            g_cost: 0.0,
            depth: 0,
            status: NodeStatus::Open,
            expanded: false,
            parents: Vec::new(),
            children: Vec::new(),
        };
        let mut session = PlanSession {
            tree: SearchTree {
                root: 0,
                molecules: vec![root],
                reactions: Vec::new(),
                index: HashMap::from([(smiles, 0)]),
                exhausted: HashSet::new(),
            },
            limits,
            reaction_type: None,
            expansions: 0,
            pops: Vec::new(),
            blocks,
            value: Box::new(ZeroValue),
            cache: HashMap::new(),
        };
        session.refresh_status();
        Ok(session)
    }

    pub fn with_value_function(mut self, value: Box<dyn ValueFunction>) -> Self {
        self.value = value;
        self
    }

    pub fn stats(&self) -> FrontierStats {
        FrontierStats {
            expansions: self.expansions,
            molecules: self.tree.molecules.len(),
            reactions: self.tree.reactions.len(),
            open: self.tree.molecules.iter().filter(|m| m.status == NodeStatus::Open).count(),
        }
    }

    /// Expands with the session's reaction type.
    pub fn expand(&mut self, expander: &dyn Expander, node: usize) -> Result<Vec<usize>, PlanError> {
        self.expand_as(expander, node, self.reaction_type)
    }

    /// Adds one reaction node per usable prediction for molecule `node` and
    /// returns their ids. An empty beam marks the molecule dead.
    pub fn expand_as(&mut self, expander: &dyn Expander, node: usize, reaction_type: Option<u8>) -> Result<Vec<usize>, PlanError> {
        let mol = self.tree.molecules.get(node).ok_or(PlanError::UnknownNode(node))?;
        if mol.expanded {
            return Err(PlanError::AlreadyExpanded(node));
        }
        if mol.in_blocks {
            return Err(PlanError::NotOpen(node));
        }
        let key = (mol.smiles.clone(), reaction_type);
        let candidates = match self.cache.get(&key) {
            Some(c) => c.clone(),
            None => {
                let c = match expander.propose(&mol.graph, reaction_type, self.limits.topk_per_expand) {
                    Ok(c) => c,
                    Err(PredictError::EmptyBeam) => Vec::new(),
                    Err(PredictError::Numerics(e)) => return Err(e.into()),
                    Err(e @ PredictError::Beam) => return Err(PlanError::Limits(e.to_string())),
                };
                self.cache.insert(key, c.clone());
                c
            }
        };
        self.expansions += 1;
        self.tree.molecules[node].expanded = true;
        let mut added = Vec::new();
        for c in candidates.into_iter().take(self.limits.topk_per_expand) {
            if c.smiles.iter().any(|s| *s == self.tree.molecules[node].smiles) {
                continue;
            }
            added.push(self.add_reaction(node, c));
        }
        if added.is_empty() {
            self.tree.exhausted.insert(node);
        }
        self.refresh_status();
        Ok(added)
    }

    fn add_reaction(&mut self, parent: usize, c: Candidate) -> usize {
        let id = self.tree.reactions.len();
        let (g, depth) = (self.tree.molecules[parent].g_cost, self.tree.molecules[parent].depth);
        let energy = c.energy();
        let mut children = Vec::new();
        for (smiles, graph) in c.smiles.iter().zip(&c.reactants) {
            let child = match self.tree.index.get(smiles) {
                Some(&m) => m,
                None => {
                    let m = self.tree.molecules.len();
                    self.tree.molecules.push(MoleculeNode {
                        id: m,
                        smiles: smiles.clone(),
                        graph: graph.clone(),
                        g_cost: f64::INFINITY,
                        depth: usize::MAX,
                        status: NodeStatus::Open,
                        in_blocks: self.blocks.contains_canonical(smiles),
                        expanded: false,
                        parents: Vec::new(),
                        children: Vec::new(),
                    });
                    self.tree.index.insert(smiles.clone(), m);
                    m
                }
            };
            self.tree.molecules[child].parents.push(id);
            if !children.contains(&child) {
                children.push(child);
            }
        }
        self.tree.reactions.push(ReactionNode {
            id,
            parent,
            energy,
            g_cost: g + energy,
            trace: c.trace,
            reactants: c.smiles.clone(),
            status: NodeStatus::Expanded,
            children: children.clone(),
            candidate: Some(c),
        });
        self.tree.molecules[parent].children.push(id);
        for child in children {
            self.relax(child, g + energy, depth + 1);
        }
        id
    }

    /// Lowers cost and depth of `m` and its descendants where a cheaper or
    /// shorter path has appeared.
    fn relax(&mut self, m: usize, g: f64, depth: usize) {
        let mut stack = vec![(m, g, depth)];
        while let Some((m, g, depth)) = stack.pop() {
            let node = &mut self.tree.molecules[m];
            let better_g = g < node.g_cost;
            let better_d = depth < node.depth;
            if !better_g && !better_d {
                continue;
            }
            node.g_cost = node.g_cost.min(g);
            node.depth = node.depth.min(depth);
            let (g, depth) = (node.g_cost, node.depth);
            for &r in &node.children.clone() {
                let rx = &mut self.tree.reactions[r];
                rx.g_cost = g + rx.energy;
                for &c in &rx.children {
                    stack.push((c, g + rx.energy, depth + 1));
                }
            }
        }
    }

    fn blocked_by_depth(&self, m: &MoleculeNode) -> bool {
        !m.expanded && !m.in_blocks && m.depth >= self.limits.max_depth
    }

    /// Recomputes solved and dead flags as fixpoints of the AND-OR rules.
    fn refresh_status(&mut self) {
        let t = &self.tree;
        let mut solved: Vec<bool> = t.molecules.iter().map(|m| m.in_blocks).collect();
        let mut rx_solved = vec![false; t.reactions.len()];
        loop {
            let mut changed = false;
            for r in &t.reactions {
                if !rx_solved[r.id] && r.children.iter().all(|&c| solved[c]) {
                    rx_solved[r.id] = true;
                    changed = true;
                }
            }
            for m in &t.molecules {
                if !solved[m.id] && m.children.iter().any(|&r| rx_solved[r]) {
                    solved[m.id] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let mut dead: Vec<bool> = t
            .molecules
            .iter()
            .map(|m| !solved[m.id] && (t.exhausted.contains(&m.id) || self.blocked_by_depth(m)))
            .collect();
        let mut rx_dead = vec![false; t.reactions.len()];
        loop {
            let mut changed = false;
            for r in &t.reactions {
                if !rx_dead[r.id] && r.children.iter().any(|&c| dead[c]) {
                    rx_dead[r.id] = true;
                    changed = true;
                }
            }
            for m in &t.molecules {
                if !dead[m.id] && !solved[m.id] && m.expanded && m.children.iter().all(|&r| rx_dead[r]) {
                    dead[m.id] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let tree = &mut self.tree;
        for m in &mut tree.molecules {
            m.status = if solved[m.id] {
                NodeStatus::Solved
            } else if dead[m.id] {
                NodeStatus::Dead
            } else if m.expanded {
                NodeStatus::Expanded
            } else {
                NodeStatus::Open
            };
        }
        for r in &mut tree.reactions {
            r.status = if rx_solved[r.id] {
                NodeStatus::Solved
            } else if rx_dead[r.id] {
                NodeStatus::Dead
            } else {
                NodeStatus::Expanded
            };
        }
    }

    /// Cheapest completion cost of each molecule and reaction given what has
    /// been expanded so far; open molecules count their value estimate.
    fn completion_costs(&self) -> (Vec<f64>, Vec<f64>) {
        let t = &self.tree;
        let mut mol: Vec<f64> = t
            .molecules
            .iter()
            .map(|m| {
                if m.in_blocks {
                    0.0
                } else if m.expanded || m.status == NodeStatus::Dead {
                    f64::INFINITY
                } else {
                    self.value.estimate(&m.smiles)
                }
            })
            .collect();
        let mut rx = vec![f64::INFINITY; t.reactions.len()];
        for _ in 0..=t.molecules.len() {
            let mut changed = false;
            for r in &t.reactions {
                let c = r.energy + r.children.iter().map(|&c| mol[c]).sum::<f64>();
                if c < rx[r.id] {
                    rx[r.id] = c;
                    changed = true;
                }
            }
            for m in &t.molecules {
                if m.expanded && !m.in_blocks {
                    let best = m.children.iter().map(|&r| rx[r]).fold(f64::INFINITY, f64::min);
                    if best < mol[m.id] {
                        mol[m.id] = best;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        (mol, rx)
    }

    /// Cost of the cheapest partial route through each molecule.
    fn route_bounds(&self) -> Vec<f64> {
        let t = &self.tree;
        let (mol, rx) = self.completion_costs();
        let mut bound = vec![f64::INFINITY; t.molecules.len()];
        bound[t.root] = mol[t.root];
        for _ in 0..=t.molecules.len() {
            let mut changed = false;
            for r in &t.reactions {
                let through = bound[r.parent] - mol[r.parent] + rx[r.id];
                if !through.is_finite() {
                    continue;
                }
                for &c in &r.children {
                    if through < bound[c] {
                        bound[c] = through;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        bound
    }

    /// The open molecule on the cheapest partial route, with that route's
    /// cost, or `None` when no open molecule can still lead to a cheaper
    /// solution than the best solved routes.
    pub fn select(&self) -> Option<(usize, f64)> {
        let bound = self.route_bounds();
        let best = self
            .tree
            .molecules
            .iter()
            .filter(|m| m.status == NodeStatus::Open && !m.in_blocks && bound[m.id].is_finite())
            .min_by(|a, b| {
                bound[a.id]
                    .total_cmp(&bound[b.id])
                    .then(a.g_cost.total_cmp(&b.g_cost))
                    .then(a.id.cmp(&b.id))
            })?;
        let routes = self.routes(self.limits.max_routes);
        if routes.len() >= self.limits.max_routes && routes.last().is_some_and(|r| r.cost <= bound[best.id]) {
            return None;
        }
        Some((best.id, bound[best.id]))
    }

    /// Expands the selected molecule. Returns it, or `None` when the search
    /// is finished or out of budget.
    pub fn step(&mut self, expander: &dyn Expander) -> Result<Option<usize>, PlanError> {
        if self.expansions >= self.limits.max_expansions {
            return Ok(None);
        }
        let Some((m, priority)) = self.select() else { return Ok(None) };
        self.pops.push(priority);
        self.expand(expander, m)?;
        Ok(Some(m))
    }

    /// Searches until the best routes are proven or limits are hit.
    pub fn run(&mut self, expander: &dyn Expander) -> Result<Vec<Route>, PlanError> {
        while self.step(expander)?.is_some() {}
        let routes = self.routes(self.limits.max_routes);
        if routes.is_empty() {
            return Err(PlanError::NoRouteFound(self.stats()));
        }
        Ok(routes)
    }

    /// Up to `n` solved routes from the root, cheapest first.
    pub fn routes(&self, n: usize) -> Vec<Route> {
        let t = &self.tree;
        let root = &t.molecules[t.root];
        let mut memo = HashMap::new();
        let (mut all, _) = solved_routes(t, t.root, 0, &mut BTreeSet::new(), &mut memo);
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        all.dedup_by(|a, b| a.1 == b.1);
        all.truncate(n);
        all.into_iter()
            .map(|(cost, steps)| Route {
                target: root.smiles.clone(),
                cost,
                steps: steps
                    .iter()
                    .map(|&(r, depth)| RouteStep {
                        product: t.molecules[t.reactions[r].parent].smiles.clone(),
                        reactants: t.reactions[r].reactants.clone(),
                        trace: t.reactions[r].trace,
                        depth,
                    })
                    .collect(),
            })
            .collect()
    }
}

const MAX_ROUTES_PER_NODE: usize = 64;

type PartialRoutes = Vec<(f64, Vec<(usize, usize)>)>;

/// Solved sub-routes below molecule `m` as (cost, [(reaction, depth)]),
/// and whether the result was cut short by a molecule already on `path`.
/// Only uncut results are independent of the path and get memoized.
fn solved_routes(
    t: &SearchTree,
    m: usize,
    depth: usize,
    path: &mut BTreeSet<usize>,
    memo: &mut HashMap<(usize, usize), PartialRoutes>,
) -> (PartialRoutes, bool) {
    let mol = &t.molecules[m];
    if mol.in_blocks {
        return (vec![(0.0, Vec::new())], false);
    }
    if mol.status != NodeStatus::Solved {
        return (Vec::new(), false);
    }
    if path.contains(&m) {
        return (Vec::new(), true);
    }
    if let Some(r) = memo.get(&(m, depth)) {
        return (r.clone(), false);
    }
    path.insert(m);
    let mut out = Vec::new();
    let mut cut = false;
    for &r in &mol.children {
        let rx = &t.reactions[r];
        if rx.status != NodeStatus::Solved {
            continue;
        }
        let mut partial: PartialRoutes = vec![(rx.energy, vec![(r, depth)])];
        for &c in &rx.children {
            let (sub, sub_cut) = solved_routes(t, c, depth + 1, path, memo);
            cut |= sub_cut;
            let mut next = Vec::new();
            for (cost, steps) in &partial {
                for (sc, ss) in &sub {
                    let mut s = steps.clone();
                    s.extend_from_slice(ss);
                    next.push((cost + sc, s));
                }
            }
            next.sort_by(|a, b| a.0.total_cmp(&b.0));
            next.truncate(MAX_ROUTES_PER_NODE);
            partial = next;
        }
        out.extend(partial);
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out.truncate(MAX_ROUTES_PER_NODE);
    path.remove(&m);
    if !cut {
        memo.insert((m, depth), out.clone());
    }
    (out, cut)
}

/// Solved routes for `target`, cheapest first.
pub fn plan(target: &str, blocks: Arc<BuildingBlocks>, expander: &dyn Expander, limits: PlanLimits) -> Result<Vec<Route>, PlanError> {
    PlanSession::new(target, blocks, limits)?.run(expander)
}
