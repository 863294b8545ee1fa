use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use proptest::prelude::*;
use retro_core::engine::{Candidate, EnergyTrace, PredictError};
use retro_core::molgraph::{canonical_smiles, parse_smiles, MolGraph};
use retro_core::planner::{
    plan, BuildingBlocks, Expander, NodeStatus, PlanError, PlanLimits, PlanSession, SearchTree, ValueFunction,
};

/// Retro rules keyed by product SMILES: `(energy, reactants)`.
#[derive(Default)]
struct Scripted {
    rules: HashMap<String, Vec<(f64, Vec<String>)>>,
}

fn canon(s: &str) -> String {
    canonical_smiles(&parse_smiles(s).unwrap())
}

impl Scripted {
    fn rule(mut self, product: &str, energy: f64, reactants: &[&str]) -> Self {
        self.rules
            .entry(canon(product))
            .or_default()
            .push((energy, reactants.iter().map(|r| canon(r)).collect()));
        self
    }
}

impl Expander for Scripted {
    fn propose(&self, product: &MolGraph, _: Option<u8>, k: usize) -> Result<Vec<Candidate>, PredictError> {
        let mut rules = self.rules.get(&canonical_smiles(product)).cloned().unwrap_or_default();
        rules.sort_by(|a, b| a.0.total_cmp(&b.0));
        let out: Vec<Candidate> = rules
            .into_iter()
            .take(k)
            .map(|(energy, reactants)| Candidate {
                reactants: reactants.iter().map(|r| parse_smiles(r).unwrap()).collect(),
                smiles: reactants,
                lg_id: 0,
                connections: Vec::new(),
                bond_edits: Vec::new(),
                h_delta: Vec::new(),
                trace: EnergyTrace {
                    lg_matching: energy,
                    ..EnergyTrace::default()
                },
                legal: true,
            })
            .collect();
        if out.is_empty() {
            return Err(PredictError::EmptyBeam);
        }
        Ok(out)
    }
}

fn blocks(items: &[&str]) -> Arc<BuildingBlocks> {
    Arc::new(BuildingBlocks::from_smiles(items).unwrap())
}

fn wide() -> PlanLimits {
    PlanLimits {
        max_expansions: 1000,
        max_depth: 12,
        topk_per_expand: 10,
        max_routes: 1,
    }
}

/// Cheapest derivation of `m` by brute force over every rule, never reusing
/// a molecule along one path.
fn oracle(g: &Scripted, blocks: &BuildingBlocks, m: &str, path: &mut Vec<String>) -> f64 {
    if blocks.contains_canonical(m) {
        return 0.0;
    }
    if path.iter().any(|p| p == m) {
        return f64::INFINITY;
    }
    path.push(m.to_string());
    let mut best = f64::INFINITY;
    for (e, reactants) in g.rules.get(m).into_iter().flatten() {
        if reactants.iter().any(|r| r == m) {
            continue;
        }
        // A molecule listed twice in one reaction is made once.
        let distinct: HashSet<&String> = reactants.iter().collect();
        let cost = e + distinct.into_iter().map(|r| oracle(g, blocks, r, path)).sum::<f64>();
        best = best.min(cost);
    }
    path.pop();
    best
}

/// Solved flags recomputed from scratch with the AND-OR rules.
fn expected_solved(t: &SearchTree) -> Vec<bool> {
    let mut solved: Vec<bool> = t.molecules.iter().map(|m| m.in_blocks).collect();
    loop {
        let mut changed = false;
        for m in &t.molecules {
            let ok = m.children.iter().any(|&r| t.reactions[r].children.iter().all(|&c| solved[c]));
            if ok && !solved[m.id] {
                solved[m.id] = true;
                changed = true;
            }
        }
        if !changed {
            return solved;
        }
    }
}

#[test]
fn target_in_blocks_is_a_zero_step_route() {
    let routes = plan("OC(C)=O", blocks(&["CC(=O)O"]), &Scripted::default(), PlanLimits::default()).unwrap();
    assert_eq!(routes.len(), 1);
    assert_eq!(routes[0].cost, 0.0);
    assert!(routes[0].steps.is_empty());
}

#[test]
fn zero_expansion_budget_finds_nothing() {
    let g = Scripted::default().rule("CCO", 1.0, &["CC"]);
    let limits = PlanLimits {
        max_expansions: 0,
        ..PlanLimits::default()
    };
    let err = plan("CCO", blocks(&["CC"]), &g, limits).unwrap_err();
    assert!(matches!(err, PlanError::NoRouteFound(s) if s.expansions == 0 && s.open == 1));
}

#[test]
fn bad_target_and_limits_are_rejected() {
    assert!(matches!(
        PlanSession::new("C1CC", blocks(&[]), PlanLimits::default()),
        Err(PlanError::InvalidTarget(_))
    ));
    let limits = PlanLimits {
        max_depth: 0,
        ..PlanLimits::default()
    };
    assert!(matches!(PlanSession::new("CC", blocks(&[]), limits), Err(PlanError::Limits(_))));
}

#[test]
fn expanding_twice_is_an_error() {
    let g = Scripted::default().rule("CCO", 1.0, &["CC"]);
    let mut s = PlanSession::new("CCO", blocks(&[]), PlanLimits::default()).unwrap();
    s.expand(&g, 0).unwrap();
    assert!(matches!(s.expand(&g, 0), Err(PlanError::AlreadyExpanded(0))));
    assert!(matches!(s.expand(&g, 99), Err(PlanError::UnknownNode(99))));
}

#[test]
fn child_cost_adds_reaction_energy() {
    let g = Scripted::default().rule("CCCO", 0.75, &["CCC", "O"]).rule("CCC", 1.5, &["CC"]);
    let mut s = PlanSession::new("CCCO", blocks(&["O"]), PlanLimits::default()).unwrap();
    s.expand(&g, 0).unwrap();
    let propane = s.tree.molecules.iter().find(|m| m.smiles == "CCC").unwrap().id;
    assert_eq!(s.tree.molecules[propane].g_cost, 0.75);
    s.expand(&g, propane).unwrap();
    let ethane = s.tree.molecules.iter().find(|m| m.smiles == "CC").unwrap();
    assert_eq!(ethane.g_cost, 0.75 + 1.5);
    assert_eq!(ethane.depth, 2);
}

#[test]
fn converging_intermediate_is_shared() {
    let g = Scripted::default()
        .rule("CCCCO", 1.0, &["CCCC", "O"])
        .rule("CCCCO", 2.0, &["CCCCN", "N"])
        .rule("CCCC", 1.0, &["CCC", "Cl"])
        .rule("CCCCN", 1.0, &["CCC", "Br"]);
    let mut s = PlanSession::new("CCCCO", blocks(&["O", "N", "Cl", "Br"]), PlanLimits::default()).unwrap();
    s.expand(&g, 0).unwrap();
    for smiles in ["CCCC", "CCCCN"] {
        let id = s.tree.molecules.iter().find(|m| m.smiles == smiles).unwrap().id;
        s.expand(&g, id).unwrap();
    }
    // target, butane, O, butylamine, N, propane, Cl, Br
    assert_eq!(s.tree.molecules.len(), 8);
    let propane = s.tree.molecules.iter().find(|m| m.smiles == "CCC").unwrap();
    assert_eq!(propane.parents.len(), 2);
    assert_eq!(propane.g_cost, 2.0);
    let names: HashSet<&str> = s.tree.molecules.iter().map(|m| m.smiles.as_str()).collect();
    assert_eq!(names.len(), s.tree.molecules.len());
}

#[test]
fn empty_beam_kills_the_branch() {
    let g = Scripted::default().rule("CCO", 1.0, &["CC", "O"]);
    let mut s = PlanSession::new("CCO", blocks(&["O"]), PlanLimits::default()).unwrap();
    s.expand(&g, 0).unwrap();
    let ethane = s.tree.molecules.iter().find(|m| m.smiles == "CC").unwrap().id;
    assert!(s.expand(&g, ethane).unwrap().is_empty());
    assert_eq!(s.tree.molecules[ethane].status, NodeStatus::Dead);
    assert_eq!(s.tree.reactions[0].status, NodeStatus::Dead);
    assert_eq!(s.tree.molecules[0].status, NodeStatus::Dead);
    assert!(matches!(s.run(&g), Err(PlanError::NoRouteFound(_))));
}

#[test]
fn cheaper_deep_route_beats_expensive_short_one() {
    let g = Scripted::default()
        .rule("CCCCO", 5.0, &["CCCC", "O"])
        .rule("CCCCO", 1.0, &["CCCCN"])
        .rule("CCCCN", 1.0, &["CCCCCl"])
        .rule("CCCCCl", 1.0, &["CCCCBr"]);
    let routes = plan("CCCCO", blocks(&["CCCC", "O", "CCCCBr"]), &g, PlanLimits::default()).unwrap();
    assert_eq!(routes[0].cost, 3.0);
    assert_eq!(routes[0].steps.len(), 3);
    assert_eq!(routes[0].steps.iter().map(|s| s.depth).collect::<Vec<_>>(), vec![0, 1, 2]);
}

#[test]
fn several_routes_come_back_sorted() {
    let g = Scripted::default()
        .rule("CCCCO", 5.0, &["CCCC", "O"])
        .rule("CCCCO", 1.0, &["CCCCN"])
        .rule("CCCCN", 1.0, &["CCCCBr"]);
    let limits = PlanLimits {
        max_routes: 3,
        ..PlanLimits::default()
    };
    let routes = plan("CCCCO", blocks(&["CCCC", "O", "CCCCBr"]), &g, limits).unwrap();
    let costs: Vec<f64> = routes.iter().map(|r| r.cost).collect();
    assert_eq!(costs, vec![2.0, 5.0]);
}

#[test]
fn depth_limit_stops_long_routes() {
    let g = Scripted::default()
        .rule("CCCCO", 1.0, &["CCCCN"])
        .rule("CCCCN", 1.0, &["CCCCCl"])
        .rule("CCCCCl", 1.0, &["CCCCBr"]);
    let limits = PlanLimits {
        max_depth: 2,
        ..PlanLimits::default()
    };
    assert!(matches!(plan("CCCCO", blocks(&["CCCCBr"]), &g, limits), Err(PlanError::NoRouteFound(_))));
    let limits = PlanLimits {
        max_depth: 3,
        ..PlanLimits::default()
    };
    assert!(plan("CCCCO", blocks(&["CCCCBr"]), &g, limits).is_ok());
}

struct Penalize(&'static str);

impl ValueFunction for Penalize {
    fn estimate(&self, smiles: &str) -> f64 {
        if smiles == self.0 {
            100.0
        } else {
            0.0
        }
    }
}

#[test]
fn value_function_steers_selection() {
    let g = Scripted::default()
        .rule("CCCCO", 1.0, &["CCCCN"])
        .rule("CCCCO", 2.0, &["CCCCCl"]);
    let mut s = PlanSession::new("CCCCO", blocks(&[]), PlanLimits::default()).unwrap();
    s.expand(&g, 0).unwrap();
    let amine = s.tree.molecules.iter().find(|m| m.smiles == "CCCCN").unwrap().id;
    assert_eq!(s.select().unwrap().0, amine);
    let mut s = PlanSession::new("CCCCO", blocks(&[]), PlanLimits::default())
        .unwrap()
        .with_value_function(Box::new(Penalize("CCCCN")));
    s.expand(&g, 0).unwrap();
    let chloride = s.tree.molecules.iter().find(|m| m.smiles == "CCCCCl").unwrap().id;
    assert_eq!(s.select().unwrap(), (chloride, 2.0));
}

#[test]
fn blocks_match_any_spelling() {
    let b = BuildingBlocks::from_smiles(["CC(=O)O", "c1ccccc1"]).unwrap();
    assert!(b.contains("OC(C)=O"));
    assert!(b.contains("c1ccc[cH]c1"));
    assert!(!b.contains("CCO"));
    assert!(!b.contains("not smiles"));
    assert_eq!(b.len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("blocks.smi");
    std::fs::write(&path, "# stock\nCCO\n\nOCC\nCCN\n").unwrap();
    let b = BuildingBlocks::load(&path).unwrap();
    assert_eq!(b.len(), 2);
    assert_eq!(b.source.as_deref(), Some(path.as_path()));
    std::fs::write(&path, "CCO\nC1CC\n").unwrap();
    assert!(matches!(BuildingBlocks::load(&path), Err(retro_core::planner::BlockError::Smiles { line: 2, .. })));
}

#[test]
fn route_serializes_and_renders() {
    let g = Scripted::default().rule("CCCO", 0.5, &["CCC", "O"]).rule("CCC", 0.25, &["CC", "C"]);
    let routes = plan("CCCO", blocks(&["O", "CC", "C"]), &g, PlanLimits::default()).unwrap();
    let json = serde_json::to_string(&routes[0]).unwrap();
    let back: retro_core::planner::Route = serde_json::from_str(&json).unwrap();
    assert_eq!(back, routes[0]);
    let text = routes[0].to_text();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(2).unwrap().starts_with("    CCC <= "));
}

const CHAINS: [&str; 8] = ["C", "CC", "CCC", "CCCC", "CCCCC", "CCCCCC", "CCCCCCC", "CCCCCCCC"];

fn grammar() -> impl Strategy<Value = (Vec<(usize, f64, Vec<usize>)>, Vec<bool>)> {
    let rule = (0..8usize, 0u32..40, prop::collection::vec(0..8usize, 1..3))
        .prop_map(|(p, e, r)| (p, f64::from(e) * 0.25, r));
    (prop::collection::vec(rule, 0..20), prop::collection::vec(prop::bool::weighted(0.3), 8))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn first_route_is_the_exhaustive_optimum((rules, stock) in grammar()) {
        let mut g = Scripted::default();
        for (p, e, r) in &rules {
            let reactants: Vec<&str> = r.iter().map(|&i| CHAINS[i]).collect();
            g = g.rule(CHAINS[*p], *e, &reactants);
        }
        let stock: Vec<&str> = (1..8).filter(|&i| stock[i]).map(|i| CHAINS[i]).collect();
        let blocks = blocks(&stock);
        let best = oracle(&g, &blocks, CHAINS[0], &mut Vec::new());

        let mut s = PlanSession::new(CHAINS[0], blocks.clone(), wide()).unwrap();
        while s.step(&g).unwrap().is_some() {
            let solved = expected_solved(&s.tree);
            for m in &s.tree.molecules {
                prop_assert_eq!(m.status == NodeStatus::Solved, solved[m.id]);
            }
        }
        prop_assert!(s.pops.windows(2).all(|w| w[0] <= w[1] + 1e-12), "{:?}", s.pops);
        let routes = s.routes(1);
        if best.is_finite() {
            prop_assert_eq!(routes.len(), 1);
            let r = &routes[0];
            prop_assert!((r.cost - best).abs() < 1e-9, "planner {} oracle {}", r.cost, best);
            let sum: f64 = r.steps.iter().map(|s| s.trace.total()).sum();
            prop_assert!((r.cost - sum).abs() < 1e-9);
        } else {
            prop_assert!(routes.is_empty());
        }
    }
}
