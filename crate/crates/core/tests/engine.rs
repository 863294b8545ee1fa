mod common;

use std::sync::OnceLock;

use common::*;
use retro_core::engine::{apply_labels, evaluate_query, predict_single_step, Beam, PredictError, Predictor, QueryError};
use retro_core::model::Model;
use retro_core::molgraph::parse_smiles;
use retro_core::reaction::{ReactionRecord, RetroLabels};

fn model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| trained_mini(400))
}

fn pairs() -> Vec<(ReactionRecord, RetroLabels)> {
    labelled(&corpus("mini_corpus.csv"))
}

#[test]
fn every_candidate_energy_is_the_sum_of_its_actions() {
    let mut seen = 0;
    for (r, _) in pairs().iter().take(12) {
        let Ok(cands) = predict_single_step(model(), &r.product, None, &Beam::default()) else { continue };
        for c in &cands {
            let t = c.trace;
            assert_eq!(t.initializing, 0.0);
            assert!(t.actions().iter().all(|&e| e >= 0.0));
            let sum = t.lg_matching + t.initializing + t.lg_connecting + t.bond_changing + t.hydrogen_changing;
            assert_eq!(c.energy().to_bits(), sum.to_bits());
            assert_eq!(t.profile()[4].to_bits(), sum.to_bits());
            seen += 1;
        }
    }
    assert!(seen > 0);
}

#[test]
fn candidates_are_sorted_legal_and_unique() {
    for (r, _) in pairs().iter().take(8) {
        let Ok(cands) = predict_single_step(model(), &r.product, None, &Beam::default()) else { continue };
        assert!(cands.len() <= 10);
        for w in cands.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            assert!(a.energy() < b.energy() || (a.energy() == b.energy() && a.key() < b.key()));
        }
        let mut keys: Vec<String> = cands.iter().map(|c| c.key()).collect();
        keys.dedup();
        assert_eq!(keys.len(), cands.len());
        for c in &cands {
            assert!(c.legal);
            assert!(c.reactants.iter().all(|g| g.is_valence_legal()));
        }
    }
}

#[test]
fn prediction_is_deterministic() {
    let product = &pairs()[3].0.product;
    let a = predict_single_step(model(), product, None, &Beam::default()).unwrap();
    let b = predict_single_step(model(), product, None, &Beam::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn query_on_rank_one_reproduces_its_trace() {
    let mut checked = 0;
    for (r, _) in pairs().iter().take(12) {
        let Ok(cands) = predict_single_step(model(), &r.product, None, &Beam::default()) else { continue };
        let top = &cands[0];
        let q = evaluate_query(model(), &r.product, &top.reactants, None).unwrap();
        assert_eq!(q.trace.actions().map(f64::to_bits), top.trace.actions().map(f64::to_bits), "{}", r.id);
        checked += 1;
    }
    assert!(checked >= 10);
}

#[test]
fn certain_chain_has_zero_energy() {
    let product = parse_smiles("CC(=O)NCc1ccccc1").unwrap();
    let mut p = Predictor::new(model(), &product, None).unwrap();
    let k = model().config.k as usize;
    let o = &mut p.outputs;
    o.p_lg.iter_mut().enumerate().for_each(|(i, x)| *x = if i == 0 { 1.0 } else { 0.0 });
    o.p_bond.data.fill(0.0);
    for v in 0..o.n {
        for c in 0..o.p_hydro.cols {
            o.p_hydro.set(v, c, if c == k { 1.0 } else { 0.0 });
        }
    }
    let q = p.score(std::slice::from_ref(&product)).unwrap();
    assert_eq!(q.energy(), 0.0);
    let cands = p.predict(&Beam::default()).unwrap();
    assert_eq!(cands[0].energy(), 0.0);
    assert_eq!(cands[0].reactants.len(), 1);
}

#[test]
fn lowering_a_chosen_probability_raises_energy() {
    let (r, _) = &pairs()[0];
    let mut p = Predictor::new(model(), &r.product, None).unwrap();
    let base = p.score(&r.reactants).unwrap();
    p.outputs.p_lg[base.lg_id] *= 0.5;
    let lowered = p.score(&r.reactants).unwrap();
    assert!(lowered.energy() > base.energy());
    assert_eq!(lowered.trace.lg_matching, base.trace.lg_matching + std::f64::consts::LN_2);
}

#[test]
fn unknown_leaving_group_is_not_scorable() {
    let product = parse_smiles("CC(=O)NCc1ccccc1").unwrap();
    let proposal = [parse_smiles("CC(=O)[Se]c1ccccc1").unwrap(), parse_smiles("NCc1ccccc1").unwrap()];
    let err = evaluate_query(model(), &product, &proposal, None).unwrap_err();
    assert!(matches!(err, QueryError::NotScorable(_)), "{err}");
}

#[test]
fn unrelated_proposal_is_not_scorable() {
    let product = parse_smiles("CC(=O)NCc1ccccc1").unwrap();
    let err = evaluate_query(model(), &product, &[parse_smiles("CCO").unwrap()], None).unwrap_err();
    assert!(matches!(err, QueryError::NotScorable(_)));
}

#[test]
fn ground_truth_beats_wrong_gate_variants() {
    let mut compared = 0;
    for (r, labels) in pairs() {
        let truth = evaluate_query(model(), &r.product, &r.reactants, None).unwrap();
        let mut product = r.product.clone();
        product.assign_sequential_maps();
        let Some(gate_map) = labels.gate_connections.first().map(|g| g.product_map) else { continue };
        for u in 0..product.len() {
            let map = product.atom(u).atom_map.unwrap();
            if map == gate_map {
                continue;
            }
            // Moving the gate shifts one bond's worth of hydrogen.
            let mut wrong = labels.clone();
            let order = wrong.gate_connections[0].order.value() as i8;
            wrong.gate_connections[0].product_map = map;
            *wrong.h_delta.entry(gate_map).or_default() += order;
            *wrong.h_delta.entry(map).or_default() -= order;
            let Ok(s) = apply_labels(&r.product, &wrong) else { continue };
            if !s.legal || s.key() == truth.key() {
                continue;
            }
            if let Ok(q) = evaluate_query(model(), &r.product, &s.reactants, None) {
                assert!(truth.energy() < q.energy(), "{} gate on {map}", r.id);
                compared += 1;
            }
        }
    }
    assert!(compared >= 20, "{compared}");
}

#[test]
fn neutral_model_gives_empty_beam() {
    let mut m = model().clone();
    m.zero_all();
    let product = parse_smiles("CC(=O)NCc1ccccc1").unwrap();
    let err = predict_single_step(&m, &product, None, &Beam::default()).unwrap_err();
    assert!(matches!(err, PredictError::EmptyBeam));
}

#[test]
fn zero_beam_is_rejected() {
    let product = parse_smiles("CCO").unwrap();
    let beam = Beam { n_bond: 0, ..Beam::default() };
    assert!(matches!(predict_single_step(model(), &product, None, &beam), Err(PredictError::Beam)));
}

#[test]
fn greedy_beam_yields_one_candidate_per_reactant_set() {
    let (r, _) = &pairs()[0];
    let beam = Beam { greedy: true, ..Beam::default() };
    let cands = predict_single_step(model(), &r.product, None, &beam).unwrap();
    assert_eq!(cands.len(), 1);
}
