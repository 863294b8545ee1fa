//! Graph surgery and energy-ranked single-step prediction.

mod mapping;
mod predict;
mod surgery;

pub use mapping::{map_reactants, MappingLimits};
pub use predict::{
    evaluate_query, predict_single_step, Beam, Candidate, EnergyTrace, PredictError, Predictor, QueryError,
};
pub use surgery::{
    apply_edits, apply_labels, edited_graph, reactant_set_key, split_reactants, Edits, Surgery, SurgeryError,
};
