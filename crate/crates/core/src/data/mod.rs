//! Embedding and manifest files, synthetic cohorts and the patient-level
//! split protocol.

mod embeddings;
mod manifest;
mod scenario;
mod split;

pub use embeddings::{decode_embeddings, encode_embeddings, read_embeddings, write_embeddings};
pub use manifest::{read_manifest, write_manifest, Manifest, PatientInfo, TileRecord, OOD_LABEL};
pub use scenario::{
    gen_eat_scenario, gen_external_cohort, gen_ind_scenario, gen_ood_patients, gen_ood_scenario, EatBlob, EatScenario,
    ExternalCohort, Scenario, ScenarioConfig,
};
pub use split::{make_split_plan, Resplit, SplitPlan, SplitRatios, DEFAULT_CAL_SIZE, DEFAULT_MODELS, DEFAULT_RESPLITS};
