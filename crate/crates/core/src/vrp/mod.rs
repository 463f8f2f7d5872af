//! Routing variants, instances, solution evaluation and feasibility.

mod dataset;
mod instance;
mod solution;
mod variant;

pub use dataset::{
    decode_dataset, load_dataset, save_dataset, to_text, write_dataset, DATASET_MAGIC,
    DATASET_VERSION,
};
pub use instance::{
    augment8, dist, generate_instance, generate_instance_with, GeneratorConfig, Instance, Point,
    TimeWindows,
};
pub use solution::{
    check_feasibility, evaluate, route_feasible, route_length, FeasibilityReport, Solution,
    Violation, ViolationKind, FEAS_TOL,
};
pub use variant::{finetune_variants, pretrain_variants, VariantSpec};
