//! Parameter estimation with virtual-evidence supervision.

mod em;
mod ve;

pub use em::{
    e_step, em_train, initialize_params, m_step, sticky_motion_params, supervised_estimate, EmConfig,
    EmReport, IterationRecord, TrainingTrace,
};
pub use ve::{
    annotations_from_json, annotations_to_json, drop_labels, drop_labels_random,
    expand_annotations, ScheduleKind, VeSchedule, VeTable,
};
