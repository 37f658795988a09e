//! Synthetic volumetric cohort: configuration, generation, and persistence.

pub mod config;
pub mod generate;
pub mod io;
pub mod templates;
pub mod types;

pub use config::CohortConfig;
pub use generate::generate_cohort_records;
pub use io::{generate_cohort, load_cohort, load_manifest, save_cohort};
pub use types::{
    AxisTransform, CohortManifest, LabelVector, OrientationCode, Plane, Priority, ReportDoc,
    SequenceMeta, Split, StudyDescriptor, StudyRecord, SubgroupAttrs, VoxelVolume,
};
