//! Text-side models: vocabulary, name encoders, and the report
//! language model.

pub mod lm;
pub mod names;
pub mod vocab;

pub use lm::{
    data_fraction_sweep, load_lm, pretrain_report_lm, LmConfig, LmRunOutput, LmTrainConfig,
    PplPoint, ReportLM,
};
pub use names::{
    name_ids, plane_cosine_split, pretrain_sequence_name_encoder, NameEncoderConfig,
    NamePretrainConfig, NamePretrainOutput, SeqNameEncoder, StudyNameEncoder,
};
pub use vocab::Vocabulary;
