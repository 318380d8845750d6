//! Quantization-aware classification of JPEG-compressed images: QST
//! extraction, a JPEG codec simulator, quantization-aware confidence
//! weighting, QST-conditioned batch normalization, a small CPU network core
//! and the two-phase training procedure.

pub mod codec;
pub mod data;
pub mod jpeg;
pub mod model;
pub mod nn;
pub mod qabn;
pub mod qac;
pub mod train;

pub use codec::{compress_rgb8, scale_default_table, CodecError};
pub use data::{DataError, Dataset, SampleRecord, SourceSet, SyntheticSpec};
pub use jpeg::{classify_qst, extract_qst, AssembleMode, JpegError, Qst, QstClass};
pub use model::{ArchConfig, ModelError, Route, Tap, TinyNet};
pub use nn::{Checkpoint, CheckpointError, Mode, NnError, Tensor};
pub use qabn::{MetaInput, MetaLearner, MetaOutput, QabnLayer, QstBasisSet};
pub use qac::{qac, QacConfig, Reduction};
pub use train::{EvalReport, GapReport, TrainConfig, TrainError};
