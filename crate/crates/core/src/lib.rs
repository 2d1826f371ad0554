pub mod attention;
pub mod autograd;
pub mod blocks;
pub mod cam;
pub mod dataset;
pub mod error;
pub mod graph;
mod kernels;
pub mod model;
pub mod nn;
pub mod param;
pub mod preprocess;
pub mod skeleton;
pub mod tensor;
pub mod train;

pub use attention::PartAtt;
pub use autograd::{Tape, Var};
pub use blocks::{BlockKind, BlockSpec, ModuleSpec, ResGcnModule, ResidualKind};
pub use dataset::{DatasetManifest, ManifestEntry, SplitRule};
pub use error::{Error, Result};
pub use graph::{AdjacencySet, SkeletonGraph};
pub use model::{build_model, count_params, parse_structure, Batch, ModelSpec, ParamCount, ResGcnModel, Structure};
pub use nn::Mode;
pub use param::{ParamId, ParamKind, ParamStore, Parameter};
pub use preprocess::{BranchInput, BranchKind, Branches};
pub use skeleton::SkeletonSequence;
pub use tensor::Tensor;
