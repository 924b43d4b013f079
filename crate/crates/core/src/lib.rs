//! Multiscale organization and Haar analysis of attention-head tensors.

pub mod analyze;
pub mod error;
pub mod haar;
pub mod paraproduct;
pub mod questionnaire;
pub mod spectral;
pub mod synthetic;
pub mod tensor_io;
pub mod tree;
pub mod tree_metric;

pub use error::{Error, Result};
pub use haar::{build_tree_haar, expand_bihaar, expand_trihaar, l1_entropy, top_by_support, CoefficientSet, TreeHaarBasis};
pub use paraproduct::{decompose, decompose_softmax, GridFunction2D, ScalarC2};
pub use questionnaire::{organize2d, organize3d, QuestionnaireConfig, QuestionnaireResult};
pub use spectral::{AffinityMatrix, DiffusionEmbedding};
pub use tensor_io::{Tensor3, TensorMeta};
pub use tree::{build_dyadic_tree, build_flexible_tree, PartitionTree, TreeParams};
pub use tree_metric::{EmdConfig, TensorAxis};
