//! Dense reverse-mode differentiation, MLPs over spatial jets, and Adam.

mod container;
mod encoding;
pub mod gradcheck;
mod graph;
mod jet;
mod mlp;
mod optim;
mod params;
mod tensor;

pub use container::{write_atomic, Container, Precision, FORMAT_VERSION};
pub use encoding::{positional_encode, PositionalEncodingSpec};
pub use graph::{laplace_density_value, Activation, Gradients, Graph, Var};
pub use jet::{spatial_gradient, Jet, SPATIAL_BLOCKS};
pub use mlp::{init_mlp, mlp_forward, MlpSpec, OutputInit};
pub use optim::{lr_schedule, AdamConfig, AdamState};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;
