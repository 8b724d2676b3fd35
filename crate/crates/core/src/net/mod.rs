//! Network construction, execution and serialization.

mod checkpoint;
mod graph;
mod spec;
mod store;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use graph::{
    build_autoencoder, build_classifier, dec, enc, Gradients, Mode, Network, Trace, HEAD_BIAS, HEAD_WEIGHT, INIT_STD,
};
pub use spec::{Head, LayerGeom, NetworkSpec, Stage, KERNEL, PAD};
pub use store::{is_buffer, ParameterStore};
pub(crate) use spec::parse_list;
