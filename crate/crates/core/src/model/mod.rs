pub mod backbone;
pub mod head;
pub mod loss;

pub use backbone::{build_backbone, Backbone, BackboneConfig, BlockConfig};
pub use head::{build_head, Head, HeadConfig, HeadKind};
pub use loss::{cross_entropy, nt_xent};
