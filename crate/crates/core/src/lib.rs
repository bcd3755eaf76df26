pub mod geom;
pub mod scene;
pub mod protocol;
pub mod env;
pub mod reward;
pub mod grpo;
pub mod policy;
pub mod pipeline;
pub mod harness;
