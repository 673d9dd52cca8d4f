pub mod config;
pub mod distillation_data;
pub mod error;
pub mod eval_bench;
pub mod expression_encoder;
pub mod image;
pub mod linalg;
pub mod model;
pub mod nelf_renderer;
pub mod nn;
pub mod pipeline;
pub mod ray_geometry;
pub mod seed;
pub mod training;
pub mod warping_field;

pub use error::{Error, Result};
