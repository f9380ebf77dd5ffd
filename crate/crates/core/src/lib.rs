//! Message-passing query embedding for conjunctive queries over typed
//! knowledge graphs.

pub mod checkpoint;
pub mod encoder;
pub mod eval;
pub mod kg;
pub mod numerics;
pub mod pipeline;
pub mod query;
pub mod sampler;
pub mod synthetic;
pub mod trainer;
pub mod util;

pub use pipeline::Error;
