//! Collaborative annotation engine: an LLM-style annotator supplies weak
//! labels, a small softmax network distills them with loss-based clean/noisy
//! separation and consistency training, and condensed demonstration pools
//! feed the next annotation round.

pub mod annotator;
pub mod data;
pub mod demo_pool;
pub mod error;
pub mod eval;
pub mod io;
pub mod orchestrator;
pub mod retrieval;
pub mod sim;
pub mod selection;
pub mod selftrain;
pub mod slm;

pub use data::{Annotation, AnnotationSource, Dataset, LabelSpace, RunConfig, Sample, Split};
pub use error::{EngineError, Result};
