//! Data curation: alignment scoring, top-fraction filtering, key-frames,
//! captioning, long/short rewriting, post-processing and caption mixing.

pub mod clients;
pub mod record;
pub mod stages;

pub use clients::{ClientSuite, RetryPolicy, Variant};
pub use record::{read_corpus, write_jsonl, Corpus, Disposition, FrameStore, Rejection, VideoTextRecord};
pub use stages::{run_stage, run_stages, PipelineConfig, Stage, StageContext, StageOutput, StageReport};
