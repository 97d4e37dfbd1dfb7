//! On-disk formats, and the synthetic corpus generator.

pub mod checkpoint;
pub mod corpus;
pub mod manifest;
pub mod pft;
pub mod report;
pub mod synth;
pub mod table;

pub use checkpoint::{Checkpoint, Stage};
pub use corpus::Corpus;
pub use manifest::{Manifest, ManifestHeader, SampleRecord, Split};
pub use report::RunReport;
pub use synth::{synth_generate, SynthSpec};
