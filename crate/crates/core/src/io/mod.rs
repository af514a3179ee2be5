pub mod checkpoint;
pub mod config;
pub mod pgm;
pub mod report;
pub mod svol;
pub mod synth;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use pgm::{axial_field_slice, axial_slice, Slice};
pub use report::{read_report, report_csv, write_report, REPORT_COLUMNS};
pub use svol::{import_raw, read_svol, write_svol, Container, SvolError};
pub use synth::{synth_pair, SynthKind, SynthPair};
