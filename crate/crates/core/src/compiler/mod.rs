//! Graph lowering: hardware description, length buckets, weight layout,
//! memory allocation, instruction emission and program libraries.

pub mod bucket;
pub mod exponents;
pub mod hardware;
pub mod image;
pub mod layout;
pub mod library;
pub mod lower;
pub mod memory;
pub mod size;

pub use bucket::{bucketize, BucketSchedule};
pub use exponents::{compute_exponents, Exponents, LayerExponents, PROB_EXP};
pub use hardware::HardwareConfig;
pub use layout::{plan_layout, LinearLayout, LinearRole, ModelLayout};
pub use lower::{lower_graph, lower_instructions, LowerInput, Target};
pub use memory::{allocate_memory, ActRegion, KvMap, MemoryMap};
pub use library::{compile_library, HbmSegment, Manifest, ProgramLibrary};
pub use size::{library_size_report, SizeReport};
