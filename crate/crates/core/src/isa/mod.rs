//! Six-opcode instruction set: word codec, channel merging and programs.

pub mod instruction;
pub mod merge;
pub mod program;

pub use instruction::{decode_instruction, encode_instruction, Buffer, Flags, Instruction, MiscOp, Opcode, WORD_BYTES};
pub use merge::{expand_merged, expand_program, merge_channel_lds, merge_program, CHANNELS_PER_CORE, CHANNEL_BYTES};
pub use program::{Program, ProgramHeader, Stage, HEADER_BYTES};
