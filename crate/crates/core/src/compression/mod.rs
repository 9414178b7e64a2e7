//! Weight and attention compression: N:M sparsity, mixed-precision
//! quantization, block-sparse masks and their on-disk container.

pub mod container;
pub mod mask;
pub mod nm;
pub mod pipeline;
pub mod quant;

pub use container::{Container, Entry, Payload};
pub use mask::{build_attention_mask, BlockSparseMask, MaskPattern, MASK_BLOCK};
pub use nm::{prune_nm, prune_nm_blocks, NmSparseTensor};
pub use quant::{dequantize_group, quantize_mixed, BitPlan, PackedQuantTensor};
pub use pipeline::{compress_model, nm_entry, CompressionPlan, MASK_ENTRY, WEIGHT_M};
