//! Data model, the VTEN archive format and audio/video time alignment.

mod align;
mod archive;
mod sequence;

pub use align::{align_time, source_position};
pub use archive::{
    read_tensor_archive, write_tensor_archive, Dtype, NamedTensorArchive, Tensor, TensorData, MAGIC, VERSION,
};
pub use sequence::{ExpressionSequence, PpgSequence, ROW_SUM_TOL};
