//! Configuration files, checkpoints and PPM images.

mod checkpoint;
mod config;
mod ppm;

pub use checkpoint::{Checkpoint, DTYPE_F64, MAGIC, VERSION};
pub use config::{arch_section, parse_arch_section, DataConfig, EvalConfig, RunConfig};
pub use ppm::{decode_ppm, encode_ppm, quantize, quantize_u8, read_ppm, write_ppm};
