//! On-disk formats: the tensor container, PFM disparity maps, PGM images,
//! and `key=value` text.

mod container;
mod kv;
mod pfm;
mod pgm;

pub use container::{decode_tensor, encode_tensor, read_tensor, write_tensor, MAGIC, VERSION};
pub use kv::KvFile;
pub use pfm::{decode_pfm, encode_pfm, pfm_header, read_pfm, write_pfm};
pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};
