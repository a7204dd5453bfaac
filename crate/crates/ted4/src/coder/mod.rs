//! Bit-exact entropy coding and the bitstream container.

pub mod container;
pub mod range;

pub use container::{container_stats, read_container, symbol_bounds, write_container, ContainerStats, SectionId};
pub use range::{
    build_cdf, crc32, decode_mask, encode_mask, BitModel, RangeDecoder, RangeEncoder, SymbolCdf,
    PROB_BITS, TOTAL,
};
