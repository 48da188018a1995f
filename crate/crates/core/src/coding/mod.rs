//! Rate accounting and entropy coding of token streams.
//!
//! [`CodeHistogram`] collects codeword frequencies per stage, from which the
//! empirical entropy and the entropy-bound bitrate follow. The raw bitrate
//! counts `⌈log₂V⌉` bits per index. [`Bitstream`] is the on-disk container,
//! either raw-packed or canonical-Huffman coded per stage.

mod bitio;
mod bitstream;
mod huffman;
mod rate;

pub use bitio::{BitReader, BitWriter};
pub use bitstream::{
    decode_payload, decode_stream, encode_stream, encode_stream_with_tables, Bitstream, CodingMode, StreamHeader,
    STREAM_HEADER_LEN, STREAM_MAGIC, STREAM_VERSION,
};
pub use huffman::{build_huffman, build_smoothed_huffman, HuffmanDecoder, HuffmanTable, MAX_CODE_LEN};
pub use rate::{
    bits_per_index, empirical_entropy, entropy_bitrate, raw_bitrate, CodeHistogram, EntropyReport,
    RateReport,
};
