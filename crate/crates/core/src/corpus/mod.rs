//! Data model and ingestion: segmentation, frame pairing, tag
//! standardization, segment files and batch assembly.

mod batch;
mod frames;
mod records;
mod segment;
mod tags;

pub use batch::{make_batch, Batch, Cycler, EncoderInput, BATCH_SIZE, MAX_TEXT_TOKENS};
pub use frames::{frame_span, pair_frames, FrameFeatures, FRAME_MAGIC, MAX_FRAMES};
pub use records::{
    load_segments, write_records, CaptionedSegment, Example, Record, RecordKind, RecordReader, SegmentLoader,
    SegmentRecord, TextRecord,
};
pub use segment::{segment_asr, AsrSegment, TimedToken, GAP_THRESHOLD_SECS, MAX_SEGMENT_WORDS};
pub use tags::TagTable;
