//! Per-second visual feature vectors and their binary container.
//!
//! File layout (little-endian): `b"MMF1"`, `dim: u32`, `count: u32`, then
//! `count * dim` `f32` values, one frame per row.

use std::io::{Read, Write};
use std::path::Path;

use super::segment::AsrSegment;
use crate::error::{Error, Result};

pub const FRAME_MAGIC: &[u8; 4] = b"MMF1";
pub const MAX_FRAMES: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    dim: usize,
    data: Vec<f32>,
}

impl FrameFeatures {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Data(format!("{} values do not form frames of width {dim}", data.len())));
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Frames `[start, start + count)` clipped to what exists.
    pub fn slice(&self, start: usize, count: usize) -> Self {
        let lo = start.min(self.len());
        let hi = start.saturating_add(count).min(self.len());
        Self {
            dim: self.dim,
            data: self.data[lo * self.dim..hi * self.dim].to_vec(),
        }
    }

    /// Keeps the leading `max` frames.
    pub fn truncate(&mut self, max: usize) {
        self.data.truncate(max * self.dim);
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(FRAME_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head)
            .map_err(|e| Error::Data(format!("frame file header: {e}")))?;
        if &head[..4] != FRAME_MAGIC {
            return Err(Error::Data("frame file has wrong magic".into()));
        }
        let dim = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut bytes = vec![0u8; dim * count * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Data(format!("frame file payload ({count} x {dim}): {e}")))?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Self::new(dim, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(12 + self.data.len() * 4);
        self.write_to(&mut buf).expect("writing to a Vec");
        std::fs::write(path, buf).map_err(Error::io(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(Error::io(path))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

/// Frame-index range `(offset, count)` covered by a segment at one frame per
/// second, before truncation.
pub fn frame_span(segment: &AsrSegment) -> (usize, usize) {
    let first = segment.start().floor() as usize;
    let last = segment.end().floor() as usize;
    (first, last - first + 1)
}

/// Frames whose second falls inside the segment, truncated to the first
/// [`MAX_FRAMES`]. A segment past the end of the video gets zero frames.
pub fn pair_frames(segment: &AsrSegment, video: &FrameFeatures) -> FrameFeatures {
    if segment.tokens.is_empty() {
        return FrameFeatures::empty(video.dim());
    }
    let (offset, count) = frame_span(segment);
    let mut frames = video.slice(offset, count);
    frames.truncate(MAX_FRAMES);
    frames
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TimedToken;

    fn video(seconds: usize, dim: usize) -> FrameFeatures {
        FrameFeatures::new(dim, (0..seconds * dim).map(|i| (i / dim) as f32).collect()).unwrap()
    }

    fn seg(start: f64, end: f64) -> AsrSegment {
        AsrSegment {
            video_id: "v".into(),
            index: 0,
            tokens: vec![TimedToken::new("a", start), TimedToken::new("b", end)],
        }
    }

    #[test]
    fn attaches_concurrent_frames() {
        let f = pair_frames(&seg(10.0, 20.0), &video(100, 3));
        assert_eq!(f.len(), 11);
        assert_eq!(f.frame(0)[0], 10.0);
        assert_eq!(f.frame(10)[0], 20.0);
    }

    #[test]
    fn long_segment_keeps_first_forty() {
        let f = pair_frames(&seg(5.0, 75.0), &video(100, 2));
        assert_eq!(f.len(), 40);
        assert_eq!(f.frame(0)[0], 5.0);
        assert_eq!(f.frame(39)[0], 44.0);
    }

    #[test]
    fn segment_past_video_end_has_no_frames() {
        let f = pair_frames(&seg(50.0, 60.0), &video(30, 2));
        assert!(f.is_empty());
    }

    #[test]
    fn binary_round_trip_and_magic_check() {
        let v = video(4, 3);
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MMF1");
        assert_eq!(buf.len(), 12 + 4 * 3 * 4);
        assert_eq!(FrameFeatures::read_from(buf.as_slice()).unwrap(), v);
        buf[0] = b'X';
        assert!(FrameFeatures::read_from(buf.as_slice()).is_err());
    }
}
