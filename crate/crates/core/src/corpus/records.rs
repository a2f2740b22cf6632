//! Line-oriented JSON segment files.
//!
//! * `asr+video`: `{video_id, seg_index, tokens: [{w, t}], frames_path, frame_offset, frame_count}`
//! * `cap-text`: `{text}`
//! * `asr+video+cap`: the `asr+video` record plus `caption`
//!
//! `frames_path` is resolved relative to the segment file's directory and may
//! be null for text-only segments.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::frames::{FrameFeatures, MAX_FRAMES};
use super::segment::{AsrSegment, TimedToken};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    AsrVideo,
    CapText,
    AsrVideoCap,
}

impl FromStr for RecordKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asr+video" => Ok(Self::AsrVideo),
            "cap-text" => Ok(Self::CapText),
            "asr+video+cap" => Ok(Self::AsrVideoCap),
            other => Err(Error::Config(format!("unknown record kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub video_id: String,
    pub seg_index: usize,
    pub tokens: Vec<TimedToken>,
    #[serde(default)]
    pub frames_path: Option<String>,
    #[serde(default)]
    pub frame_offset: usize,
    #[serde(default)]
    pub frame_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Segment(SegmentRecord),
    Text(TextRecord),
}

/// A segment with its frames resolved. `caption` is present for supervised data.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedSegment {
    pub segment: AsrSegment,
    pub frames: Option<FrameFeatures>,
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Example {
    Segment(CaptionedSegment),
    Text(String),
}

/// Streaming reader that validates every line against the record schema.
pub struct RecordReader {
    path: PathBuf,
    kind: RecordKind,
    lines: Lines<BufReader<File>>,
    line_no: usize,
}

impl RecordReader {
    pub fn open(path: impl AsRef<Path>, kind: RecordKind) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(Error::io(&path))?;
        Ok(Self {
            path,
            kind,
            lines: BufReader::new(file).lines(),
            line_no: 0,
        })
    }

    fn parse(&self, line: &str) -> Result<Record> {
        let err = |message: String| Error::Record {
            path: self.path.clone(),
            line: self.line_no,
            message,
        };
        match self.kind {
            RecordKind::CapText => {
                let r: TextRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
                Ok(Record::Text(r))
            }
            RecordKind::AsrVideo | RecordKind::AsrVideoCap => {
                let r: SegmentRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
                if self.kind == RecordKind::AsrVideoCap {
                    match &r.caption {
                        None => return Err(err("missing field `caption`".into())),
                        Some(c) if c.trim().is_empty() => return Err(err("field `caption` is empty".into())),
                        _ => {}
                    }
                }
                if let Some(w) = r.tokens.windows(2).find(|w| w[1].start < w[0].start) {
                    return Err(err(format!("field `tokens` is not time-sorted at {:?}", w[1].word)));
                }
                Ok(Record::Segment(r))
            }
        }
    }
}

impl Iterator for RecordReader {
    type Item = Result<Record>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            match line {
                Err(e) => return Some(Err(Error::io(&self.path)(e))),
                Ok(l) if l.trim().is_empty() => continue,
                Ok(l) => return Some(self.parse(&l)),
            }
        }
    }
}

/// Streams examples, loading referenced frame files once each.
pub struct SegmentLoader {
    records: RecordReader,
    base: PathBuf,
    cache: HashMap<PathBuf, Rc<FrameFeatures>>,
}

impl SegmentLoader {
    fn resolve(&mut self, r: SegmentRecord) -> Result<CaptionedSegment> {
        let frames = match &r.frames_path {
            None => None,
            Some(p) => {
                let path = self.base.join(p);
                let video = match self.cache.get(&path) {
                    Some(v) => Rc::clone(v),
                    None => {
                        let v = Rc::new(FrameFeatures::load(&path)?);
                        self.cache.insert(path, Rc::clone(&v));
                        v
                    }
                };
                let mut f = video.slice(r.frame_offset, r.frame_count);
                f.truncate(MAX_FRAMES);
                Some(f)
            }
        };
        Ok(CaptionedSegment {
            segment: AsrSegment {
                video_id: r.video_id,
                index: r.seg_index,
                tokens: r.tokens,
            },
            frames,
            caption: r.caption,
        })
    }
}

impl Iterator for SegmentLoader {
    type Item = Result<Example>;

    fn next(&mut self) -> Option<Self::Item> {
        let rec = self.records.next()?;
        Some(rec.and_then(|r| match r {
            Record::Text(t) => Ok(Example::Text(t.text)),
            Record::Segment(s) => self.resolve(s).map(Example::Segment),
        }))
    }
}

pub fn load_segments(path: impl AsRef<Path>, kind: RecordKind) -> Result<SegmentLoader> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(SegmentLoader {
        records: RecordReader::open(path, kind)?,
        base,
        cache: HashMap::new(),
    })
}

/// Writes one JSON object per line.
pub fn write_records<'a, I>(path: impl AsRef<Path>, records: I) -> Result<usize>
where
    I: IntoIterator<Item = &'a Record>,
{
    let path = path.as_ref();
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    let mut n = 0;
    for r in records {
        let line = match r {
            Record::Segment(s) => serde_json::to_string(s),
            Record::Text(t) => serde_json::to_string(t),
        }
        .map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(Error::io(path))?;
        n += 1;
    }
    w.flush().map_err(Error::io(path))?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn empty_file_is_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "e.jsonl", "");
        assert_eq!(load_segments(&p, RecordKind::CapText).unwrap().count(), 0);
    }

    #[test]
    fn cap_text_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.jsonl", "{\"text\": \"add the eggs\"}\n");
        let all: Vec<_> = load_segments(&p, RecordKind::CapText).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(all, vec![Example::Text("add the eggs".into())]);
    }

    #[test]
    fn missing_caption_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "s.jsonl",
            "{\"video_id\": \"v\", \"seg_index\": 0, \"tokens\": [{\"w\": \"hi\", \"t\": 0.0}], \"frames_path\": null}\n",
        );
        let err = load_segments(&p, RecordKind::AsrVideoCap).unwrap().next().unwrap().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("caption") && msg.contains(":1:"), "{msg}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s.jsonl", "{\"text\": \"ok\"}\n\n{\"txt\": 3}\n");
        let results: Vec<_> = load_segments(&p, RecordKind::CapText).unwrap().collect();
        assert!(results[0].is_ok());
        let msg = results[1].as_ref().unwrap_err().to_string();
        assert!(msg.contains(":3:") && msg.contains("text"), "{msg}");
    }

    #[test]
    fn frames_are_resolved_relative_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let video = FrameFeatures::new(2, (0..20).map(|i| i as f32).collect()).unwrap();
        video.save(dir.path().join("v.mmf")).unwrap();
        let rec = Record::Segment(SegmentRecord {
            video_id: "v".into(),
            seg_index: 0,
            tokens: vec![TimedToken::new("a", 2.0), TimedToken::new("b", 4.5)],
            frames_path: Some("v.mmf".into()),
            frame_offset: 2,
            frame_count: 3,
            caption: Some("cap".into()),
        });
        let p = dir.path().join("s.jsonl");
        write_records(&p, [&rec]).unwrap();
        let ex: Vec<_> = load_segments(&p, RecordKind::AsrVideoCap).unwrap().collect::<Result<_>>().unwrap();
        let Example::Segment(seg) = &ex[0] else { panic!() };
        let f = seg.frames.as_ref().unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f.frame(0), &[4.0, 5.0]);
        assert_eq!(seg.caption.as_deref(), Some("cap"));
    }

    #[test]
    fn writer_reader_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<Record> = (0..5)
            .map(|i| {
                Record::Segment(SegmentRecord {
                    video_id: format!("vid{}", i / 2),
                    seg_index: i % 2,
                    tokens: vec![TimedToken::new("so", 0.1 * i as f64), TimedToken::new("now", 1.0 / 3.0 + i as f64)],
                    frames_path: (i % 2 == 0).then(|| "f.mmf".to_string()),
                    frame_offset: i,
                    frame_count: 7,
                    caption: None,
                })
            })
            .collect();
        let p = dir.path().join("r.jsonl");
        write_records(&p, &recs).unwrap();
        let back: Vec<Record> = RecordReader::open(&p, RecordKind::AsrVideo).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(back, recs);
    }
}
