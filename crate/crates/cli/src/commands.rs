use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mmcap_core::corpus::{
    frame_span, load_segments, segment_asr, write_records, EncoderInput, Example, Record, RecordKind, SegmentRecord,
    TagTable, TimedToken,
};
use mmcap_core::decode::{generate_captions, DecodeSettings};
use mmcap_core::metrics::{agreement_pool, constant_baseline, EvalReport, Timeline};
use mmcap_core::model::{init_from, init_params, Checkpoint};
use mmcap_core::objectives::{rng_stream, truncate_text, Stream, Trainer, TrainingData, TrainLog};
use mmcap_core::tokenizer::{Style, Vocabulary};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{config_err, require, EvalMode, RunConfig, RESOLVED_CONFIG};

pub const SEGMENTS_FILE: &str = "segments.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
const LOCK_FILE: &str = ".lock";

/// An output directory held exclusively for the lifetime of one run.
struct OutDir {
    path: PathBuf,
}

impl OutDir {
    fn open(path: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))?;
        let lock = path.join(LOCK_FILE);
        OpenOptions::new().write(true).create_new(true).open(&lock).with_context(|| {
            format!("output directory {} is in use by another run (delete {} if stale)", path.display(), lock.display())
        })?;
        Ok(Self { path: path.to_path_buf() })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn echo(&self, cfg: &RunConfig) -> anyhow::Result<()> {
        let p = self.file(RESOLVED_CONFIG);
        fs::write(&p, cfg.to_toml()?).with_context(|| format!("cannot write {}", p.display()))
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_FILE));
    }
}

/// Reads one JSON value per non-blank line, naming the line on failure.
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("cannot read {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| mmcap_core::Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct Transcript {
    video_id: String,
    tokens: Vec<TimedToken>,
    #[serde(default)]
    frames_path: Option<String>,
}

pub fn segment(mut cfg: RunConfig, out: &Path) -> anyhow::Result<()> {
    cfg.data.absolutize();
    let input = require(&cfg.data.asr, "asr", "segment")?.to_path_buf();
    let out = OutDir::open(out)?;
    out.echo(&cfg)?;
    let base = input.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = File::open(&input).with_context(|| format!("cannot open {}", input.display()))?;
    let mut records = Vec::new();
    let mut videos = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("cannot read {}", input.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let at_line = |message: String| mmcap_core::Error::Record {
            path: input.clone(),
            line: i + 1,
            message,
        };
        let t: Transcript = serde_json::from_str(&line).map_err(|e| at_line(e.to_string()))?;
        let segs = segment_asr(&t.video_id, &t.tokens, cfg.segment.gap, cfg.segment.max_len).map_err(|e| match e {
            mmcap_core::Error::Data(m) => at_line(m).into(),
            other => anyhow::Error::from(other),
        })?;
        let frames = t.frames_path.map(|p| base.join(p).to_string_lossy().into_owned());
        videos += 1;
        for s in segs {
            let (offset, count) = frame_span(&s);
            records.push(Record::Segment(SegmentRecord {
                video_id: s.video_id,
                seg_index: s.index,
                tokens: s.tokens,
                frame_offset: if frames.is_some() { offset } else { 0 },
                frame_count: if frames.is_some() { count } else { 0 },
                frames_path: frames.clone(),
                caption: None,
            }));
        }
    }
    let path = out.file(SEGMENTS_FILE);
    let n = write_records(&path, &records)?;
    println!("{n} segments from {videos} videos written to {}", path.display());
    Ok(())
}

/// Text of one corpus line: a segment record's words and caption, a
/// cap-text record, or the raw line.
fn corpus_texts(line: &str) -> Vec<String> {
    let Ok(serde_json::Value::Object(m)) = serde_json::from_str::<serde_json::Value>(line) else {
        return vec![line.to_string()];
    };
    let mut out = Vec::new();
    if let Some(serde_json::Value::String(t)) = m.get("text") {
        out.push(t.clone());
    }
    if let Some(serde_json::Value::Array(toks)) = m.get("tokens") {
        let words: Vec<&str> = toks.iter().filter_map(|t| t.get("w").and_then(|w| w.as_str())).collect();
        out.push(words.join(" "));
    }
    if let Some(serde_json::Value::String(c)) = m.get("caption") {
        out.push(c.clone());
    }
    out
}

pub fn train_bpe(mut cfg: RunConfig, out: &Path) -> anyhow::Result<()> {
    cfg.data.absolutize();
    if cfg.data.bpe_inputs.is_empty() {
        return Err(config_err("data.bpe_inputs is required for train-bpe"));
    }
    let out = OutDir::open(out)?;
    out.echo(&cfg)?;
    let mut texts = Vec::new();
    for p in &cfg.data.bpe_inputs {
        let file = File::open(p).with_context(|| format!("cannot open {}", p.display()))?;
        for line in BufReader::new(file).lines() {
            let line = line.with_context(|| format!("cannot read {}", p.display()))?;
            if !line.trim().is_empty() {
                texts.extend(corpus_texts(&line));
            }
        }
    }
    let vocab = Vocabulary::train(texts.iter(), cfg.bpe.size)?;
    let path = out.file(VOCAB_FILE);
    vocab.save(&path)?;
    println!("vocabulary of {} entries ({} merges) written to {}", vocab.len(), vocab.merges().len(), path.display());
    Ok(())
}

fn load_data(path: &Path, kind: RecordKind, vocab: &Vocabulary, data: &mut TrainingData) -> anyhow::Result<()> {
    for ex in load_segments(path, kind)? {
        data.push_example(ex?, vocab);
    }
    Ok(())
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    ckpt.save(&tmp)?;
    fs::rename(&tmp, path).with_context(|| format!("cannot write {}", path.display()))
}

pub fn train(mut cfg: RunConfig, out: &Path, pretraining: bool) -> anyhow::Result<()> {
    let command = if pretraining { "pretrain" } else { "finetune" };
    cfg.data.absolutize();
    let train = cfg.require_train()?.clone();
    if train.strategy.is_pretraining() != pretraining {
        return Err(config_err(format!(
            "train.strategy {} cannot be used with {command}",
            train.strategy
        )));
    }
    train.validate()?;
    let vocab = Vocabulary::load(require(&cfg.data.vocab, "vocab", command)?)?;
    let model = cfg.resolve_model(vocab.len())?;
    let segments = require(&cfg.data.segments, "segments", command)?;
    let kind = if pretraining { RecordKind::AsrVideo } else { RecordKind::AsrVideoCap };
    let mut data = TrainingData::default();
    load_data(segments, kind, &vocab, &mut data)?;
    if let Some(p) = &cfg.data.cap_text {
        load_data(p, RecordKind::CapText, &vocab, &mut data)?;
    }

    let out = OutDir::open(out)?;
    out.echo(&cfg)?;
    let log_path = out.file(TRAIN_LOG_FILE);
    let epochs_path = out.file(EPOCH_LOG_FILE);
    let mut trainer = match &cfg.data.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.config != model {
                return Err(config_err(format!("model section does not match the checkpoint {}", p.display())));
            }
            let t = Trainer::resume(train.clone(), ckpt, &data)?;
            println!("resuming after epoch {}", t.epoch);
            t
        }
        None => {
            for p in [&log_path, &epochs_path] {
                if p.exists() {
                    fs::remove_file(p).with_context(|| format!("cannot remove {}", p.display()))?;
                }
            }
            let mut rng = rng_stream(train.seed, Stream::Init, 0);
            let params = match &cfg.data.init_checkpoint {
                Some(p) if !pretraining => {
                    let src = Checkpoint::load(p)?;
                    let (params, loaded) = init_from(&model, &src.params, &mut rng)?;
                    println!(
                        "loaded {} of {} tensors from {}",
                        loaded.len(),
                        params.iter().count(),
                        p.display()
                    );
                    params
                }
                Some(_) => return Err(config_err("data.init_checkpoint is only used by finetune")),
                None => init_params(&model, &mut rng)?,
            };
            Trainer::new(train.clone(), model, params, &data)?
        }
    };

    let mut log = TrainLog::open(&log_path)?;
    let fresh = !epochs_path.exists();
    let mut epochs = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&epochs_path)
        .with_context(|| format!("cannot open {}", epochs_path.display()))?;
    if fresh {
        writeln!(epochs, "epoch,mean_loss")?;
    }
    let ckpt_path = out.file(CHECKPOINT_FILE);
    while trainer.epoch < train.epochs {
        let mut io = Ok(());
        let summary = trainer.run_epoch(&data, |row| {
            if io.is_ok() {
                io = log.write(row);
            }
        })?;
        io.and_then(|_| log.flush()).with_context(|| format!("cannot write {}", log_path.display()))?;
        writeln!(epochs, "{},{}", summary.epoch, summary.mean_loss)?;
        save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
        let per_kind: Vec<String> = summary.per_kind.iter().map(|(k, l)| format!("{k} {l:.4}")).collect();
        println!(
            "epoch {}/{}: mean loss {:.4} ({})",
            summary.epoch,
            train.epochs,
            summary.mean_loss,
            per_kind.join(", ")
        );
    }
    if !ckpt_path.exists() {
        save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
    }
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub video_id: String,
    pub seg_index: usize,
    pub caption: String,
}

pub fn predict(cfg: RunConfig, out: &Path) -> anyhow::Result<()> {
    if cfg.decode.beam == 0 {
        return Err(config_err("decode.beam must be at least 1"));
    }
    let ckpt_path = require(&cfg.data.checkpoint, "checkpoint", "predict")?;
    let vocab = Vocabulary::load(require(&cfg.data.vocab, "vocab", "predict")?)?;
    let segments = require(&cfg.data.segments, "segments", "predict")?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = &ckpt.config;
    if model.vocab_size != vocab.len() {
        return Err(config_err(format!(
            "data.vocab has {} entries but the checkpoint expects {}",
            vocab.len(),
            model.vocab_size
        )));
    }
    let mut keys = Vec::new();
    let mut inputs = Vec::new();
    let mut ignored_video = false;
    for ex in load_segments(segments, RecordKind::AsrVideo)? {
        let Example::Segment(s) = ex? else { continue };
        let frames = s.frames.filter(|f| !f.is_empty());
        ignored_video |= frames.is_some() && !model.multimodal;
        inputs.push(EncoderInput {
            tokens: truncate_text(vocab.encode(&s.segment.text())),
            style: Style::Asr,
            frames: if model.multimodal { frames } else { None },
        });
        keys.push((s.segment.video_id, s.segment.index));
    }
    if ignored_video {
        eprintln!("warning: the checkpoint is text-only; video features in {} are ignored", segments.display());
    }

    let out = OutDir::open(out)?;
    out.echo(&cfg)?;
    let settings = DecodeSettings {
        beam: cfg.decode.beam,
        max_len: cfg.decode.max_len,
    };
    let hyps = generate_captions(model, &ckpt.params, &inputs, settings)?;
    let mut lines = Vec::with_capacity(hyps.len());
    for ((video_id, seg_index), h) in keys.into_iter().zip(&hyps) {
        let p = Prediction {
            video_id,
            seg_index,
            caption: vocab.decode(&h.tokens)?,
        };
        lines.push(serde_json::to_string(&p)?);
    }
    let path = out.file(PREDICTIONS_FILE);
    write_lines(&path, lines)?;
    println!("{} captions written to {}", hyps.len(), path.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct Reference {
    video_id: String,
    seg_index: usize,
    caption: String,
}

#[derive(Debug, Deserialize)]
struct TimelineRecord {
    video_id: String,
    #[allow(dead_code)]
    annotator: String,
    segments: Vec<TimelineEntry>,
}

#[derive(Debug, Deserialize)]
struct TimelineEntry {
    start: usize,
    tag: String,
}

fn tag_table(cfg: &RunConfig) -> anyhow::Result<TagTable> {
    Ok(match &cfg.data.tags {
        Some(p) => TagTable::load(p)?,
        None => TagTable::default(),
    })
}

fn standard_report(cfg: &RunConfig) -> anyhow::Result<EvalReport> {
    let preds: Vec<Prediction> = read_jsonl(require(&cfg.data.predictions, "predictions", "eval")?)?;
    let refs: Vec<Reference> = read_jsonl(require(&cfg.data.references, "references", "eval")?)?;
    for (i, (p, r)) in preds.iter().zip(&refs).enumerate() {
        if (&p.video_id, p.seg_index) != (&r.video_id, r.seg_index) {
            bail!(mmcap_core::Error::Data(format!(
                "segment ids differ at entry {}: prediction ({}, {}) vs reference ({}, {})",
                i + 1,
                p.video_id,
                p.seg_index,
                r.video_id,
                r.seg_index
            )));
        }
    }
    if preds.len() != refs.len() {
        bail!(mmcap_core::Error::Data(format!(
            "{} predictions but {} references; first unmatched entry is {}",
            preds.len(),
            refs.len(),
            preds.len().min(refs.len()) + 1
        )));
    }
    let c: Vec<&str> = preds.iter().map(|p| p.caption.as_str()).collect();
    let r: Vec<&str> = refs.iter().map(|r| r.caption.as_str()).collect();
    Ok(EvalReport::compute(&c, &r)?)
}

pub fn eval(mut cfg: RunConfig, out: &Path) -> anyhow::Result<()> {
    cfg.data.absolutize();
    let mode = cfg.eval.parse_mode()?;
    let report = match &mode {
        EvalMode::Standard => standard_report(&cfg)?,
        EvalMode::Constant(tag) => {
            let table = tag_table(&cfg)?;
            let refs: Vec<Reference> = read_jsonl(require(&cfg.data.references, "references", "eval")?)?;
            let refs: Vec<String> = refs.iter().map(|r| table.standardize(&r.caption)).collect();
            constant_baseline(&refs, &table.standardize(tag))?
        }
        EvalMode::Agreement => {
            let table = tag_table(&cfg)?;
            let recs: Vec<TimelineRecord> = read_jsonl(require(&cfg.data.references, "references", "eval")?)?;
            let mut videos: BTreeMap<String, Vec<Timeline>> = BTreeMap::new();
            for r in recs {
                let timeline = r.segments.into_iter().map(|e| (e.start, table.standardize(&e.tag))).collect();
                videos.entry(r.video_id).or_default().push(timeline);
            }
            agreement_pool(&videos.into_values().collect::<Vec<_>>())?
        }
    };
    let out = OutDir::open(out)?;
    out.echo(&cfg)?;
    fs::write(out.file("report.txt"), format!("{report}\n"))?;
    fs::write(out.file("report.csv"), format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()))?;
    fs::write(out.file("segments.csv"), report.segments_csv())?;
    println!("{report}");
    Ok(())
}
