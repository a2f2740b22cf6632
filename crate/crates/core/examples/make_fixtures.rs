//! Regenerates the bundled test fixtures.
//!
//! ```text
//! cargo run -p mmcap-core --example make_fixtures
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use mmcap_core::corpus::{frame_span, segment_asr, write_records, FrameFeatures, Record, SegmentRecord, TextRecord, TimedToken};
use mmcap_core::metrics::EvalReport;
use mmcap_core::synth::keyword_segment;
use mmcap_core::tokenizer::Vocabulary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const VIDEO_DIM: usize = 16;

/// Words 0.4 s apart, segments 3 s apart.
fn timed(segments: &[String]) -> Vec<TimedToken> {
    let mut out = Vec::new();
    let mut t = 0.0;
    for s in segments {
        for w in s.split_whitespace() {
            out.push(TimedToken::new(w, (t * 10.0f64).round() / 10.0));
            t += 0.4;
        }
        t += 3.0;
    }
    out
}

fn cli_fixtures(dir: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut texts = Vec::new();

    let mut pretrain = Vec::new();
    for v in 0..200 {
        let asr: Vec<String> = (0..5).map(|_| keyword_segment(&mut rng).0).collect();
        texts.extend(asr.iter().cloned());
        let video_id = format!("pre{v:03}");
        for s in segment_asr(&video_id, &timed(&asr), 2.0, 320).unwrap() {
            pretrain.push(Record::Segment(SegmentRecord {
                video_id: s.video_id,
                seg_index: s.index,
                tokens: s.tokens,
                frames_path: None,
                frame_offset: 0,
                frame_count: 0,
                caption: None,
            }));
        }
    }
    assert_eq!(pretrain.len(), 1000);
    write_records(dir.join("pretrain.jsonl"), &pretrain).unwrap();

    let caps: Vec<Record> = (0..200)
        .map(|_| {
            let c = keyword_segment(&mut rng).1;
            texts.push(c.clone());
            Record::Text(TextRecord { text: c })
        })
        .collect();
    write_records(dir.join("cap_text.jsonl"), &caps).unwrap();

    fs::create_dir_all(dir.join("frames")).unwrap();
    let mut transcripts = Vec::new();
    let mut finetune = Vec::new();
    for v in 0..20 {
        let pairs: Vec<(String, String)> = (0..5).map(|_| keyword_segment(&mut rng)).collect();
        let asr: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
        texts.extend(pairs.iter().flat_map(|(a, c)| [a.clone(), c.clone()]));
        let video_id = format!("vid{v:02}");
        let tokens = timed(&asr);
        let seconds = tokens.last().unwrap().start.ceil() as usize + 1;
        let frames: Vec<f32> = (0..seconds * VIDEO_DIM).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let frames_path = format!("frames/{video_id}.mmf");
        FrameFeatures::new(VIDEO_DIM, frames).unwrap().save(dir.join(&frames_path)).unwrap();
        transcripts.push(serde_json::json!({"video_id": video_id, "tokens": tokens, "frames_path": frames_path}).to_string());
        for (s, (_, caption)) in segment_asr(&video_id, &tokens, 2.0, 320).unwrap().into_iter().zip(&pairs) {
            let (frame_offset, frame_count) = frame_span(&s);
            finetune.push(Record::Segment(SegmentRecord {
                video_id: s.video_id,
                seg_index: s.index,
                tokens: s.tokens,
                frames_path: Some(frames_path.clone()),
                frame_offset,
                frame_count,
                caption: Some(caption.clone()),
            }));
        }
    }
    fs::write(dir.join("transcripts.jsonl"), transcripts.join("\n") + "\n").unwrap();
    write_records(dir.join("finetune.jsonl"), &finetune).unwrap();

    Vocabulary::train(texts.iter(), 600).unwrap().save(dir.join("vocab.txt")).unwrap();
}

const OTHER_TAGS: [&str; 40] = [
    "outro",
    "closing",
    "conclusion",
    "finished result",
    "final result",
    "mixing the batter",
    "adding flour to the bowl",
    "pouring the milk",
    "whisking the eggs",
    "preheating the oven",
    "cutting vegetables into small pieces",
    "frying the onions",
    "plating the dish with garnish",
    "tasting the final dish",
    "showing the ingredients",
    "stirring the sauce",
    "applying glue to the edges",
    "sanding the board",
    "measuring the wood",
    "tightening the screws",
    "painting the first coat",
    "letting it dry",
    "removing the old tire",
    "installing the new part",
    "cleaning up the work area",
    "demonstrating the technique",
    "warm up exercises",
    "stretching the legs and arms",
    "explaining the rules",
    "tuning the guitar",
    "playing the chorus",
    "checking the tire pressure",
    "folding the paper in half",
    "drawing the outline",
    "shading the picture",
    "washing the brushes",
    "setting up the camera",
    "attaching the handle",
    "seasoning with salt and pepper",
    "serving it on a plate",
];

/// Timeline tags for 200 segments; about one in nine is an opening tag.
fn vitt_fixture(dir: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let intro = ["intro", "intro", "intro", "intro", "introduction", "opening"];
    let mut lines = Vec::new();
    let mut refs = Vec::new();
    for v in 0..25 {
        for s in 0..8 {
            let tag = if s == 0 && v < 22 {
                intro[rng.gen_range(0..intro.len())].to_string()
            } else {
                OTHER_TAGS[rng.gen_range(0..OTHER_TAGS.len())].to_string()
            };
            lines.push(serde_json::json!({"video_id": format!("vitt{v:02}"), "seg_index": s, "caption": tag}).to_string());
            refs.push(tag);
        }
    }
    fs::write(dir.join("vitt_refs.jsonl"), lines.join("\n") + "\n").unwrap();
    let table = mmcap_core::corpus::TagTable::default();
    let std_refs: Vec<String> = refs.iter().map(|r| table.standardize(r)).collect();
    let r = mmcap_core::metrics::constant_baseline(&std_refs, "intro").unwrap();
    fs::write(
        dir.join("vitt_expected.csv"),
        format!("{}\n{}\n", EvalReport::CSV_HEADER, r.csv_row()),
    )
    .unwrap();
    println!("{r}");
}

fn main() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let cli = root.join("../cli/tests/fixtures");
    let core = root.join("tests/fixtures");
    fs::create_dir_all(&cli).unwrap();
    fs::create_dir_all(&core).unwrap();
    cli_fixtures(&cli);
    vitt_fixture(&core);
}
