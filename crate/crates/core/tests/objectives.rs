mod common;

use std::collections::BTreeMap;

use common::{random_params, tiny_config, toy_data, VIDEO_DIM};
use mmcap_core::corpus::FrameFeatures;
use mmcap_core::model::{Checkpoint, Graph, ModelConfig, ModelSize};
use mmcap_core::objectives::*;
use mmcap_core::tokenizer::Style;
use mmcap_core::Error;
use mmcap_tensor::{Gradients, Tape};
use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Step lists per strategy, written out from the objectives table:
/// (strategy, multimodal model, steps).
const TABLE: &[(&str, bool, &[&str])] = &[
    ("MASS", false, &["CAP->CAP", "ASR->ASR"]),
    ("MASS", true, &["CAP->CAP", "ASR->ASR"]),
    ("MASSvid", true, &["CAP->CAP", "ASR+video->ASR"]),
    ("MASSdrop", true, &["CAP->CAP", "ASR+video->ASR[drop]"]),
    ("MASSalign", true, &["CAP->CAP", "ASR->ASR", "ALIGN", "ORDER"]),
    ("UniD", false, &["ASR->CAP"]),
    ("UniD", true, &["ASR+video->CAP"]),
    ("BiD", false, &["ASR->CAP", "CAP->ASR"]),
    ("BiD", true, &["ASR+video->CAP", "CAP->ASR"]),
    ("BiDalt", true, &["ASR+video->CAP", "CAP+video->ASR"]),
];

fn multiset<'a>(xs: impl IntoIterator<Item = &'a str>) -> BTreeMap<&'a str, usize> {
    let mut m = BTreeMap::new();
    for x in xs {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}

#[test]
fn schedules_match_the_table() {
    for &(name, multimodal, steps) in TABLE {
        let strategy: Strategy = name.parse().unwrap();
        let s = make_schedule(strategy, multimodal).unwrap();
        let got: Vec<&str> = s.steps.iter().map(|k| k.name()).collect();
        assert_eq!(multiset(got.iter().copied()), multiset(steps.iter().copied()), "{name}");
        assert_eq!(got, steps, "{name} order");
        assert_eq!(s.iterations_per_epoch, ITERATIONS_PER_EPOCH);
    }
    for s in Strategy::ALL {
        assert!(TABLE.iter().any(|r| r.0 == s.name() && r.1));
    }
}

#[test]
fn video_strategies_need_a_multimodal_model() {
    for s in [Strategy::MassVid, Strategy::MassDrop, Strategy::MassAlign, Strategy::BiDalt] {
        assert!(matches!(make_schedule(s, false), Err(Error::Config(_))), "{s}");
    }
}

#[test]
fn unknown_strategy_is_a_config_error() {
    for bad in ["MASSvideo", "mass", "", "UniDirectional"] {
        assert!(matches!(bad.parse::<Strategy>(), Err(Error::Config(_))), "{bad:?}");
    }
}

fn mass_text_batch(seed: u64) -> StepBatch {
    let texts: Vec<Vec<u32>> = vec![vec![6, 7, 8, 9, 10, 11], vec![12, 13], vec![6, 6, 9, 14, 15]];
    let refs: Vec<(&[u32], Style, Option<&FrameFeatures>)> = texts.iter().map(|t| (t.as_slice(), Style::Asr, None)).collect();
    mass_batch(StepKind::AsrToAsr, &refs, &[false; 3], 0.5, VIDEO_DIM, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn mass_loss_gradient_vanishes_outside_the_span() {
    let cfg = tiny_config(ModelSize::E2D2);
    let params = random_params::<f64>(&cfg, 1);
    let batch = mass_text_batch(4);
    let Target::Tokens { decoder, targets, loss_mask, text_visible } = &batch.target else { unreachable!() };
    assert_eq!(decoder.len, 3);
    assert_eq!(loss_mask.iter().filter(|&&m| m).count(), 3 + 1 + 3);
    let tape = Tape::<f64>::new();
    let mut g = Graph::eval(&tape, &params, &cfg);
    let enc = g.encode(&batch.encoder).unwrap();
    let values = g.decode(decoder, &enc, text_visible).unwrap().to_tensor();
    let head = Tape::<f64>::new();
    let logits = head.leaf(&values.clone().with_requires_grad(true));
    let loss = logits.masked_cross_entropy(targets, loss_mask).unwrap();
    let grads = head.backward(loss).unwrap();
    let dl = grads.wrt(logits).unwrap();
    let values = values.data();
    let v = cfg.vocab_size;
    let mut manual = 0.0;
    for (r, &m) in loss_mask.iter().enumerate() {
        let row = &dl[r * v..(r + 1) * v];
        if m {
            assert!(row.iter().any(|&x| x != 0.0));
            let z = &values[r * v..(r + 1) * v];
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + z.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            manual += lse - z[targets[r]];
        } else {
            assert!(row.iter().all(|&x| x == 0.0), "row {r}");
        }
    }
    assert!((loss.item() - manual / 7.0).abs() < 1e-12);
}

#[test]
fn ordering_labels_are_antisymmetric_and_balanced() {
    for n in 3usize..9 {
        let mut counts = [0usize; 2];
        for i in 0..n {
            for j in 0..n {
                if i.abs_diff(j) >= MIN_GAP {
                    assert_eq!(ordering_label(i, j), 1.0 - ordering_label(j, i));
                    counts[ordering_label(i, j) as usize] += 1;
                }
            }
        }
        assert_eq!(counts[0], counts[1], "n = {n}");
        if n == 5 {
            assert_eq!(counts, [6, 6]);
        }
    }
}

fn sampler_for(strategy: Strategy, data: &TrainingData, batch_size: usize, hide_fraction: f64) -> (Sampler, Vec<StepKind>) {
    let steps = make_schedule(strategy, true).unwrap().steps;
    let cfg = SamplerConfig { batch_size, mask_ratio: 0.5, hide_fraction };
    (Sampler::new(data, &steps, cfg, VIDEO_DIM).unwrap(), steps)
}

#[test]
fn binary_batches_are_half_positive() {
    let data = toy_data(3, 6, 1);
    let (mut sampler, _) = sampler_for(Strategy::MassAlign, &data, 32, 0.25);
    let (mut s, mut m) = (ChaCha8Rng::seed_from_u64(1), ChaCha8Rng::seed_from_u64(2));
    for kind in [StepKind::Align, StepKind::Order] {
        for _ in 0..3 {
            let b = sampler.sample(kind, &data, &mut s, &mut m).unwrap();
            let Target::Binary { labels, .. } = &b.target else { panic!("binary target") };
            assert_eq!(labels.len(), 32);
            assert_eq!(labels.iter().filter(|&&l| l == 1.0).count(), 16);
            assert!(b.encoder.has_video().iter().all(|&h| h));
        }
    }
}

#[test]
fn too_few_segments_for_pairs_is_a_data_error() {
    let data = toy_data(2, 2, 1);
    let steps = make_schedule(Strategy::MassAlign, true).unwrap().steps;
    let cfg = SamplerConfig { batch_size: 4, mask_ratio: 0.5, hide_fraction: 0.0 };
    assert!(matches!(Sampler::new(&data, &steps, cfg, VIDEO_DIM), Err(Error::Data(_))));
}

fn grads_of(batch: &StepBatch, cfg: &ModelConfig, seed: u64) -> Gradients<f64> {
    let params = random_params::<f64>(cfg, seed);
    compute_gradients(batch, cfg, &params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().1
}

fn is_zero(g: &Gradients<f64>, name: &str) -> bool {
    g.get(name).is_none_or(|x| x.iter().all(|&v| v == 0.0))
}

#[test]
fn align_step_leaves_the_decoder_untouched() {
    let cfg = tiny_config(ModelSize::E2vidD2);
    let data = toy_data(2, 5, 3);
    let (mut sampler, _) = sampler_for(Strategy::MassAlign, &data, 8, 0.0);
    let (mut s, mut m) = (ChaCha8Rng::seed_from_u64(1), ChaCha8Rng::seed_from_u64(2));
    for kind in [StepKind::Align, StepKind::Order] {
        let batch = sampler.sample(kind, &data, &mut s, &mut m).unwrap();
        let g = grads_of(&batch, &cfg, 5);
        for name in cfg_names(&cfg) {
            if name.starts_with("dec.") {
                assert!(is_zero(&g, &name), "{kind}: {name}");
            }
        }
        assert!(!is_zero(&g, "embed.token"));
        assert!(!is_zero(&g, "video.proj1.w"));
    }
}

fn cfg_names(cfg: &ModelConfig) -> Vec<String> {
    mmcap_core::model::param_specs(cfg).into_iter().map(|s| s.name).collect()
}

#[test]
fn hidden_text_detaches_the_text_encoder() {
    let cfg = tiny_config(ModelSize::E2vidD2);
    let data = toy_data(1, 4, 9);
    let kind = StepKind::AsrVideoToAsr { hide: true };
    let refs: Vec<(&[u32], Style, Option<&FrameFeatures>)> =
        data.segments.iter().map(|s| (s.asr.as_slice(), Style::Asr, s.frames.as_ref())).collect();
    let text_only: Vec<_> = refs.iter().map(|&(t, s, _)| (t, s, None)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    // Without video the text encoder reaches the loss only through the decoder.
    let batch = mass_batch(kind, &text_only, &[true; 4], 0.5, VIDEO_DIM, &mut rng).unwrap();
    let g = grads_of(&batch, &cfg, 1);
    for name in cfg_names(&cfg).iter().filter(|n| n.starts_with("text_enc.")) {
        assert!(is_zero(&g, name), "{name}");
    }
    assert!(!is_zero(&g, "dec.0.self.wq"));

    // With video, only tensors that act after the last co-attention read of
    // the text stream are cut off.
    let batch = mass_batch(kind, &refs, &[true; 4], 0.5, VIDEO_DIM, &mut rng).unwrap();
    let g = grads_of(&batch, &cfg, 1);
    let last = cfg.text_layers - 1;
    let detached = |n: &str| {
        n.starts_with("text_enc.final_ln")
            || n.starts_with(&format!("text_enc.{last}.cross."))
            || n.starts_with(&format!("text_enc.{last}.ff"))
    };
    for name in cfg_names(&cfg).iter().filter(|n| detached(n)) {
        assert!(is_zero(&g, name), "{name}");
    }
    assert!(!is_zero(&g, "text_enc.0.self.wq"));

    let visible = mass_batch(kind, &refs, &[false; 4], 0.5, VIDEO_DIM, &mut rng).unwrap();
    assert!(!is_zero(&grads_of(&visible, &cfg, 1), "text_enc.final_ln.g"));
}

#[test]
fn hide_fraction_is_drawn_per_example() {
    let data = toy_data(4, 8, 3);
    let (mut sampler, _) = sampler_for(Strategy::MassDrop, &data, 32, 0.25);
    let (mut s, mut m) = (ChaCha8Rng::seed_from_u64(1), ChaCha8Rng::seed_from_u64(2));
    let mut hidden = 0;
    for _ in 0..20 {
        let b = sampler.sample(StepKind::AsrVideoToAsr { hide: true }, &data, &mut s, &mut m).unwrap();
        let Target::Tokens { text_visible, .. } = &b.target else { unreachable!() };
        hidden += text_visible.iter().filter(|&&v| !v).count();
    }
    let rate = hidden as f64 / 640.0;
    assert!((rate - 0.25).abs() < 0.06, "{rate}");
}

#[test]
fn stream_mismatches_are_contract_errors() {
    let text_cfg = tiny_config(ModelSize::E2D2);
    let av_cfg = tiny_config(ModelSize::E2vidD2);
    let data = toy_data(1, 4, 2);
    let refs: Vec<(&[u32], Style, Option<&FrameFeatures>)> =
        data.segments.iter().map(|s| (s.asr.as_slice(), Style::Asr, s.frames.as_ref())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let video = mass_batch(StepKind::AsrVideoToAsr { hide: false }, &refs, &[false; 4], 0.5, VIDEO_DIM, &mut rng).unwrap();
    let p = random_params::<f32>(&text_cfg, 0);
    assert!(matches!(compute_gradients(&video, &text_cfg, &p, &mut rng), Err(Error::Contract(_))));

    let mut smuggled = video.clone();
    smuggled.kind = StepKind::AsrToAsr;
    let p = random_params::<f32>(&av_cfg, 0);
    assert!(matches!(compute_gradients(&smuggled, &av_cfg, &p, &mut rng), Err(Error::Contract(_))));

    let mut wrong_target = video.clone();
    wrong_target.kind = StepKind::Align;
    assert!(matches!(compute_gradients(&wrong_target, &av_cfg, &p, &mut rng), Err(Error::Contract(_))));

    let segs: Vec<&TrainSegment> = data.segments.iter().collect();
    assert!(matches!(caption_batch(StepKind::CapToCap, &segs, VIDEO_DIM), Err(Error::Contract(_))));
}

#[test]
fn caption_batches_wrap_targets() {
    let data = toy_data(1, 2, 5);
    let segs: Vec<&TrainSegment> = data.segments.iter().collect();
    let b = caption_batch(StepKind::AsrVideoToCap, &segs, VIDEO_DIM).unwrap();
    let Target::Tokens { decoder, targets, loss_mask, .. } = &b.target else { unreachable!() };
    for (k, s) in segs.iter().enumerate() {
        let cap = s.caption.as_ref().unwrap();
        let row = k * decoder.len;
        assert_eq!(decoder.ids[row], mmcap_core::tokenizer::BOS);
        assert_eq!(&decoder.ids[row + 1..row + 1 + cap.len()], cap.as_slice());
        let want: Vec<usize> = cap.iter().map(|&t| t as usize).chain([mmcap_core::tokenizer::EOS as usize]).collect();
        assert_eq!(&targets[row..row + cap.len() + 1], want.as_slice());
        assert_eq!(loss_mask[row..row + decoder.len].iter().filter(|&&m| m).count(), cap.len() + 1);
    }
}

fn small_trainer(strategy: Strategy, data: &TrainingData, seed: u64) -> Trainer {
    let mut cfg = tiny_config(ModelSize::E2vidD2);
    cfg.dropout = 0.1;
    let mut train = TrainConfig::new(strategy);
    train.iterations_per_epoch = 3;
    train.batch_size = 6;
    train.seed = seed;
    train.lr = LrConfig { lr_max: 1e-3, warmup: 5, ..LrConfig::default() };
    let params = mmcap_core::model::init_params(&cfg, &mut rng_stream(seed, Stream::Init, 0)).unwrap();
    Trainer::new(train, cfg, params, data).unwrap()
}

#[test]
fn seeded_epochs_are_bit_reproducible() {
    let data = toy_data(3, 5, 8);
    for strategy in [Strategy::MassAlign, Strategy::MassDrop, Strategy::BiDalt] {
        let mut a = small_trainer(strategy, &data, 17);
        let mut b = small_trainer(strategy, &data, 17);
        let mut rows = Vec::new();
        let sa = a.run_epoch(&data, |r| rows.push(r.clone())).unwrap();
        let sb = b.run_epoch(&data, |_| {}).unwrap();
        assert_eq!(sa.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>(), sb.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
        assert_eq!(rows.len(), 3 * a.schedule.steps.len());
        assert_eq!(rows[1].kind, a.schedule.steps[1 % a.schedule.steps.len()]);
        let mut c = small_trainer(strategy, &data, 18);
        let sc = c.run_epoch(&data, |_| {}).unwrap();
        assert_ne!(sa.losses, sc.losses);
    }
}

#[test]
fn resume_continues_bit_identically() {
    let data = toy_data(3, 5, 4);
    let mut straight = small_trainer(Strategy::MassAlign, &data, 3);
    straight.run_epoch(&data, |_| {}).unwrap();
    straight.run_epoch(&data, |_| {}).unwrap();

    let mut first = small_trainer(Strategy::MassAlign, &data, 3);
    first.run_epoch(&data, |_| {}).unwrap();
    let bytes = first.checkpoint().to_bytes();
    drop(first);
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::resume(straight.train.clone(), ckpt, &data).unwrap();
    assert_eq!(resumed.epoch, 1);
    resumed.run_epoch(&data, |_| {}).unwrap();
    assert_eq!(resumed.checkpoint().to_bytes(), straight.checkpoint().to_bytes());

    let mut other = straight.train.clone();
    other.strategy = Strategy::Mass;
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    assert!(matches!(Trainer::resume(other, ckpt, &data), Err(Error::Config(_))));
}

#[test]
fn train_log_has_one_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    for epoch in 1..=2 {
        let mut log = TrainLog::open(&path).unwrap();
        log.write(&LogRow { epoch, iteration: 1, kind: StepKind::CapToCap, loss: 1.5, lr: 1e-4, wall_ms: 3 }).unwrap();
        log.flush().unwrap();
    }
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, vec![TrainLog::HEADER, "1,1,CAP->CAP,1.5,0.0001,3", "2,1,CAP->CAP,1.5,0.0001,3"]);
}

#[test]
fn train_config_validation() {
    let mut c = TrainConfig::new(Strategy::Mass);
    assert!(c.validate().is_ok());
    c.mask_ratio = 0.0;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = TrainConfig::new(Strategy::Mass);
    c.hide_fraction = 1.5;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let json = r#"{"strategy":"MASSdrop","seed":3,"bogus":1}"#;
    assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    let c: TrainConfig = serde_json::from_str(r#"{"strategy":"MASSdrop","seed":3}"#).unwrap();
    assert_eq!((c.strategy, c.hide_fraction, c.batch_size), (Strategy::MassDrop, HIDE_FRACTION, 32));
}

proptest! {
    #[test]
    fn mass_spans_follow_the_rule(len in 2usize..60, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (start, span) = sample_mass_span(len, MASK_RATIO, &mut rng).unwrap();
        prop_assert_eq!(span, ((len as f64 * 0.5).round() as usize).clamp(1, len));
        prop_assert!(start + span <= len);
        let ids: Vec<u32> = (0..len as u32).map(|i| 6 + i).collect();
        let ex = build_mass_example(&ids, (start, span));
        prop_assert_eq!(ex.targets.as_slice(), &ids[start..start + span]);
        prop_assert_eq!(ex.encoder.iter().filter(|&&t| t == mmcap_core::tokenizer::MASK).count(), span);
    }

    #[test]
    fn mass_batches_mask_only_the_span(seed in any::<u64>()) {
        let b = mass_text_batch(seed);
        let Target::Tokens { decoder, loss_mask, .. } = &b.target else { unreachable!() };
        prop_assert_eq!(&decoder.mask, loss_mask);
    }
}
