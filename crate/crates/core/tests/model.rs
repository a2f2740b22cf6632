mod common;

use common::*;
use mmcap_core::corpus::{make_batch, Batch};
use mmcap_core::model::{
    init_from, is_video_param, Checkpoint, ClsTask, DecoderInput, Graph, ModelConfig, ModelSize,
};
use mmcap_core::tokenizer::Style;
use mmcap_core::Error;
use mmcap_tensor::{AdamConfig, OptimizerState, ParamStore, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn encode_text(params: &ParamStore<f32>, config: &ModelConfig, batch: &Batch) -> Vec<f32> {
    let tape = Tape::new();
    let mut g = Graph::eval(&tape, params, config);
    g.encode(batch).unwrap().text.unwrap().value()
}

fn logits(params: &ParamStore<f32>, config: &ModelConfig, batch: &Batch, dec: &DecoderInput, visible: &[bool]) -> Vec<f32> {
    let tape = Tape::new();
    let mut g = Graph::eval(&tape, params, config);
    let enc = g.encode(batch).unwrap();
    g.decode(dec, &enc, visible).unwrap().value()
}

#[test]
fn zero_embeddings_give_zero_output() {
    let config = tiny_config(ModelSize::E2D2);
    let mut params: ParamStore<f64> = random_params(&config, 1);
    for name in ["embed.token", "embed.text_pos", "embed.style"] {
        params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let tape = Tape::new();
    let mut g = Graph::eval(&tape, &params, &config);
    let x = g.embed_text(&[6, 7, 8], &[0, 1, 2], &[Style::Asr], 3).unwrap();
    assert!(x.value().iter().all(|&v| v == 0.0));
}

#[test]
fn style_adds_a_constant_vector() {
    let config = tiny_config(ModelSize::E2D2);
    let params: ParamStore<f64> = random_params(&config, 2);
    let tape = Tape::new();
    let mut g = Graph::eval(&tape, &params, &config);
    let a = g.embed_text(&[6, 7, 8], &[0, 1, 2], &[Style::Asr], 3).unwrap().value();
    let c = g.embed_text(&[6, 7, 8], &[0, 1, 2], &[Style::Cap], 3).unwrap().value();
    let style = params.get("embed.style").unwrap().data();
    for (i, (x, y)) in a.iter().zip(&c).enumerate() {
        let k = i % 8;
        assert!((y - x - (style[8 + k] - style[k])).abs() < 1e-12);
    }
    let swapped = g.embed_text(&[8, 7, 6], &[0, 1, 2], &[Style::Asr], 3).unwrap().value();
    let tok = params.get("embed.token").unwrap().data();
    let pos = params.get("embed.text_pos").unwrap().data();
    for k in 0..8 {
        let expect = tok[8 * 8 + k] + pos[k] + style[k];
        assert!((swapped[k] - expect).abs() < 1e-12);
    }
}

#[test]
fn overlong_text_is_a_contract_error() {
    let config = tiny_config(ModelSize::E2D2);
    let params: ParamStore<f64> = random_params(&config, 3);
    let tape = Tape::new();
    let mut g = Graph::eval(&tape, &params, &config);
    let ids = vec![6u32; 17];
    let pos: Vec<usize> = (0..17).collect();
    assert!(matches!(g.embed_text(&ids, &pos, &[Style::Asr], 17), Err(Error::Contract(_))));
}

#[test]
fn video_projection_contract() {
    let config = tiny_config(ModelSize::E2vidD2);
    let params: ParamStore<f64> = random_params(&config, 4);
    let tape = Tape::new();
    let mut g = Graph::eval(&tape, &params, &config);
    assert_eq!(g.project_video(&[], 1, 0).unwrap().shape(), vec![0, 8]);
    let frame = frames(1, 9);
    let two: Vec<f32> = frame.data().iter().chain(frame.data()).copied().collect();
    let v = g.project_video(&two, 1, 2).unwrap();
    assert_eq!(v.shape(), vec![2, 8]);
    let out = v.value();
    let pos = params.get("embed.video_pos").unwrap().data();
    for k in 0..8 {
        let (d_out, d_pos) = (out[8 + k] - out[k], pos[8 + k] - pos[k]);
        assert!((d_out - d_pos).abs() < 1e-12);
    }
    assert!(matches!(g.project_video(&[0.0; 4], 1, 1), Err(Error::Tensor(_))));
}

#[test]
fn encode_needs_a_stream() {
    let config = tiny_config(ModelSize::E2vidD2);
    let params: ParamStore<f64> = random_params(&config, 5);
    let mut batch = make_batch(&[input(&[6], 0, 0)], VIDEO_DIM);
    batch.text_len = 0;
    batch.text_ids.clear();
    batch.text_mask.clear();
    let tape = Tape::new();
    let mut g = Graph::eval(&tape, &params, &config);
    assert!(matches!(g.encode(&batch), Err(Error::Contract(_))));
}

#[test]
fn text_only_input_matches_text_only_model() {
    let full = tiny_config(ModelSize::E2vidD2);
    let text_only = tiny_config(ModelSize::E2D2);
    let params: ParamStore<f32> = random_params(&full, 6);
    let mut subset = ParamStore::new();
    for (n, t) in params.iter().filter(|(n, _)| !is_video_param(n)) {
        subset.insert(n, t.clone());
    }
    let batch = make_batch(&[input(&[6, 7, 8], 0, 0), input(&[9, 10], 0, 0)], VIDEO_DIM);
    let a = encode_text(&params, &full, &batch);
    let b = encode_text(&subset, &text_only, &batch);
    assert_eq!(a, b);
    let tape = Tape::new();
    let mut g = Graph::eval(&tape, &params, &full);
    assert!(g.encode(&batch).unwrap().video.is_none());
}

#[test]
fn padding_leaves_real_states_unchanged() {
    let config = tiny_config(ModelSize::E2vidD2);
    let params: ParamStore<f32> = random_params(&config, 7);
    let alone = make_batch(&[input(&[6, 7], 2, 3)], VIDEO_DIM);
    let padded = make_batch(&[input(&[6, 7], 2, 3), input(&[8, 9, 10, 11, 12], 5, 4)], VIDEO_DIM);
    let a = encode_text(&params, &config, &alone);
    let b = encode_text(&params, &config, &padded);
    let real = rows(&b, 8, |r| r < 3);
    assert!(max_abs_diff(&a, &real) < 1e-5);

    let (dec1, _, _) = caption_rows(&[&[6, 7]]);
    let (dec2, _, _) = caption_rows(&[&[6, 7], &[8, 9, 10, 11]]);
    let l1 = logits(&params, &config, &alone, &dec1, &[true]);
    let l2 = logits(&params, &config, &padded, &dec2, &[true, true]);
    let real = rows(&l2, VOCAB, |r| r < dec1.len);
    assert!(max_abs_diff(&l1, &real) < 1e-5);
}

#[test]
fn video_perturbation_reaches_text_states() {
    let config = tiny_config(ModelSize::E2vidD2);
    let params: ParamStore<f32> = random_params(&config, 8);
    let mut batch = make_batch(&[input(&[6, 7, 8], 3, 5)], VIDEO_DIM);
    let a = encode_text(&params, &config, &batch);
    batch.frames[2] += 0.5;
    let b = encode_text(&params, &config, &batch);
    assert!(max_abs_diff(&a, &b) > 1e-6);
}

#[test]
fn decoder_is_causal() {
    let config = tiny_config(ModelSize::E2vidD2);
    let params: ParamStore<f32> = random_params(&config, 9);
    let batch = mixed_batch();
    let (dec, _, _) = caption_rows(&[&[6, 7, 8, 9], &[10, 11, 12, 13]]);
    let base = logits(&params, &config, &batch, &dec, &[true, true]);
    for j in 1..dec.len {
        let mut changed = dec.clone();
        changed.ids[j] = 14;
        changed.ids[dec.len + j] = 15;
        let out = logits(&params, &config, &batch, &changed, &[true, true]);
        for b in 0..2 {
            for i in 0..j {
                let r = (b * dec.len + i) * VOCAB;
                assert_eq!(&base[r..r + VOCAB], &out[r..r + VOCAB], "position {i} saw {j}");
            }
        }
        let r = j * VOCAB;
        assert_ne!(&base[r..r + VOCAB], &out[r..r + VOCAB]);
    }
}

#[test]
fn hidden_text_states_do_not_reach_logits() {
    let config = tiny_config(ModelSize::E2vidD2);
    let params: ParamStore<f32> = random_params(&config, 10);
    let batch = mixed_batch();
    let (dec, _, _) = caption_rows(&[&[6, 7], &[8]]);
    let run = |perturb: f32, visible: &[bool]| {
        let tape = Tape::new();
        let mut g = Graph::eval(&tape, &params, &config);
        let mut states = g.encode(&batch).unwrap().detach();
        for x in states.text.as_mut().unwrap() {
            *x += perturb;
        }
        let enc = states.attach(&tape).unwrap();
        g.decode(&dec, &enc, visible).unwrap().value()
    };
    assert_eq!(run(0.0, &[false, false]), run(3.0, &[false, false]));
    assert_ne!(run(0.0, &[true, true]), run(3.0, &[true, true]));
}

#[test]
fn cls_heads() {
    let config = tiny_config(ModelSize::E2vidD2);
    let mut params: ParamStore<f64> = random_params(&config, 11);
    let batch = mixed_batch();
    {
        let tape = Tape::new();
        let mut g = Graph::eval(&tape, &params, &config);
        let enc = g.encode(&batch).unwrap();
        let p = g.cls_predict(ClsTask::Ordering, &enc).unwrap().value();
        assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
    }
    params.get_mut("cls.align.w2").unwrap().data_mut().fill(0.0);
    params.get_mut("cls.align.b2").unwrap().data_mut().fill(0.0);
    let tape = Tape::new();
    let mut g = Graph::eval(&tape, &params, &config);
    let enc = g.encode(&batch).unwrap();
    assert_eq!(g.cls_predict(ClsTask::Alignment, &enc).unwrap().value(), vec![0.5, 0.5]);

    let mut no_cls = batch.clone();
    no_cls.text_ids[0] = 6;
    let enc = g.encode(&no_cls).unwrap();
    assert!(matches!(g.cls_predict(ClsTask::Alignment, &enc), Err(Error::Contract(_))));
}

#[test]
fn alignment_head_does_not_touch_the_decoder() {
    let config = tiny_config(ModelSize::E2vidD2);
    let params: ParamStore<f64> = random_params(&config, 12);
    let tape = Tape::new();
    let mut g = Graph::eval(&tape, &params, &config);
    let enc = g.encode(&mixed_batch()).unwrap();
    let loss = g.cls_logits(ClsTask::Alignment, &enc).unwrap().bce_with_logits(&[1.0, 0.0]).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.names().all(|n| !n.starts_with("dec.") && !n.starts_with("cls.order")));
    assert!(grads.get("cls.align.w1").is_some());
}

fn checkpoint(seed: u64) -> Checkpoint {
    let config = tiny_config(ModelSize::E2vidD2);
    let params: ParamStore<f32> = random_params(&config, seed);
    let mut ckpt = Checkpoint::new(config, params);
    ckpt.meta.insert("epoch".into(), "3".into());
    let mut opt = OptimizerState::new(AdamConfig::default());
    opt.step = 17;
    for (name, t) in ckpt.params.iter() {
        let n = t.numel();
        opt.moments.insert(
            name.to_string(),
            mmcap_tensor::Moments {
                m: vec![0.25; n],
                v: vec![1.0 / 3.0; n],
            },
        );
    }
    ckpt.optimizer = Some(opt);
    ckpt
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(13);
    let a = dir.path().join("a.ckpt");
    ckpt.save(&a).unwrap();
    let back = Checkpoint::load(&a).unwrap();
    assert_eq!(back, ckpt);
    let b = dir.path().join("b.ckpt");
    back.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn tampered_magic_is_rejected() {
    let mut bytes = checkpoint(14).to_bytes();
    bytes[2] ^= 0xff;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    let bytes = checkpoint(14).to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn mismatched_config_names_the_tensor() {
    let ckpt = checkpoint(15);
    let mut other = ckpt.config.clone();
    other.ff_dim = 12;
    let err = ckpt.params_for(&other).unwrap_err().to_string();
    assert!(err.contains("ff.w1"), "{err}");
}

#[test]
fn multimodal_init_from_text_only_checkpoint() {
    let text_cfg = tiny_config(ModelSize::E2D2);
    let text_params: ParamStore<f32> = random_params(&text_cfg, 16);
    let full_cfg = tiny_config(ModelSize::E2vidD2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (params, loaded) = init_from(&full_cfg, &text_params, &mut rng).unwrap();
    assert_eq!(loaded.len(), text_params.len());
    assert_eq!(params.get("text_enc.0.self.wq").unwrap().data(), text_params.get("text_enc.0.self.wq").unwrap().data());
    assert!(params.get("video.proj1.w").unwrap().data().iter().any(|&x| x != 0.0));
    assert!(params.contains("dec.1.video_attn.wq"));

    let mut bigger = tiny_config(ModelSize::E2vidD2);
    bigger.vocab_size = VOCAB + 1;
    let err = init_from(&bigger, &text_params, &mut rng).unwrap_err().to_string();
    assert!(err.contains("embed.token"), "{err}");
}

/// Directional central differences, one random direction per tensor. The
/// floor on the denominator sits above f64 round-off in the loss difference.
#[test]
fn full_model_gradient_check() {
    let config = tiny_config(ModelSize::E2vidD2);
    let params: ParamStore<f64> = random_params(&config, 17);
    let batch = make_batch(&[input(&[6, 7, 8, 9], 4, 1), input(&[10, 11], 2, 2)], VIDEO_DIM);
    let (dec, targets, mask) = caption_rows(&[&[6, 7, 8], &[9]]);
    let loss_of = |p: &ParamStore<f64>| -> (f64, mmcap_tensor::Gradients<f64>) {
        let tape = Tape::new();
        let mut g = Graph::eval(&tape, p, &config);
        let enc = g.encode(&batch).unwrap();
        let ce = g.decode(&dec, &enc, &[true, false]).unwrap().masked_cross_entropy(&targets, &mask).unwrap();
        let bce = g.cls_logits(ClsTask::Alignment, &enc).unwrap().bce_with_logits(&[1.0, 0.0]).unwrap();
        let order = g.cls_logits(ClsTask::Ordering, &enc).unwrap().bce_with_logits(&[0.0, 1.0]).unwrap();
        let loss = ce.add(&bce).unwrap().add(&order).unwrap();
        let value = loss.item();
        (value, tape.backward(loss).unwrap())
    };
    let (_, grads) = loss_of(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let h = 1e-6;
    let mut checked = 0;
    for (name, t) in params.iter() {
        let dir: Vec<f64> = (0..t.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let analytic: f64 = grads.get(name).map_or(0.0, |g| g.iter().zip(&dir).map(|(a, b)| a * b).sum());
        let shifted = |sign: f64| {
            let mut p = params.clone();
            for (x, d) in p.get_mut(name).unwrap().data_mut().iter_mut().zip(&dir) {
                *x += sign * h * d;
            }
            loss_of(&p).0
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs()).max(1e-4);
        let rel = (analytic - numeric).abs() / scale;
        assert!(rel < 1e-4, "{name}: analytic {analytic} numeric {numeric}");
        checked += 1;
    }
    assert_eq!(checked, params.len());
}
