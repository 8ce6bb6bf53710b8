use super::*;
use crate::textproc::{BOS_ID, EOS_ID};

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_ffn: 16,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        d_task: 4,
        d_spk: 6,
        conv_channels: 4,
        dec_prenet_units: 8,
        postnet_channels: 8,
        dropout: 0.0,
        ..ModelConfig::toy()
    }
}

fn all_tasks() -> ModelConfig {
    tiny().with_tasks(&TaskId::ALL)
}

fn wave(n: usize, seed: u64) -> Vec<f64> {
    (0..n).map(|i| math::sin(0.01 * (i as f64) * (seed as f64 + 1.0))).collect()
}

fn spk(d: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[k % d] = 1.0;
    v
}

fn frames(l: usize, n: usize, seed: u64) -> Tensor {
    let data = (0..l * n).map(|i| math::sin(i as f64 * 0.37 + seed as f64) * 3.0 - 5.0).collect();
    Tensor::from_vec(l, n, data).unwrap()
}

#[test]
fn analytic_count_matches_registry() {
    let shapes = [
        tiny(),
        all_tasks(),
        tiny().with_tasks(&[TaskId::Asr]),
        tiny().with_tasks(&[TaskId::Tts]),
        tiny().with_tasks(&[TaskId::Vc]),
        ModelConfig { decoder_topology: DecoderTopology::YDecoder, ..all_tasks() },
        ModelConfig { fusion_position: FusionPosition::PreEncoder, reduction_factor: 3, ..tiny() },
        ModelConfig::toy(),
    ];
    for cfg in shapes {
        let m = Model::new(cfg.clone(), 1).unwrap();
        let counts = count_params(&cfg);
        assert_eq!(counts.by_group, m.params.numel_by_group(), "{cfg:?}");
        assert_eq!(counts.total(), m.params.numel());
    }
}

#[test]
fn base_counts_match_reported_sizes() {
    let shared = count_params(&ModelConfig::base()).total() as f64;
    let y = count_params(&ModelConfig::base_y_decoder()).total() as f64;
    assert!((shared / 155e6 - 1.0).abs() <= 0.05, "shared {shared}");
    assert!((y / 211e6 - 1.0).abs() <= 0.05, "y-decoder {y}");
}

#[test]
fn sharing_beats_separate_models_at_every_width() {
    for d in [8, 64, 256, 768] {
        let base = ModelConfig { d_model: d, d_ffn: 4 * d, heads: d / 8, ..ModelConfig::base() };
        let shared = count_params(&base).total();
        let y = count_params(&ModelConfig { decoder_topology: DecoderTopology::YDecoder, ..base.clone() }).total();
        let asr = count_params(&base.clone().with_tasks(&[TaskId::Asr])).total();
        let tts = count_params(&base.clone().with_tasks(&[TaskId::Tts])).total();
        assert!(shared < y && y < asr + tts, "d={d}: {shared} {y} {asr} {tts}");
    }
}

#[test]
fn fusion_count_closed_form() {
    let c = ModelConfig::base().with_tasks(&TaskId::ALL);
    assert_eq!(count_params(&c).get(ParamGroup::TaskFusion), 896 * 768 + 768 + 3 * 128);
    assert_eq!(count_params(&ModelConfig::base_y_decoder()).get(ParamGroup::TaskFusion), 0);
}

#[test]
fn speech_prenet_frames_and_silence() {
    let m = Model::new(tiny(), 3).unwrap();
    let mut g = Graph::new(&m.params);
    let x = m.speech_encoder_prenet(&mut g, &[0.0; 16000]).unwrap();
    assert_eq!(g.shape(x), (99, 8));
    assert!(g.value(x).is_finite());
    assert!(matches!(m.speech_encoder_prenet(&mut g, &[0.1; 100]), Err(Error::TooShort { .. })));
    assert!(matches!(m.speech_encoder_prenet(&mut g, &[]), Err(Error::EmptyAudio)));
}

#[test]
fn tied_embedding_drives_text_logits() {
    let mut m = Model::new(tiny(), 4).unwrap();
    let states = frames(3, 8, 1);
    let logits = |m: &Model| {
        let mut g = Graph::new(&m.params);
        let s = g.constant(states.clone());
        let v = m.text_postnet(&mut g, s);
        g.value(v).clone()
    };
    let a = logits(&m);
    let k = 7;
    let e = m.embedding_id().unwrap();
    m.params.get_mut(e).row_mut(k)[0] += 1.0;
    let b = logits(&m);
    for r in 0..3 {
        for c in 0..m.config().vocab_size {
            let changed = a.get(r, c) != b.get(r, c);
            assert_eq!(changed, c == k, "row {r} col {c}");
        }
    }
    let mut g = Graph::new(&m.params);
    let x = m.text_encoder_prenet(&mut g, &[5, 9, 5]).unwrap();
    let x = g.value(x);
    assert_eq!(x.row(0), x.row(2));
    assert!(matches!(m.text_encoder_prenet(&mut g, &[16]), Err(Error::InvalidId { id: 16, size: 16 })));
}

#[test]
fn zero_states_give_uniform_text_distribution() {
    let m = Model::new(tiny(), 5).unwrap();
    let mut g = Graph::new(&m.params);
    let s = g.constant(Tensor::zeros(2, 8));
    let logits = m.text_postnet(&mut g, s);
    let p = g.softmax(logits, None);
    for v in g.value(p).data() {
        assert!((v - 1.0 / 16.0).abs() < 1e-12);
    }
}

#[test]
fn task_fusion_identity_and_conditioning() {
    let mut m = Model::new(all_tasks(), 6).unwrap();
    let x0 = frames(4, 8, 2);
    let run = |m: &Model, task| {
        let mut g = Graph::new(&m.params);
        let x = g.constant(x0.clone());
        let y = m.task_fuse(&mut g, x, task).unwrap();
        g.value(y).clone()
    };
    assert_ne!(run(&m, TaskId::Asr), run(&m, TaskId::Tts));
    let w = m.params.find("task_fusion.proj.weight").unwrap();
    let b = m.params.find("task_fusion.proj.bias").unwrap();
    let mut eye = Tensor::zeros(12, 8);
    for i in 0..8 {
        eye.set(i, i, 1.0);
    }
    *m.params.get_mut(w) = eye;
    *m.params.get_mut(b) = Tensor::zeros(1, 8);
    assert_eq!(run(&m, TaskId::Vc), x0);

    let asr_only = Model::new(tiny().with_tasks(&[TaskId::Asr]), 6).unwrap();
    let mut g = Graph::new(&asr_only.params);
    let x = g.constant(x0.clone());
    assert!(matches!(asr_only.task_fuse(&mut g, x, TaskId::Tts), Err(Error::UnknownTask(TaskId::Tts))));
}

#[test]
fn padded_tail_is_invisible_to_valid_frames() {
    let m = Model::new(tiny(), 7).unwrap();
    let valid = [true, true, true, false, false];
    let run = |tail: f64| {
        let mut g = Graph::new(&m.params);
        let mut t = frames(5, 8, 3);
        for r in 3..5 {
            t.row_mut(r).iter_mut().for_each(|v| *v = tail * (r as f64));
        }
        let x = g.constant(t);
        let out = m.encode_latents(&mut g, x, Some(&valid), TaskId::Asr).unwrap();
        g.value(out.states).slice_rows(0, 3)
    };
    assert_eq!(run(1.0), run(-7.5));
}

#[test]
fn eval_forward_is_deterministic() {
    let run = || {
        let m = Model::new(ModelConfig { dropout: 0.0, ..all_tasks() }, 8).unwrap();
        let mut g = Graph::new(&m.params);
        let enc = m.encode(&mut g, Source::Wave(&wave(3000, 1)), TaskId::Vc).unwrap();
        let out = m.speech_decode(&mut g, &enc, &frames(4, 80, 1), &spk(6, 0), TaskId::Vc, false).unwrap();
        g.value(out.after).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn decoders_are_causal() {
    let m = Model::new(tiny(), 9).unwrap();
    let mut g = Graph::new(&m.params);
    let enc = m.encode(&mut g, Source::Text(&[5, 6, 7, EOS_ID]), TaskId::Tts).unwrap();
    let f = frames(5, 80, 4);
    let mut f2 = f.clone();
    f2.row_mut(4).iter_mut().for_each(|v| *v += 2.0);
    let a = m.speech_decode(&mut g, &enc, &f, &spk(6, 1), TaskId::Tts, false).unwrap();
    let b = m.speech_decode(&mut g, &enc, &f2, &spk(6, 1), TaskId::Tts, false).unwrap();
    assert_eq!(g.value(a.before).slice_rows(0, 4), g.value(b.before).slice_rows(0, 4));
    assert_eq!(g.value(a.stop_logits).slice_rows(0, 4), g.value(b.stop_logits).slice_rows(0, 4));
    assert_ne!(g.value(a.before).slice_rows(4, 1), g.value(b.before).slice_rows(4, 1));

    let enc = m.encode(&mut g, Source::Wave(&wave(2000, 2)), TaskId::Asr).unwrap();
    let a = m.text_logits(&mut g, &enc, &[BOS_ID, 5, 6], TaskId::Asr).unwrap();
    let b = m.text_logits(&mut g, &enc, &[BOS_ID, 5, 9], TaskId::Asr).unwrap();
    assert_eq!(g.value(a).slice_rows(0, 2), g.value(b).slice_rows(0, 2));
    let one = m.text_logits(&mut g, &enc, &[BOS_ID], TaskId::Asr).unwrap();
    assert_eq!(g.shape(one), (1, 16));
}

#[test]
fn y_decoder_routes_by_output_modality() {
    let cfg = ModelConfig { decoder_topology: DecoderTopology::YDecoder, ..all_tasks() };
    let m = Model::new(cfg, 10).unwrap();
    assert_eq!(m.decoder_stacks(), 2);
    assert_eq!(Model::new(all_tasks(), 10).unwrap().decoder_stacks(), 1);
    assert!(m.task_table_id().is_none());
    let asr = m.params_used_by(TaskId::Asr).unwrap();
    let tts = m.params_used_by(TaskId::Tts).unwrap();
    let text_dec = m.params.find("text_decoder.ln_out.gain").unwrap();
    let speech_dec = m.params.find("speech_decoder.ln_out.gain").unwrap();
    assert!(asr.contains(&text_dec) && !asr.contains(&speech_dec));
    assert!(tts.contains(&speech_dec) && !tts.contains(&text_dec));
}

#[test]
fn speech_prenet_zero_path_and_speaker_sensitivity() {
    let mut m = Model::new(tiny(), 11).unwrap();
    let run = |m: &Model, s: &[f64]| {
        let mut g = Graph::new(&m.params);
        let x = m.speech_decoder_prenet(&mut g, &Tensor::zeros(3, 80), s).unwrap();
        g.value(x).clone()
    };
    let a = run(&m, &spk(6, 0));
    let b = run(&m, &spk(6, 3));
    assert_eq!(a.shape(), (3, 8));
    for r in 0..3 {
        assert_ne!(a.row(r), b.row(r));
    }
    let ids: Vec<_> = m.params.iter().filter(|(_, p)| p.name.ends_with(".bias") && p.group == ParamGroup::SpeechDecoderPrenet).map(|(id, _)| id).collect();
    for id in ids {
        m.params.get_mut(id).scale_in_place(0.0);
    }
    assert!(run(&m, &[0.0; 6]).data().iter().all(|&v| v == 0.0));
}

#[test]
fn postnet_residual_and_shapes() {
    let cfg = ModelConfig { reduction_factor: 2, ..tiny() };
    let mut m = Model::new(cfg, 12).unwrap();
    let mut g = Graph::new(&m.params);
    let s = g.leaf(frames(3, 8, 5));
    let (before, after, stop) = m.speech_postnet(&mut g, s);
    assert_eq!(g.shape(before), (6, 80));
    assert_eq!(g.shape(stop), (6, 1));
    let loss = g.sum(after);
    let grads = g.backward(loss);
    let conv0 = m.params.find("speech_postnet.conv.0.weight").unwrap();
    assert!(grads.params.get(conv0).unwrap().sum_sq() > 0.0);
    drop(g);

    for id in m.params_in(&[ParamGroup::SpeechDecoderPostnet]) {
        if m.params.param(id).name.starts_with("speech_postnet.conv") {
            m.params.get_mut(id).scale_in_place(0.0);
        }
    }
    let mut g = Graph::new(&m.params);
    let s = g.constant(frames(3, 8, 5));
    let (before, after, _) = m.speech_postnet(&mut g, s);
    assert_eq!(g.value(before), g.value(after));
}

#[test]
fn ctc_rows_are_log_normalized() {
    let mut m = Model::new(tiny(), 13).unwrap();
    let mut g = Graph::new(&m.params);
    let enc = m.encode(&mut g, Source::Wave(&wave(4000, 3)), TaskId::Asr).unwrap();
    let lp = m.ctc_log_probs(&mut g, &enc).unwrap();
    for r in 0..g.shape(lp).0 {
        assert!(math::log_sum_exp(g.value(lp).row(r)).abs() < 1e-9);
    }
    drop(g);
    for id in m.params_in(&[ParamGroup::CtcHead]) {
        m.params.get_mut(id).scale_in_place(0.0);
    }
    let mut g = Graph::new(&m.params);
    let x = g.constant(Tensor::zeros(2, 8));
    let lp = m.ctc_log_probs(&mut g, &EncoderOutput { states: x, ctc_input: x }).unwrap();
    assert!(g.value(lp).data().iter().all(|v| (v + math::ln(16.0)).abs() < 1e-12));
}

#[test]
fn cross_attention_rows_sum_to_one() {
    let m = Model::new(tiny(), 14).unwrap();
    let mut g = Graph::new(&m.params);
    let enc = m.encode(&mut g, Source::Text(&[4, 5, 6, EOS_ID]), TaskId::Tts).unwrap();
    let out = m.speech_decode(&mut g, &enc, &frames(3, 80, 0), &spk(6, 2), TaskId::Tts, true).unwrap();
    assert_eq!(out.attention.len(), 1);
    assert_eq!(out.attention[0].len(), 2);
    for &a in &out.attention[0] {
        assert_eq!(g.shape(a), (3, 4));
        for r in 0..3 {
            assert!((g.value(a).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

/// Both tasks receive gradient in the very same encoder and decoder tensors.
#[test]
fn asr_and_tts_share_backbone_tensors() {
    let m = Model::new(tiny(), 15).unwrap();
    let touched = |task| {
        let mut g = Graph::new(&m.params);
        let loss = if task == TaskId::Asr {
            let enc = m.encode(&mut g, Source::Wave(&wave(3000, 4)), task).unwrap();
            let l = m.text_logits(&mut g, &enc, &[BOS_ID, 5], task).unwrap();
            g.sum(l)
        } else {
            let enc = m.encode(&mut g, Source::Text(&[5, EOS_ID]), task).unwrap();
            let out = m.speech_decode(&mut g, &enc, &frames(2, 80, 1), &spk(6, 0), task, false).unwrap();
            g.sum(out.after)
        };
        let grads = g.backward(loss);
        let ids: Vec<ParamId> = grads.params.iter().map(|(id, _)| id).collect();
        ids
    };
    let (asr, tts) = (touched(TaskId::Asr), touched(TaskId::Tts));
    for id in m.params_in(&[ParamGroup::Encoder, ParamGroup::Decoder]) {
        assert!(asr.contains(&id) && tts.contains(&id), "{}", m.params.param(id).name);
    }
}

#[test]
fn adding_a_task_grows_only_the_task_table() {
    let m = Model::new(tiny(), 16).unwrap();
    let grown = m.with_tasks(&TaskId::ALL, 99).unwrap();
    assert_eq!(m.params.len(), grown.params.len());
    let mut grew = Vec::new();
    for (id, p) in m.params.iter() {
        let q = grown.params.param(id);
        assert_eq!(p.name, q.name);
        if p.value != q.value {
            grew.push(p.name.clone());
            assert_eq!(q.value.slice_rows(0, 2), p.value);
        }
    }
    assert_eq!(grew, ["task_fusion.table"]);
    assert_eq!(grown.params.numel() - m.params.numel(), 4);
}

#[test]
fn teacher_inputs_shift_by_reduction_factor() {
    let m = Model::new(ModelConfig { reduction_factor: 2, ..tiny() }, 17).unwrap();
    let t = frames(5, 80, 9);
    let inp = m.teacher_inputs(&t);
    assert_eq!(inp.rows(), 3);
    assert!(inp.row(0).iter().all(|&v| v == 0.0));
    assert_eq!(inp.row(1), t.row(1));
    assert_eq!(inp.row(2), t.row(3));
}
