use super::*;
use sttatts_core::train::{Batch, Example, Trainer};
use sttatts_core::TaskId;
use tempfile::tempdir;

fn small() -> ModelConfig {
    ModelConfig { d_model: 8, d_ffn: 16, enc_layers: 1, dec_layers: 1, heads: 2, d_task: 4, d_spk: 4, conv_channels: 4, dec_prenet_units: 8, postnet_channels: 8, ..ModelConfig::toy() }
}

fn trained() -> Checkpoint {
    let mut model = Model::new(small(), 3).unwrap();
    model.set_mel_stats(vec![-3.0; 80], vec![2.0; 80]).unwrap();
    let schedule = TrainSchedule::single(&[TaskId::Asr, TaskId::Tts], 5, 2);
    let mut tr = Trainer::new(schedule.clone(), &model, 1).unwrap();
    let wave: Vec<f64> = (0..4000).map(|i| (i as f64 * 0.05).sin() * 0.3).collect();
    let mel = Tensor::from_vec(3, 80, (0..240).map(|i| (i as f64 * 0.1).cos() - 4.0).collect()).unwrap();
    let asr = Example { wave: Some(wave), text: Some(vec![5, 6]), mel: None, spk: None };
    let tts = Example { wave: None, text: Some(vec![5, 6]), mel: Some(mel), spk: Some(vec![0.5; 4]) };
    tr.train_step(&mut model, &[Batch { task: TaskId::Asr, examples: vec![&asr] }, Batch { task: TaskId::Tts, examples: vec![&tts] }]).unwrap();
    Checkpoint {
        model,
        vocab: Vocab::english(),
        mel: MelConfig::default(),
        precision: Precision::F64,
        training: Some(TrainingState { schedule, optimizer: tr.opt.clone(), step: tr.state.clone() }),
    }
}

#[test]
fn f64_roundtrip_is_exact() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("c.stt");
    let ck = trained();
    save(&p, &ck).unwrap();
    let back = load(&p).unwrap();
    assert_eq!(param_hash(&back.model), param_hash(&ck.model));
    assert_eq!(back.model.mel_stats(), ck.model.mel_stats());
    assert_eq!(back.model.config(), ck.model.config());
    assert_eq!(back.vocab, ck.vocab);
    assert_eq!(back.training, ck.training);
    assert!(!dir.path().join("c.stt.tmp").exists());
}

#[test]
fn f32_roundtrip_is_close() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("c.stt");
    let ck = Checkpoint { precision: Precision::F32, training: None, ..trained() };
    save(&p, &ck).unwrap();
    let back = load(&p).unwrap();
    assert!(back.training.is_none());
    assert_eq!(back.model.mel_stats(), ck.model.mel_stats());
    for ((_, a), (_, b)) in back.model.params.iter().zip(ck.model.params.iter()) {
        assert!(a.value.max_abs_diff(&b.value) <= 1e-6 * (1.0 + b.value.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))));
    }
}

#[test]
fn corrupted_files_are_refused() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("c.stt");
    save(&p, &trained()).unwrap();
    let good = std::fs::read(&p).unwrap();

    let mut flipped = good.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 1;
    std::fs::write(&p, &flipped).unwrap();
    assert!(matches!(load(&p), Err(Error::Checkpoint { .. })));

    std::fs::write(&p, &good[..good.len() - 8]).unwrap();
    assert!(matches!(load(&p), Err(Error::Checkpoint { .. })));

    let mut magic = good.clone();
    magic[0] = b'X';
    std::fs::write(&p, &magic).unwrap();
    assert!(matches!(load(&p), Err(Error::Checkpoint { .. })));

    assert!(matches!(load(&dir.path().join("none.stt")), Err(Error::MissingFile(_))));
}
