use super::*;
use proptest::prelude::*;
use tempfile::tempdir;

fn sine(f: f64, n: usize, amp: f64) -> Vec<f64> {
    (0..n).map(|i| amp * (2.0 * PI * f * i as f64 / SAMPLE_RATE as f64).sin()).collect()
}

/// Naive DFT magnitude of one Hann-windowed, zero-padded frame.
fn dft_mag(frame: &[f64], n_fft: usize, k: usize) -> f64 {
    let w = frame.len();
    let (mut re, mut im) = (0.0, 0.0);
    for (n, x) in frame.iter().enumerate() {
        let win = 0.5 - 0.5 * (2.0 * PI * n as f64 / w as f64).cos();
        let a = -2.0 * PI * (k * n) as f64 / n_fft as f64;
        re += x * win * a.cos();
        im += x * win * a.sin();
    }
    (re * re + im * im).sqrt()
}

#[test]
fn pcm16_roundtrip_of_full_scale_square() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("sq.wav");
    let samples: Vec<f64> = (0..200).map(|i| if (i / 10) % 2 == 0 { 32767.0 / 32768.0 } else { -1.0 }).collect();
    save_wav(&p, &Waveform::new(samples.clone())).unwrap();
    let back = load_wav(&p, LoadOptions::default()).unwrap();
    assert_eq!(back.samples, samples);
    let silence = dir.path().join("z.wav");
    save_wav(&silence, &Waveform::new(vec![0.0; 50])).unwrap();
    assert!(load_wav(&silence, LoadOptions::default()).unwrap().samples.iter().all(|&s| s == 0.0));
}

#[test]
fn rejects_stereo_and_foreign_rates() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("st.wav");
    let spec = hound::WavSpec { channels: 2, sample_rate: SAMPLE_RATE, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(&p, spec).unwrap();
    for v in [1000i16, 3000, -1000, -3000] {
        w.write_sample(v).unwrap();
    }
    w.finalize().unwrap();
    assert!(matches!(load_wav(&p, LoadOptions::default()), Err(Error::UnsupportedFormat { .. })));
    let mixed = load_wav(&p, LoadOptions { downmix: true, ..LoadOptions::default() }).unwrap();
    assert_eq!(mixed.samples, vec![2000.0 / 32768.0, -2000.0 / 32768.0]);

    let q = dir.path().join("8k.wav");
    let spec = hound::WavSpec { channels: 1, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(&q, spec).unwrap();
    for i in 0..100 {
        w.write_sample(i as i16).unwrap();
    }
    w.finalize().unwrap();
    assert!(matches!(load_wav(&q, LoadOptions::default()), Err(Error::SampleRateMismatch { found: 8000, .. })));
    let up = load_wav(&q, LoadOptions { resample: true, ..LoadOptions::default() }).unwrap();
    assert_eq!(up.samples.len(), 200);
    assert!((up.samples[3] - 1.5 / 32768.0).abs() < 1e-12);
    assert!(matches!(load_wav(&dir.path().join("nope.wav"), LoadOptions::default()), Err(Error::MissingFile(_))));
}

#[test]
fn frame_count_and_shape() {
    let cfg = MelConfig::default();
    assert_eq!(cfg.frame_count(16_000), Some(98));
    assert_eq!(cfg.frame_count(399), None);
    let mel = logmel(&sine(440.0, 16_000, 0.5), &cfg).unwrap();
    assert_eq!(mel.shape(), (98, 80));
    assert!(matches!(logmel(&[], &cfg), Err(Error::Core(sttatts_core::Error::EmptyAudio))));
    assert!(matches!(logmel(&[0.0; 100], &cfg), Err(Error::Core(sttatts_core::Error::TooShort { .. }))));
}

#[test]
fn stft_matches_naive_dft() {
    let cfg = MelConfig::default();
    let x = sine(700.0, 1200, 0.3);
    let spectra = Stft::new(&cfg).analyze(&x);
    assert_eq!(spectra.len(), cfg.frame_count(x.len()).unwrap());
    for (t, frame) in spectra.iter().enumerate().step_by(2) {
        for k in [0, 13, 44, 45, 46, 200, 512] {
            let want = dft_mag(&x[t * cfg.hop..t * cfg.hop + cfg.win], cfg.n_fft, k);
            assert!((frame[k].norm() - want).abs() < 1e-9, "t {t} k {k}");
        }
    }
}

#[test]
fn tone_peaks_at_its_filter() {
    let cfg = MelConfig::default();
    let bank = MelFilterbank::new(&cfg);
    let mel = logmel(&sine(440.0, 16_000, 0.5), &cfg).unwrap();
    let row = mel.row(40);
    let argmax = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    let nearest = (0..80).min_by(|&a, &b| (bank.centers_hz[a] - 440.0).abs().total_cmp(&(bank.centers_hz[b] - 440.0).abs())).unwrap();
    assert!(argmax.abs_diff(nearest) <= 1, "{argmax} vs {nearest}");
}

#[test]
fn silence_sits_at_the_floor() {
    let cfg = MelConfig::default();
    let mel = logmel(&[0.0; 4000], &cfg).unwrap();
    assert!(mel.data().iter().all(|&v| v == cfg.log_floor.ln()));
}

#[test]
fn filterbank_triangles_peak_at_one() {
    let cfg = MelConfig::default();
    let bank = MelFilterbank::new(&cfg);
    assert_eq!(bank.weights.shape(), (80, 513));
    for m in 0..80 {
        let row = bank.weights.row(m);
        assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
        assert!(row.iter().cloned().fold(0.0, f64::max) > 0.3);
    }
    assert!(bank.centers_hz.windows(2).all(|w| w[0] < w[1]));
    assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
}

#[test]
fn griffin_lim_shapes_and_silence() {
    let cfg = MelConfig::default();
    let mel = logmel(&sine(500.0, 4000, 0.5), &cfg).unwrap();
    let expected = (mel.rows() - 1) * cfg.hop + cfg.win;
    assert_eq!(griffin_lim(&mel, &cfg, 0, 1).unwrap().len(), expected);
    let quiet = Tensor::filled(10, 80, cfg.log_floor.ln());
    let y = griffin_lim(&quiet, &cfg, 5, 2).unwrap();
    let rms = (y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64).sqrt();
    assert!(rms < 1e-3, "{rms}");
    assert!(griffin_lim(&Tensor::filled(3, 80, f64::NAN), &cfg, 1, 0).is_err());
}

#[test]
fn griffin_lim_keeps_the_tone() {
    let cfg = MelConfig::default();
    let mel = logmel(&sine(600.0, 8000, 0.5), &cfg).unwrap();
    let y = griffin_lim(&mel, &cfg, 30, 3).unwrap();
    let again = logmel(&y, &cfg).unwrap();
    let row = again.row(again.rows() / 2);
    let peak = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    let orig = mel.row(mel.rows() / 2);
    let want = (0..80).max_by(|&a, &b| orig[a].total_cmp(&orig[b])).unwrap();
    assert!(peak.abs_diff(want) <= 1);
}

#[test]
fn mel_cache_roundtrip() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("a.mel");
    let t = Tensor::from_vec(3, 2, vec![0.5, -1.25, 3.0, 4.0, -5.5, 6.0]).unwrap();
    write_mel(&p, &t).unwrap();
    assert_eq!(read_mel(&p).unwrap(), t);
    std::fs::write(&p, b"MEL0\x01\x00\x00\x00").unwrap();
    assert!(read_mel(&p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Delaying the signal by whole hops shifts the frames.
    #[test]
    fn shift_covariance(hops in 1usize..4, f in 200.0f64..3000.0) {
        let cfg = MelConfig::default();
        let x = sine(f, 2400, 0.4);
        let mut delayed = vec![0.0; hops * cfg.hop];
        delayed.extend_from_slice(&x);
        let a = logmel(&x, &cfg).unwrap();
        let b = logmel(&delayed, &cfg).unwrap();
        for t in 0..a.rows() {
            for (u, v) in a.row(t).iter().zip(b.row(t + hops)) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }

    /// Louder input never lowers any log-mel value.
    #[test]
    fn monotone_in_gain(gain in 1.0f64..4.0, f in 200.0f64..3000.0) {
        let cfg = MelConfig::default();
        let x = sine(f, 1600, 0.2);
        let y: Vec<f64> = x.iter().map(|v| v * gain).collect();
        let (a, b) = (logmel(&x, &cfg).unwrap(), logmel(&y, &cfg).unwrap());
        prop_assert!(a.data().iter().zip(b.data()).all(|(u, v)| *v >= *u - 1e-12));
    }
}
