//! Manifests, token-budget batching, speaker embeddings, the synthetic tone
//! corpus and conversion of manifests into training examples.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sttatts_core::textproc::Vocab;
use sttatts_core::train::{permutation, Example};
use sttatts_core::{TaskId, Tensor};

use crate::audio::{self, LoadOptions, MelConfig, MelFilterbank, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const MANIFEST_COLUMNS: [&str; 6] = ["utt_id", "audio_path", "transcript", "speaker_id", "spk_emb_path", "duration_s"];

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub utt_id: String,
    /// Relative paths are resolved against the manifest's directory.
    pub audio_path: PathBuf,
    pub transcript: String,
    pub speaker_id: String,
    pub spk_emb_path: Option<PathBuf>,
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    /// Parses and validates a manifest, including that referenced files exist.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, path, root)?;
        m.check_files()?;
        Ok(m)
    }

    pub fn parse(text: &str, path: &Path, root: PathBuf) -> Result<Self> {
        let err = |line: usize, detail: String| Error::Parse { path: path.to_path_buf(), line, detail };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let Some((_, header)) = lines.next() else {
            return Err(err(1, "empty manifest".into()));
        };
        if header.split('\t').collect::<Vec<_>>() != MANIFEST_COLUMNS {
            return Err(err(1, format!("header must be {}", MANIFEST_COLUMNS.join("\\t"))));
        }
        let mut rows = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, line) in lines {
            let n = i + 1;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != MANIFEST_COLUMNS.len() {
                return Err(err(n, format!("expected {} columns, found {}", MANIFEST_COLUMNS.len(), f.len())));
            }
            let duration_s: f64 = f[5].parse().map_err(|_| err(n, format!("bad duration {:?}", f[5])))?;
            if !(duration_s > 0.0 && duration_s.is_finite()) {
                return Err(err(n, "duration must be positive".into()));
            }
            if f[0].is_empty() || f[1].is_empty() {
                return Err(err(n, "utt_id and audio_path are required".into()));
            }
            if !seen.insert(f[0].to_string()) {
                return Err(Error::DuplicateId(f[0].to_string()));
            }
            rows.push(ManifestRow {
                utt_id: f[0].into(),
                audio_path: f[1].into(),
                transcript: f[2].into(),
                speaker_id: f[3].into(),
                spk_emb_path: (!f[4].is_empty()).then(|| f[4].into()),
                duration_s,
            });
        }
        Ok(Self { root, rows })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn check_files(&self) -> Result<()> {
        for r in &self.rows {
            for p in std::iter::once(&r.audio_path).chain(&r.spk_emb_path) {
                let full = self.resolve(p);
                if !full.exists() {
                    return Err(Error::MissingFile(full));
                }
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = MANIFEST_COLUMNS.join("\t");
        out.push('\n');
        for r in &self.rows {
            let emb = r.spk_emb_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\t{}\n", r.utt_id, r.audio_path.display(), r.transcript, r.speaker_id, emb, r.duration_s));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(Error::io(path))
    }
}

/// Groups items into batches whose summed length stays within
/// `max_tokens`. Items are sorted by length (ties broken by a seeded
/// shuffle) so batches hold similar lengths; batch order is shuffled.
pub fn make_batches(lengths: &[usize], max_tokens: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if let Some((index, &len)) = lengths.iter().enumerate().find(|(_, &l)| l > max_tokens) {
        return Err(Error::ItemTooLong { index, len, max_tokens });
    }
    let mut order = permutation(lengths.len(), seed);
    order.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for i in order {
        if used + lengths[i] > max_tokens && !current.is_empty() {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        used += lengths[i];
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    let shuffle = permutation(batches.len(), seed ^ 0x5EED);
    Ok(shuffle.into_iter().map(|i| std::mem::take(&mut batches[i])).collect())
}

/// Fraction of padded positions when every batch is padded to its longest item.
pub fn padding_waste(lengths: &[usize], batches: &[Vec<usize>]) -> f64 {
    let (mut padded, mut real) = (0usize, 0usize);
    for b in batches {
        let max = b.iter().map(|&i| lengths[i]).max().unwrap_or(0);
        padded += max * b.len();
        real += b.iter().map(|&i| lengths[i]).sum::<usize>();
    }
    if padded == 0 {
        0.0
    } else {
        1.0 - real as f64 / padded as f64
    }
}

/// Reads a little-endian f32 vector and scales it to unit norm.
pub fn read_emb(path: &Path) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(Error::io(path))?;
    if bytes.is_empty() || bytes.len() % 4 != 0 {
        return Err(Error::UnsupportedFormat { path: path.to_path_buf(), detail: "embedding must be a non-empty list of f32".into() });
    }
    let v: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::UnsupportedFormat { path: path.to_path_buf(), detail: "embedding has zero or non-finite norm".into() });
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

pub fn write_emb(path: &Path, v: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(Error::io(path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_utts: usize,
    pub n_speakers: usize,
    /// Printable vocabulary written to `vocab.txt`.
    pub vocab: String,
    /// Symbols drawn for transcripts; a space renders as silence.
    pub symbols: String,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    pub char_duration_s: f64,
    pub amplitude: f64,
    pub n_harmonics: usize,
    pub d_spk: usize,
    /// Fundamental per symbol; a geometric ladder from 250 Hz to 1500 Hz
    /// when empty.
    pub tone_map: BTreeMap<char, f64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_utts: 8,
            n_speakers: 2,
            vocab: " abcdefghijk".into(),
            symbols: " abcdefghijk".into(),
            min_len: 3,
            max_len: 6,
            seed: 0,
            char_duration_s: 0.1,
            amplitude: 0.5,
            n_harmonics: 3,
            d_spk: 32,
            tone_map: BTreeMap::new(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n_utts == 0 || self.n_speakers == 0 || self.n_speakers > self.d_spk {
            return fail("need n_utts > 0 and 0 < n_speakers <= d_spk");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail("need 0 < min_len <= max_len");
        }
        if !(self.char_duration_s > 0.0) || !(self.amplitude > 0.0 && self.amplitude <= 1.0) || self.n_harmonics == 0 {
            return fail("need positive duration, amplitude in (0, 1] and at least one harmonic");
        }
        let vocab: BTreeSet<char> = self.vocab.chars().collect();
        if self.symbols.chars().any(|c| !vocab.contains(&c)) || !self.symbols.chars().any(|c| c != ' ') {
            return fail("symbols must be drawn from vocab and include a non-space symbol");
        }
        let tones = self.tones();
        let mut freqs: Vec<u64> = tones.values().map(|f| f.to_bits()).collect();
        freqs.sort_unstable();
        freqs.dedup();
        if freqs.len() != tones.len() {
            return fail("tone_map must be injective");
        }
        if self.symbols.chars().any(|c| c != ' ' && !tones.contains_key(&c)) {
            return fail("every non-space symbol needs a tone");
        }
        if tones.values().any(|&f| !(f > 0.0) || f * self.n_harmonics as f64 >= SAMPLE_RATE as f64 / 2.0) {
            return fail("tones and their harmonics must lie below Nyquist");
        }
        Ok(())
    }

    pub fn tones(&self) -> BTreeMap<char, f64> {
        if !self.tone_map.is_empty() {
            return self.tone_map.clone();
        }
        let mut chars: Vec<char> = self.symbols.chars().filter(|&c| c != ' ').collect();
        chars.sort_unstable();
        chars.dedup();
        let n = chars.len();
        chars
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                (c, 250.0 * 6f64.powf(frac))
            })
            .collect()
    }

    /// Relative amplitude of harmonic `h` (1-based) for `speaker`.
    pub fn harmonic_weight(&self, speaker: usize, h: usize) -> f64 {
        let decay = if self.n_speakers > 1 { 0.3 + 2.2 * speaker as f64 / (self.n_speakers - 1) as f64 } else { 0.3 };
        (-decay * (h - 1) as f64).exp()
    }

    pub fn render(&self, text: &str, speaker: usize) -> Vec<f64> {
        let tones = self.tones();
        let n = (self.char_duration_s * SAMPLE_RATE as f64).round() as usize;
        let fade = (0.01 * SAMPLE_RATE as f64) as usize;
        let weights: Vec<f64> = (1..=self.n_harmonics).map(|h| self.harmonic_weight(speaker, h)).collect();
        let total: f64 = weights.iter().sum();
        let mut out = Vec::with_capacity(n * text.chars().count());
        for c in text.chars() {
            let Some(&f) = tones.get(&c) else {
                out.extend(std::iter::repeat_n(0.0, n));
                continue;
            };
            for i in 0..n {
                let t = i as f64 / SAMPLE_RATE as f64;
                let s: f64 = weights.iter().enumerate().map(|(h, w)| w * (2.0 * PI * (h + 1) as f64 * f * t).sin()).sum();
                let edge = i.min(n - 1 - i);
                let env = if edge < fade { 0.5 - 0.5 * (PI * edge as f64 / fade as f64).cos() } else { 1.0 };
                out.push(self.amplitude * env * s / total);
            }
        }
        out
    }
}

fn random_text(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> String {
    let symbols: Vec<char> = spec.symbols.chars().collect();
    let letters: Vec<char> = symbols.iter().copied().filter(|&c| c != ' ').collect();
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let mut out = String::new();
    let mut prev = ' ';
    for i in 0..len {
        let mut c = symbols[rng.random_range(0..symbols.len())];
        if c == ' ' && (i == 0 || i + 1 == len || prev == ' ') {
            c = letters[rng.random_range(0..letters.len())];
        }
        out.push(c);
        prev = c;
    }
    out
}

fn orthonormal_embeddings(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Writes a tone corpus under `out_dir`: `wav/`, `spk/`, `vocab.txt`,
/// `spec.json` and `manifest.tsv`. Utterance `i` speaks text `i / n_speakers`
/// with speaker `i % n_speakers`, so every text is voiced by several speakers.
pub fn gen_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let vocab_chars: Vec<char> = spec.vocab.chars().collect();
    let vocab = Vocab::new(&vocab_chars)?;
    for d in ["wav", "spk"] {
        let dir = out_dir.join(d);
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_texts = spec.n_utts.div_ceil(spec.n_speakers);
    let texts: Vec<String> = (0..n_texts).map(|_| random_text(spec, &mut rng)).collect();
    let embs = orthonormal_embeddings(spec.n_speakers, spec.d_spk, &mut rng);
    for (s, e) in embs.iter().enumerate() {
        write_emb(&out_dir.join(format!("spk/spk{s:02}.emb")), e)?;
    }
    let mut rows = Vec::new();
    for i in 0..spec.n_utts {
        let (text, speaker) = (&texts[i / spec.n_speakers], i % spec.n_speakers);
        let wave = Waveform::new(spec.render(text, speaker));
        let rel = PathBuf::from(format!("wav/utt{i:04}.wav"));
        audio::save_wav(&out_dir.join(&rel), &wave)?;
        rows.push(ManifestRow {
            utt_id: format!("utt{i:04}"),
            audio_path: rel,
            transcript: text.clone(),
            speaker_id: format!("spk{speaker:02}"),
            spk_emb_path: Some(format!("spk/spk{speaker:02}.emb").into()),
            duration_s: wave.duration_s(),
        });
    }
    let vocab_path = out_dir.join("vocab.txt");
    fs::write(&vocab_path, vocab.to_file_string()).map_err(Error::io(&vocab_path))?;
    let spec_path = out_dir.join("spec.json");
    fs::write(&spec_path, serde_json::to_string_pretty(spec).expect("spec serializes")).map_err(Error::io(&spec_path))?;
    let manifest = Manifest { root: out_dir.to_path_buf(), rows };
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// A manifest row with its audio, features, token ids and speaker vector.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub row: ManifestRow,
    pub wave: Vec<f64>,
    pub mel: Tensor,
    pub ids: Vec<usize>,
    pub spk: Option<Vec<f64>>,
}

pub fn load_utterances(manifest: &Manifest, vocab: &Vocab, mel_cfg: &MelConfig, opts: LoadOptions) -> Result<Vec<Utterance>> {
    manifest
        .rows
        .iter()
        .map(|row| {
            let wave = audio::load_wav(&manifest.resolve(&row.audio_path), opts)?.samples;
            let mel = audio::logmel(&wave, mel_cfg)?;
            let ids = vocab.tokenize(&row.transcript)?.ids;
            let spk = row.spk_emb_path.as_ref().map(|p| read_emb(&manifest.resolve(p))).transpose()?;
            Ok(Utterance { row: row.clone(), wave, mel, ids, spk })
        })
        .collect()
}

/// Ordered `(source, target)` index pairs with equal transcripts and
/// different speakers.
pub fn vc_pairs(utts: &[Utterance]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, a) in utts.iter().enumerate() {
        for (j, b) in utts.iter().enumerate() {
            if i != j && a.row.transcript == b.row.transcript && a.row.speaker_id != b.row.speaker_id && b.spk.is_some() {
                out.push((i, j));
            }
        }
    }
    out
}

/// Training examples of `task` built from `utts`.
pub fn examples_for(task: TaskId, utts: &[Utterance]) -> Result<Vec<Example>> {
    let need_spk = |u: &Utterance| u.spk.clone().ok_or_else(|| Error::Config(format!("{} has no speaker embedding", u.row.utt_id)));
    match task {
        TaskId::Asr => Ok(utts.iter().map(|u| Example { wave: Some(u.wave.clone()), text: Some(u.ids.clone()), mel: None, spk: None }).collect()),
        TaskId::Tts => utts.iter().map(|u| Ok(Example { wave: None, text: Some(u.ids.clone()), mel: Some(u.mel.clone()), spk: Some(need_spk(u)?) })).collect(),
        TaskId::Vc => vc_pairs(utts)
            .into_iter()
            .map(|(s, t)| Ok(Example { wave: Some(utts[s].wave.clone()), text: None, mel: Some(utts[t].mel.clone()), spk: Some(need_spk(&utts[t])?) }))
            .collect(),
    }
}

/// Per-bin mean and standard deviation over all frames, with the deviation
/// floored at `1e-3`.
pub fn mel_stats<'a>(mels: impl IntoIterator<Item = &'a Tensor>, n_mels: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut sum = vec![0.0; n_mels];
    let mut sq = vec![0.0; n_mels];
    let mut n = 0usize;
    for m in mels {
        if m.cols() != n_mels {
            return Err(sttatts_core::Error::ShapeMismatch { context: "mel stats", expected: (m.rows(), n_mels), found: m.shape() }.into());
        }
        for r in 0..m.rows() {
            for (c, &v) in m.row(r).iter().enumerate() {
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        n += m.rows();
    }
    if n == 0 {
        return Err(Error::Config("no mel frames to compute statistics from".into()));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = sq.iter().zip(&mean).map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-3)).collect();
    Ok((mean, std))
}

/// Mean absolute error over the target's frames. A shorter prediction is
/// padded by repeating its last frame; extra predicted frames are ignored.
pub fn masked_l1(pred: &Tensor, target: &Tensor) -> f64 {
    if target.rows() == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for r in 0..target.rows() {
        let p = if pred.rows() == 0 { None } else { Some(pred.row(r.min(pred.rows() - 1))) };
        for (c, &t) in target.row(r).iter().enumerate() {
            total += (p.map_or(0.0, |p| p[c]) - t).abs();
        }
    }
    total / target.len() as f64
}

/// Text-independent timbre descriptor of the tone corpus: the level of the
/// second and third harmonic relative to the fundamental, averaged over
/// voiced frames, mapped to a speaker vector by soft nearest-template
/// matching.
#[derive(Clone, Debug)]
pub struct SpeakerProbe {
    centers: Vec<f64>,
    templates: Vec<([f64; 2], Vec<f64>)>,
    width: f64,
}

impl SpeakerProbe {
    /// Fits one template per speaker from utterances that carry embeddings.
    pub fn fit(utts: &[Utterance], mel_cfg: &MelConfig) -> Result<Self> {
        let centers = MelFilterbank::new(mel_cfg).centers_hz;
        let mut probe = Self { centers, templates: Vec::new(), width: 0.25 };
        let mut by_speaker: BTreeMap<&str, (Vec<[f64; 2]>, Vec<f64>)> = BTreeMap::new();
        for u in utts {
            let (Some(spk), Some(f)) = (&u.spk, probe.features(&u.mel)) else { continue };
            by_speaker.entry(&u.row.speaker_id).or_insert_with(|| (Vec::new(), spk.clone())).0.push(f);
        }
        if by_speaker.is_empty() {
            return Err(Error::Config("speaker probe needs voiced utterances with embeddings".into()));
        }
        probe.templates = by_speaker
            .into_values()
            .map(|(fs, spk)| {
                let n = fs.len() as f64;
                ([fs.iter().map(|f| f[0]).sum::<f64>() / n, fs.iter().map(|f| f[1]).sum::<f64>() / n], spk)
            })
            .collect();
        Ok(probe)
    }

    pub fn features(&self, mel: &Tensor) -> Option<[f64; 2]> {
        let loudest = mel.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut acc = [0.0; 2];
        let mut n = 0;
        for r in 0..mel.rows() {
            let row = mel.row(r);
            let Some((b1, &v1)) = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) else { continue };
            if v1 < loudest - 2.0 {
                continue;
            }
            // Overlapping triangles sum to one, so band totals track tone levels.
            let f1 = self.centers[b1];
            let band = |h: f64| {
                let sum: f64 = row.iter().zip(&self.centers).filter(|(_, &c)| (c - h * f1).abs() <= 0.4 * f1).map(|(v, _)| v.exp()).sum();
                sum.ln()
            };
            let (e1, e2, e3) = (band(1.0), band(2.0), band(3.0));
            if !(e1.is_finite() && e2.is_finite() && e3.is_finite()) {
                continue;
            }
            acc[0] += e2 - e1;
            acc[1] += e3 - e1;
            n += 1;
        }
        (n > 0).then(|| [acc[0] / n as f64, acc[1] / n as f64])
    }

    /// Unit-norm mixture of the template embeddings weighted by proximity.
    pub fn embed(&self, mel: &Tensor) -> Option<Vec<f64>> {
        let f = self.features(mel)?;
        let d2: Vec<f64> = self.templates.iter().map(|(t, _)| (t[0] - f[0]).powi(2) + (t[1] - f[1]).powi(2)).collect();
        let best = d2.iter().copied().fold(f64::INFINITY, f64::min);
        let dim = self.templates[0].1.len();
        let mut out = vec![0.0; dim];
        for ((_, e), d) in self.templates.iter().zip(&d2) {
            let w = (-(d - best) / (2.0 * self.width * self.width)).exp();
            out.iter_mut().zip(e).for_each(|(o, x)| *o += w * x);
        }
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        Some(out.into_iter().map(|x| x / norm).collect())
    }
}
