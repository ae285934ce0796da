//! Deterministic synthetic speech with exact phoneme, duration and pitch truth.
//!
//! Every phoneme is rendered as a voiced tone at the current pitch plus three
//! formant sinusoids shifted by the speaker's offsets, under an ADSR envelope.
//! Dysarthric variants are re-rendered from the same truth with articulatory
//! substitutions, per-phoneme stretching, flattened pitch and additive noise.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::dsp::{self, HOP, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::nn::gaussian;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeInventory {
    symbols: Vec<String>,
    blank_index: usize,
}

const DEFAULT_SYMBOLS: [&str; 12] = ["a", "e", "i", "o", "u", "m", "n", "l", "r", "w", "y", "h"];

/// Formant centres (Hz) for each default phoneme.
const FORMANTS: [[f64; 3]; 12] = [
    [750.0, 1250.0, 2600.0],
    [520.0, 1850.0, 2650.0],
    [300.0, 2300.0, 3050.0],
    [560.0, 950.0, 2450.0],
    [330.0, 780.0, 2250.0],
    [260.0, 1150.0, 2150.0],
    [280.0, 1600.0, 2750.0],
    [400.0, 1050.0, 3250.0],
    [460.0, 1350.0, 1750.0],
    [380.0, 620.0, 3450.0],
    [270.0, 2050.0, 2900.0],
    [680.0, 1550.0, 3550.0],
];
const BASE_DURATION: [usize; 12] = [10, 9, 8, 10, 9, 7, 6, 7, 8, 6, 7, 5];
const PITCH_FACTOR: [f64; 12] = [1.0, 1.04, 1.08, 0.96, 0.93, 0.98, 1.02, 1.0, 0.97, 0.94, 1.06, 1.05];
const FORMANT_AMPS: [f64; 3] = [0.30, 0.22, 0.14];
const F0_AMP: f64 = 0.18;
const F0_H2_AMP: f64 = 0.09;
const OUTPUT_GAIN: f64 = 0.7;

/// Fraction of the way a substituted phoneme's formants move toward its
/// confusion partner.
pub const SUBSTITUTION_BLEND: f64 = 0.75;

impl Default for PhonemeInventory {
    fn default() -> Self {
        Self {
            symbols: DEFAULT_SYMBOLS.iter().map(|s| s.to_string()).collect(),
            blank_index: DEFAULT_SYMBOLS.len(),
        }
    }
}

impl PhonemeInventory {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < 2 {
            return Err(Error::InvalidArgument(
                "inventory needs at least two phonemes".into(),
            ));
        }
        let unique: BTreeSet<_> = symbols.iter().collect();
        if unique.len() != symbols.len() {
            return Err(Error::InvalidArgument("duplicate phoneme symbol".into()));
        }
        let blank_index = symbols.len();
        Ok(Self {
            symbols,
            blank_index,
        })
    }

    /// Number of phonemes, excluding blank.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Number of posteriorgram columns (phonemes + blank).
    pub fn classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn blank_index(&self) -> usize {
        self.blank_index
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, idx: usize) -> &str {
        &self.symbols[idx]
    }

    pub fn index_of(&self, sym: &str) -> Result<usize> {
        self.symbols
            .iter()
            .position(|s| s == sym)
            .ok_or_else(|| Error::UnknownPhoneme(sym.to_string()))
    }

    pub fn parse(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|s| self.index_of(s)).collect()
    }

    pub fn render(&self, seq: &[usize]) -> String {
        seq.iter()
            .map(|&i| self.symbol(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn acoustics(&self, idx: usize) -> ([f64; 3], usize, f64) {
        let k = idx % FORMANTS.len();
        // Inventories larger than the table reuse rows with a shift so every
        // symbol stays distinct.
        let shift = (idx / FORMANTS.len()) as f64 * 90.0;
        let f = FORMANTS[k];
        (
            [f[0] + shift, f[1] + shift, f[2] + shift],
            BASE_DURATION[k],
            PITCH_FACTOR[k],
        )
    }

    /// Phoneme a dysarthric speaker drifts toward when substituting `idx`.
    pub fn confusion_partner(&self, idx: usize) -> usize {
        (idx + 5) % self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub base_f0: f64,
    pub formant_offsets: Vec<f64>,
    pub timbre_seed: u64,
}

impl SpeakerProfile {
    /// Speaker `index` of `count`, with pitch spread across the range and
    /// offsets drawn from `seed`.
    pub fn generate(index: usize, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5eed_0000 + index as u64));
        let span = if count > 1 {
            index as f64 / (count - 1) as f64
        } else {
            0.5
        };
        let base_f0 = 100.0 + 130.0 * span + rng.random_range(-6.0..6.0);
        let formant_offsets = vec![
            rng.random_range(-40.0..40.0),
            rng.random_range(-100.0..100.0),
            rng.random_range(-150.0..150.0),
        ];
        Self {
            speaker_id: format!("spk{index}"),
            base_f0,
            formant_offsets,
            timbre_seed: rng.random(),
        }
    }

    /// Per-phoneme formant amplitude weights and speaking rate, a pure
    /// function of `timbre_seed`.
    fn signature(&self, phonemes: usize) -> (Vec<[f64; 3]>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.timbre_seed);
        let weights = (0..phonemes)
            .map(|_| {
                [
                    rng.random_range(0.7..1.3),
                    rng.random_range(0.7..1.3),
                    rng.random_range(0.7..1.3),
                ]
            })
            .collect();
        (weights, rng.random_range(0.9..1.1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub waveform: Vec<f64>,
    pub phonemes: Vec<usize>,
    /// Frames per phoneme.
    pub durations: Vec<usize>,
    /// Per-frame pitch in Hz (0 = unvoiced).
    pub pitch: Vec<f64>,
    pub speaker: SpeakerProfile,
    pub severity: f64,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }
}

struct RenderPlan<'a> {
    inventory: &'a PhonemeInventory,
    speaker: &'a SpeakerProfile,
    phonemes: &'a [usize],
    durations: &'a [usize],
    pitch: &'a [f64],
    /// Blend factor toward the confusion partner per phoneme (0 = clean).
    blend: &'a [f64],
}

fn render(plan: &RenderPlan, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (weights, _) = plan.speaker.signature(plan.inventory.len());
    let total: usize = plan.durations.iter().sum();
    let mut out = Vec::with_capacity(total * HOP);
    let sr = SAMPLE_RATE as f64;
    let mut f0_phase = rng.random_range(0.0..2.0 * PI);
    let mut frame = 0;
    for (j, (&ph, &dur)) in plan.phonemes.iter().zip(plan.durations).enumerate() {
        let (own, _, _) = plan.inventory.acoustics(ph);
        let (partner, _, _) = plan
            .inventory
            .acoustics(plan.inventory.confusion_partner(ph));
        let b = plan.blend[j];
        let phases: [f64; 3] = [
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
        ];
        let freqs: Vec<f64> = (0..3)
            .map(|k| (1.0 - b) * own[k] + b * partner[k] + plan.speaker.formant_offsets[k])
            .collect();
        let n = dur * HOP;
        let attack = (0.15 * n as f64).max(1.0);
        let decay_end = 0.3 * n as f64;
        let release = (0.15 * n as f64).max(1.0);
        for i in 0..n {
            let x = i as f64;
            let env = if x < attack {
                x / attack
            } else if x < decay_end {
                1.0 - 0.2 * (x - attack) / (decay_end - attack).max(1.0)
            } else if x < n as f64 - release {
                0.8
            } else {
                0.8 * (n as f64 - x) / release
            };
            let f0 = plan.pitch[frame + i / HOP];
            let mut s = 0.0;
            if f0 > 0.0 {
                f0_phase += 2.0 * PI * f0 / sr;
                s += F0_AMP * f0_phase.sin() + F0_H2_AMP * (2.0 * f0_phase).sin();
            }
            for k in 0..3 {
                let w = weights[ph % weights.len()][k];
                s += FORMANT_AMPS[k] * w * (2.0 * PI * freqs[k] * x / sr + phases[k]).sin();
            }
            out.push(OUTPUT_GAIN * env * s);
        }
        frame += dur;
    }
    out
}

/// Renders a normal (severity 0) utterance.
pub fn generate_utterance(
    inventory: &PhonemeInventory,
    phonemes: &[&str],
    speaker: &SpeakerProfile,
    seed: u64,
) -> Result<Utterance> {
    if phonemes.is_empty() {
        return Err(Error::InvalidArgument("empty phoneme sequence".into()));
    }
    let idx: Vec<usize> = phonemes
        .iter()
        .map(|p| inventory.index_of(p))
        .collect::<Result<_>>()?;
    generate_indexed(inventory, &idx, speaker, seed, format!("utt{seed}"))
}

pub fn generate_indexed(
    inventory: &PhonemeInventory,
    phonemes: &[usize],
    speaker: &SpeakerProfile,
    seed: u64,
    id: String,
) -> Result<Utterance> {
    if phonemes.is_empty() {
        return Err(Error::InvalidArgument("empty phoneme sequence".into()));
    }
    if let Some(&bad) = phonemes.iter().find(|&&p| p >= inventory.len()) {
        return Err(Error::UnknownPhoneme(format!("#{bad}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, rate) = speaker.signature(inventory.len());
    let offset = rng.random_range(-0.03..0.03);
    let mut durations = Vec::with_capacity(phonemes.len());
    let mut pitch = Vec::new();
    for &p in phonemes {
        let (_, base, pf) = inventory.acoustics(p);
        let jitter = rng.random_range(-1i64..=1);
        let d = ((base as f64 * rate).round() as i64 + jitter).max(3) as usize;
        durations.push(d);
        let f0 = speaker.base_f0 * pf * (1.0 + offset);
        pitch.extend(std::iter::repeat_n(f0, d));
    }
    let blend = vec![0.0; phonemes.len()];
    let waveform = render(
        &RenderPlan {
            inventory,
            speaker,
            phonemes,
            durations: &durations,
            pitch: &pitch,
            blend: &blend,
        },
        &mut rng,
    );
    Ok(Utterance {
        id,
        waveform: dsp::pcm16(&waveform),
        phonemes: phonemes.to_vec(),
        durations,
        pitch,
        speaker: speaker.clone(),
        severity: 0.0,
    })
}

/// Probability that a phoneme is articulated toward its confusion partner.
pub fn substitution_probability(severity: f64) -> f64 {
    0.3 * severity
}

/// Target SNR of the additive noise for a severity.
pub fn noise_snr_db(severity: f64) -> f64 {
    30.0 - 20.0 * severity
}

/// Re-renders `u` as dysarthric speech of the given severity. The reference
/// transcript and speaker are kept; durations and pitch record what was
/// actually rendered.
pub fn perturb_dysarthric(
    inventory: &PhonemeInventory,
    u: &Utterance,
    severity: f64,
    seed: u64,
) -> Result<Utterance> {
    if !(0.0..=1.0).contains(&severity) || severity.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "severity {severity} outside [0, 1]"
        )));
    }
    if severity == 0.0 {
        return Ok(u.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p_sub = substitution_probability(severity);
    let mut blend = Vec::with_capacity(u.phonemes.len());
    let mut durations = Vec::with_capacity(u.phonemes.len());
    let mut pitch = Vec::new();
    let mut frame = 0;
    for &d in &u.durations {
        blend.push(if rng.random::<f64>() < p_sub {
            SUBSTITUTION_BLEND
        } else {
            0.0
        });
        let stretch = rng.random_range(1.0..=1.0 + severity);
        let nd = ((d as f64 * stretch).round() as usize).max(1);
        durations.push(nd);
        let f0 = u.pitch[frame];
        let flat = if f0 > 0.0 {
            u.speaker.base_f0 + (f0 - u.speaker.base_f0) * (1.0 - severity)
        } else {
            0.0
        };
        pitch.extend(std::iter::repeat_n(flat, nd));
        frame += d;
    }
    let mut wave = render(
        &RenderPlan {
            inventory,
            speaker: &u.speaker,
            phonemes: &u.phonemes,
            durations: &durations,
            pitch: &pitch,
            blend: &blend,
        },
        &mut rng,
    );
    let power = dsp::energy(&wave) / wave.len().max(1) as f64;
    let noise_std = (power / 10f64.powf(noise_snr_db(severity) / 10.0)).sqrt();
    for s in wave.iter_mut() {
        *s += noise_std * gaussian(&mut rng);
    }
    Ok(Utterance {
        id: u.id.clone(),
        waveform: dsp::pcm16(&wave),
        phonemes: u.phonemes.clone(),
        durations,
        pitch,
        speaker: u.speaker.clone(),
        severity,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub speakers: usize,
    /// Total number of normal utterances, spread evenly over speakers.
    pub utterances: usize,
    /// Dysarthric severities rendered for every normal utterance.
    pub severities: Vec<f64>,
    pub words: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            speakers: 4,
            utterances: 800,
            severities: vec![0.7],
            words: 120,
            min_len: 3,
            max_len: 10,
            dev_fraction: 0.15,
            test_fraction: 0.15,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub audio: PathBuf,
    pub phonemes: Vec<String>,
    pub speaker_id: String,
    pub severity: f64,
}

impl ManifestRow {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{:.2}",
            self.id,
            self.audio.display(),
            self.phonemes.join(" "),
            self.speaker_id,
            self.severity
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::Format(format!(
                "manifest line needs 5 tab-separated fields, got {}: {line:?}",
                f.len()
            )));
        }
        let severity: f64 = f[4]
            .parse()
            .map_err(|_| Error::Format(format!("bad severity {:?}", f[4])))?;
        Ok(Self {
            id: f[0].to_string(),
            audio: PathBuf::from(f[1]),
            phonemes: f[2].split_whitespace().map(str::to_string).collect(),
            speaker_id: f[3].to_string(),
            severity,
        })
    }
}

/// Ground truth kept beside the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
}

fn severity_tag(s: f64) -> String {
    format!("s{:03}", (s * 100.0).round() as u32)
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Random isolated "words": distinct phoneme strings.
fn draw_words(cfg: &CorpusConfig, inventory: &PhonemeInventory) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xA11));
    let mut seen = BTreeSet::new();
    let mut words = Vec::with_capacity(cfg.words);
    let mut guard = 0;
    while words.len() < cfg.words && guard < cfg.words * 1000 {
        guard += 1;
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let w: Vec<usize> = (0..len).map(|_| rng.random_range(0..inventory.len())).collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

/// Writes the corpus under `out`: `wav/*.wav`, `manifest.tsv` plus one
/// manifest per split, `truth.tsv` and `speakers.tsv`.
pub fn build_corpus(cfg: &CorpusConfig, out: &Path) -> Result<Corpus> {
    if cfg.speakers == 0 || cfg.utterances < cfg.speakers {
        return Err(Error::InvalidArgument(
            "corpus needs at least one speaker and one utterance per speaker".into(),
        ));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::InvalidArgument("bad word length range".into()));
    }
    if cfg.severities.iter().any(|s| !(0.0..=1.0).contains(s) || *s == 0.0) {
        return Err(Error::InvalidArgument(
            "severity grid entries must lie in (0, 1]".into(),
        ));
    }
    let inventory = PhonemeInventory::default();
    fs::create_dir_all(out.join("wav"))?;

    let speakers: Vec<SpeakerProfile> = (0..cfg.speakers)
        .map(|i| SpeakerProfile::generate(i, cfg.speakers, cfg.seed))
        .collect();
    let words = draw_words(cfg, &inventory);
    let n_test = ((words.len() as f64 * cfg.test_fraction).round() as usize).max(1);
    let n_dev = ((words.len() as f64 * cfg.dev_fraction).round() as usize).max(1);
    if n_test + n_dev >= words.len() {
        return Err(Error::InvalidArgument(format!(
            "{} words cannot fill three disjoint splits",
            words.len()
        )));
    }
    let split_words = |s: Split| -> &[Vec<usize>] {
        match s {
            Split::Test => &words[..n_test],
            Split::Dev => &words[n_test..n_test + n_dev],
            Split::Train => &words[n_test + n_dev..],
        }
    };

    let per_speaker = cfg.utterances / cfg.speakers;
    let extra = cfg.utterances % cfg.speakers;
    let mut rows: Vec<(Split, ManifestRow)> = Vec::new();
    let mut truth = BTreeMap::new();
    let mut counter = 0u64;
    for (si, spk) in speakers.iter().enumerate() {
        let n = per_speaker + usize::from(si < extra);
        let n_test_u = ((n as f64 * cfg.test_fraction).round() as usize).max(1);
        let n_dev_u = ((n as f64 * cfg.dev_fraction).round() as usize).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xB00 + si as u64));
        for k in 0..n {
            let split = if k < n_test_u {
                Split::Test
            } else if k < n_test_u + n_dev_u {
                Split::Dev
            } else {
                Split::Train
            };
            let pool = split_words(split);
            let word = pool.choose(&mut rng).unwrap().clone();
            counter += 1;
            let base_id = format!("{}_{:04}", spk.speaker_id, k);
            let id = format!("{base_id}_{}", severity_tag(0.0));
            let seed = mix_seed(cfg.seed, counter);
            let normal = generate_indexed(&inventory, &word, spk, seed, id.clone())?;
            let mut variants = vec![normal.clone()];
            for (vi, &sev) in cfg.severities.iter().enumerate() {
                let mut d = perturb_dysarthric(
                    &inventory,
                    &normal,
                    sev,
                    mix_seed(seed, 1 + vi as u64),
                )?;
                d.id = format!("{base_id}_{}", severity_tag(sev));
                variants.push(d);
            }
            for u in variants {
                let audio = PathBuf::from("wav").join(format!("{}.wav", u.id));
                dsp::write_wav(&out.join(&audio), &u.waveform)?;
                truth.insert(
                    u.id.clone(),
                    Truth {
                        durations: u.durations.clone(),
                        pitch: u.pitch.clone(),
                    },
                );
                rows.push((
                    split,
                    ManifestRow {
                        id: u.id.clone(),
                        audio,
                        phonemes: u.phonemes.iter().map(|&p| inventory.symbol(p).to_string()).collect(),
                        speaker_id: spk.speaker_id.clone(),
                        severity: u.severity,
                    },
                ));
            }
        }
    }

    let mut all = fs::File::create(out.join("manifest.tsv"))?;
    for (_, r) in &rows {
        writeln!(all, "{}", r.to_line())?;
    }
    for split in Split::ALL {
        let mut f = fs::File::create(out.join(format!("{}.tsv", split.name())))?;
        for (_, r) in rows.iter().filter(|(s, _)| *s == split) {
            writeln!(f, "{}", r.to_line())?;
        }
    }
    let mut tf = fs::File::create(out.join("truth.tsv"))?;
    for (id, t) in &truth {
        writeln!(
            tf,
            "{id}\t{}\t{}",
            join(&t.durations, |d| d.to_string()),
            join(&t.pitch, |p| format!("{p:.3}"))
        )?;
    }
    let mut sf = fs::File::create(out.join("speakers.tsv"))?;
    for s in &speakers {
        writeln!(
            sf,
            "{}\t{:.4}\t{}\t{}",
            s.speaker_id,
            s.base_f0,
            join(&s.formant_offsets, |o| format!("{o:.4}")),
            s.timbre_seed
        )?;
    }
    Corpus::load(out)
}

fn join<T>(xs: &[T], f: impl Fn(&T) -> String) -> String {
    xs.iter().map(f).collect::<Vec<_>>().join(" ")
}

/// A corpus directory written by [`build_corpus`].
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub inventory: PhonemeInventory,
    pub speakers: Vec<SpeakerProfile>,
    pub rows: BTreeMap<Split, Vec<ManifestRow>>,
    pub truth: BTreeMap<String, Truth>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingCheckpoint(path.to_path_buf())
        } else {
            e.into()
        }
    })?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad number {s:?}")))
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let inventory = PhonemeInventory::default();
        let mut rows = BTreeMap::new();
        for split in Split::ALL {
            let lines = read_lines(&dir.join(format!("{}.tsv", split.name())))?;
            let parsed = lines
                .iter()
                .map(|l| ManifestRow::parse(l))
                .collect::<Result<Vec<_>>>()?;
            for r in &parsed {
                for p in &r.phonemes {
                    inventory.index_of(p)?;
                }
            }
            rows.insert(split, parsed);
        }
        let mut truth = BTreeMap::new();
        for line in read_lines(&dir.join("truth.tsv"))? {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Format(format!("bad truth line {line:?}")));
            }
            truth.insert(
                f[0].to_string(),
                Truth {
                    durations: f[1].split_whitespace().map(parse_num).collect::<Result<_>>()?,
                    pitch: f[2].split_whitespace().map(parse_num).collect::<Result<_>>()?,
                },
            );
        }
        let mut speakers = Vec::new();
        for line in read_lines(&dir.join("speakers.tsv"))? {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("bad speaker line {line:?}")));
            }
            speakers.push(SpeakerProfile {
                speaker_id: f[0].to_string(),
                base_f0: parse_num(f[1])?,
                formant_offsets: f[2].split_whitespace().map(parse_num).collect::<Result<_>>()?,
                timbre_seed: parse_num(f[3])?,
            });
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            inventory,
            speakers,
            rows,
            truth,
        })
    }

    pub fn split(&self, split: Split) -> &[ManifestRow] {
        self.rows.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn all_rows(&self) -> impl Iterator<Item = (Split, &ManifestRow)> {
        self.rows
            .iter()
            .flat_map(|(s, rs)| rs.iter().map(move |r| (*s, r)))
    }

    pub fn audio(&self, row: &ManifestRow) -> Result<Vec<f64>> {
        dsp::read_wav(&self.dir.join(&row.audio))
    }

    pub fn phonemes(&self, row: &ManifestRow) -> Vec<usize> {
        row.phonemes
            .iter()
            .map(|p| self.inventory.index_of(p).expect("validated on load"))
            .collect()
    }

    pub fn truth(&self, row: &ManifestRow) -> Result<&Truth> {
        self.truth
            .get(&row.id)
            .ok_or_else(|| Error::Format(format!("no ground truth for {}", row.id)))
    }

    pub fn speaker(&self, id: &str) -> Option<&SpeakerProfile> {
        self.speakers.iter().find(|s| s.speaker_id == id)
    }

    pub fn speaker_ids(&self) -> Vec<String> {
        self.speakers.iter().map(|s| s.speaker_id.clone()).collect()
    }

    /// Reconstructs the in-memory [`Utterance`] for a row.
    pub fn utterance(&self, row: &ManifestRow) -> Result<Utterance> {
        let t = self.truth(row)?;
        let speaker = self
            .speaker(&row.speaker_id)
            .ok_or_else(|| Error::Format(format!("unknown speaker {}", row.speaker_id)))?
            .clone();
        Ok(Utterance {
            id: row.id.clone(),
            waveform: self.audio(row)?,
            phonemes: self.phonemes(row),
            durations: t.durations.clone(),
            pitch: t.pitch.clone(),
            speaker,
            severity: row.severity,
        })
    }

    /// SHA-256 over every manifest, truth file and audio file.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for name in ["manifest.tsv", "truth.tsv", "speakers.tsv"] {
            h.update(fs::read(self.dir.join(name))?);
        }
        for (_, row) in self.all_rows() {
            h.update(fs::read(self.dir.join(&row.audio))?);
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn speaker(i: usize) -> SpeakerProfile {
        SpeakerProfile::generate(i, 4, 11)
    }

    #[test]
    fn generation_is_deterministic() {
        let inv = PhonemeInventory::default();
        let a = generate_utterance(&inv, &["a", "m", "i"], &speaker(0), 3).unwrap();
        let b = generate_utterance(&inv, &["a", "m", "i"], &speaker(0), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_phoneme_length() {
        let inv = PhonemeInventory::default();
        let u = generate_utterance(&inv, &["o"], &speaker(1), 5).unwrap();
        let d = u.durations[0];
        assert!((u.waveform.len() as i64 - (d * HOP) as i64).abs() <= HOP as i64);
        assert_eq!(u.pitch.len(), d);
    }

    #[test]
    fn unknown_symbol_is_named() {
        let inv = PhonemeInventory::default();
        let err = generate_utterance(&inv, &["a", "zz"], &speaker(0), 1).unwrap_err();
        assert!(err.to_string().contains("zz"));
    }

    #[test]
    fn zero_severity_is_identity() {
        let inv = PhonemeInventory::default();
        let u = generate_utterance(&inv, &["a", "e", "r"], &speaker(2), 9).unwrap();
        let d = perturb_dysarthric(&inv, &u, 0.0, 4).unwrap();
        assert_eq!(d.waveform, u.waveform);
    }

    #[test]
    fn perturbation_keeps_transcript_and_speaker() {
        let inv = PhonemeInventory::default();
        let u = generate_utterance(&inv, &["a", "e", "r", "w"], &speaker(3), 9).unwrap();
        for sev in [0.2, 0.7, 1.0] {
            let d = perturb_dysarthric(&inv, &u, sev, 4).unwrap();
            assert_eq!(d.phonemes, u.phonemes);
            assert_eq!(d.speaker, u.speaker);
            assert!(d.frames() >= u.frames());
            assert_eq!(d.waveform.len(), d.frames() * HOP);
        }
        assert!(perturb_dysarthric(&inv, &u, 1.5, 4).is_err());
    }

    #[test]
    fn inventory_contract() {
        let inv = PhonemeInventory::default();
        assert_eq!(inv.len(), 12);
        assert_eq!(inv.classes(), 13);
        assert_eq!(inv.blank_index(), 12);
        assert!(PhonemeInventory::new(vec!["a".into(), "a".into()]).is_err());
        assert!(PhonemeInventory::new(vec!["a".into()]).is_err());
        for i in 0..inv.len() {
            assert_ne!(inv.confusion_partner(i), i);
        }
    }

    #[test]
    fn manifest_line_round_trip() {
        let row = ManifestRow {
            id: "spk0_0001_s070".into(),
            audio: "wav/spk0_0001_s070.wav".into(),
            phonemes: vec!["a".into(), "m".into()],
            speaker_id: "spk0".into(),
            severity: 0.7,
        };
        assert_eq!(ManifestRow::parse(&row.to_line()).unwrap(), row);
        assert!(ManifestRow::parse("a\tb").is_err());
    }
}
