//! Deterministic synthetic rhythm corpora.
//!
//! Each synthetic speaker carries a per-character duration signature (mean
//! frames plus dispersion) and a pause model for word boundaries. A single
//! variability knob scales every source of randomness: at level 0 a speaker
//! renders a given text identically every time; higher levels blur the
//! signature, so identification gets monotonically harder. Generated
//! utterances satisfy the alignment invariants and round-trip through the
//! alignment parser with zero discards.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::facs::{AlignedUtterance, CharSegment};
use crate::fusion::XVectorTable;
use crate::tensor::rng::RngState;

const FRAME_MS: u32 = 20;
/// Duration noise per character at variability 1, in frames.
const BASE_DISPERSION: f64 = 0.5;
/// Pause-length noise at variability 1, in frames.
const GAP_DISPERSION: f64 = 1.0;
/// X-vector noise scale at informativeness 0 (cluster centers are unit
/// normal, so this swamps them).
const XVEC_NOISE: f64 = 8.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least 2 speakers, got {0}")]
    TooFewSpeakers(usize),
    #[error("alphabet is empty")]
    EmptyAlphabet,
    #[error("no texts to sample from")]
    NoTexts,
    #[error("text {0:?} has no speakable characters")]
    UnspeakableText(String),
    #[error("separation must be non-negative, got {0}")]
    BadSeparation(f64),
    #[error("variability must be non-negative, got {0}")]
    BadVariability(f64),
    #[error("informativeness must lie in [0, 1], got {0}")]
    BadInformativeness(f64),
    #[error("x-vector dimension must be at least 2, got {0}")]
    BadDim(usize),
    #[error("utterance speaker {0:?} has no profile")]
    UnknownSpeaker(String),
    #[error(transparent)]
    Fusion(#[from] crate::fusion::FusionError),
}

/// Scales all dispersions and pause randomness; 0 is a perfectly stable
/// speaker, larger is more spontaneous-like.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariabilityLevel(f64);

impl VariabilityLevel {
    pub fn new(level: f64) -> Result<Self, SynthError> {
        if !level.is_finite() || level < 0.0 {
            return Err(SynthError::BadVariability(level));
        }
        Ok(Self(level))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// One speaker's rhythm signature.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerRhythmProfile {
    pub speaker_id: String,
    /// Mean duration in frames per character, always >= 1.
    pub char_means: BTreeMap<char, f64>,
    /// Duration noise per character at variability 1, >= 0.
    pub char_dispersions: BTreeMap<char, f64>,
    /// Probability of a pause at a word boundary (before variability
    /// reshaping).
    pub gap_prob: f64,
    /// Mean pause length in frames.
    pub gap_mean: f64,
    /// Pause-length noise at variability 1.
    pub gap_dispersion: f64,
}

/// Draws speaker profiles whose pairwise signature distance scales with
/// `separation`; at 0 all profiles are identical.
pub fn gen_profiles(
    n_speakers: usize,
    base_alphabet: &[char],
    separation: f64,
    rng: &mut RngState,
) -> Result<Vec<SpeakerRhythmProfile>, SynthError> {
    if n_speakers < 2 {
        return Err(SynthError::TooFewSpeakers(n_speakers));
    }
    if base_alphabet.is_empty() {
        return Err(SynthError::EmptyAlphabet);
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(SynthError::BadSeparation(separation));
    }
    // Shared base signature, then per-speaker offsets scaled by separation.
    let base: BTreeMap<char, f64> = base_alphabet
        .iter()
        .map(|&c| (c, rng.uniform(1.5, 3.5)))
        .collect();
    let mut profiles = Vec::with_capacity(n_speakers);
    for s in 0..n_speakers {
        let mut char_means = BTreeMap::new();
        let mut char_dispersions = BTreeMap::new();
        for (&c, &m) in &base {
            let offset = separation * rng.standard_normal();
            char_means.insert(c, (m + offset).clamp(1.0, 8.0));
            char_dispersions.insert(c, BASE_DISPERSION);
        }
        let gap_mean = (2.0 + separation * rng.standard_normal()).clamp(0.0, 6.0);
        profiles.push(SpeakerRhythmProfile {
            speaker_id: format!("spk{s:03}"),
            char_means,
            char_dispersions,
            gap_prob: 0.9,
            gap_mean,
            gap_dispersion: GAP_DISPERSION,
        });
    }
    Ok(profiles)
}

/// Pause probability after variability reshaping: level 0 collapses the
/// Bernoulli draw to a deterministic outcome, level 1 keeps it as-is, and
/// higher levels pull it toward a coin flip.
fn effective_gap_prob(p: f64, variability: f64) -> f64 {
    if variability == 0.0 {
        return if p >= 0.5 { 1.0 } else { 0.0 };
    }
    (0.5 + (p - 0.5) / variability).clamp(0.0, 1.0)
}

fn sample_char_frames(mean: f64, dispersion: f64, v: f64, rng: &mut RngState) -> u32 {
    let noisy = mean + dispersion * v * rng.standard_normal();
    noisy.round().max(1.0) as u32
}

fn sample_gap_frames(mean: f64, dispersion: f64, v: f64, rng: &mut RngState) -> u32 {
    let noisy = mean + dispersion * v * rng.standard_normal();
    noisy.round().max(0.0) as u32
}

/// Renders one text as an aligned utterance under a speaker's profile.
/// Segment times land on exact frame boundaries.
pub fn synth_utterance(
    profile: &SpeakerRhythmProfile,
    text: &str,
    variability: VariabilityLevel,
    rng: &mut RngState,
    utt_id: &str,
) -> Result<AlignedUtterance, SynthError> {
    let v = variability.value();
    let mut segments = Vec::new();
    let mut frame = 0u32;
    let mut spoke = false;
    for raw in text.chars() {
        let c = raw.to_lowercase().next().unwrap_or(raw);
        if c.is_whitespace() {
            if rng.bernoulli(effective_gap_prob(profile.gap_prob, v)) {
                frame += sample_gap_frames(profile.gap_mean, profile.gap_dispersion, v, rng);
            }
            continue;
        }
        spoke = true;
        let mean = profile.char_means.get(&c).copied().unwrap_or(2.5);
        let dispersion = profile
            .char_dispersions
            .get(&c)
            .copied()
            .unwrap_or(BASE_DISPERSION);
        let frames = sample_char_frames(mean, dispersion, v, rng);
        let start = frame;
        frame += frames;
        segments.push(CharSegment {
            symbol: c,
            start_s: frame_seconds(start),
            end_s: frame_seconds(frame),
        });
    }
    if !spoke {
        return Err(SynthError::UnspeakableText(text.to_string()));
    }
    Ok(AlignedUtterance {
        utt_id: utt_id.to_string(),
        speaker_id: profile.speaker_id.clone(),
        duration_s: frame_seconds(frame),
        segments,
    })
}

fn frame_seconds(frames: u32) -> f64 {
    (frames as f64 * FRAME_MS as f64) / 1000.0
}

/// Generates `n_utts_per_speaker` utterances per profile, sampling texts
/// uniformly. Per-speaker derived streams make generation order-independent
/// and reproducible.
pub fn gen_corpus(
    profiles: &[SpeakerRhythmProfile],
    texts: &[&str],
    n_utts_per_speaker: usize,
    variability: VariabilityLevel,
    rng: &RngState,
) -> Result<Vec<AlignedUtterance>, SynthError> {
    if texts.is_empty() {
        return Err(SynthError::NoTexts);
    }
    for t in texts {
        if t.chars().all(char::is_whitespace) {
            return Err(SynthError::UnspeakableText(t.to_string()));
        }
    }
    let mut out = Vec::with_capacity(profiles.len() * n_utts_per_speaker);
    for (s, profile) in profiles.iter().enumerate() {
        let mut srng = rng.derive(1 + s as u64);
        for j in 0..n_utts_per_speaker {
            let text = texts[srng.below(texts.len())];
            let utt_id = format!("{}u{j:04}", profile.speaker_id);
            out.push(synth_utterance(
                profile,
                text,
                variability,
                &mut srng,
                &utt_id,
            )?);
        }
    }
    Ok(out)
}

/// Synthesizes an x-vector table for `utterances`: one Gaussian cluster
/// center per speaker, plus per-utterance noise scaled by
/// `1 - informativeness`. At 1 every vector equals its center; at 0 the
/// noise swamps the centers and nearest-center assignment drops to chance.
pub fn gen_xvectors(
    profiles: &[SpeakerRhythmProfile],
    utterances: &[AlignedUtterance],
    informativeness: f64,
    dim: usize,
    rng: &mut RngState,
) -> Result<XVectorTable, SynthError> {
    if dim < 2 {
        return Err(SynthError::BadDim(dim));
    }
    if !(0.0..=1.0).contains(&informativeness) {
        return Err(SynthError::BadInformativeness(informativeness));
    }
    let mut centers: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for p in profiles {
        let center: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        centers.insert(&p.speaker_id, center);
    }
    let noise_scale = (1.0 - informativeness) * XVEC_NOISE;
    let mut table = XVectorTable::new(dim);
    for utt in utterances {
        let center = centers
            .get(utt.speaker_id.as_str())
            .ok_or_else(|| SynthError::UnknownSpeaker(utt.speaker_id.clone()))?;
        let vector: Vec<f64> = center
            .iter()
            .map(|&c| c + noise_scale * rng.standard_normal())
            .collect();
        table.insert(utt.utt_id.clone(), vector)?;
    }
    Ok(table)
}

/// Bundled sample sentences (lowercase letters and spaces only).
pub fn default_texts() -> Vec<&'static str> {
    vec![
        "the quick brown fox jumps over the lazy dog",
        "pack my box with five dozen jugs",
        "how quickly daft jumping zebras vex",
        "bright vixens jump dozy fowl quack",
        "sphinx of black quartz judge my vow",
        "two driven jocks help fax my big quiz",
        "five quacking zephyrs jolt my wax bed",
        "the jay pig fox zebra and my wolves quack",
    ]
}

/// Lowercase ascii alphabet.
pub fn default_alphabet() -> Vec<char> {
    ('a'..='z').collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facs::{self, Vocabulary};
    use crate::metrics::{balanced_accuracy, ConfusionMatrix};

    fn strip_id(p: &SpeakerRhythmProfile) -> SpeakerRhythmProfile {
        let mut q = p.clone();
        q.speaker_id = String::new();
        q
    }

    #[test]
    fn zero_separation_yields_identical_profiles() {
        let mut rng = RngState::seed_from(5);
        let profiles = gen_profiles(4, &default_alphabet(), 0.0, &mut rng).unwrap();
        for p in &profiles[1..] {
            assert_eq!(strip_id(&profiles[0]), strip_id(p));
        }
    }

    #[test]
    fn profiles_are_deterministic_in_the_seed() {
        let a = gen_profiles(5, &default_alphabet(), 1.0, &mut RngState::seed_from(9)).unwrap();
        let b = gen_profiles(5, &default_alphabet(), 1.0, &mut RngState::seed_from(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn high_separation_spreads_signatures_past_the_dispersion() {
        let mut rng = RngState::seed_from(11);
        let profiles = gen_profiles(10, &default_alphabet(), 1.5, &mut rng).unwrap();
        for i in 0..profiles.len() {
            for j in i + 1..profiles.len() {
                let a = &profiles[i].char_means;
                let b = &profiles[j].char_means;
                let ms: f64 = a
                    .iter()
                    .map(|(c, &m)| (m - b[c]).powi(2))
                    .sum::<f64>()
                    / a.len() as f64;
                let rms = ms.sqrt();
                assert!(
                    rms > BASE_DISPERSION,
                    "speakers {i},{j}: rms distance {rms} below dispersion"
                );
            }
        }
    }

    #[test]
    fn invalid_arguments_are_rejected() {
        let mut rng = RngState::seed_from(0);
        assert!(matches!(
            gen_profiles(1, &['a'], 1.0, &mut rng),
            Err(SynthError::TooFewSpeakers(1))
        ));
        assert!(matches!(
            gen_profiles(3, &[], 1.0, &mut rng),
            Err(SynthError::EmptyAlphabet)
        ));
        assert!(matches!(
            gen_profiles(3, &['a'], -1.0, &mut rng),
            Err(SynthError::BadSeparation(_))
        ));
        assert!(VariabilityLevel::new(-0.1).is_err());
        assert!(VariabilityLevel::new(f64::NAN).is_err());
    }

    #[test]
    fn zero_variability_renders_a_text_identically_every_time() {
        let mut rng = RngState::seed_from(21);
        let profiles = gen_profiles(3, &default_alphabet(), 1.0, &mut rng).unwrap();
        let v0 = VariabilityLevel::new(0.0).unwrap();
        let mut r1 = RngState::seed_from(100);
        let mut r2 = RngState::seed_from(999);
        let a = synth_utterance(&profiles[0], "hello world", v0, &mut r1, "u").unwrap();
        let b = synth_utterance(&profiles[0], "hello world", v0, &mut r2, "u").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generated_corpus_parses_with_zero_discards() {
        let mut rng = RngState::seed_from(33);
        let profiles = gen_profiles(4, &default_alphabet(), 1.0, &mut rng).unwrap();
        let texts = default_texts();
        let corpus = gen_corpus(
            &profiles,
            &texts,
            6,
            VariabilityLevel::new(1.0).unwrap(),
            &RngState::seed_from(34),
        )
        .unwrap();
        assert_eq!(corpus.len(), 24);
        let mut buf = Vec::new();
        facs::write_alignment_file(&mut buf, &corpus).unwrap();
        let (parsed, report) = facs::parse_alignment_file(buf.as_slice()).unwrap();
        assert_eq!(parsed.len(), corpus.len(), "discards: {report:?}");
        assert!(report.is_empty(), "report: {report:?}");
        // parse result matches the generated segments (whitespace-free)
        assert_eq!(parsed, corpus);
    }

    #[test]
    fn corpus_generation_is_deterministic() {
        let profiles =
            gen_profiles(3, &default_alphabet(), 1.0, &mut RngState::seed_from(1)).unwrap();
        let v = VariabilityLevel::new(0.7).unwrap();
        let a = gen_corpus(&profiles, &["abc def"], 5, v, &RngState::seed_from(2)).unwrap();
        let b = gen_corpus(&profiles, &["abc def"], 5, v, &RngState::seed_from(2)).unwrap();
        assert_eq!(a, b);
    }

    /// Per-utterance mean observed duration per character, the feature the
    /// centroid oracle classifies on.
    fn duration_signature(utt: &AlignedUtterance, alphabet: &[char]) -> Vec<f64> {
        let mut sums: BTreeMap<char, (f64, usize)> = BTreeMap::new();
        for seg in &utt.segments {
            let entry = sums.entry(seg.symbol).or_insert((0.0, 0));
            entry.0 += seg.end_s - seg.start_s;
            entry.1 += 1;
        }
        alphabet
            .iter()
            .map(|c| match sums.get(c) {
                Some(&(total, n)) => total / n as f64,
                None => 0.0,
            })
            .collect()
    }

    /// Nearest-centroid classification accuracy over a train/test split,
    /// the model-free oracle for corpus separability.
    fn centroid_balanced_accuracy(
        train: &[AlignedUtterance],
        test: &[AlignedUtterance],
        speakers: &[String],
        alphabet: &[char],
    ) -> f64 {
        let index = |s: &str| speakers.iter().position(|x| x == s).unwrap();
        let dim = alphabet.len();
        let mut centroids = vec![vec![0.0f64; dim]; speakers.len()];
        let mut counts = vec![0usize; speakers.len()];
        for u in train {
            let sig = duration_signature(u, alphabet);
            let k = index(&u.speaker_id);
            counts[k] += 1;
            for (acc, v) in centroids[k].iter_mut().zip(&sig) {
                *acc += v;
            }
        }
        for (c, &n) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= n.max(1) as f64;
            }
        }
        let mut cm = ConfusionMatrix::new(speakers.len());
        for u in test {
            let sig = duration_signature(u, alphabet);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, c) in centroids.iter().enumerate() {
                let d: f64 = c.iter().zip(&sig).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            cm.add(index(&u.speaker_id), best).unwrap();
        }
        balanced_accuracy(&cm).unwrap()
    }

    fn split_corpus(
        corpus: Vec<AlignedUtterance>,
        test_every: usize,
    ) -> (Vec<AlignedUtterance>, Vec<AlignedUtterance>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, u) in corpus.into_iter().enumerate() {
            if i % test_every == 0 {
                test.push(u);
            } else {
                train.push(u);
            }
        }
        (train, test)
    }

    #[test]
    fn centroid_oracle_separates_a_low_variability_corpus() {
        let alphabet = default_alphabet();
        let profiles = gen_profiles(10, &alphabet, 1.5, &mut RngState::seed_from(41)).unwrap();
        let speakers: Vec<String> = profiles.iter().map(|p| p.speaker_id.clone()).collect();
        let corpus = gen_corpus(
            &profiles,
            &default_texts(),
            20,
            VariabilityLevel::new(0.25).unwrap(),
            &RngState::seed_from(42),
        )
        .unwrap();
        let (train, test) = split_corpus(corpus, 5);
        let ba = centroid_balanced_accuracy(&train, &test, &speakers, &alphabet);
        assert!(ba >= 0.95, "centroid oracle balanced accuracy {ba}");
    }

    #[test]
    fn centroid_accuracy_never_improves_with_variability() {
        // Averaged over 5 seeds, the oracle's accuracy is non-increasing in
        // the variability level.
        let alphabet = default_alphabet();
        let levels = [0.0, 1.0, 4.0];
        let mut averages = [0.0f64; 3];
        for seed in 0..5u64 {
            let profiles =
                gen_profiles(6, &alphabet, 1.0, &mut RngState::seed_from(50 + seed)).unwrap();
            let speakers: Vec<String> = profiles.iter().map(|p| p.speaker_id.clone()).collect();
            for (i, &level) in levels.iter().enumerate() {
                let corpus = gen_corpus(
                    &profiles,
                    &default_texts(),
                    15,
                    VariabilityLevel::new(level).unwrap(),
                    &RngState::seed_from(1000 + seed),
                )
                .unwrap();
                let (train, test) = split_corpus(corpus, 5);
                averages[i] += centroid_balanced_accuracy(&train, &test, &speakers, &alphabet);
            }
        }
        for a in &mut averages {
            *a /= 5.0;
        }
        assert!(
            averages[0] >= averages[1] && averages[1] >= averages[2],
            "accuracy should not increase with variability: {averages:?}"
        );
        assert!(averages[0] > averages[2], "knob has no effect: {averages:?}");
    }

    #[test]
    fn full_informativeness_makes_speaker_vectors_identical() {
        let profiles =
            gen_profiles(3, &default_alphabet(), 1.0, &mut RngState::seed_from(61)).unwrap();
        let corpus = gen_corpus(
            &profiles,
            &["abc"],
            4,
            VariabilityLevel::new(0.5).unwrap(),
            &RngState::seed_from(62),
        )
        .unwrap();
        let table =
            gen_xvectors(&profiles, &corpus, 1.0, 8, &mut RngState::seed_from(63)).unwrap();
        for p in &profiles {
            let vectors: Vec<&[f64]> = corpus
                .iter()
                .filter(|u| u.speaker_id == p.speaker_id)
                .map(|u| table.get(&u.utt_id).unwrap())
                .collect();
            for v in &vectors[1..] {
                assert_eq!(*v, vectors[0]);
            }
        }
    }

    #[test]
    fn zero_informativeness_drops_nearest_center_to_chance() {
        let n_speakers = 10;
        let profiles =
            gen_profiles(n_speakers, &default_alphabet(), 1.0, &mut RngState::seed_from(71))
                .unwrap();
        let corpus = gen_corpus(
            &profiles,
            &["ab"],
            60,
            VariabilityLevel::new(0.0).unwrap(),
            &RngState::seed_from(72),
        )
        .unwrap();
        let mut rng = RngState::seed_from(73);
        let table = gen_xvectors(&profiles, &corpus, 0.0, 8, &mut rng).unwrap();
        // Recover the centers (informativeness 1 on the same rng layout is
        // not available, so classify against per-speaker sample means of an
        // independent clean table).
        let clean =
            gen_xvectors(&profiles, &corpus, 1.0, 8, &mut RngState::seed_from(73)).unwrap();
        let speakers: Vec<&str> = profiles.iter().map(|p| p.speaker_id.as_str()).collect();
        let centers: Vec<&[f64]> = speakers
            .iter()
            .map(|s| {
                let first = corpus.iter().find(|u| u.speaker_id == *s).unwrap();
                clean.get(&first.utt_id).unwrap()
            })
            .collect();
        let mut correct = 0usize;
        for u in &corpus {
            let v = table.get(&u.utt_id).unwrap();
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, c) in centers.iter().enumerate() {
                let d: f64 = c.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            if speakers[best] == u.speaker_id {
                correct += 1;
            }
        }
        let acc = correct as f64 / corpus.len() as f64;
        let chance = 1.0 / n_speakers as f64;
        assert!(
            (acc - chance).abs() <= 0.1,
            "accuracy {acc} should sit near chance {chance}"
        );
    }

    #[test]
    fn xvector_table_round_trips_through_the_tsv_format() {
        let profiles =
            gen_profiles(3, &default_alphabet(), 1.0, &mut RngState::seed_from(81)).unwrap();
        let corpus = gen_corpus(
            &profiles,
            &["xyz"],
            3,
            VariabilityLevel::new(0.3).unwrap(),
            &RngState::seed_from(82),
        )
        .unwrap();
        let table =
            gen_xvectors(&profiles, &corpus, 0.8, 5, &mut RngState::seed_from(83)).unwrap();
        let mut buf = Vec::new();
        table.save(&mut buf).unwrap();
        let back = crate::fusion::load_xvectors(buf.as_slice()).unwrap();
        assert_eq!(table, back);
    }

    #[test]
    fn generated_corpus_supports_facs_encoding() {
        let profiles =
            gen_profiles(2, &default_alphabet(), 1.0, &mut RngState::seed_from(91)).unwrap();
        let corpus = gen_corpus(
            &profiles,
            &["hi bob"],
            2,
            VariabilityLevel::new(0.0).unwrap(),
            &RngState::seed_from(92),
        )
        .unwrap();
        let vocab = Vocabulary::build(&corpus).unwrap();
        let seqs = facs::encode_corpus(&corpus, &vocab, FRAME_MS).unwrap();
        for s in &seqs {
            assert!(!s.is_empty());
            // every speakable frame count matches the synthetic durations
            let total: usize = s.len();
            let utt = corpus.iter().find(|u| u.utt_id == s.utt_id).unwrap();
            assert_eq!(total, facs::frame_count(utt.duration_s, FRAME_MS));
        }
    }
}
