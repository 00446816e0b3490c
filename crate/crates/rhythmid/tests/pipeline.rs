//! Library-level integration: the synthetic pipeline end to end, the
//! reference model dimensions, and checkpoints flowing through training.

use rhythmid::checkpoint;
use rhythmid::encoder::{Batch, RhythmEncoderConfig, RhythmEncoderModel};
use rhythmid::facs::{self, FacsSequence, Vocabulary};
use rhythmid::synthgen::{self, VariabilityLevel};
use rhythmid::training::{evaluate, train, TrainConfig, TrainData};
use rhythmid::RngState;

#[test]
fn reference_configuration_produces_reference_shapes() {
    // 128-wide, 8-head, 6-layer encoder over 1166 speakers; sequences
    // truncated at 1024 tokens.
    let mut config = RhythmEncoderConfig::new(30, 1166);
    config.n_layers = 6;
    config.max_len = 1024;
    assert_eq!(config.head_dim(), 16);
    let model = RhythmEncoderModel::<f32>::init(config, &mut RngState::seed_from(1)).unwrap();

    // Full-length rows at a small batch.
    let long = FacsSequence {
        token_ids: (0..1024).map(|i| 3 + (i % 27) as u32).collect(),
        frame_ms: 20,
        utt_id: "long".into(),
        speaker_id: "s".into(),
    };
    let batch = Batch::new(&[&long, &long], &[0, 1165]).unwrap();
    let mut rng = RngState::seed_from(0);
    let (pooled, logits) = model.forward(&batch, false, &mut rng).unwrap();
    assert_eq!(pooled.shape(), &[2, 128]);
    assert_eq!(logits.shape(), &[2, 1166]);

    // Full reference batch width at a shorter length.
    let short = FacsSequence {
        token_ids: (0..16).map(|i| 3 + (i % 27) as u32).collect(),
        frame_ms: 20,
        utt_id: "short".into(),
        speaker_id: "s".into(),
    };
    let rows: Vec<&FacsSequence> = (0..32).map(|_| &short).collect();
    let batch = Batch::new(&rows, &vec![7usize; 32]).unwrap();
    let (pooled, logits) = model.forward(&batch, false, &mut rng).unwrap();
    assert_eq!(pooled.shape(), &[32, 128]);
    assert_eq!(logits.shape(), &[32, 1166]);

    // Rhythm embeddings carry the model width.
    assert_eq!(model.embed_utterance(&short).unwrap().len(), 128);
}

#[test]
fn synthetic_pipeline_learns_and_checkpoints_round_trip() {
    // generate -> encode -> train -> checkpoint -> reload -> evaluate
    let mut rng = RngState::seed_from(7);
    let profiles =
        synthgen::gen_profiles(4, &synthgen::default_alphabet(), 2.0, &mut rng).unwrap();
    let level = VariabilityLevel::new(0.3).unwrap();
    let texts = ["the cat ran", "we go home", "big pig pen", "red fox den"];
    let train_utts = synthgen::gen_corpus(&profiles, &texts, 25, level, &rng.derive(1)).unwrap();
    let mut test_utts = synthgen::gen_corpus(&profiles, &texts, 8, level, &rng.derive(2)).unwrap();
    for u in &mut test_utts {
        u.utt_id = format!("t_{}", u.utt_id);
    }
    let vocab = Vocabulary::build(&train_utts).unwrap();
    let train_seqs = facs::encode_corpus(&train_utts, &vocab, 20).unwrap();
    let test_seqs = facs::encode_corpus(&test_utts, &vocab, 20).unwrap();
    let data = TrainData::new(train_seqs, None, 64).unwrap();

    let mut enc = RhythmEncoderConfig::new(vocab.size(), data.speakers.len());
    enc.d_model = 32;
    enc.n_heads = 4;
    enc.n_layers = 1;
    enc.ffn_dim = 64;
    enc.max_len = 64;
    let model = RhythmEncoderModel::<f32>::init(enc, &mut RngState::seed_from(8)).unwrap();
    let config = TrainConfig {
        epochs: 10,
        batch_size: 16,
        lr0: 2e-3,
        patience: 100,
        max_tokens: 64,
        seed: 9,
        ..TrainConfig::rhythm()
    };
    let (best, run) = train(&config, &data, model).unwrap();
    assert!(
        run.best_balanced_accuracy > 0.8,
        "validation stalled at {}",
        run.best_balanced_accuracy
    );

    // losses trend downward overall
    let losses = run.losses();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "loss did not decrease: {head} -> {tail}");

    // checkpoint round trip preserves behavior exactly
    let mut bytes = Vec::new();
    checkpoint::save_rhythm(
        &mut bytes,
        &best,
        data.speakers.labels(),
        Some(vocab.sha256_hex()),
    )
    .unwrap();
    let (reloaded, header) = checkpoint::load_rhythm::<_, f32>(bytes.as_slice()).unwrap();
    assert_eq!(header.speakers, data.speakers.labels());

    let test_data = TrainData::with_speaker_table(test_seqs, None, 64, data.speakers.clone())
        .unwrap();
    let indices: Vec<usize> = (0..test_data.len()).collect();
    let (_, ba_orig) = evaluate(&best, &test_data, &indices, 16).unwrap();
    let (_, ba_reload) = evaluate(&reloaded, &test_data, &indices, 16).unwrap();
    assert_eq!(ba_orig, ba_reload);
    assert!(ba_orig > 0.5, "held-out accuracy {ba_orig}");
}
