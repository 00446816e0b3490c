//! Frame-aligned character sequences.
//!
//! A time-aligned transcript assigns each character an interval in seconds.
//! Encoding renders the utterance as one token per fixed-length frame
//! (default 20 ms): a frame carries the character whose segment contains the
//! frame midpoint, or the null token `*` when no segment does. Character
//! duration therefore shows up as token repetition, and pauses as `*` runs,
//! e.g. `hhee**`.
//!
//! File formats:
//! - Alignment input: JSON lines, one object per utterance:
//!   `{"utt_id": "...", "speaker": "...", "duration": 1.23,
//!     "chars": [{"c": "h", "start": 0.0, "end": 0.04}, ...]}`
//! - Corpus file: one `utt_id<TAB>speaker_id<TAB>facs_string` line per
//!   utterance.
//! - Vocabulary file: one `id<TAB>symbol` line per entry, reserved entries
//!   first.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TokenId = u32;

/// Reserved padding id; never appears inside a [`FacsSequence`].
pub const PAD_ID: TokenId = 0;
/// Reserved id for frames with no aligned character.
pub const NULL_ID: TokenId = 1;
/// Reserved id for characters missing from the vocabulary.
pub const UNK_ID: TokenId = 2;
const RESERVED: usize = 3;

/// Text form of the null token.
pub const NULL_CHAR: char = '*';
/// Text form of the unknown token.
pub const UNK_CHAR: char = '#';
const PAD_TEXT: &str = "<pad>";

/// Tolerance for frame-count arithmetic: `floor(duration*1000/frame_ms)`
/// evaluated naively can land one ulp under an exact multiple.
const FRAME_EPS: f64 = 1e-9;
/// Slack for segment-inside-duration checks on decimal inputs.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FacsError {
    #[error("alignment stream unreadable: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot build a vocabulary from zero utterances")]
    EmptyCorpus,
    #[error("token id {0} has no text form in this vocabulary")]
    UnknownTokenId(TokenId),
    #[error("character {0:?} is not resolvable in this vocabulary")]
    UnresolvableChar(char),
    #[error("frame length must be positive")]
    ZeroFrame,
    #[error("vocabulary file line {line}: {reason}")]
    VocabFormat { line: usize, reason: String },
    #[error("corpus file line {line}: {reason}")]
    CorpusFormat { line: usize, reason: String },
}

/// One aligned character: `symbol` spans `[start_s, end_s)` seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct CharSegment {
    pub symbol: char,
    pub start_s: f64,
    pub end_s: f64,
}

/// A validated utterance: segments are sorted, non-overlapping and inside
/// `[0, duration_s]`; symbols are lowercased single characters with
/// whitespace segments removed (their frames read as null).
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedUtterance {
    pub utt_id: String,
    pub speaker_id: String,
    pub duration_s: f64,
    pub segments: Vec<CharSegment>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    /// Line is not valid JSON for the alignment schema.
    Malformed,
    /// A symbol is empty or wider than one character after lowercasing.
    BadSymbol,
    /// Utterance duration is zero or negative.
    BadDuration,
    /// A segment ends at or before its start, or segments are out of order.
    NonMonotonic,
    /// Consecutive segments overlap in time.
    Overlap,
    /// A segment extends outside `[0, duration]`.
    OutOfRange,
}

/// Per-reason tally of records dropped by [`parse_alignment_file`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DiscardReport {
    counts: BTreeMap<DiscardReason, usize>,
}

impl DiscardReport {
    pub fn record(&mut self, reason: DiscardReason) {
        *self.counts.entry(reason).or_insert(0) += 1;
    }

    pub fn count(&self, reason: DiscardReason) -> usize {
        self.counts.get(&reason).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (DiscardReason, usize)> + '_ {
        self.counts.iter().map(|(&r, &c)| (r, c))
    }
}

#[derive(Deserialize)]
struct RawChar {
    c: String,
    start: f64,
    end: f64,
}

#[derive(Deserialize)]
struct RawRecord {
    utt_id: String,
    speaker: String,
    duration: f64,
    chars: Vec<RawChar>,
}

fn validate_record(raw: RawRecord) -> Result<AlignedUtterance, DiscardReason> {
    if !raw.duration.is_finite() || raw.duration <= 0.0 {
        return Err(DiscardReason::BadDuration);
    }
    let mut segments = Vec::with_capacity(raw.chars.len());
    for rc in &raw.chars {
        let lowered: Vec<char> = rc.c.to_lowercase().chars().collect();
        let &[symbol] = &lowered[..] else {
            return Err(DiscardReason::BadSymbol);
        };
        segments.push(CharSegment {
            symbol,
            start_s: rc.start,
            end_s: rc.end,
        });
    }
    for (i, seg) in segments.iter().enumerate() {
        if !seg.start_s.is_finite() || !seg.end_s.is_finite() || seg.end_s <= seg.start_s {
            return Err(DiscardReason::NonMonotonic);
        }
        if i > 0 {
            if seg.start_s < segments[i - 1].start_s {
                return Err(DiscardReason::NonMonotonic);
            }
            if seg.start_s < segments[i - 1].end_s {
                return Err(DiscardReason::Overlap);
            }
        }
        if seg.start_s < 0.0 || seg.end_s > raw.duration + TIME_EPS {
            return Err(DiscardReason::OutOfRange);
        }
    }
    // Whitespace carries no rhythm token of its own; those frames read as
    // null, so the segments are dropped after geometry validation.
    segments.retain(|s| !s.symbol.is_whitespace());
    Ok(AlignedUtterance {
        utt_id: raw.utt_id,
        speaker_id: raw.speaker,
        duration_s: raw.duration,
        segments,
    })
}

/// Writes utterances in the JSON-lines alignment schema.
pub fn write_alignment_file<W: Write>(
    mut w: W,
    utterances: &[AlignedUtterance],
) -> Result<(), FacsError> {
    #[derive(Serialize)]
    struct OutChar {
        c: String,
        start: f64,
        end: f64,
    }
    #[derive(Serialize)]
    struct OutRecord<'a> {
        utt_id: &'a str,
        speaker: &'a str,
        duration: f64,
        chars: Vec<OutChar>,
    }
    for utt in utterances {
        let record = OutRecord {
            utt_id: &utt.utt_id,
            speaker: &utt.speaker_id,
            duration: utt.duration_s,
            chars: utt
                .segments
                .iter()
                .map(|s| OutChar {
                    c: s.symbol.to_string(),
                    start: s.start_s,
                    end: s.end_s,
                })
                .collect(),
        };
        let line = serde_json::to_string(&record)
            .map_err(std::io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Parses JSON-lines alignments. Invalid records are skipped and tallied per
/// failure reason; only an unreadable stream is fatal.
pub fn parse_alignment_file<R: BufRead>(
    source: R,
) -> Result<(Vec<AlignedUtterance>, DiscardReport), FacsError> {
    let mut utterances = Vec::new();
    let mut report = DiscardReport::default();
    for line in source.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(_) => {
                report.record(DiscardReason::Malformed);
                continue;
            }
        };
        match validate_record(raw) {
            Ok(utt) => utterances.push(utt),
            Err(reason) => report.record(reason),
        }
    }
    Ok((utterances, report))
}

/// Character-to-id mapping with reserved entries `<pad>`, `*` (null) and
/// `#` (unknown). Ids are stable across rebuilds: reserved first, then the
/// corpus characters in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
    symbol_to_id: BTreeMap<char, TokenId>,
}

impl Vocabulary {
    /// Builds from every distinct normalized symbol observed. The reserved
    /// text forms `*` and `#` (and whitespace) never enter the table, so
    /// reserved ids cannot collide with corpus characters.
    pub fn build(utterances: &[AlignedUtterance]) -> Result<Self, FacsError> {
        if utterances.is_empty() {
            return Err(FacsError::EmptyCorpus);
        }
        let mut set = BTreeSet::new();
        for utt in utterances {
            for seg in &utt.segments {
                let c = seg.symbol;
                if c.is_whitespace() || c == NULL_CHAR || c == UNK_CHAR {
                    continue;
                }
                set.insert(c);
            }
        }
        Ok(Self::from_symbols(set.into_iter().collect()))
    }

    fn from_symbols(symbols: Vec<char>) -> Self {
        let symbol_to_id = symbols
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, (RESERVED + i) as TokenId))
            .collect();
        Self {
            symbols,
            symbol_to_id,
        }
    }

    /// Total size including the three reserved entries.
    pub fn size(&self) -> usize {
        RESERVED + self.symbols.len()
    }

    /// Id used when encoding `symbol`; out-of-vocabulary symbols map to the
    /// unknown id rather than failing.
    pub fn encode_symbol(&self, symbol: char) -> TokenId {
        self.symbol_to_id.get(&symbol).copied().unwrap_or(UNK_ID)
    }

    /// Resolves one character of FACS text, including the reserved forms.
    pub fn id_of_text_char(&self, c: char) -> Option<TokenId> {
        match c {
            NULL_CHAR => Some(NULL_ID),
            UNK_CHAR => Some(UNK_ID),
            _ => self.symbol_to_id.get(&c).copied(),
        }
    }

    /// Text form of an id; padding has none.
    pub fn char_of(&self, id: TokenId) -> Option<char> {
        match id {
            PAD_ID => None,
            NULL_ID => Some(NULL_CHAR),
            UNK_ID => Some(UNK_CHAR),
            _ => self.symbols.get(id as usize - RESERVED).copied(),
        }
    }

    /// Canonical tab-separated serialization, reserved entries first.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{PAD_ID}\t{PAD_TEXT}\n"));
        out.push_str(&format!("{NULL_ID}\t{NULL_CHAR}\n"));
        out.push_str(&format!("{UNK_ID}\t{UNK_CHAR}\n"));
        for (i, c) in self.symbols.iter().enumerate() {
            out.push_str(&format!("{}\t{}\n", RESERVED + i, c));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, FacsError> {
        let mut symbols = Vec::new();
        let mut next_id = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let err = |reason: &str| FacsError::VocabFormat {
                line: lineno + 1,
                reason: reason.to_string(),
            };
            let (id_text, symbol) = line.split_once('\t').ok_or_else(|| err("missing tab"))?;
            let id: usize = id_text.parse().map_err(|_| err("bad id"))?;
            if id != next_id {
                return Err(err(&format!("expected id {next_id}, found {id}")));
            }
            match id {
                0 if symbol != PAD_TEXT => return Err(err("reserved entry 0 must be <pad>")),
                1 if symbol != "*" => return Err(err("reserved entry 1 must be *")),
                2 if symbol != "#" => return Err(err("reserved entry 2 must be #")),
                0..=2 => {}
                _ => {
                    let chars: Vec<char> = symbol.chars().collect();
                    let &[c] = &chars[..] else {
                        return Err(err("symbol must be a single character"));
                    };
                    symbols.push(c);
                }
            }
            next_id += 1;
        }
        if next_id < RESERVED {
            return Err(FacsError::VocabFormat {
                line: 0,
                reason: "missing reserved entries".to_string(),
            });
        }
        Ok(Self::from_symbols(symbols))
    }

    /// SHA-256 of the canonical serialization, for checkpoint headers.
    pub fn sha256_hex(&self) -> String {
        let digest = Sha256::digest(self.to_tsv().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<(), FacsError> {
        w.write_all(self.to_tsv().as_bytes())?;
        Ok(())
    }

    pub fn load<R: BufRead>(mut r: R) -> Result<Self, FacsError> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        Self::from_tsv(&text)
    }
}

/// Token-per-frame rendering of one utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FacsSequence {
    pub token_ids: Vec<TokenId>,
    pub frame_ms: u32,
    pub utt_id: String,
    pub speaker_id: String,
}

impl FacsSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Number of whole frames in `duration_s` at `frame_ms`.
pub fn frame_count(duration_s: f64, frame_ms: u32) -> usize {
    (duration_s * 1000.0 / frame_ms as f64 + FRAME_EPS).floor() as usize
}

/// Encodes an utterance at the given frame length. Frame `k` covers
/// `[k*frame_ms, (k+1)*frame_ms)` and takes the symbol of the segment
/// containing its midpoint; frames whose midpoint lies in no segment become
/// null, and symbols missing from the vocabulary become unknown.
pub fn facs_encode(
    utt: &AlignedUtterance,
    vocab: &Vocabulary,
    frame_ms: u32,
) -> Result<FacsSequence, FacsError> {
    if frame_ms == 0 {
        return Err(FacsError::ZeroFrame);
    }
    let n = frame_count(utt.duration_s, frame_ms);
    let mut token_ids = Vec::with_capacity(n);
    for k in 0..n {
        let mid_s = (k as f64 + 0.5) * frame_ms as f64 / 1000.0;
        // Last segment starting at or before the midpoint, if any.
        let at = utt.segments.partition_point(|s| s.start_s <= mid_s);
        let token = if at > 0 && mid_s < utt.segments[at - 1].end_s {
            vocab.encode_symbol(utt.segments[at - 1].symbol)
        } else {
            NULL_ID
        };
        token_ids.push(token);
    }
    Ok(FacsSequence {
        token_ids,
        frame_ms,
        utt_id: utt.utt_id.clone(),
        speaker_id: utt.speaker_id.clone(),
    })
}

/// One character per token; null renders as `*`, unknown as `#`.
pub fn facs_to_string(seq: &FacsSequence, vocab: &Vocabulary) -> Result<String, FacsError> {
    seq.token_ids
        .iter()
        .map(|&id| vocab.char_of(id).ok_or(FacsError::UnknownTokenId(id)))
        .collect()
}

/// Run-length decoding of FACS text into `(token id, frame count)` pairs.
pub fn facs_decode(text: &str, vocab: &Vocabulary) -> Result<Vec<(TokenId, usize)>, FacsError> {
    let mut runs: Vec<(TokenId, usize)> = Vec::new();
    for c in text.chars() {
        let id = vocab
            .id_of_text_char(c)
            .ok_or(FacsError::UnresolvableChar(c))?;
        match runs.last_mut() {
            Some((last, count)) if *last == id => *count += 1,
            _ => runs.push((id, 1)),
        }
    }
    Ok(runs)
}

/// Per-frame token ids of FACS text (the corpus-file reading path).
pub fn facs_from_string(
    text: &str,
    vocab: &Vocabulary,
    frame_ms: u32,
    utt_id: &str,
    speaker_id: &str,
) -> Result<FacsSequence, FacsError> {
    let token_ids = text
        .chars()
        .map(|c| {
            vocab
                .id_of_text_char(c)
                .ok_or(FacsError::UnresolvableChar(c))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FacsSequence {
        token_ids,
        frame_ms,
        utt_id: utt_id.to_string(),
        speaker_id: speaker_id.to_string(),
    })
}

/// Keeps at most the first `max_tokens` frames.
pub fn truncate(seq: &FacsSequence, max_tokens: usize) -> FacsSequence {
    assert!(max_tokens > 0, "max_tokens must be positive");
    let mut out = seq.clone();
    out.token_ids.truncate(max_tokens);
    out
}

/// Encodes a corpus with deterministic ordering by `utt_id`.
pub fn encode_corpus(
    utterances: &[AlignedUtterance],
    vocab: &Vocabulary,
    frame_ms: u32,
) -> Result<Vec<FacsSequence>, FacsError> {
    let mut sorted: Vec<&AlignedUtterance> = utterances.iter().collect();
    sorted.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    sorted
        .into_iter()
        .map(|u| facs_encode(u, vocab, frame_ms))
        .collect()
}

/// Writes `utt_id<TAB>speaker_id<TAB>facs_string` lines.
pub fn write_facs_corpus<W: Write>(
    mut w: W,
    seqs: &[FacsSequence],
    vocab: &Vocabulary,
) -> Result<(), FacsError> {
    for seq in seqs {
        let text = facs_to_string(seq, vocab)?;
        writeln!(w, "{}\t{}\t{}", seq.utt_id, seq.speaker_id, text)?;
    }
    Ok(())
}

/// Reads a corpus file back into sequences (frame length is not stored in
/// the file; pass the one it was encoded at).
pub fn read_facs_corpus<R: BufRead>(
    r: R,
    vocab: &Vocabulary,
    frame_ms: u32,
) -> Result<Vec<FacsSequence>, FacsError> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(utt_id), Some(speaker), Some(text)) =
            (parts.next(), parts.next(), parts.next())
        else {
            return Err(FacsError::CorpusFormat {
                line: lineno + 1,
                reason: "expected utt_id<TAB>speaker<TAB>facs".to_string(),
            });
        };
        out.push(facs_from_string(text, vocab, frame_ms, utt_id, speaker)?);
    }
    Ok(out)
}
