//! Procedural symbolic-music corpus.
//!
//! Every sequence is a run of bars. A bar is a `BAR` token followed by
//! `(duration, pitch-or-rest)` event pairs whose durations fill 16 steps.
//! The condition picks the pitch-class set (one of eight major scales), the
//! rhythm family, and a tempo class that bounds how many events a bar holds.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Token layout shared by the corpus, the model, and the decoder.
pub mod vocab {
    /// Pitch tokens `0..48`: four octaves, pitch class is `id % 12`.
    pub const PITCHES: u32 = 48;
    pub const BAR: u32 = 48;
    pub const REST: u32 = 49;
    /// Duration tokens `50..56`, in steps.
    pub const DUR_BASE: u32 = 50;
    pub const DURATIONS: [u32; 6] = [1, 2, 3, 4, 6, 8];
    pub const SCALE_BASE: u32 = 56;
    pub const TEMPO_BASE: u32 = 64;
    pub const PATTERN_BASE: u32 = 67;
    /// Null condition; also the start symbol fed to the decoder.
    pub const NULL: u32 = 71;
    pub const START: u32 = NULL;
    pub const SIZE: usize = 72;

    /// Condition-encoder vocabulary: 8 scales, 3 tempos, 4 patterns, null.
    pub const COND_SIZE: usize = 16;
    pub const COND_NULL: usize = 15;

    pub const STEPS_PER_BAR: u32 = 16;

    pub fn is_pitch(tok: u32) -> bool {
        tok < PITCHES
    }

    pub fn duration_of(tok: u32) -> Option<u32> {
        tok.checked_sub(DUR_BASE)
            .and_then(|i| DURATIONS.get(i as usize).copied())
    }

    pub fn duration_token(steps: u32) -> Option<u32> {
        DURATIONS
            .iter()
            .position(|&d| d == steps)
            .map(|i| DUR_BASE + i as u32)
    }
}

const MAJOR_STEPS: [u32; 7] = [0, 2, 4, 5, 7, 9, 11];
const SCALE_ROOTS: [u32; 8] = [0, 7, 2, 9, 4, 5, 10, 3];
const REST_PROB: f64 = 0.1;

/// Events per bar allowed for each tempo class.
pub const DENSITY_BOUNDS: [(usize, usize); 3] = [(2, 4), (4, 8), (8, 12)];

/// `TEMPLATES[family][tempo]` holds two bar layouts (durations in steps).
const TEMPLATES: [[[&[u32]; 2]; 3]; 4] = [
    [
        [&[8, 8], &[4, 4, 8]],
        [&[4, 4, 4, 4], &[2, 2, 4, 4, 4]],
        [&[2, 2, 2, 2, 2, 2, 2, 2], &[1, 1, 2, 2, 2, 2, 2, 2, 2]],
    ],
    [
        [&[6, 6, 4], &[3, 3, 6, 4]],
        [&[3, 3, 2, 3, 3, 2], &[3, 3, 4, 3, 3]],
        [&[1, 2, 1, 2, 1, 2, 1, 2, 1, 2, 1], &[2, 1, 1, 2, 1, 1, 2, 1, 1, 2, 1, 1]],
    ],
    [
        [&[6, 2, 8], &[6, 2, 6, 2]],
        [&[6, 2, 6, 2], &[3, 1, 3, 1, 6, 2]],
        [&[3, 1, 3, 1, 3, 1, 3, 1], &[3, 1, 1, 1, 3, 1, 3, 1, 1, 1]],
    ],
    [
        [&[8, 4, 4], &[4, 8, 4]],
        [&[8, 2, 2, 2, 2], &[4, 4, 2, 2, 4]],
        [&[4, 1, 1, 1, 1, 2, 2, 1, 1, 1, 1], &[2, 2, 1, 1, 1, 1, 2, 2, 1, 1, 1, 1]],
    ],
];

/// Onset mask of a family's reference (medium tempo) bar.
pub fn template_onsets(family: u8) -> [f64; 16] {
    let mut mask = [0.0; 16];
    let mut step = 0;
    for &d in TEMPLATES[family as usize][1][0] {
        mask[step as usize] = 1.0;
        step += d;
    }
    mask
}

/// Musical attributes a sequence is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Condition {
    pub scale_id: u8,
    pub tempo_class: u8,
    pub pattern_family: u8,
}

impl Condition {
    pub const COUNT: usize = 8 * 3 * 4;

    pub fn new(scale_id: u8, tempo_class: u8, pattern_family: u8) -> Result<Self> {
        if scale_id > 7 || tempo_class > 2 || pattern_family > 3 {
            return Err(Error::invalid(format!(
                "condition ({scale_id}, {tempo_class}, {pattern_family}) outside [0,7]x[0,2]x[0,3]"
            )));
        }
        Ok(Self { scale_id, tempo_class, pattern_family })
    }

    /// The `i`-th condition of the full grid (wraps around).
    pub fn from_index(i: usize) -> Self {
        let i = i % Self::COUNT;
        Self {
            scale_id: (i % 8) as u8,
            tempo_class: ((i / 8) % 3) as u8,
            pattern_family: (i / 24) as u8,
        }
    }

    /// Ids fed to the condition encoder.
    pub fn cond_ids(&self) -> [usize; 3] {
        [
            self.scale_id as usize,
            8 + self.tempo_class as usize,
            11 + self.pattern_family as usize,
        ]
    }

    /// Pitch classes of the conditioned scale, ascending.
    pub fn pitch_classes(&self) -> [u32; 7] {
        let root = SCALE_ROOTS[self.scale_id as usize];
        let mut pcs = MAJOR_STEPS.map(|s| (root + s) % 12);
        pcs.sort_unstable();
        pcs
    }

    pub fn in_scale(&self, pitch_token: u32) -> bool {
        self.pitch_classes().contains(&(pitch_token % 12))
    }
}

/// A token sequence together with its condition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub condition: Condition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub items: Vec<TokenSequence>,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplits {
    pub train: Corpus,
    pub validation: Corpus,
    pub test: Corpus,
}

impl CorpusSplits {
    pub fn get(&self, split: Split) -> &Corpus {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

/// Draws `n_items` conditioned sequences of `length` tokens and splits them
/// in order by `fractions` (train, validation, test).
pub fn generate_corpus(seed: u64, n_items: usize, length: usize, fractions: [f64; 3]) -> Result<CorpusSplits> {
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    if n_items < 3 {
        return Err(Error::invalid(format!("need at least 3 items, got {n_items}")));
    }
    if length == 0 {
        return Err(Error::invalid("sequence length must be positive"));
    }
    let mut n_train = ((n_items as f64 * fractions[0]).round() as usize).max(1);
    let mut n_val = ((n_items as f64 * fractions[1]).round() as usize).max(1);
    while n_train + n_val > n_items - 1 {
        if n_train >= n_val {
            n_train -= 1;
        } else {
            n_val -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items: Vec<TokenSequence> = (0..n_items)
        .map(|_| {
            let condition = Condition {
                scale_id: rng.gen_range(0..8),
                tempo_class: rng.gen_range(0..3),
                pattern_family: rng.gen_range(0..4),
            };
            sample_sequence(&mut rng, condition, length)
        })
        .collect();
    let test = items.split_off(n_train + n_val);
    let validation = items.split_off(n_train);
    let make = |items, split| Corpus { items, seed, split };
    Ok(CorpusSplits {
        train: make(items, Split::Train),
        validation: make(validation, Split::Validation),
        test: make(test, Split::Test),
    })
}

fn sample_sequence<R: Rng>(rng: &mut R, condition: Condition, length: usize) -> TokenSequence {
    let pcs = condition.pitch_classes();
    let pitches: Vec<u32> = (0..vocab::PITCHES).filter(|p| pcs.contains(&(p % 12))).collect();
    let mut cursor = rng.gen_range(7..21usize);
    let mut tokens = Vec::with_capacity(length + 24);
    while tokens.len() < length {
        tokens.push(vocab::BAR);
        let variants = &TEMPLATES[condition.pattern_family as usize][condition.tempo_class as usize];
        let bar = variants[rng.gen_range(0..2)];
        for &d in bar {
            tokens.push(vocab::duration_token(d).expect("template durations are in the vocabulary"));
            if rng.gen::<f64>() < REST_PROB {
                tokens.push(vocab::REST);
            } else {
                let step: i64 = match rng.gen_range(0..10) {
                    0 => -2,
                    1..=3 => -1,
                    4..=5 => 0,
                    6..=8 => 1,
                    _ => 2,
                };
                cursor = (cursor as i64 + step).clamp(0, pitches.len() as i64 - 1) as usize;
                tokens.push(pitches[cursor]);
            }
        }
    }
    tokens.truncate(length);
    TokenSequence { tokens, condition }
}

/// Fraction of pitch tokens that lie in the conditioned scale (0 when the
/// sequence has no pitch tokens).
pub fn condition_consistency(seq: &TokenSequence) -> f64 {
    let (mut inside, mut total) = (0usize, 0usize);
    for &tok in seq.tokens.iter().filter(|t| vocab::is_pitch(**t)) {
        total += 1;
        if seq.condition.in_scale(tok) {
            inside += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        inside as f64 / total as f64
    }
}

/// Checks the grammar: pitches in scale, every complete bar's event count
/// within its tempo class bounds.
pub fn obeys_grammar(seq: &TokenSequence) -> bool {
    if seq
        .tokens
        .iter()
        .any(|&t| vocab::is_pitch(t) && !seq.condition.in_scale(t))
    {
        return false;
    }
    if seq.tokens.first().is_some_and(|&t| t != vocab::BAR) {
        return false;
    }
    let (lo, hi) = DENSITY_BOUNDS[seq.condition.tempo_class as usize];
    let mut bars = seq.tokens.split(|&t| t == vocab::BAR).skip(1).peekable();
    while let Some(bar) = bars.next() {
        let mut steps = 0;
        let mut events = 0;
        for pair in bar.chunks(2) {
            match (vocab::duration_of(pair[0]), pair.get(1)) {
                (Some(d), Some(&x)) if vocab::is_pitch(x) || x == vocab::REST => {
                    steps += d;
                    events += 1;
                }
                // a truncated final event
                (Some(_), None) if bars.peek().is_none() => {}
                _ => return false,
            }
        }
        let complete = steps == vocab::STEPS_PER_BAR;
        if steps > vocab::STEPS_PER_BAR || (!complete && bars.peek().is_some()) {
            return false;
        }
        if complete && !(lo..=hi).contains(&events) {
            return false;
        }
    }
    true
}

const HEADER_PREFIX: &str = "tinykd-corpus v1 seed=";

/// Writes sequences in the line-delimited corpus format.
pub fn write_sequences<W: Write>(mut w: W, seed: u64, items: &[TokenSequence]) -> Result<()> {
    writeln!(w, "{HEADER_PREFIX}{seed}")?;
    for item in items {
        let c = item.condition;
        write!(w, "{} {} {} |", c.scale_id, c.tempo_class, c.pattern_family)?;
        for t in &item.tokens {
            write!(w, " {t}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Reads the line-delimited corpus format; returns the seed and sequences.
pub fn read_sequences<R: BufRead>(r: R) -> Result<(u64, Vec<TokenSequence>)> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("corpus file is empty"))??;
    let seed = header
        .strip_prefix(HEADER_PREFIX)
        .and_then(|s| s.trim().parse::<u64>().ok())
        .ok_or_else(|| Error::format(format!("bad corpus header `{header}`")))?;
    let mut items = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::format(format!("corpus line {}: {what}", lineno + 2));
        let (head, body) = line.split_once('|').ok_or_else(|| bad("missing `|`"))?;
        let fields: Vec<u8> = head
            .split_whitespace()
            .map(|f| f.parse::<u8>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad condition field"))?;
        let [s, t, p] = fields[..] else {
            return Err(bad("expected three condition fields"));
        };
        let condition = Condition::new(s, t, p).map_err(|e| bad(&e.to_string()))?;
        let tokens = body
            .split_whitespace()
            .map(|f| f.parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("bad token id"))?;
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab::SIZE) {
            return Err(bad(&format!("token {t} outside vocabulary")));
        }
        items.push(TokenSequence { tokens, condition });
    }
    Ok((seed, items))
}

impl Corpus {
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        write_sequences(w, self.seed, &self.items)
    }

    pub fn read_from<R: BufRead>(r: R, split: Split) -> Result<Self> {
        let (seed, items) = read_sequences(r)?;
        Ok(Self { items, seed, split })
    }

    /// Token counts per condition, for reproducibility checks.
    pub fn histogram(&self) -> std::collections::BTreeMap<Condition, Vec<u64>> {
        let mut out = std::collections::BTreeMap::new();
        for item in &self.items {
            let counts = out
                .entry(item.condition)
                .or_insert_with(|| vec![0u64; vocab::SIZE]);
            for &t in &item.tokens {
                counts[t as usize] += 1;
            }
        }
        out
    }
}
