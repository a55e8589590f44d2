//! Word-level corpora, vocabularies and masking policies.

use crate::error::{CoreError, Result};
use dgmr_tensor::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const BOS: usize = 3;
pub const EOS: usize = 4;
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[MASK]", "[BOS]", "[EOS]"];
pub const NUM_RESERVED: usize = RESERVED.len();

const STOPWORDS_EN: &str = include_str!("../assets/stopwords_en.txt");

pub type Sentence = Vec<String>;

pub fn is_reserved(id: usize) -> bool {
    id < NUM_RESERVED
}

/// Lowercases and splits on whitespace.
pub fn tokenize(line: &str) -> Sentence {
    line.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// One sentence per non-empty line; LF and CRLF are equivalent.
pub fn parse_corpus(text: &str) -> Vec<Sentence> {
    text.lines().map(tokenize).filter(|s| !s.is_empty()).collect()
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let text = String::from_utf8(bytes)
        .map_err(|e| CoreError::Format(format!("{}: invalid utf-8 at byte {}", path.display(), e.utf8_error().valid_up_to())))?;
    Ok(parse_corpus(&text))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens first, then tokens with count >= `min_freq` ordered by
    /// count descending, ties lexicographic.
    pub fn build(corpus: &[Sentence], min_freq: usize) -> Result<Self> {
        if corpus.iter().all(|s| s.is_empty()) {
            return Err(CoreError::Empty("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in corpus {
            for t in s {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_tokens(
            RESERVED
                .iter()
                .map(|s| s.to_string())
                .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
                .collect(),
        )
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_RESERVED || tokens[..NUM_RESERVED].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(CoreError::Format("vocabulary does not start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CoreError::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<usize> {
        sentence.iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Sentence {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(String::from).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// The bundled English stopword list.
pub fn stopword_list() -> Vec<&'static str> {
    STOPWORDS_EN.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

/// Stopword ids present in `vocab`.
pub fn stopwords(vocab: &Vocab) -> HashSet<usize> {
    stopword_list().into_iter().filter_map(|w| vocab.id(w)).collect()
}

pub fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| c.is_ascii_punctuation())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Low,
    Medium,
    High,
    Multi30kA,
    Multi30kB,
    Disrupted,
}

impl std::str::FromStr for PolicyKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "low" => PolicyKind::Low,
            "medium" => PolicyKind::Medium,
            "high" => PolicyKind::High,
            "multi30k_a" => PolicyKind::Multi30kA,
            "multi30k_b" => PolicyKind::Multi30kB,
            "disrupted" => PolicyKind::Disrupted,
            _ => return Err(CoreError::Config(format!("unknown masking policy {s:?}"))),
        })
    }
}

/// `prob` is the sentence-selection probability for low, multi30k_a and
/// disrupted, and the per-token probability otherwise. `cascade[i]` is the
/// probability of one more mask given the previous one was placed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPolicy {
    pub kind: PolicyKind,
    pub prob: f64,
    #[serde(default)]
    pub cascade: Vec<f64>,
}

impl MaskPolicy {
    pub fn low() -> Self {
        Self {
            kind: PolicyKind::Low,
            prob: 0.4,
            cascade: vec![],
        }
    }

    /// Low selection with up to three cascaded masks.
    pub fn low_cascaded() -> Self {
        Self {
            cascade: vec![0.8, 0.8],
            ..Self::low()
        }
    }

    pub fn medium() -> Self {
        Self {
            kind: PolicyKind::Medium,
            prob: 0.4,
            cascade: vec![],
        }
    }

    pub fn high() -> Self {
        Self {
            kind: PolicyKind::High,
            prob: 0.6,
            cascade: vec![],
        }
    }

    pub fn multi30k_a() -> Self {
        Self {
            kind: PolicyKind::Multi30kA,
            prob: 0.8,
            cascade: vec![0.8, 0.8],
        }
    }

    pub fn multi30k_b() -> Self {
        Self {
            kind: PolicyKind::Multi30kB,
            prob: 0.6,
            cascade: vec![],
        }
    }

    pub fn disrupted() -> Self {
        Self {
            kind: PolicyKind::Disrupted,
            prob: 0.4,
            cascade: vec![],
        }
    }

    pub fn for_kind(kind: PolicyKind) -> Self {
        match kind {
            PolicyKind::Low => Self::low(),
            PolicyKind::Medium => Self::medium(),
            PolicyKind::High => Self::high(),
            PolicyKind::Multi30kA => Self::multi30k_a(),
            PolicyKind::Multi30kB => Self::multi30k_b(),
            PolicyKind::Disrupted => Self::disrupted(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for &p in std::iter::once(&self.prob).chain(&self.cascade) {
            if !(0.0..=1.0).contains(&p) {
                return Err(CoreError::Config(format!("policy probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn per_sentence(&self) -> bool {
        matches!(self.kind, PolicyKind::Low | PolicyKind::Multi30kA | PolicyKind::Disrupted)
    }
}

/// Source of uniform draws for masking.
pub trait UniformSource {
    /// Uniform in `[0, 1)`.
    fn next_unit(&mut self) -> f64;

    /// Uniform in `0..n`, `n > 0`.
    fn next_below(&mut self, n: usize) -> usize {
        ((self.next_unit() * n as f64) as usize).min(n - 1)
    }
}

impl UniformSource for Rng {
    fn next_unit(&mut self) -> f64 {
        self.uniform()
    }

    fn next_below(&mut self, n: usize) -> usize {
        self.below(n)
    }
}

/// Vocabulary facts a policy needs.
#[derive(Clone, Debug)]
pub struct MaskContext {
    pub stopwords: HashSet<usize>,
    pub punctuation: HashSet<usize>,
    pub vocab_size: usize,
}

impl MaskContext {
    pub fn new(vocab: &Vocab) -> Self {
        Self {
            stopwords: stopwords(vocab),
            punctuation: (NUM_RESERVED..vocab.len())
                .filter(|&i| is_punctuation(vocab.token(i)))
                .collect(),
            vocab_size: vocab.len(),
        }
    }

    fn meaningful(&self, id: usize) -> bool {
        !is_reserved(id) && !self.stopwords.contains(&id) && !self.punctuation.contains(&id)
    }
}

/// Returns the masked sentence and the sorted masked positions.
pub fn apply_policy(
    ids: &[usize],
    policy: &MaskPolicy,
    ctx: &MaskContext,
    src: &mut impl UniformSource,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if ids.is_empty() {
        return Err(CoreError::Empty("cannot mask an empty sentence".into()));
    }
    policy.validate()?;
    let mut positions = Vec::new();
    if policy.per_sentence() {
        let selected = src.next_unit() < policy.prob;
        let mut candidates: Vec<usize> = (0..ids.len()).filter(|&i| ctx.meaningful(ids[i])).collect();
        if selected && !candidates.is_empty() {
            let mut n = 1;
            for &c in &policy.cascade {
                if src.next_unit() < c {
                    n += 1;
                } else {
                    break;
                }
            }
            let n = n.min(candidates.len());
            for i in 0..n {
                let j = i + src.next_below(candidates.len() - i);
                candidates.swap(i, j);
                positions.push(candidates[i]);
            }
        }
    } else {
        for (i, &id) in ids.iter().enumerate() {
            let u = src.next_unit();
            if u < policy.prob && (id == UNK || !is_reserved(id)) {
                positions.push(i);
            }
        }
    }
    positions.sort_unstable();
    let mut masked = ids.to_vec();
    for &p in &positions {
        masked[p] = if policy.kind == PolicyKind::Disrupted {
            disrupt(ids[p], ctx.vocab_size, src)?
        } else {
            MASK
        };
    }
    Ok((masked, positions))
}

/// Uniform non-reserved id different from `original`.
fn disrupt(original: usize, vocab_size: usize, src: &mut impl UniformSource) -> Result<usize> {
    let pool = vocab_size.saturating_sub(NUM_RESERVED);
    let excl = !is_reserved(original) && original < vocab_size;
    let n = pool - usize::from(excl);
    if n == 0 {
        return Err(CoreError::Config("vocabulary too small to draw a disrupting token".into()));
    }
    let mut id = NUM_RESERVED + src.next_below(n);
    if excl && id >= original {
        id += 1;
    }
    Ok(id)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSentence {
    pub original: Vec<usize>,
    pub masked: Vec<usize>,
    pub positions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedCorpus {
    pub sentences: Vec<MaskedSentence>,
    pub policy: MaskPolicy,
    pub seed: u64,
}

impl MaskedCorpus {
    /// Each sentence gets its own derived stream `(seed, index)`.
    pub fn build(corpus: &[Vec<usize>], policy: &MaskPolicy, ctx: &MaskContext, seed: u64) -> Result<Self> {
        let sentences = crate::par::map_indexed(corpus, |i, ids| {
            let mut rng = Rng::derive(seed, i as u64);
            let (masked, positions) = apply_policy(ids, policy, ctx, &mut rng)?;
            Ok(MaskedSentence {
                original: ids.clone(),
                masked,
                positions,
            })
        })?;
        Ok(Self {
            sentences,
            policy: policy.clone(),
            seed,
        })
    }

    pub fn masked_token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.positions.len()).sum()
    }

    /// `original<TAB>masked<TAB>pos,pos,...` per line.
    pub fn to_tsv(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            let pos: Vec<String> = s.positions.iter().map(|p| p.to_string()).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                vocab.decode(&s.original).join(" "),
                vocab.decode(&s.masked).join(" "),
                pos.join(",")
            ));
        }
        out
    }

    pub fn parse_tsv(text: &str, vocab: &Vocab, policy: MaskPolicy, seed: u64) -> Result<Self> {
        let mut sentences = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(CoreError::Format(format!("masked corpus line {}: {} fields", i + 1, f.len())));
            }
            let original = vocab.encode(&tokenize(f[0]));
            let masked: Vec<usize> = f[1]
                .split_whitespace()
                .map(|t| vocab.id(t).unwrap_or(UNK))
                .collect();
            let positions = if f[2].is_empty() {
                vec![]
            } else {
                f[2].split(',')
                    .map(|p| p.parse().map_err(|_| CoreError::Format(format!("line {}: bad position {p:?}", i + 1))))
                    .collect::<Result<Vec<usize>>>()?
            };
            if masked.len() != original.len() || positions.iter().any(|&p| p >= original.len()) {
                return Err(CoreError::Format(format!("masked corpus line {}: inconsistent lengths", i + 1)));
            }
            sentences.push(MaskedSentence {
                original,
                masked,
                positions,
            });
        }
        Ok(Self {
            sentences,
            policy,
            seed,
        })
    }
}
