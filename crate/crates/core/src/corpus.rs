//! Dialogue sessions, vocabulary, verb lexicon and batch assembly.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const UNK_VERB: &str = "[UNK-VERB]";

pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const PAD_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const NUM_RESERVED: usize = 4;

const DEFAULT_VERBS: &str = include_str!("../data/verbs.txt");

/// Whitespace tokenization with lowercasing.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueSession {
    pub id: String,
    pub utterances: Vec<Vec<String>>,
}

impl DialogueSession {
    /// Builds a session from raw utterance strings, applying tokenization and
    /// the history/length truncation rules of `cfg`.
    pub fn from_texts(id: impl Into<String>, texts: &[&str], cfg: &ModelConfig) -> Result<Self> {
        let id = id.into();
        let utterances = texts.iter().map(|t| tokenize(t)).collect();
        let mut session = DialogueSession { id, utterances };
        session.truncate(cfg.max_utterances(), cfg.max_utterance_len);
        session.validate()?;
        Ok(session)
    }

    /// Keeps the most recent `max_utts` utterances and the first `max_len`
    /// tokens of each.
    pub fn truncate(&mut self, max_utts: usize, max_len: usize) {
        if self.utterances.len() > max_utts {
            let drop = self.utterances.len() - max_utts;
            self.utterances.drain(..drop);
        }
        for u in &mut self.utterances {
            u.truncate(max_len);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.utterances.len() < 2 {
            return Err(Error::InvalidSession {
                id: self.id.clone(),
                msg: format!("needs at least 2 utterances, has {}", self.utterances.len()),
            });
        }
        if let Some(t) = self.utterances.iter().position(Vec::is_empty) {
            return Err(Error::InvalidSession {
                id: self.id.clone(),
                msg: format!("utterance {t} is empty"),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// The first `n` utterances as a new session with the same id.
    pub fn prefix(&self, n: usize) -> DialogueSession {
        DialogueSession {
            id: self.id.clone(),
            utterances: self.utterances[..n.min(self.utterances.len())].to_vec(),
        }
    }

    pub fn utterance_text(&self, t: usize) -> String {
        self.utterances[t].join(" ")
    }
}

#[derive(Deserialize)]
struct SessionRecord {
    id: String,
    utterances: Vec<String>,
}

/// Reads a JSONL corpus (`{"id": str, "utterances": [str, ...]}` per line).
pub fn load_sessions(path: &Path, cfg: &ModelConfig) -> Result<Vec<DialogueSession>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_sessions(std::io::BufReader::new(file), cfg)
}

pub fn read_sessions<R: BufRead>(reader: R, cfg: &ModelConfig) -> Result<Vec<DialogueSession>> {
    let mut sessions = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let record: SessionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if record.utterances.len() < 2 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!(
                    "session `{}` has {} utterance(s), need at least 2",
                    record.id,
                    record.utterances.len()
                ),
            });
        }
        let texts: Vec<&str> = record.utterances.iter().map(String::as_str).collect();
        let session = DialogueSession::from_texts(record.id, &texts, cfg).map_err(|e| {
            Error::Parse {
                line: lineno,
                msg: e.to_string(),
            }
        })?;
        sessions.push(session);
    }
    if sessions.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(sessions)
}

pub fn write_sessions(path: &Path, sessions: &[DialogueSession]) -> Result<()> {
    let mut out = String::new();
    for s in sessions {
        let texts: Vec<String> = s.utterances.iter().map(|u| u.join(" ")).collect();
        out.push_str(&serde_json::to_string(&serde_json::json!({
            "id": s.id,
            "utterances": texts,
        }))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        for (tok, id) in [(BOS, BOS_ID), (EOS, EOS_ID), (PAD, PAD_ID), (UNK, UNK_ID)] {
            if index.get(tok) != Some(&id) {
                return Err(Error::Config(format!("reserved token {tok} must have id {id}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(UNK)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_RESERVED && id != UNK_ID
    }

    /// Decodes ids to tokens, dropping [BOS]/[EOS]/[PAD].
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| !Self::is_special(id))
            .map(|&id| self.token(id).to_string())
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Frequency-ranked vocabulary; ties break lexicographically and the four
/// reserved tokens always take ids 0..4.
pub fn build_vocab(sessions: &[DialogueSession], max_size: usize) -> Result<Vocabulary> {
    if max_size <= NUM_RESERVED {
        return Err(Error::Config(format!(
            "vocabulary size {max_size} must exceed the {NUM_RESERVED} reserved tokens"
        )));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in sessions {
        for tok in s.utterances.iter().flatten() {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    let reserved = [BOS, EOS, PAD, UNK];
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, _)| !reserved.contains(t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens: Vec<String> = reserved.iter().map(|s| s.to_string()).collect();
    tokens.extend(
        ranked
            .into_iter()
            .take(max_size - NUM_RESERVED)
            .map(|(t, _)| t.to_string()),
    );
    Vocabulary::from_tokens(tokens)
}

/// A session laid out as `[BOS] u_1 [EOS] u_2 [EOS] ... u_n [EOS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConcatSession {
    pub ids: Vec<u32>,
    /// Half-open `[start, end)` per utterance, covering its tokens and the
    /// terminating [EOS].
    pub spans: Vec<(usize, usize)>,
}

pub fn concat_session(session: &DialogueSession, vocab: &Vocabulary) -> ConcatSession {
    let mut ids = vec![BOS_ID];
    let mut spans = Vec::with_capacity(session.utterances.len());
    for u in &session.utterances {
        let start = ids.len();
        ids.extend(u.iter().map(|t| vocab.id(t)));
        ids.push(EOS_ID);
        spans.push((start, ids.len()));
    }
    ConcatSession { ids, spans }
}

#[derive(Debug, Clone)]
pub struct VerbLexicon {
    words: HashSet<String>,
}

impl VerbLexicon {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let words: HashSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().trim().to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            return Err(Error::Config("verb lexicon is empty".into()));
        }
        Ok(VerbLexicon { words })
    }

    /// The lexicon shipped with the crate.
    pub fn builtin() -> Self {
        Self::new(DEFAULT_VERBS.lines()).expect("builtin lexicon is non-empty")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines())
    }

    pub fn contains(&self, token: &str) -> bool {
        if self.words.contains(token) {
            return true;
        }
        let lower = token.to_lowercase();
        lower != token && self.words.contains(&lower)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }
}

/// δ_{t,i}: one row per utterance, one entry per token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerbMask {
    pub rows: Vec<Vec<u8>>,
}

pub fn mark_verbs(session: &DialogueSession, lexicon: &VerbLexicon) -> VerbMask {
    let rows = session
        .utterances
        .iter()
        .map(|u| {
            u.iter()
                .map(|tok| {
                    let special = matches!(tok.as_str(), BOS | EOS | PAD | UNK);
                    u8::from(!special && lexicon.contains(tok))
                })
                .collect()
        })
        .collect();
    VerbMask { rows }
}

/// Output classes for verb restoration: lexicon entries that occur in the
/// corpus vocabulary, plus [UNK-VERB] at index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerbVocab {
    classes: Vec<String>,
    index: HashMap<String, usize>,
}

impl VerbVocab {
    pub fn build(lexicon: &VerbLexicon, vocab: &Vocabulary) -> Self {
        let mut verbs: Vec<&str> = vocab
            .tokens()
            .iter()
            .skip(NUM_RESERVED)
            .map(String::as_str)
            .filter(|t| lexicon.contains(t))
            .collect();
        verbs.sort_unstable();
        let mut classes = vec![UNK_VERB.to_string()];
        classes.extend(verbs.into_iter().map(str::to_string));
        Self::from_classes(classes)
    }

    fn from_classes(classes: Vec<String>) -> Self {
        let index = classes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        VerbVocab { classes, index }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.classes.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let classes: Vec<String> = text.lines().map(str::to_string).collect();
        if classes.first().map(String::as_str) != Some(UNK_VERB) {
            return Err(Error::Config(format!("verb vocabulary must start with {UNK_VERB}")));
        }
        Ok(Self::from_classes(classes))
    }
}

/// Same utterances under a uniformly drawn non-identity permutation.
pub fn shuffle_session<R: Rng + ?Sized>(session: &DialogueSession, rng: &mut R) -> DialogueSession {
    let n = session.utterances.len();
    let mut order: Vec<usize> = (0..n).collect();
    if n >= 2 {
        loop {
            order.shuffle(rng);
            if order.iter().enumerate().any(|(i, &j)| i != j) {
                break;
            }
        }
    }
    DialogueSession {
        id: session.id.clone(),
        utterances: order.iter().map(|&j| session.utterances[j].clone()).collect(),
    }
}

/// Uniform draw among sessions whose id differs from the anchor's.
pub fn sample_negative<'a, R: Rng + ?Sized>(
    corpus: &'a [DialogueSession],
    anchor: &DialogueSession,
    rng: &mut R,
) -> Result<&'a DialogueSession> {
    if corpus.len() < 2 {
        return Err(Error::InsufficientNegatives(corpus.len()));
    }
    let candidates: Vec<&DialogueSession> = corpus.iter().filter(|s| s.id != anchor.id).collect();
    candidates
        .choose(rng)
        .copied()
        .ok_or(Error::InsufficientNegatives(1))
}

/// A padded minibatch of concatenated sessions. Token-major buffers are laid
/// out row by row, `batch × max_len`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub max_len: usize,
    pub lengths: Vec<usize>,
    pub spans: Vec<Vec<(usize, usize)>>,
    /// 1 for real tokens, 0 for padding.
    pub attention: Vec<u8>,
    /// δ per position; 0 on special tokens and padding.
    pub verb_mask: Vec<u8>,
    /// Verb class per position (meaningful only where `verb_mask` is 1).
    pub verb_class: Vec<u32>,
    pub session_ids: Vec<String>,
}

impl Batch {
    pub fn collate(
        sessions: &[&DialogueSession],
        vocab: &Vocabulary,
        lexicon: &VerbLexicon,
        verbs: &VerbVocab,
    ) -> Batch {
        let concat: Vec<ConcatSession> = sessions.iter().map(|s| concat_session(s, vocab)).collect();
        let max_len = concat.iter().map(|c| c.ids.len()).max().unwrap_or(0);
        let b = sessions.len();
        let mut ids = vec![PAD_ID; b * max_len];
        let mut attention = vec![0u8; b * max_len];
        let mut verb_mask = vec![0u8; b * max_len];
        let mut verb_class = vec![0u32; b * max_len];
        for (row, (c, s)) in concat.iter().zip(sessions).enumerate() {
            let base = row * max_len;
            ids[base..base + c.ids.len()].copy_from_slice(&c.ids);
            attention[base..base + c.ids.len()].fill(1);
            let mask = mark_verbs(s, lexicon);
            for (t, (&(start, _), toks)) in c.spans.iter().zip(&s.utterances).enumerate() {
                for (i, tok) in toks.iter().enumerate() {
                    if mask.rows[t][i] == 1 {
                        verb_mask[base + start + i] = 1;
                        verb_class[base + start + i] = verbs.class(tok) as u32;
                    }
                }
            }
        }
        Batch {
            ids,
            batch: b,
            max_len,
            lengths: concat.iter().map(|c| c.ids.len()).collect(),
            spans: concat.into_iter().map(|c| c.spans).collect(),
            attention,
            verb_mask,
            verb_class,
            session_ids: sessions.iter().map(|s| s.id.clone()).collect(),
        }
    }

    pub fn max_utterances(&self) -> usize {
        self.spans.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn num_utterances(&self, row: usize) -> usize {
        self.spans[row].len()
    }

    pub fn row(&self, row: usize) -> &[u32] {
        &self.ids[row * self.max_len..row * self.max_len + self.lengths[row]]
    }
}
