//! Synthetic dialogue corpora drawn from a Markov chain over latent states,
//! with ground-truth state labels.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, write_sessions, DialogueSession};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_states: usize,
    /// Row-stochastic K×K matrix; `None` draws Dirichlet(1) rows from `seed`.
    pub transition: Option<Vec<Vec<f64>>>,
    /// Distribution of the first state; uniform when absent.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    /// Utterance templates per state. `{topic}` is replaced by the session's
    /// topic word.
    pub templates: Vec<Vec<String>>,
    #[serde(default)]
    pub topics: Vec<String>,
    pub sessions: usize,
    pub turns: usize,
    pub seed: u64,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

fn default_prefix() -> String {
    "syn".into()
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Stochastic(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Stochastic(format!("{what} sums to {total}")));
    }
    Ok(())
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_states;
        if k < 2 {
            return Err(Error::Config("synthetic corpus needs at least 2 states".into()));
        }
        if let Some(t) = &self.transition {
            if t.len() != k || t.iter().any(|r| r.len() != k) {
                return Err(Error::Stochastic(format!("transition matrix must be {k}x{k}")));
            }
            for (i, row) in t.iter().enumerate() {
                check_distribution(row, &format!("transition row {i}"))?;
            }
        }
        if let Some(p) = &self.initial {
            if p.len() != k {
                return Err(Error::Stochastic(format!("initial distribution must have {k} entries")));
            }
            check_distribution(p, "initial distribution")?;
        }
        if self.templates.len() != k {
            return Err(Error::Config(format!("{} template lists for {k} states", self.templates.len())));
        }
        if let Some(s) = self.templates.iter().position(Vec::is_empty) {
            return Err(Error::Config(format!("state {s} has no templates")));
        }
        let uses_topic = self.templates.iter().flatten().any(|t| t.contains("{topic}"));
        if uses_topic && self.topics.is_empty() {
            return Err(Error::Config("templates use {topic} but no topics are given".into()));
        }
        if self.turns < 2 {
            return Err(Error::Config("sessions need at least 2 turns".into()));
        }
        Ok(())
    }

    /// The explicit matrix, or seeded Dirichlet(1) rows.
    pub fn transition_matrix(&self) -> Vec<Vec<f64>> {
        if let Some(t) = &self.transition {
            return t.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7a11);
        (0..self.num_states)
            .map(|_| {
                let raw: Vec<f64> = (0..self.num_states).map(|_| Exp1.sample(&mut rng)).collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / total).collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub sessions: Vec<DialogueSession>,
    /// Ground-truth state per utterance, parallel to `sessions`.
    pub labels: Vec<Vec<usize>>,
}

impl SynthCorpus {
    pub fn flat_labels(&self) -> Vec<usize> {
        self.labels.iter().flatten().copied().collect()
    }
}

fn weighted(p: &[f64]) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(p).map_err(|e| Error::Stochastic(e.to_string()))
}

pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let k = spec.num_states;
    let trans = spec.transition_matrix();
    let rows = trans.iter().map(|r| weighted(r)).collect::<Result<Vec<_>>>()?;
    let init = weighted(&spec.initial.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sessions = Vec::with_capacity(spec.sessions);
    let mut labels = Vec::with_capacity(spec.sessions);
    for i in 0..spec.sessions {
        let topic = if spec.topics.is_empty() {
            ""
        } else {
            &spec.topics[rand::Rng::random_range(&mut rng, 0..spec.topics.len())]
        };
        let mut state = init.sample(&mut rng);
        let mut seq = Vec::with_capacity(spec.turns);
        let mut utterances = Vec::with_capacity(spec.turns);
        for t in 0..spec.turns {
            if t > 0 {
                state = rows[state].sample(&mut rng);
            }
            let options = &spec.templates[state];
            let template = &options[rand::Rng::random_range(&mut rng, 0..options.len())];
            utterances.push(tokenize(&template.replace("{topic}", topic)));
            seq.push(state);
        }
        sessions.push(DialogueSession {
            id: format!("{}-{i:06}", spec.id_prefix),
            utterances,
        });
        labels.push(seq);
    }
    Ok(SynthCorpus { sessions, labels })
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    id: String,
    states: Vec<usize>,
}

/// Writes the corpus as JSONL sessions plus a parallel JSONL label file.
pub fn write_corpus(corpus: &SynthCorpus, sessions_path: &Path, labels_path: &Path) -> Result<()> {
    write_sessions(sessions_path, &corpus.sessions)?;
    let file = std::fs::File::create(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (s, l) in corpus.sessions.iter().zip(&corpus.labels) {
        let rec = LabelRecord {
            id: s.id.clone(),
            states: l.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w).map_err(|e| Error::io(labels_path, e))?;
    }
    w.flush().map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<HashMap<String, Vec<usize>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.insert(rec.id, rec.states);
    }
    Ok(out)
}

/// Labels for `sessions` in utterance order, keeping only the last
/// `session.len()` entries per session so history truncation lines up.
pub fn labels_for(sessions: &[DialogueSession], labels: &HashMap<String, Vec<usize>>) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for s in sessions {
        let l = labels
            .get(&s.id)
            .ok_or_else(|| Error::Config(format!("no labels for session {}", s.id)))?;
        if l.len() < s.len() {
            return Err(Error::Shape(format!("session {} has {} labels for {} turns", s.id, l.len(), s.len())));
        }
        out.extend_from_slice(&l[l.len() - s.len()..]);
    }
    Ok(out)
}

pub const DEFAULT_TRANSITION: [[f64; 4]; 4] = [
    [0.1, 0.6, 0.2, 0.1],
    [0.1, 0.1, 0.7, 0.1],
    [0.1, 0.3, 0.1, 0.5],
    [0.5, 0.2, 0.2, 0.1],
];

pub const DEFAULT_INITIAL: [f64; 4] = [0.7, 0.1, 0.1, 0.1];

const TRAVEL: [&[&str]; 4] = [
    &[
        "hello i want to travel to {topic}",
        "hi can you help me plan a trip to {topic}",
        "good morning i need a ticket to {topic}",
        "hey i would like to visit {topic}",
    ],
    &[
        "when do you want to leave",
        "how many people will travel with you",
        "do you prefer a train or a flight",
        "what is your budget for the trip",
    ],
    &[
        "i found a flight to {topic} for two hundred dollars",
        "there is a train that leaves at nine",
        "the hotel in {topic} costs eighty a night",
        "we have seats on the morning flight",
    ],
    &[
        "great please book it",
        "thanks that works for me",
        "perfect i will take it",
        "ok thank you goodbye",
    ],
];

const TRAVEL_TOPICS: [&str; 6] = ["paris", "rome", "tokyo", "lisbon", "oslo", "cairo"];

const DINING: [&[&str]; 4] = [
    &[
        "hello i want to order some {topic}",
        "hi could you find me a place that serves {topic}",
        "good evening we need a table for {topic} tonight",
        "hey i would like to eat {topic}",
    ],
    &[
        "for what time should i reserve",
        "how many guests will join you",
        "do you want to sit inside or outside",
        "would you like a drink with your meal",
    ],
    &[
        "the {topic} special costs twelve dollars",
        "there is a free table by the window at seven",
        "our chef can cook fresh {topic} tonight",
        "the kitchen stays open until ten",
    ],
    &[
        "lovely please reserve it",
        "thanks that sounds good",
        "fine we will come at seven",
        "ok thanks see you later",
    ],
];

const DINING_TOPICS: [&str; 6] = ["pizza", "sushi", "curry", "tacos", "pasta", "noodles"];

fn preset(templates: [&[&str]; 4], topics: [&str; 6], sessions: usize, turns: usize, seed: u64, prefix: &str) -> SynthSpec {
    SynthSpec {
        num_states: 4,
        transition: Some(DEFAULT_TRANSITION.iter().map(|r| r.to_vec()).collect()),
        initial: Some(DEFAULT_INITIAL.to_vec()),
        templates: templates
            .iter()
            .map(|ts| ts.iter().map(|t| t.to_string()).collect())
            .collect(),
        topics: topics.iter().map(|t| t.to_string()).collect(),
        sessions,
        turns,
        seed,
        id_prefix: prefix.into(),
    }
}

/// Four-state travel-booking domain.
pub fn domain_a(sessions: usize, turns: usize, seed: u64) -> SynthSpec {
    preset(TRAVEL, TRAVEL_TOPICS, sessions, turns, seed, "a")
}

/// Same state machine as [`domain_a`] with disjoint restaurant templates.
pub fn domain_b(sessions: usize, turns: usize, seed: u64) -> SynthSpec {
    preset(DINING, DINING_TOPICS, sessions, turns, seed, "b")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absorbing_chain_repeats_state() {
        let spec = SynthSpec {
            num_states: 2,
            transition: Some(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
            initial: None,
            templates: vec![vec!["a b".into()], vec!["c d".into()]],
            topics: vec![],
            sessions: 50,
            turns: 5,
            seed: 3,
            id_prefix: "t".into(),
        };
        let c = generate(&spec).unwrap();
        for l in &c.labels {
            assert!(l.iter().all(|&s| s == l[0]));
        }
    }

    #[test]
    fn bad_matrix_rejected() {
        let mut spec = domain_a(2, 3, 0);
        spec.transition.as_mut().unwrap()[0][0] = 0.5;
        assert!(matches!(generate(&spec), Err(Error::Stochastic(_))));
    }

    #[test]
    fn seeded_output_repeats() {
        assert_eq!(generate(&domain_b(20, 4, 9)).unwrap(), generate(&domain_b(20, 4, 9)).unwrap());
    }

    #[test]
    fn random_matrix_is_stochastic() {
        let mut spec = domain_a(2, 3, 0);
        spec.transition = None;
        for row in spec.transition_matrix() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn domains_share_no_template() {
        let a = domain_a(1, 2, 0);
        let b = domain_b(1, 2, 0);
        for (ta, tb) in a.templates.iter().zip(&b.templates) {
            assert!(ta.iter().all(|t| !tb.contains(t)));
        }
    }
}
