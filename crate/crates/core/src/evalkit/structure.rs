//! State assignment, empirical transitions, adjusted mutual information and
//! cluster/graph export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Variant;
use crate::corpus::DialogueSession;
use crate::error::{Error, Result};
use crate::latent::argmax;
use crate::model::DialogueModel;
use crate::trainer::TrainData;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignedState {
    pub session_id: String,
    pub turn: usize,
    pub state: usize,
    pub prob: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateAssignment {
    pub num_states: usize,
    pub entries: Vec<AssignedState>,
}

impl StateAssignment {
    pub fn states(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.state).collect()
    }
}

/// Argmax (lowest index on ties) of each posterior row.
/// `posteriors[s][t]` is the distribution for turn t of session s.
pub fn assign_from_posteriors(sessions: &[DialogueSession], posteriors: &[Vec<Vec<f64>>]) -> Result<StateAssignment> {
    if sessions.len() != posteriors.len() {
        return Err(Error::Shape(format!(
            "{} sessions but {} posterior lists",
            sessions.len(),
            posteriors.len()
        )));
    }
    let num_states = posteriors.iter().flatten().map(Vec::len).next().unwrap_or(0);
    let mut entries = Vec::new();
    for (s, rows) in sessions.iter().zip(posteriors) {
        if rows.len() != s.len() {
            return Err(Error::Shape(format!("session {} has {} turns, {} posteriors", s.id, s.len(), rows.len())));
        }
        for (t, p) in rows.iter().enumerate() {
            let state = argmax(p);
            entries.push(AssignedState {
                session_id: s.id.clone(),
                turn: t,
                state,
                prob: p[state],
                text: s.utterance_text(t),
            });
        }
    }
    Ok(StateAssignment { num_states, entries })
}

/// Posterior argmax state for every utterance of `sessions`.
pub fn assign_states(
    model: &DialogueModel,
    data: &TrainData,
    sessions: &[DialogueSession],
    variant: Variant,
    batch_size: usize,
) -> Result<StateAssignment> {
    if !variant.uses_c() {
        return Err(Error::Config(format!("variant {variant} has no discrete states")));
    }
    let mut posteriors = Vec::with_capacity(sessions.len());
    for chunk in sessions.chunks(batch_size.max(1)) {
        let refs: Vec<&DialogueSession> = chunk.iter().collect();
        posteriors.extend(model.posterior_states(&data.collate(&refs))?);
    }
    assign_from_posteriors(sessions, &posteriors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub probs: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
    /// Utterances assigned to each state.
    pub occupancy: Vec<usize>,
    /// States with no outgoing transition; their rows are all zero.
    pub empty_rows: Vec<usize>,
}

/// Counts consecutive within-session state pairs and normalizes rows.
pub fn transition_matrix(assign: &StateAssignment) -> TransitionMatrix {
    let n = assign.num_states;
    let mut by_session: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    let mut occupancy = vec![0usize; n];
    for e in &assign.entries {
        by_session.entry(&e.session_id).or_default().push((e.turn, e.state));
        occupancy[e.state] += 1;
    }
    let mut counts = vec![vec![0usize; n]; n];
    for turns in by_session.values_mut() {
        turns.sort_unstable();
        for w in turns.windows(2) {
            counts[w[0].1][w[1].1] += 1;
        }
    }
    let mut empty_rows = Vec::new();
    let probs = counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                empty_rows.push(i);
                vec![0.0; n]
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            }
        })
        .collect();
    TransitionMatrix {
        probs,
        counts,
        occupancy,
        empty_rows,
    }
}

fn relabel(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Adjusted mutual information with arithmetic-mean normalization and the
/// exact hypergeometric expected MI.
pub fn adjusted_mutual_info(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} labels vs {} assignments", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("no labels".into()));
    }
    let (a, ka) = relabel(a);
    let (b, kb) = relabel(b);
    if (ka == 1 && kb == 1) || (ka == a.len() && kb == b.len()) {
        return Ok(1.0);
    }
    let n = a.len();
    let nf = n as f64;
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(&b) {
        table[x][y] += 1;
    }
    let row: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<usize> = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for (i, r) in table.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / nf * (nf * c / (row[i] as f64 * col[j] as f64)).ln();
            }
        }
    }
    let emi = expected_mutual_info(&row, &col, n);
    let h = 0.5 * (entropy(&row, nf) + entropy(&col, nf));
    let denom = h - emi;
    let denom = if denom < 0.0 {
        denom.min(-f64::EPSILON)
    } else {
        denom.max(f64::EPSILON)
    };
    Ok((mi - emi) / denom)
}

/// E[MI] under the permutation model with fixed marginals.
pub fn expected_mutual_info(row: &[usize], col: &[usize], n: usize) -> f64 {
    let mut lf = vec![0.0f64; n + 1];
    for k in 1..=n {
        lf[k] = lf[k - 1] + (k as f64).ln();
    }
    let nf = n as f64;
    let mut emi = 0.0;
    for &a in row {
        for &b in col {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            for nij in lo..=hi {
                let x = nij as f64;
                let term = x / nf * (nf * x / (a as f64 * b as f64)).ln();
                let log_p = lf[a] + lf[b] + lf[n - a] + lf[n - b]
                    - lf[n]
                    - lf[nij]
                    - lf[a - nij]
                    - lf[b - nij]
                    - lf[n + nij - a - b];
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

/// AMI between learned states and ground-truth labels, aligned by position.
pub fn structure_recovery_score(assign: &StateAssignment, labels: &[usize]) -> Result<f64> {
    adjusted_mutual_info(&assign.states(), labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMember {
    pub session_id: String,
    pub turn: usize,
    pub prob: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub state: usize,
    pub size: usize,
    pub members: Vec<ClusterMember>,
}

/// Per-state top-`k` utterances by posterior confidence, occupied states only.
pub fn clusters(assign: &StateAssignment, k: usize) -> Vec<Cluster> {
    let mut by_state: BTreeMap<usize, Vec<&AssignedState>> = BTreeMap::new();
    for e in &assign.entries {
        by_state.entry(e.state).or_default().push(e);
    }
    by_state
        .into_iter()
        .map(|(state, mut members)| {
            let size = members.len();
            members.sort_by(|x, y| {
                y.prob
                    .total_cmp(&x.prob)
                    .then_with(|| x.session_id.cmp(&y.session_id))
                    .then(x.turn.cmp(&y.turn))
            });
            Cluster {
                state,
                size,
                members: members
                    .into_iter()
                    .take(k)
                    .map(|e| ClusterMember {
                        session_id: e.session_id.clone(),
                        turn: e.turn,
                        prob: e.prob,
                        text: e.text.clone(),
                    })
                    .collect(),
            }
        })
        .collect()
}

pub fn to_dot(matrix: &TransitionMatrix) -> String {
    let mut out = String::from("digraph flow {\n");
    for (i, &occ) in matrix.occupancy.iter().enumerate() {
        if occ > 0 {
            let _ = writeln!(out, "  s{i} [label=\"{i} ({occ})\"];");
        }
    }
    for (i, row) in matrix.probs.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                let _ = writeln!(out, "  s{i} -> s{j} [label=\"{p:.3}\", weight={p:.6}];");
            }
        }
    }
    out.push_str("}\n");
    out
}

/// Writes `clusters.json` and `transitions.dot` into `dir`.
pub fn export_structure(assign: &StateAssignment, matrix: &TransitionMatrix, top_k: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(&clusters(assign, top_k))?;
    let cpath = dir.join("clusters.json");
    std::fs::write(&cpath, json).map_err(|e| Error::io(&cpath, e))?;
    let dpath = dir.join("transitions.dot");
    std::fs::write(&dpath, to_dot(matrix)).map_err(|e| Error::io(&dpath, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assignment(seqs: &[&[usize]], n: usize) -> StateAssignment {
        let mut entries = Vec::new();
        for (s, seq) in seqs.iter().enumerate() {
            for (t, &st) in seq.iter().enumerate() {
                entries.push(AssignedState {
                    session_id: format!("s{s}"),
                    turn: t,
                    state: st,
                    prob: 1.0,
                    text: String::new(),
                });
            }
        }
        StateAssignment { num_states: n, entries }
    }

    #[test]
    fn tie_breaks_low() {
        let s = DialogueSession {
            id: "x".into(),
            utterances: vec![vec!["a".into()]],
        };
        let a = assign_from_posteriors(&[s], &[vec![vec![0.5, 0.5]]]).unwrap();
        assert_eq!(a.entries[0].state, 0);
    }

    #[test]
    fn alternating_transitions() {
        let m = transition_matrix(&assignment(&[&[0, 1, 0, 1]], 2));
        assert_eq!(m.probs, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!(m.empty_rows.is_empty());
    }

    #[test]
    fn session_order_irrelevant() {
        let a = transition_matrix(&assignment(&[&[0, 1, 2], &[2, 2, 0]], 3));
        let b = transition_matrix(&assignment(&[&[2, 2, 0], &[0, 1, 2]], 3));
        assert_eq!(a, b);
    }

    #[test]
    fn ami_cases() {
        let x = [0, 0, 1, 1, 2, 2, 2];
        let y = [5, 5, 3, 3, 9, 9, 9];
        assert!((adjusted_mutual_info(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        assert!(adjusted_mutual_info(&x, &[0; 7]).unwrap().abs() < 1e-12);
        assert!(adjusted_mutual_info(&x, &[0; 6]).is_err());
    }

    #[test]
    fn dot_edges_bounded() {
        let m = transition_matrix(&assignment(&[&[0, 1, 2, 0, 2, 1]], 3));
        let dot = to_dot(&m);
        assert!(dot.matches("->").count() <= 9);
    }
}
