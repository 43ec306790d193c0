//! Greedy and beam-search decoding over any autoregressive step model.
//!
//! Scores are cumulative log-probabilities with no length normalization.
//! A hypothesis is finished once it emits END or reaches `max_len` generated
//! tokens. Ties are broken toward the lexicographically smaller token prefix,
//! so greedy picks the lowest id among equal maxima.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::text::{END_ID, START_ID};

/// Autoregressive model: feed one token, get the next-token log-probabilities.
pub trait StepModel {
    type State: Clone;

    fn initial(&self) -> Result<Self::State>;

    fn step(&self, state: &Self::State, token: usize) -> Result<(Self::State, Vec<f64>)>;
}

/// A decoded hypothesis. `tokens` excludes START and includes END if emitted.
#[derive(Clone, Debug, PartialEq)]
pub struct Beam {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Beam {
    /// Generated words without the trailing END.
    pub fn words(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&END_ID) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn better(a: &Beam, b: &Beam) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens))
}

fn argmax(logp: &[f64]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in logp.iter().enumerate() {
        if best.is_none_or(|b| v > logp[b]) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::Contract("model returned an empty distribution".into()))
}

/// Pick the most likely token at every step until END or `max_len` tokens.
pub fn greedy_decode<M: StepModel>(model: &M, max_len: usize) -> Result<Beam> {
    let mut state = model.initial()?;
    let mut token = START_ID;
    let mut beam = Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: max_len == 0,
    };
    while !beam.finished {
        let (next, logp) = model.step(&state, token)?;
        token = argmax(&logp)?;
        beam.log_prob += logp[token];
        beam.tokens.push(token);
        beam.finished = token == END_ID || beam.tokens.len() == max_len;
        state = next;
    }
    Ok(beam)
}

/// Keep the `k` best prefixes per step; return the best finished hypothesis.
pub fn beam_decode<M: StepModel>(model: &M, k: usize, max_len: usize) -> Result<Beam> {
    if k == 0 {
        return Err(Error::Contract("beam width must be at least 1".into()));
    }
    let mut beams = vec![(
        Beam {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: max_len == 0,
        },
        Some(model.initial()?),
    )];
    loop {
        if beams.iter().all(|(b, _)| b.finished) {
            break;
        }
        // (candidate, index of parent whose stepped state it continues)
        let mut candidates: Vec<(Beam, Option<usize>)> = Vec::new();
        let mut stepped = Vec::new();
        for (beam, state) in &beams {
            if beam.finished {
                candidates.push((beam.clone(), None));
                continue;
            }
            let state = state.as_ref().expect("live beam has state");
            let token = beam.tokens.last().copied().unwrap_or(START_ID);
            let (next, logp) = model.step(state, token)?;
            let parent = stepped.len();
            stepped.push(next);
            for (v, &lp) in logp.iter().enumerate() {
                let mut tokens = beam.tokens.clone();
                tokens.push(v);
                let finished = v == END_ID || tokens.len() == max_len;
                candidates.push((
                    Beam {
                        tokens,
                        log_prob: beam.log_prob + lp,
                        finished,
                    },
                    Some(parent),
                ));
            }
        }
        candidates.sort_by(|a, b| better(&a.0, &b.0));
        candidates.truncate(k);
        beams = candidates
            .into_iter()
            .map(|(b, parent)| {
                let state = if b.finished { None } else { parent.map(|p| stepped[p].clone()) };
                (b, state)
            })
            .collect();
    }
    Ok(beams.into_iter().map(|(b, _)| b).min_by(better).expect("k >= 1"))
}

/// Greedy for `k == 1`, beam search otherwise.
pub fn decode<M: StepModel>(model: &M, k: usize, max_len: usize) -> Result<Beam> {
    if k == 1 {
        greedy_decode(model, max_len)
    } else {
        beam_decode(model, k, max_len)
    }
}
