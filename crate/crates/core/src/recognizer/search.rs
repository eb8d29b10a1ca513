//! Greedy and beam decoding over any step-wise model.

use std::cmp::Ordering;

use crate::nn::{ModelError, Result};

/// A model that yields next-token log-probabilities one step at a time.
pub trait StepModel {
    type State: Clone;

    fn initial(&self) -> Self::State;

    /// Log-probabilities over the vocabulary after feeding `token`.
    fn step(&self, state: &Self::State, token: usize) -> Result<(Vec<f64>, Self::State)>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchConfig {
    pub beam_size: usize,
    /// Maximum emitted tokens, the end token included.
    pub max_len: usize,
    pub start: usize,
    pub end: usize,
    /// Ids never emitted.
    pub banned: Vec<usize>,
}

impl SearchConfig {
    pub fn new(beam_size: usize, max_len: usize, start: usize, end: usize) -> Self {
        Self { beam_size, max_len, start, end, banned: Vec::new() }
    }

    pub fn with_banned(mut self, banned: Vec<usize>) -> Self {
        self.banned = banned;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// Starts with the start token.
    pub tokens: Vec<usize>,
    /// Sum of per-step log-probabilities.
    pub log_prob: f64,
    /// Whether the last token is the end token.
    pub finished: bool,
}

impl BeamHypothesis {
    /// Tokens without the start and end markers.
    pub fn body(&self) -> &[usize] {
        let end = if self.finished { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }
}

/// Higher score first, then lexicographically smaller ids.
fn rank(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens))
}

fn allowed(cfg: &SearchConfig, lp: &[f64]) -> Vec<usize> {
    (0..lp.len()).filter(|t| !cfg.banned.contains(t)).collect()
}

/// Arg-max decoding; ties go to the lowest id.
pub fn greedy<M: StepModel>(model: &M, cfg: &SearchConfig) -> Result<BeamHypothesis> {
    let mut hyp = BeamHypothesis { tokens: vec![cfg.start], log_prob: 0.0, finished: false };
    let mut state = model.initial();
    for _ in 0..cfg.max_len {
        let (lp, next) = model.step(&state, *hyp.tokens.last().expect("start token"))?;
        let mut best: Option<usize> = None;
        for t in allowed(cfg, &lp) {
            if best.is_none_or(|b| lp[t] > lp[b]) {
                best = Some(t);
            }
        }
        let t = best.ok_or_else(|| ModelError::Config("every token is banned".into()))?;
        hyp.tokens.push(t);
        hyp.log_prob += lp[t];
        state = next;
        if t == cfg.end {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Beam search with un-normalized log-probability scores.
///
/// The greedy hypothesis is kept as an incumbent, so the result never scores
/// below greedy. If nothing finishes within `max_len`, the best unfinished
/// hypothesis is returned with `finished == false`.
pub fn beam_search<M: StepModel>(model: &M, cfg: &SearchConfig) -> Result<BeamHypothesis> {
    if cfg.beam_size == 0 {
        return Err(ModelError::Config("beam_size must be at least 1".into()));
    }
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    if cfg.beam_size > 1 {
        let g = greedy(model, cfg)?;
        if g.finished {
            finished.push(g);
        }
    }
    let mut alive = vec![(BeamHypothesis { tokens: vec![cfg.start], log_prob: 0.0, finished: false }, model.initial())];
    let mut last_alive = Vec::new();
    for _ in 0..cfg.max_len {
        let mut candidates: Vec<(BeamHypothesis, usize)> = Vec::new();
        let mut states = Vec::with_capacity(alive.len());
        for (i, (hyp, state)) in alive.iter().enumerate() {
            let (lp, next) = model.step(state, *hyp.tokens.last().expect("start token"))?;
            states.push(next);
            for t in allowed(cfg, &lp) {
                let mut tokens = hyp.tokens.clone();
                tokens.push(t);
                let cand = BeamHypothesis { tokens, log_prob: hyp.log_prob + lp[t], finished: t == cfg.end };
                candidates.push((cand, i));
            }
        }
        candidates.sort_by(|a, b| rank(&a.0, &b.0));
        candidates.truncate(cfg.beam_size);
        let mut next_alive = Vec::new();
        for (cand, parent) in candidates {
            if cand.finished {
                finished.push(cand);
            } else {
                next_alive.push((cand, states[parent].clone()));
            }
        }
        if next_alive.is_empty() {
            break;
        }
        last_alive = next_alive.iter().map(|(h, _)| h.clone()).collect();
        alive = next_alive;
        // scores never increase, so a worse live beam cannot overtake
        let best_finished = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if alive.iter().all(|(h, _)| h.log_prob < best_finished) {
            break;
        }
    }
    finished.sort_by(rank);
    if let Some(best) = finished.into_iter().next() {
        return Ok(best);
    }
    last_alive.sort_by(rank);
    last_alive.into_iter().next().ok_or_else(|| ModelError::Config("search produced no hypothesis".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed next-token table keyed by the previous token.
    struct Bigram(Vec<Vec<f64>>);

    impl StepModel for Bigram {
        type State = ();

        fn initial(&self) {}

        fn step(&self, _: &(), token: usize) -> Result<(Vec<f64>, ())> {
            Ok((self.0[token].iter().map(|p: &f64| p.ln()).collect(), ()))
        }
    }

    #[test]
    fn beam_beats_greedy_on_garden_path() {
        // token 0 = start, 1 = end; greedy takes 2 then is forced into a bad tail
        let m = Bigram(vec![vec![0.0, 0.0, 0.6, 0.4], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.3, 0.35, 0.35], vec![0.0, 1.0, 0.0, 0.0]]);
        let cfg = SearchConfig::new(3, 5, 0, 1);
        let g = greedy(&m, &cfg).unwrap();
        let b = beam_search(&m, &cfg).unwrap();
        assert!(b.finished);
        assert_eq!(b.tokens, vec![0, 3, 1]);
        assert!(b.log_prob >= g.log_prob);
        assert_eq!(b.body(), &[3]);
    }

    #[test]
    fn unfinished_result_is_flagged() {
        let m = Bigram(vec![vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let out = beam_search(&m, &SearchConfig::new(2, 4, 0, 1)).unwrap();
        assert!(!out.finished);
        assert_eq!(out.tokens, vec![0, 2, 2, 2, 2]);
    }
}
