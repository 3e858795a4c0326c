//! Beam search with repeated n-gram blocking over any step-wise scorer.

use crate::error::Result;

/// Supplies next-token log-probabilities for a batch of hypotheses.
pub trait StepScorer {
    type State: Clone;

    fn initial_state(&mut self) -> Result<Self::State>;

    /// For every `(prefix, state)` return the next-token log-probabilities and the advanced state.
    /// `-inf` entries are never expanded.
    fn step(&mut self, hyps: &[(&[u32], &Self::State)]) -> Result<Vec<(Vec<f64>, Self::State)>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Block hypotheses that repeat an n-gram of this order; 0 disables blocking.
    pub block_n: usize,
    /// Maximum hypothesis length including the leading BOS.
    pub max_len: usize,
    pub bos: u32,
    pub eos: u32,
}

#[derive(Clone, Debug)]
pub struct BeamHypothesis<S> {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub finished: bool,
    pub state: S,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    /// Generated tokens without BOS and EOS.
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub finished: bool,
}

/// True if appending `next` to `prefix` recreates an n-gram already in `prefix`.
pub fn would_repeat(prefix: &[u32], next: u32, n: usize) -> bool {
    if n == 0 || prefix.len() + 1 < n {
        return false;
    }
    let tail = &prefix[prefix.len() + 1 - n..];
    prefix
        .windows(n)
        .any(|w| w[..n - 1] == *tail && w[n - 1] == next)
}

/// True if any n-gram occurs twice in `tokens`.
pub fn has_repeated_ngram(tokens: &[u32], n: usize) -> bool {
    (0..tokens.len()).any(|i| would_repeat(&tokens[..i], tokens[i], n))
}

struct Candidate {
    /// Beam index for carried hypotheses, active slot for expansions.
    parent: usize,
    token: Option<u32>,
    logprob: f64,
}

fn best<S>(hyps: &[BeamHypothesis<S>], finished: bool) -> Option<&BeamHypothesis<S>> {
    hyps.iter()
        .filter(|h| h.finished == finished)
        .fold(None, |acc: Option<&BeamHypothesis<S>>, h| match acc {
            Some(a) if a.logprob >= h.logprob => Some(a),
            _ => Some(h),
        })
}

fn result<S>(h: &BeamHypothesis<S>, eos: u32) -> BeamResult {
    let mut tokens = h.tokens[1..].to_vec();
    if tokens.last() == Some(&eos) {
        tokens.pop();
    }
    BeamResult {
        tokens,
        logprob: h.logprob,
        finished: h.finished,
    }
}

/// Highest-scoring finished hypothesis by raw cumulative log-probability.
///
/// Finished hypotheses stay in the beam and compete with live expansions. When every
/// expansion is blocked the best unfinished hypothesis is returned with a warning.
pub fn beam_search<T: StepScorer>(scorer: &mut T, cfg: &BeamConfig) -> Result<BeamResult> {
    assert!(cfg.beam >= 1 && cfg.max_len >= 2);
    let mut beams = vec![BeamHypothesis {
        tokens: vec![cfg.bos],
        logprob: 0.0,
        finished: false,
        state: scorer.initial_state()?,
    }];
    loop {
        let active: Vec<usize> = (0..beams.len()).filter(|&i| !beams[i].finished).collect();
        if active.is_empty() {
            break;
        }
        let inputs: Vec<(&[u32], &T::State)> = active
            .iter()
            .map(|&i| (beams[i].tokens.as_slice(), &beams[i].state))
            .collect();
        let outputs = scorer.step(&inputs)?;

        let mut cands: Vec<Candidate> = beams
            .iter()
            .enumerate()
            .filter(|(_, h)| h.finished)
            .map(|(i, h)| Candidate {
                parent: i,
                token: None,
                logprob: h.logprob,
            })
            .collect();
        for (slot, &i) in active.iter().enumerate() {
            let h = &beams[i];
            for (t, &lp) in outputs[slot].0.iter().enumerate() {
                let t = t as u32;
                if lp == f64::NEG_INFINITY || lp.is_nan() || would_repeat(&h.tokens, t, cfg.block_n) {
                    continue;
                }
                cands.push(Candidate {
                    parent: slot,
                    token: Some(t),
                    logprob: h.logprob + lp,
                });
            }
        }
        if cands.is_empty() {
            break;
        }
        // stable: ties keep finished-first, then parent order, then token order
        cands.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
        cands.truncate(cfg.beam);

        let mut next = Vec::with_capacity(cands.len());
        for c in cands {
            match c.token {
                None => next.push(beams[c.parent].clone()),
                Some(t) => {
                    let parent = &beams[active[c.parent]];
                    let mut tokens = parent.tokens.clone();
                    tokens.push(t);
                    let finished = t == cfg.eos || tokens.len() >= cfg.max_len;
                    next.push(BeamHypothesis {
                        tokens,
                        logprob: c.logprob,
                        finished,
                        state: outputs[c.parent].1.clone(),
                    });
                }
            }
        }
        beams = next;
    }
    if let Some(h) = best(&beams, true) {
        return Ok(result(h, cfg.eos));
    }
    log::warn!("beam search ended without a finished hypothesis; returning the best partial one");
    let h = best(&beams, false).expect("beam is never empty");
    Ok(result(h, cfg.eos))
}
