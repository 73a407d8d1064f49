//! Greedy, beam and multinomial decoding over any next-token model.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::adapt::{EpalmModel, Perception};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::synth::EOS;
use crate::tensor::Float;

/// Something that scores the next token given a prefix.
pub trait NextToken {
    fn vocab_size(&self) -> usize;

    /// Natural-log probabilities of every vocabulary entry.
    fn next_logprobs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam { width: usize },
    Multinomial { temperature: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    #[serde(flatten)]
    pub mode: DecodeMode,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            max_new_tokens: 8,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            DecodeMode::Beam { width: 0 } => Err(Error::Config("beam width must be at least 1".into())),
            DecodeMode::Multinomial { temperature } if !(temperature > 0.0) => {
                Err(Error::Config("temperature must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|&x| x - z).collect()
}

/// Index of the maximum; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// New tokens after `prefix`, ending with EOS unless the budget ran out.
pub fn generate(lm: &dyn NextToken, prefix: &[usize], cfg: &DecodeConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    match cfg.mode {
        DecodeMode::Greedy => greedy(lm, prefix, cfg.max_new_tokens),
        DecodeMode::Beam { width } => beam_search(lm, prefix, width, cfg.max_new_tokens),
        DecodeMode::Multinomial { temperature } => sample(lm, prefix, cfg.max_new_tokens, temperature, cfg.seed),
    }
}

pub fn greedy(lm: &dyn NextToken, prefix: &[usize], max_new_tokens: usize) -> Result<Vec<usize>> {
    let mut seq = prefix.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new_tokens {
        let tok = argmax(&lm.next_logprobs(&seq)?);
        seq.push(tok);
        out.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(out)
}

fn sample(lm: &dyn NextToken, prefix: &[usize], max_new_tokens: usize, temperature: f64, seed: u64) -> Result<Vec<usize>> {
    let mut rng = RngState::new(seed);
    let mut seq = prefix.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new_tokens {
        let scaled: Vec<f64> = lm.next_logprobs(&seq)?.iter().map(|&l| l / temperature).collect();
        let probs: Vec<f64> = log_softmax(&scaled).iter().map(|l| l.exp()).collect();
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut tok = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                tok = i;
                break;
            }
        }
        seq.push(tok);
        out.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    logprob: f64,
}

impl Hyp {
    fn score(&self) -> f64 {
        self.logprob / self.tokens.len() as f64
    }
}

/// Higher normalized score first, then lexicographically smaller tokens.
fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search with length-normalized scores. Hypotheses that emit EOS are
/// retired into a pool; the pool's best is returned, with ties going to the
/// earlier completion and then to the lexicographically smaller sequence.
pub fn beam_search(lm: &dyn NextToken, prefix: &[usize], width: usize, max_new_tokens: usize) -> Result<Vec<usize>> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        logprob: 0.0,
    }];
    // (completion step, hypothesis)
    let mut pool: Vec<(usize, Hyp)> = Vec::new();
    for step in 0..max_new_tokens {
        let mut cand = Vec::new();
        for h in &live {
            let mut seq = prefix.to_vec();
            seq.extend_from_slice(&h.tokens);
            for (tok, lp) in lm.next_logprobs(&seq)?.into_iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                cand.push(Hyp {
                    tokens,
                    logprob: h.logprob + lp,
                });
            }
        }
        cand.sort_by(rank);
        cand.truncate(width);
        live.clear();
        for h in cand {
            if h.tokens.last() == Some(&EOS) || step + 1 == max_new_tokens {
                pool.push((step, h));
            } else {
                live.push(h);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    Ok(pool
        .into_iter()
        .min_by(|(sa, a), (sb, b)| {
            b.score()
                .total_cmp(&a.score())
                .then(sa.cmp(sb))
                .then_with(|| a.tokens.cmp(&b.tokens))
        })
        .map(|(_, h)| h.tokens)
        .unwrap_or_default())
}

/// A model with its perception fixed, queried one step at a time.
pub struct ConditionedModel<'a, T: Float> {
    pub model: &'a EpalmModel<T>,
    pub perception: Perception<'a, T>,
}

impl<T: Float> NextToken for ConditionedModel<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.arch.decoder.cfg.vocab_size
    }

    fn next_logprobs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.model.params);
        let out = self.model.forward_multimodal(&mut g, self.perception, prefix)?;
        let v = self.vocab_size();
        let logits = g.value(out.decoder.logits);
        let last: Vec<f64> = logits[logits.len() - v..].iter().map(|x| x.to_f64_lossy()).collect();
        Ok(log_softmax(&last))
    }
}
