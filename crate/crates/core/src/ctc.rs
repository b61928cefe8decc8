//! CTC: collapse, forward-backward loss and gradients, greedy decoding and prefix
//! beam search with optional shallow fusion. Blank is token 0 everywhere.

use std::collections::HashMap;

use crate::corpus::FeatureMatrix;
use crate::error::{Error, Result};
use crate::ngram::FusionScorer;

pub const BLANK: usize = 0;

#[inline]
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// T×V natural-log posteriors; each frame normalizes to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid {
    frames: usize,
    vocab: usize,
    values: Vec<f64>,
}

impl PosteriorGrid {
    pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

    pub fn new(frames: usize, vocab: usize, values: Vec<f64>) -> Result<Self> {
        if vocab == 0 || frames.checked_mul(vocab) != Some(values.len()) {
            return Err(Error::Invalid(format!(
                "posterior grid {frames}x{vocab} does not match {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Invalid("posterior grid contains NaN or +inf".into()));
        }
        for t in 0..frames {
            let z = logsumexp(&values[t * vocab..(t + 1) * vocab]);
            if (z).abs() > Self::NORMALIZATION_TOLERANCE {
                return Err(Error::Invalid(format!("frame {t} log-normalizer is {z}")));
            }
        }
        Ok(PosteriorGrid {
            frames,
            vocab,
            values,
        })
    }

    /// Normalizes each row of raw scores with log-softmax.
    pub fn from_logits(frames: usize, vocab: usize, logits: &[f64]) -> Result<Self> {
        if vocab == 0 || frames.checked_mul(vocab) != Some(logits.len()) {
            return Err(Error::Invalid("logit grid shape mismatch".into()));
        }
        let mut values = logits.to_vec();
        for row in values.chunks_exact_mut(vocab) {
            let z = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= z);
        }
        PosteriorGrid::new(frames, vocab, values)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.values[t * self.vocab + k]
    }

    /// Stores the grid in the feature-file layout (T×V, f32).
    pub fn to_features(&self) -> Result<FeatureMatrix> {
        FeatureMatrix::new(
            self.frames,
            self.vocab,
            self.values.iter().map(|&v| v.max(f32::MIN as f64) as f32).collect(),
        )
    }

    /// Reads a grid stored in the feature layout, renormalizing away f32 rounding.
    pub fn from_features(m: &FeatureMatrix) -> Result<Self> {
        let raw: Vec<f64> = m.values().iter().map(|&v| v as f64).collect();
        PosteriorGrid::from_logits(m.frames(), m.dims(), &raw)
    }
}

/// Merges adjacent repeats, then removes blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Minimum number of frames an alignment of `target` needs.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(frames: usize, vocab: usize, target: &[usize]) -> Result<()> {
    if let Some(&bad) = target.iter().find(|&&l| l == BLANK || l >= vocab) {
        return Err(Error::Invalid(format!("target label {bad} is blank or out of range")));
    }
    let needed = min_frames(target);
    if needed > frames {
        return Err(Error::Infeasible { needed, frames });
    }
    Ok(())
}

struct Lattice {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    states: usize,
    log_likelihood: f64,
}

fn ext_label(target: &[usize], s: usize) -> usize {
    if s.is_multiple_of(2) {
        BLANK
    } else {
        target[s / 2]
    }
}

fn can_skip(target: &[usize], s: usize) -> bool {
    s >= 2 && s % 2 == 1 && target[s / 2] != target[s / 2 - 1]
}

fn forward_backward(values: &[f64], vocab: usize, target: &[usize], with_beta: bool) -> Lattice {
    let frames = values.len() / vocab;
    let states = 2 * target.len() + 1;
    let lp = |t: usize, s: usize| values[t * vocab + ext_label(target, s)];
    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; frames * states];
    alpha[0] = lp(0, 0);
    if states > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..frames {
        for s in 0..states {
            let mut a = alpha[(t - 1) * states + s];
            if s >= 1 {
                a = logaddexp(a, alpha[(t - 1) * states + s - 1]);
            }
            if can_skip(target, s) {
                a = logaddexp(a, alpha[(t - 1) * states + s - 2]);
            }
            alpha[t * states + s] = if a == neg { neg } else { a + lp(t, s) };
        }
    }
    let last = (frames - 1) * states;
    let mut ll = alpha[last + states - 1];
    if states > 1 {
        ll = logaddexp(ll, alpha[last + states - 2]);
    }
    let mut beta = Vec::new();
    if with_beta {
        beta = vec![neg; frames * states];
        beta[last + states - 1] = lp(frames - 1, states - 1);
        if states > 1 {
            beta[last + states - 2] = lp(frames - 1, states - 2);
        }
        for t in (0..frames - 1).rev() {
            for s in 0..states {
                let mut b = beta[(t + 1) * states + s];
                if s + 1 < states {
                    b = logaddexp(b, beta[(t + 1) * states + s + 1]);
                }
                if s + 2 < states && can_skip(target, s + 2) {
                    b = logaddexp(b, beta[(t + 1) * states + s + 2]);
                }
                beta[t * states + s] = if b == neg { neg } else { b + lp(t, s) };
            }
        }
    }
    Lattice {
        alpha,
        beta,
        states,
        log_likelihood: ll,
    }
}

/// CTC negative log-likelihood over a raw row-major T×V score slice. The scores
/// are treated as independent log-probabilities; no normalization is assumed.
pub fn ctc_loss_slice(values: &[f64], vocab: usize, target: &[usize]) -> Result<f64> {
    if vocab == 0 || values.is_empty() || !values.len().is_multiple_of(vocab) {
        return Err(Error::Invalid("empty or misshapen score grid".into()));
    }
    check_target(values.len() / vocab, vocab, target)?;
    Ok(-forward_backward(values, vocab, target, false).log_likelihood)
}

pub fn ctc_loss(posteriors: &PosteriorGrid, target: &[usize]) -> Result<f64> {
    ctc_loss_slice(&posteriors.values, posteriors.vocab, target)
}

/// Loss and per-frame label occupancy γ[t][k] (probabilities).
pub fn ctc_occupancy_slice(values: &[f64], vocab: usize, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    if vocab == 0 || values.is_empty() || !values.len().is_multiple_of(vocab) {
        return Err(Error::Invalid("empty or misshapen score grid".into()));
    }
    let frames = values.len() / vocab;
    check_target(frames, vocab, target)?;
    let lat = forward_backward(values, vocab, target, true);
    let ll = lat.log_likelihood;
    let mut gamma = vec![0.0; frames * vocab];
    for t in 0..frames {
        let mut acc: Vec<f64> = vec![f64::NEG_INFINITY; vocab];
        for s in 0..lat.states {
            let i = t * lat.states + s;
            let ab = lat.alpha[i] + lat.beta[i];
            if ab == f64::NEG_INFINITY {
                continue;
            }
            let k = ext_label(target, s);
            // alpha and beta both include the emission at t.
            acc[k] = logaddexp(acc[k], ab - values[t * vocab + k]);
        }
        for k in 0..vocab {
            gamma[t * vocab + k] = (acc[k] - ll).exp();
        }
    }
    Ok((-ll, gamma))
}

/// Gradient of the loss with respect to each log-posterior entry: −γ.
pub fn ctc_grad_slice(values: &[f64], vocab: usize, target: &[usize]) -> Result<Vec<f64>> {
    let (_, gamma) = ctc_occupancy_slice(values, vocab, target)?;
    Ok(gamma.into_iter().map(|g| -g).collect())
}

pub fn ctc_grad(posteriors: &PosteriorGrid, target: &[usize]) -> Result<Vec<f64>> {
    ctc_grad_slice(&posteriors.values, posteriors.vocab, target)
}

/// Loss and gradient with respect to the pre-softmax logits: softmax − γ.
pub fn ctc_loss_and_logit_grad(posteriors: &PosteriorGrid, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (loss, gamma) = ctc_occupancy_slice(&posteriors.values, posteriors.vocab, target)?;
    let grad = posteriors
        .values
        .iter()
        .zip(gamma)
        .map(|(lp, g)| lp.exp() - g)
        .collect();
    Ok((loss, grad))
}

/// Collapse of the per-frame argmax; ties go to the lowest token id.
pub fn greedy_decode(posteriors: &PosteriorGrid) -> Vec<usize> {
    collapse(&best_path(posteriors))
}

pub fn best_path(posteriors: &PosteriorGrid) -> Vec<usize> {
    (0..posteriors.frames)
        .map(|t| {
            let row = posteriors.row(t);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Fusion LM weight α.
    pub fusion_weight: f64,
    /// Per-label bonus β.
    pub length_bonus: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 8,
            fusion_weight: 0.3,
            length_bonus: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub labels: Vec<usize>,
    /// log P_ctc(y) + α·log P_lm(y) + β·|y|, with the LM end-of-sequence term included.
    pub score: f64,
    pub ctc_log_prob: f64,
    pub lm_log_prob: f64,
}

/// Stand-in scorer that contributes nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoLm;

impl FusionScorer for NoLm {
    type State = ();

    fn start(&self) {}

    fn extend(&self, _: &(), _: usize) -> ((), f64) {
        ((), 0.0)
    }

    fn finish(&self, _: &()) -> f64 {
        0.0
    }
}

#[derive(Clone)]
struct Prefix<S> {
    blank: f64,
    non_blank: f64,
    lm_state: S,
    lm_score: f64,
}

impl<S> Prefix<S> {
    fn total(&self) -> f64 {
        logaddexp(self.blank, self.non_blank)
    }
}

/// Prefix beam search without an LM.
pub fn prefix_beam_search(posteriors: &PosteriorGrid, beam_size: usize) -> Vec<BeamHypothesis> {
    prefix_beam_search_fused(
        posteriors,
        &NoLm,
        BeamConfig {
            beam_size,
            fusion_weight: 0.0,
            length_bonus: 0.0,
        },
    )
}

/// CTC prefix beam search. Each prefix tracks the probability of alignments ending
/// in blank and in its last label; the fusion LM is applied when a label is emitted.
/// Results are sorted best first.
pub fn prefix_beam_search_fused<L: FusionScorer>(
    posteriors: &PosteriorGrid,
    scorer: &L,
    config: BeamConfig,
) -> Vec<BeamHypothesis> {
    let beam_size = config.beam_size.max(1);
    let alpha = config.fusion_weight;
    let beta = config.length_bonus;
    let neg = f64::NEG_INFINITY;

    let mut beams: Vec<(Vec<usize>, Prefix<L::State>)> = vec![(
        Vec::new(),
        Prefix {
            blank: 0.0,
            non_blank: neg,
            lm_state: scorer.start(),
            lm_score: 0.0,
        },
    )];
    let rank = |labels: &[usize], p: &Prefix<L::State>| p.total() + alpha * p.lm_score + beta * labels.len() as f64;

    for t in 0..posteriors.frames {
        let row = posteriors.row(t);
        let mut next: HashMap<Vec<usize>, Prefix<L::State>> = HashMap::new();
        for (labels, p) in &beams {
            let total = p.total();
            let entry = next.entry(labels.clone()).or_insert_with(|| Prefix {
                blank: neg,
                non_blank: neg,
                lm_state: p.lm_state.clone(),
                lm_score: p.lm_score,
            });
            entry.blank = logaddexp(entry.blank, total + row[BLANK]);
            let last = labels.last().copied();
            if let Some(l) = last {
                entry.non_blank = logaddexp(entry.non_blank, p.non_blank + row[l]);
            }
            for (k, &lp) in row.iter().enumerate().skip(1) {
                if lp == neg {
                    continue;
                }
                let from = if Some(k) == last { p.blank } else { total };
                if from == neg {
                    continue;
                }
                let mut extended = labels.clone();
                extended.push(k);
                let child = next.entry(extended).or_insert_with(|| {
                    let (state, inc) = scorer.extend(&p.lm_state, k);
                    Prefix {
                        blank: neg,
                        non_blank: neg,
                        lm_state: state,
                        lm_score: p.lm_score + inc,
                    }
                });
                child.non_blank = logaddexp(child.non_blank, from + lp);
            }
        }
        let mut ranked: Vec<(Vec<usize>, Prefix<L::State>)> = next.into_iter().collect();
        ranked.sort_by(|a, b| {
            rank(&b.0, &b.1)
                .partial_cmp(&rank(&a.0, &a.1))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(beam_size);
        beams = ranked;
    }

    let mut out: Vec<BeamHypothesis> = beams
        .into_iter()
        .map(|(labels, p)| {
            let lm = p.lm_score + scorer.finish(&p.lm_state);
            let ctc = p.total();
            BeamHypothesis {
                score: ctc + alpha * lm + beta * labels.len() as f64,
                labels,
                ctc_log_prob: ctc,
                lm_log_prob: lm,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.labels.cmp(&b.labels))
    });
    out
}
