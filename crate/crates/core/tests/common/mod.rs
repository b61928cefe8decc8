//! Brute-force oracles and fixture generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use asrkit::corpus::{FeatureMatrix, Lexicon, TokenSet};
use asrkit::ngram::{train_lm, BackoffLm};
use asrkit::ctc::PosteriorGrid;
use asrkit::wfst::Wfst;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Every length-`t` sequence over `0..v`, in lexicographic order.
pub fn all_paths(v: usize, t: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..t {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..v).map(move |k| {
                    let mut q = p.clone();
                    q.push(k);
                    q
                })
            })
            .collect();
    }
    out
}

/// Merge repeats, then drop zeros.
pub fn collapse_ref(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != 0 {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Row-major log-softmax of standard-normal logits scaled by `spread`.
pub fn random_log_posteriors(r: &mut ChaCha8Rng, frames: usize, vocab: usize, spread: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames * vocab);
    for _ in 0..frames {
        let z: Vec<f64> = (0..vocab).map(|_| spread * normal(r)).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(z.iter().map(|v| v - lse));
    }
    out
}

pub fn random_grid(r: &mut ChaCha8Rng, frames: usize, vocab: usize, spread: f64) -> PosteriorGrid {
    PosteriorGrid::new(frames, vocab, random_log_posteriors(r, frames, vocab, spread)).unwrap()
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = r.random::<f64>().max(1e-300);
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn random_features(r: &mut ChaCha8Rng, frames: usize, dims: usize) -> FeatureMatrix {
    let v = (0..frames * dims).map(|_| normal(r) as f32).collect();
    FeatureMatrix::new(frames, dims, v).unwrap()
}

/// Probability of `target` summed over every alignment.
pub fn brute_ctc_prob(values: &[f64], vocab: usize, target: &[usize]) -> f64 {
    let frames = values.len() / vocab;
    all_paths(vocab, frames)
        .iter()
        .filter(|p| collapse_ref(p) == target)
        .map(|p| p.iter().enumerate().map(|(t, &k)| values[t * vocab + k]).sum::<f64>().exp())
        .sum()
}

/// Total probability of every label sequence reachable in `frames` frames.
pub fn brute_label_probs(values: &[f64], vocab: usize) -> BTreeMap<Vec<usize>, f64> {
    let frames = values.len() / vocab;
    let mut out = BTreeMap::new();
    for p in all_paths(vocab, frames) {
        let lp: f64 = p.iter().enumerate().map(|(t, &k)| values[t * vocab + k]).sum();
        *out.entry(collapse_ref(&p)).or_insert(0.0) += lp.exp();
    }
    out
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, floor).
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Every output string (with its path cost) of paths that read exactly `input`
/// on the input side. Epsilon expansion is bounded by the state count.
pub fn fst_transduce(fst: &Wfst, input: &[u32]) -> Vec<(Vec<u32>, f64)> {
    let mut out = Vec::new();
    let budget = fst.num_states() + 1;
    let mut stack = vec![(fst.start(), 0usize, Vec::new(), 0.0, 0usize)];
    while let Some((s, pos, olabels, cost, eps_run)) = stack.pop() {
        if pos == input.len() {
            if let Some(w) = fst.final_weight(s) {
                out.push((olabels.clone(), cost + w));
            }
        }
        for a in fst.arcs(s) {
            let mut o = olabels.clone();
            if a.olabel != 0 {
                o.push(a.olabel);
            }
            if a.ilabel == 0 {
                if eps_run < budget {
                    stack.push((a.next, pos, o, cost + a.weight, eps_run + 1));
                }
            } else if pos < input.len() && a.ilabel == input[pos] {
                stack.push((a.next, pos + 1, o, cost + a.weight, 0));
            }
        }
    }
    out
}

/// Minimum cost of an acceptor path whose non-epsilon labels spell `labels`.
/// Relaxation over (state, position) pairs; epsilon arcs may carry any sign.
pub fn acceptor_min_cost(fst: &Wfst, labels: &[u32]) -> Option<f64> {
    let n = fst.num_states();
    let width = labels.len() + 1;
    let mut best = vec![f64::INFINITY; n * width];
    best[fst.start() as usize * width] = 0.0;
    for _ in 0..=n * width {
        let mut changed = false;
        for s in 0..n {
            for pos in 0..width {
                let c = best[s * width + pos];
                if !c.is_finite() {
                    continue;
                }
                for a in fst.arcs(s as u32) {
                    let next_pos = if a.olabel == 0 {
                        pos
                    } else if pos < labels.len() && a.olabel == labels[pos] {
                        pos + 1
                    } else {
                        continue;
                    };
                    let slot = &mut best[a.next as usize * width + next_pos];
                    if c + a.weight < *slot - 1e-15 {
                        *slot = c + a.weight;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    (0..n)
        .filter_map(|s| fst.final_weight(s as u32).map(|w| best[s * width + labels.len()] + w))
        .filter(|c| c.is_finite())
        .min_by(|a, b| a.total_cmp(b))
}

/// Every way of writing `chars` as a concatenation of lexicon spellings.
pub fn all_segmentations(chars: &[String], lexicon: &Lexicon) -> Vec<Vec<String>> {
    if chars.is_empty() {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for (word, spelling) in lexicon.entries() {
        if chars.len() >= spelling.len() && chars[..spelling.len()] == spelling[..] {
            for mut rest in all_segmentations(&chars[spelling.len()..], lexicon) {
                rest.insert(0, word.clone());
                out.push(rest);
            }
        }
    }
    out
}

/// Random word strings over `alphabet` with lengths in `len`.
pub fn random_words(r: &mut ChaCha8Rng, n: usize, alphabet: &[&str], len: (usize, usize)) -> Vec<Vec<String>> {
    (0..n)
        .map(|_| {
            let l = r.random_range(len.0..=len.1);
            (0..l).map(|_| alphabet[r.random_range(0..alphabet.len())].to_string()).collect()
        })
        .collect()
}

/// Lexicon whose words are their own spellings, e.g. "ab" → [a, b].
pub fn spelled_lexicon(words: &[&str]) -> Lexicon {
    Lexicon::new(
        words
            .iter()
            .map(|w| (w.to_string(), w.chars().map(|c| c.to_string()).collect())),
    )
    .unwrap()
}

/// Levenshtein distance over arbitrary tokens.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j + 1] + 1).min(cur[j] + 1).min(prev[j] + usize::from(x != y));
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Exhaustive argmin over frame paths and word segmentations; graph cost from G alone.
pub fn oracle_decode(grid: &PosteriorGrid, lexicon: &Lexicon, tokens: &TokenSet, g: &Wfst, scale: f64) -> Option<(f64, Vec<Vec<u32>>)> {
    let words = g.osyms();
    let mut best = f64::INFINITY;
    let mut argmins: Vec<Vec<u32>> = Vec::new();
    for path in all_paths(grid.vocab(), grid.frames()) {
        let ac: f64 = path.iter().enumerate().map(|(t, &k)| -scale * grid.get(t, k)).sum();
        let chars: Vec<String> = collapse_ref(&path).iter().map(|&k| tokens.symbol(k).to_string()).collect();
        for seg in all_segmentations(&chars, lexicon) {
            let ids: Vec<u32> = seg.iter().map(|w| words.id(w).unwrap()).collect();
            let Some(gc) = acceptor_min_cost(g, &ids) else { continue };
            let c = ac + gc;
            if c < best - 1e-9 {
                best = c;
                argmins = vec![ids];
            } else if (c - best).abs() <= 1e-9 && !argmins.contains(&ids) {
                argmins.push(ids);
            }
        }
    }
    best.is_finite().then_some((best, argmins))
}

pub fn toy_fixtures() -> Vec<(Lexicon, BackoffLm)> {
    let mut r = rng(20);
    let lexicons = [
        vec!["a", "ab", "b"],
        vec!["ab", "ba", "a"],
        vec!["aa", "b", "ab"],
        vec!["c", "ab", "bc"],
    ];
    let mut out = Vec::new();
    for (i, words) in lexicons.iter().enumerate() {
        let lexicon = spelled_lexicon(words);
        for order in 1..=2 {
            let text: Vec<Vec<String>> = (0..6)
                .map(|_| {
                    let n = r.random_range(1..4);
                    (0..n).map(|_| words[r.random_range(0..words.len())].to_string()).collect()
                })
                .collect();
            // Leave the last word out of the text on some fixtures to exercise <unk>.
            let text: Vec<Vec<String>> = if i % 2 == 1 {
                text.into_iter()
                    .map(|s| s.into_iter().filter(|w| w != words.last().unwrap()).collect::<Vec<_>>())
                    .filter(|s| !s.is_empty())
                    .collect()
            } else {
                text
            };
            out.push((lexicon.clone(), train_lm(&text, order).unwrap()));
        }
    }
    out
}
