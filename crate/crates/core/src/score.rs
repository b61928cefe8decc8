//! Word and character error rates via Levenshtein alignment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Hit,
    Substitution,
    Insertion,
    Deletion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub op: EditOp,
    #[serde(rename = "ref")]
    pub reference: Option<String>,
    #[serde(rename = "hyp")]
    pub hypothesis: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub hits: usize,
    pub wer: f64,
    pub pairs: Vec<AlignedPair>,
}

impl AlignmentReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn reference_len(&self) -> usize {
        self.substitutions + self.deletions + self.hits
    }
}

/// Minimal unit-cost edit script. Backtrace prefers the diagonal, then insertion, then deletion.
pub fn edit_script<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Vec<EditOp> {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        d[idx(i, 0)] = i;
    }
    for j in 0..=m {
        d[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[idx(i - 1, j - 1)] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let ins = d[idx(i, j - 1)] + 1;
            let del = d[idx(i - 1, j)] + 1;
            d[idx(i, j)] = sub.min(ins).min(del);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[idx(i, j)];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[idx(i - 1, j - 1)] + usize::from(!same) == here {
                ops.push(if same { EditOp::Hit } else { EditOp::Substitution });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[idx(i, j - 1)] + 1 == here {
            ops.push(EditOp::Insertion);
            j -= 1;
        } else {
            ops.push(EditOp::Deletion);
            i -= 1;
        }
    }
    ops.reverse();
    ops
}

pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    edit_script(a, b)
        .iter()
        .filter(|op| **op != EditOp::Hit)
        .count()
}

pub fn align<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> AlignmentReport {
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    let ops = edit_script(&r, &h);
    let mut report = AlignmentReport {
        substitutions: 0,
        deletions: 0,
        insertions: 0,
        hits: 0,
        wer: 0.0,
        pairs: Vec::with_capacity(ops.len()),
    };
    let (mut i, mut j) = (0, 0);
    for op in ops {
        let (rw, hw) = match op {
            EditOp::Hit | EditOp::Substitution => {
                i += 1;
                j += 1;
                (Some(r[i - 1]), Some(h[j - 1]))
            }
            EditOp::Insertion => {
                j += 1;
                (None, Some(h[j - 1]))
            }
            EditOp::Deletion => {
                i += 1;
                (Some(r[i - 1]), None)
            }
        };
        match op {
            EditOp::Hit => report.hits += 1,
            EditOp::Substitution => report.substitutions += 1,
            EditOp::Insertion => report.insertions += 1,
            EditOp::Deletion => report.deletions += 1,
        }
        report.pairs.push(AlignedPair {
            op,
            reference: rw.map(str::to_string),
            hypothesis: hw.map(str::to_string),
        });
    }
    report.wer = report.errors() as f64 / r.len().max(1) as f64;
    report
}

/// Character error rate over Unicode scalar values.
pub fn cer(reference: &str, hypothesis: &str) -> f64 {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    edit_distance(&r, &h) as f64 / r.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub wer: f64,
    pub errors: usize,
    pub reference_words: usize,
    pub utterances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusWer {
    pub per_domain: BTreeMap<String, DomainScore>,
    /// Σ errors / Σ reference words over every pair.
    pub pooled: f64,
    /// Unweighted mean of the per-domain WERs.
    pub average: f64,
}

/// One scored utterance: (domain tag, reference, hypothesis).
pub type ScoredPair = (String, Vec<String>, Vec<String>);

pub fn corpus_wer(pairs: &[ScoredPair]) -> CorpusWer {
    let mut per: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for (domain, r, h) in pairs {
        let rep = align(r, h);
        let e = per.entry(domain.clone()).or_default();
        e.0 += rep.errors();
        e.1 += r.len();
        e.2 += 1;
    }
    let per_domain: BTreeMap<String, DomainScore> = per
        .into_iter()
        .map(|(d, (errors, words, utts))| {
            (
                d,
                DomainScore {
                    wer: errors as f64 / words.max(1) as f64,
                    errors,
                    reference_words: words,
                    utterances: utts,
                },
            )
        })
        .collect();
    let total_err: usize = per_domain.values().map(|s| s.errors).sum();
    let total_words: usize = per_domain.values().map(|s| s.reference_words).sum();
    let average = if per_domain.is_empty() {
        0.0
    } else {
        per_domain.values().map(|s| s.wer).sum::<f64>() / per_domain.len() as f64
    };
    CorpusWer {
        per_domain,
        pooled: total_err as f64 / total_words.max(1) as f64,
        average,
    }
}
