//! Tropical-semiring transducers: composition, the token / lexicon / grammar
//! builders, frame-synchronous Viterbi beam decoding and AT&T text I/O.
//!
//! Input label `k + 1` of a token transducer corresponds to posterior column `k`
//! (column 0 is the CTC blank); label 0 is epsilon in every symbol table.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::{Lexicon, TokenSet};
use crate::ctc::PosteriorGrid;
use crate::error::{Error, Result};
use crate::ngram::BackoffLm;

pub const EPSILON: u32 = 0;
pub const EPSILON_SYMBOL: &str = "<eps>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolTable {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl SymbolTable {
    /// Builds a table with epsilon at 0 followed by `symbols`.
    pub fn new<S: Into<String>>(symbols: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut table = SymbolTable {
            symbols: vec![EPSILON_SYMBOL.to_string()],
            index: HashMap::from([(EPSILON_SYMBOL.to_string(), 0)]),
        };
        for s in symbols {
            let s = s.into();
            if table.index.contains_key(&s) {
                return Err(Error::Duplicate { kind: "symbol", name: s });
            }
            table.index.insert(s.clone(), table.symbols.len() as u32);
            table.symbols.push(s);
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.symbols.iter().enumerate() {
            let _ = writeln!(out, "{s} {i}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(u32, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(sym), Some(id), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::format(format!("line {}", lineno + 1), "expected 'symbol id'"));
            };
            let id: u32 = id
                .parse()
                .map_err(|_| Error::format(format!("line {}", lineno + 1), "bad symbol id"))?;
            entries.push((id, sym.to_string()));
        }
        entries.sort();
        if entries.first().map(|(i, s)| (*i, s.as_str())) != Some((0, EPSILON_SYMBOL)) {
            return Err(Error::format("symbol 0", "must be <eps>"));
        }
        for (pos, (id, _)) in entries.iter().enumerate() {
            if *id as usize != pos {
                return Err(Error::format("symbol ids", "must be contiguous from 0"));
            }
        }
        SymbolTable::new(entries.into_iter().skip(1).map(|(_, s)| s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arc {
    pub ilabel: u32,
    pub olabel: u32,
    pub weight: f64,
    pub next: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Wfst {
    start: u32,
    arcs: Vec<Vec<Arc>>,
    finals: Vec<Option<f64>>,
    isyms: SymbolTable,
    osyms: SymbolTable,
}

impl Wfst {
    /// New transducer with a single, non-final start state.
    pub fn new(isyms: SymbolTable, osyms: SymbolTable) -> Self {
        Wfst {
            start: 0,
            arcs: vec![Vec::new()],
            finals: vec![None],
            isyms,
            osyms,
        }
    }

    pub fn add_state(&mut self) -> u32 {
        self.arcs.push(Vec::new());
        self.finals.push(None);
        (self.arcs.len() - 1) as u32
    }

    pub fn set_start(&mut self, s: u32) {
        assert!((s as usize) < self.arcs.len(), "start state out of range");
        self.start = s;
    }

    pub fn add_arc(&mut self, from: u32, arc: Arc) {
        debug_assert!(arc.weight.is_finite());
        debug_assert!((arc.next as usize) < self.arcs.len());
        self.arcs[from as usize].push(arc);
    }

    pub fn set_final(&mut self, s: u32, weight: f64) {
        self.finals[s as usize] = Some(weight);
    }

    pub fn start(&self) -> u32 {
        self.start
    }

    pub fn num_states(&self) -> usize {
        self.arcs.len()
    }

    pub fn num_arcs(&self) -> usize {
        self.arcs.iter().map(Vec::len).sum()
    }

    pub fn arcs(&self, s: u32) -> &[Arc] {
        &self.arcs[s as usize]
    }

    pub fn final_weight(&self, s: u32) -> Option<f64> {
        self.finals[s as usize]
    }

    pub fn isyms(&self) -> &SymbolTable {
        &self.isyms
    }

    pub fn osyms(&self) -> &SymbolTable {
        &self.osyms
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_states() as u32;
        if self.start >= n {
            return Err(Error::Invalid("start state does not exist".into()));
        }
        for (s, arcs) in self.arcs.iter().enumerate() {
            for a in arcs {
                if a.next >= n {
                    return Err(Error::Invalid(format!("state {s}: arc to missing state {}", a.next)));
                }
                if !a.weight.is_finite() {
                    return Err(Error::Invalid(format!("state {s}: non-finite arc weight")));
                }
                if a.ilabel as usize >= self.isyms.len() || a.olabel as usize >= self.osyms.len() {
                    return Err(Error::Invalid(format!("state {s}: label outside symbol table")));
                }
            }
        }
        if self.finals.iter().flatten().any(|w| !w.is_finite()) {
            return Err(Error::Invalid("non-finite final weight".into()));
        }
        Ok(())
    }

    fn sort_arcs(&mut self) {
        for arcs in &mut self.arcs {
            arcs.sort_by(|x, y| {
                (x.ilabel, x.olabel, x.next)
                    .cmp(&(y.ilabel, y.olabel, y.next))
                    .then(x.weight.total_cmp(&y.weight))
            });
        }
    }

    /// Removes states that are unreachable from the start or cannot reach a final
    /// state. Surviving states keep their relative order.
    pub fn connect(&self) -> Wfst {
        let n = self.num_states();
        let mut access = vec![false; n];
        let mut stack = vec![self.start];
        access[self.start as usize] = true;
        while let Some(s) = stack.pop() {
            for a in self.arcs(s) {
                if !access[a.next as usize] {
                    access[a.next as usize] = true;
                    stack.push(a.next);
                }
            }
        }
        let mut reverse: Vec<Vec<u32>> = vec![Vec::new(); n];
        for (s, arcs) in self.arcs.iter().enumerate() {
            for a in arcs {
                reverse[a.next as usize].push(s as u32);
            }
        }
        let mut coaccess = vec![false; n];
        let mut stack: Vec<u32> = (0..n as u32)
            .filter(|&s| self.finals[s as usize].is_some())
            .collect();
        for &s in &stack {
            coaccess[s as usize] = true;
        }
        while let Some(s) = stack.pop() {
            for &p in &reverse[s as usize] {
                if !coaccess[p as usize] {
                    coaccess[p as usize] = true;
                    stack.push(p);
                }
            }
        }
        let keep = |s: usize| access[s] && coaccess[s];
        let mut out = Wfst::new(self.isyms.clone(), self.osyms.clone());
        if !keep(self.start as usize) {
            return out;
        }
        let mut remap = vec![u32::MAX; n];
        remap[self.start as usize] = 0;
        let mut next_id = 1;
        for s in 0..n {
            if keep(s) && s != self.start as usize {
                remap[s] = next_id;
                next_id += 1;
                out.add_state();
            }
        }
        for s in 0..n {
            if !keep(s) {
                continue;
            }
            let ns = remap[s];
            if let Some(w) = self.finals[s] {
                out.set_final(ns, w);
            }
            for a in &self.arcs[s] {
                if keep(a.next as usize) {
                    out.add_arc(
                        ns,
                        Arc {
                            next: remap[a.next as usize],
                            ..*a
                        },
                    );
                }
            }
        }
        out
    }

    /// AT&T text: start state lines first, then the remaining states in id order.
    pub fn to_att(&self) -> String {
        let mut out = String::new();
        let order = std::iter::once(self.start).chain((0..self.num_states() as u32).filter(|&s| s != self.start));
        for s in order {
            for a in self.arcs(s) {
                let _ = writeln!(out, "{s}\t{}\t{}\t{}\t{}", a.next, a.ilabel, a.olabel, a.weight);
            }
            if let Some(w) = self.final_weight(s) {
                let _ = writeln!(out, "{s}\t{w}");
            }
        }
        out
    }

    pub fn parse_att(text: &str, isyms: SymbolTable, osyms: SymbolTable) -> Result<Self> {
        let mut fst = Wfst::new(isyms, osyms);
        let mut start = None;
        let ensure = |fst: &mut Wfst, s: u32| {
            while fst.num_states() <= s as usize {
                fst.add_state();
            }
        };
        for (lineno, line) in text.lines().enumerate() {
            let at = || format!("line {}", lineno + 1);
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<u32> {
                fields[i]
                    .parse()
                    .map_err(|_| Error::format(at(), format!("bad integer {:?}", fields[i])))
            };
            let weight = |i: usize| -> Result<f64> {
                match fields.get(i) {
                    None => Ok(0.0),
                    Some(w) => {
                        let v: f64 = w.parse().map_err(|_| Error::format(at(), "bad weight"))?;
                        if v.is_finite() {
                            Ok(v)
                        } else {
                            Err(Error::format(at(), "non-finite weight"))
                        }
                    }
                }
            };
            match fields.len() {
                1 | 2 => {
                    let s = num(0)?;
                    ensure(&mut fst, s);
                    start.get_or_insert(s);
                    fst.set_final(s, weight(1)?);
                }
                4 | 5 => {
                    let (src, dst, il, ol) = (num(0)?, num(1)?, num(2)?, num(3)?);
                    if il as usize >= fst.isyms.len() || ol as usize >= fst.osyms.len() {
                        return Err(Error::format(at(), "label outside symbol table"));
                    }
                    ensure(&mut fst, src.max(dst));
                    start.get_or_insert(src);
                    fst.add_arc(
                        src,
                        Arc {
                            ilabel: il,
                            olabel: ol,
                            weight: weight(4)?,
                            next: dst,
                        },
                    );
                }
                _ => return Err(Error::format(at(), "expected 1, 2, 4 or 5 fields")),
            }
        }
        fst.start = start.unwrap_or(0);
        Ok(fst)
    }

    /// Writes `<stem>.fst`, `<stem>.isyms` and `<stem>.osyms` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        for (ext, body) in [
            ("fst", self.to_att()),
            ("isyms", self.isyms.to_text()),
            ("osyms", self.osyms.to_text()),
        ] {
            let p = dir.join(format!("{stem}.{ext}"));
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |ext: &str| {
            let p = dir.join(format!("{stem}.{ext}"));
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let isyms = SymbolTable::parse(&read("isyms")?)?;
        let osyms = SymbolTable::parse(&read("osyms")?)?;
        let fst = Wfst::parse_att(&read("fst")?, isyms, osyms)?;
        fst.validate()?;
        Ok(fst)
    }
}

/// Composition under the tropical semiring with an epsilon-sequencing filter:
/// between two matched labels, epsilon moves of `a` precede those of `b`, so
/// each pair of component paths produces exactly one composed path.
pub fn compose(a: &Wfst, b: &Wfst) -> Result<Wfst> {
    if a.osyms != b.isyms {
        return Err(Error::SymbolMismatch(
            "output symbols of the left operand differ from input symbols of the right".into(),
        ));
    }
    // b's arcs per state, sorted by input label.
    let b_index: Vec<Vec<usize>> = b
        .arcs
        .iter()
        .map(|arcs| {
            let mut idx: Vec<usize> = (0..arcs.len()).collect();
            idx.sort_by_key(|&i| (arcs[i].ilabel, i));
            idx
        })
        .collect();
    let matching = |sb: u32, label: u32| {
        let idx = &b_index[sb as usize];
        let arcs = &b.arcs[sb as usize];
        let lo = idx.partition_point(|&i| arcs[i].ilabel < label);
        let hi = idx.partition_point(|&i| arcs[i].ilabel <= label);
        idx[lo..hi].iter().map(move |&i| &arcs[i])
    };

    let mut out = Wfst::new(a.isyms.clone(), b.osyms.clone());
    let start = (a.start, b.start, 0u8);
    let mut keys: Vec<(u32, u32, u8)> = vec![start];
    let mut ids: HashMap<(u32, u32, u8), u32> = HashMap::from([(start, 0)]);
    let mut target = |key: (u32, u32, u8), out: &mut Wfst, keys: &mut Vec<(u32, u32, u8)>| -> u32 {
        *ids.entry(key).or_insert_with(|| {
            keys.push(key);
            out.add_state()
        })
    };

    let mut cursor = 0;
    while cursor < keys.len() {
        let s = cursor as u32;
        let (sa, sb, filter) = keys[cursor];
        cursor += 1;
        if let (Some(x), Some(y)) = (a.final_weight(sa), b.final_weight(sb)) {
            out.set_final(s, x + y);
        }
        for ea in a.arcs(sa) {
            if ea.olabel == EPSILON {
                if filter == 0 {
                    let next = target((ea.next, sb, 0), &mut out, &mut keys);
                    out.add_arc(
                        s,
                        Arc {
                            ilabel: ea.ilabel,
                            olabel: EPSILON,
                            weight: ea.weight,
                            next,
                        },
                    );
                }
                continue;
            }
            for eb in matching(sb, ea.olabel) {
                let next = target((ea.next, eb.next, 0), &mut out, &mut keys);
                out.add_arc(
                    s,
                    Arc {
                        ilabel: ea.ilabel,
                        olabel: eb.olabel,
                        weight: ea.weight + eb.weight,
                        next,
                    },
                );
            }
        }
        for eb in matching(sb, EPSILON) {
            let next = target((sa, eb.next, 1), &mut out, &mut keys);
            out.add_arc(
                s,
                Arc {
                    ilabel: EPSILON,
                    olabel: eb.olabel,
                    weight: eb.weight,
                    next,
                },
            );
        }
    }
    Ok(out.connect())
}

/// Token transducer: maps any frame-label sequence to its CTC collapse with weight 0.
/// State 0 means "after blank or at the beginning"; state k means "last frame was token k".
pub fn build_token_fst(tokens: &TokenSet) -> Result<Wfst> {
    let isyms = SymbolTable::new(tokens.symbols().iter().cloned())?;
    let osyms = SymbolTable::new(tokens.symbols()[1..].iter().cloned())?;
    let n = tokens.len();
    let mut fst = Wfst::new(isyms, osyms);
    for _ in 1..n {
        fst.add_state();
    }
    let blank_in = 1;
    for s in 0..n as u32 {
        fst.set_final(s, 0.0);
        fst.add_arc(
            s,
            Arc {
                ilabel: blank_in,
                olabel: EPSILON,
                weight: 0.0,
                next: 0,
            },
        );
        for k in 1..n as u32 {
            let olabel = if k == s { EPSILON } else { k };
            fst.add_arc(
                s,
                Arc {
                    ilabel: k + 1,
                    olabel,
                    weight: 0.0,
                    next: k,
                },
            );
        }
    }
    Ok(fst)
}

/// Word symbol table for a lexicon: epsilon, then the words in lexicon order.
pub fn word_symbols(lexicon: &Lexicon) -> Result<SymbolTable> {
    SymbolTable::new(lexicon.entries().iter().map(|(w, _)| w.clone()))
}

/// Lexicon transducer. Each spelling leaves the shared start state emitting its
/// word on the first character and ends in a shared word-end state, which returns
/// to the start through an epsilon arc. Both states are final.
pub fn build_lexicon_fst(lexicon: &Lexicon) -> Result<Wfst> {
    if lexicon.is_empty() {
        return Err(Error::Invalid("lexicon is empty".into()));
    }
    let tokens = TokenSet::from_lexicon(lexicon)?;
    let isyms = SymbolTable::new(tokens.symbols()[1..].iter().cloned())?;
    let osyms = word_symbols(lexicon)?;
    let mut fst = Wfst::new(isyms, osyms);
    let word_end = fst.add_state();
    fst.set_final(0, 0.0);
    fst.set_final(word_end, 0.0);
    fst.add_arc(
        word_end,
        Arc {
            ilabel: EPSILON,
            olabel: EPSILON,
            weight: 0.0,
            next: 0,
        },
    );
    for (wi, (_, spelling)) in lexicon.entries().iter().enumerate() {
        let mut cur = 0;
        for (i, c) in spelling.iter().enumerate() {
            let ilabel = tokens.id(c).expect("inventory covers lexicon") as u32;
            let next = if i + 1 == spelling.len() {
                word_end
            } else {
                fst.add_state()
            };
            fst.add_arc(
                cur,
                Arc {
                    ilabel,
                    olabel: if i == 0 { wi as u32 + 1 } else { EPSILON },
                    weight: 0.0,
                    next,
                },
            );
            cur = next;
        }
    }
    fst.sort_arcs();
    Ok(fst)
}

/// Grammar acceptor for a backoff LM over the given word table. Each stored context
/// is a state; word arcs carry −ln p(w|h), backoff is an epsilon arc carrying
/// −ln α(h), and −ln p(</s>|h) is the final weight. Lexicon words unknown to the LM
/// take the `<unk>` arcs.
pub fn build_grammar_fst(lm: &BackoffLm, words: &SymbolTable) -> Result<Wfst> {
    let mut fst = Wfst::new(words.clone(), words.clone());
    let oov: Vec<u32> = (1..words.len() as u32)
        .filter(|&i| !lm.contains(words.symbol(i).unwrap()))
        .collect();
    let labels_for = |id: u32| -> Vec<u32> {
        if Some(id) == lm.unk_id() {
            oov.clone()
        } else {
            words.id(lm.symbol(id)).into_iter().collect()
        }
    };

    // History states: the empty history plus every stored context.
    let mut histories: Vec<Vec<u32>> = vec![Vec::new()];
    for n in 1..lm.order() {
        for (gram, _, bow) in lm.ngrams(n) {
            if bow.is_some() {
                histories.push(gram);
            }
        }
    }
    let mut state: HashMap<Vec<u32>, u32> = HashMap::new();
    for (i, h) in histories.iter().enumerate() {
        if i > 0 {
            fst.add_state();
        }
        state.insert(h.clone(), i as u32);
    }
    let resolve = |h: &[u32]| -> u32 {
        let keep = lm.order() - 1;
        let mut h = &h[h.len().saturating_sub(keep)..];
        loop {
            if let Some(&s) = state.get(h) {
                return s;
            }
            h = &h[1..];
        }
    };
    fst.set_start(resolve(&[lm.bos_id()]));

    let mut by_context: BTreeMap<Vec<u32>, Vec<(u32, f64)>> = BTreeMap::new();
    for n in 1..=lm.order() {
        for (gram, lp, _) in lm.ngrams(n) {
            let (ctx, w) = gram.split_at(n - 1);
            if state.contains_key(ctx) {
                by_context.entry(ctx.to_vec()).or_default().push((w[0], lp));
            }
        }
    }
    for (h, s) in histories.iter().zip(0u32..) {
        for &(w, lp) in by_context.get(h).map(Vec::as_slice).unwrap_or(&[]) {
            if w == lm.bos_id() || !lp.is_finite() {
                continue;
            }
            if w == lm.eos_id() {
                fst.set_final(s, -lp);
                continue;
            }
            let mut next_h = h.clone();
            next_h.push(w);
            let next = resolve(&next_h);
            for label in labels_for(w) {
                fst.add_arc(
                    s,
                    Arc {
                        ilabel: label,
                        olabel: label,
                        weight: -lp,
                        next,
                    },
                );
            }
        }
        if !h.is_empty() {
            let bow = lm.backoff_ids(h);
            fst.add_arc(
                s,
                Arc {
                    ilabel: EPSILON,
                    olabel: EPSILON,
                    weight: -bow,
                    next: resolve(&h[1..]),
                },
            );
        }
    }
    fst.sort_arcs();
    Ok(fst)
}

/// compose(compose(T, L), G): CTC tokens in, words out.
pub fn build_tlg(tokens: &Wfst, lexicon: &Wfst, grammar: &Wfst) -> Result<Wfst> {
    compose(&compose(tokens, lexicon)?, grammar)
}

/// Convenience: builds T, L and G from their sources and composes them.
pub fn build_tlg_from(lexicon: &Lexicon, lm: &BackoffLm) -> Result<Wfst> {
    let tokens = TokenSet::from_lexicon(lexicon)?;
    let t = build_token_fst(&tokens)?;
    let l = build_lexicon_fst(lexicon)?;
    let g = build_grammar_fst(lm, l.osyms())?;
    build_tlg(&t, &l, &g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beam: f64,
    pub acoustic_scale: f64,
    pub max_active: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 16.0,
            acoustic_scale: 1.0,
            max_active: 2000,
        }
    }
}

impl DecodeConfig {
    /// No pruning at all: the exact best path.
    pub fn exhaustive(acoustic_scale: f64) -> Self {
        DecodeConfig {
            beam: f64::INFINITY,
            acoustic_scale,
            max_active: usize::MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceArc {
    /// Frame consumed by the arc; `None` for epsilon arcs.
    pub frame: Option<usize>,
    pub from: u32,
    pub to: u32,
    pub ilabel: u32,
    pub olabel: u32,
    pub graph_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub words: Vec<u32>,
    pub total_cost: f64,
    pub trace: Vec<TraceArc>,
}

const NO_NODE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct TraceNode {
    parent: u32,
    from: u32,
    arc: u32,
    frame: u32,
}

#[derive(Clone, Copy)]
enum Back {
    Node(u32),
    /// Reached by an epsilon arc from another token of the same frame.
    Same(u32),
}

#[derive(Clone, Copy)]
struct Token {
    cost: f64,
    back: Back,
    from: u32,
    arc: u32,
    node: u32,
}

struct Frontier {
    slot: Vec<u32>,
    states: Vec<u32>,
    tokens: Vec<Token>,
}

impl Frontier {
    fn new(n: usize) -> Self {
        Frontier {
            slot: vec![u32::MAX; n],
            states: Vec::new(),
            tokens: Vec::new(),
        }
    }

    fn clear(&mut self) {
        for &s in &self.states {
            self.slot[s as usize] = u32::MAX;
        }
        self.states.clear();
        self.tokens.clear();
    }

    fn get(&self, s: u32) -> Option<&Token> {
        let i = self.slot[s as usize];
        (i != u32::MAX).then(|| &self.tokens[i as usize])
    }

    /// Keeps the cheaper token; ties keep the earlier one.
    fn relax(&mut self, s: u32, tok: Token) -> bool {
        let i = self.slot[s as usize];
        if i == u32::MAX {
            self.slot[s as usize] = self.tokens.len() as u32;
            self.states.push(s);
            self.tokens.push(tok);
            true
        } else if tok.cost < self.tokens[i as usize].cost {
            self.tokens[i as usize] = tok;
            true
        } else {
            false
        }
    }

    fn best(&self) -> f64 {
        self.tokens.iter().map(|t| t.cost).fold(f64::INFINITY, f64::min)
    }
}

fn epsilon_closure(graph: &Wfst, frontier: &mut Frontier, cutoff: f64) {
    let mut queue: VecDeque<u32> = {
        let mut s = frontier.states.clone();
        s.sort_unstable();
        s.into()
    };
    let mut queued = vec![false; 0];
    queued.resize(graph.num_states(), false);
    for &s in &queue {
        queued[s as usize] = true;
    }
    while let Some(s) = queue.pop_front() {
        queued[s as usize] = false;
        let cost = frontier.get(s).expect("queued states are active").cost;
        for (ai, arc) in graph.arcs(s).iter().enumerate() {
            if arc.ilabel != EPSILON {
                continue;
            }
            let c = cost + arc.weight;
            if c > cutoff {
                continue;
            }
            let tok = Token {
                cost: c,
                back: Back::Same(s),
                from: s,
                arc: ai as u32,
                node: NO_NODE,
            };
            if frontier.relax(arc.next, tok) && !queued[arc.next as usize] {
                queued[arc.next as usize] = true;
                queue.push_back(arc.next);
            }
        }
    }
}

fn commit(frontier: &mut Frontier, arena: &mut Vec<TraceNode>, frame: u32) {
    fn node_of(frontier: &mut Frontier, arena: &mut Vec<TraceNode>, s: u32, frame: u32, depth: usize) -> u32 {
        let i = frontier.slot[s as usize] as usize;
        let tok = frontier.tokens[i];
        if tok.node != NO_NODE {
            return tok.node;
        }
        assert!(depth <= frontier.tokens.len(), "epsilon back-pointer cycle");
        let parent = match tok.back {
            Back::Node(n) => n,
            Back::Same(p) => node_of(frontier, arena, p, frame, depth + 1),
        };
        arena.push(TraceNode {
            parent,
            from: tok.from,
            arc: tok.arc,
            frame,
        });
        let id = (arena.len() - 1) as u32;
        frontier.tokens[i].node = id;
        id
    }
    let states = frontier.states.clone();
    for s in states {
        node_of(frontier, arena, s, frame, 0);
    }
}

fn prune(frontier: &mut Frontier, beam: f64, max_active: usize) {
    let best = frontier.best();
    let mut kept: Vec<(u32, Token)> = frontier
        .states
        .iter()
        .zip(&frontier.tokens)
        .filter(|(_, t)| t.cost <= best + beam)
        .map(|(&s, &t)| (s, t))
        .collect();
    if kept.len() > max_active {
        kept.sort_by(|x, y| x.1.cost.total_cmp(&y.1.cost).then(x.0.cmp(&y.0)));
        kept.truncate(max_active);
    }
    kept.sort_by_key(|&(s, _)| s);
    frontier.clear();
    for (s, t) in kept {
        frontier.relax(s, t);
    }
}

/// Frame-synchronous Viterbi beam search. Emitting arcs cost
/// `weight + acoustic_scale * -ln p(ilabel - 1 | t)`; epsilon arcs consume no frame.
pub fn decode_frames(posteriors: &PosteriorGrid, graph: &Wfst, config: DecodeConfig) -> Result<DecodeResult> {
    if posteriors.frames() == 0 {
        return Err(Error::Invalid("empty posterior grid".into()));
    }
    if graph.isyms().len() != posteriors.vocab() + 1 {
        return Err(Error::SymbolMismatch(format!(
            "graph has {} input tokens, posteriors have {}",
            graph.isyms().len() - 1,
            posteriors.vocab()
        )));
    }
    if !(config.beam > 0.0) {
        return Err(Error::Invalid("beam must be positive".into()));
    }
    let n = graph.num_states();
    let mut arena: Vec<TraceNode> = Vec::new();
    let mut cur = Frontier::new(n);
    let mut next = Frontier::new(n);
    cur.relax(
        graph.start(),
        Token {
            cost: 0.0,
            back: Back::Node(NO_NODE),
            from: NO_NODE,
            arc: NO_NODE,
            node: NO_NODE,
        },
    );
    epsilon_closure(graph, &mut cur, f64::INFINITY);
    commit(&mut cur, &mut arena, u32::MAX);

    for t in 0..posteriors.frames() {
        prune(&mut cur, config.beam, config.max_active);
        let row = posteriors.row(t);
        next.clear();
        let mut best = f64::INFINITY;
        for (&s, tok) in cur.states.iter().zip(&cur.tokens) {
            for (ai, arc) in graph.arcs(s).iter().enumerate() {
                if arc.ilabel == EPSILON {
                    continue;
                }
                let c = tok.cost + arc.weight - config.acoustic_scale * row[arc.ilabel as usize - 1];
                if !c.is_finite() || c > best + config.beam {
                    continue;
                }
                best = best.min(c);
                next.relax(
                    arc.next,
                    Token {
                        cost: c,
                        back: Back::Node(tok.node),
                        from: s,
                        arc: ai as u32,
                        node: NO_NODE,
                    },
                );
            }
        }
        if next.states.is_empty() {
            return Err(Error::SearchFailed(format!("no active state survives frame {t}")));
        }
        epsilon_closure(graph, &mut next, best + config.beam);
        commit(&mut next, &mut arena, t as u32);
        std::mem::swap(&mut cur, &mut next);
    }

    let mut best: Option<(f64, u32)> = None;
    let mut order: Vec<(u32, f64, u32)> = cur
        .states
        .iter()
        .zip(&cur.tokens)
        .filter_map(|(&s, tok)| graph.final_weight(s).map(|f| (s, tok.cost + f, tok.node)))
        .collect();
    order.sort_by_key(|&(s, _, _)| s);
    for (_, c, node) in order {
        if best.is_none_or(|(b, _)| c < b) {
            best = Some((c, node));
        }
    }
    let (total_cost, mut node) =
        best.ok_or_else(|| Error::SearchFailed("no final state reached".into()))?;

    let mut trace = Vec::new();
    while node != NO_NODE {
        let nd = arena[node as usize];
        if nd.from == NO_NODE {
            break;
        }
        let arc = graph.arcs(nd.from)[nd.arc as usize];
        trace.push(TraceArc {
            frame: (arc.ilabel != EPSILON).then_some(nd.frame as usize),
            from: nd.from,
            to: arc.next,
            ilabel: arc.ilabel,
            olabel: arc.olabel,
            graph_weight: arc.weight,
        });
        node = nd.parent;
    }
    trace.reverse();
    let words = trace
        .iter()
        .filter(|a| a.olabel != EPSILON)
        .map(|a| a.olabel)
        .collect();
    Ok(DecodeResult {
        words,
        total_cost,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lexicon(entries: &[(&str, &str)]) -> Lexicon {
        Lexicon::new(entries.iter().map(|(w, s)| {
            (w.to_string(), s.split_whitespace().map(str::to_string).collect())
        }))
        .unwrap()
    }

    /// Follows the unique path of an input-deterministic transducer.
    fn transduce(fst: &Wfst, input: &[u32]) -> Option<Vec<u32>> {
        let mut s = fst.start();
        let mut out = Vec::new();
        for &x in input {
            let arc = fst.arcs(s).iter().find(|a| a.ilabel == x)?;
            if arc.olabel != EPSILON {
                out.push(arc.olabel);
            }
            s = arc.next;
        }
        fst.final_weight(s).map(|_| out)
    }

    #[test]
    fn token_fst_collapses() {
        let lex = lexicon(&[("ab", "a b")]);
        let tokens = TokenSet::from_lexicon(&lex).unwrap();
        let t = build_token_fst(&tokens).unwrap();
        // ilabels: blank=1, a=2, b=3; olabels: a=1, b=2
        assert_eq!(transduce(&t, &[2, 2, 1, 2]), Some(vec![1, 1]));
        assert_eq!(transduce(&t, &[1, 1]), Some(vec![]));
    }

    fn paths_from(fst: &Wfst, s: u32, budget: usize, input: &mut Vec<u32>, output: &mut Vec<u32>, w: f64, out: &mut Vec<(Vec<u32>, Vec<u32>, f64)>) {
        if let Some(f) = fst.final_weight(s) {
            out.push((input.clone(), output.clone(), w + f));
        }
        if budget == 0 {
            return;
        }
        for a in fst.arcs(s) {
            if a.ilabel != 0 {
                input.push(a.ilabel);
            }
            if a.olabel != 0 {
                output.push(a.olabel);
            }
            paths_from(fst, a.next, budget - 1, input, output, w + a.weight, out);
            if a.ilabel != 0 {
                input.pop();
            }
            if a.olabel != 0 {
                output.pop();
            }
        }
    }

    #[test]
    fn lexicon_fst_segments_words() {
        let lex = lexicon(&[("ab", "a b")]);
        let l = build_lexicon_fst(&lex).unwrap();
        let mut out = Vec::new();
        paths_from(&l, l.start(), 8, &mut vec![], &mut vec![], 0.0, &mut out);
        let find = |inp: &[u32]| out.iter().filter(|p| p.0 == inp).map(|p| p.1.clone()).collect::<Vec<_>>();
        assert!(find(&[1, 2]).contains(&vec![1]));
        assert!(find(&[1, 2, 1, 2]).contains(&vec![1, 1]));
        assert!(find(&[1]).is_empty());
    }

    #[test]
    fn compose_rejects_mismatched_tables() {
        let a = build_lexicon_fst(&lexicon(&[("ab", "a b")])).unwrap();
        let b = build_lexicon_fst(&lexicon(&[("cd", "c d")])).unwrap();
        assert!(matches!(compose(&a, &b), Err(Error::SymbolMismatch(_))));
    }

    #[test]
    fn compose_with_empty_language_is_empty() {
        let l = build_lexicon_fst(&lexicon(&[("ab", "a b")])).unwrap();
        let empty = Wfst::new(l.osyms().clone(), l.osyms().clone());
        let c = compose(&l, &empty).unwrap();
        assert_eq!(c.num_states(), 1);
        assert!(c.final_weight(c.start()).is_none());
        assert!(c.arcs(c.start()).is_empty());
    }

    #[test]
    fn att_round_trip_is_exact() {
        let lex = lexicon(&[("ab", "a b"), ("b", "b")]);
        let lm = BackoffLm::train(&[vec!["ab", "b"], vec!["b"]], 2).unwrap();
        let g = build_tlg_from(&lex, &lm).unwrap();
        let text = g.to_att();
        let back = Wfst::parse_att(&text, g.isyms().clone(), g.osyms().clone()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_att(), text);
        let syms = SymbolTable::parse(&g.osyms().to_text()).unwrap();
        assert_eq!(&syms, g.osyms());
    }

    #[test]
    fn unambiguous_decode() {
        let lex = lexicon(&[("ab", "a b")]);
        let lm = BackoffLm::uniform(&["ab"]);
        let graph = build_tlg_from(&lex, &lm).unwrap();
        // tokens: blank=0, a=1, b=2; path a a - b
        let path = [1usize, 1, 0, 2];
        let mut v = vec![(1e-9f64).ln(); 4 * 3];
        for (t, &k) in path.iter().enumerate() {
            v[t * 3 + k] = 0.0;
        }
        let grid = PosteriorGrid::from_logits(4, 3, &v).unwrap();
        let r = decode_frames(&grid, &graph, DecodeConfig::default()).unwrap();
        assert_eq!(r.words, vec![1]);
        let graph_weight: f64 = r.trace.iter().map(|a| a.graph_weight).sum::<f64>()
            + graph.final_weight(r.trace.last().unwrap().to).unwrap_or(0.0);
        let acoustic: f64 = path.iter().enumerate().map(|(t, &k)| -grid.get(t, k)).sum();
        assert!((r.total_cost - graph_weight - acoustic).abs() < 1e-9);
    }

    #[test]
    fn decode_rejects_bad_inputs() {
        let lex = lexicon(&[("ab", "a b")]);
        let graph = build_tlg_from(&lex, &BackoffLm::uniform(&["ab"])).unwrap();
        let empty = PosteriorGrid::new(0, 3, vec![]).unwrap();
        assert!(decode_frames(&empty, &graph, DecodeConfig::default()).is_err());
        let wrong = PosteriorGrid::from_logits(1, 4, &[0.0; 4]).unwrap();
        assert!(matches!(
            decode_frames(&wrong, &graph, DecodeConfig::default()),
            Err(Error::SymbolMismatch(_))
        ));
    }
}
