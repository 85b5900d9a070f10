//! Error correction: a Levenshtein nearest-neighbour baseline and a
//! character-level encoder-decoder with additive attention, a copy gate,
//! coverage, and a diagonal attention penalty.
//!
//! The encoder is a bidirectional LSTM over the token's characters. The
//! decoder LSTM (hidden `2H`) reads the previous character's embedding and
//! the attention context. Output probabilities mix generation from the
//! character vocabulary with copying from the source, so characters unseen
//! during training can still be reproduced.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::Lexicon;
use crate::metrics::levenshtein;
use crate::numkit::{clip_global_norm, read_checkpoint, write_checkpoint, Adam, NumError, Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Joins a token with its neighbours in context mode.
pub const CONTEXT_SEPARATOR: char = ' ';

#[derive(Debug, Error)]
pub enum CorrectError {
    #[error("empty input")]
    EmptyInput,
    #[error("degenerate training data: {0}")]
    DegenerateData(String),
    #[error("invalid corrector configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid vocabulary manifest at line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Character inventory. Specials occupy ids `0..4`, regular characters
/// follow in code-point order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocab {
    pub fn from_texts<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<char> = texts.into_iter().flat_map(|s| s.as_ref().chars().collect::<Vec<_>>()).collect();
        Self::from_chars(set.into_iter().collect())
    }

    fn from_chars(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + SPECIALS.len())).collect();
        Self { chars, index }
    }

    pub fn len(&self) -> usize {
        SPECIALS.len() + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn get(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn id(&self, c: char) -> usize {
        self.get(c).unwrap_or(UNK)
    }

    pub fn char(&self, id: usize) -> Option<char> {
        id.checked_sub(SPECIALS.len()).and_then(|i| self.chars.get(i)).copied()
    }

    pub fn encode(&self, s: &str) -> Vec<usize> {
        s.chars().map(|c| self.id(c)).collect()
    }

    /// One `char<TAB>id` line per entry, specials included.
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        for (id, name) in SPECIALS.iter().enumerate() {
            out.push_str(&format!("{name}\t{id}\n"));
        }
        for (i, &c) in self.chars.iter().enumerate() {
            let shown = match c {
                '\\' => "\\\\".to_string(),
                '\t' => "\\t".to_string(),
                '\n' => "\\n".to_string(),
                c => c.to_string(),
            };
            out.push_str(&format!("{shown}\t{}\n", i + SPECIALS.len()));
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self, CorrectError> {
        let mut chars = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let bad = |reason: &str| CorrectError::Manifest {
                line: n + 1,
                reason: reason.to_string(),
            };
            let (sym, id) = line.rsplit_once('\t').ok_or_else(|| bad("expected char<TAB>id"))?;
            let id: usize = id.parse().map_err(|_| bad("id is not a number"))?;
            if id != n {
                return Err(bad("ids must be consecutive from 0"));
            }
            if id < SPECIALS.len() {
                if sym != SPECIALS[id] {
                    return Err(bad("special entries must come first"));
                }
                continue;
            }
            let c = match sym {
                "\\\\" => '\\',
                "\\t" => '\t',
                "\\n" => '\n',
                s => {
                    let mut it = s.chars();
                    match (it.next(), it.next()) {
                        (Some(c), None) => c,
                        _ => return Err(bad("expected a single character")),
                    }
                }
            };
            chars.push(c);
        }
        if chars.len() + SPECIALS.len() != text.lines().count() {
            return Err(CorrectError::Manifest {
                line: 0,
                reason: "missing special entries".into(),
            });
        }
        let vocab = Self::from_chars(chars);
        if vocab.index.len() != vocab.chars.len() {
            return Err(CorrectError::Manifest {
                line: 0,
                reason: "duplicate character".into(),
            });
        }
        Ok(vocab)
    }
}

/// Gate order in the packed weights is input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    /// `(input + hidden) x 4 hidden`
    pub w: Tensor,
    /// `1 x 4 hidden`
    pub b: Tensor,
}

impl Lstm {
    fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / ((input + hidden) as f64).sqrt();
        let w = Tensor::uniform(input + hidden, 4 * hidden, scale, rng);
        let mut b = Tensor::zeros(1, 4 * hidden);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        Self { w, b }
    }

    fn hidden(&self) -> usize {
        self.b.cols() / 4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFlags {
    pub copy: bool,
    pub coverage: bool,
    pub context: bool,
}

/// Ablations compared in evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Copy,
    Final,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Self::Base),
            "copy" => Ok(Self::Copy),
            "final" => Ok(Self::Final),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectorConfig {
    pub embedding_dim: usize,
    pub hidden: usize,
    /// Diagonal window.
    pub m: usize,
    pub beam_width: usize,
    pub max_output_len: usize,
    pub lambda_diag: f64,
    pub lambda_cov: f64,
    pub epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Training always conditions on the gold prefix; `false` is rejected.
    pub teacher_forcing: bool,
    pub copy: bool,
    pub coverage: bool,
    pub context: bool,
    /// Stop once greedy exact match on the training set reaches this value.
    pub target_train_accuracy: Option<f64>,
}

impl Default for CorrectorConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 32,
            hidden: 64,
            m: 3,
            beam_width: 5,
            max_output_len: 48,
            lambda_diag: 1.0,
            lambda_cov: 1.0,
            epochs: 60,
            patience: 3,
            learning_rate: 1e-3,
            batch_size: 16,
            clip_norm: 5.0,
            seed: 0,
            teacher_forcing: true,
            copy: true,
            coverage: true,
            context: false,
            target_train_accuracy: None,
        }
    }
}

impl CorrectorConfig {
    pub fn variant(variant: Variant) -> Self {
        let base = Self::default();
        base.with_variant(variant)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        let (copy, extras) = match variant {
            Variant::Base => (false, false),
            Variant::Copy => (true, false),
            Variant::Final => (true, true),
        };
        self.copy = copy;
        self.coverage = extras;
        self.lambda_cov = if extras { 1.0 } else { 0.0 };
        self.lambda_diag = if extras { 1.0 } else { 0.0 };
        self
    }

    pub fn flags(&self) -> ModelFlags {
        ModelFlags {
            copy: self.copy,
            coverage: self.coverage,
            context: self.context,
        }
    }

    pub fn validate(&self) -> Result<(), CorrectError> {
        let bad = |m: &str| Err(CorrectError::InvalidConfig(m.to_string()));
        if self.m < 1 {
            return bad("m must be at least 1");
        }
        if self.beam_width < 1 {
            return bad("beam_width must be at least 1");
        }
        if !(self.lambda_diag >= 0.0 && self.lambda_cov >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.embedding_dim == 0 || self.hidden == 0 || self.batch_size == 0 {
            return bad("sizes must be positive");
        }
        if !self.teacher_forcing {
            return bad("only teacher-forced training is supported");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqParams {
    pub vocab: Vocab,
    pub flags: ModelFlags,
    /// Shared by encoder and decoder inputs, `|V| x E`.
    pub embedding: Tensor,
    pub enc_fwd: Lstm,
    pub enc_bwd: Lstm,
    pub dec: Lstm,
    /// Decoder state projection, `2H x A`.
    pub att_w1: Tensor,
    /// Encoder state projection, `2H x A`.
    pub att_w2: Tensor,
    /// Coverage projection, `1 x A`.
    pub att_wg: Tensor,
    /// Score vector, `A x 1`.
    pub att_v: Tensor,
    /// `[s_t; c_t]` to vocabulary logits, `4H x |V|`.
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub copy_wc: Tensor,
    pub copy_ws: Tensor,
    pub copy_wx: Tensor,
    pub copy_b: Tensor,
}

const PARAM_NAMES: [&str; 17] = [
    "embedding",
    "enc_fwd.w",
    "enc_fwd.b",
    "enc_bwd.w",
    "enc_bwd.b",
    "dec.w",
    "dec.b",
    "att.w1",
    "att.w2",
    "att.wg",
    "att.v",
    "out.w",
    "out.b",
    "copy.wc",
    "copy.ws",
    "copy.wx",
    "copy.b",
];

impl Seq2SeqParams {
    pub fn init(vocab: Vocab, embedding_dim: usize, hidden: usize, flags: ModelFlags, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, h, v) = (embedding_dim, hidden, vocab.len());
        let a = h;
        let glorot = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Tensor::uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
        };
        Self {
            embedding: Tensor::uniform(v, e, 0.1, &mut rng),
            enc_fwd: Lstm::init(e, h, &mut rng),
            enc_bwd: Lstm::init(e, h, &mut rng),
            dec: Lstm::init(e + 2 * h, 2 * h, &mut rng),
            att_w1: glorot(2 * h, a, &mut rng),
            att_w2: glorot(2 * h, a, &mut rng),
            att_wg: glorot(1, a, &mut rng),
            att_v: glorot(a, 1, &mut rng),
            out_w: glorot(4 * h, v, &mut rng),
            out_b: Tensor::zeros(1, v),
            copy_wc: glorot(2 * h, 1, &mut rng),
            copy_ws: glorot(2 * h, 1, &mut rng),
            copy_wx: glorot(e, 1, &mut rng),
            copy_b: Tensor::zeros(1, 1),
            vocab,
            flags,
        }
    }

    pub fn hidden(&self) -> usize {
        self.enc_fwd.hidden()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn tensors(&self) -> [&Tensor; 17] {
        [
            &self.embedding,
            &self.enc_fwd.w,
            &self.enc_fwd.b,
            &self.enc_bwd.w,
            &self.enc_bwd.b,
            &self.dec.w,
            &self.dec.b,
            &self.att_w1,
            &self.att_w2,
            &self.att_wg,
            &self.att_v,
            &self.out_w,
            &self.out_b,
            &self.copy_wc,
            &self.copy_ws,
            &self.copy_wx,
            &self.copy_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 17] {
        [
            &mut self.embedding,
            &mut self.enc_fwd.w,
            &mut self.enc_fwd.b,
            &mut self.enc_bwd.w,
            &mut self.enc_bwd.b,
            &mut self.dec.w,
            &mut self.dec.b,
            &mut self.att_w1,
            &mut self.att_w2,
            &mut self.att_wg,
            &mut self.att_v,
            &mut self.out_w,
            &mut self.out_b,
            &mut self.copy_wc,
            &mut self.copy_ws,
            &mut self.copy_wx,
            &mut self.copy_b,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Tensor blob; the vocabulary travels separately as a manifest.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let f = |b: bool| if b { 1.0 } else { 0.0 };
        let flags = Tensor::row(&[f(self.flags.copy), f(self.flags.coverage), f(self.flags.context)]);
        let mut named: Vec<(&str, &Tensor)> = PARAM_NAMES.iter().copied().zip(self.tensors()).collect();
        named.push(("flags", &flags));
        write_checkpoint(&named)
    }

    pub fn from_checkpoint(bytes: &[u8], vocab: Vocab) -> Result<Self, CorrectError> {
        let mut entries = read_checkpoint(bytes)?;
        let bad = |m: String| CorrectError::Checkpoint(m);
        if entries.len() != PARAM_NAMES.len() + 1 {
            return Err(bad(format!("expected {} tensors, found {}", PARAM_NAMES.len() + 1, entries.len())));
        }
        let (name, flags) = entries.pop().unwrap();
        if name != "flags" || flags.len() != 3 {
            return Err(bad("missing flags tensor".into()));
        }
        let flags = ModelFlags {
            copy: flags.data()[0] != 0.0,
            coverage: flags.data()[1] != 0.0,
            context: flags.data()[2] != 0.0,
        };
        let e = entries[0].1.cols();
        let h = entries[1].1.cols() / 4;
        let mut params = Self::init(vocab, e, h, flags, 0);
        for ((name, t), (expect, slot)) in entries.into_iter().zip(PARAM_NAMES.iter().zip(params.tensors_mut())) {
            if name != *expect || t.shape() != slot.shape() {
                return Err(bad(format!(
                    "tensor {name} {:?} does not fit {expect} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(params)
    }
}

/// Parameter handles on a tape, in [`PARAM_NAMES`] order.
#[derive(Debug, Clone, Copy)]
pub struct Bound {
    vars: [Var; 17],
}

impl Bound {
    pub fn new<'a>(params: &'a Seq2SeqParams, tape: &mut Tape<'a>) -> Self {
        let vars = params.tensors().map(|t| tape.param(t));
        Self { vars }
    }

    pub fn from_vars(vars: &[Var]) -> Self {
        Self {
            vars: vars.try_into().expect("17 parameter handles"),
        }
    }

    pub fn vars(&self) -> &[Var; 17] {
        &self.vars
    }

    fn emb(&self) -> Var {
        self.vars[0]
    }
    fn lstm(&self, which: usize) -> (Var, Var) {
        (self.vars[1 + 2 * which], self.vars[2 + 2 * which])
    }
    fn att(&self) -> (Var, Var, Var, Var) {
        (self.vars[7], self.vars[8], self.vars[9], self.vars[10])
    }
    fn out(&self) -> (Var, Var) {
        (self.vars[11], self.vars[12])
    }
    fn gate(&self) -> (Var, Var, Var, Var) {
        (self.vars[13], self.vars[14], self.vars[15], self.vars[16])
    }
}

fn lstm_step(tape: &mut Tape<'_>, (w, b): (Var, Var), x: Var, h: Var, c: Var) -> Result<(Var, Var), NumError> {
    let hidden = tape.value(h).cols();
    let xh = tape.concat(&[x, h])?;
    let z = tape.matmul(xh, w)?;
    let z = tape.add(z, b)?;
    let i = tape.slice(z, 0, hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.slice(z, hidden, 2 * hidden)?;
    let f = tape.sigmoid(f)?;
    let g = tape.slice(z, 2 * hidden, 3 * hidden)?;
    let g = tape.tanh(g)?;
    let o = tape.slice(z, 3 * hidden, 4 * hidden)?;
    let o = tape.sigmoid(o)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c2 = tape.add(fc, ig)?;
    let tc = tape.tanh(c2)?;
    let h2 = tape.mul(o, tc)?;
    Ok((h2, c2))
}

/// Encoder output for one source sequence.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `N x 2H`, row `i` is `[forward_i; backward_i]`.
    pub states: Var,
    /// `states · W2`, cached across decoder steps.
    pub projected: Var,
    ones: Var,
    pub init_h: Var,
    pub init_c: Var,
    pub len: usize,
}

pub fn encode(tape: &mut Tape<'_>, bound: &Bound, ids: &[usize]) -> Result<Encoded, CorrectError> {
    if ids.is_empty() {
        return Err(CorrectError::EmptyInput);
    }
    let n = ids.len();
    let (fw, bw) = (bound.lstm(0), bound.lstm(1));
    let hidden = tape.value(fw.1).cols() / 4;
    let xs = ids
        .iter()
        .map(|&id| tape.embedding_lookup(bound.emb(), &[id]))
        .collect::<Result<Vec<_>, _>>()?;
    let zero = tape.constant(Tensor::zeros(1, hidden));
    let (mut h, mut c) = (zero, zero);
    let mut fwd = Vec::with_capacity(n);
    for &x in &xs {
        (h, c) = lstm_step(tape, fw, x, h, c)?;
        fwd.push(h);
    }
    let (fwd_c, mut h, mut c2) = (c, zero, zero);
    let mut bwd = vec![zero; n];
    for i in (0..n).rev() {
        (h, c2) = lstm_step(tape, bw, xs[i], h, c2)?;
        bwd[i] = h;
    }
    let rows = (0..n)
        .map(|i| tape.concat(&[fwd[i], bwd[i]]))
        .collect::<Result<Vec<_>, _>>()?;
    let states = tape.concat_rows(&rows)?;
    let projected = tape.matmul(states, bound.att().1)?;
    let init_h = tape.concat(&[fwd[n - 1], bwd[0]])?;
    let init_c = tape.concat(&[fwd_c, c2])?;
    let ones = tape.constant(Tensor::filled(n, 1, 1.0));
    Ok(Encoded {
        states,
        projected,
        ones,
        init_h,
        init_c,
        len: n,
    })
}

/// Encoder states as plain values, `N x 2H`.
pub fn encode_chars(input: &str, params: &Seq2SeqParams) -> Result<Tensor, CorrectError> {
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape);
    let enc = encode(&mut tape, &bound, &params.vocab.encode(input))?;
    Ok(tape.value(enc.states).clone())
}

/// Scores `v · tanh(W1 S + W2 h_i + Wg g_i)`, normalizes them over source
/// positions and returns `(alpha, context)`. Pass `None` to drop the
/// coverage term.
pub fn attention_step(
    tape: &mut Tape<'_>,
    bound: &Bound,
    enc: &Encoded,
    s_prev: Var,
    coverage: Option<Var>,
) -> Result<(Var, Var), CorrectError> {
    let (w1, _, wg, v) = bound.att();
    let n = enc.len;
    let sp = tape.matmul(s_prev, w1)?;
    let sp = tape.matmul(enc.ones, sp)?;
    let mut pre = tape.add(enc.projected, sp)?;
    if let Some(g) = coverage {
        if tape.value(g).len() != n {
            return Err(NumError::ShapeMismatch {
                op: "attention_step",
                left: tape.value(g).shape().to_vec(),
                right: vec![1, n],
            }
            .into());
        }
        let gc = tape.reshape(g, n, 1)?;
        let gp = tape.matmul(gc, wg)?;
        pre = tape.add(pre, gp)?;
    }
    let act = tape.tanh(pre)?;
    let e = tape.matmul(act, v)?;
    let e = tape.reshape(e, 1, n)?;
    let alpha = tape.softmax(e)?;
    let context = tape.matmul(alpha, enc.states)?;
    Ok((alpha, context))
}

/// Source characters mapped into the extended output space: in-vocabulary
/// characters keep their ids, others get fresh ids past `|V|`.
#[derive(Debug, Clone)]
pub struct SourceMap {
    pub ids: Vec<usize>,
    pub extended: Vec<usize>,
    pub oov: Vec<char>,
    vocab_len: usize,
}

impl SourceMap {
    pub fn new(source: &str, vocab: &Vocab) -> Self {
        let mut oov: Vec<char> = Vec::new();
        let mut ids = Vec::new();
        let mut extended = Vec::new();
        for c in source.chars() {
            match vocab.get(c) {
                Some(id) => {
                    ids.push(id);
                    extended.push(id);
                }
                None => {
                    ids.push(UNK);
                    let k = oov.iter().position(|&o| o == c).unwrap_or_else(|| {
                        oov.push(c);
                        oov.len() - 1
                    });
                    extended.push(vocab.len() + k);
                }
            }
        }
        Self {
            ids,
            extended,
            oov,
            vocab_len: vocab.len(),
        }
    }

    pub fn extended_len(&self) -> usize {
        self.vocab_len + self.oov.len()
    }

    /// Output id for a target character.
    pub fn target_id(&self, c: char, vocab: &Vocab, copy: bool) -> usize {
        match vocab.get(c) {
            Some(id) => id,
            None if copy => self.oov.iter().position(|&o| o == c).map_or(UNK, |k| self.vocab_len + k),
            None => UNK,
        }
    }

    /// `N x (|V| + oov)` scatter matrix for the copy distribution.
    fn scatter(&self) -> Tensor {
        let cols = self.extended_len();
        let mut t = Tensor::zeros(self.extended.len(), cols);
        for (i, &id) in self.extended.iter().enumerate() {
            t.data_mut()[i * cols + id] = 1.0;
        }
        t
    }

    fn char_of(&self, id: usize, vocab: &Vocab) -> Option<char> {
        if id >= self.vocab_len {
            self.oov.get(id - self.vocab_len).copied()
        } else {
            vocab.char(id)
        }
    }

    /// Input id for feeding an emitted output back into the decoder.
    fn input_id(&self, id: usize) -> usize {
        if id >= self.vocab_len {
            UNK
        } else {
            id
        }
    }
}

/// One decoder step's outputs.
#[derive(Debug, Clone, Copy)]
pub struct DecodeOut {
    /// Distribution over the extended vocabulary (or `V` without copying).
    pub p_final: Var,
    pub p_gen: Option<Var>,
    pub state: (Var, Var),
}

/// Per-sequence constants used by [`decode_step`].
#[derive(Debug, Clone, Copy)]
pub struct CopyTarget {
    scatter: Var,
    padding: Option<Var>,
}

impl CopyTarget {
    pub fn new(tape: &mut Tape<'_>, map: &SourceMap) -> Self {
        let scatter = tape.constant(map.scatter());
        let padding = (!map.oov.is_empty()).then(|| tape.constant(Tensor::zeros(1, map.oov.len())));
        Self { scatter, padding }
    }
}

/// Advances the decoder by one character and mixes generation with copying:
/// `P = P_g · P_vocab + (1 − P_g) · Σ_{i: src_i = w} alpha_i`.
pub fn decode_step(
    tape: &mut Tape<'_>,
    bound: &Bound,
    prev: usize,
    state: (Var, Var),
    context: Var,
    alpha: Var,
    copy: Option<&CopyTarget>,
) -> Result<DecodeOut, CorrectError> {
    let x = tape.embedding_lookup(bound.emb(), &[prev])?;
    let input = tape.concat(&[x, context])?;
    let (s, c) = lstm_step(tape, bound.lstm(2), input, state.0, state.1)?;
    let (ow, ob) = bound.out();
    let sc = tape.concat(&[s, context])?;
    let logits = tape.matmul(sc, ow)?;
    let logits = tape.add(logits, ob)?;
    let p_vocab = tape.softmax(logits)?;
    let Some(copy) = copy else {
        return Ok(DecodeOut {
            p_final: p_vocab,
            p_gen: None,
            state: (s, c),
        });
    };
    let (wc, ws, wx, b) = bound.gate();
    let gc = tape.matmul(context, wc)?;
    let gs = tape.matmul(s, ws)?;
    let gx = tape.matmul(x, wx)?;
    let z = tape.add_all(&[gc, gs, gx])?;
    let z = tape.add(z, b)?;
    let p_gen = tape.sigmoid(z)?;
    let p_vocab = match copy.padding {
        Some(pad) => tape.concat(&[p_vocab, pad])?,
        None => p_vocab,
    };
    let generated = tape.mul(p_vocab, p_gen)?;
    let p_copy = tape.scale(p_gen, -1.0)?;
    let p_copy = tape.add_scalar(p_copy, 1.0)?;
    let copied = tape.matmul(alpha, copy.scatter)?;
    let copied = tape.mul(copied, p_copy)?;
    let p_final = tape.add(generated, copied)?;
    Ok(DecodeOut {
        p_final,
        p_gen: Some(p_gen),
        state: (s, c),
    })
}

/// Whether source position `i` lies outside the band around decoder step `t`
/// (both 1-indexed): `i <= t - m` or `i >= t + m`.
fn off_band(t: usize, i: usize, m: usize) -> bool {
    i + m <= t || i >= t + m
}

/// Attention mass outside the diagonal band, summed over decoder steps.
/// `offset` shifts the diagonal when the source carries a left context.
pub fn diag_loss_on_tape(tape: &mut Tape<'_>, alphas: &[Var], m: usize, offset: usize) -> Result<Var, NumError> {
    let n = tape.value(alphas[0]).cols();
    let mut mask = Tensor::zeros(alphas.len(), n);
    for t in 0..alphas.len() {
        for i in 0..n {
            if off_band(t + 1 + offset, i + 1, m) {
                mask.data_mut()[t * n + i] = 1.0;
            }
        }
    }
    let mask = tape.constant(mask);
    let a = tape.concat_rows(alphas)?;
    let masked = tape.mul(a, mask)?;
    tape.sum(masked)
}

/// `Σ_t Σ_i min(alpha_{t,i}, g_{t,i})` where `g_t` is the coverage before step `t`.
pub fn coverage_loss_on_tape(tape: &mut Tape<'_>, alphas: &[Var], coverages: &[Var]) -> Result<Var, NumError> {
    let a = tape.concat_rows(alphas)?;
    let g = tape.concat_rows(coverages)?;
    let m = tape.min(a, g)?;
    tape.sum(m)
}

fn constant_rows(tape: &mut Tape<'_>, alphas: &[Vec<f64>]) -> Vec<Var> {
    alphas.iter().map(|row| tape.constant(Tensor::row(row))).collect()
}

/// Diagonal loss of a `T x N` attention matrix.
pub fn loss_diag(alphas: &[Vec<f64>], m: usize) -> f64 {
    if alphas.is_empty() || alphas[0].is_empty() {
        return 0.0;
    }
    let mut tape = Tape::new();
    let rows = constant_rows(&mut tape, alphas);
    let l = diag_loss_on_tape(&mut tape, &rows, m, 0).expect("finite attention rows");
    tape.value(l).item()
}

/// Coverage loss of a `T x N` attention matrix, with `g_1 = 0`.
pub fn loss_coverage(alphas: &[Vec<f64>]) -> f64 {
    if alphas.is_empty() || alphas[0].is_empty() {
        return 0.0;
    }
    let mut tape = Tape::new();
    let rows = constant_rows(&mut tape, alphas);
    let n = alphas[0].len();
    let mut g = tape.constant(Tensor::zeros(1, n));
    let mut covs = Vec::with_capacity(rows.len());
    for &a in &rows {
        covs.push(g);
        g = tape.add(g, a).expect("equal widths");
    }
    let l = coverage_loss_on_tape(&mut tape, &rows, &covs).expect("finite attention rows");
    tape.value(l).item()
}

/// Coverage vectors implied by a `T x N` attention matrix.
pub fn coverage_vectors(alphas: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = alphas.first().map_or(0, Vec::len);
    let mut g = vec![0.0; n];
    let mut out = Vec::with_capacity(alphas.len() + 1);
    for a in alphas {
        out.push(g.clone());
        for (x, y) in g.iter_mut().zip(a) {
            *x += y;
        }
    }
    out.push(g);
    out
}

/// A training pair, optionally with neighbouring tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionPair {
    pub source: String,
    pub target: String,
    #[serde(default)]
    pub prev: Option<String>,
    #[serde(default)]
    pub next: Option<String>,
}

impl CorrectionPair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
            prev: None,
            next: None,
        }
    }
}

/// Model input text and the diagonal offset of the token inside it.
pub fn model_input(token: &str, prev: Option<&str>, next: Option<&str>, context: bool) -> (String, usize) {
    if !context {
        return (token.to_string(), 0);
    }
    let left = prev.unwrap_or("");
    let right = next.unwrap_or("");
    let text = format!("{left}{CONTEXT_SEPARATOR}{token}{CONTEXT_SEPARATOR}{right}");
    (text, left.chars().count() + 1)
}

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub m: usize,
    pub lambda_diag: f64,
    pub lambda_cov: f64,
}

impl From<&CorrectorConfig> for LossWeights {
    fn from(c: &CorrectorConfig) -> Self {
        Self {
            m: c.m,
            lambda_diag: c.lambda_diag,
            lambda_cov: c.lambda_cov,
        }
    }
}

/// A pair prepared for the tape.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    map: SourceMap,
    target: Vec<usize>,
    offset: usize,
}

impl PreparedPair {
    pub fn new(pair: &CorrectionPair, vocab: &Vocab, flags: ModelFlags) -> Result<Self, CorrectError> {
        let (text, offset) = model_input(&pair.source, pair.prev.as_deref(), pair.next.as_deref(), flags.context);
        if text.is_empty() {
            return Err(CorrectError::EmptyInput);
        }
        let map = SourceMap::new(&text, vocab);
        let mut target: Vec<usize> = pair.target.chars().map(|c| map.target_id(c, vocab, flags.copy)).collect();
        target.push(EOS);
        Ok(Self { map, target, offset })
    }
}

/// Loss terms of one teacher-forced example.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub diag: Option<Var>,
    pub cov: Option<Var>,
}

/// Records `L_ce + λ_diag L_diag + λ_cov L_c` for one pair.
pub fn example_loss(
    tape: &mut Tape<'_>,
    bound: &Bound,
    flags: ModelFlags,
    pair: &PreparedPair,
    weights: LossWeights,
) -> Result<LossTerms, CorrectError> {
    let enc = encode(tape, bound, &pair.map.ids)?;
    let copy = flags.copy.then(|| CopyTarget::new(tape, &pair.map));
    let mut state = (enc.init_h, enc.init_c);
    let mut g = tape.constant(Tensor::zeros(1, enc.len));
    let mut prev = SOS;
    let steps = pair.target.len();
    let mut picks = Vec::with_capacity(steps);
    let mut alphas = Vec::with_capacity(steps);
    let mut covs = Vec::with_capacity(steps);
    for &gold in &pair.target {
        let (alpha, context) = attention_step(tape, bound, &enc, state.0, flags.coverage.then_some(g))?;
        let out = decode_step(tape, bound, prev, state, context, alpha, copy.as_ref())?;
        picks.push(tape.slice(out.p_final, gold, gold + 1)?);
        alphas.push(alpha);
        covs.push(g);
        g = tape.add(g, alpha)?;
        state = out.state;
        prev = pair.map.input_id(gold);
    }
    let p = tape.concat(&picks)?;
    let lp = tape.log(p)?;
    let s = tape.sum(lp)?;
    let ce = tape.scale(s, -1.0 / steps as f64)?;
    let mut total = ce;
    let mut diag = None;
    let mut cov = None;
    if weights.lambda_diag > 0.0 {
        let d = diag_loss_on_tape(tape, &alphas, weights.m, pair.offset)?;
        let w = tape.scale(d, weights.lambda_diag)?;
        total = tape.add(total, w)?;
        diag = Some(d);
    }
    if weights.lambda_cov > 0.0 {
        let c = coverage_loss_on_tape(tape, &alphas, &covs)?;
        let w = tape.scale(c, weights.lambda_cov)?;
        total = tape.add(total, w)?;
        cov = Some(c);
    }
    Ok(LossTerms { total, ce, diag, cov })
}

/// Teacher-forced attention distributions, one row per decoder step
/// (including the end-of-sequence step).
pub fn attention_matrix(params: &Seq2SeqParams, pair: &CorrectionPair) -> Result<Vec<Vec<f64>>, CorrectError> {
    let prepared = PreparedPair::new(pair, &params.vocab, params.flags)?;
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape);
    let enc = encode(&mut tape, &bound, &prepared.map.ids)?;
    let copy = params.flags.copy.then(|| CopyTarget::new(&mut tape, &prepared.map));
    let mut state = (enc.init_h, enc.init_c);
    let mut g = tape.constant(Tensor::zeros(1, enc.len));
    let mut prev = SOS;
    let mut rows = Vec::with_capacity(prepared.target.len());
    for &gold in &prepared.target {
        let (alpha, context) = attention_step(&mut tape, &bound, &enc, state.0, params.flags.coverage.then_some(g))?;
        let out = decode_step(&mut tape, &bound, prev, state, context, alpha, copy.as_ref())?;
        rows.push(tape.value(alpha).data().to_vec());
        g = tape.add(g, alpha)?;
        state = out.state;
        prev = prepared.map.input_id(gold);
    }
    Ok(rows)
}

/// Mean per-step attention mass inside the band `|i - t| < m`.
pub fn band_mass(alphas: &[Vec<f64>], m: usize) -> f64 {
    if alphas.is_empty() {
        return 0.0;
    }
    let inside: f64 = alphas
        .iter()
        .enumerate()
        .map(|(t, row)| {
            row.iter()
                .enumerate()
                .filter(|&(i, _)| !off_band(t + 1, i + 1, m))
                .map(|(_, a)| a)
                .sum::<f64>()
        })
        .sum();
    inside / alphas.len() as f64
}

/// Mean total loss over a batch.
pub fn total_loss(batch: &[CorrectionPair], params: &Seq2SeqParams, config: &CorrectorConfig) -> Result<f64, CorrectError> {
    let weights = LossWeights::from(config);
    let mut sum = 0.0;
    for pair in batch {
        let prepared = PreparedPair::new(pair, &params.vocab, params.flags)?;
        let mut tape = Tape::new();
        let bound = Bound::new(params, &mut tape);
        let terms = example_loss(&mut tape, &bound, params.flags, &prepared, weights)?;
        sum += tape.value(terms.total).item();
    }
    Ok(sum / batch.len().max(1) as f64)
}

fn prepared_loss(params: &Seq2SeqParams, pair: &PreparedPair, weights: LossWeights) -> Result<f64, CorrectError> {
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape);
    let terms = example_loss(&mut tape, &bound, params.flags, pair, weights)?;
    Ok(tape.value(terms.total).item())
}

/// Loss and parameter gradients of one pair, in [`Seq2SeqParams::tensors`] order.
pub fn loss_and_gradients(
    params: &Seq2SeqParams,
    pair: &PreparedPair,
    weights: LossWeights,
) -> Result<(f64, Vec<Tensor>), CorrectError> {
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape);
    let terms = example_loss(&mut tape, &bound, params.flags, pair, weights)?;
    let mut grads = tape.backward(terms.total)?;
    let g = bound.vars().iter().map(|&v| grads.take(v)).collect();
    Ok((tape.value(terms.total).item(), g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
    TargetReached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub train_losses: Vec<f64>,
    pub dev_losses: Vec<f64>,
    /// 1-based epoch of the returned parameters.
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub stop_reason: StopReason,
    /// Greedy exact match on the training set, when tracked.
    pub train_exact_match: Vec<f64>,
}

/// Trains with Adam on minibatches of teacher-forced pairs. Returns the
/// parameters with the lowest dev loss, or the current ones if the training
/// exact-match target was reached.
pub fn train(
    train: &[CorrectionPair],
    dev: &[CorrectionPair],
    config: &CorrectorConfig,
) -> Result<(Seq2SeqParams, TrainReport), CorrectError> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(CorrectError::DegenerateData("train and dev splits must be non-empty".into()));
    }
    let separator = CONTEXT_SEPARATOR.to_string();
    let mut texts: Vec<&str> = train.iter().flat_map(|p| [p.source.as_str(), p.target.as_str()]).collect();
    if config.context {
        texts.push(&separator);
    }
    let vocab = Vocab::from_texts(texts);
    let flags = config.flags();
    let mut params = Seq2SeqParams::init(vocab, config.embedding_dim, config.hidden, flags, config.seed);
    let prepare = |pairs: &[CorrectionPair], vocab: &Vocab| {
        pairs
            .iter()
            .map(|p| PreparedPair::new(p, vocab, flags))
            .collect::<Result<Vec<_>, _>>()
    };
    let train_set = prepare(train, &params.vocab)?;
    let dev_set = prepare(dev, &params.vocab)?;
    let weights = LossWeights::from(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0005_eed0_f0c7);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut adam = Adam::new(config.learning_rate);

    let mut report = TrainReport {
        epochs_run: 0,
        train_losses: Vec::new(),
        dev_losses: Vec::new(),
        best_epoch: 0,
        best_dev_loss: f64::INFINITY,
        stop_reason: StopReason::MaxEpochs,
        train_exact_match: Vec::new(),
    };
    let mut best = params.clone();
    let mut since_best = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &k in chunk {
                let (loss, grads) = loss_and_gradients(&params, &train_set[k], weights)?;
                epoch_loss += loss;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => a.iter_mut().zip(&grads).for_each(|(x, y)| x.add_assign(y)),
                }
            }
            let mut grads = acc.expect("non-empty chunk");
            let inv = 1.0 / chunk.len() as f64;
            grads.iter_mut().for_each(|g| g.scale_assign(inv));
            clip_global_norm(&mut grads, config.clip_norm);
            adam.step(&mut params.tensors_mut(), &grads);
        }
        report.epochs_run = epoch;
        report.train_losses.push(epoch_loss / train_set.len() as f64);
        let dev_loss = dev_set
            .iter()
            .map(|p| prepared_loss(&params, p, weights))
            .sum::<Result<f64, _>>()?
            / dev_set.len() as f64;
        report.dev_losses.push(dev_loss);
        if dev_loss < report.best_dev_loss {
            report.best_dev_loss = dev_loss;
            report.best_epoch = epoch;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        if let Some(target) = config.target_train_accuracy {
            let hits = train
                .iter()
                .filter(|p| greedy_correct(&p.source, p.prev.as_deref(), p.next.as_deref(), &params, config.max_output_len) == p.target)
                .count();
            let acc = hits as f64 / train.len() as f64;
            report.train_exact_match.push(acc);
            if acc >= target {
                report.stop_reason = StopReason::TargetReached;
                report.best_epoch = epoch;
                report.best_dev_loss = dev_loss;
                return Ok((params, report));
            }
        }
        if since_best > config.patience {
            report.stop_reason = StopReason::EarlyStopping;
            break;
        }
    }
    Ok((best, report))
}

/// Splits pairs into train and dev parts after a seeded shuffle.
pub fn split_train_dev<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut cut = ((items.len() as f64) * train_fraction).round() as usize;
    if items.len() >= 2 {
        cut = cut.clamp(1, items.len() - 1);
    }
    let cut = cut.min(items.len());
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect();
    (pick(&idx[..cut]), pick(&idx[cut..]))
}

/// A ranked output of beam search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub log_prob: f64,
    /// `log_prob` divided by the number of emitted symbols.
    pub score: f64,
}

/// A partial decoder output.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub prefix: Vec<usize>,
    pub log_prob: f64,
    pub state: (Var, Var),
    pub coverage: Var,
}

struct Decoder<'a> {
    params: &'a Seq2SeqParams,
    tape: Tape<'a>,
    bound: Bound,
    enc: Encoded,
    map: SourceMap,
    copy: Option<CopyTarget>,
}

impl<'a> Decoder<'a> {
    fn new(params: &'a Seq2SeqParams, text: &str) -> Result<Self, CorrectError> {
        let mut tape = Tape::new();
        let bound = Bound::new(params, &mut tape);
        let map = SourceMap::new(text, &params.vocab);
        let enc = encode(&mut tape, &bound, &map.ids)?;
        let copy = params.flags.copy.then(|| CopyTarget::new(&mut tape, &map));
        Ok(Self {
            params,
            tape,
            bound,
            enc,
            map,
            copy,
        })
    }

    fn start(&mut self) -> Hypothesis {
        let coverage = self.tape.constant(Tensor::zeros(1, self.enc.len));
        Hypothesis {
            prefix: Vec::new(),
            log_prob: 0.0,
            state: (self.enc.init_h, self.enc.init_c),
            coverage,
        }
    }

    /// Next-symbol log-probabilities plus the successor state and coverage.
    fn step(&mut self, h: &Hypothesis) -> Result<(Vec<f64>, (Var, Var), Var), CorrectError> {
        let prev = h.prefix.last().map_or(SOS, |&id| self.map.input_id(id));
        let cov = self.params.flags.coverage.then_some(h.coverage);
        let (alpha, context) = attention_step(&mut self.tape, &self.bound, &self.enc, h.state.0, cov)?;
        let out = decode_step(&mut self.tape, &self.bound, prev, h.state, context, alpha, self.copy.as_ref())?;
        let next_cov = self.tape.add(h.coverage, alpha)?;
        let logp = self.tape.value(out.p_final).data().iter().map(|p| p.ln()).collect();
        Ok((logp, out.state, next_cov))
    }

    fn text(&self, prefix: &[usize]) -> String {
        prefix
            .iter()
            .filter_map(|&id| self.map.char_of(id, &self.params.vocab))
            .collect()
    }
}

fn emittable(id: usize) -> bool {
    id != PAD && id != SOS && id != UNK
}

/// Highest-probability symbol at each step until EOS or `max_len` symbols.
pub fn greedy_correct(
    token: &str,
    prev: Option<&str>,
    next: Option<&str>,
    params: &Seq2SeqParams,
    max_len: usize,
) -> String {
    let (text, _) = model_input(token, prev, next, params.flags.context);
    let Ok(mut dec) = Decoder::new(params, &text) else {
        return token.to_string();
    };
    let mut h = dec.start();
    while h.prefix.len() < max_len {
        let Ok((logp, state, coverage)) = dec.step(&h) else {
            return token.to_string();
        };
        let mut best = None::<(usize, f64)>;
        for (id, &lp) in logp.iter().enumerate() {
            if emittable(id) && best.is_none_or(|(_, b)| lp > b) {
                best = Some((id, lp));
            }
        }
        let (id, lp) = best.expect("non-empty distribution");
        if id == EOS {
            break;
        }
        h = Hypothesis {
            prefix: [h.prefix.as_slice(), &[id]].concat(),
            log_prob: h.log_prob + lp,
            state,
            coverage,
        };
    }
    dec.text(&h.prefix)
}

/// Width-`beam_width` search; returns up to `k` candidates ranked by
/// length-normalized log-probability. Hypotheses end at EOS or after
/// `max_len` symbols.
pub fn beam_search(
    token: &str,
    prev: Option<&str>,
    next: Option<&str>,
    params: &Seq2SeqParams,
    beam_width: usize,
    max_len: usize,
    k: usize,
) -> Result<Vec<Candidate>, CorrectError> {
    let width = beam_width.max(k).max(1);
    let (text, _) = model_input(token, prev, next, params.flags.context);
    let mut dec = Decoder::new(params, &text)?;
    let mut beams = vec![dec.start()];
    // (prefix, log-prob, emitted length)
    let mut finished: Vec<(Vec<usize>, f64, usize)> = Vec::new();
    if max_len == 0 {
        finished.push((Vec::new(), 0.0, 1));
        beams.clear();
    }
    while !beams.is_empty() && finished.len() < width {
        let mut expansions: Vec<(f64, usize, usize)> = Vec::new();
        let mut successors = Vec::with_capacity(beams.len());
        for (b, h) in beams.iter().enumerate() {
            let (logp, state, cov) = dec.step(h)?;
            successors.push((state, cov));
            let mut local: Vec<(f64, usize, usize)> = logp
                .iter()
                .enumerate()
                .filter(|&(id, _)| emittable(id))
                .map(|(id, &lp)| (h.log_prob + lp, b, id))
                .collect();
            local.sort_by(rank);
            local.truncate(width);
            expansions.extend(local);
        }
        expansions.sort_by(rank);
        expansions.truncate(width - finished.len());
        let mut next_beams = Vec::new();
        for (lp, b, id) in expansions {
            let parent = &beams[b];
            if id == EOS {
                finished.push((parent.prefix.clone(), lp, parent.prefix.len() + 1));
                continue;
            }
            let mut prefix = parent.prefix.clone();
            prefix.push(id);
            if prefix.len() >= max_len {
                let len = prefix.len();
                finished.push((prefix, lp, len));
                continue;
            }
            next_beams.push(Hypothesis {
                prefix,
                log_prob: lp,
                state: successors[b].0,
                coverage: successors[b].1,
            });
        }
        beams = next_beams;
    }
    let mut out: Vec<Candidate> = finished
        .into_iter()
        .map(|(prefix, lp, len)| Candidate {
            text: dec.text(&prefix),
            log_prob: lp,
            score: lp / len.max(1) as f64,
        })
        .collect();
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    out.truncate(k.max(1));
    Ok(out)
}

fn rank(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
}

/// Top-1 beam output; the input is returned when it cannot be encoded.
pub fn beam_search_correct(token: &str, params: &Seq2SeqParams, config: &CorrectorConfig) -> String {
    match beam_search(token, None, None, params, config.beam_width, config.max_output_len, 1) {
        Ok(c) if !c.is_empty() => c[0].text.clone(),
        _ => token.to_string(),
    }
}

/// Nearest lexicon entry at distance 1, else 2. Ties go to the higher
/// frequency, then to the lexicographically smaller word. Tokens already in
/// the lexicon, or without a candidate, come back unchanged. An initial
/// capital is carried over to the replacement.
pub fn knn_correct(token: &str, lexicon: &Lexicon) -> String {
    if token.is_empty() || lexicon.contains(token) {
        return token.to_string();
    }
    let folded = Lexicon::normalize(token);
    let len = folded.chars().count();
    let mut best: [Option<(&str, u64)>; 2] = [None, None];
    for (word, freq) in lexicon.iter() {
        let wl = word.chars().count();
        if wl.abs_diff(len) > 2 {
            continue;
        }
        let d = levenshtein(&folded, word);
        if d == 0 || d > 2 {
            continue;
        }
        let slot = &mut best[d - 1];
        let better = match slot {
            None => true,
            Some((w, f)) => freq > *f || (freq == *f && word < *w),
        };
        if better {
            *slot = Some((word, freq));
        }
    }
    match best[0].or(best[1]) {
        Some((word, _)) => restore_case(token, word),
        None => token.to_string(),
    }
}

fn restore_case(original: &str, word: &str) -> String {
    if original.chars().next().is_some_and(char::is_uppercase) {
        let mut chars = word.chars();
        match chars.next() {
            Some(first) => first.to_uppercase().chain(chars).collect(),
            None => String::new(),
        }
    } else {
        word.to_string()
    }
}

/// Settings for running a trained model at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub beam_width: usize,
    pub max_output_len: usize,
}

impl From<&CorrectorConfig> for InferenceConfig {
    fn from(c: &CorrectorConfig) -> Self {
        Self {
            beam_width: c.beam_width,
            max_output_len: c.max_output_len,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Corrector {
    /// Echoes its input.
    Identity,
    Knn(Lexicon),
    Seq2Seq {
        params: Box<Seq2SeqParams>,
        inference: InferenceConfig,
    },
}

impl Corrector {
    pub fn correct(&self, token: &str, prev: Option<&str>, next: Option<&str>) -> String {
        self.candidates(token, prev, next, 1)
            .into_iter()
            .next()
            .map_or_else(|| token.to_string(), |c| c.text)
    }

    /// Ranked suggestions; non-neural correctors produce a single entry.
    pub fn candidates(&self, token: &str, prev: Option<&str>, next: Option<&str>, k: usize) -> Vec<Candidate> {
        let single = |text: String| {
            vec![Candidate {
                text,
                log_prob: 0.0,
                score: 0.0,
            }]
        };
        match self {
            Corrector::Identity => single(token.to_string()),
            Corrector::Knn(lex) => single(knn_correct(token, lex)),
            Corrector::Seq2Seq { params, inference } => {
                match beam_search(token, prev, next, params, inference.beam_width, inference.max_output_len, k) {
                    Ok(c) if !c.is_empty() => c,
                    _ => single(token.to_string()),
                }
            }
        }
    }
}

/// Replaces the tokens labelled 1 with the corrector's output; tokens
/// labelled 0 pass through untouched.
pub fn pipeline_correct<S: AsRef<str>>(tokens: &[S], labels: &[u8], corrector: &Corrector) -> Vec<String> {
    (0..tokens.len())
        .map(|i| {
            let token = tokens[i].as_ref();
            if labels.get(i).copied() != Some(1) {
                return token.to_string();
            }
            let prev = i.checked_sub(1).map(|j| tokens[j].as_ref());
            let next = tokens.get(i + 1).map(AsRef::as_ref);
            corrector.correct(token, prev, next)
        })
        .collect()
}
