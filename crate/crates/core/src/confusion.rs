//! Character confusion matrices estimated from aligned corpora.
//!
//! Rows are gold characters and columns the characters the OCR emitted, so
//! a row is `P(emitted | true)`. Deletions are stored as `(c, Epsilon)` and
//! insertions as an `Epsilon` row.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{is_marker, AlignedRecord};

/// Serialized form of [`Symbol::Epsilon`].
pub const EPSILON_TOKEN: &str = "<eps>";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfusionError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Symbol {
    Char(char),
    Epsilon,
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Char('\\') => f.write_str("\\\\"),
            Symbol::Char('\t') => f.write_str("\\t"),
            Symbol::Char('\n') => f.write_str("\\n"),
            Symbol::Char(c) => write!(f, "{c}"),
            Symbol::Epsilon => f.write_str(EPSILON_TOKEN),
        }
    }
}

impl Symbol {
    fn parse(field: &str) -> Option<Self> {
        match field {
            EPSILON_TOKEN => Some(Symbol::Epsilon),
            "\\\\" => Some(Symbol::Char('\\')),
            "\\t" => Some(Symbol::Char('\t')),
            "\\n" => Some(Symbol::Char('\n')),
            _ => {
                let mut it = field.chars();
                let c = it.next()?;
                it.next().is_none().then_some(Symbol::Char(c))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ConfusionOptions {
    /// Drop insertion and deletion events, keeping substitutions only.
    pub substitutions_only: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: BTreeMap<Symbol, BTreeMap<Symbol, u64>>,
    row_totals: BTreeMap<Symbol, u64>,
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, source: Symbol, emitted: Symbol, count: u64) {
        if count == 0 {
            return;
        }
        *self.counts.entry(source).or_default().entry(emitted).or_default() += count;
        *self.row_totals.entry(source).or_default() += count;
    }

    pub fn count(&self, source: Symbol, emitted: Symbol) -> u64 {
        self.counts
            .get(&source)
            .and_then(|r| r.get(&emitted))
            .copied()
            .unwrap_or(0)
    }

    pub fn row_total(&self, source: Symbol) -> u64 {
        self.row_totals.get(&source).copied().unwrap_or(0)
    }

    pub fn row(&self, source: Symbol) -> Option<&BTreeMap<Symbol, u64>> {
        self.counts.get(&source)
    }

    pub fn probability(&self, source: Symbol, emitted: Symbol) -> f64 {
        match self.row_total(source) {
            0 => 0.0,
            total => self.count(source, emitted) as f64 / total as f64,
        }
    }

    pub fn total_mass(&self) -> u64 {
        self.row_totals.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.row_totals.is_empty()
    }

    /// Iterates `(source, emitted, count)` in lexicographic order.
    pub fn entries(&self) -> impl Iterator<Item = (Symbol, Symbol, u64)> + '_ {
        self.counts
            .iter()
            .flat_map(|(&s, row)| row.iter().map(move |(&e, &n)| (s, e, n)))
    }

    /// Share of total mass in the insertion row.
    pub fn insertion_rate(&self) -> f64 {
        match self.total_mass() {
            0 => 0.0,
            total => self.row_total(Symbol::Epsilon) as f64 / total as f64,
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (s, e, n) in other.entries() {
            self.add(s, e, n);
        }
    }

    /// `source<TAB>emitted<TAB>count` lines, rows in lexicographic order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (s, e, n) in self.entries() {
            out.push_str(&format!("{s}\t{e}\t{n}\n"));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, ConfusionError> {
        let mut m = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() || line.starts_with("//") {
                continue;
            }
            let err = |reason: &str| ConfusionError::Parse {
                line: i + 1,
                reason: reason.to_string(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [s, e, n] = fields[..] else {
                return Err(err("expected three tab-separated fields"));
            };
            let s = Symbol::parse(s).ok_or_else(|| err("bad source symbol"))?;
            let e = Symbol::parse(e).ok_or_else(|| err("bad emitted symbol"))?;
            let n: u64 = n.trim().parse().map_err(|_| err("bad count"))?;
            if s == Symbol::Epsilon && e == Symbol::Epsilon {
                return Err(err("epsilon-to-epsilon entry"));
            }
            m.add(s, e, n);
        }
        Ok(m)
    }
}

fn side(c: char) -> Symbol {
    if is_marker(c) {
        Symbol::Epsilon
    } else {
        Symbol::Char(c)
    }
}

/// Counts `(gold, ocr)` per aligned position, identity pairs included.
/// Positions where both sides are markers carry no event and are skipped.
pub fn build_confusion(records: &[AlignedRecord], options: ConfusionOptions) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::new();
    for r in records {
        for (g, o) in r.gs_aligned.chars().zip(r.ocr_aligned.chars()) {
            let (g, o) = (side(g), side(o));
            let indel = g == Symbol::Epsilon || o == Symbol::Epsilon;
            if (g == Symbol::Epsilon && o == Symbol::Epsilon) || (indel && options.substitutions_only) {
                continue;
            }
            m.add(g, o, 1);
        }
    }
    m
}

/// `1 - identity mass / total mass`.
pub fn error_rate(matrix: &ConfusionMatrix) -> Result<f64, ConfusionError> {
    let total = matrix.total_mass();
    if total == 0 {
        return Err(ConfusionError::EmptyMatrix);
    }
    let identity: u64 = matrix
        .entries()
        .filter(|(s, e, _)| s == e)
        .map(|(_, _, n)| n)
        .sum();
    Ok(1.0 - identity as f64 / total as f64)
}

fn draw_from_row<R: Rng + ?Sized>(row: &BTreeMap<Symbol, u64>, total: u64, rng: &mut R) -> Symbol {
    let mut r = rng.gen_range(0..total);
    for (&sym, &n) in row {
        if r < n {
            return sym;
        }
        r -= n;
    }
    unreachable!("row total covers every draw")
}

/// Draws an emission for `source`. Unseen characters pass through unchanged;
/// `Symbol::Epsilon` means the character is deleted.
pub fn sample_emission<R: Rng + ?Sized>(matrix: &ConfusionMatrix, source: char, rng: &mut R) -> Symbol {
    let key = Symbol::Char(source);
    match matrix.row(key) {
        Some(row) => draw_from_row(row, matrix.row_total(key), rng),
        None => key,
    }
}

/// Draws an inserted character from the insertion row, if it has mass.
pub fn sample_insertion<R: Rng + ?Sized>(matrix: &ConfusionMatrix, rng: &mut R) -> Option<char> {
    let row = matrix.row(Symbol::Epsilon)?;
    match draw_from_row(row, matrix.row_total(Symbol::Epsilon), rng) {
        Symbol::Char(c) => Some(c),
        Symbol::Epsilon => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(ocr: &str, gs: &str) -> AlignedRecord {
        AlignedRecord::from_aligned("t", ocr, gs).unwrap()
    }

    fn ch(c: char) -> Symbol {
        Symbol::Char(c)
    }

    #[test]
    fn counts_per_position() {
        let m = build_confusion(&[rec("abd", "abc")], ConfusionOptions::default());
        assert_eq!(m.count(ch('a'), ch('a')), 1);
        assert_eq!(m.count(ch('b'), ch('b')), 1);
        assert_eq!(m.count(ch('c'), ch('d')), 1);
        assert_eq!(m.total_mass(), 3);
        assert!(build_confusion(&[], ConfusionOptions::default()).is_empty());
    }

    #[test]
    fn deletions_go_to_epsilon() {
        let m = build_confusion(&[rec("к@тка", "котка")], ConfusionOptions::default());
        assert_eq!(m.count(ch('о'), Symbol::Epsilon), 1);
        assert_eq!(m.count(ch('к'), ch('к')), 2);
        assert_eq!(m.total_mass(), 5);
        assert!((error_rate(&m).unwrap() - 0.2).abs() < 1e-15);

        let sub = build_confusion(
            &[rec("к@тка", "котка")],
            ConfusionOptions { substitutions_only: true },
        );
        assert_eq!(sub.total_mass(), 4);
        assert_eq!(error_rate(&sub).unwrap(), 0.0);
    }

    #[test]
    fn insertions_and_mass_invariant() {
        let records = [rec("aXb cd", "a@b c#")];
        let m = build_confusion(&records, ConfusionOptions::default());
        assert_eq!(m.count(Symbol::Epsilon, ch('X')), 1);
        assert_eq!(m.count(Symbol::Epsilon, ch('d')), 1);
        assert_eq!(m.total_mass(), 6);
        for (s, _, _) in m.entries() {
            let row_sum: u64 = m.row(s).unwrap().values().sum();
            assert_eq!(row_sum, m.row_total(s));
        }
    }

    #[test]
    fn error_rate_edges() {
        let mut m = ConfusionMatrix::new();
        assert_eq!(error_rate(&m), Err(ConfusionError::EmptyMatrix));
        m.add(ch('a'), ch('a'), 4);
        assert_eq!(error_rate(&m).unwrap(), 0.0);
        let mut all = ConfusionMatrix::new();
        all.add(ch('a'), ch('b'), 3);
        assert_eq!(error_rate(&all).unwrap(), 1.0);
    }

    #[test]
    fn sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ConfusionMatrix::new();
        m.add(ch('c'), ch('c'), 10);
        for _ in 0..100 {
            assert_eq!(sample_emission(&m, 'c', &mut rng), ch('c'));
        }
        assert_eq!(sample_emission(&m, 'z', &mut rng), ch('z'));

        let mut m = ConfusionMatrix::new();
        m.add(ch('c'), ch('c'), 9);
        m.add(ch('c'), ch('d'), 1);
        let n = 100_000;
        let d = (0..n)
            .filter(|_| sample_emission(&m, 'c', &mut rng) == ch('d'))
            .count();
        let frac = d as f64 / n as f64;
        assert!((frac - 0.1).abs() < 0.01, "{frac}");
    }

    #[test]
    fn sampling_is_reproducible() {
        let m = build_confusion(&[rec("abd@", "abcd")], ConfusionOptions::default());
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..200)
                .map(|i| sample_emission(&m, ['a', 'c', 'd'][i % 3], &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn tsv_round_trip() {
        let mut m = build_confusion(&[rec("aXb c@", "a@b cd")], ConfusionOptions::default());
        m.add(ch('\t'), ch('\\'), 2);
        let text = m.to_tsv();
        assert!(text.lines().any(|l| l == "<eps>\tX\t1"));
        assert_eq!(ConfusionMatrix::from_tsv(&text).unwrap(), m);
        assert!(matches!(
            ConfusionMatrix::from_tsv("a\tb\n"),
            Err(ConfusionError::Parse { line: 1, .. })
        ));
    }
}
