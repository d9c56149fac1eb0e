//! Synthetic tasks: miniature ListOps, binary majority and sequence copy.
//!
//! Every example is a pure function of `(spec, index)`. Training examples use
//! indices `0..train_size` and validation examples the next `val_size`
//! indices, so the two splits never overlap.

use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LunaError, Result};
use crate::numerics::RngState;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
/// First id available to task symbols.
pub const FIRST_SYMBOL: usize = 3;

pub const LISTOPS_MAX_DEPTH: usize = 4;
pub const LISTOPS_MAX_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ListopsMini,
    Majority,
    Copy,
}

impl FromStr for TaskKind {
    type Err = LunaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "listops_mini" => Ok(TaskKind::ListopsMini),
            "majority" => Ok(TaskKind::Majority),
            "copy" => Ok(TaskKind::Copy),
            other => Err(LunaError::Config(format!("unknown task '{other}'"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::ListopsMini => "listops_mini",
            TaskKind::Majority => "majority",
            TaskKind::Copy => "copy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Sequence length bounds in tokens (inclusive). For listops only `max_len` applies.
    pub min_len: usize,
    pub max_len: usize,
    /// Maximum operator nesting depth (listops).
    pub depth: usize,
    /// Maximum operands per operator (listops).
    pub max_args: usize,
    /// Probability that an operand is itself an expression (listops).
    pub nest_prob: f64,
    /// Number of distinct symbols (copy).
    pub alphabet: usize,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::Majority,
            min_len: 129,
            max_len: 129,
            depth: 3,
            max_args: 3,
            nest_prob: 0.25,
            alphabet: 8,
            seed: 0,
            train_size: 20_000,
            val_size: 500,
        }
    }
}

/// What the model must predict for one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Sequence(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: Label,
}

impl Example {
    pub fn class(&self) -> Option<usize> {
        match self.label {
            Label::Class(c) => Some(c),
            Label::Sequence(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl TaskSpec {
    pub fn majority(n: usize, seed: u64) -> Self {
        TaskSpec {
            kind: TaskKind::Majority,
            min_len: n,
            max_len: n,
            seed,
            ..Self::default()
        }
    }

    pub fn listops(depth: usize, max_len: usize, seed: u64) -> Self {
        TaskSpec {
            kind: TaskKind::ListopsMini,
            min_len: 1,
            max_len,
            depth,
            seed,
            ..Self::default()
        }
    }

    pub fn copy(min_len: usize, max_len: usize, alphabet: usize, seed: u64) -> Self {
        TaskSpec {
            kind: TaskKind::Copy,
            min_len,
            max_len,
            alphabet,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LunaError::Config(msg));
        if self.min_len > self.max_len {
            return bad(format!("min_len {} exceeds max_len {}", self.min_len, self.max_len));
        }
        if self.train_size == 0 {
            return bad("train_size must be positive".into());
        }
        match self.kind {
            TaskKind::Majority => {
                if self.min_len.is_multiple_of(2) || self.max_len.is_multiple_of(2) {
                    return bad(format!(
                        "majority needs odd lengths to avoid ties, got {}..={}",
                        self.min_len, self.max_len
                    ));
                }
            }
            TaskKind::ListopsMini => {
                if self.depth == 0 || self.depth > LISTOPS_MAX_DEPTH {
                    return bad(format!("listops depth must be in 1..={LISTOPS_MAX_DEPTH}, got {}", self.depth));
                }
                if self.max_len > LISTOPS_MAX_LEN {
                    return bad(format!("listops max_len must be at most {LISTOPS_MAX_LEN}, got {}", self.max_len));
                }
                if self.max_len < 4 {
                    return bad("listops max_len must allow at least '[OP d d ]'".into());
                }
                if self.max_args < 2 {
                    return bad("listops max_args must be at least 2".into());
                }
                if !(0.0..1.0).contains(&self.nest_prob) {
                    return bad(format!("listops nest_prob must be in [0, 1), got {}", self.nest_prob));
                }
            }
            TaskKind::Copy => {
                if self.min_len == 0 {
                    return bad("copy source must be non-empty".into());
                }
                if self.alphabet < 2 {
                    return bad("copy alphabet must have at least 2 symbols".into());
                }
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        FIRST_SYMBOL
            + match self.kind {
                TaskKind::Majority => 2,
                TaskKind::ListopsMini => LISTOPS_SYMBOLS,
                TaskKind::Copy => self.alphabet,
            }
    }

    /// Number of output classes, or `None` for sequence targets.
    pub fn classes(&self) -> Option<usize> {
        match self.kind {
            TaskKind::Majority => Some(2),
            TaskKind::ListopsMini => Some(10),
            TaskKind::Copy => None,
        }
    }

    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::Val => self.val_size,
        }
    }

    /// Global example index of the `i`-th element of `split`.
    pub fn index(&self, split: Split, i: usize) -> usize {
        match split {
            Split::Train => i,
            Split::Val => self.train_size + i,
        }
    }

    pub fn example(&self, split: Split, i: usize) -> Result<Example> {
        if i >= self.split_len(split) {
            return Err(LunaError::Input(format!("example {i} outside {split:?} split")));
        }
        self.generate(self.index(split, i))
    }

    pub fn generate(&self, index: usize) -> Result<Example> {
        self.validate()?;
        let rng = RngState::new(self.seed);
        match self.kind {
            TaskKind::Majority => Ok(gen_majority(self, &rng, index)),
            TaskKind::ListopsMini => gen_listops(self, &rng, index),
            TaskKind::Copy => Ok(gen_copy(self, &rng, index)),
        }
    }
}

fn sample_len(spec: &TaskSpec, r: &mut impl Rng, odd_only: bool) -> usize {
    if odd_only {
        let choices = (spec.max_len - spec.min_len) / 2;
        spec.min_len + 2 * r.random_range(0..=choices)
    } else {
        r.random_range(spec.min_len..=spec.max_len)
    }
}

fn gen_majority(spec: &TaskSpec, rng: &RngState, index: usize) -> Example {
    let mut r = rng.stream(&format!("majority/{index}"));
    let n = sample_len(spec, &mut r, true);
    // a per-example bias spreads the vote margin instead of clustering at n/2
    let bias: f64 = r.random();
    let bits: Vec<usize> = (0..n).map(|_| usize::from(r.random::<f64>() < bias)).collect();
    let label = majority_label(&bits);
    Example {
        tokens: bits.iter().map(|&b| FIRST_SYMBOL + b).collect(),
        label: Label::Class(label),
    }
}

/// 1 if ones outnumber zeros.
pub fn majority_label(bits: &[usize]) -> usize {
    let ones = bits.iter().filter(|&&b| b == 1).count();
    usize::from(2 * ones > bits.len())
}

fn gen_copy(spec: &TaskSpec, rng: &RngState, index: usize) -> Example {
    let mut r = rng.stream(&format!("copy/{index}"));
    let n = sample_len(spec, &mut r, false);
    let source: Vec<usize> = (0..n).map(|_| FIRST_SYMBOL + r.random_range(0..spec.alphabet)).collect();
    Example {
        tokens: source.clone(),
        label: Label::Sequence(source),
    }
}

/// Decoder-only layout for a copy example: `source SEP source`.
pub fn copy_lm_sequence(source: &[usize]) -> Vec<usize> {
    let mut seq = source.to_vec();
    seq.push(SEP);
    seq.extend_from_slice(source);
    seq
}

// ---- listops ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ListOp {
    Max,
    Min,
    Med,
    SumMod10,
}

const LISTOPS_SYMBOLS: usize = 10 + 4 + 1;
const OP_BASE: usize = FIRST_SYMBOL + 10;
const CLOSE: usize = OP_BASE + 4;

impl ListOp {
    const ALL: [ListOp; 4] = [ListOp::Max, ListOp::Min, ListOp::Med, ListOp::SumMod10];

    fn token(self) -> usize {
        OP_BASE + self as usize
    }

    fn text(self) -> &'static str {
        match self {
            ListOp::Max => "[MAX",
            ListOp::Min => "[MIN",
            ListOp::Med => "[MED",
            ListOp::SumMod10 => "[SM",
        }
    }

    pub fn apply(self, args: &[usize]) -> usize {
        match self {
            ListOp::Max => *args.iter().max().expect("operator without operands"),
            ListOp::Min => *args.iter().min().expect("operator without operands"),
            ListOp::Med => {
                let mut s = args.to_vec();
                s.sort_unstable();
                let k = s.len();
                if k % 2 == 1 {
                    s[k / 2]
                } else {
                    (s[k / 2 - 1] + s[k / 2]) / 2
                }
            }
            ListOp::SumMod10 => args.iter().sum::<usize>() % 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Expr {
    Digit(usize),
    Op(ListOp, Vec<Expr>),
}

impl Expr {
    fn value(&self) -> usize {
        match self {
            Expr::Digit(d) => *d,
            Expr::Op(op, args) => op.apply(&args.iter().map(Expr::value).collect::<Vec<_>>()),
        }
    }

    fn emit(&self, out: &mut Vec<usize>) {
        match self {
            Expr::Digit(d) => out.push(FIRST_SYMBOL + d),
            Expr::Op(op, args) => {
                out.push(op.token());
                for a in args {
                    a.emit(out);
                }
                out.push(CLOSE);
            }
        }
    }
}

fn gen_expr(spec: &TaskSpec, r: &mut impl Rng, depth: usize) -> Expr {
    let op = ListOp::ALL[r.random_range(0..4)];
    let arity = r.random_range(2..=spec.max_args);
    let args = (0..arity)
        .map(|_| {
            if depth > 1 && r.random::<f64>() < spec.nest_prob {
                gen_expr(spec, r, depth - 1)
            } else {
                Expr::Digit(r.random_range(0..10))
            }
        })
        .collect();
    Expr::Op(op, args)
}

fn gen_listops(spec: &TaskSpec, rng: &RngState, index: usize) -> Result<Example> {
    let mut r = rng.stream(&format!("listops/{index}"));
    for _ in 0..1000 {
        let expr = gen_expr(spec, &mut r, spec.depth);
        let mut tokens = Vec::new();
        expr.emit(&mut tokens);
        if tokens.len() <= spec.max_len {
            return Ok(Example {
                tokens,
                label: Label::Class(expr.value()),
            });
        }
    }
    Err(LunaError::Config(format!(
        "could not fit a depth-{} expression in {} tokens",
        spec.depth, spec.max_len
    )))
}

/// Token ids for a textual expression such as `"[MIN [MAX 3 5] 4]"`.
pub fn listops_tokens(text: &str) -> Result<Vec<usize>> {
    let spaced = text.replace(']', " ] ");
    spaced
        .split_whitespace()
        .map(|w| match w {
            "]" => Ok(CLOSE),
            d if d.len() == 1 && d.as_bytes()[0].is_ascii_digit() => Ok(FIRST_SYMBOL + (d.as_bytes()[0] - b'0') as usize),
            op => ListOp::ALL
                .iter()
                .find(|o| o.text() == op)
                .map(|o| o.token())
                .ok_or_else(|| LunaError::Input(format!("unknown listops token '{op}'"))),
        })
        .collect()
}

pub fn listops_text(tokens: &[usize]) -> String {
    let words: Vec<String> = tokens
        .iter()
        .map(|&t| match t {
            t if (FIRST_SYMBOL..OP_BASE).contains(&t) => (t - FIRST_SYMBOL).to_string(),
            t if (OP_BASE..CLOSE).contains(&t) => ListOp::ALL[t - OP_BASE].text().to_string(),
            CLOSE => "]".to_string(),
            other => format!("<{other}>"),
        })
        .collect();
    words.join(" ").replace(" ]", "]")
}

/// Evaluates a token sequence by recursive descent.
pub fn eval_listops(tokens: &[usize]) -> Result<usize> {
    fn parse(tokens: &[usize], pos: &mut usize) -> Result<usize> {
        let t = *tokens
            .get(*pos)
            .ok_or_else(|| LunaError::Input("unexpected end of expression".into()))?;
        *pos += 1;
        if (FIRST_SYMBOL..OP_BASE).contains(&t) {
            return Ok(t - FIRST_SYMBOL);
        }
        if !(OP_BASE..CLOSE).contains(&t) {
            return Err(LunaError::Input(format!("unexpected token {t} at {}", *pos - 1)));
        }
        let op = ListOp::ALL[t - OP_BASE];
        let mut args = Vec::new();
        loop {
            match tokens.get(*pos) {
                Some(&CLOSE) => {
                    *pos += 1;
                    break;
                }
                Some(_) => args.push(parse(tokens, pos)?),
                None => return Err(LunaError::Input("unclosed bracket".into())),
            }
        }
        if args.is_empty() {
            return Err(LunaError::Input("operator without operands".into()));
        }
        Ok(op.apply(&args))
    }
    let mut pos = 0;
    let v = parse(tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(LunaError::Input(format!("trailing tokens after position {pos}")));
    }
    Ok(v)
}

/// Nesting depth of a token sequence (a bare digit has depth 0).
pub fn listops_depth(tokens: &[usize]) -> usize {
    let mut depth = 0usize;
    let mut max = 0;
    for &t in tokens {
        if (OP_BASE..CLOSE).contains(&t) {
            depth += 1;
            max = max.max(depth);
        } else if t == CLOSE {
            depth = depth.saturating_sub(1);
        }
    }
    max
}

/// Writes `{"tokens": [...], "label": ...}` lines for `count` examples of `split`.
pub fn write_jsonl<W: Write>(spec: &TaskSpec, split: Split, count: usize, out: &mut W) -> Result<()> {
    for i in 0..count.min(spec.split_len(split)) {
        let ex = spec.example(split, i)?;
        let line = serde_json::to_string(&ex).map_err(|e| LunaError::Format(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| LunaError::io("<jsonl>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn listops_examples() {
        assert_eq!(eval_listops(&listops_tokens("[MAX 2 7 1]").unwrap()).unwrap(), 7);
        assert_eq!(eval_listops(&listops_tokens("[SM 9 9]").unwrap()).unwrap(), 8);
        assert_eq!(eval_listops(&listops_tokens("[MIN [MAX 3 5] 4]").unwrap()).unwrap(), 4);
        assert_eq!(eval_listops(&listops_tokens("[MED 1 9 4]").unwrap()).unwrap(), 4);
        assert_eq!(eval_listops(&listops_tokens("[MED 1 4]").unwrap()).unwrap(), 2);
    }

    #[test]
    fn listops_text_round_trip() {
        let text = "[MIN [MAX 3 5] 4]";
        assert_eq!(listops_text(&listops_tokens(text).unwrap()), text);
    }

    #[test]
    fn listops_rejects_malformed() {
        assert!(eval_listops(&listops_tokens("[MAX 2 7").unwrap()).is_err());
        assert!(eval_listops(&listops_tokens("[MAX]").unwrap()).is_err());
        assert!(eval_listops(&listops_tokens("3 4").unwrap()).is_err());
        assert!(listops_tokens("[FOO 1]").is_err());
    }

    #[test]
    fn generated_listops_respect_bounds_and_labels() {
        let spec = TaskSpec::listops(3, 128, 5);
        for i in 0..300 {
            let ex = spec.generate(i).unwrap();
            assert!(ex.tokens.len() <= 128);
            assert!((1..=3).contains(&listops_depth(&ex.tokens)));
            assert_eq!(Some(eval_listops(&ex.tokens).unwrap()), ex.class());
        }
    }

    #[test]
    fn listops_spec_bounds() {
        let mut spec = TaskSpec::listops(5, 128, 0);
        assert!(matches!(spec.validate(), Err(LunaError::Config(_))));
        spec.depth = 4;
        spec.max_len = 300;
        assert!(matches!(spec.validate(), Err(LunaError::Config(_))));
    }

    #[test]
    fn majority_examples() {
        assert_eq!(majority_label(&[1; 7]), 1);
        let alternating: Vec<usize> = (0..9).map(|i| i % 2).collect();
        assert_eq!(majority_label(&alternating), 0);
        let spec = TaskSpec::majority(129, 3);
        for i in 0..50 {
            let ex = spec.generate(i).unwrap();
            assert_eq!(ex.tokens.len(), 129);
            let bits: Vec<usize> = ex.tokens.iter().map(|t| t - FIRST_SYMBOL).collect();
            let ones = bits.iter().filter(|&&b| b == 1).count();
            assert_eq!(ex.class(), Some(usize::from(ones > 64)));
        }
    }

    #[test]
    fn majority_rejects_even_length() {
        assert!(matches!(TaskSpec::majority(128, 0).validate(), Err(LunaError::Config(_))));
    }

    #[test]
    fn copy_examples() {
        let spec = TaskSpec::copy(3, 6, 5, 1);
        let ex = spec.generate(0).unwrap();
        assert_eq!(ex.label, Label::Sequence(ex.tokens.clone()));
        assert_eq!(copy_lm_sequence(&[5, 3, 9]), vec![5, 3, 9, SEP, 5, 3, 9]);
        assert!(matches!(TaskSpec::copy(0, 4, 5, 1).validate(), Err(LunaError::Config(_))));
    }

    #[test]
    fn generation_is_deterministic_and_splits_disjoint() {
        let spec = TaskSpec::copy(2, 8, 6, 9);
        let a: Vec<_> = (0..20).map(|i| spec.generate(i).unwrap()).collect();
        let b: Vec<_> = (0..20).map(|i| spec.generate(i).unwrap()).collect();
        assert_eq!(a, b);
        assert_eq!(spec.index(Split::Val, 0), spec.train_size);
        assert!(spec.example(Split::Train, spec.train_size).is_err());
    }

    #[test]
    fn jsonl_dump() {
        let spec = TaskSpec::listops(2, 32, 1);
        let mut buf = Vec::new();
        write_jsonl(&spec, Split::Val, 3, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(first["tokens"].is_array());
        assert!(first["label"].is_u64());
    }
}
