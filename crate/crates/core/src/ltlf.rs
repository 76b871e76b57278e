//! Linear temporal logic over finite traces.
//!
//! Formulas are evaluated directly on finite traces, and formulas in the
//! supported fragment (conjunctions of `G(β)` and `FG(β)` with `β` a
//! Boolean combination of atoms) compile to a product DFA.
//!
//! Over a finite trace `FG(β)` holds iff `β` holds at the last position:
//! the witness index for `F` can always be taken to be the final step.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Formula {
    True,
    False,
    Atom(String),
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Implies(Box<Formula>, Box<Formula>),
    Globally(Box<Formula>),
    Finally(Box<Formula>),
}

impl Formula {
    pub fn atom(name: impl Into<String>) -> Self {
        Formula::Atom(name.into())
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(f: Formula) -> Self {
        Formula::Not(Box::new(f))
    }

    pub fn and(a: Formula, b: Formula) -> Self {
        Formula::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Formula, b: Formula) -> Self {
        Formula::Or(Box::new(a), Box::new(b))
    }

    pub fn implies(a: Formula, b: Formula) -> Self {
        Formula::Implies(Box::new(a), Box::new(b))
    }

    pub fn globally(f: Formula) -> Self {
        Formula::Globally(Box::new(f))
    }

    pub fn finally(f: Formula) -> Self {
        Formula::Finally(Box::new(f))
    }

    /// `F(G(f))`.
    pub fn eventually_always(f: Formula) -> Self {
        Formula::finally(Formula::globally(f))
    }

    /// All atom names, sorted.
    pub fn atoms(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_atoms(&mut out);
        out
    }

    fn collect_atoms(&self, out: &mut BTreeSet<String>) {
        match self {
            Formula::True | Formula::False => {}
            Formula::Atom(a) => {
                out.insert(a.clone());
            }
            Formula::Not(f) | Formula::Globally(f) | Formula::Finally(f) => f.collect_atoms(out),
            Formula::And(a, b) | Formula::Or(a, b) | Formula::Implies(a, b) => {
                a.collect_atoms(out);
                b.collect_atoms(out);
            }
        }
    }

    /// Top-level conjuncts of a right- or left-nested `And` tree.
    pub fn conjuncts(&self) -> Vec<&Formula> {
        match self {
            Formula::And(a, b) => {
                let mut v = a.conjuncts();
                v.extend(b.conjuncts());
                v
            }
            f => vec![f],
        }
    }

    pub fn parse(text: &str) -> Result<Formula> {
        Parser::new(text)?.parse_all()
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::True => write!(f, "true"),
            Formula::False => write!(f, "false"),
            Formula::Atom(a) => write!(f, "{a}"),
            Formula::Not(x) => write!(f, "!{}", Paren(x)),
            Formula::And(a, b) => write!(f, "{} & {}", Paren(a), Paren(b)),
            Formula::Or(a, b) => write!(f, "{} | {}", Paren(a), Paren(b)),
            Formula::Implies(a, b) => write!(f, "{} -> {}", Paren(a), Paren(b)),
            Formula::Finally(x) => match x.as_ref() {
                Formula::Globally(y) => write!(f, "FG({y})"),
                _ => write!(f, "F({x})"),
            },
            Formula::Globally(x) => write!(f, "G({x})"),
        }
    }
}

struct Paren<'a>(&'a Formula);

impl fmt::Display for Paren<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Formula::And(..) | Formula::Or(..) | Formula::Implies(..) => write!(f, "({})", self.0),
            x => write!(f, "{x}"),
        }
    }
}

impl Serialize for Formula {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Formula {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Formula::parse(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    LParen,
    RParen,
    And,
    Or,
    Arrow,
    Bang,
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn new(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let chars: Vec<char> = text.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            match c {
                c if c.is_whitespace() => i += 1,
                '(' => {
                    tokens.push(Token::LParen);
                    i += 1
                }
                ')' => {
                    tokens.push(Token::RParen);
                    i += 1
                }
                '&' => {
                    tokens.push(Token::And);
                    i += if chars.get(i + 1) == Some(&'&') { 2 } else { 1 }
                }
                '|' => {
                    tokens.push(Token::Or);
                    i += if chars.get(i + 1) == Some(&'|') { 2 } else { 1 }
                }
                '!' => {
                    tokens.push(Token::Bang);
                    i += 1
                }
                '-' if chars.get(i + 1) == Some(&'>') => {
                    tokens.push(Token::Arrow);
                    i += 2
                }
                c if c.is_ascii_alphabetic() || c == '_' => {
                    let start = i;
                    while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                        i += 1;
                    }
                    tokens.push(Token::Ident(chars[start..i].iter().collect()));
                }
                other => return Err(Error::Parse(format!("unexpected character `{other}` at offset {i}"))),
            }
        }
        Ok(Parser { tokens, pos: 0 })
    }

    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn parse_all(mut self) -> Result<Formula> {
        let f = self.implication()?;
        match self.peek() {
            None => Ok(f),
            Some(t) => Err(Error::Parse(format!("trailing token {t:?}"))),
        }
    }

    fn implication(&mut self) -> Result<Formula> {
        let lhs = self.disjunction()?;
        if self.peek() == Some(&Token::Arrow) {
            self.pos += 1;
            let rhs = self.implication()?;
            return Ok(Formula::implies(lhs, rhs));
        }
        Ok(lhs)
    }

    fn disjunction(&mut self) -> Result<Formula> {
        let mut lhs = self.conjunction()?;
        while self.peek() == Some(&Token::Or) {
            self.pos += 1;
            lhs = Formula::or(lhs, self.conjunction()?);
        }
        Ok(lhs)
    }

    fn conjunction(&mut self) -> Result<Formula> {
        let mut parts = vec![self.unary()?];
        while self.peek() == Some(&Token::And) {
            self.pos += 1;
            parts.push(self.unary()?);
        }
        Ok(conjoin(parts).expect("non-empty"))
    }

    fn unary(&mut self) -> Result<Formula> {
        match self.next() {
            Some(Token::Bang) => Ok(Formula::not(self.unary()?)),
            Some(Token::LParen) => {
                let f = self.implication()?;
                match self.next() {
                    Some(Token::RParen) => Ok(f),
                    t => Err(Error::Parse(format!("expected `)`, found {t:?}"))),
                }
            }
            Some(Token::Ident(name)) => match name.as_str() {
                "true" => Ok(Formula::True),
                "false" => Ok(Formula::False),
                "G" => Ok(Formula::globally(self.unary()?)),
                "F" => Ok(Formula::finally(self.unary()?)),
                "FG" => Ok(Formula::eventually_always(self.unary()?)),
                _ => Ok(Formula::Atom(name)),
            },
            t => Err(Error::Parse(format!("unexpected token {t:?}"))),
        }
    }
}

/// Right-folded conjunction; a singleton returns its element.
pub fn conjoin(formulas: Vec<Formula>) -> Option<Formula> {
    formulas.into_iter().rev().reduce(|acc, f| Formula::and(f, acc))
}

/// Truth assignment for one time step.
pub type Assignment = BTreeMap<String, bool>;

/// Finite sequence of assignments, one per time step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trace(pub Vec<Assignment>);

impl Trace {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Finite-trace semantics evaluated at position 0.
pub fn evaluate_trace(formula: &Formula, trace: &Trace) -> Result<bool> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    eval_at(formula, trace, 0)
}

fn eval_at(f: &Formula, trace: &Trace, i: usize) -> Result<bool> {
    Ok(match f {
        Formula::True => true,
        Formula::False => false,
        Formula::Atom(a) => *trace.0[i].get(a).ok_or_else(|| Error::UnknownAtom(a.clone()))?,
        Formula::Not(x) => !eval_at(x, trace, i)?,
        Formula::And(a, b) => eval_at(a, trace, i)? && eval_at(b, trace, i)?,
        Formula::Or(a, b) => eval_at(a, trace, i)? || eval_at(b, trace, i)?,
        Formula::Implies(a, b) => !eval_at(a, trace, i)? || eval_at(b, trace, i)?,
        Formula::Globally(x) => {
            for j in i..trace.len() {
                if !eval_at(x, trace, j)? {
                    return Ok(false);
                }
            }
            true
        }
        Formula::Finally(x) => {
            for j in i..trace.len() {
                if eval_at(x, trace, j)? {
                    return Ok(true);
                }
            }
            false
        }
    })
}

/// Three-valued truth: `Partial` when a value holds for some but not all
/// members of a set of states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Tri {
    True,
    False,
    Partial,
}

impl Tri {
    pub fn from_bool(b: bool) -> Tri {
        if b {
            Tri::True
        } else {
            Tri::False
        }
    }

    /// `True` if `all` hold, `False` if `none`, else `Partial`.
    pub fn from_counts(all: bool, none: bool) -> Tri {
        match (all, none) {
            (true, _) => Tri::True,
            (false, true) => Tri::False,
            _ => Tri::Partial,
        }
    }

    fn not(self) -> Tri {
        match self {
            Tri::True => Tri::False,
            Tri::False => Tri::True,
            Tri::Partial => Tri::Partial,
        }
    }

    fn and(self, o: Tri) -> Tri {
        match (self, o) {
            (Tri::False, _) | (_, Tri::False) => Tri::False,
            (Tri::True, Tri::True) => Tri::True,
            _ => Tri::Partial,
        }
    }

    fn or(self, o: Tri) -> Tri {
        self.not().and(o.not()).not()
    }
}

/// Boolean state formula over atom indices.
#[derive(Debug, Clone, PartialEq)]
enum Beta {
    Const(bool),
    Atom(usize),
    Not(Box<Beta>),
    And(Box<Beta>, Box<Beta>),
    Or(Box<Beta>, Box<Beta>),
    Implies(Box<Beta>, Box<Beta>),
}

impl Beta {
    fn eval(&self, v: &[bool]) -> bool {
        match self {
            Beta::Const(b) => *b,
            Beta::Atom(i) => v[*i],
            Beta::Not(x) => !x.eval(v),
            Beta::And(a, b) => a.eval(v) && b.eval(v),
            Beta::Or(a, b) => a.eval(v) || b.eval(v),
            Beta::Implies(a, b) => !a.eval(v) || b.eval(v),
        }
    }

    fn eval_tri(&self, v: &[Tri]) -> Tri {
        match self {
            Beta::Const(b) => Tri::from_bool(*b),
            Beta::Atom(i) => v[*i],
            Beta::Not(x) => x.eval_tri(v).not(),
            Beta::And(a, b) => a.eval_tri(v).and(b.eval_tri(v)),
            Beta::Or(a, b) => a.eval_tri(v).or(b.eval_tri(v)),
            Beta::Implies(a, b) => a.eval_tri(v).not().or(b.eval_tri(v)),
        }
    }

    fn uses(&self, atom: usize) -> bool {
        match self {
            Beta::Const(_) => false,
            Beta::Atom(i) => *i == atom,
            Beta::Not(x) => x.uses(atom),
            Beta::And(a, b) | Beta::Or(a, b) | Beta::Implies(a, b) => a.uses(atom) || b.uses(atom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternKind {
    /// `G(β)`
    Always,
    /// `FG(β)`
    EventuallyAlways,
}

#[derive(Debug, Clone, PartialEq)]
struct Pattern {
    kind: PatternKind,
    beta: Beta,
}

pub type StateId = u32;

/// Product automaton of per-pattern two-state automata.
///
/// State encoding: bit `j` of a non-sink state records whether the `j`-th
/// `FG` pattern's operand held at the last symbol read. `G` patterns have
/// no bits; violating one moves to the absorbing reject sink.
#[derive(Debug, Clone, PartialEq)]
pub struct Dfa {
    atoms: Vec<String>,
    patterns: Vec<Pattern>,
    fg_count: u32,
    has_always: bool,
}

impl Dfa {
    pub fn atoms(&self) -> &[String] {
        &self.atoms
    }

    pub fn atom_index(&self, name: &str) -> Option<usize> {
        self.atoms.iter().position(|a| a == name)
    }

    pub fn num_states(&self) -> u32 {
        (1u32 << self.fg_count) + u32::from(self.has_always)
    }

    pub fn initial(&self) -> StateId {
        0
    }

    pub fn accepting(&self) -> StateId {
        (1u32 << self.fg_count) - 1
    }

    pub fn is_accepting(&self, s: StateId) -> bool {
        s == self.accepting()
    }

    pub fn reject_sink(&self) -> Option<StateId> {
        self.has_always.then_some(1u32 << self.fg_count)
    }

    /// Whether atom `i` appears in any pattern operand.
    pub fn uses_atom(&self, i: usize) -> bool {
        self.patterns.iter().any(|p| p.beta.uses(i))
    }

    /// Transition on a full valuation indexed like [`Dfa::atoms`].
    pub fn step(&self, state: StateId, valuation: &[bool]) -> StateId {
        if Some(state) == self.reject_sink() {
            return state;
        }
        let mut next = 0u32;
        let mut bit = 0;
        for p in &self.patterns {
            let v = p.beta.eval(valuation);
            match p.kind {
                PatternKind::Always if !v => return self.reject_sink().expect("always pattern present"),
                PatternKind::Always => {}
                PatternKind::EventuallyAlways => {
                    if v {
                        next |= 1 << bit;
                    }
                    bit += 1;
                }
            }
        }
        next
    }

    /// All states reachable on some completion of a three-valued label,
    /// under Kleene evaluation of each pattern operand. Includes the sink
    /// when some `G` operand may be violated.
    pub fn successors(&self, state: StateId, label: &[Tri]) -> Vec<StateId> {
        if Some(state) == self.reject_sink() {
            return vec![state];
        }
        let mut sink = false;
        let mut states = vec![0u32];
        let mut bit = 0;
        for p in &self.patterns {
            let v = p.beta.eval_tri(label);
            match p.kind {
                PatternKind::Always => sink |= v != Tri::True,
                PatternKind::EventuallyAlways => {
                    states = match v {
                        Tri::True => states.into_iter().map(|s| s | (1 << bit)).collect(),
                        Tri::False => states,
                        Tri::Partial => states.into_iter().flat_map(|s| [s, s | (1 << bit)]).collect(),
                    };
                    bit += 1;
                }
            }
            if v == Tri::False && p.kind == PatternKind::Always {
                return vec![self.reject_sink().unwrap()];
            }
        }
        if sink {
            states.push(self.reject_sink().unwrap());
        }
        states
    }

    /// True if any pattern operand evaluates to `Partial` under the label.
    pub fn label_ambiguous(&self, label: &[Tri]) -> bool {
        self.patterns.iter().any(|p| p.beta.eval_tri(label) == Tri::Partial)
    }

    fn valuation(&self, label: &Assignment) -> Result<Vec<bool>> {
        self.atoms
            .iter()
            .map(|a| label.get(a).copied().ok_or_else(|| Error::UnknownAtom(a.clone())))
            .collect()
    }

    pub fn accepts(&self, trace: &Trace) -> Result<bool> {
        if trace.is_empty() {
            return Err(Error::EmptyTrace);
        }
        let mut s = self.initial();
        for step in &trace.0 {
            s = self.step(s, &self.valuation(step)?);
        }
        Ok(self.is_accepting(s))
    }
}

/// Transition on a named assignment; atoms missing from the label are an error.
pub fn dfa_step(dfa: &Dfa, state: StateId, label: &Assignment) -> Result<StateId> {
    Ok(dfa.step(state, &dfa.valuation(label)?))
}

fn to_beta(f: &Formula, atoms: &[String]) -> Result<Beta> {
    Ok(match f {
        Formula::True => Beta::Const(true),
        Formula::False => Beta::Const(false),
        Formula::Atom(a) => Beta::Atom(atoms.iter().position(|x| x == a).expect("atom collected")),
        Formula::Not(x) => Beta::Not(Box::new(to_beta(x, atoms)?)),
        Formula::And(a, b) => Beta::And(Box::new(to_beta(a, atoms)?), Box::new(to_beta(b, atoms)?)),
        Formula::Or(a, b) => Beta::Or(Box::new(to_beta(a, atoms)?), Box::new(to_beta(b, atoms)?)),
        Formula::Implies(a, b) => Beta::Implies(Box::new(to_beta(a, atoms)?), Box::new(to_beta(b, atoms)?)),
        Formula::Globally(_) | Formula::Finally(_) => {
            return Err(Error::UnsupportedFragment(format!("temporal operator inside state formula: {f}")))
        }
    })
}

/// Compiles a conjunction of `G(β)` / `FG(β)` patterns.
pub fn to_dfa(formula: &Formula) -> Result<Dfa> {
    let atoms: Vec<String> = formula.atoms().into_iter().collect();
    let mut patterns = Vec::new();
    for c in formula.conjuncts() {
        match c {
            Formula::True => {}
            Formula::Globally(b) => patterns.push(Pattern { kind: PatternKind::Always, beta: to_beta(b, &atoms)? }),
            Formula::Finally(inner) => match inner.as_ref() {
                Formula::Globally(b) => {
                    patterns.push(Pattern { kind: PatternKind::EventuallyAlways, beta: to_beta(b, &atoms)? })
                }
                _ => return Err(Error::UnsupportedFragment(format!("F without inner G: {c}"))),
            },
            other => return Err(Error::UnsupportedFragment(format!("conjunct is not G(β) or FG(β): {other}"))),
        }
    }
    let fg_count = patterns.iter().filter(|p| p.kind == PatternKind::EventuallyAlways).count() as u32;
    if fg_count > 16 {
        return Err(Error::UnsupportedFragment(format!("{fg_count} FG patterns exceed the limit of 16")));
    }
    let has_always = patterns.iter().any(|p| p.kind == PatternKind::Always);
    Ok(Dfa { atoms, patterns, fg_count, has_always })
}
