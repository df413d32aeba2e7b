//! Strategy II encoder inputs: Repeat, Origin, Delete and Null.
//!
//! Every variant is laid out as
//! `definition : <variant text> input : <x> output :`
//! and carries one gate value per position. Template and `x` positions are
//! always 1. Gates on definition tokens are gathered from the per-slot
//! selector gate, so they stay differentiable.

use std::fmt;

use serde::Serialize;

use crate::compute::{ComputeError, Graph, Tensor, Var};
use crate::corpus::CandidateSet;
use crate::text::{TokenSeq, COLON, DEFINITION, INPUT, OUTPUT, REP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Repeat,
    Origin,
    Delete,
    Null,
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Repeat => "repeat",
            Self::Origin => "origin",
            Self::Delete => "delete",
            Self::Null => "null",
        })
    }
}

/// Where a position came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "region", content = "sentence")]
pub enum Region {
    Template,
    /// The (first) copy of the definition; `None` for tokens outside any span.
    Definition(Option<usize>),
    Rep,
    RepeatedCopy(Option<usize>),
    Input,
}

#[derive(Debug, Clone)]
pub struct InstructionVariant {
    pub kind: VariantKind,
    pub tokens: Vec<u32>,
    /// Per-position gate, shape `[tokens.len()]`.
    pub gate: Var,
    pub regions: Vec<Region>,
    /// Tokens dropped to fit `max_src_len`.
    pub truncated: usize,
}

impl InstructionVariant {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Where a position's gate value is read from.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Src {
    One,
    Zero,
    Slot(usize),
}

struct Layout {
    tokens: Vec<u32>,
    srcs: Vec<Src>,
    regions: Vec<Region>,
}

impl Layout {
    fn new() -> Self {
        Self { tokens: Vec::new(), srcs: Vec::new(), regions: Vec::new() }
    }

    fn push(&mut self, t: u32, s: Src, r: Region) {
        self.tokens.push(t);
        self.srcs.push(s);
        self.regions.push(r);
    }

    fn template(&mut self, words: &[u32]) {
        for &w in words {
            self.push(w, Src::One, Region::Template);
        }
    }

    fn definition(&mut self, def: &TokenSeq, region: fn(Option<usize>) -> Region, src: impl Fn(Option<usize>) -> Src) {
        let spans = def.spans();
        for (p, &t) in def.ids.iter().enumerate() {
            let sentence = spans.iter().position(|&(a, b)| a <= p && p < b);
            self.push(t, src(sentence), region(sentence));
        }
    }

    fn input(&mut self, x: &[u32]) {
        self.template(&[INPUT, COLON]);
        for &t in x {
            self.push(t, Src::One, Region::Input);
        }
        self.template(&[OUTPUT, COLON]);
    }

    /// Drops tokens from the right of the repeated copy, then of the first
    /// copy, then (last resort) of `x`, until the layout fits.
    fn truncate(&mut self, max_len: usize) -> usize {
        let over = self.tokens.len().saturating_sub(max_len);
        if over == 0 {
            return 0;
        }
        let tiers: [fn(&Region) -> bool; 3] = [
            |r| matches!(r, Region::RepeatedCopy(_)),
            |r| matches!(r, Region::Definition(_)),
            |r| matches!(r, Region::Input),
        ];
        let mut drop = vec![false; self.tokens.len()];
        let mut left = over;
        for hit in tiers {
            for p in (0..self.tokens.len()).rev() {
                if left == 0 {
                    break;
                }
                if hit(&self.regions[p]) {
                    drop[p] = true;
                    left -= 1;
                }
            }
        }
        if drop.iter().zip(&self.regions).any(|(&d, r)| d && *r == Region::Input) {
            log::warn!("input region truncated; the instruction alone could not absorb the overflow");
        }
        fn keep<T>(v: &mut Vec<T>, drop: &[bool]) {
            let mut i = 0;
            v.retain(|_| {
                i += 1;
                !drop[i - 1]
            })
        }
        keep(&mut self.tokens, &drop);
        keep(&mut self.srcs, &drop);
        keep(&mut self.regions, &drop);
        log::warn!("encoder input truncated by {} tokens", over - left);
        over - left
    }

    fn finish(mut self, g: &mut Graph, kind: VariantKind, slot_gate: Option<Var>, max_len: usize) -> Result<InstructionVariant, ComputeError> {
        let truncated = self.truncate(max_len);
        let gate = match slot_gate {
            None => g.constant(Tensor::full(&[self.tokens.len()], 1.0)),
            Some(sg) => {
                let n = g.shape(sg)[0];
                let consts = g.constant(Tensor::vector(vec![1.0, 0.0]));
                let table = g.concat(&[sg, consts], 0)?;
                let idx: Vec<usize> = self
                    .srcs
                    .iter()
                    .map(|s| match *s {
                        Src::Slot(i) => i,
                        Src::One => n,
                        Src::Zero => n + 1,
                    })
                    .collect();
                g.gather(table, &idx)?
            }
        };
        Ok(InstructionVariant { kind, tokens: self.tokens, gate, regions: self.regions, truncated })
    }
}

fn slot(cands: &CandidateSet, sentence: Option<usize>) -> Option<usize> {
    sentence.and_then(|s| cands.slot_of(s))
}

/// Definition, `[REP]`, a gated second copy, `[REP]`, then the input.
/// Sentences that are not candidates stay hidden in the second copy.
pub fn build_repeat(
    g: &mut Graph,
    definition: &TokenSeq,
    cands: &CandidateSet,
    slot_gate: Var,
    x: &[u32],
    max_len: usize,
) -> Result<InstructionVariant, ComputeError> {
    let mut l = Layout::new();
    l.template(&[DEFINITION, COLON]);
    l.definition(definition, Region::Definition, |_| Src::One);
    l.push(REP, Src::One, Region::Rep);
    l.definition(definition, Region::RepeatedCopy, |s| slot(cands, s).map_or(Src::Zero, Src::Slot));
    l.push(REP, Src::One, Region::Rep);
    l.input(x);
    l.finish(g, VariantKind::Repeat, Some(slot_gate), max_len)
}

/// The unmodified definition; no `[REP]` marker.
pub fn build_origin(g: &mut Graph, definition: &TokenSeq, x: &[u32], max_len: usize) -> Result<InstructionVariant, ComputeError> {
    let mut l = Layout::new();
    l.template(&[DEFINITION, COLON]);
    l.definition(definition, Region::Definition, |_| Src::One);
    l.input(x);
    l.finish(g, VariantKind::Origin, None, max_len)
}

/// The definition with each candidate sentence gated by `1 − gate`.
pub fn build_delete(
    g: &mut Graph,
    definition: &TokenSeq,
    cands: &CandidateSet,
    slot_gate: Var,
    x: &[u32],
    max_len: usize,
) -> Result<InstructionVariant, ComputeError> {
    let neg = g.neg(slot_gate);
    let inverse = g.add_scalar(neg, 1.0);
    let mut l = Layout::new();
    l.template(&[DEFINITION, COLON]);
    l.definition(definition, Region::Definition, |s| slot(cands, s).map_or(Src::One, Src::Slot));
    l.input(x);
    l.finish(g, VariantKind::Delete, Some(inverse), max_len)
}

/// Template and input only.
pub fn build_null(g: &mut Graph, x: &[u32], max_len: usize) -> Result<InstructionVariant, ComputeError> {
    let mut l = Layout::new();
    l.template(&[DEFINITION, COLON]);
    l.input(x);
    l.finish(g, VariantKind::Null, None, max_len)
}
