//! Picks the critical definition sentences.
//!
//! Each candidate sentence is average-pooled from the selector encoder run
//! over the whole definition; the pointer weight scores the concatenation of
//! all candidate vectors; `k` Gumbel-max draws are unioned into a k′-hot mask
//! that reaches the seq2seq model through a straight-through gate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compute::{ComputeError, Graph, Tensor, Var, MASK_NEG};
use crate::corpus::CandidateSet;
use crate::model::{argmax_lowest, ModelError, PickRankModel};
use crate::text::TokenSeq;

#[derive(Debug, Error)]
pub enum SelectorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error("candidate sentence {0} has an empty token span")]
    EmptySpan(usize),
    #[error("candidate sentence {sentence} has no span ({spans} spans recorded)")]
    MissingSpan { sentence: usize, spans: usize },
    #[error("{slots} candidate slots do not match pointer width {n_cand}")]
    SlotCount { slots: usize, n_cand: usize },
    #[error("frozen noise has {got} values, expected {expected}")]
    NoiseLength { got: usize, expected: usize },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
}

type Res<T> = Result<T, SelectorError>;

pub const DEFAULT_K: usize = 2;
pub const DEFAULT_TAU: f64 = 1.0;

const U_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct SentenceEmbeddings {
    /// `[n_cand, d_model]`; padded rows are zero.
    pub h: Var,
    n_cand: usize,
}

/// Average-pools each candidate's span of the selector encoder output.
pub fn sentence_embeddings(
    model: &PickRankModel,
    g: &mut Graph,
    definition: &TokenSeq,
    cands: &CandidateSet,
) -> Res<SentenceEmbeddings> {
    if cands.n_slots() != model.n_cand {
        return Err(SelectorError::SlotCount { slots: cands.n_slots(), n_cand: model.n_cand });
    }
    let spans = definition.spans();
    let hidden = model.selector_encoder_forward(g, &definition.ids)?;
    let d = model.config.d_model;
    let mut rows = Vec::with_capacity(model.n_cand);
    for &s in &cands.candidate_indices {
        let &(a, b) = spans.get(s).ok_or(SelectorError::MissingSpan { sentence: s, spans: spans.len() })?;
        if b <= a {
            return Err(SelectorError::EmptySpan(s));
        }
        let span = g.narrow(hidden, 0, a, b - a)?;
        let row = g.mean(span, Some(0))?;
        rows.push(g.reshape(row, &[1, d])?);
    }
    if cands.pad_count > 0 {
        rows.push(g.constant(Tensor::zeros(&[cands.pad_count, d])));
    }
    let h = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
    Ok(SentenceEmbeddings { h, n_cand: model.n_cand })
}

/// `W · [h_1; …; h_n]` with −1e9 added on invalid slots.
pub fn pointer_logits(model: &PickRankModel, g: &mut Graph, emb: &SentenceEmbeddings, valid: &[bool]) -> Res<Var> {
    let n = emb.n_cand;
    let width: usize = g.shape(emb.h).iter().product();
    let flat = g.reshape(emb.h, &[width, 1])?;
    let w = g.param(model.pointer());
    let z = g.matmul(w, flat)?;
    let z = g.reshape(z, &[n])?;
    let floor = g.constant(Tensor::vector(valid.iter().map(|&v| if v { 0.0 } else { MASK_NEG }).collect()));
    Ok(g.add(z, floor)?)
}

/// Source of standard-Gumbel perturbations.
pub enum Noise<'a> {
    /// Pre-drawn Gumbel values (length `k·n`); keeps the graph deterministic.
    Frozen(&'a [f64]),
    Sampled(&'a mut ChaCha8Rng),
}

/// `−log(−log u)` with `u` clamped away from 0 and 1.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(U_MIN, 1.0 - U_MIN);
    -(-u.ln()).ln()
}

pub fn draw_gumbel(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| gumbel_from_uniform(rng.gen::<f64>())).collect()
}

#[derive(Debug, Clone)]
pub struct GumbelSample {
    /// One-hot of `argmax(logits + g)`.
    pub hard: Vec<f64>,
    /// `softmax((logits + g) / τ)`.
    pub soft: Var,
    pub index: usize,
}

/// One Gumbel-Softmax draw with explicit noise `gumbel` (same length as logits).
pub fn gumbel_sample(g: &mut Graph, logits: Var, tau: f64, gumbel: &[f64]) -> Res<GumbelSample> {
    if !(tau > 0.0) {
        return Err(SelectorError::Temperature(tau));
    }
    let n = g.shape(logits).iter().product::<usize>();
    if gumbel.len() != n {
        return Err(SelectorError::NoiseLength { got: gumbel.len(), expected: n });
    }
    let noise = g.constant(Tensor::vector(gumbel.to_vec()));
    let perturbed = g.add(logits, noise)?;
    let index = argmax_lowest(g.value(perturbed));
    let scaled = g.scale(perturbed, 1.0 / tau);
    let soft = g.softmax(scaled, 0)?;
    let mut hard = vec![0.0; n];
    hard[index] = 1.0;
    Ok(GumbelSample { hard, soft, index })
}

#[derive(Debug, Clone)]
pub struct SelectionMask {
    pub hard: Vec<f64>,
    pub soft: Var,
    pub samples: Vec<Vec<f64>>,
    pub k: usize,
    pub k_effective: usize,
}

/// Element-wise maximum of hard one-hot vectors.
pub fn union_hard(samples: &[Vec<f64>]) -> Vec<f64> {
    let n = samples.first().map_or(0, Vec::len);
    (0..n).map(|i| samples.iter().map(|s| s[i]).fold(0.0, f64::max)).collect()
}

/// Unions `k ≥ 1` draws: hard and soft parts both by element-wise max.
pub fn union_mask(g: &mut Graph, samples: &[GumbelSample]) -> Res<SelectionMask> {
    assert!(!samples.is_empty(), "union of zero samples");
    let hards: Vec<Vec<f64>> = samples.iter().map(|s| s.hard.clone()).collect();
    let hard = union_hard(&hards);
    let mut soft = samples[0].soft;
    for s in &samples[1..] {
        soft = g.maximum(soft, s.soft)?;
    }
    let k_effective = hard.iter().filter(|&&v| v > 0.0).count();
    Ok(SelectionMask { hard, soft, samples: hards, k: samples.len(), k_effective })
}

/// `hard + (soft − stop_grad(soft))`: equals `hard` forward, soft gradient backward.
pub fn straight_through(g: &mut Graph, mask: &SelectionMask) -> Res<Var> {
    let hard = g.constant(Tensor::vector(mask.hard.clone()));
    let frozen = g.stop_gradient(mask.soft);
    let delta = g.sub(mask.soft, frozen)?;
    Ok(g.add(hard, delta)?)
}

/// Everything produced by one selector pass.
#[derive(Debug, Clone)]
pub struct Selection {
    pub logits: Var,
    pub mask: SelectionMask,
    /// Per-slot differentiable gate.
    pub gate: Var,
}

/// How the selector turns logits into a mask.
pub enum SelectMode<'a> {
    Gumbel(Noise<'a>),
    /// Noise-free: a one-hot at the highest valid logit.
    Argmax,
}

/// Full selector pass: embeddings, logits, `k` draws, union and gate.
pub fn select(
    model: &PickRankModel,
    g: &mut Graph,
    definition: &TokenSeq,
    cands: &CandidateSet,
    k: usize,
    tau: f64,
    mode: SelectMode<'_>,
) -> Res<Selection> {
    let emb = sentence_embeddings(model, g, definition, cands)?;
    let logits = pointer_logits(model, g, &emb, &cands.valid())?;
    let n = model.n_cand;
    let draws: Vec<Vec<f64>> = match mode {
        SelectMode::Gumbel(Noise::Frozen(z)) => {
            if z.len() != k * n {
                return Err(SelectorError::NoiseLength { got: z.len(), expected: k * n });
            }
            z.chunks(n).map(<[f64]>::to_vec).collect()
        }
        SelectMode::Gumbel(Noise::Sampled(rng)) => {
            g.mark_stochastic();
            (0..k).map(|_| draw_gumbel(rng, n)).collect()
        }
        SelectMode::Argmax => vec![vec![0.0; n]; k.max(1)],
    };
    let samples = draws.iter().map(|z| gumbel_sample(g, logits, tau, z)).collect::<Res<Vec<_>>>()?;
    let mask = union_mask(g, &samples)?;
    let gate = straight_through(g, &mask)?;
    Ok(Selection { logits, mask, gate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::{Grads, ParamStore};
    use crate::model::tiny_config;
    use crate::seed;

    fn setup() -> (PickRankModel, ParamStore) {
        let mut s = ParamStore::new();
        let m = PickRankModel::new(tiny_config(30), 5, &mut s, 3).unwrap();
        (m, s)
    }

    fn definition(spans: &[(usize, usize)], ids: Vec<u32>) -> TokenSeq {
        TokenSeq { ids, sentence_spans: Some(spans.to_vec()) }
    }

    fn cands(idx: Vec<usize>, pad: usize) -> CandidateSet {
        CandidateSet { task_id: "t".into(), candidate_indices: idx, pad_count: pad }
    }

    fn softmax(z: &[f64]) -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn single_token_sentence_equals_hidden_row() {
        let (m, s) = setup();
        let def = definition(&[(0, 1), (1, 3), (3, 4)], vec![10, 11, 12, 13]);
        let mut g = Graph::inference(&s);
        let emb = sentence_embeddings(&m, &mut g, &def, &cands(vec![0, 1, 2], 2)).unwrap();
        let hidden = m.selector_encoder_forward(&mut g, &def.ids).unwrap();
        let (h, hid) = (g.value(emb.h), g.value(hidden));
        assert_eq!(&h[..8], &hid[..8]);
        assert_eq!(&h[24..40], &[0.0; 16]);
        let mean: Vec<f64> = (0..8).map(|i| (hid[8 + i] + hid[16 + i]) / 2.0).collect();
        for i in 0..8 {
            assert!((h[8 + i] - mean[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_sentences_embed_differently_in_context() {
        let (m, s) = setup();
        let def = definition(&[(0, 2), (2, 4), (4, 6)], vec![10, 11, 12, 13, 10, 11]);
        let mut g = Graph::inference(&s);
        let emb = sentence_embeddings(&m, &mut g, &def, &cands(vec![0, 1, 2], 2)).unwrap();
        let h = g.value(emb.h);
        assert_ne!(&h[..8], &h[16..24]);
    }

    #[test]
    fn empty_span_is_an_error() {
        let (m, s) = setup();
        let def = definition(&[(0, 2), (2, 2)], vec![10, 11]);
        let mut g = Graph::inference(&s);
        assert!(matches!(
            sentence_embeddings(&m, &mut g, &def, &cands(vec![0, 1], 3)),
            Err(SelectorError::EmptySpan(1))
        ));
    }

    #[test]
    fn zero_pointer_gives_zero_logits_and_floor() {
        let (m, mut s) = setup();
        s.value_mut(m.pointer()).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let def = definition(&[(0, 2), (2, 4), (4, 6)], vec![10, 11, 12, 13, 14, 15]);
        let c = cands(vec![0, 1, 2], 2);
        let mut g = Graph::inference(&s);
        let emb = sentence_embeddings(&m, &mut g, &def, &c).unwrap();
        let z = pointer_logits(&m, &mut g, &emb, &c.valid()).unwrap();
        assert_eq!(g.value(z), &[0.0, 0.0, 0.0, MASK_NEG, MASK_NEG]);
    }

    #[test]
    fn pointer_is_equivariant_to_joint_permutation() {
        let (m, s) = setup();
        let mut g = Graph::inference(&s);
        let h: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect();
        let hv = g.constant(Tensor::new(vec![5, 8], h.clone()).unwrap());
        let emb = SentenceEmbeddings { h: hv, n_cand: 5 };
        let z = pointer_logits(&m, &mut g, &emb, &[true; 5]).unwrap();
        let z = g.value(z).to_vec();

        // swap sentences 1 and 3 and the matching column blocks of W
        let swap_rows = |v: &mut Vec<f64>, width: usize| {
            for c in 0..width {
                v.swap(width + c, 3 * width + c);
            }
        };
        let mut h2 = h;
        swap_rows(&mut h2, 8);
        let mut s2 = s.clone();
        let w = s2.value_mut(m.pointer()).data_mut();
        for r in 0..5 {
            for c in 0..8 {
                w.swap(r * 40 + 8 + c, r * 40 + 24 + c);
            }
        }
        let mut g2 = Graph::inference(&s2);
        let hv = g2.constant(Tensor::new(vec![5, 8], h2).unwrap());
        let z2 = pointer_logits(&m, &mut g2, &SentenceEmbeddings { h: hv, n_cand: 5 }, &[true; 5]).unwrap();
        for (a, b) in z.iter().zip(g2.value(z2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn frequencies(logits: &[f64], draws: usize, seed: u64) -> Vec<f64> {
        let s = ParamStore::new();
        let mut rng = seed::rng(seed, 0);
        let mut counts = vec![0usize; logits.len()];
        for _ in 0..draws {
            let mut g = Graph::inference(&s);
            let z = g.constant(Tensor::vector(logits.to_vec()));
            let noise = draw_gumbel(&mut rng, logits.len());
            counts[gumbel_sample(&mut g, z, 1.0, &noise).unwrap().index] += 1;
        }
        counts.iter().map(|&c| c as f64 / draws as f64).collect()
    }

    #[test]
    fn gumbel_max_matches_categorical() {
        let f = frequencies(&[0.0; 5], 100_000, 1);
        assert!(f.iter().all(|p| (p - 0.2).abs() < 0.01), "{f:?}");
        let f = frequencies(&[2f64.ln(), 0.0, 0.0, 0.0, 0.0], 100_000, 2);
        assert!((f[0] - 2.0 / 6.0).abs() < 0.01, "{f:?}");
        let f = frequencies(&[0.3, -1.0, MASK_NEG, 1.2, MASK_NEG], 20_000, 3);
        assert_eq!((f[2], f[4]), (0.0, 0.0));
    }

    #[test]
    fn frozen_noise_is_deterministic_and_tau_invariant() {
        let s = ParamStore::new();
        let z = [0.1, 0.7, -0.2, 0.4, 0.0];
        let noise = [0.3, -0.5, 1.9, 0.2, 0.1];
        let run = |tau: f64| {
            let mut g = Graph::inference(&s);
            let l = g.constant(Tensor::vector(z.to_vec()));
            let r = gumbel_sample(&mut g, l, tau, &noise).unwrap();
            (r.hard, g.value(r.soft).to_vec())
        };
        assert_eq!(run(1.0), run(1.0));
        for tau in [0.1, 0.5, 2.0, 10.0] {
            assert_eq!(run(tau).0, run(1.0).0);
        }
        let soft = run(1.0).1;
        let expect = softmax(&z.iter().zip(noise).map(|(a, b)| a + b).collect::<Vec<_>>());
        for (a, b) in soft.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(gumbel_from_uniform(0.0).is_finite() && gumbel_from_uniform(1.0).is_finite());
    }

    fn one_hot(i: usize) -> Vec<f64> {
        let mut v = vec![0.0; 5];
        v[i] = 1.0;
        v
    }

    #[test]
    fn union_examples() {
        assert_eq!(union_hard(&[one_hot(0), one_hot(2)]), vec![1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(union_hard(&[one_hot(1), one_hot(1)]), one_hot(1));
        assert_eq!(union_hard(&[one_hot(4)]), one_hot(4));

        let s = ParamStore::new();
        let mut g = Graph::inference(&s);
        let l = g.constant(Tensor::vector(vec![0.0; 5]));
        let a = gumbel_sample(&mut g, l, 1.0, &[5.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let b = gumbel_sample(&mut g, l, 1.0, &[0.0, 0.0, 5.0, 0.0, 0.0]).unwrap();
        let (sa, sb) = (g.value(a.soft).to_vec(), g.value(b.soft).to_vec());
        let m = union_mask(&mut g, &[a, b]).unwrap();
        assert_eq!(m.k_effective, 2);
        let soft = g.value(m.soft);
        for i in 0..5 {
            assert_eq!(soft[i], sa[i].max(sb[i]));
        }
    }

    #[test]
    fn straight_through_forward_is_hard_and_backward_is_soft() {
        let s = ParamStore::new();
        let noise = [0.2, -0.4, 0.9, 0.1, -1.3, 0.5, 0.8, -0.2, 0.0, 0.3];
        let z0 = vec![0.4, -0.3, 0.2, 1.0, MASK_NEG];
        let build = |g: &mut Graph, z: Var| {
            let a = gumbel_sample(g, z, 1.0, &noise[..5]).unwrap();
            let b = gumbel_sample(g, z, 1.0, &noise[5..]).unwrap();
            union_mask(g, &[a, b]).unwrap()
        };
        let mut g = Graph::new(&s);
        let z = g.input(Tensor::vector(z0.clone()));
        let m = build(&mut g, z);
        let gate = straight_through(&mut g, &m).unwrap();
        assert_eq!(g.value(gate), m.hard.as_slice());
        let w = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0, 5.0]));
        let y = g.mul(gate, w).unwrap();
        let y = g.sum(y, None).unwrap();
        let mut grads = Grads::new(&s);
        let ng = g.backward(y, &mut grads).unwrap();
        let analytic = ng.get(z).unwrap().to_vec();

        // finite differences on the soft path alone
        let soft_obj = |zv: &[f64]| {
            let mut g = Graph::inference(&s);
            let z = g.constant(Tensor::vector(zv.to_vec()));
            let m = build(&mut g, z);
            g.value(m.soft).iter().zip(1..).map(|(p, c)| p * c as f64).sum::<f64>()
        };
        for i in 0..4 {
            let (mut zp, mut zm) = (z0.clone(), z0.clone());
            zp[i] += 1e-6;
            zm[i] -= 1e-6;
            let fd = (soft_obj(&zp) - soft_obj(&zm)) / 2e-6;
            assert!((fd - analytic[i]).abs() < 1e-6, "{i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn sampled_selection_masks_are_well_formed() {
        let (m, s) = setup();
        let def = definition(&[(0, 2), (2, 3), (3, 5)], vec![10, 11, 12, 13, 14]);
        let c = cands(vec![0, 1, 2], 2);
        let mut rng = seed::rng(9, 0);
        for _ in 0..50 {
            let mut g = Graph::new(&s);
            let sel = select(&m, &mut g, &def, &c, 2, 1.0, SelectMode::Gumbel(Noise::Sampled(&mut rng))).unwrap();
            assert!(g.is_stochastic());
            assert!((1..=2).contains(&sel.mask.k_effective));
            assert_eq!(&sel.mask.hard[3..], &[0.0, 0.0]);
        }
        let mut g = Graph::inference(&s);
        let sel = select(&m, &mut g, &def, &c, 2, 1.0, SelectMode::Argmax).unwrap();
        assert_eq!(sel.mask.k_effective, 1);
        assert_eq!(sel.mask.hard[argmax_lowest(g.value(sel.logits))], 1.0);
    }
}
