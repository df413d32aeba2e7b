//! NLL on the Repeat variant plus margin ranking losses against Origin,
//! Delete and Null.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::{ComputeError, Graph, Var};
use crate::config::{fmt_f64, parse_value, ConfigError, KvConfig};
use crate::corpus::CandidateSet;
use crate::model::{EncoderOutput, ModelError, PickRankModel};
use crate::selector::{select, SelectMode, Selection, SelectorError};
use crate::text::TokenSeq;
use crate::variants::{build_delete, build_null, build_origin, build_repeat, InstructionVariant};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Compute(#[from] ComputeError),
}

type Res<T> = Result<T, ObjectiveError>;

/// Probabilities are clamped here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    Strategy1Only,
    RankingOrigin,
    RankingDelete,
    RankingNull,
    RankingAll,
}

impl ObjectiveMode {
    pub const ALL: [ObjectiveMode; 5] =
        [Self::Strategy1Only, Self::RankingOrigin, Self::RankingDelete, Self::RankingNull, Self::RankingAll];

    pub fn name(self) -> &'static str {
        match self {
            Self::Strategy1Only => "strategy1_only",
            Self::RankingOrigin => "ranking_origin",
            Self::RankingDelete => "ranking_delete",
            Self::RankingNull => "ranking_null",
            Self::RankingAll => "ranking_all",
        }
    }

    fn uses_origin(self) -> bool {
        matches!(self, Self::RankingOrigin | Self::RankingAll)
    }

    fn uses_delete(self) -> bool {
        matches!(self, Self::RankingDelete | Self::RankingAll)
    }

    fn uses_null(self) -> bool {
        matches!(self, Self::RankingNull | Self::RankingAll)
    }
}

impl fmt::Display for ObjectiveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("expected one of {}", Self::ALL.map(Self::name).join(", ")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub alpha_origin: f64,
    pub alpha_delete: f64,
    pub alpha_null: f64,
    pub beta: f64,
    pub mode: ObjectiveMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { alpha_origin: 0.01, alpha_delete: 0.03, alpha_null: 0.1, beta: 1.0, mode: ObjectiveMode::RankingAll }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let all = [self.alpha_origin, self.alpha_delete, self.alpha_null, self.beta];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ConfigError::Invalid("margins and beta must be finite and non-negative".into()));
        }
        Ok(())
    }
}

impl KvConfig for ObjectiveConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "alpha_origin" => self.alpha_origin = parse_value(key, value)?,
            "alpha_delete" => self.alpha_delete = parse_value(key, value)?,
            "alpha_null" => self.alpha_null = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "objective" => self.mode = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("objective".into(), self.mode.to_string()),
            ("alpha_origin".into(), fmt_f64(self.alpha_origin)),
            ("alpha_delete".into(), fmt_f64(self.alpha_delete)),
            ("alpha_null".into(), fmt_f64(self.alpha_null)),
            ("beta".into(), fmt_f64(self.beta)),
        ]
    }
}

/// Per-step loss values; rank terms are 0 and f values absent when inactive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub rank_origin: f64,
    pub rank_delete: f64,
    pub rank_null: f64,
    pub total: f64,
    pub f_repeat: f64,
    pub f_origin: Option<f64>,
    pub f_delete: Option<f64>,
    pub f_null: Option<f64>,
}

/// `max(0, α − f_pos + f_neg)`.
pub fn rank_value(f_pos: f64, f_neg: f64, alpha: f64) -> f64 {
    (alpha - f_pos + f_neg).max(0.0)
}

/// Differentiable hinge; the subgradient at the kink is 0.
pub fn rank_loss(g: &mut Graph, f_pos: Var, f_neg: Var, alpha: f64) -> Res<Var> {
    let d = g.sub(f_neg, f_pos)?;
    let d = g.add_scalar(d, alpha);
    Ok(g.relu(d))
}

/// `−mean(log(max(p, 1e-12)))` over per-token gold probabilities.
pub fn nll_from_probs(g: &mut Graph, probs: Var) -> Res<Var> {
    let p = g.clamp_min(probs, PROB_FLOOR);
    let lp = g.log(p);
    let m = g.mean(lp, None)?;
    Ok(g.neg(m))
}

pub fn encode_variant(model: &PickRankModel, g: &mut Graph, v: &InstructionVariant) -> Res<EncoderOutput> {
    Ok(model.encode(g, &v.tokens, v.gate)?)
}

/// One training example in token form. `gold` includes the trailing EOS.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub definition: &'a TokenSeq,
    pub cands: &'a CandidateSet,
    pub input: &'a [u32],
    pub gold: &'a [u32],
}

#[derive(Debug)]
pub struct StepOutput {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub selection: Selection,
    /// Per-token gold probabilities under Repeat.
    pub repeat_probs: Var,
}

/// Loss for one example given an already-computed per-slot gate.
pub fn total_loss(
    model: &PickRankModel,
    g: &mut Graph,
    ex: Example<'_>,
    slot_gate: Var,
    cfg: &ObjectiveConfig,
) -> Res<(Var, LossBreakdown, Var)> {
    let max = model.config.max_src_len;
    let repeat = build_repeat(g, ex.definition, ex.cands, slot_gate, ex.input, max)?;
    let enc = encode_variant(model, g, &repeat)?;
    let probs = model.gold_token_probs(g, &enc, ex.gold)?;
    let f_repeat = g.mean(probs, None)?;
    let nll = nll_from_probs(g, probs)?;

    let mut total = nll;
    let mut out = LossBreakdown {
        nll: g.scalar(nll),
        rank_origin: 0.0,
        rank_delete: 0.0,
        rank_null: 0.0,
        total: 0.0,
        f_repeat: g.scalar(f_repeat),
        f_origin: None,
        f_delete: None,
        f_null: None,
    };
    let mut ranks = Vec::new();
    let mode = cfg.mode;
    let mut negative = |g: &mut Graph, v: InstructionVariant, alpha: f64| -> Res<(f64, f64)> {
        let enc = encode_variant(model, g, &v)?;
        let f = model.sequence_prob(g, &enc, ex.gold)?;
        let r = rank_loss(g, f_repeat, f, alpha)?;
        ranks.push(r);
        Ok((g.scalar(f), g.scalar(r)))
    };
    if mode.uses_origin() {
        let v = build_origin(g, ex.definition, ex.input, max)?;
        let (f, r) = negative(g, v, cfg.alpha_origin)?;
        (out.f_origin, out.rank_origin) = (Some(f), r);
    }
    if mode.uses_delete() {
        let v = build_delete(g, ex.definition, ex.cands, slot_gate, ex.input, max)?;
        let (f, r) = negative(g, v, cfg.alpha_delete)?;
        (out.f_delete, out.rank_delete) = (Some(f), r);
    }
    if mode.uses_null() {
        let v = build_null(g, ex.input, max)?;
        let (f, r) = negative(g, v, cfg.alpha_null)?;
        (out.f_null, out.rank_null) = (Some(f), r);
    }
    if !ranks.is_empty() {
        let mut sum = ranks[0];
        for &r in &ranks[1..] {
            sum = g.add(sum, r)?;
        }
        let scaled = g.scale(sum, cfg.beta);
        total = g.add(nll, scaled)?;
    }
    out.total = g.scalar(total);
    Ok((total, out, probs))
}

/// Selector pass followed by [`total_loss`] on its straight-through gate.
pub fn step_loss(
    model: &PickRankModel,
    g: &mut Graph,
    ex: Example<'_>,
    cfg: &ObjectiveConfig,
    k: usize,
    tau: f64,
    mode: SelectMode<'_>,
) -> Res<StepOutput> {
    let selection = select(model, g, ex.definition, ex.cands, k, tau, mode)?;
    let (loss, breakdown, repeat_probs) = total_loss(model, g, ex, selection.gate, cfg)?;
    Ok(StepOutput { loss, breakdown, selection, repeat_probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::{grad_check, GradCheckConfig, ParamStore, Tensor};
    use crate::model::tiny_config;
    use crate::selector::Noise;
    use crate::text::EOS;

    fn fixture() -> (TokenSeq, CandidateSet, Vec<u32>, Vec<u32>) {
        let def = TokenSeq { ids: vec![10, 11, 12, 13, 14, 15], sentence_spans: Some(vec![(0, 2), (2, 4), (4, 6)]) };
        let c = CandidateSet { task_id: "t".into(), candidate_indices: vec![0, 1, 2], pad_count: 2 };
        (def, c, vec![16, 17], vec![18, EOS])
    }

    fn model(vocab: usize) -> (PickRankModel, ParamStore) {
        let mut s = ParamStore::new();
        let m = PickRankModel::new(tiny_config(vocab), 5, &mut s, 11).unwrap();
        (m, s)
    }

    const NOISE: [f64; 10] = [0.3, -0.2, 1.1, 0.0, 0.4, -0.7, 0.9, 0.2, 0.1, -0.3];

    fn run(m: &PickRankModel, s: &ParamStore, cfg: &ObjectiveConfig) -> LossBreakdown {
        let (def, c, x, y) = fixture();
        let ex = Example { definition: &def, cands: &c, input: &x, gold: &y };
        let mut g = Graph::inference(s);
        step_loss(m, &mut g, ex, cfg, 2, 1.0, SelectMode::Gumbel(Noise::Frozen(&NOISE))).unwrap().breakdown
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_value(0.59, 0.11, 0.1), 0.0);
        assert!((rank_value(0.5, 0.5, 0.1) - 0.1).abs() < 1e-15);
        assert!((rank_value(0.30, 0.29, 0.03) - 0.02).abs() < 1e-12);
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let (p, n) = (g.input(Tensor::scalar(0.5)), g.input(Tensor::scalar(0.5)));
        let r = rank_loss(&mut g, p, n, 0.1).unwrap();
        assert!((g.scalar(r) - 0.1).abs() < 1e-15);
        let mut grads = crate::compute::Grads::new(&s);
        let ng = g.backward(r, &mut grads).unwrap();
        assert_eq!((ng.get(p).unwrap()[0], ng.get(n).unwrap()[0]), (-1.0, 1.0));
    }

    #[test]
    fn uniform_model_nll_is_log_vocab() {
        let (m, mut s) = model(10);
        crate::model::flatten_output(&mut s);
        let (def, c, x, _) = fixture();
        let def = TokenSeq { ids: def.ids.iter().map(|i| i % 10).collect(), ..def };
        let x: Vec<u32> = x.iter().map(|i| i % 10).collect();
        let ex = Example { definition: &def, cands: &c, input: &x, gold: &[9, EOS] };
        let mut g = Graph::inference(&s);
        let cfg = ObjectiveConfig { mode: ObjectiveMode::Strategy1Only, ..Default::default() };
        let out = step_loss(&m, &mut g, ex, &cfg, 2, 1.0, SelectMode::Argmax).unwrap();
        assert!((out.breakdown.nll - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_recomputation_from_dumped_probs() {
        let (m, s) = model(20);
        let (def, c, x, y) = fixture();
        let ex = Example { definition: &def, cands: &c, input: &x, gold: &y };
        let mut g = Graph::inference(&s);
        let out = step_loss(&m, &mut g, ex, &ObjectiveConfig::default(), 2, 1.0, SelectMode::Gumbel(Noise::Frozen(&NOISE))).unwrap();
        let p = g.value(out.repeat_probs);
        let nll = -p.iter().map(|v| v.ln()).sum::<f64>() / p.len() as f64;
        let f = p.iter().sum::<f64>() / p.len() as f64;
        assert!((out.breakdown.nll - nll).abs() < 1e-12);
        assert!((out.breakdown.f_repeat - f).abs() < 1e-15);
    }

    #[test]
    fn mode_structure() {
        let (m, s) = model(20);
        let s1 = run(&m, &s, &ObjectiveConfig { mode: ObjectiveMode::Strategy1Only, ..Default::default() });
        assert_eq!(s1.total, s1.nll);
        assert_eq!((s1.rank_origin, s1.rank_delete, s1.rank_null), (0.0, 0.0, 0.0));
        assert!(s1.f_origin.is_none() && s1.f_delete.is_none() && s1.f_null.is_none());

        let all = run(&m, &s, &ObjectiveConfig::default());
        assert!(all.f_origin.is_some() && all.f_delete.is_some() && all.f_null.is_some());
        let expect = all.nll + all.rank_origin + all.rank_delete + all.rank_null;
        assert!((all.total - expect).abs() < 1e-15);
        assert!((all.rank_null - rank_value(all.f_repeat, all.f_null.unwrap(), 0.1)).abs() < 1e-15);
        assert_eq!(all.nll, s1.nll);

        for mode in ObjectiveMode::ALL {
            let b = run(&m, &s, &ObjectiveConfig { mode, beta: 0.0, ..Default::default() });
            assert_eq!(b.total, b.nll);
            let b = run(&m, &s, &ObjectiveConfig { mode, ..Default::default() });
            assert!(b.total >= b.nll);
        }
        let o = run(&m, &s, &ObjectiveConfig { mode: ObjectiveMode::RankingOrigin, ..Default::default() });
        assert!(o.f_origin.is_some() && o.f_delete.is_none());
    }

    #[test]
    fn config_round_trips_through_kv() {
        let mut c = ObjectiveConfig::default();
        c.apply(&[("objective".into(), "ranking_null".into()), ("beta".into(), "0.5".into())]).unwrap();
        assert_eq!((c.mode, c.beta), (ObjectiveMode::RankingNull, 0.5));
        let mut d = ObjectiveConfig::default();
        d.apply(&crate::config::parse_kv(&c.to_kv_string()).unwrap()).unwrap();
        assert_eq!(c, d);
        assert!(c.set("objective", "bogus").is_err());
        assert!(ObjectiveConfig { alpha_null: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn full_loss_gradient_check_with_frozen_noise() {
        let (m, mut s) = model(20);
        let (def, c, x, y) = fixture();
        let cfg = ObjectiveConfig { alpha_origin: 0.5, alpha_delete: 0.5, alpha_null: 0.5, ..Default::default() };
        let ids: Vec<_> = s.ids().collect();
        let gc = GradCheckConfig { max_per_param: Some(3), ..Default::default() };
        let report = grad_check(&mut s, &ids, gc, |g| {
            let ex = Example { definition: &def, cands: &c, input: &x, gold: &y };
            step_loss(&m, g, ex, &cfg, 2, 1.0, SelectMode::Gumbel(Noise::Frozen(&NOISE))).map(|o| o.loss)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
