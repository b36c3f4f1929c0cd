//! Multi-head self-attention over randomly grouped tokens.
//!
//! Two ways of consuming a [`GroupPlan`]:
//!
//! * [`grouped_self_attention`]: every head gathers its tokens into plan
//!   order, attends within each group, and scatters the result back.
//! * [`pooled_group_attention`]: every head mean-pools each of its groups
//!   into one key/value token; all real tokens attend globally to the pooled
//!   tokens.
//!
//! [`block_mask_attention_oracle`] computes grouped attention densely with a
//! block-diagonal additive mask and serves as the reference for the grouped
//! path. All three accept `[N, d]` or `[B, N, d]` inputs; scores are scaled
//! by `1/sqrt(d_head)`.

use crate::autodiff::{Graph, Var, MASK_SENTINEL};
use crate::error::{Error, Result};
use crate::randgroup::{GroupAssignment, GroupPlan};
use crate::rng::SplitMix64;
use crate::tensor::TensorF;

/// [`Graph::set_flop_tag`] label of query-key products.
pub const SCORE_TAG: &str = "attn.scores";
/// [`Graph::set_flop_tag`] label of attention-weighted value sums.
pub const WEIGHTED_TAG: &str = "attn.weighted";

/// Projection parameters of one multi-head attention layer (no biases).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: TensorF,
    pub w_k: TensorF,
    pub w_v: TensorF,
    pub w_o: TensorF,
    n_heads: usize,
}

impl AttentionWeights {
    pub fn new(
        w_q: TensorF,
        w_k: TensorF,
        w_v: TensorF,
        w_o: TensorF,
        n_heads: usize,
    ) -> Result<Self> {
        let d = w_q.shape()[0];
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d} not divisible by {n_heads} heads"
            )));
        }
        for w in [&w_q, &w_k, &w_v, &w_o] {
            if w.shape() != [d, d] {
                return Err(Error::ShapeMismatch {
                    op: "AttentionWeights",
                    lhs: vec![d, d],
                    rhs: w.shape().to_vec(),
                });
            }
            w.validate()?;
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            n_heads,
        })
    }

    /// Gaussian weights with standard deviation `std`.
    pub fn random(d_model: usize, n_heads: usize, std: f64, rng: &mut SplitMix64) -> Result<Self> {
        let mut draw = || TensorF::from_fn(&[d_model, d_model], |_| std * rng.normal());
        let (q, k, v, o) = (draw(), draw(), draw(), draw());
        Self::new(q, k, v, o, n_heads)
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn d_head(&self) -> usize {
        self.d_model() / self.n_heads
    }

    /// Records the weights as gradient-receiving leaves.
    pub fn to_params(&self, g: &mut Graph) -> AttentionVars {
        AttentionVars {
            w_q: g.param(self.w_q.clone()),
            w_k: g.param(self.w_k.clone()),
            w_v: g.param(self.w_v.clone()),
            w_o: g.param(self.w_o.clone()),
            n_heads: self.n_heads,
        }
    }

    pub fn to_constants(&self, g: &mut Graph) -> AttentionVars {
        AttentionVars {
            w_q: g.constant(self.w_q.clone()),
            w_k: g.constant(self.w_k.clone()),
            w_v: g.constant(self.w_v.clone()),
            w_o: g.constant(self.w_o.clone()),
            n_heads: self.n_heads,
        }
    }
}

/// Attention weights recorded in a [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub n_heads: usize,
}

/// Which plan each sample of a batch uses.
#[derive(Debug, Clone, Copy)]
pub enum Grouping<'a> {
    /// One plan for every sample.
    Shared(&'a GroupPlan),
    /// One plan per sample, in batch order.
    PerSample(&'a [GroupPlan]),
}

impl<'a> Grouping<'a> {
    fn first(&self) -> Result<&'a GroupPlan> {
        match self {
            Grouping::Shared(p) => Ok(p),
            Grouping::PerSample(ps) => ps
                .first()
                .ok_or_else(|| Error::Grouping("empty per-sample plan list".into())),
        }
    }

    /// Permutations (or inverses) for every `(sample, head)` of a `batch`,
    /// concatenated in that order.
    fn index(&self, batch: usize, inverse: bool) -> Vec<usize> {
        let pick = |p: &GroupPlan| -> Vec<usize> {
            (0..p.n_heads())
                .flat_map(|h| if inverse { p.inv_perm(h) } else { p.perm(h) })
                .copied()
                .collect()
        };
        match self {
            Grouping::Shared(p) => pick(p).repeat(batch),
            Grouping::PerSample(ps) => ps.iter().flat_map(pick).collect(),
        }
    }
}

/// Batch size, token count and width of an `[N, d]` or `[B, N, d]` input.
fn token_layout(g: &Graph, x: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [n, d] => Ok((1, n, d)),
        [b, n, d] => Ok((b, n, d)),
        ref s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "attention input must be [N, d] or [B, N, d]".into(),
        }),
    }
}

fn check_plan(
    grouping: &Grouping,
    batch: usize,
    n: usize,
    d: usize,
    w: &AttentionVars,
) -> Result<()> {
    if !d.is_multiple_of(w.n_heads) {
        return Err(Error::Config(format!(
            "d_model {d} not divisible by {} heads",
            w.n_heads
        )));
    }
    let plans: Vec<&GroupPlan> = match grouping {
        Grouping::Shared(p) => vec![p],
        Grouping::PerSample(ps) => {
            if ps.len() != batch {
                return Err(Error::Grouping(format!(
                    "{} per-sample plans for a batch of {batch}",
                    ps.len()
                )));
            }
            ps.iter().collect()
        }
    };
    for p in plans {
        if p.n_tokens() != n {
            return Err(Error::Grouping(format!(
                "plan covers {}x{} = {} tokens, input has {n}",
                p.height(),
                p.width(),
                p.n_tokens()
            )));
        }
        if p.n_heads() != w.n_heads {
            return Err(Error::Grouping(format!(
                "plan has {} heads, weights have {}",
                p.n_heads(),
                w.n_heads
            )));
        }
    }
    let first = grouping.first()?;
    if let Grouping::PerSample(ps) = grouping {
        if ps
            .iter()
            .any(|p| p.group_size() != first.group_size() || p.n_pad() != first.n_pad())
        {
            return Err(Error::Grouping(
                "per-sample plans disagree on group layout".into(),
            ));
        }
    }
    Ok(())
}

/// `[B, N, H * dh] -> [B, H, N, dh]`.
fn split_heads(g: &mut Graph, t: Var, heads: usize) -> Result<Var> {
    let [b, n, d] = g.shape(t)[..] else {
        unreachable!("projections are [B, N, d]")
    };
    let t = g.reshape(t, &[b, n, heads, d / heads])?;
    g.swap_axes12(t)
}

/// `[B, H, N, dh] -> [B, N, H * dh]`.
fn merge_heads(g: &mut Graph, t: Var) -> Result<Var> {
    let [b, h, n, dh] = g.shape(t)[..] else {
        unreachable!("head outputs are [B, H, N, dh]")
    };
    let t = g.swap_axes12(t)?;
    g.reshape(t, &[b, n, h * dh])
}

/// Reorders `[B, H, N, dh]` head tensors into plan order, padding first.
fn to_plan_order(g: &mut Graph, x: Var, grouping: &Grouping, n_pad: usize) -> Result<Var> {
    let batch = g.shape(x)[0];
    let padded = if n_pad > 0 { g.pad_rows(x, n_pad)? } else { x };
    g.gather_rows(padded, &grouping.index(batch, false))
}

/// Additive `[G, 1, gs]` mask hiding padding keys, or `None` without padding.
fn pad_key_mask(groups: usize, group_size: usize, n_pad: usize) -> Option<TensorF> {
    (n_pad > 0).then(|| {
        let mut m = TensorF::zeros(&[groups, 1, group_size]);
        let last = &mut m.data_mut()[(groups - 1) * group_size..];
        last[group_size - n_pad..].fill(MASK_SENTINEL);
        m
    })
}

/// Grouped (partition-based) attention recorded into `g`.
///
/// When `tap` is given it receives the head outputs (`[B, H, N, d_head]`,
/// before the output projection).
pub fn grouped_attention_graph(
    g: &mut Graph,
    x: Var,
    grouping: Grouping,
    w: &AttentionVars,
    tap: Option<&mut Option<Var>>,
) -> Result<Var> {
    let (batch, n, d) = token_layout(g, x)?;
    check_plan(&grouping, batch, n, d, w)?;
    let plan = grouping.first()?;
    let (gs, n_pad, groups) = (plan.group_size(), plan.n_pad(), plan.group_count());
    let (heads, slots) = (w.n_heads, n + n_pad);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mask = pad_key_mask(groups, gs, n_pad);

    let x3 = g.reshape(x, &[batch, n, d])?;
    let mut grouped = |wt: Var| -> Result<Var> {
        let t = g.matmul(x3, wt)?;
        let t = split_heads(g, t, heads)?;
        let t = to_plan_order(g, t, &grouping, n_pad)?;
        g.reshape(t, &[batch, heads, groups, gs, dh])
    };
    let (q, k, v) = (grouped(w.w_q)?, grouped(w.w_k)?, grouped(w.w_v)?);
    let kt = g.transpose_last2(k)?;
    let prev = g.set_flop_tag(SCORE_TAG);
    let scores = g.matmul(q, kt)?;
    g.set_flop_tag(prev);
    let scores = g.scale(scores, scale)?;
    let attn = g.softmax_lastdim(scores, mask.as_ref())?;
    let prev = g.set_flop_tag(WEIGHTED_TAG);
    let out = g.matmul(attn, v)?;
    g.set_flop_tag(prev);
    let out = g.reshape(out, &[batch, heads, slots, dh])?;
    let out = g.gather_rows(out, &grouping.index(batch, true))?;
    let out = if n_pad > 0 {
        g.slice_rows(out, 0, n)?
    } else {
        out
    };
    if let Some(t) = tap {
        *t = Some(out);
    }
    let cat = merge_heads(g, out)?;
    let y = g.matmul(cat, w.w_o)?;
    g.reshape(y, &input_shape(batch, n, d, g.shape(x).len()))
}

/// Pooling-based attention recorded into `g`: keys and values are the
/// per-head group means (padding excluded), queries are all real tokens.
pub fn pooled_attention_graph(
    g: &mut Graph,
    x: Var,
    grouping: Grouping,
    w: &AttentionVars,
    tap: Option<&mut Option<Var>>,
) -> Result<Var> {
    let (batch, n, d) = token_layout(g, x)?;
    check_plan(&grouping, batch, n, d, w)?;
    let plan = grouping.first()?;
    let (gs, n_pad, groups) = (plan.group_size(), plan.n_pad(), plan.group_count());
    let valid = plan.valid_counts();
    if valid.contains(&0) {
        return Err(Error::Grouping(
            "a group holds only padding and cannot be pooled".into(),
        ));
    }
    let heads = w.n_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let x3 = g.reshape(x, &[batch, n, d])?;
    let q = g.matmul(x3, w.w_q)?;
    let q = split_heads(g, q, heads)?;
    let mut pool = |wt: Var| -> Result<Var> {
        let t = g.matmul(x3, wt)?;
        let t = split_heads(g, t, heads)?;
        let t = to_plan_order(g, t, &grouping, n_pad)?;
        let blocks = g.reshape(t, &[batch, heads, groups, gs, dh])?;
        g.mean_lastdim_groups(blocks, Some(&valid))
    };
    let (k, v) = (pool(w.w_k)?, pool(w.w_v)?);
    let kt = g.transpose_last2(k)?;
    let prev = g.set_flop_tag(SCORE_TAG);
    let scores = g.matmul(q, kt)?;
    g.set_flop_tag(prev);
    let scores = g.scale(scores, scale)?;
    let attn = g.softmax_lastdim(scores, None)?;
    let prev = g.set_flop_tag(WEIGHTED_TAG);
    let out = g.matmul(attn, v)?;
    g.set_flop_tag(prev);
    if let Some(t) = tap {
        *t = Some(out);
    }
    let cat = merge_heads(g, out)?;
    let y = g.matmul(cat, w.w_o)?;
    g.reshape(y, &input_shape(batch, n, d, g.shape(x).len()))
}

/// Dense attention with a per-head block-diagonal mask built from `assignment`.
pub fn block_mask_oracle_graph(
    g: &mut Graph,
    x: Var,
    assignment: &GroupAssignment,
    w: &AttentionVars,
) -> Result<Var> {
    let (batch, n, d) = token_layout(g, x)?;
    if assignment.n_tokens != n || assignment.n_heads != w.n_heads || d % w.n_heads != 0 {
        return Err(Error::Grouping(format!(
            "assignment ({} heads, {} tokens) does not fit input of {n} tokens, {} heads, width {d}",
            assignment.n_heads, assignment.n_tokens, w.n_heads
        )));
    }
    let dh = d / w.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let x3 = g.reshape(x, &[batch, n, d])?;
    let q = g.matmul(x3, w.w_q)?;
    let k = g.matmul(x3, w.w_k)?;
    let v = g.matmul(x3, w.w_v)?;
    let mut heads = Vec::with_capacity(w.n_heads);
    for h in 0..w.n_heads {
        let mask = TensorF::from_fn(&[n, n], |idx| {
            if assignment.group_of(h, idx / n) == assignment.group_of(h, idx % n) {
                0.0
            } else {
                MASK_SENTINEL
            }
        });
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose_last2(kh)?;
        let prev = g.set_flop_tag(SCORE_TAG);
        let scores = g.matmul(qh, kt)?;
        g.set_flop_tag(prev);
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax_lastdim(scores, Some(&mask))?;
        let prev = g.set_flop_tag(WEIGHTED_TAG);
        heads.push(g.matmul(attn, vh)?);
        g.set_flop_tag(prev);
    }
    let cat = g.concat_cols(&heads)?;
    let y = g.matmul(cat, w.w_o)?;
    g.reshape(y, &input_shape(batch, n, d, g.shape(x).len()))
}

fn input_shape(batch: usize, n: usize, d: usize, ndim: usize) -> Vec<usize> {
    if ndim == 2 {
        vec![n, d]
    } else {
        vec![batch, n, d]
    }
}

fn run_constant(
    x: &TensorF,
    w: &AttentionWeights,
    f: impl FnOnce(&mut Graph, Var, &AttentionVars) -> Result<Var>,
) -> Result<TensorF> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = w.to_constants(&mut g);
    let y = f(&mut g, xv, &wv)?;
    Ok(g.value(y).clone())
}

/// Grouped self-attention of `x` (`[N, d]` or `[B, N, d]`) under `plan`.
pub fn grouped_self_attention(
    x: &TensorF,
    plan: &GroupPlan,
    w: &AttentionWeights,
) -> Result<TensorF> {
    run_constant(x, w, |g, x, wv| {
        grouped_attention_graph(g, x, Grouping::Shared(plan), wv, None)
    })
}

/// Pooled-group attention of `x` under `plan`.
pub fn pooled_group_attention(
    x: &TensorF,
    plan: &GroupPlan,
    w: &AttentionWeights,
) -> Result<TensorF> {
    run_constant(x, w, |g, x, wv| {
        pooled_attention_graph(g, x, Grouping::Shared(plan), wv, None)
    })
}

/// Dense masked reference for [`grouped_self_attention`].
pub fn block_mask_attention_oracle(
    x: &TensorF,
    assignment: &GroupAssignment,
    w: &AttentionWeights,
) -> Result<TensorF> {
    run_constant(x, w, |g, x, wv| {
        block_mask_oracle_graph(g, x, assignment, wv)
    })
}

/// Closed-form multiply-add counts (×2) of one attention layer for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttentionFlops {
    /// Q, K, V and output projections.
    pub projections: u64,
    /// Query-key products.
    pub scores: u64,
    /// Attention-weighted sums of values.
    pub weighted_sum: u64,
}

impl AttentionFlops {
    pub fn total(&self) -> u64 {
        self.projections + self.scores + self.weighted_sum
    }

    fn with_pairs(n: usize, d: usize, pairs_times_width: u64) -> Self {
        Self {
            projections: 8 * (n * d * d) as u64,
            scores: 2 * pairs_times_width,
            weighted_sum: 2 * pairs_times_width,
        }
    }

    /// Partition-based attention: every padded slot scores `group_size` keys.
    pub fn grouped(n: usize, group_size: usize, d: usize) -> Self {
        let slots = n.div_ceil(group_size) * group_size;
        Self::with_pairs(n, d, (slots * group_size * d) as u64)
    }

    /// Dense attention over all `n` tokens (the masked oracle's cost).
    pub fn dense(n: usize, d: usize) -> Self {
        Self::with_pairs(n, d, (n * n * d) as u64)
    }

    /// Pooling-based attention: `n` queries against `ceil(n / group_size)` pooled keys.
    pub fn pooled(n: usize, group_size: usize, d: usize) -> Self {
        Self::with_pairs(n, d, (n * n.div_ceil(group_size) * d) as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::randgroup::{GroupPlan, GroupingMode};

    fn setup(n_side: usize, d: usize, heads: usize, seed: u64) -> (TensorF, AttentionWeights) {
        let mut rng = SplitMix64::new(seed);
        let x = TensorF::from_fn(&[n_side * n_side, d], |_| rng.normal());
        let w = AttentionWeights::random(d, heads, 1.0 / (d as f64).sqrt(), &mut rng).unwrap();
        (x, w)
    }

    fn dense_reference(x: &TensorF, w: &AttentionWeights) -> TensorF {
        let n = x.shape()[0];
        let plan = GroupPlan::generate(
            0,
            w.n_heads(),
            1,
            n,
            n,
            GroupingMode::WindowBaseline {
                window_h: 1,
                window_w: n,
            },
        )
        .unwrap();
        block_mask_attention_oracle(x, &plan.assignment(), w).unwrap()
    }

    #[test]
    fn single_group_identity_order_equals_dense_bitwise() {
        let (x, w) = setup(4, 8, 1, 1);
        let plan = GroupPlan::generate(
            0,
            1,
            4,
            4,
            16,
            GroupingMode::WindowBaseline {
                window_h: 4,
                window_w: 4,
            },
        )
        .unwrap();
        assert_eq!(
            grouped_self_attention(&x, &plan, &w).unwrap(),
            dense_reference(&x, &w)
        );
    }

    #[test]
    fn single_random_group_equals_dense() {
        let (x, w) = setup(4, 8, 1, 2);
        let plan = GroupPlan::generate(5, 1, 4, 4, 16, GroupingMode::PerHeadFixed).unwrap();
        let y = grouped_self_attention(&x, &plan, &w).unwrap();
        assert!(y.max_abs_diff(&dense_reference(&x, &w)) <= 1e-12);
    }

    #[test]
    fn singleton_groups_reduce_to_value_projection() {
        let (x, w) = setup(3, 8, 2, 3);
        let plan = GroupPlan::generate(5, 2, 3, 3, 1, GroupingMode::PerHeadFixed).unwrap();
        let y = grouped_self_attention(&x, &plan, &w).unwrap();
        let mut g = Graph::new();
        let (xv, wv, wo) = (
            g.constant(x.clone()),
            g.constant(w.w_v.clone()),
            g.constant(w.w_o.clone()),
        );
        let v = g.matmul(xv, wv).unwrap();
        let expect = g.matmul(v, wo).unwrap();
        assert!(y.max_abs_diff(g.value(expect)) <= 1e-12);
    }

    #[test]
    fn grouped_matches_oracle_small() {
        let mut rng = SplitMix64::new(4);
        let x = TensorF::from_fn(&[8, 16], |_| rng.normal());
        let w = AttentionWeights::random(16, 2, 0.3, &mut rng).unwrap();
        let plan = GroupPlan::generate(6, 2, 2, 4, 4, GroupingMode::PerHeadFixed).unwrap();
        let y = grouped_self_attention(&x, &plan, &w).unwrap();
        let o = block_mask_attention_oracle(&x, &plan.assignment(), &w).unwrap();
        assert!(y.max_abs_diff(&o) <= 1e-10);
    }

    #[test]
    fn grouped_matches_oracle_with_padding() {
        let mut rng = SplitMix64::new(5);
        let x = TensorF::from_fn(&[2, 15, 8], |_| rng.normal());
        let w = AttentionWeights::random(8, 2, 0.5, &mut rng).unwrap();
        let plan = GroupPlan::generate(6, 2, 3, 5, 4, GroupingMode::PerHeadFixed).unwrap();
        assert_eq!(plan.n_pad(), 1);
        let y = grouped_self_attention(&x, &plan, &w).unwrap();
        let o = block_mask_attention_oracle(&x, &plan.assignment(), &w).unwrap();
        assert!(y.max_abs_diff(&o) <= 1e-10);
    }

    #[test]
    fn plan_mismatch_is_an_error() {
        let (x, w) = setup(4, 8, 2, 6);
        let wrong_tokens = GroupPlan::generate(1, 2, 3, 3, 3, GroupingMode::PerHeadFixed).unwrap();
        assert!(grouped_self_attention(&x, &wrong_tokens, &w).is_err());
        let wrong_heads = GroupPlan::generate(1, 1, 4, 4, 4, GroupingMode::PerHeadFixed).unwrap();
        assert!(grouped_self_attention(&x, &wrong_heads, &w).is_err());
    }

    #[test]
    fn pooled_constant_input_replicates_one_token() {
        let (_, w) = setup(4, 8, 2, 7);
        let row: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = TensorF::from_fn(&[16, 8], |i| row[i % 8]);
        let plan = GroupPlan::generate(3, 2, 4, 4, 4, GroupingMode::PerHeadFixed).unwrap();
        let y = pooled_group_attention(&x, &plan, &w).unwrap();
        let single = TensorF::new(vec![1, 8], row).unwrap();
        let one = GroupPlan::generate(3, 2, 1, 1, 1, GroupingMode::PerHeadFixed).unwrap();
        let expect = grouped_self_attention(&single, &one, &w).unwrap();
        for t in 0..16 {
            for (a, b) in y.row(t).iter().zip(expect.row(0)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn pooled_with_unit_groups_is_dense_attention() {
        let (x, w) = setup(4, 8, 2, 8);
        let plan = GroupPlan::generate(3, 2, 4, 4, 1, GroupingMode::PerHeadFixed).unwrap();
        let y = pooled_group_attention(&x, &plan, &w).unwrap();
        assert!(y.max_abs_diff(&dense_reference(&x, &w)) <= 1e-12);
    }

    /// Pooled attention computed by materializing every pooled key and value
    /// with explicit loops.
    fn pooled_explicit(x: &TensorF, plan: &GroupPlan, w: &AttentionWeights) -> TensorF {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let dh = w.d_head();
        let proj = |wm: &TensorF| -> Vec<Vec<f64>> {
            (0..n)
                .map(|t| {
                    (0..d)
                        .map(|c| {
                            (0..d)
                                .map(|k| x.data()[t * d + k] * wm.data()[k * d + c])
                                .sum()
                        })
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (proj(&w.w_q), proj(&w.w_k), proj(&w.w_v));
        let mut cat = vec![vec![0.0; d]; n];
        for h in 0..w.n_heads() {
            let groups = plan.assignment().groups(h);
            let pool = |m: &Vec<Vec<f64>>, members: &[usize]| -> Vec<f64> {
                (0..dh)
                    .map(|c| {
                        members.iter().map(|&t| m[t][h * dh + c]).sum::<f64>()
                            / members.len() as f64
                    })
                    .collect()
            };
            let kp: Vec<Vec<f64>> = groups.iter().map(|g| pool(&k, g)).collect();
            let vp: Vec<Vec<f64>> = groups.iter().map(|g| pool(&v, g)).collect();
            for t in 0..n {
                let s: Vec<f64> = kp
                    .iter()
                    .map(|kk| {
                        (0..dh).map(|c| q[t][h * dh + c] * kk[c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|z| (z - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    cat[t][h * dh + c] = e.iter().zip(&vp).map(|(p, vv)| p / z * vv[c]).sum();
                }
            }
        }
        TensorF::from_fn(&[n, d], |i| {
            let (t, c) = (i / d, i % d);
            (0..d).map(|k| cat[t][k] * w.w_o.data()[k * d + c]).sum()
        })
    }

    #[test]
    fn pooled_matches_explicit_materialization() {
        let mut rng = SplitMix64::new(9);
        let x = TensorF::from_fn(&[8, 16], |_| rng.normal());
        let w = AttentionWeights::random(16, 2, 0.3, &mut rng).unwrap();
        let plan = GroupPlan::generate(10, 2, 2, 4, 4, GroupingMode::PerHeadFixed).unwrap();
        let y = pooled_group_attention(&x, &plan, &w).unwrap();
        assert!(y.max_abs_diff(&pooled_explicit(&x, &plan, &w)) <= 1e-10);

        // Padding must be excluded from the pooled means.
        let x = TensorF::from_fn(&[10, 16], |_| rng.normal());
        let plan = GroupPlan::generate(11, 2, 2, 5, 4, GroupingMode::PerHeadFixed).unwrap();
        let y = pooled_group_attention(&x, &plan, &w).unwrap();
        assert!(y.max_abs_diff(&pooled_explicit(&x, &plan, &w)) <= 1e-10);
    }

    #[test]
    fn per_sample_grouping_matches_individual_runs() {
        let mut rng = SplitMix64::new(12);
        let x = TensorF::from_fn(&[3, 16, 8], |_| rng.normal());
        let w = AttentionWeights::random(8, 2, 0.4, &mut rng).unwrap();
        let mode = GroupingMode::PerSampleRandom {
            shared_heads: false,
        };
        let template = GroupPlan::generate(1, 2, 4, 4, 4, mode).unwrap();
        let plans: Vec<GroupPlan> = (0..3)
            .map(|s| template.resample_per_sample(100 + s).unwrap())
            .collect();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = w.to_constants(&mut g);
        let y =
            grouped_attention_graph(&mut g, xv, Grouping::PerSample(&plans), &wv, None).unwrap();
        for (b, plan) in plans.iter().enumerate() {
            let xb = TensorF::new(vec![16, 8], x.data()[b * 128..(b + 1) * 128].to_vec()).unwrap();
            let yb = grouped_self_attention(&xb, plan, &w).unwrap();
            assert_eq!(&g.value(y).data()[b * 128..(b + 1) * 128], yb.data());
        }
    }

    #[test]
    fn gradients_of_grouped_attention() {
        let mut rng = SplitMix64::new(13);
        let x = TensorF::from_fn(&[6, 8], |_| rng.uniform(-2.0, 2.0));
        let w = AttentionWeights::random(8, 2, 0.5, &mut rng).unwrap();
        let plan = GroupPlan::generate(3, 2, 2, 3, 4, GroupingMode::PerHeadFixed).unwrap();
        let r = TensorF::from_fn(&[6, 8], |_| rng.normal());
        let inputs = [
            x,
            w.w_q.clone(),
            w.w_k.clone(),
            w.w_v.clone(),
            w.w_o.clone(),
        ];
        let report = gradcheck::check(&inputs, gradcheck::DEFAULT_EPS, |g, v| {
            let wv = AttentionVars {
                w_q: v[1],
                w_k: v[2],
                w_v: v[3],
                w_o: v[4],
                n_heads: 2,
            };
            let y = grouped_attention_graph(g, v[0], Grouping::Shared(&plan), &wv, None)?;
            g.weighted_sum(y, &r)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "{report:?}");
    }

    #[test]
    fn counted_flops_match_closed_form() {
        let (x, w) = setup(4, 8, 2, 14);
        let plan = GroupPlan::generate(1, 2, 4, 4, 4, GroupingMode::PerHeadFixed).unwrap();
        let run = |f: &dyn Fn(&mut Graph, Var, &AttentionVars) -> Result<Var>| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = w.to_constants(&mut g);
            f(&mut g, xv, &wv).unwrap();
            (g.matmul_flops(), g.tagged_flops()[SCORE_TAG])
        };
        let grouped =
            run(&|g, x, w| grouped_attention_graph(g, x, Grouping::Shared(&plan), w, None));
        let pooled = run(&|g, x, w| pooled_attention_graph(g, x, Grouping::Shared(&plan), w, None));
        let dense = run(&|g, x, w| block_mask_oracle_graph(g, x, &plan.assignment(), w));
        for (counted, closed) in [
            (grouped, AttentionFlops::grouped(16, 4, 8)),
            (pooled, AttentionFlops::pooled(16, 4, 8)),
            (dense, AttentionFlops::dense(16, 8)),
        ] {
            assert_eq!(counted, (closed.total(), closed.scores));
        }
        assert_eq!(dense.1 / grouped.1, 16 / 4);
    }
}
