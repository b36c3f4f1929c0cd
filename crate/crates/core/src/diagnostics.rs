//! Head-feature similarity, closed-form FLOP accounting, forward-pass
//! benchmarking and the gradient-check suite.

use std::io::Write;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::attention::{
    block_mask_attention_oracle, grouped_attention_graph, grouped_self_attention,
    pooled_attention_graph, AttentionFlops, AttentionVars, AttentionWeights, Grouping,
};
use crate::autodiff::gradcheck::{self, GradCheckReport};
use crate::autodiff::{Graph, Var, MASK_SENTINEL};
use crate::backbone::{
    Backbone, BackboneConfig, Consumption, ForwardOptions, PosEncMode, Precision,
};
use crate::error::{Error, Result};
use crate::randgroup::{GroupPlan, GroupingMode};
use crate::rng::SplitMix64;
use crate::tensor::TensorF;

/// Cosine of two vectors; 0 when either is the zero vector.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Mean over tokens of the cosine similarity between corresponding rows of
/// two `[N, d]` feature maps. Lies in `[-1, 1]`.
pub fn head_similarity(x_m: &TensorF, x_n: &TensorF) -> Result<f64> {
    if x_m.shape() != x_n.shape() || x_m.ndim() != 2 {
        return Err(Error::ShapeMismatch {
            op: "head_similarity",
            lhs: x_m.shape().to_vec(),
            rhs: x_n.shape().to_vec(),
        });
    }
    let n = x_m.shape()[0];
    let total: f64 = (0..n).map(|i| cosine(x_m.row(i), x_n.row(i))).sum();
    Ok(total / n as f64)
}

/// `[Sim(X_0, X_1), .., Sim(X_{h-2}, X_{h-1})]` for `[n_heads, N, d]` features.
pub fn adjacent_head_curve(features: &TensorF) -> Result<Vec<f64>> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "head features must be [n_heads, N, d]".into(),
        });
    }
    if shape[0] < 2 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "adjacent-head similarity needs at least 2 heads".into(),
        });
    }
    let per_head = shape[1] * shape[2];
    let head = |h: usize| {
        TensorF::new(
            vec![shape[1], shape[2]],
            features.data()[h * per_head..(h + 1) * per_head].to_vec(),
        )
    };
    (0..shape[0] - 1)
        .map(|h| head_similarity(&head(h)?, &head(h + 1)?))
        .collect()
}

/// Adjacent-head similarity curves for a set of blocks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadSimilarityReport {
    pub blocks: Vec<usize>,
    /// One curve of length `n_heads - 1` per entry of `blocks`.
    pub curves: Vec<Vec<f64>>,
    pub fingerprint: String,
}

impl HeadSimilarityReport {
    /// Mean similarity over all blocks and pairs.
    pub fn mean(&self) -> f64 {
        let all: Vec<f64> = self.curves.iter().flatten().copied().collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    }

    pub fn block_means(&self) -> Vec<f64> {
        self.curves
            .iter()
            .map(|c| c.iter().sum::<f64>() / c.len().max(1) as f64)
            .collect()
    }

    /// CSV with columns `block,pair,sim,fingerprint`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "block,pair,sim,fingerprint")?;
        for (b, curve) in self.blocks.iter().zip(&self.curves) {
            for (pair, s) in curve.iter().enumerate() {
                writeln!(w, "{b},{pair},{s:.12},{}", self.fingerprint)?;
            }
        }
        Ok(())
    }
}

/// Closed-form FLOPs of one forward pass for one image, multiply-adds counted
/// as 2. Only matrix products and convolutions are counted; normalization,
/// softmax, biases and activations are not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct FlopBreakdown {
    pub patch_embed: u64,
    pub cpe: u64,
    pub projections: u64,
    pub attention_scores: u64,
    pub attention_weighted: u64,
    pub mlp: u64,
    pub head: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.patch_embed
            + self.cpe
            + self.projections
            + self.attention_scores
            + self.attention_weighted
            + self.mlp
            + self.head
    }
}

pub fn flop_breakdown(config: &BackboneConfig, consumption: Consumption) -> FlopBreakdown {
    let n = config.n_tokens();
    let d = config.d_model;
    let depth = config.depth as u64;
    let attn = match consumption {
        Consumption::Partition => AttentionFlops::grouped(n, config.group_size, d),
        Consumption::Pooling => AttentionFlops::pooled(n, config.group_size, d),
    };
    let cpe = if config.posenc == PosEncMode::Cpe {
        2 * 9 * (n * d) as u64
    } else {
        0
    };
    FlopBreakdown {
        patch_embed: 2 * (n * config.patch_dim() * d) as u64,
        cpe: depth * cpe,
        projections: depth * attn.projections,
        attention_scores: depth * attn.scores,
        attention_weighted: depth * attn.weighted_sum,
        mlp: depth * 4 * (n * d * config.hidden()) as u64,
        head: 2 * (d * config.n_classes) as u64,
    }
}

/// Total FLOPs of one forward pass for one image.
pub fn count_flops(config: &BackboneConfig, consumption: Consumption) -> u64 {
    flop_breakdown(config, consumption).total()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub label: String,
    pub n: usize,
    pub group_size: usize,
    /// Median wall time of one repetition.
    pub time_ms: f64,
    pub flops: u64,
    pub reps: usize,
    pub warmups: usize,
    pub threads: usize,
    pub environment: String,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "label,n,group_size,time_ms,flops,threads,fingerprint";

    pub fn csv_row(&self, fingerprint: &str) -> String {
        format!(
            "{},{},{},{:.6},{},{},{fingerprint}",
            self.label, self.n, self.group_size, self.time_ms, self.flops, self.threads
        )
    }
}

/// What to benchmark: a label, the geometry it runs at and its counted FLOPs.
#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub label: String,
    pub n: usize,
    pub group_size: usize,
    pub flops: u64,
    pub reps: usize,
    pub warmups: usize,
}

/// Number of worker threads for benchmarks, from `RANDATTN_THREADS` (default 1).
pub fn bench_threads() -> Result<usize> {
    match std::env::var("RANDATTN_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(t) if t >= 1 => Ok(t),
            _ => Err(Error::Config(format!(
                "RANDATTN_THREADS must be a positive integer, got '{v}'"
            ))),
        },
    }
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn environment_fingerprint(threads: usize) -> String {
    format!(
        "{}-{} threads={threads} debug_assertions={}",
        std::env::consts::ARCH,
        std::env::consts::OS,
        cfg!(debug_assertions)
    )
}

/// Times `op` `spec.reps` times after `spec.warmups` discarded runs and
/// reports the median. With `RANDATTN_THREADS > 1` each repetition runs `op`
/// concurrently on that many threads and the wall time of the slowest is
/// recorded.
pub fn bench_forward<F>(spec: &BenchSpec, op: F) -> Result<BenchReport>
where
    F: Fn() -> Result<()> + Sync,
{
    if spec.reps < 10 {
        return Err(Error::Bench(format!(
            "need at least 10 repetitions, got {}",
            spec.reps
        )));
    }
    let threads = bench_threads()?;
    let run = || -> Result<Duration> {
        let start = Instant::now();
        if threads == 1 {
            op()?;
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = (0..threads).map(|_| s.spawn(&op)).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("bench worker panicked"))
                    .collect::<Result<Vec<()>>>()
            })?;
        }
        Ok(start.elapsed())
    };
    for _ in 0..spec.warmups {
        run()?;
    }
    let mut times = (0..spec.reps).map(|_| run()).collect::<Result<Vec<_>>>()?;
    times.sort();
    let median = if times.len() % 2 == 1 {
        times[times.len() / 2]
    } else {
        (times[times.len() / 2 - 1] + times[times.len() / 2]) / 2
    };
    let tick = timer_resolution();
    if median < tick * 50 {
        return Err(Error::Bench(format!(
            "median {median:?} is below 50 timer ticks ({tick:?} each); use a larger batch"
        )));
    }
    Ok(BenchReport {
        label: spec.label.clone(),
        n: spec.n,
        group_size: spec.group_size,
        time_ms: median.as_secs_f64() * 1e3,
        flops: spec.flops,
        reps: spec.reps,
        warmups: spec.warmups,
        threads,
        environment: environment_fingerprint(threads),
    })
}

/// Attention variant timed by [`bench_attention`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    /// Grouped attention under a per-head random plan.
    Random,
    /// Grouped attention under non-overlapping windows.
    Window,
    /// The dense block-mask oracle (mask construction included).
    Dense,
}

impl BenchMode {
    pub fn label(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Window => "window",
            Self::Dense => "dense",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "window" => Ok(Self::Window),
            "dense" => Ok(Self::Dense),
            _ => Err(Error::Config(format!(
                "unknown bench mode '{s}' (random, window, dense)"
            ))),
        }
    }
}

/// Window `(h, w)` of area `group_size` tiling a `side x side` grid, as
/// square as possible.
pub fn window_for(side: usize, group_size: usize) -> Result<(usize, usize)> {
    (1..=group_size)
        .filter(|h| group_size.is_multiple_of(*h) && side.is_multiple_of(*h) && side.is_multiple_of(group_size / h))
        .map(|h| (h, group_size / h))
        .min_by_key(|&(h, w)| h.abs_diff(w))
        .ok_or_else(|| {
            Error::Config(format!(
                "no window of area {group_size} tiles a {side}x{side} grid"
            ))
        })
}

/// Geometry and repetition counts for [`bench_attention`].
#[derive(Debug, Clone)]
pub struct AttentionBench {
    /// Token grid is `side x side`.
    pub side: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub group_size: usize,
    pub reps: usize,
    pub warmups: usize,
    pub seed: u64,
}

impl AttentionBench {
    /// `side * side` tokens in one `[N, d]` sample.
    pub fn n_tokens(&self) -> usize {
        self.side * self.side
    }
}

/// Median forward time of one attention layer on one sample.
pub fn bench_attention(mode: BenchMode, b: &AttentionBench) -> Result<BenchReport> {
    let n = b.n_tokens();
    let mut rng = SplitMix64::new(b.seed);
    let x = TensorF::from_fn(&[n, b.d_model], |_| rng.normal());
    let w = AttentionWeights::random(
        b.d_model,
        b.n_heads,
        1.0 / (b.d_model as f64).sqrt(),
        &mut rng,
    )?;
    let grouping = match mode {
        BenchMode::Window => {
            let (window_h, window_w) = window_for(b.side, b.group_size)?;
            GroupingMode::WindowBaseline { window_h, window_w }
        }
        _ => GroupingMode::PerHeadFixed,
    };
    let plan = GroupPlan::generate(b.seed, b.n_heads, b.side, b.side, b.group_size, grouping)?;
    let flops = match mode {
        BenchMode::Dense => AttentionFlops::dense(n, b.d_model).total(),
        _ => AttentionFlops::grouped(n, b.group_size, b.d_model).total(),
    };
    let spec = BenchSpec {
        label: mode.label().into(),
        n,
        group_size: b.group_size,
        flops,
        reps: b.reps,
        warmups: b.warmups,
    };
    match mode {
        BenchMode::Dense => {
            let assignment = plan.assignment();
            bench_forward(&spec, || {
                block_mask_attention_oracle(&x, &assignment, &w).map(drop)
            })
        }
        _ => bench_forward(&spec, || grouped_self_attention(&x, &plan, &w).map(drop)),
    }
}

/// Relative-error bound for single ops and attention layers.
pub const OP_GRAD_TOL: f64 = 1e-5;
/// Relative-error bound for the whole backbone.
pub const MODEL_GRAD_TOL: f64 = 1e-4;

/// One finite-difference check of the gradient suite.
#[derive(Debug, Clone, Serialize)]
pub struct GradCase {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

type Body = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Central-difference checks of every differentiable op, both attention
/// variants and a 2-block backbone, with inputs drawn from `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = SplitMix64::new(seed);
    let mut rand = |shape: &[usize]| TensorF::from_fn(shape, |_| rng.uniform(-2.0, 2.0));
    let mut cases: Vec<(&'static str, Vec<TensorF>, Body)> = Vec::new();

    let r = rand(&[2, 4, 8]);
    cases.push((
        "matmul",
        vec![rand(&[2, 4, 6]), rand(&[6, 8])],
        Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            g.weighted_sum(y, &r)
        }),
    ));
    let r = rand(&[3, 2, 2]);
    cases.push((
        "matmul_batched",
        vec![rand(&[3, 2, 4]), rand(&[3, 4, 2])],
        Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            g.weighted_sum(y, &r)
        }),
    ));
    let r = rand(&[4, 6, 8]);
    cases.push((
        "add_scale",
        vec![rand(&[4, 6, 8]), rand(&[8])],
        Box::new(move |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.scale(a, -0.37)?;
            g.weighted_sum(s, &r)
        }),
    ));
    let mut mask = TensorF::zeros(&[6, 8]);
    for row in 0..6 {
        mask.data_mut()[row * 8 + (row + 3) % 8] = MASK_SENTINEL;
    }
    let r = rand(&[4, 6, 8]);
    cases.push((
        "softmax_masked",
        vec![rand(&[4, 6, 8])],
        Box::new(move |g, v| {
            let y = g.softmax_lastdim(v[0], Some(&mask))?;
            g.weighted_sum(y, &r)
        }),
    ));
    let r = rand(&[4, 5, 8]);
    cases.push((
        "pad_gather_slice_rows",
        vec![rand(&[4, 6, 8])],
        Box::new(move |g, v| {
            let p = g.pad_rows(v[0], 1)?;
            let y = g.gather_rows(p, &[3, 0, 5, 1, 4, 2, 6])?;
            let s = g.slice_rows(y, 1, 5)?;
            g.weighted_sum(s, &r)
        }),
    ));
    let r = rand(&[4, 30]);
    cases.push((
        "cols_transpose_reshape",
        vec![rand(&[4, 6, 8]), rand(&[4, 6, 2])],
        Box::new(move |g, v| {
            let a = g.slice_cols(v[0], 2, 3)?;
            let c = g.concat_cols(&[a, v[1]])?;
            let t = g.transpose_last2(c)?;
            let y = g.reshape(t, &[4, 30])?;
            g.weighted_sum(y, &r)
        }),
    ));
    let r = rand(&[2, 4, 3, 5]);
    cases.push((
        "swap_axes12",
        vec![rand(&[2, 3, 4, 5])],
        Box::new(move |g, v| {
            let y = g.swap_axes12(v[0])?;
            g.weighted_sum(y, &r)
        }),
    ));
    let r = rand(&[4, 6, 8]);
    cases.push((
        "layernorm",
        vec![rand(&[4, 6, 8]), rand(&[8]), rand(&[8])],
        Box::new(move |g, v| {
            let y = g.layernorm(v[0], v[1], v[2])?;
            g.weighted_sum(y, &r)
        }),
    ));
    let r = rand(&[4, 6, 8]);
    cases.push((
        "gelu",
        vec![rand(&[4, 6, 8])],
        Box::new(move |g, v| {
            let y = g.gelu(v[0])?;
            g.weighted_sum(y, &r)
        }),
    ));
    let r = rand(&[2, 3, 8]);
    cases.push((
        "group_mean",
        vec![rand(&[2, 3, 4, 8])],
        Box::new(move |g, v| {
            let y = g.mean_lastdim_groups(v[0], Some(&[4, 4, 2]))?;
            g.weighted_sum(y, &r)
        }),
    ));
    let r = rand(&[2, 4, 5, 6]);
    cases.push((
        "depthwise_conv3x3",
        vec![rand(&[2, 4, 5, 6]), rand(&[3, 3, 6])],
        Box::new(move |g, v| {
            let y = g.depthwise_conv3x3(v[0], v[1])?;
            g.weighted_sum(y, &r)
        }),
    ));
    cases.push((
        "cross_entropy",
        vec![rand(&[6, 8])],
        Box::new(|g, v| g.cross_entropy(v[0], &[0, 7, 3, 3, 1, 5])),
    ));

    // Attention on a 3x4 grid with a group size that forces padding.
    let plan = GroupPlan::generate(seed, 2, 3, 4, 5, GroupingMode::PerHeadFixed)?;
    for (name, pooled) in [("grouped_attention", false), ("pooled_attention", true)] {
        let r = rand(&[2, 12, 8]);
        let plan = plan.clone();
        let mut inputs = vec![rand(&[2, 12, 8])];
        for _ in 0..4 {
            let w = rand(&[8, 8]);
            inputs.push(TensorF::from_fn(&[8, 8], |i| 0.25 * w.data()[i]));
        }
        cases.push((
            name,
            inputs,
            Box::new(move |g, v| {
                let w = AttentionVars {
                    w_q: v[1],
                    w_k: v[2],
                    w_v: v[3],
                    w_o: v[4],
                    n_heads: 2,
                };
                let y = if pooled {
                    pooled_attention_graph(g, v[0], Grouping::Shared(&plan), &w, None)?
                } else {
                    grouped_attention_graph(g, v[0], Grouping::Shared(&plan), &w, None)?
                };
                g.weighted_sum(y, &r)
            }),
        ));
    }

    let mut out = Vec::with_capacity(cases.len() + 1);
    for (name, inputs, body) in &cases {
        let rep = gradcheck::check(inputs, gradcheck::DEFAULT_EPS, body)?;
        out.push(case(name, rep, OP_GRAD_TOL));
    }
    out.push(case(
        "backbone_2_blocks",
        backbone_gradcheck(seed)?,
        MODEL_GRAD_TOL,
    ));
    Ok(out)
}

fn case(name: &'static str, rep: GradCheckReport, tolerance: f64) -> GradCase {
    GradCase {
        name,
        max_rel_err: rep.max_rel_err,
        max_abs_err: rep.max_abs_err,
        checked: rep.checked,
        tolerance,
    }
}

/// Every parameter of a small 2-block backbone (CPE, fixed per-head plan,
/// padded groups) against central differences of the batch loss.
pub fn backbone_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let config = BackboneConfig {
        image_size: 8,
        patch_size: 2,
        channels: 3,
        d_model: 16,
        depth: 2,
        n_heads: 2,
        group_size: 5,
        mlp_ratio: 2,
        grouping: GroupingMode::PerHeadFixed,
        posenc: PosEncMode::Cpe,
        consumption: Consumption::Partition,
        n_classes: 4,
        precision: Precision::F64,
    };
    let model = Backbone::build(config, seed)?;
    let mut rng = SplitMix64::substream(seed, 1);
    // Perturb away from the zero CPE kernels and unit LayerNorm gains.
    let inputs: Vec<TensorF> = model
        .params()
        .iter()
        .map(|p| TensorF::from_fn(p.shape(), |i| p.data()[i] + 0.3 * rng.normal()))
        .collect();
    let images = TensorF::from_fn(&[2, 8, 8, 3], |_| rng.normal());
    let labels = [1, 3];
    gradcheck::check(&inputs, gradcheck::DEFAULT_EPS, |g, vars| {
        let out = model.forward_graph(g, vars, &images, ForwardOptions::default())?;
        g.cross_entropy(out.logits, &labels)
    })
}
