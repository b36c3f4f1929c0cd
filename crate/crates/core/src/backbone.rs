//! Single-stage vision transformer built on grouped attention.
//!
//! Pipeline: patchify, linear embedding, optional absolute position table,
//! then `depth` blocks of `[CPE residual] -> LN -> attention -> residual ->
//! LN -> MLP -> residual`, a final LN, mean over tokens and a linear
//! classifier. Every block uses the same [`GroupPlan`]; under
//! [`GroupingMode::PerSampleRandom`] a fresh plan is drawn for every sample
//! of every forward pass.
//!
//! Parameters live in a flat list in declared order (see
//! [`Backbone::param_names`]), which is also the checkpoint layout.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{grouped_attention_graph, pooled_attention_graph, AttentionVars, Grouping};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::randgroup::{deserialize_plan, serialize_plan, GroupPlan, GroupingMode};
use crate::rng::SplitMix64;
use crate::tensor::TensorF;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PosEncMode {
    /// Residual depthwise 3×3 convolution over the token map before every block.
    Cpe,
    /// Learned table added once after the patch embedding.
    Ape,
    None,
}

impl PosEncMode {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Cpe => "cpe",
            Self::Ape => "ape",
            Self::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cpe" => Ok(Self::Cpe),
            "ape" => Ok(Self::Ape),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("unknown positional encoding '{s}'"))),
        }
    }
}

/// How attention consumes the groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Consumption {
    /// Attention within each group.
    Partition,
    /// Each group mean-pooled into one key/value token.
    Pooling,
}

impl Consumption {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Partition => "partition",
            Self::Pooling => "pooling",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "partition" => Ok(Self::Partition),
            "pooling" => Ok(Self::Pooling),
            _ => Err(Error::Config(format!("unknown consumption '{s}'"))),
        }
    }
}

/// Floating-point precision. Only `f64` is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f64" => Ok(Self::F64),
            other => Err(Error::Config(format!(
                "precision '{other}' is not supported (only f64)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        "f64"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub group_size: usize,
    pub mlp_ratio: usize,
    pub grouping: GroupingMode,
    pub posenc: PosEncMode,
    pub consumption: Consumption,
    pub n_classes: usize,
    pub precision: Precision,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            d_model: 64,
            depth: 4,
            n_heads: 4,
            group_size: 16,
            mlp_ratio: 4,
            grouping: GroupingMode::PerHeadFixed,
            posenc: PosEncMode::Cpe,
            consumption: Consumption::Partition,
            n_classes: 4,
            precision: Precision::F64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("depth", self.depth),
            ("n_heads", self.n_heads),
            ("group_size", self.group_size),
            ("mlp_ratio", self.mlp_ratio),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Side of the square token grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    /// Names and shapes of all parameters in declared order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.d_model, self.hidden());
        let mut out = vec![
            ("embed.w".to_string(), vec![self.patch_dim(), d]),
            ("embed.b".to_string(), vec![d]),
        ];
        if self.posenc == PosEncMode::Ape {
            out.push(("ape".into(), vec![self.n_tokens(), d]));
        }
        for b in 0..self.depth {
            let mut push =
                |name: &str, shape: Vec<usize>| out.push((format!("block{b}.{name}"), shape));
            if self.posenc == PosEncMode::Cpe {
                push("cpe", vec![3, 3, d]);
            }
            push("ln1.g", vec![d]);
            push("ln1.b", vec![d]);
            for w in ["attn.q", "attn.k", "attn.v", "attn.o"] {
                push(w, vec![d, d]);
            }
            push("ln2.g", vec![d]);
            push("ln2.b", vec![d]);
            push("fc1.w", vec![d, h]);
            push("fc1.b", vec![h]);
            push("fc2.w", vec![h, d]);
            push("fc2.b", vec![d]);
        }
        out.push(("ln.g".into(), vec![d]));
        out.push(("ln.b".into(), vec![d]));
        out.push(("head.w".into(), vec![d, self.n_classes]));
        out.push(("head.b".into(), vec![self.n_classes]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Parameter indices of one block.
#[derive(Debug, Clone, Copy)]
struct BlockSlots {
    cpe: Option<usize>,
    ln1: (usize, usize),
    attn: [usize; 4],
    ln2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
}

#[derive(Debug, Clone)]
struct Slots {
    embed: (usize, usize),
    ape: Option<usize>,
    blocks: Vec<BlockSlots>,
    ln: (usize, usize),
    head: (usize, usize),
}

impl Slots {
    fn new(config: &BackboneConfig) -> Self {
        let mut next = 0;
        let mut take = || {
            next += 1;
            next - 1
        };
        let embed = (take(), take());
        let ape = (config.posenc == PosEncMode::Ape).then(&mut take);
        let blocks = (0..config.depth)
            .map(|_| BlockSlots {
                cpe: (config.posenc == PosEncMode::Cpe).then(&mut take),
                ln1: (take(), take()),
                attn: [take(), take(), take(), take()],
                ln2: (take(), take()),
                fc1: (take(), take()),
                fc2: (take(), take()),
            })
            .collect();
        Self {
            embed,
            ape,
            blocks,
            ln: (take(), take()),
            head: (take(), take()),
        }
    }
}

/// Seeds that fully determine a freshly built backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub plan: u64,
}

impl Seeds {
    /// Plan seed derived from the init seed.
    pub fn from_init(init: u64) -> Self {
        Self {
            init,
            plan: SplitMix64::substream(init, 0x504C_414E).next_u64(),
        }
    }
}

/// Options for one forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Base state for per-sample plans; ignored for fixed plans.
    pub sample_seed: u64,
    /// Block whose per-head attention outputs should be captured.
    pub tap_block: Option<usize>,
}

/// Which plans a forward pass used.
#[derive(Debug, Clone)]
pub enum PlanUsage {
    Fixed(Arc<GroupPlan>),
    PerSample(Vec<GroupPlan>),
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Head outputs `[B, H, N, d_head]` of the tapped block.
    pub tap: Option<Var>,
    pub plans: PlanUsage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    seeds: Seeds,
    params: Vec<TensorF>,
    plan: Arc<GroupPlan>,
}

impl Backbone {
    /// Builds with the plan seed derived from `init_seed`.
    pub fn build(config: BackboneConfig, init_seed: u64) -> Result<Self> {
        Self::build_with_seeds(config, Seeds::from_init(init_seed))
    }

    pub fn build_with_seeds(config: BackboneConfig, seeds: Seeds) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seeds.init);
        let params = config
            .param_layout()
            .iter()
            .map(|(name, shape)| {
                let fill = match name.rsplit('.').next().unwrap_or(name) {
                    _ if name.ends_with("cpe") => 0.0,
                    "g" => 1.0,
                    "b" => 0.0,
                    _ => return TensorF::from_fn(shape, |_| rng.trunc_normal(INIT_STD)),
                };
                TensorF::full(shape, fill)
            })
            .collect();
        let plan = Arc::new(GroupPlan::generate(
            seeds.plan,
            config.n_heads,
            config.grid(),
            config.grid(),
            config.group_size,
            config.grouping,
        )?);
        Ok(Self {
            config,
            seeds,
            params,
            plan,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn seeds(&self) -> Seeds {
        self.seeds
    }

    pub fn params(&self) -> &[TensorF] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [TensorF] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config
            .param_layout()
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(TensorF::numel).sum()
    }

    /// The stored plan (the template under per-sample grouping).
    pub fn plan(&self) -> &Arc<GroupPlan> {
        &self.plan
    }

    /// Replaces all parameters; shapes must match the layout.
    pub fn set_params(&mut self, params: Vec<TensorF>) -> Result<()> {
        let layout = self.config.param_layout();
        if params.len() != layout.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Stage {
                    stage: name.clone(),
                    source: Box::new(Error::ShapeMismatch {
                        op: "set_params",
                        lhs: shape.clone(),
                        rhs: p.shape().to_vec(),
                    }),
                });
            }
        }
        self.params = params;
        Ok(())
    }

    /// Splits `[B, H, W, C]` images into `[B, N, patch_dim]` rows of
    /// `(row-in-patch, col-in-patch, channel)` values, tokens row-major.
    pub fn patchify(&self, images: &TensorF) -> Result<TensorF> {
        let c = &self.config;
        let s = c.image_size;
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != [s, s, c.channels] {
            return Err(Error::ShapeMismatch {
                op: "patchify",
                lhs: vec![0, s, s, c.channels],
                rhs: shape.to_vec(),
            });
        }
        let (b, p, grid, ch) = (shape[0], c.patch_size, c.grid(), c.channels);
        let src = images.data();
        let mut out = Vec::with_capacity(src.len());
        for n in 0..b {
            for gi in 0..grid {
                for gj in 0..grid {
                    for pi in 0..p {
                        let row = gi * p + pi;
                        let start = ((n * s + row) * s + gj * p) * ch;
                        out.extend_from_slice(&src[start..start + p * ch]);
                    }
                }
            }
        }
        TensorF::new(vec![b, c.n_tokens(), c.patch_dim()], out)
    }

    /// Records all parameters into `g`, as gradient leaves when `trainable`.
    pub fn record_params(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    /// Per-sample plans for a batch drawn from `sample_seed`.
    pub fn sample_plans(&self, batch: usize, sample_seed: u64) -> Result<Vec<GroupPlan>> {
        (0..batch as u64)
            .map(|i| {
                let state = SplitMix64::substream(sample_seed, i).next_u64();
                self.plan.resample_per_sample(state)
            })
            .collect()
    }

    /// Forward pass over `images` using the parameter nodes `vars`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &[Var],
        images: &TensorF,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        if vars.len() != self.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter nodes, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        if let Some(b) = opts.tap_block {
            if b >= c.depth {
                return Err(Error::InvalidIndex(format!(
                    "block {b} out of range for depth {}",
                    c.depth
                )));
            }
        }
        let slots = Slots::new(c);
        let tokens = self.patchify(images)?;
        let batch = tokens.shape()[0];
        let (n, d, grid) = (c.n_tokens(), c.d_model, c.grid());
        let plans = if c.grouping.is_per_sample() {
            PlanUsage::PerSample(self.sample_plans(batch, opts.sample_seed)?)
        } else {
            PlanUsage::Fixed(Arc::clone(&self.plan))
        };
        let grouping = match &plans {
            PlanUsage::Fixed(p) => Grouping::Shared(p),
            PlanUsage::PerSample(ps) => Grouping::PerSample(ps),
        };

        let t = g.constant(tokens);
        let x = g.matmul(t, vars[slots.embed.0])?;
        let mut x = g.add(x, vars[slots.embed.1])?;
        if let Some(a) = slots.ape {
            x = g.add(x, vars[a])?;
        }
        let mut tap = None;
        for (bi, blk) in slots.blocks.iter().enumerate() {
            if let Some(k) = blk.cpe {
                let map = g.reshape(x, &[batch, grid, grid, d])?;
                let conv = g.depthwise_conv3x3(map, vars[k])?;
                let conv = g.reshape(conv, &[batch, n, d])?;
                x = g.add(x, conv)?;
            }
            let h = g.layernorm(x, vars[blk.ln1.0], vars[blk.ln1.1])?;
            let w = AttentionVars {
                w_q: vars[blk.attn[0]],
                w_k: vars[blk.attn[1]],
                w_v: vars[blk.attn[2]],
                w_o: vars[blk.attn[3]],
                n_heads: c.n_heads,
            };
            let tap_here = (opts.tap_block == Some(bi)).then_some(&mut tap);
            let a = match c.consumption {
                Consumption::Partition => grouped_attention_graph(g, h, grouping, &w, tap_here)?,
                Consumption::Pooling => pooled_attention_graph(g, h, grouping, &w, tap_here)?,
            };
            x = g.add(x, a)?;
            let h = g.layernorm(x, vars[blk.ln2.0], vars[blk.ln2.1])?;
            let h = g.matmul(h, vars[blk.fc1.0])?;
            let h = g.add(h, vars[blk.fc1.1])?;
            let h = g.gelu(h)?;
            let h = g.matmul(h, vars[blk.fc2.0])?;
            let h = g.add(h, vars[blk.fc2.1])?;
            x = g.add(x, h)?;
        }
        let x = g.layernorm(x, vars[slots.ln.0], vars[slots.ln.1])?;
        let x = g.reshape(x, &[batch, 1, n, d])?;
        let pooled = g.mean_lastdim_groups(x, None)?;
        let pooled = g.reshape(pooled, &[batch, d])?;
        let logits = g.matmul(pooled, vars[slots.head.0])?;
        let logits = g.add(logits, vars[slots.head.1])?;
        Ok(ForwardOutput { logits, tap, plans })
    }

    /// Logits `[B, n_classes]` for `[B, H, W, C]` images.
    pub fn forward(&self, images: &TensorF) -> Result<TensorF> {
        self.forward_with(images, ForwardOptions::default())
    }

    pub fn forward_with(&self, images: &TensorF, opts: ForwardOptions) -> Result<TensorF> {
        let mut g = Graph::new();
        let vars = self.record_params(&mut g, false);
        let out = self.forward_graph(&mut g, &vars, images, opts)?;
        Ok(g.value(out.logits).clone())
    }

    /// Per-head attention outputs of `block_index`, averaged over the batch:
    /// `[n_heads, N, d_head]`.
    pub fn collect_head_features(&self, images: &TensorF, block_index: usize) -> Result<TensorF> {
        self.collect_head_features_with(images, block_index, 0)
    }

    pub fn collect_head_features_with(
        &self,
        images: &TensorF,
        block_index: usize,
        sample_seed: u64,
    ) -> Result<TensorF> {
        let mut g = Graph::new();
        let vars = self.record_params(&mut g, false);
        let opts = ForwardOptions {
            sample_seed,
            tap_block: Some(block_index),
        };
        let out = self.forward_graph(&mut g, &vars, images, opts)?;
        let tap = out
            .tap
            .ok_or_else(|| Error::Config(format!("no block {block_index} to tap")))?;
        let v = g.value(tap).data();
        let per_sample = self.config.n_heads * self.config.n_tokens() * self.config.d_head();
        let batch = v.len() / per_sample;
        let feats = (0..per_sample)
            .map(|i| (0..batch).map(|b| v[b * per_sample + i]).sum::<f64>() / batch as f64)
            .collect();
        TensorF::new(
            vec![
                self.config.n_heads,
                self.config.n_tokens(),
                self.config.d_head(),
            ],
            feats,
        )
    }

    /// Serializes to the checkpoint format (see [`Backbone::read_checkpoint`]).
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        self.write_checkpoint_tagged(w, None)
    }

    /// Like [`Backbone::write_checkpoint`], recording the fingerprint of the
    /// run that produced the weights in the header.
    pub fn write_checkpoint_tagged(
        &self,
        w: &mut impl Write,
        fingerprint: Option<&str>,
    ) -> Result<()> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            seeds: self.seeds,
            param_count: self.param_count() as u64,
            fingerprint: fingerprint.map(str::to_owned),
        })?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&[8u8])?;
        let mut buf = Vec::with_capacity(self.param_count() * 8);
        for p in &self.params {
            for v in p.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        let plan = serialize_plan(&self.plan);
        w.write_all(&(plan.len() as u32).to_le_bytes())?;
        w.write_all(&plan)?;
        Ok(())
    }

    /// Reads a checkpoint:
    ///
    /// ```text
    /// "RACK"  u16 version  u32 header_len  header (JSON: config, seeds, param_count[, fingerprint])
    /// u8 bytes-per-value (8)  param_count little-endian f64 values in declared order
    /// u32 plan_len  plan bytes (plan file format)
    /// ```
    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        Self::read_checkpoint_tagged(r).map(|(m, _)| m)
    }

    /// The model and the run fingerprint stored with it, if any.
    pub fn read_checkpoint_tagged(r: &mut impl Read) -> Result<(Self, Option<String>)> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor {
            bytes: &bytes,
            pos: 0,
        };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes(cur.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let header_len = u32::from_le_bytes(cur.array()?) as usize;
        let header: CheckpointHeader = serde_json::from_slice(cur.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let width = cur.take(1)?[0];
        if width != 8 {
            return Err(Error::Checkpoint(format!(
                "{width}-byte values are not supported"
            )));
        }
        let mut model = Self::build_with_seeds(header.config, header.seeds)?;
        if model.param_count() as u64 != header.param_count {
            return Err(Error::Checkpoint(format!(
                "header declares {} parameters, config implies {}",
                header.param_count,
                model.param_count()
            )));
        }
        for p in model.params.iter_mut() {
            for v in p.data_mut() {
                *v = f64::from_le_bytes(cur.array()?);
            }
        }
        let plan_len = u32::from_le_bytes(cur.array()?) as usize;
        let plan = deserialize_plan(cur.take(plan_len)?)?;
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        if plan != *model.plan {
            return Err(Error::Checkpoint(
                "stored plan differs from regenerated plan".into(),
            ));
        }
        model.plan = Arc::new(plan);
        Ok((model, header.fingerprint))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_checkpoint(&mut f)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RACK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: BackboneConfig,
    seeds: Seeds,
    param_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fingerprint: Option<String>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}
