use super::mode::GroupingMode;
use super::sort::descending_argsort;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// The stored random tensor and everything derived from it.
///
/// `p_values` is `[n_heads, height, width]`; `perm` and `inv_perm` are
/// `[n_heads, N + n_pad]`. Slot `j` of head `h` in permuted order holds token
/// `perm[h][j]`; indices `>= N` are synthetic padding slots, which always sit
/// at the end. Permuted slot `j` belongs to group `j / group_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPlan {
    pub(super) seed: u64,
    pub(super) n_heads: usize,
    pub(super) height: usize,
    pub(super) width: usize,
    pub(super) group_size: usize,
    pub(super) mode: GroupingMode,
    /// Extents at which `p_values` were originally drawn.
    pub(super) origin: (usize, usize),
    pub(super) p_values: Vec<f64>,
    pub(super) perm: Vec<usize>,
    pub(super) inv_perm: Vec<usize>,
    pub(super) n_pad: usize,
}

/// Group membership of every real token, per head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    pub n_heads: usize,
    pub n_tokens: usize,
    pub group_size: usize,
    pub group_count: usize,
    /// `[n_heads, N]`
    pub group_id: Vec<usize>,
    /// `[n_heads, N + n_pad]`, over permuted slots.
    pub pad_mask: Vec<bool>,
}

impl GroupAssignment {
    pub fn group_of(&self, head: usize, token: usize) -> usize {
        self.group_id[head * self.n_tokens + token]
    }

    /// Members of every group of `head`, real tokens only, ascending.
    pub fn groups(&self, head: usize) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.group_count];
        for t in 0..self.n_tokens {
            groups[self.group_of(head, t)].push(t);
        }
        groups
    }
}

fn validate_extents(n_heads: usize, height: usize, width: usize, group_size: usize) -> Result<()> {
    if n_heads == 0 || height == 0 || width == 0 || group_size == 0 {
        return Err(Error::Grouping(format!(
            "heads ({n_heads}), extents ({height}x{width}) and group size ({group_size}) must be positive"
        )));
    }
    if n_heads > u16::MAX as usize {
        return Err(Error::Grouping(format!("too many heads: {n_heads}")));
    }
    Ok(())
}

fn check_tiling(kind: &str, rows: usize, cols: usize, height: usize, width: usize) -> Result<()> {
    if rows == 0 || cols == 0 || !height.is_multiple_of(rows) || !width.is_multiple_of(cols) {
        return Err(Error::Grouping(format!(
            "{kind} {rows}x{cols} does not tile a {height}x{width} token grid"
        )));
    }
    Ok(())
}

/// Uniform `[0, 1)` values for one head, row-major.
fn uniform_values(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.next_f64()).collect()
}

fn region_values(
    rng: &mut SplitMix64,
    height: usize,
    width: usize,
    region_rows: usize,
    region_cols: usize,
    overlap: f64,
) -> Vec<f64> {
    let regions_per_row = width / region_cols;
    let n_regions = (height / region_rows) * regions_per_row;
    let span = n_regions as f64 + 2.0 * overlap;
    let mut out = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            let rank = ((i / region_rows) * regions_per_row + j / region_cols) as f64;
            let v = rng.uniform(rank - overlap, rank + 1.0 + overlap);
            // Monotone rescale to [0, 1).
            out.push(((v + overlap) / span).min(1.0 - f64::EPSILON));
        }
    }
    out
}

/// Values whose descending order lists windows row-major, tokens inside a
/// window row-major.
fn window_values(height: usize, width: usize, window_h: usize, window_w: usize) -> Vec<f64> {
    let n = height * width;
    let windows_per_row = width / window_w;
    let area = window_h * window_w;
    let mut out = vec![0.0; n];
    for i in 0..height {
        for j in 0..width {
            let window = (i / window_h) * windows_per_row + j / window_w;
            let local = (i % window_h) * window_w + j % window_w;
            let rank = window * area + local;
            out[i * width + j] = (n - 1 - rank) as f64 / n as f64;
        }
    }
    out
}

/// Draws `[n_heads, height, width]` token values for `mode` from `seed`.
fn draw_values(
    seed: u64,
    n_heads: usize,
    height: usize,
    width: usize,
    mode: GroupingMode,
) -> Result<Vec<f64>> {
    let n = height * width;
    let mut values = Vec::with_capacity(n_heads * n);
    match mode {
        GroupingMode::PerHeadFixed
        | GroupingMode::PerSampleRandom {
            shared_heads: false,
        } => {
            for h in 0..n_heads {
                let mut rng = SplitMix64::substream(seed, h as u64);
                values.extend(uniform_values(&mut rng, n));
            }
        }
        GroupingMode::SharedFixed | GroupingMode::PerSampleRandom { shared_heads: true } => {
            let head0 = uniform_values(&mut SplitMix64::substream(seed, 0), n);
            for _ in 0..n_heads {
                values.extend_from_slice(&head0);
            }
        }
        GroupingMode::RegionConstrained {
            region_rows,
            region_cols,
            overlap,
        } => {
            check_tiling("region", region_rows, region_cols, height, width)?;
            if !(0.0..1.0).contains(&overlap) {
                return Err(Error::Grouping(format!(
                    "region overlap {overlap} outside [0, 1)"
                )));
            }
            for h in 0..n_heads {
                let mut rng = SplitMix64::substream(seed, h as u64);
                values.extend(region_values(
                    &mut rng,
                    height,
                    width,
                    region_rows,
                    region_cols,
                    overlap,
                ));
            }
        }
        GroupingMode::WindowBaseline { window_h, window_w } => {
            check_tiling("window", window_h, window_w, height, width)?;
            let v = window_values(height, width, window_h, window_w);
            for _ in 0..n_heads {
                values.extend_from_slice(&v);
            }
        }
    }
    Ok(values)
}

impl GroupPlan {
    /// Builds the plan; a pure function of its arguments.
    pub fn generate(
        seed: u64,
        n_heads: usize,
        height: usize,
        width: usize,
        group_size: usize,
        mode: GroupingMode,
    ) -> Result<Self> {
        validate_extents(n_heads, height, width, group_size)?;
        if let GroupingMode::WindowBaseline { window_h, window_w } = mode {
            if window_h * window_w != group_size {
                return Err(Error::Grouping(format!(
                    "window {window_h}x{window_w} needs group size {}, got {group_size}",
                    window_h * window_w
                )));
            }
        }
        let p_values = draw_values(seed, n_heads, height, width, mode)?;
        Self::from_values(
            seed,
            n_heads,
            height,
            width,
            group_size,
            mode,
            (height, width),
            p_values,
        )
    }

    /// Sorts each head's values and lays out permutations with trailing padding.
    #[allow(clippy::too_many_arguments)]
    pub(super) fn from_values(
        seed: u64,
        n_heads: usize,
        height: usize,
        width: usize,
        group_size: usize,
        mode: GroupingMode,
        origin: (usize, usize),
        p_values: Vec<f64>,
    ) -> Result<Self> {
        let n = height * width;
        debug_assert_eq!(p_values.len(), n_heads * n);
        let n_pad = (group_size - n % group_size) % group_size;
        let slots = n + n_pad;
        let mut perm = Vec::with_capacity(n_heads * slots);
        let mut inv_perm = vec![0; n_heads * slots];
        for h in 0..n_heads {
            let order = descending_argsort(&p_values[h * n..(h + 1) * n])?;
            let base = perm.len();
            perm.extend(order);
            perm.extend(n..slots);
            for j in 0..slots {
                inv_perm[base + perm[base + j]] = j;
            }
        }
        Ok(Self {
            seed,
            n_heads,
            height,
            width,
            group_size,
            mode,
            origin,
            p_values,
            perm,
            inv_perm,
            n_pad,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn n_heads(&self) -> usize {
        self.n_heads
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn group_size(&self) -> usize {
        self.group_size
    }
    pub fn mode(&self) -> GroupingMode {
        self.mode
    }
    pub fn n_pad(&self) -> usize {
        self.n_pad
    }
    /// Extents the random values were originally drawn at.
    pub fn origin(&self) -> (usize, usize) {
        self.origin
    }
    /// Real token count `height * width`.
    pub fn n_tokens(&self) -> usize {
        self.height * self.width
    }
    /// Real plus padded slots per head.
    pub fn n_slots(&self) -> usize {
        self.n_tokens() + self.n_pad
    }
    pub fn group_count(&self) -> usize {
        self.n_slots() / self.group_size
    }
    pub fn p_values(&self, head: usize) -> &[f64] {
        let n = self.n_tokens();
        &self.p_values[head * n..(head + 1) * n]
    }
    pub fn perm(&self, head: usize) -> &[usize] {
        let s = self.n_slots();
        &self.perm[head * s..(head + 1) * s]
    }
    pub fn inv_perm(&self, head: usize) -> &[usize] {
        let s = self.n_slots();
        &self.inv_perm[head * s..(head + 1) * s]
    }

    /// Real (non-padding) slot count of every group; only the last group can be short.
    pub fn valid_counts(&self) -> Vec<usize> {
        let mut counts = vec![self.group_size; self.group_count()];
        *counts.last_mut().unwrap() -= self.n_pad;
        counts
    }

    pub fn assignment(&self) -> GroupAssignment {
        let n = self.n_tokens();
        let slots = self.n_slots();
        let mut group_id = Vec::with_capacity(self.n_heads * n);
        let mut pad_mask = Vec::with_capacity(self.n_heads * slots);
        for h in 0..self.n_heads {
            let inv = self.inv_perm(h);
            group_id.extend((0..n).map(|t| inv[t] / self.group_size));
            pad_mask.extend(self.perm(h).iter().map(|&t| t >= n));
        }
        GroupAssignment {
            n_heads: self.n_heads,
            n_tokens: n,
            group_size: self.group_size,
            group_count: self.group_count(),
            group_id,
            pad_mask,
        }
    }

    /// Fresh plan for one sample under [`GroupingMode::PerSampleRandom`],
    /// drawn from `sample_state` instead of the template's seed.
    pub fn resample_per_sample(&self, sample_state: u64) -> Result<Self> {
        if !self.mode.is_per_sample() {
            return Err(Error::Grouping(format!(
                "per-sample resampling requested for mode {}",
                self.mode.label()
            )));
        }
        let mut plan = Self::generate(
            sample_state,
            self.n_heads,
            self.origin.0,
            self.origin.1,
            self.group_size,
            self.mode,
        )?;
        if (self.height, self.width) != self.origin {
            plan = plan.interpolate(self.height, self.width, self.group_size)?;
        }
        Ok(plan)
    }

    /// Checks every structural invariant; used by tests and after deserialization.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_tokens();
        let slots = self.n_slots();
        let fail = |msg: String| Err(Error::Grouping(msg));
        if !slots.is_multiple_of(self.group_size) {
            return fail(format!(
                "{slots} slots not divisible by {}",
                self.group_size
            ));
        }
        if self.p_values.len() != self.n_heads * n
            || self.perm.len() != self.n_heads * slots
            || self.inv_perm.len() != self.n_heads * slots
        {
            return fail("array lengths disagree with extents".into());
        }
        for h in 0..self.n_heads {
            let (perm, inv, vals) = (self.perm(h), self.inv_perm(h), self.p_values(h));
            for (i, &p) in perm.iter().enumerate() {
                if p >= slots || inv[p] != i {
                    return fail(format!("head {h}: perm/inverse mismatch at slot {i}"));
                }
            }
            for w in perm[..n].windows(2) {
                let (a, b) = (w[0], w[1]);
                if a >= n || b >= n || vals[a] < vals[b] || (vals[a] == vals[b] && a > b) {
                    return fail(format!(
                        "head {h}: real tokens not in descending value order"
                    ));
                }
            }
            if perm[n..].iter().zip(n..).any(|(&p, e)| p != e) {
                return fail(format!("head {h}: padding slots not trailing"));
            }
        }
        Ok(())
    }
}

/// Free-function form of [`GroupPlan::generate`].
pub fn generate_plan(
    seed: u64,
    n_heads: usize,
    height: usize,
    width: usize,
    group_size: usize,
    mode: GroupingMode,
) -> Result<GroupPlan> {
    GroupPlan::generate(seed, n_heads, height, width, group_size, mode)
}

pub fn assignment_of(plan: &GroupPlan) -> GroupAssignment {
    plan.assignment()
}

pub fn resample_per_sample(template: &GroupPlan, sample_state: u64) -> Result<GroupPlan> {
    template.resample_per_sample(sample_state)
}
