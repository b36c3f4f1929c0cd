use super::mode::GroupingMode;
use super::plan::GroupPlan;
use crate::error::{Error, Result};

/// Nearest-neighbor source index: `floor(dst * src_extent / dst_extent)`.
pub fn nearest_source(dst: usize, src_extent: usize, dst_extent: usize) -> usize {
    dst * src_extent / dst_extent
}

/// Resamples a row-major `[src_h, src_w]` grid to `[dst_h, dst_w]`.
pub fn resample_nearest(
    src: &[f64],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(dst_h * dst_w);
    for i in 0..dst_h {
        let si = nearest_source(i, src_h, dst_h);
        for j in 0..dst_w {
            out.push(src[si * src_w + nearest_source(j, src_w, dst_w)]);
        }
    }
    out
}

impl GroupPlan {
    /// Adapts the plan to a new token grid by nearest-neighbor resampling of
    /// the stored values, then re-sorting.
    ///
    /// Values are always resampled from the extents they were originally
    /// drawn at, so chains of interpolations equal a single one. Window
    /// baselines are re-tiled instead.
    pub fn interpolate(
        &self,
        new_height: usize,
        new_width: usize,
        new_group_size: usize,
    ) -> Result<Self> {
        if new_height == 0 || new_width == 0 || new_group_size == 0 {
            return Err(Error::Grouping(format!(
                "interpolation target {new_height}x{new_width} (group {new_group_size}) must be positive"
            )));
        }
        if let GroupingMode::WindowBaseline { .. } = self.mode {
            return Self::generate(
                self.seed,
                self.n_heads,
                new_height,
                new_width,
                new_group_size,
                self.mode,
            );
        }
        let (oh, ow) = self.origin;
        let origin_values = if (self.height, self.width) == self.origin {
            self.p_values.clone()
        } else {
            Self::generate(self.seed, self.n_heads, oh, ow, self.group_size, self.mode)?.p_values
        };
        let n0 = oh * ow;
        let mut values = Vec::with_capacity(self.n_heads * new_height * new_width);
        for h in 0..self.n_heads {
            values.extend(resample_nearest(
                &origin_values[h * n0..(h + 1) * n0],
                oh,
                ow,
                new_height,
                new_width,
            ));
        }
        Self::from_values(
            self.seed,
            self.n_heads,
            new_height,
            new_width,
            new_group_size,
            self.mode,
            self.origin,
            values,
        )
    }
}

pub fn interpolate_plan(
    plan: &GroupPlan,
    new_height: usize,
    new_width: usize,
    new_group_size: usize,
) -> Result<GroupPlan> {
    plan.interpolate(new_height, new_width, new_group_size)
}
