use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How token values (and therefore groups) are produced for each head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GroupingMode {
    /// One stored random tensor per head (the default).
    PerHeadFixed,
    /// A single stored random tensor replicated across heads.
    SharedFixed,
    /// A fresh random tensor for every sample and forward pass.
    PerSampleRandom { shared_heads: bool },
    /// Token values confined to overlapping intervals ranked by spatial
    /// region, so groups stay mostly regional.
    RegionConstrained {
        region_rows: usize,
        region_cols: usize,
        overlap: f64,
    },
    /// Non-overlapping spatial windows; no randomness.
    WindowBaseline { window_h: usize, window_w: usize },
}

pub const DEFAULT_REGION_OVERLAP: f64 = 0.25;

impl GroupingMode {
    pub fn label(&self) -> String {
        match self {
            Self::PerHeadFixed => "per-head-fixed".into(),
            Self::SharedFixed => "shared-fixed".into(),
            Self::PerSampleRandom { shared_heads: true } => "per-sample-random-shared".into(),
            Self::PerSampleRandom {
                shared_heads: false,
            } => "per-sample-random".into(),
            Self::RegionConstrained {
                region_rows,
                region_cols,
                overlap,
            } => format!("region-{region_rows}x{region_cols}-{overlap}"),
            Self::WindowBaseline { window_h, window_w } => format!("window-{window_h}x{window_w}"),
        }
    }

    /// Parses `per-head-fixed`, `shared-fixed`, `per-sample-random[-shared]`,
    /// `region-RxC[-overlap]` and `window-HxW`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown grouping mode '{s}'"));
        let dims = |t: &str| -> Result<(usize, usize)> {
            let (a, b) = t.split_once('x').ok_or_else(bad)?;
            Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
        };
        Ok(match s {
            "per-head-fixed" => Self::PerHeadFixed,
            "shared-fixed" => Self::SharedFixed,
            "per-sample-random" => Self::PerSampleRandom {
                shared_heads: false,
            },
            "per-sample-random-shared" => Self::PerSampleRandom { shared_heads: true },
            _ => {
                if let Some(rest) = s.strip_prefix("window-") {
                    let (window_h, window_w) = dims(rest)?;
                    Self::WindowBaseline { window_h, window_w }
                } else if let Some(rest) = s.strip_prefix("region-") {
                    let (grid, overlap) = match rest.split_once('-') {
                        Some((g, o)) => (g, o.parse().map_err(|_| bad())?),
                        None => (rest, DEFAULT_REGION_OVERLAP),
                    };
                    let (region_rows, region_cols) = dims(grid)?;
                    Self::RegionConstrained {
                        region_rows,
                        region_cols,
                        overlap,
                    }
                } else {
                    return Err(bad());
                }
            }
        })
    }

    pub fn is_per_sample(&self) -> bool {
        matches!(self, Self::PerSampleRandom { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_parse_back() {
        for m in [
            GroupingMode::PerHeadFixed,
            GroupingMode::SharedFixed,
            GroupingMode::PerSampleRandom { shared_heads: true },
            GroupingMode::PerSampleRandom {
                shared_heads: false,
            },
            GroupingMode::RegionConstrained {
                region_rows: 2,
                region_cols: 4,
                overlap: 0.25,
            },
            GroupingMode::WindowBaseline {
                window_h: 4,
                window_w: 4,
            },
        ] {
            assert_eq!(GroupingMode::parse(&m.label()).unwrap(), m);
        }
        assert!(GroupingMode::parse("spiral").is_err());
    }
}
