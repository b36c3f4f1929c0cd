//! Four-stage sweep from fully random grouping to fixed per-head grouping
//! with convolutional position encoding.

use std::io::Write;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::train::{train, RunReport};
use crate::backbone::PosEncMode;
use crate::error::{Error, Result};
use crate::randgroup::GroupingMode;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadmapStage {
    pub label: &'static str,
    pub grouping: GroupingMode,
    pub posenc: PosEncMode,
}

/// The stages in sweep order. Each adds one ingredient to the previous one:
/// a fixed pattern, then one pattern per head, then position encoding.
pub const ROADMAP_STAGES: [RoadmapStage; 4] = [
    RoadmapStage {
        label: "per-sample-random",
        grouping: GroupingMode::PerSampleRandom { shared_heads: true },
        posenc: PosEncMode::None,
    },
    RoadmapStage {
        label: "+fixed-pattern",
        grouping: GroupingMode::SharedFixed,
        posenc: PosEncMode::None,
    },
    RoadmapStage {
        label: "+multi-p",
        grouping: GroupingMode::PerHeadFixed,
        posenc: PosEncMode::None,
    },
    RoadmapStage {
        label: "+cpe",
        grouping: GroupingMode::PerHeadFixed,
        posenc: PosEncMode::Cpe,
    },
];

impl RoadmapStage {
    /// `base` with this stage's grouping and position encoding.
    pub fn apply(&self, base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
        let mut c = base.clone();
        c.backbone.grouping = self.grouping;
        c.backbone.posenc = self.posenc;
        c.seed = seed;
        c.output_dir = base
            .output_dir
            .as_ref()
            .map(|d| d.join(format!("{}-seed{seed}", self.label.trim_start_matches('+'))));
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoadmapRow {
    pub stage: usize,
    pub label: String,
    pub runs: Vec<RunReport>,
}

impl RoadmapRow {
    pub fn mean_val_acc(&self) -> f64 {
        self.runs.iter().map(|r| r.final_val_acc).sum::<f64>() / self.runs.len().max(1) as f64
    }

    /// Mean adjacent-head similarity over runs, blocks and pairs.
    pub fn mean_head_similarity(&self) -> f64 {
        self.runs
            .iter()
            .map(|r| r.head_similarity.mean())
            .sum::<f64>()
            / self.runs.len().max(1) as f64
    }

    /// Per-block similarity means averaged over runs.
    pub fn block_head_similarity(&self) -> Vec<f64> {
        let per_run: Vec<Vec<f64>> = self
            .runs
            .iter()
            .map(|r| r.head_similarity.block_means())
            .collect();
        let blocks = per_run.first().map_or(0, Vec::len);
        (0..blocks)
            .map(|b| per_run.iter().map(|r| r[b]).sum::<f64>() / per_run.len() as f64)
            .collect()
    }
}

/// Runs every stage for every seed through `run`, in stage order.
pub fn roadmap_sweep_with(
    base: &ExperimentConfig,
    seeds: &[u64],
    run: &mut dyn FnMut(&ExperimentConfig) -> Result<RunReport>,
) -> Result<Vec<RoadmapRow>> {
    if seeds.is_empty() {
        return Err(Error::Config(
            "roadmap sweep needs at least one seed".into(),
        ));
    }
    base.validate()?;
    ROADMAP_STAGES
        .iter()
        .enumerate()
        .map(|(i, stage)| {
            let runs = seeds
                .iter()
                .map(|&s| {
                    run(&stage.apply(base, s)).map_err(|e| Error::Stage {
                        stage: format!("stage {} ({}) seed {s}", i + 1, stage.label),
                        source: Box::new(e),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RoadmapRow {
                stage: i + 1,
                label: stage.label.into(),
                runs,
            })
        })
        .collect()
}

pub fn roadmap_sweep(base: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<RoadmapRow>> {
    roadmap_sweep_with(base, seeds, &mut |c| train(c).map(|(r, _)| r))
}

pub const ROADMAP_CSV_HEADER: &str =
    "stage,label,grouping,posenc,seeds,val_acc,mean_val_acc,mean_head_sim,fingerprint";

/// One row per stage; per-seed accuracies are `;`-separated.
pub fn write_roadmap_csv(
    rows: &[RoadmapRow],
    base: &ExperimentConfig,
    w: &mut impl Write,
) -> Result<()> {
    writeln!(w, "{ROADMAP_CSV_HEADER}")?;
    for row in rows {
        let first = &row.runs[0];
        let join =
            |f: &dyn Fn(&RunReport) -> String| row.runs.iter().map(f).collect::<Vec<_>>().join(";");
        writeln!(
            w,
            "{},{},{},{},{},{},{:.6},{:.6},{}",
            row.stage,
            row.label,
            first.grouping,
            first.posenc,
            join(&|r| r.seed.to_string()),
            join(&|r| format!("{:.6}", r.final_val_acc)),
            row.mean_val_acc(),
            row.mean_head_similarity(),
            base.fingerprint()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::HeadSimilarityReport;

    fn fake(config: &ExperimentConfig) -> Result<RunReport> {
        let acc = match (config.backbone.grouping, config.backbone.posenc) {
            (GroupingMode::PerSampleRandom { .. }, _) => 0.5,
            (GroupingMode::SharedFixed, _) => 0.6,
            (_, PosEncMode::None) => 0.7,
            _ => 0.8,
        };
        Ok(RunReport {
            fingerprint: config.fingerprint(),
            grouping: config.backbone.grouping.label(),
            posenc: config.backbone.posenc.label().into(),
            seed: config.seed,
            param_count: 0,
            epochs: vec![],
            final_val_acc: acc + config.seed as f64 * 0.01,
            final_train_loss: 0.0,
            head_similarity: HeadSimilarityReport {
                blocks: vec![0],
                curves: vec![vec![acc]],
                fingerprint: String::new(),
            },
            wall_time_s: 0.0,
            checkpoint_hash: String::new(),
        })
    }

    #[test]
    fn stages_run_in_order_and_partition_the_ablations() {
        let base = ExperimentConfig::default();
        let mut seen = Vec::new();
        let rows = roadmap_sweep_with(&base, &[0, 2], &mut |c| {
            seen.push((c.backbone.grouping, c.backbone.posenc, c.seed));
            fake(c)
        })
        .unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(seen.len(), 8);
        assert_eq!(
            rows.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(),
            ["per-sample-random", "+fixed-pattern", "+multi-p", "+cpe"]
        );
        assert!((rows[0].mean_val_acc() - 0.51).abs() < 1e-12);
        // Adjacent stages differ in exactly one ingredient.
        for w in ROADMAP_STAGES.windows(2) {
            let changed = [
                w[0].grouping.is_per_sample() != w[1].grouping.is_per_sample(),
                (w[0].grouping == GroupingMode::PerHeadFixed)
                    != (w[1].grouping == GroupingMode::PerHeadFixed),
                w[0].posenc != w[1].posenc,
            ];
            assert_eq!(changed.iter().filter(|&&c| c).count(), 1);
        }
        let mut csv = Vec::new();
        write_roadmap_csv(&rows, &base, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("1,per-sample-random,per-sample-random-shared,none,0;2,"));
    }

    #[test]
    fn errors_carry_the_stage_label() {
        let err = roadmap_sweep_with(&ExperimentConfig::default(), &[1], &mut |c| {
            if c.backbone.grouping == GroupingMode::SharedFixed {
                Err(Error::Dataset("boom".into()))
            } else {
                fake(c)
            }
        })
        .unwrap_err();
        assert!(
            err.to_string().contains("stage 2 (+fixed-pattern)"),
            "{err}"
        );
    }
}
