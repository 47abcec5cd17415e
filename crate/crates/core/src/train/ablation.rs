use std::fmt;
use std::str::FromStr;

use super::data::build_dataset;
use super::probe::{right_context_probe, ProbeConfig};
use super::trainer::{train_loop, RunConfig};
use crate::error::{Error, Result};
use crate::model::{BlockType, ModelConfig};
use crate::numerics::ConvMode;
use crate::ssm::{Direction, ScanDirections};

/// Which setting an ablation varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    BlockType,
    ConvMode,
    Directions,
    Stride,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::BlockType,
        AblationAxis::ConvMode,
        AblationAxis::Directions,
        AblationAxis::Stride,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::BlockType => "block_type",
            AblationAxis::ConvMode => "conv_mode",
            AblationAxis::Directions => "directions",
            AblationAxis::Stride => "stride",
        }
    }

    /// Whether the axis changes what the sequence mixer can see ahead.
    pub fn is_causality_axis(self) -> bool {
        matches!(self, AblationAxis::ConvMode | AblationAxis::Directions)
    }

    pub fn default_grid(self) -> Vec<String> {
        let g: &[&str] = match self {
            AblationAxis::BlockType => &["cnn_only", "mamba_only", "cnn_mamba"],
            AblationAxis::ConvMode => &["causal", "symmetric"],
            AblationAxis::Directions => &["standard", "bidirectional", "bidirectional_strided"],
            AblationAxis::Stride => &["2", "4", "8", "16"],
        };
        g.iter().map(|s| s.to_string()).collect()
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}`")))
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scan orders named as in the direction ablation.
pub fn named_directions(name: &str) -> Result<Vec<Direction>> {
    match name {
        "standard" => Ok(vec![Direction::Forward]),
        "bidirectional" => Ok(vec![Direction::Forward, Direction::Backward]),
        "bidirectional_strided" => Ok(Direction::ALL.to_vec()),
        other => ScanDirections::parse_list(other),
    }
}

/// Applies one grid value of `axis` to a copy of `base`.
pub fn apply_axis(axis: AblationAxis, value: &str, base: &ModelConfig) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    match axis {
        AblationAxis::BlockType => cfg.block_types = vec![value.parse()?; cfg.block_types.len()],
        AblationAxis::ConvMode => cfg.ssm.conv_mode = value.parse()?,
        AblationAxis::Directions => cfg.ssm.directions = named_directions(value)?,
        AblationAxis::Stride => {
            cfg.ssm.stride = value
                .parse()
                .map_err(|_| Error::Config(format!("invalid stride `{value}`")))?
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One configuration's scores over the seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    /// Indentation depth in the additive layout.
    pub level: usize,
    pub val_miou: Vec<f64>,
    pub probe_miou: Option<Vec<f64>>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Sample standard deviation, 0 for a single value.
fn spread(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        mean(&self.val_miou)
    }

    pub fn spread(&self) -> f64 {
        spread(&self.val_miou)
    }

    pub fn probe_mean(&self) -> Option<f64> {
        self.probe_miou.as_deref().map(mean)
    }
}

/// Comparison table. In the additive layout each indented row adds one
/// change to the row above and shows its gain over the first row.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub title: String,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub additive: bool,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# {} (seeds {:?}, {} steps, val mIoU ×100)", self.title, self.seeds, self.steps)?;
        let probe = self.rows.iter().any(|r| r.probe_miou.is_some());
        write!(f, "case | mIoU")?;
        if probe {
            write!(f, " | probe mIoU")?;
        }
        writeln!(f)?;
        let base = self.rows.first().map(AblationRow::mean).unwrap_or(0.0);
        for (i, r) in self.rows.iter().enumerate() {
            let indent = "  ".repeat(r.level);
            let sign = if self.additive && r.level > 0 { "+ " } else { "" };
            write!(f, "{indent}{sign}{} | {:.1} ± {:.1}", r.label, 100.0 * r.mean(), 100.0 * r.spread())?;
            if self.additive && i > 0 && r.level > 0 {
                write!(f, " ({:+.1})", 100.0 * (r.mean() - base))?;
            }
            if let Some(p) = &r.probe_miou {
                write!(f, " | {:.1} ± {:.1}", 100.0 * mean(p), 100.0 * spread(p))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn seeded(run: &RunConfig, seed: u64) -> RunConfig {
    let mut r = run.clone();
    r.train.seed = seed;
    r.data.seed = run.data.seed.wrapping_add(seed.wrapping_mul(1000));
    r
}

/// Validation mIoU of `model` trained on the synthetic benchmark for
/// every seed, with identical data and budget per seed.
pub fn train_seeds(model: &ModelConfig, run: &RunConfig, seeds: &[u64]) -> Result<Vec<f64>> {
    seeds
        .iter()
        .map(|&s| {
            let r = seeded(run, s);
            let data = build_dataset(&r.data, model)?;
            let out = train_loop(model, &r.train, &data, None)?;
            let report = out.val_report.unwrap_or(out.train_report);
            Ok(report.miou_or_zero())
        })
        .collect()
}

/// Trains every grid value of `axis` on every seed. Causality axes also
/// run the right-context probe when `probe` is set.
pub fn ablation_suite(
    axis: AblationAxis,
    grid: &[String],
    seeds: &[u64],
    run: &RunConfig,
    probe: Option<&ProbeConfig>,
) -> Result<AblationTable> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::Parameter("ablation needs at least one grid value and one seed".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for value in grid {
        let model = apply_axis(axis, value, &run.model)?;
        let val_miou = train_seeds(&model, run, seeds)?;
        let probe_miou = match probe {
            Some(p) if axis.is_causality_axis() => {
                let mut p = p.clone();
                p.conv_mode = model.ssm.conv_mode;
                p.directions = model.ssm.directions.clone();
                Some(seeds.iter().map(|&s| right_context_probe(&p, s).map(|r| r.miou_or_zero())).collect::<Result<_>>()?)
            }
            _ => None,
        };
        rows.push(AblationRow {
            label: value.clone(),
            level: 0,
            val_miou,
            probe_miou,
        });
    }
    Ok(AblationTable {
        title: format!("ablation over {axis}"),
        seeds: seeds.to_vec(),
        steps: run.train.steps,
        additive: false,
        rows,
    })
}

/// Label of the full configuration in [`additive_ablation`].
pub const FULL_MODEL_ROW: &str = "bidirectional strided SSM";
pub const CNN_BASELINE_ROW: &str = "baseline (pure CNN network)";

/// Cumulative study: pure-CNN baseline, then CNN-Mamba blocks with a causal
/// Conv1D and one forward scan, then the causal-free Conv1D, then all four
/// scan orders. `references` adds unindented rows for other block types
/// with the full state-space settings.
pub fn additive_ablation(seeds: &[u64], run: &RunConfig, references: &[BlockType]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Parameter("ablation needs at least one seed".into()));
    }
    let stages = run.model.block_types.len();
    let mut steps: Vec<(String, usize, ModelConfig)> = Vec::new();
    let mut cfg = run.model.clone();
    cfg.block_types = vec![BlockType::CnnOnly; stages];
    steps.push((CNN_BASELINE_ROW.into(), 0, cfg.clone()));
    cfg.block_types = vec![BlockType::CnnMamba; stages];
    cfg.ssm.conv_mode = ConvMode::Causal;
    cfg.ssm.directions = vec![Direction::Forward];
    steps.push(("CNN-Mamba blocks".into(), 1, cfg.clone()));
    cfg.ssm.conv_mode = ConvMode::Symmetric;
    steps.push(("causal-free Conv1D".into(), 2, cfg.clone()));
    cfg.ssm.directions = Direction::ALL.to_vec();
    steps.push((FULL_MODEL_ROW.into(), 3, cfg.clone()));
    for &kind in references {
        let mut r = cfg.clone();
        r.block_types = vec![kind; stages];
        steps.push((format!("{} (reference)", kind.name()), 0, r));
    }
    let mut rows = Vec::with_capacity(steps.len());
    for (label, level, model) in steps {
        model.validate()?;
        rows.push(AblationRow {
            label,
            level,
            val_miou: train_seeds(&model, run, seeds)?,
            probe_miou: None,
        });
    }
    Ok(AblationTable {
        title: "additive ablation".into(),
        seeds: seeds.to_vec(),
        steps: run.train.steps,
        additive: true,
        rows,
    })
}
