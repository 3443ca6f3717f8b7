use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalConfig};
use crate::dataset::AngiogramDataset;
use crate::error::{Error, Result};
use crate::losses::{Variant, WeightSchedule};
use crate::trainer::{latest_checkpoint, load_checkpoint, run_training, TrainConfig, TrainOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationSuite {
    /// Full method with and without weighted pixel sampling.
    Wps,
    /// Grid over the entropy and occlusion weights.
    EntropyOcclusionGrid,
    /// Full, dynamic and sparse variants.
    VariantComparison,
    /// One full run, scored per phase.
    PhaseConsistency,
}

impl std::str::FromStr for AblationSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wps" => Ok(Self::Wps),
            "entropy-occlusion-grid" => Ok(Self::EntropyOcclusionGrid),
            "variant-comparison" => Ok(Self::VariantComparison),
            "phase-consistency" => Ok(Self::PhaseConsistency),
            other => Err(Error::Config(format!("unknown ablation suite '{other}'"))),
        }
    }
}

impl AblationSuite {
    pub fn name(self) -> &'static str {
        match self {
            Self::Wps => "wps",
            Self::EntropyOcclusionGrid => "entropy-occlusion-grid",
            Self::VariantComparison => "variant-comparison",
            Self::PhaseConsistency => "phase-consistency",
        }
    }

    /// Named training configurations derived from `base`; every cell keeps
    /// the base seed.
    pub fn cells(self, base: &TrainConfig, grid_entropy: &[f64], grid_occlusion: &[f64]) -> Vec<(String, TrainConfig)> {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Self::Wps => vec![
                ("full".into(), with(&|c| c.weighted_fraction = 0.5)),
                ("without-wps".into(), with(&|c| c.weighted_fraction = 0.0)),
            ],
            Self::VariantComparison => [Variant::Full, Variant::Dynamic, Variant::Sparse]
                .into_iter()
                .map(|v| (v.name().to_string(), with(&|c| c.variant = v)))
                .collect(),
            Self::PhaseConsistency => vec![("full".into(), with(&|c| c.variant = Variant::Full))],
            Self::EntropyOcclusionGrid => {
                let mut out = Vec::new();
                for &le in grid_entropy {
                    for &lo in grid_occlusion {
                        let cfg = with(&|c| {
                            c.variant = Variant::Full;
                            c.losses.entropy = rescale_end(&c.losses.entropy, le);
                            c.losses.occlusion = rescale_end(&c.losses.occlusion, lo);
                        });
                        out.push((format!("le{le:e}_lo{lo:e}"), cfg));
                    }
                }
                out
            }
        }
    }
}

/// Same ramp shape with the end value moved and the start scaled along.
fn rescale_end(s: &WeightSchedule, end: f64) -> WeightSchedule {
    let ratio = if s.end > 0.0 { s.start / s.end } else { 0.0 };
    WeightSchedule {
        start: end * ratio,
        end,
        ..*s
    }
}

/// Summary of one trained cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub variant: Variant,
    pub weighted_fraction: f64,
    pub entropy_weight: f64,
    pub occlusion_weight: f64,
    pub mean_dice: f64,
    pub per_phase_dice_std: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub per_phase_dice: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub suite: AblationSuite,
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, name: &str) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.name == name)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("cell,variant,V,lambda_e,lambda_o,mean_dice,phase_dice_std,mean_psnr,mean_ssim\n");
        for c in &self.cells {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                c.name,
                c.variant.name(),
                c.weighted_fraction,
                c.entropy_weight,
                c.occlusion_weight,
                c.mean_dice,
                c.per_phase_dice_std,
                c.mean_psnr,
                c.mean_ssim
            )
            .unwrap();
        }
        s
    }

    pub fn markdown(&self) -> String {
        let mut s = format!("# Ablation: {}\n\n", self.suite.name());
        s.push_str("| cell | Dice | phase std | PSNR | SSIM |\n|---|---|---|---|---|\n");
        for c in &self.cells {
            writeln!(
                s,
                "| {} | {:.4} | {:.4} | {:.2} | {:.4} |",
                c.name, c.mean_dice, c.per_phase_dice_std, c.mean_psnr, c.mean_ssim
            )
            .unwrap();
        }
        s.push_str("\n## Dice per phase\n\n| cell |");
        let t = self.cells.first().map_or(0, |c| c.per_phase_dice.len());
        for i in 1..=t {
            write!(s, " {i} |").unwrap();
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(t));
        s.push('\n');
        for c in &self.cells {
            write!(s, "| {} |", c.name).unwrap();
            for d in &c.per_phase_dice {
                write!(s, " {d:.3} |").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Entropy and occlusion end weights used by the grid suite.
pub const GRID_ENTROPY: [f64; 3] = [1e-12, 1e-10, 1e-8];
pub const GRID_OCCLUSION: [f64; 3] = [1e-7, 1e-5, 1e-3];

/// Trains and scores every cell of `suite`. With `out_dir`, each cell lives
/// in its own subdirectory; finished cells are read back instead of
/// retrained and interrupted ones resume from their latest checkpoint.
pub fn run_ablation(
    suite: AblationSuite,
    dataset: &AngiogramDataset,
    base: &TrainConfig,
    eval: &EvalConfig,
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    let mut cells = Vec::new();
    for (name, cfg) in suite.cells(base, &GRID_ENTROPY, &GRID_OCCLUSION) {
        let cell_dir = out_dir.map(|d| d.join(&name));
        let summary_path = cell_dir.as_ref().map(|d| d.join("summary.json"));
        if let Some(p) = summary_path.as_ref().filter(|p| p.exists()) {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let cell: AblationCell = serde_json::from_str(&text).map_err(|e| Error::format(p, e.to_string()))?;
            cells.push(cell);
            continue;
        }
        let resume = match &cell_dir {
            Some(d) => match latest_checkpoint(d)? {
                // A checkpoint from another configuration is ignored.
                Some(p) if load_checkpoint(&p).is_ok_and(|(_, c)| c == cfg) => Some(p),
                _ => None,
            },
            None => None,
        };
        let outcome = run_training(
            dataset,
            &cfg,
            &TrainOptions {
                out_dir: cell_dir.as_deref(),
                resume: resume.as_deref(),
                stop_after: None,
            },
        )?;
        let report = evaluate(&outcome.state.model, outcome.state.iteration, dataset, eval)?;
        let cell = AblationCell {
            name,
            variant: cfg.variant,
            weighted_fraction: cfg.weighted_fraction,
            entropy_weight: cfg.losses.entropy.end,
            occlusion_weight: cfg.losses.occlusion.end,
            mean_dice: report.mean_dice,
            per_phase_dice_std: report.per_phase_dice_std(),
            mean_psnr: report.mean_psnr,
            mean_ssim: report.mean_ssim,
            per_phase_dice: report.per_phase_dice.clone(),
        };
        if let (Some(d), Some(p)) = (&cell_dir, &summary_path) {
            report.write(&d.join("eval"))?;
            let text = serde_json::to_string_pretty(&cell).expect("cell serializes");
            fs::write(p, text + "\n").map_err(|e| Error::io(p, e))?;
        }
        cells.push(cell);
    }
    let report = AblationReport { suite, cells };
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let p = d.join("ablation.csv");
        fs::write(&p, report.csv()).map_err(|e| Error::io(&p, e))?;
        let p = d.join("ablation.md");
        fs::write(&p, report.markdown()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(report)
}
