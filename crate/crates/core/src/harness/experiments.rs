use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::evaluate::{predict_images, score};
use super::plot::{draw_panel, Series, BLUE, RED};
use super::train::{train_on, RunLedger};
use super::{create_dir, write_text, RunConfig};
use crate::error::Result;
use crate::eval::{MetricsReport, SubsetMetrics};
use crate::image::RgbCanvas;
use crate::losses::HeatmapLoss;
use crate::net::Network;
use crate::phantom::Dataset;

/// Validation MRE (pixels) used to measure convergence speed.
pub const MRE_TARGET_PX: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossComparison {
    pub awing: RunLedger,
    pub mse: RunLedger,
    pub awing_epochs_to_target: Option<usize>,
    pub mse_epochs_to_target: Option<usize>,
}

impl LossComparison {
    /// The masked-AWing run reaches the target no later than the MSE run
    /// (an MSE run that never reaches it counts as later) and ends lower.
    pub fn awing_wins(&self) -> bool {
        let faster = match (self.awing_epochs_to_target, self.mse_epochs_to_target) {
            (Some(a), Some(m)) => a <= m,
            (Some(_), None) => true,
            (None, _) => false,
        };
        faster && self.awing.final_row().val_mre_px < self.mse.final_row().val_mre_px
    }
}

fn load_or(cfg: &RunConfig, data: Option<&Dataset>) -> Result<Dataset> {
    match data {
        Some(d) => Ok(d.clone()),
        None => Dataset::load(&cfg.dataset),
    }
}

/// Two runs with identical seeds differing only in the heatmap loss.
/// Writes `loss_comparison.csv` and `loss_comparison.png` under the output
/// directory; the runs themselves go to `awing/` and `mse/`.
pub fn loss_comparison(cfg: &RunConfig, data: Option<&Dataset>) -> Result<LossComparison> {
    let data = load_or(cfg, data)?;
    create_dir(&cfg.output)?;
    let run = |loss: HeatmapLoss, dir: &str| -> Result<RunLedger> {
        let mut c = cfg.clone();
        c.heatmap_loss = loss;
        c.output = cfg.output.join(dir);
        train_on(&c, &data, None)
    };
    let awing = run(HeatmapLoss::MaskedAwing, "awing")?;
    let mse = run(HeatmapLoss::Mse, "mse")?;
    let result = LossComparison {
        awing_epochs_to_target: awing.epochs_to_reach(MRE_TARGET_PX),
        mse_epochs_to_target: mse.epochs_to_reach(MRE_TARGET_PX),
        awing,
        mse,
    };
    let mut csv = String::from("epoch,awing_heatmap_loss,awing_val_mre_px,mse_heatmap_loss,mse_val_mre_px\n");
    for (a, m) in result.awing.rows.iter().zip(&result.mse.rows) {
        let _ = writeln!(
            csv,
            "{},{:.9},{:.6},{:.9},{:.6}",
            a.epoch, a.val_heatmap, a.val_mre_px, m.val_heatmap, m.val_mre_px
        );
    }
    write_text(&cfg.output.join("loss_comparison.csv"), &csv)?;
    // Left: heatmap loss relative to its first epoch; right: val MRE.
    let rel = |l: &RunLedger| -> Vec<(f64, f64)> {
        let first = l.rows[0].val_heatmap;
        l.rows.iter().map(|r| (r.epoch as f64, r.val_heatmap / first)).collect()
    };
    let mre = |l: &RunLedger| -> Vec<(f64, f64)> { l.rows.iter().map(|r| (r.epoch as f64, r.val_mre_px)).collect() };
    let mut canvas = RgbCanvas::new(660, 300, [255, 255, 255]);
    let (ra, rm) = (rel(&result.awing), rel(&result.mse));
    draw_panel(&mut canvas, 30, 20, 280, 250, &[Series { points: &ra, color: RED }, Series { points: &rm, color: BLUE }]);
    let (ma, mm) = (mre(&result.awing), mre(&result.mse));
    draw_panel(&mut canvas, 360, 20, 280, 250, &[Series { points: &ma, color: RED }, Series { points: &mm, color: BLUE }]);
    canvas.save_png(&cfg.output.join("loss_comparison.png"))?;
    let summary = serde_json::json!({
        "target_px": MRE_TARGET_PX,
        "awing_epochs_to_target": result.awing_epochs_to_target,
        "mse_epochs_to_target": result.mse_epochs_to_target,
        "awing_final_val_mre_px": result.awing.final_row().val_mre_px,
        "mse_final_val_mre_px": result.mse.final_row().val_mre_px,
        "colors": { "awing": "red", "mse": "blue" },
    });
    write_text(&cfg.output.join("loss_comparison.json"), &summary.to_string())?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub srf: bool,
    pub ue: bool,
    pub report: MetricsReport,
}

impl AblationRow {
    pub fn model_name(&self) -> String {
        format!(
            "{}{}",
            if self.ue { "UNSCT" } else { "Ori" },
            if self.srf { "+SRF" } else { "" }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    pub fn row(&self, srf: bool, ue: bool) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.srf == srf && r.ue == ue)
    }
}

/// Evaluates the best checkpoint of each run on the validation split with
/// the UE filter off and on. Runs are tagged by whether SRF was enabled.
pub fn evaluate_grid(runs: &[&RunLedger], data: &Dataset) -> Result<AblationResult> {
    let mut rows = Vec::new();
    for ledger in runs {
        let (net, _) = Network::load(&ledger.best_checkpoint)?;
        let cfg = &ledger.config;
        let preds = predict_images(&net, &data.val, &cfg.skeleton.build(), &cfg.ue, cfg.batch_size)?;
        for ue in [false, true] {
            let (_, report) = score(&data.val, &preds, ue);
            rows.push(AblationRow {
                srf: cfg.network.srf_enabled,
                ue,
                report,
            });
        }
    }
    Ok(AblationResult { rows })
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|v| format!("{v:.digits$}")).unwrap_or_else(|| "-".into())
}

fn metric_cells(m: &SubsetMetrics) -> [String; 6] {
    [
        opt(m.nme, 4),
        opt(m.mre_mm, 3),
        opt(m.sdr, 3),
        opt(m.pcc, 4),
        opt(m.icc, 4),
        opt(m.t_test_p, 3),
    ]
}

/// Writes `ablation.csv` and `ablation.md` into `out`.
pub fn write_ablation(result: &AblationResult, out: &Path) -> Result<()> {
    create_dir(out)?;
    let mut csv = String::from("model,srf,ue,subset,NME,MRE,SDR,PCC,ICC,T-Test,matched,missed,spurious\n");
    let mut md = String::new();
    for (name, pick) in [
        ("All validation images", 0usize),
        ("Structured subset", 1),
        ("Unstructured subset", 2),
    ] {
        let _ = writeln!(md, "### {name}\n");
        md.push_str("| Model | NME | MRE (mm) | SDR | PCC | ICC | T-Test |\n|---|---|---|---|---|---|---|\n");
        for r in &result.rows {
            let (subset, m) = r.report.subsets()[pick];
            let cells = metric_cells(m);
            let _ = writeln!(md, "| {} | {} |", r.model_name(), cells.join(" | "));
            let _ = writeln!(
                csv,
                "{},{},{},{subset},{},{},{},{}",
                r.model_name(),
                r.srf,
                r.ue,
                cells.join(","),
                m.matched,
                m.missed,
                m.spurious
            );
        }
        md.push('\n');
    }
    write_text(&out.join("ablation.csv"), &csv)?;
    write_text(&out.join("ablation.md"), &md)
}

/// Trains with SRF on and off (into `srf_on/` and `srf_off/`), evaluates
/// both with UE off and on, and writes the comparison tables.
pub fn ablation(cfg: &RunConfig, data: Option<&Dataset>) -> Result<AblationResult> {
    let data = load_or(cfg, data)?;
    let mut ledgers = Vec::new();
    for (srf, dir) in [(true, "srf_on"), (false, "srf_off")] {
        let mut c = cfg.clone();
        c.network.srf_enabled = srf;
        c.output = cfg.output.join(dir);
        ledgers.push(train_on(&c, &data, None)?);
    }
    let refs: Vec<&RunLedger> = ledgers.iter().collect();
    let result = evaluate_grid(&refs, &data)?;
    write_ablation(&result, &cfg.output)?;
    Ok(result)
}
