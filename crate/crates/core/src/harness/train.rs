use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{create_dir, write_text, RunConfig};
use crate::encoding::{encode_targets, TargetBundle};
use crate::error::{Error, Result};
use crate::eval::{match_predictions, radial_error_mm};
use crate::landmarks::{mirror_landmarks, AnnotatedImage, SkeletonGraph};
use crate::losses::{hybrid_loss, LossComponents};
use crate::net::Network;
use crate::nn::{Adam, Graph, Tensor};
use crate::phantom::{seed_mix, Dataset};
use crate::uncertainty::{decode_landmarks, keep_all};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub heatmap: f64,
    pub paf: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_heatmap: f64,
    pub train_paf: f64,
    pub train_total: f64,
    pub val_heatmap: f64,
    pub val_paf: f64,
    pub val_total: f64,
    /// Mean radial error over visible landmarks with nothing suppressed.
    pub val_mre_px: f64,
    pub val_mre_mm: f64,
    pub wall_s: f64,
}

impl EpochRow {
    pub const CSV_HEADER: &'static str =
        "epoch,train_heatmap,train_paf,train_total,val_heatmap,val_paf,val_total,val_mre_px,val_mre_mm,wall_s";

    pub fn csv(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.6},{:.6},{:.3}",
            self.epoch,
            self.train_heatmap,
            self.train_paf,
            self.train_total,
            self.val_heatmap,
            self.val_paf,
            self.val_total,
            self.val_mre_px,
            self.val_mre_mm,
            self.wall_s
        )
    }

    /// Everything but the wall-clock column.
    pub fn losses(&self) -> [f64; 8] {
        [
            self.train_heatmap,
            self.train_paf,
            self.train_total,
            self.val_heatmap,
            self.val_paf,
            self.val_total,
            self.val_mre_px,
            self.val_mre_mm,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub config: RunConfig,
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val_mre_px: f64,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
}

impl RunLedger {
    /// First epoch (1-based) whose validation MRE is at or below `px`.
    pub fn epochs_to_reach(&self, px: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.val_mre_px <= px).map(|r| r.epoch)
    }

    pub fn final_row(&self) -> &EpochRow {
        self.rows.last().expect("ledger has at least one epoch")
    }
}

pub const CONFIG_FILE: &str = "config.toml";
pub const LEDGER_CSV: &str = "ledger.csv";
pub const LEDGER_JSON: &str = "ledger.json";
pub const STEPS_CSV: &str = "steps.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Loads the dataset named in the config and trains on it.
pub fn train(cfg: &RunConfig) -> Result<RunLedger> {
    let path = cfg.dataset.join(crate::phantom::MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Config(format!("dataset manifest {} not found", path.display())));
    }
    let data = Dataset::load(&cfg.dataset)?;
    train_on(cfg, &data, None)
}

fn stack_targets(items: &[TargetBundle]) -> (Tensor, Tensor, Tensor) {
    let hm: Vec<Tensor> = items.iter().map(|t| t.heatmaps.clone()).collect();
    let paf: Vec<Tensor> = items.iter().map(|t| t.paf.clone()).collect();
    let mask: Vec<Tensor> = items.iter().map(|t| t.mask.clone()).collect();
    (Tensor::stack(&hm), Tensor::stack(&paf), Tensor::stack(&mask))
}

pub(crate) fn image_batch(images: &[&AnnotatedImage]) -> Tensor {
    let parts: Vec<Tensor> = images
        .iter()
        .map(|a| Tensor::from_vec([1, 1, a.height(), a.width()], a.pixels.data().to_vec()))
        .collect();
    Tensor::stack(&parts)
}

fn augment(a: &AnnotatedImage, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> AnnotatedImage {
    let mut out = if rng.gen_bool(cfg.flip_probability) {
        mirror_landmarks(a)
    } else {
        a.clone()
    };
    if cfg.noise_sigma_max > 0.0 {
        let sigma = rng.gen_range(0.0..=cfg.noise_sigma_max);
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).expect("finite sigma");
            for v in out.pixels.data_mut() {
                *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    out
}

struct Validation {
    components: LossComponents,
    mre_px: f64,
    mre_mm: f64,
}

fn validate_epoch(net: &Network, cfg: &RunConfig, val: &[AnnotatedImage], targets: &[TargetBundle]) -> Result<Validation> {
    let (mut hm_sum, mut paf_sum, mut total_sum) = (0.0, 0.0, 0.0);
    let (mut px_sum, mut mm_sum, mut count) = (0.0, 0.0, 0usize);
    for (chunk, tchunk) in val.chunks(cfg.batch_size).zip(targets.chunks(cfg.batch_size)) {
        let refs: Vec<&AnnotatedImage> = chunk.iter().collect();
        let out = net.predict(&image_batch(&refs))?;
        let (thm, tpaf, tmask) = stack_targets(tchunk);
        let loss = hybrid_loss(&out.heatmaps, &thm, &tmask, &out.paf, &tpaf, &cfg.weights, &cfg.awing, cfg.heatmap_loss)?;
        let k = chunk.len() as f64;
        hm_sum += loss.components.heatmap * k;
        paf_sum += loss.components.paf * k;
        total_sum += loss.components.total * k;
        for (i, a) in chunk.iter().enumerate() {
            let decoded = decode_landmarks(&out.heatmaps, i, cfg.network.output_stride);
            let m = match_predictions(&a.landmarks, &keep_all(&decoded));
            for p in &m.pairs {
                px_sum += ((p.pred.0 - p.gt.0).powi(2) + (p.pred.1 - p.gt.1).powi(2)).sqrt();
                mm_sum += radial_error_mm(p, a.spacing);
                count += 1;
            }
        }
    }
    let n = val.len() as f64;
    let c = count.max(1) as f64;
    Ok(Validation {
        components: LossComponents {
            heatmap: hm_sum / n,
            paf: paf_sum / n,
            total: total_sum / n,
        },
        mre_px: px_sum / c,
        mre_mm: mm_sum / c,
    })
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn check_images(images: &[AnnotatedImage], net: &Network, what: &str) -> Result<()> {
    let Some(first) = images.first() else {
        return Err(Error::Config(format!("{what} split is empty")));
    };
    for a in images {
        if (a.width(), a.height()) != (first.width(), first.height()) {
            return Err(Error::Config(format!("{what} images differ in size ({})", a.id)));
        }
    }
    net.check_input(first.height(), first.width())
        .map_err(|e| Error::Config(e.to_string()))
}

/// Trains on an already loaded dataset. `progress` sees each epoch row as
/// soon as it is written.
pub fn train_on(cfg: &RunConfig, data: &Dataset, progress: Option<&dyn Fn(&EpochRow)>) -> Result<RunLedger> {
    cfg.validate()?;
    let out = &cfg.output;
    create_dir(out)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_toml())?;
    let skeleton: SkeletonGraph = cfg.skeleton.build();
    let mut net = Network::new(cfg.network.clone(), seed_mix(cfg.seed, 1))?;
    check_images(&data.train, &net, "train")?;
    check_images(&data.val, &net, "val")?;
    let val_targets: Vec<TargetBundle> = data
        .val
        .iter()
        .map(|a| encode_targets(a, &skeleton, &cfg.encoding))
        .collect::<Result<_>>()?;

    let steps_path = out.join(STEPS_CSV);
    let ledger_path = out.join(LEDGER_CSV);
    let heat_col = match cfg.heatmap_loss {
        crate::losses::HeatmapLoss::MaskedAwing => "awing",
        crate::losses::HeatmapLoss::Mse => "mse",
    };
    write_text(&steps_path, &format!("step,{heat_col},paf_mse,total\n"))?;
    write_text(&ledger_path, &format!("{}\n", EpochRow::CSV_HEADER))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(cfg.seed, 2));
    let mut adam = Adam::new(cfg.learning_rate, net.params().values());
    let meta = serde_json::to_value(cfg).expect("config serialises");
    let start = Instant::now();
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best = (0usize, f64::INFINITY);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step: usize = 0;
    let mut step_log = String::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut hm_sum, mut paf_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<AnnotatedImage> = batch.iter().map(|&i| augment(&data.train[i], cfg, &mut rng)).collect();
            let targets: Vec<TargetBundle> = samples
                .iter()
                .map(|a| encode_targets(a, &skeleton, &cfg.encoding))
                .collect::<Result<_>>()?;
            let (thm, tpaf, tmask) = stack_targets(&targets);
            let refs: Vec<&AnnotatedImage> = samples.iter().collect();
            let mut g = Graph::new();
            let x = g.input(image_batch(&refs));
            let (hm, paf) = net.forward(&mut g, x)?;
            let loss = hybrid_loss(g.value(hm), &thm, &tmask, g.value(paf), &tpaf, &cfg.weights, &cfg.awing, cfg.heatmap_loss)?;
            step += 1;
            let c = loss.components;
            if !c.total.is_finite() {
                let report = serde_json::json!({ "epoch": epoch, "step": step, "heatmap": c.heatmap, "paf": c.paf });
                write_text(&out.join("divergence.json"), &report.to_string())?;
                return Err(Error::Divergence { epoch, step, loss: c.total });
            }
            let grads = g.backward(&[(hm, loss.grad_heatmaps), (paf, loss.grad_paf)]);
            let pgrads = g.param_grads(&grads, net.params().len());
            adam.step(net.params_mut().values_mut(), &pgrads);
            let k = batch.len() as f64;
            hm_sum += c.heatmap * k;
            paf_sum += c.paf * k;
            total_sum += c.total * k;
            step_log.push_str(&format!("{step},{:.9},{:.9},{:.9}\n", c.heatmap, c.paf, c.total));
        }
        let n = data.train.len() as f64;
        let v = validate_epoch(&net, cfg, &data.val, &val_targets)?;
        let row = EpochRow {
            epoch,
            train_heatmap: hm_sum / n,
            train_paf: paf_sum / n,
            train_total: total_sum / n,
            val_heatmap: v.components.heatmap,
            val_paf: v.components.paf,
            val_total: v.components.total,
            val_mre_px: v.mre_px,
            val_mre_mm: v.mre_mm,
            wall_s: start.elapsed().as_secs_f64(),
        };
        append(&steps_path, step_log.trim_end())?;
        step_log.clear();
        append(&ledger_path, &row.csv())?;
        if row.val_mre_px < best.1 {
            best = (epoch, row.val_mre_px);
            net.save(&out.join(BEST_CHECKPOINT), &meta)?;
        }
        if let Some(f) = progress {
            f(&row);
        }
        rows.push(row);
    }
    net.save(&out.join(FINAL_CHECKPOINT), &meta)?;
    if best.0 == 0 {
        // Validation never produced a finite MRE; the final weights stand in.
        net.save(&out.join(BEST_CHECKPOINT), &meta)?;
        best.0 = cfg.epochs;
    }
    let ledger = RunLedger {
        config: cfg.clone(),
        rows,
        best_epoch: best.0,
        best_val_mre_px: best.1,
        best_checkpoint: out.join(BEST_CHECKPOINT),
        final_checkpoint: out.join(FINAL_CHECKPOINT),
    };
    let json = serde_json::to_string_pretty(&ledger).expect("ledger serialises");
    write_text(&out.join(LEDGER_JSON), &json)?;
    Ok(ledger)
}
