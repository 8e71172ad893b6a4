use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::image_batch;
use super::{create_dir, write_text, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{clinical_parameters, stratified_report, write_clinical_csv, ImageEval, MetricsReport};
use crate::image::GrayImage;
use crate::landmarks::{AnnotatedImage, Landmark, SkeletonGraph, Spacing};
use crate::net::Network;
use crate::phantom::{Dataset, Split};
use crate::uncertainty::{
    aggregate_weights, decode_landmarks, edge_weights, keep_all, render_uncertainty_map, write_ue_report, DecodedLandmark,
    UeParams, UncertaintyVerdict,
};

/// Network prediction for one image, decoded and scored by the UE module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub id: String,
    pub decoded: Vec<DecodedLandmark>,
    pub edge_weights: Vec<f64>,
    pub verdicts: Vec<UncertaintyVerdict>,
}

impl ImagePrediction {
    /// Landmarks reported with (`true`) or without suppression.
    pub fn kept(&self, ue_enabled: bool) -> Vec<Landmark> {
        if ue_enabled {
            self.decoded
                .iter()
                .zip(&self.verdicts)
                .map(|(d, v)| if v.keep { Landmark::visible(d.x, d.y) } else { Landmark::missing() })
                .collect()
        } else {
            keep_all(&self.decoded)
        }
    }
}

pub fn predict_images(
    net: &Network,
    images: &[AnnotatedImage],
    skeleton: &SkeletonGraph,
    ue: &UeParams,
    batch_size: usize,
) -> Result<Vec<ImagePrediction>> {
    ue.validate()?;
    let stride = net.config().output_stride;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let refs: Vec<&AnnotatedImage> = chunk.iter().collect();
        let pred = net.predict(&image_batch(&refs))?;
        for (i, a) in chunk.iter().enumerate() {
            let decoded = decode_landmarks(&pred.heatmaps, i, stride);
            let weights = edge_weights(&decoded, skeleton, &pred.paf, i, stride, ue.n_samples);
            let verdicts = aggregate_weights(decoded.len(), skeleton, &weights, ue);
            out.push(ImagePrediction {
                id: a.id.clone(),
                decoded,
                edge_weights: weights,
                verdicts,
            });
        }
    }
    Ok(out)
}

/// Scores predictions against ground truth with or without suppression.
pub fn score(images: &[AnnotatedImage], preds: &[ImagePrediction], ue_enabled: bool) -> (Vec<ImageEval>, MetricsReport) {
    let evals: Vec<ImageEval> = images
        .iter()
        .zip(preds)
        .map(|(a, p)| ImageEval::new(&a.id, a.structured, a.spacing, a.width(), a.height(), &a.landmarks, &p.kept(ue_enabled)))
        .collect();
    let report = stratified_report(&evals);
    (evals, report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub report_csv: PathBuf,
}

fn load_run(checkpoint: &Path) -> Result<(Network, RunConfig)> {
    let (net, meta) = Network::load(checkpoint)?;
    let cfg: RunConfig = serde_json::from_value(meta).map_err(|e| Error::format(checkpoint, e.to_string()))?;
    Ok((net, cfg))
}

/// Evaluates a checkpoint on one split of a dataset and writes the report,
/// per-image clinical parameters and the UE JSONL log under `out`.
pub fn evaluate(
    checkpoint: &Path,
    dataset: &Path,
    split: Split,
    ue_enabled: bool,
    ue_override: Option<UeParams>,
    out: &Path,
    dump_uncertainty: bool,
) -> Result<EvalOutput> {
    let (net, cfg) = load_run(checkpoint)?;
    let ue = ue_override.unwrap_or(cfg.ue);
    let data = Dataset::load(dataset)?;
    let images = data.split(split);
    let skeleton = cfg.skeleton.build();
    let preds = predict_images(&net, images, &skeleton, &ue, cfg.batch_size)?;
    let (_, report) = score(images, &preds, ue_enabled);
    create_dir(out)?;
    let tag = if ue_enabled { "unsct" } else { "ori" };
    let report_csv = out.join(format!("report_{tag}.csv"));
    report.write_csv(&report_csv)?;
    let clinical: Vec<(String, _)> = images
        .iter()
        .zip(&preds)
        .map(|(a, p)| (a.id.clone(), clinical_parameters(&p.kept(ue_enabled), a.spacing)))
        .collect();
    write_clinical_csv(&out.join(format!("clinical_{tag}.csv")), &clinical)?;
    let jsonl = out.join("uncertainty.jsonl");
    let mut w = BufWriter::new(File::create(&jsonl).map_err(|e| Error::io(&jsonl, e))?);
    for p in &preds {
        write_ue_report(&mut w, &jsonl, &p.id, &p.decoded, &p.verdicts)?;
    }
    if dump_uncertainty {
        let dir = out.join("uncertainty_maps");
        create_dir(&dir)?;
        for (a, p) in images.iter().zip(&preds) {
            render_uncertainty_map(&p.decoded, &p.verdicts, &a.pixels, true).save_png(&dir.join(format!("{}.png", a.id)))?;
        }
    }
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    write_text(&out.join(format!("report_{tag}.json")), &json)?;
    Ok(EvalOutput { report, report_csv })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferOutput {
    pub image: String,
    pub spacing: Spacing,
    pub landmarks: Vec<InferredLandmark>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferredLandmark {
    pub global_id: usize,
    pub x: f64,
    pub y: f64,
    pub weight: f64,
    pub uncertainty: f64,
    pub keep: bool,
}

/// Runs a checkpoint on one PNG and writes `<stem>.landmarks.json` (and an
/// uncertainty overlay when `overlay` is set) into `out`.
pub fn infer(checkpoint: &Path, image: &Path, spacing: Spacing, ue_enabled: bool, out: &Path, overlay: bool) -> Result<InferOutput> {
    let (net, cfg) = load_run(checkpoint)?;
    let pixels = GrayImage::load_png(image)?;
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let a = AnnotatedImage {
        id: stem.clone(),
        landmarks: vec![Landmark::missing(); cfg.network.num_landmarks],
        pixels,
        spacing,
        structured: false,
    };
    let skeleton = cfg.skeleton.build();
    let pred = predict_images(&net, std::slice::from_ref(&a), &skeleton, &cfg.ue, 1)?.remove(0);
    let result = InferOutput {
        image: image.display().to_string(),
        spacing,
        landmarks: pred
            .decoded
            .iter()
            .zip(&pred.verdicts)
            .map(|(d, v)| InferredLandmark {
                global_id: d.global_id,
                x: d.x,
                y: d.y,
                weight: v.weight,
                uncertainty: v.uncertainty,
                keep: v.keep || !ue_enabled,
            })
            .collect(),
    };
    create_dir(out)?;
    let json = serde_json::to_string_pretty(&result).expect("inference serialises");
    write_text(&out.join(format!("{stem}.landmarks.json")), &json)?;
    if overlay {
        render_uncertainty_map(&pred.decoded, &pred.verdicts, &a.pixels, true).save_png(&out.join(format!("{stem}.uncertainty.png")))?;
    }
    Ok(result)
}
