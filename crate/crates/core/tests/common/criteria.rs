//! Measurements behind the acceptance criteria. Each function returns the
//! measured quantities; callers decide what to assert or print.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use unsct::encoding::{encode_heatmaps, encode_targets, EncodingParams};
use unsct::eval::{icc21, mre, nme, pearson, sdr, Pair};
use unsct::harness::{train_on, RunConfig};
use unsct::landmarks::{build_default_skeleton, mirror_landmarks, Landmark, Spacing};
use unsct::losses::{awing, hybrid_loss, masked_awing_grad, mse_grad, AwingParams, HeatmapLoss, HybridWeights};
use unsct::net::{Network, NetworkConfig};
use unsct::nn::{Graph, Tensor};
use unsct::phantom::{generate_phantom, generate_sample, Dataset, MissingDistribution, PhantomConfig, Split};
use unsct::uncertainty::{aggregate_and_suppress, decode_landmarks, projection_weight, UeParams};

use super::*;

fn random_params(rng: &mut ChaCha8Rng) -> AwingParams {
    AwingParams::new(
        rng.gen_range(5.0..20.0),
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.5..2.0),
        rng.gen_range(1.5..3.0),
    )
    .unwrap()
}

/// Prediction whose error avoids the immediate neighbourhood of 0 and θ.
fn offset(rng: &mut ChaCha8Rng, theta: f64, linear: bool) -> f64 {
    loop {
        let d = if linear { rng.gen_range(theta..1.5) } else { rng.gen_range(0.0..theta) };
        if d > 1e-2 && (d - theta).abs() > 1e-3 {
            return if rng.gen_bool(0.5) { d } else { -d };
        }
    }
}

pub struct LossGradReport {
    pub draws: usize,
    pub max_value_err: f64,
    pub max_grad_rel: f64,
    pub log_branch_elems: usize,
    pub linear_branch_elems: usize,
}

/// AWing values against the reference formula and analytic gradients of
/// masked AWing, PAF MSE and the hybrid loss against central differences.
pub fn loss_gradients(draws: usize, seed: u64) -> LossGradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = LossGradReport {
        draws,
        max_value_err: 0.0,
        max_grad_rel: 0.0,
        log_branch_elems: 0,
        linear_branch_elems: 0,
    };
    let h = 1e-6;
    for _ in 0..draws {
        let p = random_params(&mut rng);
        let w_mask = rng.gen_range(0.0..20.0);
        let n = 12;
        let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let pred: Vec<f64> = gt
            .iter()
            .enumerate()
            .map(|(i, t)| t + offset(&mut rng, p.theta, i % 2 == 1))
            .collect();
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        for (y, t) in pred.iter().zip(&gt) {
            if (y - t).abs() < p.theta {
                r.log_branch_elems += 1;
            } else {
                r.linear_branch_elems += 1;
            }
        }
        let vals = awing(&pred, &gt, &p).unwrap();
        for ((y, t), v) in pred.iter().zip(&gt).zip(&vals) {
            let want = awing_ref(*y, *t, p.omega, p.theta, p.epsilon, p.alpha);
            r.max_value_err = r.max_value_err.max(rel_err(*v, want, 1e-12));
        }
        let (_, grad) = masked_awing_grad(&pred, &gt, &mask, &p, w_mask).unwrap();
        let f = |x: &[f64]| masked_awing_grad(x, &gt, &mask, &p, w_mask).unwrap().0;
        for i in 0..n {
            r.max_grad_rel = r.max_grad_rel.max(rel_err(grad[i], central_diff(f, &pred, i, h), 1e-8));
        }
        let paf_gt: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let paf: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let (_, g) = mse_grad(&paf, &paf_gt).unwrap();
        let f = |x: &[f64]| mse_grad(x, &paf_gt).unwrap().0;
        for i in 0..n {
            r.max_grad_rel = r.max_grad_rel.max(rel_err(g[i], central_diff(f, &paf, i, h), 1e-8));
        }
    }
    // Hybrid loss through both heads, for both heatmap losses.
    for k in 0..draws.div_ceil(10) {
        let p = random_params(&mut rng);
        let weights = HybridWeights {
            heatmap: rng.gen_range(0.1..2.0),
            paf: rng.gen_range(0.1..2.0),
            mask: rng.gen_range(0.0..15.0),
        };
        let kind = if k % 2 == 0 { HeatmapLoss::MaskedAwing } else { HeatmapLoss::Mse };
        let hs = [2, 3, 3, 4];
        let ps = [2, 4, 3, 4];
        let len = |s: [usize; 4]| s.iter().product::<usize>();
        let gt_hm: Vec<f64> = (0..len(hs)).map(|_| rng.gen_range(0.0..1.0)).collect();
        let hm: Vec<f64> = gt_hm.iter().map(|t| {
            let lin = rng.gen_bool(0.5);
            t + offset(&mut rng, p.theta, lin)
        }).collect();
        let mask: Vec<f64> = (0..len(hs)).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let gt_paf: Vec<f64> = (0..len(ps)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let paf: Vec<f64> = (0..len(ps)).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let t = |s, v: &[f64]| Tensor::from_vec(s, v.to_vec());
        let total = |hm: &[f64], paf: &[f64]| {
            hybrid_loss(&t(hs, hm), &t(hs, &gt_hm), &t(hs, &mask), &t(ps, paf), &t(ps, &gt_paf), &weights, &p, kind)
                .unwrap()
        };
        let base = total(&hm, &paf);
        let fh = |x: &[f64]| total(x, &paf).components.total;
        for i in 0..hm.len() {
            let fd = central_diff(fh, &hm, i, h);
            r.max_grad_rel = r.max_grad_rel.max(rel_err(base.grad_heatmaps.data()[i], fd, 1e-8));
        }
        let fp = |x: &[f64]| total(&hm, x).components.total;
        for i in 0..paf.len() {
            let fd = central_diff(fp, &paf, i, h);
            r.max_grad_rel = r.max_grad_rel.max(rel_err(base.grad_paf.data()[i], fd, 1e-8));
        }
    }
    r
}

pub struct SeamReport {
    pub draws: usize,
    pub max_value_gap: f64,
    pub max_quotient_rel: f64,
}

/// Continuity of the two AWing branches at `|diff| = θ` and agreement of
/// the one-sided difference quotients with the reference slope `A`.
pub fn awing_seam(draws: usize, seed: u64) -> SeamReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = SeamReport {
        draws,
        max_value_gap: 0.0,
        max_quotient_rel: 0.0,
    };
    let h = 1e-7;
    for _ in 0..draws {
        let p = random_params(&mut rng);
        let gt = rng.gen_range(0.0..1.0);
        let (omega, theta, eps, alpha) = (p.omega, p.theta, p.epsilon, p.alpha);
        let a = awing_a_ref(gt, omega, theta, eps, alpha);
        let c = theta * a - omega * (1.0 + (theta / eps).powf(alpha - gt)).ln();
        let log_at = omega * (1.0 + (theta / eps).powf(alpha - gt)).ln();
        let lin_at = a * theta - c;
        r.max_value_gap = r.max_value_gap.max((log_at - lin_at).abs());
        r.max_value_gap = r.max_value_gap.max((p.value(theta, gt) - lin_at).abs());
        let left = (p.value(theta, gt) - p.value(theta - h, gt)) / h;
        let right = (p.value(theta + h, gt) - p.value(theta, gt)) / h;
        r.max_quotient_rel = r.max_quotient_rel.max(rel_err(left, a, 1e-12)).max(rel_err(right, a, 1e-12));
    }
    r
}

pub struct NetGradReport {
    pub checked: usize,
    pub max_rel: f64,
}

/// End-to-end gradient of the hybrid loss with respect to every parameter
/// of a tiny network with randomised weights.
pub fn network_gradient(seed: u64) -> NetGradReport {
    let cfg = NetworkConfig {
        stages: 2,
        widths: vec![2, 3],
        output_stride: 2,
        num_landmarks: 3,
        num_edges: 2,
        ..NetworkConfig::default()
    };
    let mut net = Network::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let normal = Normal::new(0.0, 0.5).unwrap();
    for t in net.params_mut().values_mut() {
        for v in t.data_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    let x = Tensor::from_vec([1, 1, 8, 8], (0..64).map(|_| rng.gen_range(0.0..1.0)).collect());
    let gt_hm = Tensor::from_vec([1, 3, 4, 4], (0..48).map(|_| rng.gen_range(0.0..1.0)).collect());
    let mask = Tensor::from_vec([1, 3, 4, 4], (0..48).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect());
    let gt_paf = Tensor::from_vec([1, 4, 4, 4], (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let (weights, awing_p) = (HybridWeights::default(), AwingParams::default());
    let eval = |net: &Network| -> (f64, Vec<Option<Tensor>>) {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let (hm, paf) = net.forward(&mut g, xv).unwrap();
        let l = hybrid_loss(g.value(hm), &gt_hm, &mask, g.value(paf), &gt_paf, &weights, &awing_p, HeatmapLoss::MaskedAwing)
            .unwrap();
        let grads = g.backward(&[(hm, l.grad_heatmaps), (paf, l.grad_paf)]);
        (l.components.total, g.param_grads(&grads, net.params().len()))
    };
    let (_, analytic) = eval(&net);
    // Gradients below `floor` are compared absolutely: some are exactly
    // zero (softmax shift invariance) and there the quotient is round-off.
    let (h, floor) = (1e-5, 1e-5);
    let mut r = NetGradReport { checked: 0, max_rel: 0.0 };
    for pid in 0..net.params().len() {
        for i in 0..net.params().get(pid).len() {
            let orig = net.params().get(pid).data()[i];
            net.params_mut().get_mut(pid).data_mut()[i] = orig + h;
            let up = eval(&net).0;
            net.params_mut().get_mut(pid).data_mut()[i] = orig - h;
            let down = eval(&net).0;
            net.params_mut().get_mut(pid).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[pid].as_ref().map(|t| t.data()[i]).unwrap_or(0.0);
            if std::env::var("GRAD_DEBUG").is_ok() && rel_err(an, fd, floor) > 1e-4 {
                eprintln!("{} [{i}] analytic {an:e} fd {fd:e}", net.params().name(pid));
            }
            r.max_rel = r.max_rel.max(rel_err(an, fd, floor));
            r.checked += 1;
        }
    }
    r
}

pub struct ProjectionReport {
    pub trials: usize,
    pub max_rel_vs_dense: f64,
    pub max_linearity_err: f64,
}

/// A smooth field `u * (1 + 0.5 sin(k . p + φ))` on an `h x w` grid.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<f64>, Vec<f64>, (f64, f64)) {
    let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let u = (ang.cos(), ang.sin());
    let (kx, ky, phase) = (rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(0.0..6.3));
    let mut fx = vec![0.0; h * w];
    let mut fy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let m = 1.0 + 0.5 * (kx * x as f64 + ky * y as f64 + phase).sin();
            fx[y * w + x] = u.0 * m;
            fy[y * w + x] = u.1 * m;
        }
    }
    (fx, fy, u)
}

/// Midpoint rule with 32 samples against a dense 4096-sample brute force
/// on smooth fields, plus exact linearity in the field.
pub fn projection_oracle(trials: usize, seed: u64) -> ProjectionReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, stride) = (32usize, 32usize, 4usize);
    let mut r = ProjectionReport {
        trials,
        max_rel_vs_dense: 0.0,
        max_linearity_err: 0.0,
    };
    let mut done = 0;
    while done < trials {
        let (fx, fy, u) = smooth_field(&mut rng, h, w);
        let lim = (stride * (w - 1)) as f64;
        let a = (rng.gen_range(0.0..lim), rng.gen_range(0.0..lim));
        let b = (rng.gen_range(0.0..lim), rng.gen_range(0.0..lim));
        let len = dist(a, b);
        if len < 8.0 {
            continue;
        }
        let d = ((b.0 - a.0) / len, (b.1 - a.1) / len);
        if (d.0 * u.0 + d.1 * u.1).abs() < 0.3 {
            continue;
        }
        done += 1;
        let got = projection_weight(&fx, &fy, h, w, stride, a, b, 32).unwrap().raw;
        let n = 4096;
        let mut dense = 0.0;
        for k in 0..n {
            let t = (k as f64 + 0.5) / n as f64;
            let (px, py) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            let s = stride as f64;
            let vx = bilinear_ref(&fx, h, w, px / s, py / s);
            let vy = bilinear_ref(&fy, h, w, px / s, py / s);
            dense += (vx * d.0 + vy * d.1) * len / n as f64;
        }
        r.max_rel_vs_dense = r.max_rel_vs_dense.max(rel_err(got, dense, 1e-12));
        let alpha = rng.gen_range(-3.0..3.0);
        let sx: Vec<f64> = fx.iter().map(|v| v * alpha).collect();
        let sy: Vec<f64> = fy.iter().map(|v| v * alpha).collect();
        let scaled = projection_weight(&sx, &sy, h, w, stride, a, b, 32).unwrap().raw;
        r.max_linearity_err = r.max_linearity_err.max((scaled - alpha * got).abs());
    }
    r
}

pub struct MetricReport {
    pub trials: usize,
    pub max_err: f64,
    pub icc_worked_example: f64,
    pub mre_345: f64,
}

/// Shrout and Fleiss (1979), six targets rated by four judges.
pub const SHROUT_FLEISS: [[f64; 4]; 6] = [
    [9.0, 2.0, 5.0, 8.0],
    [6.0, 1.0, 3.0, 2.0],
    [8.0, 4.0, 6.0, 8.0],
    [7.0, 1.0, 2.0, 6.0],
    [10.0, 5.0, 6.0, 9.0],
    [6.0, 2.0, 4.0, 7.0],
];
/// Published ICC(2,1) for [`SHROUT_FLEISS`].
pub const SHROUT_FLEISS_ICC21: f64 = 0.29;

pub fn metric_oracles(trials: usize, seed: u64) -> MetricReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.gen_range(3..30);
        let gt: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(0.0..256.0), rng.gen_range(0.0..256.0))).collect();
        let pred: Vec<(f64, f64)> = gt
            .iter()
            .map(|g| (g.0 + rng.gen_range(-8.0..8.0), g.1 + rng.gen_range(-8.0..8.0)))
            .collect();
        let pairs: Vec<Pair> = pred
            .iter()
            .zip(&gt)
            .enumerate()
            .map(|(i, (p, g))| Pair { global_id: i, pred: *p, gt: *g })
            .collect();
        let s = Spacing { x: rng.gen_range(0.1..1.0), y: rng.gen_range(0.1..1.0) };
        let d = rng.gen_range(50.0..200.0);
        let missed = rng.gen_range(0..4);
        let thr = rng.gen_range(1.0..6.0);
        max_err = max_err
            .max((mre(&pairs, s).unwrap() - mre_ref(&pred, &gt, s)).abs())
            .max((nme(&pairs, d).unwrap() - nme_ref(&pred, &gt, d)).abs())
            .max((sdr(&pairs, missed, s, thr).unwrap() - sdr_ref(&pred, &gt, missed, s, thr)).abs());
        let px: Vec<f64> = pred.iter().flat_map(|p| [p.0, p.1]).collect();
        let gx: Vec<f64> = gt.iter().flat_map(|p| [p.0, p.1]).collect();
        max_err = max_err.max((pearson(&px, &gx) - pearson_ref(&px, &gx)).abs());
    }
    let rows: Vec<Vec<f64>> = SHROUT_FLEISS.iter().map(|r| r.to_vec()).collect();
    let pair = Pair { global_id: 0, pred: (3.0, 4.0), gt: (0.0, 0.0) };
    MetricReport {
        trials,
        max_err,
        icc_worked_example: icc21(&rows),
        mre_345: mre(&[pair], Spacing::uniform(1.0)).unwrap(),
    }
}

pub struct RoundTripReport {
    pub phantoms: usize,
    pub landmarks: usize,
    pub max_err_px: f64,
}

/// Decoding noiseless encoded heatmaps of random phantoms.
pub fn encode_decode_round_trip(phantoms: usize, seed: u64) -> RoundTripReport {
    let cfg = PhantomConfig::default();
    let p = EncodingParams::default();
    let mut r = RoundTripReport { phantoms, landmarks: 0, max_err_px: 0.0 };
    for i in 0..phantoms {
        let a = generate_phantom(&cfg, seed.wrapping_add(i as u64)).unwrap();
        let hm = encode_heatmaps(&a.landmarks, a.height() / p.stride, a.width() / p.stride, p.stride, p.sigma);
        for (lm, d) in a.landmarks.iter().zip(decode_landmarks(&hm, 0, p.stride)) {
            if lm.visible {
                r.landmarks += 1;
                r.max_err_px = r.max_err_px.max(dist((lm.x, lm.y), (d.x, d.y)));
            }
        }
    }
    r
}

pub struct UeReport {
    pub trials: usize,
    pub separated: usize,
    pub true_kept: usize,
    pub true_total: usize,
    pub spurious_suppressed: usize,
    pub spurious_total: usize,
}

impl UeReport {
    pub fn success_rate(&self) -> f64 {
        self.separated as f64 / self.trials as f64
    }
    pub fn recall(&self) -> f64 {
        self.true_kept as f64 / self.true_total as f64
    }
    pub fn suppression(&self) -> f64 {
        self.spurious_suppressed as f64 / self.spurious_total as f64
    }
}

/// Ground-truth heatmaps and PAF of unstructured phantoms, with a peak at
/// a random location written into each missing landmark's channel.
pub fn ue_discrimination(trials: usize, seed: u64) -> UeReport {
    let cfg = PhantomConfig { seed, ..PhantomConfig::default() };
    let p = EncodingParams::default();
    let ue = UeParams::default();
    let sk = build_default_skeleton();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = UeReport {
        trials,
        separated: 0,
        true_kept: 0,
        true_total: 0,
        spurious_suppressed: 0,
        spurious_total: 0,
    };
    for i in 0..trials {
        let (a, entry) = generate_sample(&cfg, Split::Val, i, true, &MissingDistribution::default()).unwrap();
        let mut t = encode_targets(&a, &sk, &p).unwrap();
        for &m in &entry.missing {
            let fake = Landmark::visible(rng.gen_range(0.0..a.width() as f64), rng.gen_range(0.0..a.height() as f64));
            let one = encode_heatmaps(&[fake], t.heatmaps.h(), t.heatmaps.w(), p.stride, p.sigma);
            t.heatmaps.plane_mut(0, m).copy_from_slice(one.plane(0, 0));
        }
        let decoded = decode_landmarks(&t.heatmaps, 0, p.stride);
        let (verdicts, _) = aggregate_and_suppress(&decoded, &sk, &t.paf, 0, p.stride, &ue).unwrap();
        let mut min_true = f64::INFINITY;
        let mut max_spurious = f64::NEG_INFINITY;
        for v in &verdicts {
            if entry.missing.contains(&v.global_id) {
                r.spurious_total += 1;
                r.spurious_suppressed += usize::from(!v.keep);
                max_spurious = max_spurious.max(v.weight);
            } else {
                r.true_total += 1;
                r.true_kept += usize::from(v.keep);
                min_true = min_true.min(v.weight);
            }
        }
        r.separated += usize::from(max_spurious < min_true);
    }
    r
}

/// `mirror(mirror(a)) == a` over random phantoms, coordinates compared
/// bit for bit.
pub fn mirror_involution_failures(phantoms: usize, seed: u64) -> usize {
    let cfg = PhantomConfig::default();
    (0..phantoms)
        .filter(|i| {
            let a = generate_phantom(&cfg, seed.wrapping_add(*i as u64)).unwrap();
            mirror_landmarks(&mirror_landmarks(&a)) != a
        })
        .count()
}

/// File name to contents for every file under `root`.
pub fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let key = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(key, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub fn tiny_run_config(dataset: &Path, output: &Path) -> RunConfig {
    RunConfig {
        dataset: dataset.to_path_buf(),
        output: output.to_path_buf(),
        epochs: 2,
        batch_size: 4,
        network: NetworkConfig {
            stages: 2,
            widths: vec![4, 8],
            ..NetworkConfig::default()
        },
        ..RunConfig::default()
    }
}

pub struct ReproReport {
    pub ledgers_identical: bool,
    pub checkpoints_identical: bool,
    pub datasets_identical: bool,
    pub mirror_failures: usize,
}

/// Two trainings from one config and seed, two dataset builds from one
/// seed, and the mirror involution.
pub fn reproducibility(tmp: &Path) -> ReproReport {
    let (d1, d2) = (tmp.join("data1"), tmp.join("data2"));
    small_dataset(&d1, 64, 8, 4, 0.25, 11);
    small_dataset(&d2, 64, 8, 4, 0.25, 11);
    let datasets_identical = snapshot(&d1) == snapshot(&d2);
    let data = Dataset::load(&d1).unwrap();
    let run = |dir: &str| train_on(&tiny_run_config(&d1, &tmp.join(dir)), &data, None).unwrap();
    let (a, b) = (run("run1"), run("run2"));
    let ledgers_identical = a.rows.len() == b.rows.len()
        && a.rows.iter().zip(&b.rows).all(|(x, y)| x.epoch == y.epoch && x.losses() == y.losses());
    let steps = |dir: &str| std::fs::read(tmp.join(dir).join("steps.csv")).unwrap();
    // The archives differ in the echoed output directory; weights must not.
    let ckpt = |l: &unsct::harness::RunLedger| Network::load(&l.final_checkpoint).unwrap().0.params().values().to_vec();
    ReproReport {
        ledgers_identical: ledgers_identical && steps("run1") == steps("run2"),
        checkpoints_identical: ckpt(&a) == ckpt(&b),
        datasets_identical,
        mirror_failures: mirror_involution_failures(200, 3),
    }
}
