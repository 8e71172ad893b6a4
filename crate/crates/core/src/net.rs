//! Multi-resolution landmark network with spatial-relationship fusion (SRF)
//! blocks and two 1x1 heads: `K` heatmaps and `2E` PAF channels.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::NUM_LANDMARKS;
use crate::nn::{Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of stages; stage `s` runs `s + 1` parallel branches.
    pub stages: usize,
    /// Channel width of each branch, highest resolution first.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Downsampling of the highest-resolution branch; a power of two.
    pub output_stride: usize,
    pub num_landmarks: usize,
    pub num_edges: usize,
    /// Per-sample normalisation (one group over all channels) after each
    /// backbone convolution.
    pub normalization: bool,
    pub srf_enabled: bool,
    /// Feeds an intermediate heatmap estimate into the last SRF block of the
    /// highest-resolution branch.
    pub srf_heatmap_feedback: bool,
    pub channel_attention: bool,
    pub spatial_attention: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            stages: 3,
            widths: vec![16, 32, 64],
            blocks_per_stage: 1,
            output_stride: 4,
            num_landmarks: NUM_LANDMARKS,
            num_edges: crate::landmarks::build_default_skeleton().num_edges(),
            normalization: true,
            srf_enabled: true,
            srf_heatmap_feedback: true,
            channel_attention: true,
            spatial_attention: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("stages must be at least 1".into()));
        }
        if self.widths.len() != self.stages {
            return Err(Error::Config(format!(
                "widths lists {} branches but stages is {}",
                self.widths.len(),
                self.stages
            )));
        }
        if self.widths[0] < 2 {
            return Err(Error::Config("branch width must be at least 2".into()));
        }
        if self.widths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "branch widths {:?} must increase strictly with depth",
                self.widths
            )));
        }
        if !self.output_stride.is_power_of_two() {
            return Err(Error::Config(format!(
                "output stride {} is not a power of two",
                self.output_stride
            )));
        }
        if self.num_landmarks == 0 || self.num_edges == 0 {
            return Err(Error::Config("landmark and edge counts must be positive".into()));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn total_downsampling(&self) -> usize {
        self.output_stride << (self.stages - 1)
    }

    pub fn paf_channels(&self) -> usize {
        2 * self.num_edges
    }
}

/// Coordinate channels appended by the SRF block: `x`, `y` in `[-1, 1]`
/// and `r = sqrt(x^2 + y^2) / sqrt(2)` in `[0, 1]`, for a batch of `n`.
pub fn coordinate_channels(n: usize, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros([n, 3, h, w]);
    let norm = |i: usize, len: usize| {
        if len > 1 {
            2.0 * i as f64 / (len - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                let (xn, yn) = (norm(x, w), norm(y, h));
                t.set(s, 0, y, x, xn);
                t.set(s, 1, y, x, yn);
                t.set(s, 2, y, x, (xn * xn + yn * yn).sqrt() / 2f64.sqrt());
            }
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    cfg: NetworkConfig,
    params: ParamStore,
}

/// Raw network outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub heatmaps: Tensor,
    pub paf: Tensor,
}

impl Network {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let conv = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cout: usize, cin: usize, k: usize| {
            p.add_conv_weight(format!("{name}.w"), cout, cin, k, rng);
            p.add(format!("{name}.b"), Tensor::zeros([1, cout, 1, 1]));
        };
        let norm = cfg.normalization;
        let conv_bn = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cout: usize, cin: usize, k: usize| {
            conv(p, rng, name, cout, cin, k);
            if norm {
                p.add(format!("{name}.norm.gamma"), Tensor::full([1, cout, 1, 1], 1.0));
                p.add(format!("{name}.norm.beta"), Tensor::zeros([1, cout, 1, 1]));
            }
        };
        let w0 = cfg.widths[0];
        let steps = cfg.output_stride.trailing_zeros() as usize;
        for i in 0..steps.max(1) {
            conv_bn(&mut p, &mut rng, &format!("stem.{i}"), w0, if i == 0 { 1 } else { w0 }, 3);
        }
        for s in 0..cfg.stages {
            if s > 0 {
                conv_bn(&mut p, &mut rng, &format!("transition.{s}"), cfg.widths[s], cfg.widths[s - 1], 3);
            }
            for b in 0..=s {
                let c = cfg.widths[b];
                for k in 0..cfg.blocks_per_stage {
                    conv_bn(&mut p, &mut rng, &format!("stage{s}.branch{b}.block{k}.conv1"), c, c, 3);
                    conv_bn(&mut p, &mut rng, &format!("stage{s}.branch{b}.block{k}.conv2"), c, c, 3);
                }
            }
            if s > 0 {
                for i in 0..=s {
                    for j in 0..=s {
                        let name = format!("stage{s}.fuse{j}to{i}");
                        if j > i {
                            conv_bn(&mut p, &mut rng, &name, cfg.widths[i], cfg.widths[j], 1);
                        } else if j < i {
                            for d in 0..i - j {
                                let cout = if d + 1 == i - j { cfg.widths[i] } else { cfg.widths[j] };
                                conv_bn(&mut p, &mut rng, &format!("{name}.down{d}"), cout, cfg.widths[j], 3);
                            }
                        }
                    }
                }
            }
            if cfg.srf_enabled {
                for b in 0..=s {
                    let c = cfg.widths[b];
                    let name = format!("srf.stage{s}.branch{b}");
                    let feedback = cfg.srf_heatmap_feedback && b == 0 && s + 1 == cfg.stages;
                    let extra = if feedback { cfg.num_landmarks } else { 0 };
                    if feedback {
                        conv(&mut p, &mut rng, &format!("{name}.feedback"), cfg.num_landmarks, c, 1);
                    }
                    conv(&mut p, &mut rng, &format!("{name}.fuse"), c, c + 3 + extra, 1);
                    let half = c / 2;
                    if cfg.channel_attention {
                        conv(&mut p, &mut rng, &format!("{name}.ch_q"), 1, c, 1);
                        conv(&mut p, &mut rng, &format!("{name}.ch_v"), half, c, 1);
                        conv(&mut p, &mut rng, &format!("{name}.ch_z"), c, half, 1);
                        p.add(format!("{name}.ch_ln.gamma"), Tensor::full([1, c, 1, 1], 1.0));
                        p.add(format!("{name}.ch_ln.beta"), Tensor::zeros([1, c, 1, 1]));
                    }
                    if cfg.spatial_attention {
                        conv(&mut p, &mut rng, &format!("{name}.sp_q"), half, c, 1);
                        conv(&mut p, &mut rng, &format!("{name}.sp_v"), half, c, 1);
                    }
                }
            }
        }
        // Heads start at zero so the first predictions are empty maps.
        p.add("head.heatmap.w", Tensor::zeros([cfg.num_landmarks, w0, 1, 1]));
        p.add("head.heatmap.b", Tensor::zeros([1, cfg.num_landmarks, 1, 1]));
        p.add("head.paf.w", Tensor::zeros([cfg.paf_channels(), w0, 1, 1]));
        p.add("head.paf.b", Tensor::zeros([1, cfg.paf_channels(), 1, 1]));
        Ok(Network { cfg, params: p })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = self.cfg.total_downsampling();
        for (name, v) in [("height", h), ("width", w)] {
            if v == 0 || v % f != 0 {
                return Err(Error::Shape(format!(
                    "input {name} {v} is not a positive multiple of the total downsampling {f}"
                )));
            }
        }
        Ok(())
    }

    fn param(&self, g: &mut Graph, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        g.param(id, self.params.get(id))
    }

    fn conv(&self, g: &mut Graph, x: Var, name: &str, stride: usize) -> Var {
        let w = self.param(g, &format!("{name}.w"));
        let b = self.param(g, &format!("{name}.b"));
        let k = g.value(w).shape()[2];
        g.conv2d(x, w, Some(b), stride, k / 2)
    }

    /// Convolution followed by the optional normalisation.
    fn conv_bn(&self, g: &mut Graph, x: Var, name: &str, stride: usize) -> Var {
        let y = self.conv(g, x, name, stride);
        if !self.cfg.normalization {
            return y;
        }
        let gamma = self.param(g, &format!("{name}.norm.gamma"));
        let beta = self.param(g, &format!("{name}.norm.beta"));
        g.layer_norm(y, gamma, beta)
    }

    fn basic_block(&self, g: &mut Graph, x: Var, name: &str) -> Var {
        let y = self.conv_bn(g, x, &format!("{name}.conv1"), 1);
        let y = g.relu(y);
        let y = self.conv_bn(g, y, &format!("{name}.conv2"), 1);
        let y = g.add(x, y);
        g.relu(y)
    }

    /// SRF block: stack coordinates (and optionally heatmap estimates), fuse
    /// with a 1x1 convolution back to `C` channels, apply polarized channel
    /// then spatial attention, and add the result to the input.
    pub fn srf_block(&self, g: &mut Graph, x: Var, name: &str, feedback: Option<Var>) -> Var {
        let [n, _, h, w] = g.value(x).shape();
        let coords = g.input(coordinate_channels(n, h, w));
        let mut parts = vec![x, coords];
        parts.extend(feedback);
        let stacked = g.concat(&parts);
        let mut y = self.conv(g, stacked, &format!("{name}.fuse"), 1);
        if self.cfg.channel_attention {
            let q = self.conv(g, y, &format!("{name}.ch_q"), 1);
            let q = g.softmax(q);
            let v = self.conv(g, y, &format!("{name}.ch_v"), 1);
            let pooled = g.mul(v, q);
            let pooled = g.sum_spatial(pooled);
            let z = self.conv(g, pooled, &format!("{name}.ch_z"), 1);
            let gamma = self.param(g, &format!("{name}.ch_ln.gamma"));
            let beta = self.param(g, &format!("{name}.ch_ln.beta"));
            let z = g.layer_norm(z, gamma, beta);
            let gate = g.sigmoid(z);
            y = g.mul(y, gate);
        }
        if self.cfg.spatial_attention {
            let q = self.conv(g, y, &format!("{name}.sp_q"), 1);
            let q = g.mean_spatial(q);
            let q = g.softmax(q);
            let v = self.conv(g, y, &format!("{name}.sp_v"), 1);
            let s = g.mul(v, q);
            let s = g.sum_channels(s);
            let gate = g.sigmoid(s);
            y = g.mul(y, gate);
        }
        g.add(x, y)
    }

    /// Builds the forward pass on `g`; returns `(heatmaps, paf)` nodes.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let [_, c, h, w] = g.value(x).shape();
        if c != 1 {
            return Err(Error::Shape(format!("input channels {c}, expected 1")));
        }
        self.check_input(h, w)?;
        let cfg = &self.cfg;
        let steps = cfg.output_stride.trailing_zeros() as usize;
        let mut y = x;
        for i in 0..steps.max(1) {
            let stride = if steps == 0 { 1 } else { 2 };
            y = self.conv_bn(g, y, &format!("stem.{i}"), stride);
            y = g.relu(y);
        }
        let mut branches = vec![y];
        for s in 0..cfg.stages {
            if s > 0 {
                let t = self.conv_bn(g, branches[s - 1], &format!("transition.{s}"), 2);
                branches.push(g.relu(t));
            }
            for (b, br) in branches.iter_mut().enumerate() {
                for k in 0..cfg.blocks_per_stage {
                    *br = self.basic_block(g, *br, &format!("stage{s}.branch{b}.block{k}"));
                }
            }
            if s > 0 {
                branches = self.exchange(g, &branches, s);
            }
            if cfg.srf_enabled {
                for b in 0..=s {
                    let name = format!("srf.stage{s}.branch{b}");
                    let feedback = if cfg.srf_heatmap_feedback && b == 0 && s + 1 == cfg.stages {
                        Some(self.conv(g, branches[0], &format!("{name}.feedback"), 1))
                    } else {
                        None
                    };
                    branches[b] = self.srf_block(g, branches[b], &name, feedback);
                }
            }
        }
        let top = branches[0];
        let hm = self.conv(g, top, "head.heatmap", 1);
        let paf = self.conv(g, top, "head.paf", 1);
        Ok((hm, paf))
    }

    fn exchange(&self, g: &mut Graph, branches: &[Var], s: usize) -> Vec<Var> {
        let mut out = Vec::with_capacity(branches.len());
        for i in 0..branches.len() {
            let mut acc = branches[i];
            for (j, &xj) in branches.iter().enumerate() {
                let name = format!("stage{s}.fuse{j}to{i}");
                let t = if j > i {
                    let t = self.conv_bn(g, xj, &name, 1);
                    g.upsample(t, 1 << (j - i))
                } else if j < i {
                    let mut t = xj;
                    for d in 0..i - j {
                        t = self.conv_bn(g, t, &format!("{name}.down{d}"), 2);
                        if d + 1 < i - j {
                            t = g.relu(t);
                        }
                    }
                    t
                } else {
                    continue;
                };
                acc = g.add(acc, t);
            }
            out.push(g.relu(acc));
        }
        out
    }

    /// Inference on a batch of `N x 1 x H x W` images.
    pub fn predict(&self, images: &Tensor) -> Result<NetOutput> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let (hm, paf) = self.forward(&mut g, x)?;
        Ok(NetOutput {
            heatmaps: g.value(hm).clone(),
            paf: g.value(paf).clone(),
        })
    }

    /// Parameters whose names belong to SRF blocks.
    pub fn srf_parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("srf."))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Text listing of parameter names and shapes, one per line.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        for (name, t) in self.params.iter() {
            let [a, b, c, d] = t.shape();
            s.push_str(&format!("{name}\t{a}x{b}x{c}x{d}\n"));
        }
        s
    }

    /// Writes the checkpoint archive and a `.manifest.txt` next to it.
    /// `meta` is an arbitrary JSON echo of the run configuration.
    pub fn save(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        let header = serde_json::json!({ "network": self.cfg, "meta": meta });
        let header = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in self.params.iter() {
            buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        let manifest = path.with_extension("manifest.txt");
        fs::write(&manifest, self.manifest()).map_err(|e| Error::io(&manifest, e))?;
        Ok(())
    }

    /// Loads a checkpoint; returns the network and the stored `meta` value.
    pub fn load(path: &Path) -> Result<(Network, serde_json::Value)> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let mut r = Reader { buf: &buf, pos: 0, path };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        let hlen = r.u64()? as usize;
        let header: serde_json::Value =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::format(path, e.to_string()))?;
        let cfg: NetworkConfig =
            serde_json::from_value(header["network"].clone()).map_err(|e| Error::format(path, e.to_string()))?;
        let mut net = Network::new(cfg, 0)?;
        let count = r.u64()? as usize;
        if count != net.params.len() {
            return Err(Error::format(
                path,
                format!("checkpoint has {count} arrays, network expects {}", net.params.len()),
            ));
        }
        for _ in 0..count {
            let nlen = r.u64()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| Error::format(path, e.to_string()))?;
            let shape = [r.u64()? as usize, r.u64()? as usize, r.u64()? as usize, r.u64()? as usize];
            let id = net
                .params
                .id(&name)
                .ok_or_else(|| Error::format(path, format!("unknown parameter {name}")))?;
            if net.params.get(id).shape() != shape {
                return Err(Error::format(path, format!("shape mismatch for {name}")));
            }
            let len: usize = shape.iter().product();
            let bytes = r.take(len * 8)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            *net.params.get_mut(id) = Tensor::from_vec(shape, data);
        }
        Ok((net, header["meta"].clone()))
    }
}

const CHECKPOINT_MAGIC: &[u8] = b"UNSCTCK1";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Scalar parameter count of the network built from `cfg`.
pub fn count_parameters(cfg: &NetworkConfig) -> Result<usize> {
    Ok(Network::new(cfg.clone(), 0)?.params.count())
}
