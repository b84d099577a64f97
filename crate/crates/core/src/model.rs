//! EPC-Net (ProxyConv stack + G-VLAD) and the two-module max-pool EPC-Net-L,
//! with analytic parameter and FLOP accounting and the checkpoint format.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{build_adjacency_with, proxy_stack, AdjacencyOptions, PointCloud, ProxyConvParams};
use crate::heads::{g_vlad_forward, gfc_param_count, maxpool_head, GVladParams, GatingParams, GfcParams, GlobalDescriptor, VladParams};
use crate::nn::{Affine, BatchNorm, BnUpdate, Forward, Mode, LEAKY_SLOPE};
use crate::tensor::io::{expect_magic, read_u32};
use crate::tensor::{read_tensor, write_tensor, Parameter, Scalar, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EPCM";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    GVlad,
    MaxPool,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::GVlad => "g_vlad",
            HeadKind::MaxPool => "maxpool",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g_vlad" | "gvlad" => Ok(HeadKind::GVlad),
            "maxpool" | "max_pool" => Ok(HeadKind::MaxPool),
            other => Err(Error::invalid(format!("unknown head `{other}` (expected g_vlad or maxpool)"))),
        }
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpcNetConfig {
    pub module_count: usize,
    pub neighbor_count: usize,
    pub width: usize,
    pub mlp_width: usize,
    pub clusters: usize,
    pub output_dim: usize,
    pub groups: usize,
    pub head: HeadKind,
    /// Context gating after the grouped FC (G-VLAD only).
    pub gating: bool,
    /// Batch norm on the grouped FC output (G-VLAD only).
    pub head_bn: bool,
    pub intra_norm: bool,
    pub include_self: bool,
}

impl Default for EpcNetConfig {
    fn default() -> Self {
        EpcNetConfig::epcnet()
    }
}

impl EpcNetConfig {
    pub fn epcnet() -> Self {
        EpcNetConfig {
            module_count: 4,
            neighbor_count: 20,
            width: 64,
            mlp_width: 1024,
            clusters: 64,
            output_dim: 256,
            groups: 4,
            head: HeadKind::GVlad,
            gating: true,
            head_bn: true,
            intra_norm: true,
            include_self: false,
        }
    }

    pub fn epcnet_l() -> Self {
        EpcNetConfig {
            module_count: 2,
            head: HeadKind::MaxPool,
            ..EpcNetConfig::epcnet()
        }
    }

    /// Laptop-scale variant: k = 8 and every width halved.
    pub fn desk(head: HeadKind) -> Self {
        let base = match head {
            HeadKind::GVlad => EpcNetConfig::epcnet(),
            HeadKind::MaxPool => EpcNetConfig::epcnet_l(),
        };
        EpcNetConfig {
            neighbor_count: 8,
            width: 32,
            mlp_width: 512,
            clusters: 32,
            output_dim: 128,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("module_count", self.module_count),
            ("neighbor_count", self.neighbor_count),
            ("width", self.width),
            ("mlp_width", self.mlp_width),
            ("clusters", self.clusters),
            ("output_dim", self.output_dim),
            ("groups", self.groups),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.head == HeadKind::GVlad && (self.clusters * self.mlp_width) % self.groups != 0 {
            return Err(Error::invalid(format!(
                "groups = {} must divide clusters·mlp_width = {}",
                self.groups,
                self.clusters * self.mlp_width
            )));
        }
        Ok(())
    }

    /// Width of the concatenated multi-scale map fed to the MLP.
    pub fn concat_width(&self) -> usize {
        self.width * self.module_count
    }

    /// Smallest cloud the model accepts.
    pub fn min_points(&self) -> usize {
        if self.include_self {
            self.neighbor_count
        } else {
            self.neighbor_count + 1
        }
    }

    /// Dotted `key=value` view used by checkpoints and the command line.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("model.modules", self.module_count.to_string()),
            ("model.k", self.neighbor_count.to_string()),
            ("model.width", self.width.to_string()),
            ("model.mlp_width", self.mlp_width.to_string()),
            ("model.clusters", self.clusters.to_string()),
            ("model.output_dim", self.output_dim.to_string()),
            ("model.groups", self.groups.to_string()),
            ("model.head", self.head.to_string()),
            ("model.gating", self.gating.to_string()),
            ("model.head_bn", self.head_bn.to_string()),
            ("model.intra_norm", self.intra_norm.to_string()),
            ("model.include_self", self.include_self.to_string()),
        ]
    }

    pub const KEYS: [&'static str; 12] = [
        "model.modules",
        "model.k",
        "model.width",
        "model.mlp_width",
        "model.clusters",
        "model.output_dim",
        "model.groups",
        "model.head",
        "model.gating",
        "model.head_bn",
        "model.intra_norm",
        "model.include_self",
    ];

    /// Sets one dotted key. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num(key: &str, v: &str) -> Result<usize> {
            v.parse().map_err(|_| Error::invalid(format!("{key}: expected a non-negative integer, got `{v}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            v.parse().map_err(|_| Error::invalid(format!("{key}: expected true or false, got `{v}`")))
        }
        match key {
            "model.modules" => self.module_count = num(key, value)?,
            "model.k" => self.neighbor_count = num(key, value)?,
            "model.width" => self.width = num(key, value)?,
            "model.mlp_width" => self.mlp_width = num(key, value)?,
            "model.clusters" => self.clusters = num(key, value)?,
            "model.output_dim" => self.output_dim = num(key, value)?,
            "model.groups" => self.groups = num(key, value)?,
            "model.head" => self.head = value.parse()?,
            "model.gating" => self.gating = flag(key, value)?,
            "model.head_bn" => self.head_bn = flag(key, value)?,
            "model.intra_norm" => self.intra_norm = flag(key, value)?,
            "model.include_self" => self.include_self = flag(key, value)?,
            other => return Err(Error::invalid(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut cfg = EpcNetConfig::epcnet();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Header {
                what: "checkpoint config",
                detail: format!("line `{line}` is not key=value"),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head<T> {
    GVlad(GVladParams<T>),
    MaxPool(Affine<T>),
}

/// All learnable state of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: EpcNetConfig,
    pub proxies: Vec<ProxyConvParams<T>>,
    pub mlp: Affine<T>,
    pub mlp_bn: BatchNorm<T>,
    pub head: Head<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Glorot-initialized weights, zero biases, unit batch-norm scale, and
    /// running statistics at mean 0 / variance 1.
    pub fn init(config: &EpcNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut proxies = Vec::with_capacity(config.module_count);
        for i in 0..config.module_count {
            let d_in = if i == 0 { 3 } else { config.width };
            proxies.push(ProxyConvParams::new(&format!("proxy{i}"), d_in, config.width, &mut rng));
        }
        let mlp = Affine::new("mlp", config.concat_width(), config.mlp_width, &mut rng);
        let mlp_bn = BatchNorm::new("mlp.bn", config.mlp_width);
        let head = match config.head {
            HeadKind::GVlad => Head::GVlad(GVladParams {
                vlad: VladParams::new("vlad", config.mlp_width, config.clusters, &mut rng),
                gfc: GfcParams::new(
                    "gfc",
                    config.clusters * config.mlp_width,
                    config.output_dim,
                    config.groups,
                    &mut rng,
                )?,
                out_bn: config.head_bn.then(|| BatchNorm::new("gfc.bn", config.output_dim)),
                gating: config.gating.then(|| GatingParams::new("gating", config.output_dim, &mut rng)),
                intra_norm: config.intra_norm,
                final_norm: true,
            }),
            HeadKind::MaxPool => Head::MaxPool(Affine::new("fc", config.mlp_width, config.output_dim, &mut rng)),
        };
        let mut model = ModelParams {
            config: config.clone(),
            proxies,
            mlp,
            mlp_bn,
            head,
        };
        for bn in model.batch_norms_mut() {
            let c = bn.channels();
            bn.running_mean = Some(vec![T::zero(); c]);
            bn.running_var = Some(vec![T::one(); c]);
        }
        Ok(model)
    }

    /// Every learnable parameter in a fixed order.
    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v: Vec<&Parameter<T>> = self.proxies.iter().flat_map(ProxyConvParams::params).collect();
        v.extend(self.mlp.params());
        v.extend(self.mlp_bn.params());
        match &self.head {
            Head::GVlad(h) => v.extend(h.params()),
            Head::MaxPool(fc) => v.extend(fc.params()),
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<&mut Parameter<T>> = self.proxies.iter_mut().flat_map(ProxyConvParams::params_mut).collect();
        v.extend(self.mlp.params_mut());
        v.extend(self.mlp_bn.params_mut());
        match &mut self.head {
            Head::GVlad(h) => v.extend(h.params_mut()),
            Head::MaxPool(fc) => v.extend(fc.params_mut()),
        }
        v
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm<T>> {
        let mut v: Vec<&BatchNorm<T>> = self.proxies.iter().map(|p| &p.bn).collect();
        v.push(&self.mlp_bn);
        if let Head::GVlad(h) = &self.head {
            v.extend(h.out_bn.iter());
            v.extend(h.gating.iter().map(|g| &g.bn));
        }
        v
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut v: Vec<&mut BatchNorm<T>> = self.proxies.iter_mut().map(|p| &mut p.bn).collect();
        v.push(&mut self.mlp_bn);
        if let Head::GVlad(h) = &mut self.head {
            v.extend(h.batch_norms_mut());
        }
        v
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) -> Result<()> {
        let mut bns: BTreeMap<String, &mut BatchNorm<T>> =
            self.batch_norms_mut().into_iter().map(|bn| (bn.name.clone(), bn)).collect();
        for u in updates {
            let bn = bns
                .get_mut(&u.name)
                .ok_or_else(|| Error::invalid(format!("no batch norm named `{}`", u.name)))?;
            bn.apply_update(u);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::zero_grad);
    }

    /// Same network in another precision (gradients reset).
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let affine = |a: &Affine<T>| Affine {
            weight: a.weight.cast(),
            bias: a.bias.cast(),
        };
        let bn = |b: &BatchNorm<T>| BatchNorm {
            name: b.name.clone(),
            gamma: b.gamma.cast(),
            beta: b.beta.cast(),
            running_mean: b.running_mean.as_ref().map(|v| v.iter().map(|x| U::lit(x.as_f64())).collect()),
            running_var: b.running_var.as_ref().map(|v| v.iter().map(|x| U::lit(x.as_f64())).collect()),
        };
        let head = match &self.head {
            Head::GVlad(h) => Head::GVlad(GVladParams {
                vlad: VladParams {
                    centers: h.vlad.centers.cast(),
                    assign: affine(&h.vlad.assign),
                },
                gfc: GfcParams {
                    weight: h.gfc.weight.cast(),
                    biases: h.gfc.biases.iter().map(Parameter::cast).collect(),
                },
                out_bn: h.out_bn.as_ref().map(bn),
                gating: h.gating.as_ref().map(|g| GatingParams {
                    weight: g.weight.cast(),
                    bn: bn(&g.bn),
                }),
                intra_norm: h.intra_norm,
                final_norm: h.final_norm,
            }),
            Head::MaxPool(fc) => Head::MaxPool(affine(fc)),
        };
        ModelParams {
            config: self.config.clone(),
            proxies: self
                .proxies
                .iter()
                .map(|p| ProxyConvParams {
                    affine: affine(&p.affine),
                    bn: bn(&p.bn),
                })
                .collect(),
            mlp: affine(&self.mlp),
            mlp_bn: bn(&self.mlp_bn),
            head,
        }
    }

    /// Named tensors of the checkpoint: parameters plus running statistics.
    fn named_tensors(&self) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut out = BTreeMap::new();
        for p in self.params() {
            out.insert(p.name.clone(), p.value.clone());
        }
        for bn in self.batch_norms() {
            let (Some(m), Some(v)) = (&bn.running_mean, &bn.running_var) else {
                return Err(Error::UninitializedStatistics(bn.name.clone()));
            };
            out.insert(format!("{}.running_mean", bn.name), Tensor::new(vec![m.len()], m.clone())?);
            out.insert(format!("{}.running_var", bn.name), Tensor::new(vec![v.len()], v.clone())?);
        }
        Ok(out)
    }

    /// Writes the "EPCM" checkpoint: config text block, then every named
    /// tensor in lexicographic name order.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let text = self.config.to_text();
        let tensors = self.named_tensors()?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        Ok(buf)
    }
}

impl ModelParams<f32> {
    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, CHECKPOINT_MAGIC, "checkpoint")?;
        let text = read_string(r, "checkpoint config")?;
        let config = EpcNetConfig::from_text(&text)?;
        let mut model = ModelParams::<f32>::init(&config, 0)?;
        let count = read_u32(r, "checkpoint")? as usize;
        let mut loaded = BTreeMap::new();
        for _ in 0..count {
            let name = read_string(r, "checkpoint entry name")?;
            let t = read_tensor(r)?;
            if loaded.insert(name.clone(), t).is_some() {
                return Err(Error::Header {
                    what: "checkpoint",
                    detail: format!("entry `{name}` appears twice"),
                });
            }
        }
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
            let t = loaded.remove(name).ok_or_else(|| Error::Header {
                what: "checkpoint",
                detail: format!("missing entry `{name}`"),
            })?;
            if t.shape() != shape {
                return Err(Error::shape("read_checkpoint", shape, t.shape()));
            }
            Ok(t)
        };
        for p in model.params_mut() {
            p.value = take(&p.name, &p.value.shape().to_vec())?;
        }
        for bn in model.batch_norms_mut() {
            let c = bn.channels();
            bn.running_mean = Some(take(&format!("{}.running_mean", bn.name), &[c])?.into_data());
            bn.running_var = Some(take(&format!("{}.running_var", bn.name), &[c])?.into_data());
        }
        if let Some(extra) = loaded.keys().next() {
            return Err(Error::Header {
                what: "checkpoint",
                detail: format!("unexpected entry `{extra}`"),
            });
        }
        Ok(model)
    }
}

fn read_string<R: Read>(r: &mut R, what: &'static str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| Error::Truncated {
        what,
        expected: len,
        found: 0,
    })?;
    String::from_utf8(buf).map_err(|e| Error::Header {
        what,
        detail: e.to_string(),
    })
}

/// Variables produced by a batched forward pass.
pub struct ForwardOutput {
    /// `B×O` unit descriptors.
    pub descriptors: Var,
    /// `(B·n)×(width·m)` multi-scale map before the MLP.
    pub multiscale: Var,
    /// `(B·n)×mlp_width` point features entering the head.
    pub point_features: Var,
}

/// Runs a batch of clouds through the network. Each cloud gets its own
/// adjacency, shared by all of its ProxyConv layers.
pub fn forward_batch<T: Scalar>(
    fw: &mut Forward<'_, T>,
    params: &ModelParams<T>,
    clouds: &[&PointCloud],
) -> Result<ForwardOutput> {
    let cfg = &params.config;
    if clouds.is_empty() {
        return Err(Error::invalid("forward pass needs at least one cloud"));
    }
    if let Some(c) = clouds.iter().find(|c| c.len() < cfg.min_points()) {
        return Err(Error::InsufficientPoints {
            n: c.len(),
            k: cfg.neighbor_count,
            required: cfg.min_points(),
        });
    }
    let opts = AdjacencyOptions {
        include_self: cfg.include_self,
    };
    let adjacencies = clouds
        .par_iter()
        .map(|c| build_adjacency_with(c, cfg.neighbor_count, opts).map(Arc::new))
        .collect::<Result<Vec<_>>>()?;
    let mut blocks = Vec::with_capacity(clouds.len());
    let mut segments = Vec::with_capacity(clouds.len());
    let mut coords = Vec::new();
    let mut offset = 0;
    for (c, adj) in clouds.iter().zip(adjacencies) {
        blocks.push((offset, adj));
        segments.push((offset, c.len()));
        coords.extend(c.points().iter().flat_map(|p| p.iter().map(|&v| T::lit(v as f64))));
        offset += c.len();
    }
    let x = fw.tape.constant(Tensor::new(vec![offset, 3], coords)?);
    let layers = proxy_stack(fw, x, &blocks, &params.proxies)?;
    let multiscale = if layers.len() == 1 {
        layers[0]
    } else {
        fw.tape.concat(&layers, 1)?
    };
    fw.record("multiscale", multiscale);
    let h = params.mlp.forward(fw, multiscale)?;
    let h = params.mlp_bn.forward(fw, h)?;
    let point_features = fw.tape.leaky_relu(h, LEAKY_SLOPE);
    fw.record("mlp", point_features);
    let descriptors = match &params.head {
        Head::GVlad(g) => g_vlad_forward(fw, point_features, &segments, g)?,
        Head::MaxPool(fc) => maxpool_head(fw, point_features, &segments, fc)?,
    };
    Ok(ForwardOutput {
        descriptors,
        multiscale,
        point_features,
    })
}

/// Inference-mode descriptors for a batch of clouds.
pub fn describe<T: Scalar>(params: &ModelParams<T>, clouds: &[&PointCloud]) -> Result<Vec<GlobalDescriptor>> {
    let mut tape = Tape::new();
    let mut fw = Forward::new(&mut tape, Mode::Infer);
    let out = forward_batch(&mut fw, params, clouds)?;
    let d = fw.tape.value(out.descriptors);
    if !d.is_finite() {
        return Err(Error::NumericFailure("descriptor contains NaN or infinity".into()));
    }
    Ok(GlobalDescriptor::from_rows(d))
}

fn expect_head<T>(params: &ModelParams<T>, head: HeadKind) -> Result<()> {
    if params.config.head != head {
        return Err(Error::invalid(format!(
            "model has a {} head, expected {head}",
            params.config.head
        )));
    }
    Ok(())
}

/// Descriptor of one cloud through EPC-Net (G-VLAD head).
pub fn epcnet_forward<T: Scalar>(cloud: &PointCloud, params: &ModelParams<T>) -> Result<GlobalDescriptor> {
    expect_head(params, HeadKind::GVlad)?;
    Ok(describe(params, &[cloud])?.remove(0))
}

/// Descriptor of one cloud through EPC-Net-L (max-pool head).
pub fn epcnetl_forward<T: Scalar>(cloud: &PointCloud, params: &ModelParams<T>) -> Result<GlobalDescriptor> {
    expect_head(params, HeadKind::MaxPool)?;
    Ok(describe(params, &[cloud])?.remove(0))
}

/// Cost summary under the MAC = 2 FLOP convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub parameter_count: u64,
    pub flop_count: u64,
    pub activation_elements: u64,
}

/// Exact number of learnable elements.
pub fn count_params<T: Scalar>(params: &ModelParams<T>) -> u64 {
    params.params().iter().map(|p| p.numel() as u64).sum()
}

/// Parameter count implied by a config, without allocating the model.
pub fn config_param_count(cfg: &EpcNetConfig) -> Result<u64> {
    cfg.validate()?;
    let (w, c, m) = (cfg.width as u64, cfg.mlp_width as u64, cfg.output_dim as u64);
    let affine = |i: u64, o: u64| i * o + o;
    let mut total = 0;
    for i in 0..cfg.module_count {
        let d_in = if i == 0 { 3 } else { w };
        total += affine(d_in, w) + 2 * w;
    }
    total += affine(w * cfg.module_count as u64, c) + 2 * c;
    total += match cfg.head {
        HeadKind::GVlad => {
            let k = cfg.clusters as u64;
            let mut head = k * c + affine(c, k) + gfc_param_count(k, c, m, cfg.groups as u64)?;
            if cfg.head_bn {
                head += 2 * m;
            }
            if cfg.gating {
                head += m * m + 2 * m;
            }
            head
        }
        HeadKind::MaxPool => affine(c, m),
    };
    Ok(total)
}

/// Analytic per-cloud cost. Matrix products count 2 FLOPs per
/// multiply-accumulate; biases, normalizations, activations and other
/// elementwise steps count 1 FLOP per element. The adjacency build counts 8
/// FLOPs per ordered point pair (3 differences, 3 squares, 2 additions).
pub fn count_flops(cfg: &EpcNetConfig, n: u64) -> Result<CostReport> {
    cfg.validate()?;
    let k = cfg.neighbor_count as u64;
    let w = cfg.width as u64;
    let c = cfg.mlp_width as u64;
    let o = cfg.output_dim as u64;
    let mut flops = 8 * n * n;
    let mut acts = 0u64;
    for i in 0..cfg.module_count {
        let d_in = if i == 0 { 3 } else { w };
        // proxy mean (k adds + 1 scale), offset, affine + bias, bn, activation
        flops += n * d_in * (k + 1) + n * d_in + 2 * n * d_in * w + 3 * n * w;
        acts += 2 * n * d_in + n * w;
        if d_in == w {
            flops += n * w;
            acts += n * w;
        }
    }
    let cat = w * cfg.module_count as u64;
    flops += 2 * n * cat * c + 3 * n * c;
    acts += n * cat + n * c;
    match cfg.head {
        HeadKind::GVlad => {
            let kk = cfg.clusters as u64;
            let g = cfg.groups as u64;
            // scores + bias, softmax (1/elem), AᵀF, cluster mass, C scaling, subtraction
            flops += 2 * n * c * kk + 2 * n * kk + 2 * n * kk * c + n * kk + 2 * kk * c;
            acts += n * kk + kk * c;
            if cfg.intra_norm {
                flops += kk * c;
            }
            flops += 2 * kk * c * o + g * o + (g - 1) * o;
            acts += o;
            if cfg.head_bn {
                flops += o;
            }
            if cfg.gating {
                flops += 2 * o * o + 3 * o;
                acts += o;
            }
            flops += o;
        }
        HeadKind::MaxPool => {
            flops += n * c + 2 * c * o + o + o;
            acts += c + o;
        }
    }
    Ok(CostReport {
        parameter_count: config_param_count(cfg)?,
        flop_count: flops,
        activation_elements: acts,
    })
}
