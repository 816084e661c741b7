//! Vanilla Vision Transformer with learnable absolute position embedding,
//! optional relative position bias and LayerScale, stochastic drop path, and
//! a classification head reading the average-pooled backbone output through
//! a fresh LayerNorm and a fully-connected layer.
//!
//! Every trainable parameter carries a layer index: 0 for the patch embedding
//! and position table, 1..=depth for the blocks bottom to top, depth for the
//! backbone's final norm, depth+1 for the head. The optimizer groups by these
//! tags.
//!
//! There is no class token; the head consumes the mean over all output
//! tokens. Initialization draws an independent seeded stream per parameter
//! name, so enabling RPE (zero-initialized table) or LayerScale (unit
//! factors) leaves every other parameter — and therefore the initial logits —
//! bit-identical to the vanilla model.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::optim::ParamMeta;
use crate::rng::{derive_seed, rng_for, Stream};
use crate::tensor::{Scalar, Tensor};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PeKind {
    #[default]
    LearnableAbsolute,
}

#[derive(Debug, Clone)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub use_rpe: bool,
    pub use_layerscale: bool,
    pub drop_path_rate: f64,
    pub pe_kind: PeKind,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4.0,
            num_classes: 1000,
            use_rpe: false,
            use_layerscale: false,
            drop_path_rate: 0.0,
            pe_kind: PeKind::LearnableAbsolute,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(ModelError::InvalidConfig(
                "drop_path_rate must be in [0, 1)".into(),
            ));
        }
        if self.depth == 0 || self.num_classes == 0 || self.mlp_ratio <= 0.0 {
            return Err(ModelError::InvalidConfig(
                "depth, num_classes and mlp_ratio must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("expected images shaped (batch, {1}, {0}, {0}), got {2:?}")]
    BadImageShape(usize, usize, Vec<usize>),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("parameter '{name}' has shape {actual:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub layer_index: usize,
    pub value: Tensor<T>,
}

#[derive(Clone)]
pub struct Model<T: Scalar = f32> {
    pub config: ViTConfig,
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

/// One recorded forward pass: graph plus handles for loss wiring and
/// gradient extraction.
pub struct ForwardRun<T: Scalar> {
    pub graph: Graph<T>,
    pub logits: NodeId,
    /// Token features after the backbone's final norm, before pooling.
    pub features: NodeId,
    /// Leaf ids aligned with `Model::params()` order.
    pub param_nodes: Vec<NodeId>,
    pub image_node: NodeId,
}

enum Init {
    TruncNormal(f64),
    Zeros,
    Ones,
}

impl<T: Scalar> Model<T> {
    /// Deterministic build: each parameter draws from a stream keyed by
    /// (seed, parameter name), so the same (config, seed) is bit-identical
    /// and optional components do not shift anyone else's draws.
    pub fn build(config: ViTConfig, init_seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.dim;
        let hidden = config.hidden_dim();
        let patch_in = CHANNELS * config.patch_size * config.patch_size;
        let tokens = config.tokens();
        let g2 = 2 * config.grid() - 1;

        let mut params: Vec<Param<T>> = Vec::new();
        let mut add = |name: String, layer: usize, shape: &[usize], init: Init| {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Zeros => vec![T::ZERO; n],
                Init::Ones => vec![T::ONE; n],
                Init::TruncNormal(std) => {
                    let mut rng = rng_for(Stream::Init, &[init_seed, name_key(&name)]);
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..n)
                        .map(|_| {
                            // resample outside two standard deviations
                            loop {
                                let v: f64 = normal.sample(&mut rng);
                                if v.abs() <= 2.0 * std {
                                    return T::from_f64(v);
                                }
                            }
                        })
                        .collect()
                }
            };
            params.push(Param {
                name,
                layer_index: layer,
                value: Tensor::new(shape, data),
            });
        };

        add("patch_embed.weight".into(), 0, &[patch_in, d], Init::TruncNormal(0.02));
        add("patch_embed.bias".into(), 0, &[d], Init::Zeros);
        add("pos_table".into(), 0, &[tokens, d], Init::TruncNormal(0.02));
        for b in 0..config.depth {
            let l = b + 1;
            let p = |s: &str| format!("blocks.{b}.{s}");
            add(p("norm1.gamma"), l, &[d], Init::Ones);
            add(p("norm1.beta"), l, &[d], Init::Zeros);
            for proj in ["q", "k", "v"] {
                add(p(&format!("attn.{proj}.weight")), l, &[d, d], Init::TruncNormal(0.02));
                add(p(&format!("attn.{proj}.bias")), l, &[d], Init::Zeros);
            }
            add(p("attn.proj.weight"), l, &[d, d], Init::TruncNormal(0.02));
            add(p("attn.proj.bias"), l, &[d], Init::Zeros);
            if config.use_rpe {
                add(p("attn.rpe_table"), l, &[g2 * g2, config.heads], Init::Zeros);
            }
            add(p("norm2.gamma"), l, &[d], Init::Ones);
            add(p("norm2.beta"), l, &[d], Init::Zeros);
            add(p("mlp.fc1.weight"), l, &[d, hidden], Init::TruncNormal(0.02));
            add(p("mlp.fc1.bias"), l, &[hidden], Init::Zeros);
            add(p("mlp.fc2.weight"), l, &[hidden, d], Init::TruncNormal(0.02));
            add(p("mlp.fc2.bias"), l, &[d], Init::Zeros);
            if config.use_layerscale {
                add(p("ls1"), l, &[d], Init::Ones);
                add(p("ls2"), l, &[d], Init::Ones);
            }
        }
        add("norm.gamma".into(), config.depth, &[d], Init::Ones);
        add("norm.beta".into(), config.depth, &[d], Init::Zeros);
        add("head.norm.gamma".into(), config.depth + 1, &[d], Init::Ones);
        add("head.norm.beta".into(), config.depth + 1, &[d], Init::Zeros);
        // near-zero head keeps early fine-tuning close to the pooled feature
        add("head.fc.weight".into(), config.depth + 1, &[d, config.num_classes], Init::TruncNormal(0.01));
        add("head.fc.bias".into(), config.depth + 1, &[config.num_classes], Init::Zeros);

        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(Model {
            config,
            params,
            index,
        })
    }

    /// Rebuild from named tensors (archive load); every expected parameter
    /// must be present with the right shape.
    pub fn from_named(
        config: ViTConfig,
        mut entries: HashMap<String, Tensor<T>>,
    ) -> Result<Self, ModelError> {
        let template = Model::<T>::build(config, 0)?;
        let mut params = Vec::with_capacity(template.params.len());
        for p in &template.params {
            let value = entries
                .remove(&p.name)
                .ok_or_else(|| ModelError::UnknownParam(p.name.clone()))?;
            if value.shape() != p.value.shape() {
                return Err(ModelError::ParamShape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    actual: value.shape().to_vec(),
                });
            }
            params.push(Param {
                name: p.name.clone(),
                layer_index: p.layer_index,
                value,
            });
        }
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(Model {
            config: template.config,
            params,
            index,
        })
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].value)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, ModelError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i].value),
            None => Err(ModelError::UnknownParam(name.to_string())),
        }
    }

    pub fn param_values_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params.iter_mut().map(|p| &mut p.value).collect()
    }

    pub fn metas(&self) -> Vec<ParamMeta> {
        self.params
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                layer_index: p.layer_index,
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    layer_index: p.layer_index,
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Record the full forward pass into a fresh graph.
    ///
    /// `trainable` marks which parameters (by position) get gradient slots;
    /// `None` records a pure inference graph. Train-mode stochasticity (drop
    /// path) derives entirely from `step_seed`.
    pub fn forward_run(
        &self,
        images: &Tensor<T>,
        mode: Mode,
        step_seed: u64,
        trainable: Option<&[bool]>,
    ) -> Result<ForwardRun<T>, ModelError> {
        let c = &self.config;
        let s = c.image_size;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != CHANNELS || shape[2] != s || shape[3] != s {
            return Err(ModelError::BadImageShape(s, CHANNELS, shape.to_vec()));
        }
        let batch = shape[0];
        let (p, grid, n, d, heads, dh) = (
            c.patch_size,
            c.grid(),
            c.tokens(),
            c.dim,
            c.heads,
            c.head_dim(),
        );

        let mut graph = Graph::new();
        let image_node = graph.input("images", images.clone());
        let mut param_nodes = Vec::with_capacity(self.params.len());
        for (i, param) in self.params.iter().enumerate() {
            let mut t = param.value.clone();
            t.requires_grad = trainable.map_or(false, |m| m[i]);
            param_nodes.push(graph.input(&param.name, t));
        }
        let g = &mut graph;
        let node = |name: &str| param_nodes[self.index[name]];

        // patchify: (B,C,S,S) -> (B, N, C*P*P), channel-major within a patch
        let x = g.reshape(image_node, &[batch, CHANNELS, grid, p, grid, p]);
        let x = g.permute(x, &[0, 2, 4, 1, 3, 5]);
        let x = g.reshape(x, &[batch, n, CHANNELS * p * p]);
        let x = g.matmul(x, node("patch_embed.weight"));
        let x = g.add_bcast(x, node("patch_embed.bias"));
        let mut x = g.add_bcast(x, node("pos_table"));

        let train = mode == Mode::Train;
        let rpe_indices = c.use_rpe.then(|| rpe_index_table(grid));

        for b in 0..c.depth {
            let pname = |s: &str| format!("blocks.{b}.{s}");

            // attention branch
            let h = g.layer_norm(x);
            let h = g.mul_bcast_last(h, node(&pname("norm1.gamma")));
            let h = g.add_bcast(h, node(&pname("norm1.beta")));
            let split = |g: &mut Graph<T>, v: NodeId| {
                let v = g.reshape(v, &[batch, n, heads, dh]);
                g.permute(v, &[0, 2, 1, 3])
            };
            let q = g.matmul(h, node(&pname("attn.q.weight")));
            let q = g.add_bcast(q, node(&pname("attn.q.bias")));
            let q = split(g, q);
            let k = g.matmul(h, node(&pname("attn.k.weight")));
            let k = g.add_bcast(k, node(&pname("attn.k.bias")));
            let k = split(g, k);
            let v = g.matmul(h, node(&pname("attn.v.weight")));
            let v = g.add_bcast(v, node(&pname("attn.v.bias")));
            let v = split(g, v);

            let kt = g.permute(k, &[0, 1, 3, 2]);
            let scores = g.matmul(q, kt);
            let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            if let Some(idx) = &rpe_indices {
                let table = g.gather_rows(node(&pname("attn.rpe_table")), idx);
                let table = g.reshape(table, &[n, n, heads]);
                let bias = g.permute(table, &[2, 0, 1]); // (H, N, N)
                scores = g.add_bcast(scores, bias);
            }
            let attn = g.softmax(scores);
            let ctx = g.matmul(attn, v);
            let ctx = g.permute(ctx, &[0, 2, 1, 3]);
            let ctx = g.reshape(ctx, &[batch, n, d]);
            let ctx = g.matmul(ctx, node(&pname("attn.proj.weight")));
            let mut branch = g.add_bcast(ctx, node(&pname("attn.proj.bias")));
            if c.use_layerscale {
                branch = g.mul_bcast_last(branch, node(&pname("ls1")));
            }
            let mut rng = rng_for(Stream::DropPath, &[step_seed, b as u64, 0]);
            branch = drop_path(g, branch, c.drop_path_rate, train, &mut rng);
            x = g.add(x, branch);

            // MLP branch
            let h = g.layer_norm(x);
            let h = g.mul_bcast_last(h, node(&pname("norm2.gamma")));
            let h = g.add_bcast(h, node(&pname("norm2.beta")));
            let h = g.matmul(h, node(&pname("mlp.fc1.weight")));
            let h = g.add_bcast(h, node(&pname("mlp.fc1.bias")));
            let h = g.gelu(h);
            let h = g.matmul(h, node(&pname("mlp.fc2.weight")));
            let mut branch = g.add_bcast(h, node(&pname("mlp.fc2.bias")));
            if c.use_layerscale {
                branch = g.mul_bcast_last(branch, node(&pname("ls2")));
            }
            let mut rng = rng_for(Stream::DropPath, &[step_seed, b as u64, 1]);
            branch = drop_path(g, branch, c.drop_path_rate, train, &mut rng);
            x = g.add(x, branch);
        }

        // backbone final norm, kept beneath the new head norm
        let f = g.layer_norm(x);
        let f = g.mul_bcast_last(f, node("norm.gamma"));
        let features = g.add_bcast(f, node("norm.beta"));

        let pooled = g.mean_tokens(features);
        let hn = g.layer_norm(pooled);
        let hn = g.mul_bcast_last(hn, node("head.norm.gamma"));
        let hn = g.add_bcast(hn, node("head.norm.beta"));
        let logits = g.matmul(hn, node("head.fc.weight"));
        let logits = g.add_bcast(logits, node("head.fc.bias"));

        Ok(ForwardRun {
            graph,
            logits,
            features,
            param_nodes,
            image_node,
        })
    }

    /// Inference-only forward; returns the logits tensor.
    pub fn forward(
        &self,
        images: &Tensor<T>,
        mode: Mode,
        step_seed: u64,
    ) -> Result<Tensor<T>, ModelError> {
        let run = self.forward_run(images, mode, step_seed, None)?;
        Ok(run.graph.value(run.logits).clone())
    }

    /// Pool + head over externally supplied token features (B, N, D).
    pub fn classify_tokens(&self, tokens: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let t = g.leaf(tokens.clone());
        let pooled = g.mean_tokens(t);
        let hn = g.layer_norm(pooled);
        let gamma = g.leaf(self.param("head.norm.gamma").unwrap().clone());
        let beta = g.leaf(self.param("head.norm.beta").unwrap().clone());
        let w = g.leaf(self.param("head.fc.weight").unwrap().clone());
        let bias = g.leaf(self.param("head.fc.bias").unwrap().clone());
        let hn = g.mul_bcast_last(hn, gamma);
        let hn = g.add_bcast(hn, beta);
        let logits = g.matmul(hn, w);
        let logits = g.add_bcast(logits, bias);
        g.value(logits).clone()
    }
}

/// Per-sample stochastic depth: keep the branch with probability 1-rate and
/// rescale by 1/(1-rate); identity in eval mode or at rate 0.
pub fn drop_path<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    rate: f64,
    train: bool,
    rng: &mut impl Rng,
) -> NodeId {
    assert!((0.0..1.0).contains(&rate), "drop path rate must be in [0, 1)");
    if !train || rate == 0.0 {
        return x;
    }
    let batch = g.value(x).shape()[0];
    let keep = 1.0 - rate;
    let inv = T::from_f64(1.0 / keep);
    let mask: Vec<T> = (0..batch)
        .map(|_| {
            if rng.gen::<f64>() < keep {
                inv
            } else {
                T::ZERO
            }
        })
        .collect();
    let m = g.leaf(Tensor::new(&[batch], mask));
    g.mul_bcast_sample(x, m)
}

/// Relative-offset index per (query, key) token pair on a grid x grid layout,
/// into a (2*grid-1)^2-row bias table.
fn rpe_index_table(grid: usize) -> Vec<usize> {
    let span = 2 * grid - 1;
    let n = grid * grid;
    let mut idx = Vec::with_capacity(n * n);
    for qi in 0..n {
        let (qr, qc) = (qi / grid, qi % grid);
        for ki in 0..n {
            let (kr, kc) = (ki / grid, ki % grid);
            let dr = qr + grid - 1 - kr;
            let dc = qc + grid - 1 - kc;
            idx.push(dr * span + dc);
        }
    }
    idx
}

fn name_key(name: &str) -> u64 {
    derive_seed(&[name.bytes().fold(0u64, |acc, b| {
        acc.wrapping_mul(131).wrapping_add(b as u64)
    })])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ViTConfig {
        ViTConfig {
            image_size: 16,
            patch_size: 4,
            dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4.0,
            num_classes: 10,
            ..ViTConfig::default()
        }
    }

    fn rand_images(batch: usize, size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = rng_for(Stream::Synth, &[seed]);
        let n = batch * CHANNELS * size * size;
        Tensor::new(
            &[batch, CHANNELS, size, size],
            (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
    }

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut c = tiny_config();
        c.patch_size = 5;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.drop_path_rate = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::<f32>::build(tiny_config(), 7).unwrap();
        let b = Model::<f32>::build(tiny_config(), 7).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value.data(), pb.value.data(), "{}", pa.name);
        }
        let c = Model::<f32>::build(tiny_config(), 8).unwrap();
        assert_ne!(
            a.param("patch_embed.weight").unwrap().data(),
            c.param("patch_embed.weight").unwrap().data()
        );
    }

    #[test]
    fn rpe_table_present_and_zero() {
        let mut cfg = tiny_config();
        cfg.use_rpe = true;
        let m = Model::<f32>::build(cfg, 0).unwrap();
        let t = m.param("blocks.0.attn.rpe_table").unwrap();
        assert_eq!(t.shape(), &[7 * 7, 4]);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layerscale_init_ones() {
        let mut cfg = tiny_config();
        cfg.use_layerscale = true;
        let m = Model::<f32>::build(cfg, 0).unwrap();
        assert!(m
            .param("blocks.1.ls1")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn rpe_and_layerscale_at_init_match_vanilla_bitwise() {
        let images = rand_images(2, 16, 3);
        let vanilla = Model::<f32>::build(tiny_config(), 5).unwrap();
        let mut cfg = tiny_config();
        cfg.use_rpe = true;
        cfg.use_layerscale = true;
        let extended = Model::<f32>::build(cfg, 5).unwrap();
        let a = vanilla.forward(&images, Mode::Eval, 0).unwrap();
        let b = extended.forward(&images, Mode::Eval, 0).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_drop_path_makes_train_equal_eval() {
        let images = rand_images(2, 16, 11);
        let m = Model::<f32>::build(tiny_config(), 5).unwrap();
        let a = m.forward(&images, Mode::Train, 123).unwrap();
        let b = m.forward(&images, Mode::Eval, 456).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_image_with_zeroed_head_fc_gives_constant_logits() {
        let mut m = Model::<f32>::build(tiny_config(), 5).unwrap();
        let w = m.param_mut("head.fc.weight").unwrap();
        w.data_mut().fill(0.0);
        let images = Tensor::zeros(&[2, CHANNELS, 16, 16]);
        let logits = m.forward(&images, Mode::Eval, 0).unwrap();
        let first = logits.data()[0];
        for &v in logits.data() {
            assert_eq!(v, first);
        }
    }

    #[test]
    fn mean_pooled_head_ignores_token_redistribution() {
        let images = rand_images(2, 16, 9);
        let m = Model::<f32>::build(tiny_config(), 5).unwrap();
        let run = m.forward_run(&images, Mode::Eval, 0, None).unwrap();
        let feats = run.graph.value(run.features).clone();
        let logits = run.graph.value(run.logits).clone();

        // replace every token with the per-sample mean feature
        let (b, n, d) = (feats.shape()[0], feats.shape()[1], feats.shape()[2]);
        let mut flat = vec![0.0f32; b * n * d];
        for bi in 0..b {
            let mut mean = vec![0.0f32; d];
            for t in 0..n {
                for j in 0..d {
                    mean[j] += feats.data()[bi * n * d + t * d + j];
                }
            }
            for v in mean.iter_mut() {
                *v /= n as f32;
            }
            for t in 0..n {
                flat[bi * n * d + t * d..bi * n * d + (t + 1) * d].copy_from_slice(&mean);
            }
        }
        let replaced = Tensor::new(&[b, n, d], flat);
        let again = m.classify_tokens(&replaced);
        for (x, y) in logits.data().iter().zip(again.data()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn wrong_spatial_size_is_rejected() {
        let m = Model::<f32>::build(tiny_config(), 5).unwrap();
        let images = Tensor::zeros(&[1, CHANNELS, 8, 8]);
        assert!(matches!(
            m.forward(&images, Mode::Eval, 0),
            Err(ModelError::BadImageShape(..))
        ));
    }

    #[test]
    fn drop_path_identity_cases() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(&[2, 3], vec![1.0; 6]));
        let mut rng = rng_for(Stream::DropPath, &[0]);
        assert_eq!(drop_path(&mut g, x, 0.0, true, &mut rng), x);
        assert_eq!(drop_path(&mut g, x, 0.7, false, &mut rng), x);
    }

    #[test]
    fn drop_path_preserves_expectation() {
        // rate 0.5 over 1e5 samples: mean within 2% of the input
        let samples = 100_000;
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(&[samples, 1], vec![1.0; samples]));
        let mut rng = rng_for(Stream::DropPath, &[42]);
        let y = drop_path(&mut g, x, 0.5, true, &mut rng);
        let mean: f64 = g.value(y).data().iter().map(|&v| v as f64).sum::<f64>() / samples as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn layer_tags_partition_all_parameters() {
        let cfg = tiny_config();
        let m = Model::<f32>::build(cfg.clone(), 0).unwrap();
        let mut per_layer = vec![0usize; cfg.depth + 2];
        for p in m.params() {
            per_layer[p.layer_index] += p.value.numel();
        }
        assert_eq!(per_layer.iter().sum::<usize>(), m.num_params());
        assert!(per_layer.iter().all(|&c| c > 0));
    }

    #[test]
    fn rpe_offsets_are_symmetric_for_transposed_pairs() {
        let idx = rpe_index_table(3);
        let n = 9;
        let span = 5;
        // the zero offset sits on the diagonal
        let center = (3 - 1) * span + (3 - 1);
        for q in 0..n {
            assert_eq!(idx[q * n + q], center);
        }
    }
}
