//! EAPCR and the models it is compared against.
//!
//! | arch       | input            | body                                                   |
//! |------------|------------------|--------------------------------------------------------|
//! | `eapcr`    | category indices | `A = tanh(EEᵀ)`, conv stack on `A` and on `MAMᵀ`, head |
//! | `eacr`     | category indices | as above without the permuted stack                    |
//! | `mlp`      | scaled indices   | residual branch only                                   |
//! | `plain_cnn`| scaled indices   | conv stack on the `side x side` image, dense head      |
//!
//! EAPCR and EACR add a residual branch (row means of `E` through a small
//! MLP) to the head logits.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::{relative_error, GradCheckReport, FD_STEP};
use crate::autodiff::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::encoding::{FeatureDictionary, Target, TaskKind};
use crate::error::{dim_err, Error, Result};
use crate::permutation::PermutationSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Eapcr,
    Eacr,
    Mlp,
    PlainCnn,
}

/// How `A` is formed. Both give the same values and gradients; `Gram`
/// computes `tanh(T Tᵀ)` once on the `V x V` vocabulary table and gathers
/// from it, which is far cheaper when `V` is much smaller than `N`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionPath {
    #[default]
    Gram,
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PermutationKind {
    Designed,
    Random { seed: u64 },
    Identity,
}

impl PermutationKind {
    pub fn build(self, n: usize) -> Result<PermutationSpec> {
        match self {
            PermutationKind::Designed => PermutationSpec::designed(n),
            PermutationKind::Random { seed } => PermutationSpec::random(n, seed),
            PermutationKind::Identity => PermutationSpec::identity(n),
        }
    }
}

fn yes() -> bool {
    true
}

/// Convolution followed by a rectifier and, when `pool` is set, 2×2 max pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub kernel: usize,
    pub channels: usize,
    #[serde(default = "yes")]
    pub pool: bool,
}

impl ConvLayer {
    pub const fn new(kernel: usize, channels: usize) -> Self {
        Self {
            kernel,
            channels,
            pool: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub n_features: usize,
    /// Embedding rows `V`; for `mlp`/`plain_cnn` the size of the index space.
    pub vocab_size: usize,
    #[serde(default)]
    pub embed_size: usize,
    #[serde(default)]
    pub conv: Vec<ConvLayer>,
    #[serde(default)]
    pub adaptive_out: usize,
    /// Hidden width of the residual MLP (or the dense head of `plain_cnn`).
    pub hidden: usize,
    /// Classes, or 1 for regression.
    pub outputs: usize,
    pub dropout: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<PermutationKind>,
    #[serde(default)]
    pub attention: AttentionPath,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_side: Option<usize>,
}

/// Channel plan of the MNIST stacks: four 4×4 convolutions.
pub const MNIST_STACK: [ConvLayer; 4] = [
    ConvLayer::new(4, 4),
    ConvLayer::new(4, 8),
    ConvLayer::new(4, 16),
    ConvLayer::new(4, 16),
];

/// Residual widths of EAPCR-1/2/3 and EACR-1/2/3.
pub const EAPCR_HIDDEN: [usize; 3] = [26, 64, 89];

/// Hidden widths of MLP-1 through MLP-9.
pub const MLP_HIDDEN: [usize; 9] = [26, 40, 52, 64, 80, 90, 105, 115, 128];

impl ModelConfig {
    /// Small EAPCR (`N = 9`, `E_s = 4`, two classes) for end-to-end gradient checks.
    pub fn tiny_eapcr() -> Self {
        Self {
            arch: Architecture::Eapcr,
            n_features: 9,
            vocab_size: 4,
            embed_size: 4,
            conv: vec![ConvLayer::new(3, 2), ConvLayer::new(2, 3)],
            adaptive_out: 2,
            hidden: 5,
            outputs: 2,
            dropout: 0.5,
            permutation: Some(PermutationKind::Designed),
            attention: AttentionPath::Gram,
            image_side: None,
        }
    }

    /// EAPCR-`level` on binarized MNIST (`level` in 1..=3).
    pub fn eapcr_mnist(level: usize) -> Result<Self> {
        let hidden = *EAPCR_HIDDEN
            .get(level.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("EAPCR level {level} not in 1..=3")))?;
        Ok(Self {
            arch: Architecture::Eapcr,
            n_features: 784,
            vocab_size: 2,
            embed_size: 128,
            conv: MNIST_STACK.to_vec(),
            adaptive_out: 3,
            hidden,
            outputs: 10,
            dropout: 0.5,
            permutation: Some(PermutationKind::Designed),
            attention: AttentionPath::Gram,
            image_side: None,
        })
    }

    pub fn eacr_mnist(level: usize) -> Result<Self> {
        Ok(Self {
            arch: Architecture::Eacr,
            permutation: None,
            ..Self::eapcr_mnist(level)?
        })
    }

    /// MLP-`k` (784 → h → 10), `k` in 1..=9.
    pub fn mlp_mnist(k: usize) -> Result<Self> {
        let hidden = *MLP_HIDDEN
            .get(k.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("MLP index {k} not in 1..=9")))?;
        Ok(Self {
            arch: Architecture::Mlp,
            n_features: 784,
            vocab_size: 2,
            embed_size: 0,
            conv: Vec::new(),
            adaptive_out: 0,
            hidden,
            outputs: 10,
            dropout: 0.5,
            permutation: None,
            attention: AttentionPath::Gram,
            image_side: None,
        })
    }

    /// Two 3×3 convolutions (8 and 16 channels) on the 28×28 image, then 784 → 26 → 10.
    pub fn plain_cnn_mnist() -> Self {
        Self {
            arch: Architecture::PlainCnn,
            n_features: 784,
            vocab_size: 2,
            embed_size: 0,
            conv: vec![ConvLayer::new(3, 8), ConvLayer::new(3, 16)],
            adaptive_out: 0,
            hidden: 26,
            outputs: 10,
            dropout: 0.0,
            permutation: None,
            attention: AttentionPath::Gram,
            image_side: Some(28),
        }
    }

    pub fn task(&self) -> TaskKind {
        if self.outputs == 1 {
            TaskKind::Regression
        } else {
            TaskKind::Classification
        }
    }

    fn uses_embedding(&self) -> bool {
        matches!(self.arch, Architecture::Eapcr | Architecture::Eacr)
    }

    fn n_stacks(&self) -> usize {
        match self.arch {
            Architecture::Eapcr => 2,
            Architecture::Eacr | Architecture::PlainCnn => 1,
            Architecture::Mlp => 0,
        }
    }

    /// Spatial side after the conv stack.
    fn stack_side(&self, input_side: usize) -> usize {
        self.conv.iter().fold(input_side, |s, l| if l.pool { s / 2 } else { s })
    }

    fn stack_input_side(&self) -> usize {
        match self.arch {
            Architecture::PlainCnn => self.image_side.unwrap_or(0),
            _ => self.n_features,
        }
    }

    /// Length of one flattened stack output.
    pub fn branch_len(&self) -> usize {
        let ch = self.conv.last().map_or(0, |l| l.channels);
        match self.arch {
            Architecture::Eapcr | Architecture::Eacr => ch * self.adaptive_out * self.adaptive_out,
            Architecture::PlainCnn => {
                let s = self.stack_side(self.stack_input_side());
                ch * s * s
            }
            Architecture::Mlp => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_features == 0 || self.vocab_size == 0 || self.hidden == 0 || self.outputs == 0 {
            return bad("n_features, vocab_size, hidden and outputs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.uses_embedding() && self.embed_size == 0 {
            return bad("embedding models need embed_size >= 1".into());
        }
        match (self.arch, self.permutation) {
            (Architecture::Eapcr, None) => return bad("eapcr needs a permutation".into()),
            (Architecture::Eacr | Architecture::Mlp | Architecture::PlainCnn, Some(_)) => {
                return bad(format!("{:?} takes no permutation", self.arch));
            }
            _ => {}
        }
        if self.arch == Architecture::PlainCnn {
            match self.image_side {
                Some(s) if s * s == self.n_features => {}
                _ => return bad("plain_cnn needs image_side with image_side² = n_features".into()),
            }
        }
        if self.n_stacks() > 0 {
            if self.conv.is_empty() {
                return bad(format!("{:?} needs at least one conv layer", self.arch));
            }
            let mut side = self.stack_input_side();
            for (i, l) in self.conv.iter().enumerate() {
                if l.kernel == 0 || l.channels == 0 {
                    return bad(format!("conv layer {i} has a zero kernel or channel count"));
                }
                if l.kernel > side {
                    return bad(format!(
                        "conv layer {i}: kernel {} exceeds spatial size {side}",
                        l.kernel
                    ));
                }
                if l.pool {
                    if side < 2 {
                        return bad(format!("conv layer {i}: cannot pool a {side}x{side} map"));
                    }
                    side /= 2;
                }
            }
            if self.uses_embedding() && (self.adaptive_out == 0 || self.adaptive_out > side) {
                return bad(format!(
                    "adaptive_out {} must be in 1..={side} (stack output side)",
                    self.adaptive_out
                ));
            }
        }
        Ok(())
    }

    /// Analytic parameter count, layer by layer.
    pub fn param_count(&self) -> usize {
        let dense = |i: usize, o: usize| i * o + o;
        let mut total = 0;
        if self.uses_embedding() {
            total += self.vocab_size * self.embed_size;
        }
        let mut cin = 1;
        let mut stack = 0;
        for l in &self.conv {
            stack += dense(cin * l.kernel * l.kernel, l.channels);
            cin = l.channels;
        }
        total += self.n_stacks() * stack;
        total += match self.arch {
            Architecture::Eapcr | Architecture::Eacr => {
                dense(self.n_stacks() * self.branch_len(), self.outputs)
                    + dense(self.n_features, self.hidden)
                    + dense(self.hidden, self.outputs)
            }
            Architecture::Mlp => dense(self.n_features, self.hidden) + dense(self.hidden, self.outputs),
            Architecture::PlainCnn => dense(self.branch_len(), self.hidden) + dense(self.hidden, self.outputs),
        };
        total
    }
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, Default)]
struct Layout {
    embedding: Option<ParamId>,
    stacks: Vec<Vec<Dense>>,
    head: Option<Dense>,
    hidden: Option<Dense>,
    out: Option<Dense>,
}

/// Zero-mean unit-variance rescaling of a regression target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetNorm {
    pub mean: f64,
    pub std: f64,
}

impl TargetNorm {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Handles to the interesting values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub attention: Option<Var>,
    pub branches: Vec<Var>,
    pub head: Option<Var>,
    pub residual: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
    permutation: Option<PermutationSpec>,
    index_values: Vec<T>,
    target_norm: Option<TargetNorm>,
    updates: u64,
}

fn uniform_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

impl<T: Real> Model<T> {
    /// Fresh parameters: embedding rows `N(0, E_s^-1/2)`, every dense and
    /// conv weight and bias `U(±1/√fan_in)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layout = Layout::default();
        let add_dense =
            |params: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, shape: &[usize], fan_in: usize| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w = params.add(format!("{name}.weight"), uniform_tensor(rng, shape, bound));
                let b = params.add(format!("{name}.bias"), uniform_tensor(rng, &[shape[0]], bound));
                Dense { w, b }
            };

        if config.uses_embedding() {
            // dot products of rows then have unit variance, keeping tanh out of saturation
            let std = (config.embed_size as f64).powf(-0.25);
            let normal = Normal::new(0.0, std).expect("positive std");
            let data = (0..config.vocab_size * config.embed_size)
                .map(|_| T::lit(normal.sample(&mut rng)))
                .collect();
            let t = Tensor::new(&[config.vocab_size, config.embed_size], data)?;
            layout.embedding = Some(params.add("embedding", t));
        }
        for s in 0..config.n_stacks() {
            let mut cin = 1;
            let mut layers = Vec::new();
            for (l, c) in config.conv.iter().enumerate() {
                let shape = [c.channels, cin, c.kernel, c.kernel];
                layers.push(add_dense(
                    &mut params,
                    &mut rng,
                    &format!("stack{s}.conv{l}"),
                    &shape,
                    cin * c.kernel * c.kernel,
                ));
                cin = c.channels;
            }
            layout.stacks.push(layers);
        }
        let hidden_in = match config.arch {
            Architecture::PlainCnn => config.branch_len(),
            _ => config.n_features,
        };
        if config.uses_embedding() {
            let hin = config.n_stacks() * config.branch_len();
            layout.head = Some(add_dense(&mut params, &mut rng, "head", &[config.outputs, hin], hin));
        }
        layout.hidden = Some(add_dense(
            &mut params,
            &mut rng,
            "hidden",
            &[config.hidden, hidden_in],
            hidden_in,
        ));
        layout.out = Some(add_dense(
            &mut params,
            &mut rng,
            "out",
            &[config.outputs, config.hidden],
            config.hidden,
        ));

        let permutation = config.permutation.map(|k| k.build(config.n_features)).transpose()?;
        // binary shared vocabulary by default: index i maps to i / (V - 1)
        let denom = (config.vocab_size.max(2) - 1) as f64;
        let index_values = (0..config.vocab_size).map(|i| T::lit(i as f64 / denom)).collect();
        Ok(Self {
            config,
            params,
            layout,
            permutation,
            index_values,
            target_norm: None,
            updates: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn permutation(&self) -> Option<&PermutationSpec> {
        self.permutation.as_ref()
    }

    pub fn target_norm(&self) -> Option<TargetNorm> {
        self.target_norm
    }

    pub fn set_target_norm(&mut self, norm: Option<TargetNorm>) {
        self.target_norm = norm;
    }

    /// Takes the numeric input of `mlp`/`plain_cnn` from the dictionary's
    /// scaled positions instead of the binary default.
    pub fn set_index_values_from(&mut self, dict: &FeatureDictionary) -> Result<()> {
        if dict.vocab_size() != self.config.vocab_size {
            return Err(dim_err!(
                "dictionary has {} indices, model expects {}",
                dict.vocab_size(),
                self.config.vocab_size
            ));
        }
        let mut values = vec![T::zero(); dict.vocab_size()];
        for f in 0..dict.n_features() {
            for c in dict.categories(f) {
                let i = dict.lookup(f, c).expect("listed category") as usize;
                values[i] = T::lit(dict.scaled(f, i as u32));
            }
            if let Some(u) = dict.unk(f) {
                values[u as usize] = T::lit(dict.scaled(f, u));
            }
        }
        self.index_values = values;
        Ok(())
    }

    /// Optimizer steps applied since initialization.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn record_update(&mut self) {
        self.updates += 1;
    }

    pub fn index_values(&self) -> &[T] {
        &self.index_values
    }

    fn check_indices(&self, indices: &[usize]) -> Result<()> {
        if indices.len() != self.config.n_features {
            return Err(dim_err!(
                "sample has {} features, model expects {}",
                indices.len(),
                self.config.n_features
            ));
        }
        if let Some((pos, &bad)) = indices.iter().enumerate().find(|(_, &i)| i >= self.config.vocab_size) {
            return Err(Error::Index(format!(
                "index {bad} at feature position {pos} is outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn dense(&self, tape: &mut Tape<T>, x: Var, d: &Dense) -> Result<Var> {
        let w = tape.param(&self.params, d.w);
        let b = tape.param(&self.params, d.b);
        tape.dense(x, w, b)
    }

    fn stack(&self, tape: &mut Tape<T>, mut x: Var, layers: &[Dense]) -> Result<Var> {
        for (d, l) in layers.iter().zip(&self.config.conv) {
            let w = tape.param(&self.params, d.w);
            let b = tape.param(&self.params, d.b);
            x = tape.conv2d(x, w, b)?;
            // relu commutes with max pooling, so pool first on the larger map
            if l.pool {
                x = tape.maxpool2d(x)?;
            }
            x = tape.relu(x);
        }
        Ok(x)
    }

    fn mlp_tail<R: Rng>(&self, tape: &mut Tape<T>, x: Var, training: bool, rng: &mut R) -> Result<Var> {
        let h = self.dense(tape, x, self.layout.hidden.as_ref().expect("built"))?;
        let h = tape.relu(h);
        let keep = 1.0 - self.config.dropout;
        let h = tape.dropout(h, self.config.dropout, training, || rng.random_bool(keep))?;
        self.dense(tape, h, self.layout.out.as_ref().expect("built"))
    }

    /// Records one forward pass on `tape`. `rng` only drives dropout.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        indices: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardVars> {
        self.check_indices(indices)?;
        let cfg = &self.config;
        match cfg.arch {
            Architecture::Mlp | Architecture::PlainCnn => {
                let x: Vec<T> = indices.iter().map(|&i| self.index_values[i]).collect();
                let x = tape.input(Tensor::new(&[cfg.n_features], x)?);
                let feats = if cfg.arch == Architecture::PlainCnn {
                    let side = cfg.image_side.expect("validated");
                    let img = tape.reshape(x, &[1, side, side])?;
                    let y = self.stack(tape, img, &self.layout.stacks[0])?;
                    let len = tape.value(y).numel();
                    tape.reshape(y, &[len])?
                } else {
                    x
                };
                let logits = self.mlp_tail(tape, feats, training, rng)?;
                Ok(ForwardVars {
                    logits,
                    attention: None,
                    branches: Vec::new(),
                    head: None,
                    residual: None,
                })
            }
            Architecture::Eapcr | Architecture::Eacr => {
                let n = cfg.n_features;
                let table = tape.param(&self.params, self.layout.embedding.expect("built"));
                let e = tape.embedding(table, indices)?;
                let a = match cfg.attention {
                    AttentionPath::Gram => {
                        let tt = tape.transpose(table)?;
                        let g = tape.matmul(table, tt)?;
                        let g = tape.tanh(g);
                        tape.pair_gather(g, indices)?
                    }
                    AttentionPath::Direct => {
                        let et = tape.transpose(e)?;
                        let g = tape.matmul(e, et)?;
                        tape.tanh(g)
                    }
                };
                let mut branches = Vec::with_capacity(2);
                let mut inputs = vec![a];
                if let Some(p) = &self.permutation {
                    inputs.push(tape.permute_two_sided(a, p.shared_map())?);
                }
                for (x, layers) in inputs.into_iter().zip(&self.layout.stacks) {
                    let img = tape.reshape(x, &[1, n, n])?;
                    let y = self.stack(tape, img, layers)?;
                    let y = tape.adaptive_avgpool2d(y, cfg.adaptive_out)?;
                    let len = tape.value(y).numel();
                    branches.push(tape.reshape(y, &[len])?);
                }
                let joined = if branches.len() == 1 {
                    branches[0]
                } else {
                    tape.concat(&branches)?
                };
                let keep = 1.0 - cfg.dropout;
                let joined = tape.dropout(joined, cfg.dropout, training, || rng.random_bool(keep))?;
                let head = self.dense(tape, joined, self.layout.head.as_ref().expect("built"))?;

                let z = tape.row_mean(e)?;
                let residual = self.mlp_tail(tape, z, training, rng)?;
                let logits = tape.add(head, residual)?;
                Ok(ForwardVars {
                    logits,
                    attention: Some(a),
                    branches,
                    head: Some(head),
                    residual: Some(residual),
                })
            }
        }
    }

    /// Cross entropy for a class, squared error against the standardized
    /// value for regression.
    pub fn loss(&self, tape: &mut Tape<T>, logits: Var, target: Target) -> Result<Var> {
        match (self.config.task(), target) {
            (TaskKind::Classification, Target::Class(c)) => tape.softmax_cross_entropy(logits, c),
            (TaskKind::Regression, Target::Value(v)) => {
                let v = self.target_norm.map_or(v, |n| n.forward(v));
                tape.mse(logits, &[T::lit(v)])
            }
            (task, t) => Err(Error::Config(format!("{task:?} model given target {t:?}"))),
        }
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, indices: &[usize]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fv = self.forward(&mut tape, indices, false, &mut rng)?;
        Ok(tape.value(fv.logits).data().to_vec())
    }

    /// Class id (argmax, lower id on ties) or de-standardized regression value.
    pub fn predict(&self, indices: &[usize]) -> Result<Prediction> {
        let z = self.logits(indices)?;
        Ok(self.interpret(&z))
    }

    pub fn interpret(&self, logits: &[T]) -> Prediction {
        if self.config.task() == TaskKind::Regression {
            let v = logits[0].as_f64();
            Prediction::Value(self.target_norm.map_or(v, |n| n.inverse(v)))
        } else {
            Prediction::Class(argmax(logits))
        }
    }

    /// `tanh(T Tᵀ)` over the vocabulary; `A[i,j]` is entry `(x_i, x_j)`.
    pub fn vocab_attention(&self) -> Option<Vec<T>> {
        let id = self.layout.embedding?;
        let t = self.params.get(id);
        let (v, e) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut g = vec![T::zero(); v * v];
        for i in 0..v {
            for j in 0..v {
                g[i * v + j] = crate::autodiff::kernels::dot(&d[i * e..(i + 1) * e], &d[j * e..(j + 1) * e]).tanh();
            }
        }
        Some(g)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            permutation: self.permutation.clone(),
            index_values: self.index_values.iter().map(|v| U::lit(v.as_f64())).collect(),
            target_norm: self.target_norm,
            updates: self.updates,
        }
    }

    pub fn to_checkpoint(&self, dictionary_hash: &str) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            permutation: self.permutation.clone(),
            index_values: self.index_values.iter().map(|v| v.as_f64()).collect(),
            target_norm: self.target_norm,
            updates: self.updates,
            dictionary_hash: dictionary_hash.to_string(),
            params: self
                .params
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds a model; fails if the stored dictionary hash differs from
    /// `dictionary_hash` (when given) or any tensor does not fit the config.
    pub fn from_checkpoint(ck: &Checkpoint, dictionary_hash: Option<&str>) -> Result<Self> {
        if let Some(h) = dictionary_hash {
            if h != ck.dictionary_hash {
                return Err(Error::Config(format!(
                    "checkpoint was trained with dictionary {} but {h} was supplied",
                    ck.dictionary_hash
                )));
            }
        }
        let mut model = Model::new(ck.config.clone(), 0)?;
        if ck.params.len() != model.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, config needs {}",
                ck.params.len(),
                model.params.len()
            )));
        }
        for (id, nt) in model.params.ids().zip(&ck.params).collect::<Vec<_>>() {
            let t = model.params.get_mut(id);
            if nt.shape != t.shape() {
                return Err(Error::Config(format!(
                    "tensor {} has shape {:?}, config needs {:?}",
                    nt.name,
                    nt.shape,
                    t.shape()
                )));
            }
            *t = Tensor::from_f64(&nt.shape, &nt.data)?;
        }
        if let Some(p) = &ck.permutation {
            if p.len() != ck.config.n_features {
                return Err(dim_err!(
                    "permutation of size {} for {} features",
                    p.len(),
                    ck.config.n_features
                ));
            }
            model.permutation = Some(p.clone());
        }
        if ck.index_values.len() != ck.config.vocab_size {
            return Err(dim_err!(
                "{} index values for vocabulary {}",
                ck.index_values.len(),
                ck.config.vocab_size
            ));
        }
        model.index_values = ck.index_values.iter().map(|&v| T::lit(v)).collect();
        model.target_norm = ck.target_norm;
        model.updates = ck.updates;
        Ok(model)
    }
}

impl Model<f64> {
    fn sample_loss(&self, indices: &[usize], target: Target, dropout_seed: u64) -> Result<f64> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let fv = self.forward(&mut tape, indices, true, &mut rng)?;
        let loss = self.loss(&mut tape, fv.logits, target)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Central finite differences over every parameter (or an evenly
    /// strided subset of at most `max_per_tensor` entries per tensor),
    /// against one backward pass. Dropout runs in training mode with the
    /// same mask for every evaluation.
    pub fn gradient_check(
        &self,
        indices: &[usize],
        target: Target,
        dropout_seed: u64,
        max_per_tensor: Option<usize>,
    ) -> Result<GradCheckReport> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let fv = self.forward(&mut tape, indices, true, &mut rng)?;
        let loss = self.loss(&mut tape, fv.logits, target)?;
        let grads = tape.backward(loss)?;
        let mut store = self.params.clone();
        store.tensors_mut().iter_mut().for_each(Tensor::clear_grad);
        grads.accumulate_into(&tape, &mut store);

        let mut report = GradCheckReport {
            name: format!("{:?} end-to-end", self.config.arch),
            checked: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        let mut probe = self.clone();
        for id in self.params.ids() {
            let n = self.params.get(id).numel();
            let analytic = store
                .get(id)
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; n]);
            let stride = max_per_tensor.map_or(1, |m| n.div_ceil(m.max(1)));
            for e in (0..n).step_by(stride) {
                let orig = self.params.get(id).data()[e];
                probe.params.get_mut(id).data_mut()[e] = orig + FD_STEP;
                let plus = probe.sample_loss(indices, target, dropout_seed)?;
                probe.params.get_mut(id).data_mut()[e] = orig - FD_STEP;
                let minus = probe.sample_loss(indices, target, dropout_seed)?;
                probe.params.get_mut(id).data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                report.checked += 1;
                report.max_abs_error = report.max_abs_error.max((analytic[e] - numeric).abs());
                report.max_rel_error = report.max_rel_error.max(relative_error(analytic[e], numeric));
            }
        }
        Ok(report)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Class(usize),
    Value(f64),
}

/// First index of the maximum.
pub fn argmax<T: Real>(z: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Config, materialized permutation and flat parameters in one JSON blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub permutation: Option<PermutationSpec>,
    pub index_values: Vec<f64>,
    pub target_norm: Option<TargetNorm>,
    #[serde(default)]
    pub updates: u64,
    pub dictionary_hash: String,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}
