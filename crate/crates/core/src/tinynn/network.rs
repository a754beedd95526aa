//! Executable networks built from a [`ModelConfig`].

use crate::error::{Error, Result};
use crate::imagecore::ImageTensor;
use crate::rng::mix64;

use super::config::{LayerSpec, ModelConfig};
use super::init::he_init;
use super::ops::{self, BatchNormCache, ConvGeometry, BN_EPS, BN_MOMENTUM};
use super::scalar::Scalar;
use super::tensor::Tensor4;

/// A named array owned by a network. Buffers (batch-norm running
/// statistics) are stored alongside trainable parameters but never updated
/// by an optimiser.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    pub params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    fn push(&mut self, name: String, shape: Vec<usize>, value: Vec<T>, trainable: bool) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.params.push(Param { name, shape, value, trainable });
        self.params.len() - 1
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

/// Per-parameter gradients, index-aligned with [`ParamStore::params`].
/// Buffers get empty vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub grads: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store
                .params
                .iter()
                .map(|p| if p.trainable { vec![T::zero(); p.value.len()] } else { Vec::new() })
                .collect(),
        }
    }

    fn add(&mut self, index: usize, g: &[T]) {
        for (a, b) in self.grads[index].iter_mut().zip(g) {
            *a += *b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; records a tape for backward.
    Train,
    /// Running statistics; no tape.
    Eval,
}

#[derive(Clone, Debug)]
enum Op {
    Conv { weight: usize, geom: ConvGeometry },
    BatchNorm { gamma: usize, beta: usize, mean: usize, var: usize },
    Relu,
    MaxPool { kernel: usize, stride: usize, pad: usize },
    GlobalAvgPool,
    Linear { weight: usize, bias: usize },
}

#[derive(Clone, Debug)]
enum Block {
    Seq(Vec<Op>),
    Residual { main: Vec<Op>, shortcut: Option<Vec<Op>> },
    Dense { layers: Vec<Vec<Op>> },
}

#[derive(Clone, Debug)]
enum OpCache<T> {
    None,
    Input(Tensor4<T>),
    Output(Tensor4<T>),
    BatchNorm(BatchNormCache<T>),
    MaxPool { argmax: Vec<usize>, in_shape: [usize; 4] },
    Shape([usize; 4]),
}

#[derive(Clone, Debug)]
enum BlockCache<T> {
    Seq(Vec<OpCache<T>>),
    Residual { main: Vec<OpCache<T>>, shortcut: Option<Vec<OpCache<T>>>, out: Tensor4<T> },
    Dense { layers: Vec<Vec<OpCache<T>>>, in_channels: Vec<usize> },
}

/// Everything a training-mode forward pass saves for backward.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    blocks: Vec<BlockCache<T>>,
}

impl<T: Scalar> Tape<T> {
    /// Fingerprint of every non-differentiable choice made in the forward
    /// pass: which ReLU units fired and which max-pool inputs won. Inputs with
    /// equal signatures lie on the same smooth piece of the loss.
    pub fn kink_signature(&self) -> u64 {
        fn signs<T: Scalar>(h: &mut u64, t: &Tensor4<T>) {
            for chunk in t.data.chunks(64) {
                let word = chunk.iter().enumerate().fold(0u64, |w, (i, v)| w | (((*v > T::zero()) as u64) << i));
                *h = mix64(*h ^ word);
            }
        }
        fn ops<T: Scalar>(h: &mut u64, caches: &[OpCache<T>]) {
            for c in caches {
                match c {
                    OpCache::Output(y) => signs(h, y),
                    OpCache::MaxPool { argmax, .. } => {
                        for &a in argmax {
                            *h = mix64(*h ^ a as u64);
                        }
                    }
                    _ => {}
                }
            }
        }
        let mut h = 0u64;
        for block in &self.blocks {
            match block {
                BlockCache::Seq(c) => ops(&mut h, c),
                BlockCache::Residual { main, shortcut, out } => {
                    ops(&mut h, main);
                    if let Some(s) = shortcut {
                        ops(&mut h, s);
                    }
                    signs(&mut h, out);
                }
                BlockCache::Dense { layers, .. } => layers.iter().for_each(|l| ops(&mut h, l)),
            }
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    config: ModelConfig,
    blocks: Vec<Block>,
    store: ParamStore<T>,
}

struct Builder<T> {
    store: ParamStore<T>,
    seed: u64,
}

impl<T: Scalar> Builder<T> {
    fn init_stream(&self) -> u64 {
        mix64(self.seed ^ (self.store.params.len() as u64).wrapping_mul(0xA24B_AED4_963E_E407))
    }

    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, kernel: usize, stride: usize) -> Result<Op> {
        let geom = ConvGeometry::same(in_c, out_c, kernel, stride);
        let fan_in = in_c * kernel * kernel;
        let values = he_init(geom.weight_len(), fan_in, self.init_stream())?;
        let weight = self.store.push(
            format!("{name}.weight"),
            vec![out_c, in_c, kernel, kernel],
            values.into_iter().map(T::from_f64_lossy).collect(),
            true,
        );
        Ok(Op::Conv { weight, geom })
    }

    fn bn(&mut self, name: &str, c: usize) -> Op {
        let gamma = self.store.push(format!("{name}.gamma"), vec![c], vec![T::one(); c], true);
        let beta = self.store.push(format!("{name}.beta"), vec![c], vec![T::zero(); c], true);
        let mean = self.store.push(format!("{name}.running_mean"), vec![c], vec![T::zero(); c], false);
        let var = self.store.push(format!("{name}.running_var"), vec![c], vec![T::one(); c], false);
        Op::BatchNorm { gamma, beta, mean, var }
    }

    fn linear(&mut self, name: &str, fan_in: usize, out: usize) -> Result<Op> {
        let values = he_init(out * fan_in, fan_in, self.init_stream())?;
        let weight = self.store.push(
            format!("{name}.weight"),
            vec![out, fan_in],
            values.into_iter().map(T::from_f64_lossy).collect(),
            true,
        );
        let bias = self.store.push(format!("{name}.bias"), vec![out], vec![T::zero(); out], true);
        Ok(Op::Linear { weight, bias })
    }
}

impl<T: Scalar> Network<T> {
    /// Instantiate `config` with He-initialised weights drawn from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { store: ParamStore::default(), seed };
        let mut blocks = Vec::new();
        let mut c = 3usize;
        let mut pooled = false;
        for (li, layer) in config.layers.iter().enumerate() {
            let p = format!("l{li}");
            match *layer {
                LayerSpec::Conv { kernel, stride, out_channels } => {
                    let conv = b.conv(&format!("{p}.conv"), c, out_channels, kernel, stride)?;
                    let bn = b.bn(&format!("{p}.bn"), out_channels);
                    blocks.push(Block::Seq(vec![conv, bn, Op::Relu]));
                    c = out_channels;
                }
                LayerSpec::BatchNorm => blocks.push(Block::Seq(vec![b.bn(&format!("{p}.bn"), c)])),
                LayerSpec::Relu => blocks.push(Block::Seq(vec![Op::Relu])),
                LayerSpec::MaxPool { kernel, stride } => {
                    blocks.push(Block::Seq(vec![Op::MaxPool { kernel, stride, pad: (kernel - 1) / 2 }]))
                }
                LayerSpec::ResidualStage { kernel, out_channels, stride, blocks: n } => {
                    for bi in 0..n {
                        let q = format!("{p}.block{bi}");
                        let st = if bi == 0 { stride } else { 1 };
                        let main = vec![
                            b.conv(&format!("{q}.conv_a"), c, out_channels, kernel, st)?,
                            b.bn(&format!("{q}.bn_a"), out_channels),
                            Op::Relu,
                            b.conv(&format!("{q}.conv_b"), out_channels, out_channels, kernel, 1)?,
                            b.bn(&format!("{q}.bn_b"), out_channels),
                        ];
                        let shortcut = if st != 1 || c != out_channels {
                            Some(vec![
                                b.conv(&format!("{q}.proj"), c, out_channels, 1, st)?,
                                b.bn(&format!("{q}.proj_bn"), out_channels),
                            ])
                        } else {
                            None
                        };
                        blocks.push(Block::Residual { main, shortcut });
                        c = out_channels;
                    }
                }
                LayerSpec::DenseBlock { bottleneck, growth_rate, kernel, layers } => {
                    let mut seqs = Vec::with_capacity(layers);
                    for di in 0..layers {
                        let q = format!("{p}.layer{di}");
                        seqs.push(vec![
                            b.bn(&format!("{q}.bn_a"), c),
                            Op::Relu,
                            b.conv(&format!("{q}.conv_a"), c, bottleneck, 1, 1)?,
                            b.bn(&format!("{q}.bn_b"), bottleneck),
                            Op::Relu,
                            b.conv(&format!("{q}.conv_b"), bottleneck, growth_rate, kernel, 1)?,
                        ]);
                        c += growth_rate;
                    }
                    blocks.push(Block::Dense { layers: seqs });
                }
                LayerSpec::Transition { out_channels, pool_kernel, pool_stride } => {
                    blocks.push(Block::Seq(vec![
                        b.bn(&format!("{p}.bn"), c),
                        Op::Relu,
                        b.conv(&format!("{p}.conv"), c, out_channels, 1, 1)?,
                        Op::MaxPool { kernel: pool_kernel, stride: pool_stride, pad: (pool_kernel - 1) / 2 },
                    ]));
                    c = out_channels;
                }
                LayerSpec::GlobalAvgPool => {
                    blocks.push(Block::Seq(vec![Op::GlobalAvgPool]));
                    pooled = true;
                }
                LayerSpec::FullyConnected { out_features } => {
                    if !pooled {
                        return Err(Error::Shape("fully connected layer must follow global average pooling".into()));
                    }
                    blocks.push(Block::Seq(vec![b.linear(&format!("{p}.fc"), c, out_features)?]));
                    c = out_features;
                }
            }
        }
        Ok(Self { config: config.clone(), blocks, store: b.store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Copy of this network in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            blocks: self.blocks.clone(),
            store: ParamStore {
                params: self
                    .store
                    .params
                    .iter()
                    .map(|p| Param {
                        name: p.name.clone(),
                        shape: p.shape.clone(),
                        value: p.value.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                        trainable: p.trainable,
                    })
                    .collect(),
            },
        }
    }

    fn value(&self, index: usize) -> &[T] {
        &self.store.params[index].value
    }

    fn op_forward(&self, op: &Op, x: Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, OpCache<T>)> {
        let train = mode == Mode::Train;
        Ok(match op {
            Op::Conv { weight, geom } => {
                let y = ops::conv2d_forward(&x, self.value(*weight), geom)?;
                (y, if train { OpCache::Input(x) } else { OpCache::None })
            }
            Op::BatchNorm { gamma, beta, mean, var } => {
                if train {
                    let (y, cache) = ops::batchnorm_train(&x, self.value(*gamma), self.value(*beta), BN_EPS)?;
                    (y, OpCache::BatchNorm(cache))
                } else {
                    let y = ops::batchnorm_eval(
                        &x,
                        self.value(*gamma),
                        self.value(*beta),
                        self.value(*mean),
                        self.value(*var),
                        BN_EPS,
                    )?;
                    (y, OpCache::None)
                }
            }
            Op::Relu => {
                let y = ops::relu_forward(&x);
                let cache = if train { OpCache::Output(y.clone()) } else { OpCache::None };
                (y, cache)
            }
            Op::MaxPool { kernel, stride, pad } => {
                let (y, argmax) = ops::maxpool_forward(&x, *kernel, *stride, *pad)?;
                (y, if train { OpCache::MaxPool { argmax, in_shape: x.shape() } } else { OpCache::None })
            }
            Op::GlobalAvgPool => (ops::global_avg_pool_forward(&x), OpCache::Shape(x.shape())),
            Op::Linear { weight, bias } => {
                let y = ops::linear_forward(&x, self.value(*weight), self.value(*bias))?;
                (y, if train { OpCache::Input(x) } else { OpCache::None })
            }
        })
    }

    fn op_backward(&self, op: &Op, cache: &OpCache<T>, dy: Tensor4<T>, grads: &mut Gradients<T>) -> Result<Tensor4<T>> {
        let missing = || Error::Shape("backward called without a training-mode tape".into());
        Ok(match (op, cache) {
            (Op::Conv { weight, geom }, OpCache::Input(x)) => {
                let (dx, dw) = ops::conv2d_backward(x, self.value(*weight), geom, &dy)?;
                grads.add(*weight, &dw);
                dx
            }
            (Op::BatchNorm { gamma, beta, .. }, OpCache::BatchNorm(c)) => {
                let (dx, dg, db) = ops::batchnorm_backward(c, self.value(*gamma), &dy)?;
                grads.add(*gamma, &dg);
                grads.add(*beta, &db);
                dx
            }
            (Op::Relu, OpCache::Output(y)) => ops::relu_backward(y, &dy),
            (Op::MaxPool { .. }, OpCache::MaxPool { argmax, in_shape }) => ops::maxpool_backward(argmax, *in_shape, &dy),
            (Op::GlobalAvgPool, OpCache::Shape(s)) => ops::global_avg_pool_backward(*s, &dy),
            (Op::Linear { weight, bias }, OpCache::Input(x)) => {
                let (dx, dw, db) = ops::linear_backward(x, self.value(*weight), &dy)?;
                grads.add(*weight, &dw);
                grads.add(*bias, &db);
                dx
            }
            _ => return Err(missing()),
        })
    }

    fn seq_forward(&self, ops: &[Op], mut x: Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, Vec<OpCache<T>>)> {
        let mut caches = Vec::with_capacity(ops.len());
        for op in ops {
            let (y, c) = self.op_forward(op, x, mode)?;
            caches.push(c);
            x = y;
        }
        Ok((x, caches))
    }

    fn seq_backward(&self, ops: &[Op], caches: &[OpCache<T>], mut dy: Tensor4<T>, grads: &mut Gradients<T>) -> Result<Tensor4<T>> {
        for (op, cache) in ops.iter().zip(caches).rev() {
            dy = self.op_backward(op, cache, dy, grads)?;
        }
        Ok(dy)
    }

    fn block_forward(&self, block: &Block, x: Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, BlockCache<T>)> {
        match block {
            Block::Seq(ops) => {
                let (y, c) = self.seq_forward(ops, x, mode)?;
                Ok((y, BlockCache::Seq(c)))
            }
            Block::Residual { main, shortcut } => {
                let (mut sum, main_c) = self.seq_forward(main, x.clone(), mode)?;
                let (skip, short_c) = match shortcut {
                    Some(ops) => {
                        let (s, c) = self.seq_forward(ops, x, mode)?;
                        (s, Some(c))
                    }
                    None => (x, None),
                };
                if !sum.same_shape(&skip) {
                    return Err(Error::Shape(format!("residual branch {:?} vs shortcut {:?}", sum.shape(), skip.shape())));
                }
                sum.add_assign(&skip);
                let y = ops::relu_forward(&sum);
                let out = if mode == Mode::Train { y.clone() } else { Tensor4::zeros(0, 0, 0, 0) };
                Ok((y, BlockCache::Residual { main: main_c, shortcut: short_c, out }))
            }
            Block::Dense { layers } => {
                let mut cur = x;
                let mut caches = Vec::with_capacity(layers.len());
                let mut in_channels = Vec::with_capacity(layers.len());
                for layer in layers {
                    in_channels.push(cur.c);
                    let (new, c) = self.seq_forward(layer, cur.clone(), mode)?;
                    cur = Tensor4::concat_channels(&cur, &new)?;
                    caches.push(c);
                }
                Ok((cur, BlockCache::Dense { layers: caches, in_channels }))
            }
        }
    }

    fn block_backward(&self, block: &Block, cache: &BlockCache<T>, dy: Tensor4<T>, grads: &mut Gradients<T>) -> Result<Tensor4<T>> {
        match (block, cache) {
            (Block::Seq(ops), BlockCache::Seq(c)) => self.seq_backward(ops, c, dy, grads),
            (Block::Residual { main, shortcut }, BlockCache::Residual { main: mc, shortcut: sc, out }) => {
                let dsum = ops::relu_backward(out, &dy);
                let mut dx = self.seq_backward(main, mc, dsum.clone(), grads)?;
                let dskip = match (shortcut, sc) {
                    (Some(ops), Some(c)) => self.seq_backward(ops, c, dsum, grads)?,
                    _ => dsum,
                };
                dx.add_assign(&dskip);
                Ok(dx)
            }
            (Block::Dense { layers }, BlockCache::Dense { layers: caches, in_channels }) => {
                let mut dcur = dy;
                for ((layer, c), &cin) in layers.iter().zip(caches).zip(in_channels).rev() {
                    let (mut dprev, dnew) = dcur.split_channels(cin);
                    let d = self.seq_backward(layer, c, dnew, grads)?;
                    dprev.add_assign(&d);
                    dcur = dprev;
                }
                Ok(dcur)
            }
            _ => Err(Error::Shape("tape does not match network".into())),
        }
    }

    /// Logits `[n, classes, 1, 1]` and (in training mode) the tape for backward.
    pub fn forward(&self, x: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, Tape<T>)> {
        if x.c != 3 {
            return Err(Error::Shape(format!("network expects 3 input channels, got {}", x.c)));
        }
        let mut cur = x.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = self.block_forward(block, cur, mode)?;
            blocks.push(c);
            cur = y;
        }
        if !cur.all_finite() {
            return Err(Error::NonFinite("forward pass output".into()));
        }
        Ok((cur, Tape { blocks }))
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.forward(x, Mode::Eval)?.0)
    }

    /// Backpropagate `dlogits`; returns the input gradient and parameter gradients.
    pub fn backward(&self, tape: &Tape<T>, dlogits: Tensor4<T>) -> Result<(Tensor4<T>, Gradients<T>)> {
        if tape.blocks.len() != self.blocks.len() {
            return Err(Error::Shape("tape does not match network".into()));
        }
        let mut grads = Gradients::zeros_like(&self.store);
        let mut dy = dlogits;
        for (block, cache) in self.blocks.iter().zip(&tape.blocks).rev() {
            dy = self.block_backward(block, cache, dy, &mut grads)?;
        }
        if !dy.all_finite() || !grads.all_finite() {
            return Err(Error::NonFinite("backward pass gradients".into()));
        }
        Ok((dy, grads))
    }

    /// Fold the batch statistics recorded in `tape` into the running estimates.
    pub fn commit_batch_stats(&mut self, tape: &Tape<T>) {
        let mut updates: Vec<(usize, usize, BatchNormCache<T>)> = Vec::new();
        let mut visit = |ops: &[Op], caches: &[OpCache<T>]| {
            for (op, c) in ops.iter().zip(caches) {
                if let (Op::BatchNorm { mean, var, .. }, OpCache::BatchNorm(cache)) = (op, c) {
                    updates.push((*mean, *var, cache.clone()));
                }
            }
        };
        for (block, cache) in self.blocks.iter().zip(&tape.blocks) {
            match (block, cache) {
                (Block::Seq(ops), BlockCache::Seq(c)) => visit(ops, c),
                (Block::Residual { main, shortcut }, BlockCache::Residual { main: mc, shortcut: sc, .. }) => {
                    visit(main, mc);
                    if let (Some(ops), Some(c)) = (shortcut, sc) {
                        visit(ops, c);
                    }
                }
                (Block::Dense { layers }, BlockCache::Dense { layers: caches, .. }) => {
                    for (l, c) in layers.iter().zip(caches) {
                        visit(l, c);
                    }
                }
                _ => {}
            }
        }
        for (mean, var, cache) in updates {
            let (lo, hi) = self.store.params.split_at_mut(var);
            ops::update_running_stats(&mut lo[mean].value, &mut hi[0].value, &cache, BN_MOMENTUM);
        }
    }

    /// Zero every weight of the residual-path convolutions (not the
    /// projection shortcuts). Used to check that blocks reduce to their shortcut.
    pub fn zero_residual_paths(&mut self) {
        let targets: Vec<usize> = self
            .blocks
            .iter()
            .filter_map(|b| match b {
                Block::Residual { main, .. } => Some(main),
                _ => None,
            })
            .flatten()
            .filter_map(|op| match op {
                Op::Conv { weight, .. } => Some(*weight),
                _ => None,
            })
            .collect();
        for t in targets {
            self.store.params[t].value.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Stack images into an `[n, 3, h, w]` tensor.
pub fn batch_from_images<'a, T: Scalar>(images: impl IntoIterator<Item = &'a ImageTensor>) -> Result<Tensor4<T>> {
    let mut data = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut n = 0;
    for img in images {
        let d = (img.height(), img.width());
        match dims {
            None => dims = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::Shape(format!("batch mixes image sizes {prev:?} and {d:?}")))
            }
            _ => {}
        }
        data.extend(img.to_planar().into_iter().map(|v| T::from_f64_lossy(v as f64)));
        n += 1;
    }
    let (h, w) = dims.ok_or_else(|| Error::Shape("empty batch".into()))?;
    Tensor4::from_vec(n, 3, h, w, data)
}
