use crate::error::{Error, Result};
use crate::graph::{Layer, ModelGraph};
use crate::tensor::{Scalar, Tensor};

use super::ops::{self, BnCache, BnOp, ConvOp, DenseOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; moving statistics are updated.
    Train,
    /// Moving statistics in batch norm.
    Infer,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Conv(ConvOp<T>),
    Bn(BnOp<T>),
    Relu,
    Pool { pool: usize, stride: usize },
    Flatten,
    Dense(DenseOp<T>),
}

enum Cache<T> {
    Conv { input: Vec<T>, shape: [usize; 4] },
    Bn(BnCache<T>),
    Relu { mask: Vec<bool> },
    Pool { argmax: Vec<u32>, input_len: usize },
    Flatten,
    Dense { input: Vec<T>, n: usize },
}

/// Gradient of one trainable tensor.
#[derive(Clone, Debug)]
pub struct ParamGrad<T> {
    pub layer: String,
    pub name: &'static str,
    pub grad: Tensor<T>,
}

/// A graph's weights unpacked into working precision `T`.
#[derive(Clone, Debug)]
pub struct Network<T> {
    ids: Vec<String>,
    ops: Vec<Op<T>>,
    input_shape: [usize; 3],
    num_classes: usize,
    bn_momentum: T,
}

fn cast<T: Scalar>(t: &Tensor) -> Vec<T> {
    t.data().iter().map(|&v| T::from_f32(v)).collect()
}

fn store<T: Scalar>(src: &[T], dst: &mut Tensor) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d = Scalar::to_f32(*s);
    }
}

impl<T: Scalar> Network<T> {
    pub fn from_graph(graph: &ModelGraph) -> Result<Self> {
        graph.infer_shapes(1)?;
        let ops = graph
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Conv2d(c) => Op::Conv(ConvOp {
                    kh: c.kernel_h,
                    kw: c.kernel_w,
                    stride: c.stride,
                    padding: c.padding,
                    cin: c.in_channels,
                    cout: c.out_channels,
                    w: cast(&c.weights),
                    b: cast(&c.bias),
                }),
                Layer::BatchNorm(b) => Op::Bn(BnOp {
                    channels: b.channels,
                    gamma: cast(&b.gamma),
                    beta: cast(&b.beta),
                    mean: cast(&b.moving_mean),
                    var: cast(&b.moving_var),
                    eps: T::from_f32(b.eps),
                }),
                Layer::Relu { .. } => Op::Relu,
                Layer::MaxPool(p) => Op::Pool {
                    pool: p.pool,
                    stride: p.stride,
                },
                Layer::Flatten { .. } => Op::Flatten,
                Layer::Dense(d) => Op::Dense(DenseOp {
                    fin: d.in_features,
                    fout: d.out_features,
                    w: cast(&d.weights),
                    b: cast(&d.bias),
                }),
            })
            .collect();
        Ok(Self {
            ids: graph.layers.iter().map(|l| l.id().to_string()).collect(),
            ops,
            input_shape: graph.input_shape,
            num_classes: graph.num_classes,
            bn_momentum: T::from_f64(0.9),
        })
    }

    pub fn set_bn_momentum(&mut self, momentum: f64) {
        self.bn_momentum = T::from_f64(momentum);
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Copies the (possibly trained) values back into `graph`, rounding to
    /// `f32`. `graph` must have the structure this network was built from.
    pub fn write_to(&self, graph: &mut ModelGraph) {
        for (layer, op) in graph.layers.iter_mut().zip(&self.ops) {
            match (layer, op) {
                (Layer::Conv2d(c), Op::Conv(o)) => {
                    store(&o.w, &mut c.weights);
                    store(&o.b, &mut c.bias);
                }
                (Layer::BatchNorm(b), Op::Bn(o)) => {
                    store(&o.gamma, &mut b.gamma);
                    store(&o.beta, &mut b.beta);
                    store(&o.mean, &mut b.moving_mean);
                    store(&o.var, &mut b.moving_var);
                }
                (Layer::Dense(d), Op::Dense(o)) => {
                    store(&o.w, &mut d.weights);
                    store(&o.b, &mut d.bias);
                }
                _ => {}
            }
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let [h, w, c] = self.input_shape;
        match shape {
            [n, ih, iw, ic] if *n > 0 && [*ih, *iw, *ic] == [h, w, c] => Ok(*n),
            _ => Err(Error::Shape {
                producer: "input".into(),
                consumer: self.ids.first().cloned().unwrap_or_default(),
                detail: format!("input shape {shape:?} does not match [N, {h}, {w}, {c}]"),
            }),
        }
    }

    /// Runs the chain. In `Train` mode moving statistics are updated.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let n = self.check_input(x.shape())?;
        let (out, shape, _) = self.run(x.data().to_vec(), n, mode, mode == Mode::Train, false);
        Tensor::new(shape, out)
    }

    /// Forward pass over a batch; returns output, its shape and (when
    /// `keep_cache`) the per-layer caches for a backward pass.
    fn run(&mut self, mut act: Vec<T>, n: usize, mode: Mode, update_stats: bool, keep_cache: bool) -> (Vec<T>, Vec<usize>, Vec<Cache<T>>) {
        let [h, w, c] = self.input_shape;
        let mut shape = vec![n, h, w, c];
        let mut caches = Vec::with_capacity(if keep_cache { self.ops.len() } else { 0 });
        let momentum = self.bn_momentum;
        for op in &mut self.ops {
            match op {
                Op::Conv(conv) => {
                    let s4 = [shape[0], shape[1], shape[2], shape[3]];
                    let (out, oshape) = conv.forward(&act, s4);
                    if keep_cache {
                        caches.push(Cache::Conv { input: act, shape: s4 });
                    }
                    act = out;
                    shape = oshape.to_vec();
                }
                Op::Bn(bn) => match mode {
                    Mode::Infer => {
                        bn.forward_infer(&mut act);
                        if keep_cache {
                            // Inference-mode batch norm is affine; the
                            // cache lets callers differentiate through it.
                            let invstd = bn.var.iter().map(|v| T::one() / (*v + bn.eps).sqrt()).collect();
                            caches.push(Cache::Bn(BnCache { xhat: Vec::new(), invstd }));
                        }
                    }
                    Mode::Train => {
                        let (cache, mean, var) = bn.forward_train(&mut act);
                        if update_stats {
                            let keep = T::one() - momentum;
                            for ch in 0..bn.channels {
                                bn.mean[ch] = momentum * bn.mean[ch] + keep * mean[ch];
                                bn.var[ch] = momentum * bn.var[ch] + keep * var[ch];
                            }
                        }
                        if keep_cache {
                            caches.push(Cache::Bn(cache));
                        }
                    }
                },
                Op::Relu => {
                    let mut mask = if keep_cache { Vec::with_capacity(act.len()) } else { Vec::new() };
                    for v in act.iter_mut() {
                        let on = *v > T::zero();
                        if !on {
                            *v = T::zero();
                        }
                        if keep_cache {
                            mask.push(on);
                        }
                    }
                    if keep_cache {
                        caches.push(Cache::Relu { mask });
                    }
                }
                Op::Pool { pool, stride } => {
                    let s4 = [shape[0], shape[1], shape[2], shape[3]];
                    let (out, argmax, oshape) = ops::max_pool_forward(&act, s4, *pool, *stride, keep_cache);
                    if keep_cache {
                        caches.push(Cache::Pool {
                            argmax,
                            input_len: act.len(),
                        });
                    }
                    act = out;
                    shape = oshape.to_vec();
                }
                Op::Flatten => {
                    shape = vec![shape[0], shape[1..].iter().product()];
                    if keep_cache {
                        caches.push(Cache::Flatten);
                    }
                }
                Op::Dense(dense) => {
                    let out = dense.forward(&act, shape[0]);
                    if keep_cache {
                        caches.push(Cache::Dense { input: act, n: shape[0] });
                    }
                    act = out;
                    shape = vec![shape[0], dense.fout];
                }
            }
        }
        (act, shape, caches)
    }

    /// Walks the caches backwards. Returns gradients per op (`None` for
    /// parameter-free layers).
    fn backward(&self, caches: Vec<Cache<T>>, mut grad: Vec<T>) -> Vec<Option<(Vec<T>, Vec<T>)>> {
        let mut grads: Vec<Option<(Vec<T>, Vec<T>)>> = vec![None; self.ops.len()];
        for (i, cache) in caches.into_iter().enumerate().rev() {
            let need_dx = i > 0;
            match (&self.ops[i], cache) {
                (Op::Conv(conv), Cache::Conv { input, shape }) => {
                    let (dw, db, dx) = conv.backward(&input, shape, &grad, need_dx);
                    grads[i] = Some((dw, db));
                    if let Some(dx) = dx {
                        grad = dx;
                    }
                }
                (Op::Bn(bn), Cache::Bn(cache)) => {
                    if cache.xhat.is_empty() {
                        for px in grad.chunks_exact_mut(bn.channels) {
                            for ch in 0..bn.channels {
                                px[ch] = px[ch] * bn.gamma[ch] * cache.invstd[ch];
                            }
                        }
                        grads[i] = None;
                    } else {
                        let (dg, dbeta) = bn.backward(&cache, &mut grad);
                        grads[i] = Some((dg, dbeta));
                    }
                }
                (Op::Relu, Cache::Relu { mask }) => {
                    for (g, on) in grad.iter_mut().zip(mask) {
                        if !on {
                            *g = T::zero();
                        }
                    }
                }
                (Op::Pool { .. }, Cache::Pool { argmax, input_len }) => {
                    let mut dx = vec![T::zero(); input_len];
                    for (g, &at) in grad.iter().zip(&argmax) {
                        dx[at as usize] = dx[at as usize] + *g;
                    }
                    grad = dx;
                }
                (Op::Flatten, Cache::Flatten) => {}
                (Op::Dense(dense), Cache::Dense { input, n }) => {
                    let (dw, db, dx) = dense.backward(&input, n, &grad, need_dx);
                    grads[i] = Some((dw, db));
                    if let Some(dx) = dx {
                        grad = dx;
                    }
                }
                _ => unreachable!("cache does not match op"),
            }
        }
        grads
    }

    /// Mean cross-entropy and gradients for one batch in train mode.
    /// Returns `(loss, correct, grads)`.
    pub(crate) fn loss_and_grads_raw(
        &mut self,
        x: &[T],
        labels: &[u32],
        update_stats: bool,
    ) -> Result<(T, usize, Vec<Option<(Vec<T>, Vec<T>)>>)> {
        let n = labels.len();
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        let (logits, shape, caches) = self.run(x.to_vec(), n, Mode::Train, update_stats, true);
        if shape != [n, self.num_classes] {
            return Err(Error::structure(
                self.ids.last().cloned().unwrap_or_default(),
                format!("network emits {shape:?}, expected [{n}, {}]", self.num_classes),
            ));
        }
        let (loss, dlogits, correct) = ops::softmax_cross_entropy(&logits, labels, self.num_classes);
        let grads = self.backward(caches, dlogits);
        Ok((loss, correct, grads))
    }

    /// Train-mode mean cross-entropy with no backward pass and no statistics
    /// update.
    pub(crate) fn loss_only(&mut self, x: &[T], labels: &[u32]) -> T {
        let (logits, _, _) = self.run(x.to_vec(), labels.len(), Mode::Train, false, false);
        ops::softmax_cross_entropy(&logits, labels, self.num_classes).0
    }

    /// Loss and per-tensor gradients without touching moving statistics.
    pub fn loss_and_grads(&mut self, x: &Tensor<T>, labels: &[u32]) -> Result<(T, Vec<ParamGrad<T>>)> {
        let n = self.check_input(x.shape())?;
        if labels.len() != n {
            return Err(Error::invalid(format!("{} labels for a batch of {n}", labels.len())));
        }
        let (loss, _, grads) = self.loss_and_grads_raw(x.data(), labels, false)?;
        let mut out = Vec::new();
        for (i, g) in grads.into_iter().enumerate() {
            let Some((a, b)) = g else { continue };
            let (na, nb, sa, sb) = match &self.ops[i] {
                Op::Conv(c) => ("weights", "bias", vec![c.kh, c.kw, c.cin, c.cout], vec![c.cout]),
                Op::Bn(b) => ("gamma", "beta", vec![b.channels], vec![b.channels]),
                Op::Dense(d) => ("weights", "bias", vec![d.fin, d.fout], vec![d.fout]),
                _ => unreachable!(),
            };
            out.push(ParamGrad {
                layer: self.ids[i].clone(),
                name: na,
                grad: Tensor::new(sa, a)?,
            });
            out.push(ParamGrad {
                layer: self.ids[i].clone(),
                name: nb,
                grad: Tensor::new(sb, b)?,
            });
        }
        Ok((loss, out))
    }

    /// Mutable views of every trainable tensor in a fixed order (weights then
    /// bias, or gamma then beta, per layer).
    pub(crate) fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for op in &mut self.ops {
            match op {
                Op::Conv(c) => {
                    out.push(&mut c.w);
                    out.push(&mut c.b);
                }
                Op::Bn(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                }
                Op::Dense(d) => {
                    out.push(&mut d.w);
                    out.push(&mut d.b);
                }
                _ => {}
            }
        }
        out
    }

    /// Identifiers matching [`Network::params_mut`] order.
    pub(crate) fn param_names(&self) -> Vec<(String, &'static str)> {
        let mut out = Vec::new();
        for (id, op) in self.ids.iter().zip(&self.ops) {
            let names: &[&'static str] = match op {
                Op::Conv(_) | Op::Dense(_) => &["weights", "bias"],
                Op::Bn(_) => &["gamma", "beta"],
                _ => &[],
            };
            out.extend(names.iter().map(|n| (id.clone(), *n)));
        }
        out
    }

    /// Inference-mode logits, evaluated in slices of at most `chunk` samples.
    pub(crate) fn infer_batched(&mut self, x: &[T], n: usize, chunk: usize) -> Vec<T> {
        let per = x.len() / n.max(1);
        let mut out = Vec::with_capacity(n * self.num_classes);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let (logits, _, _) = self.run(x[start * per..end * per].to_vec(), end - start, Mode::Infer, false, false);
            out.extend_from_slice(&logits);
            start = end;
        }
        out
    }
}
