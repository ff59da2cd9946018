//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends a node holding its output value; `backward`
//! walks the tape in exact reverse execution order and accumulates gradients
//! additively into each node. Ops only ever reference earlier nodes, so the
//! traversal order is the topological order by construction.
//!
//! Arithmetic is f32 throughout, with f32 accumulation. Each output element
//! is written by exactly one task and accumulated in a fixed sequential
//! order, so results are bit-identical for any thread count.

use crate::error::{Error, Result};
use crate::par;
use crate::quantize;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        // saved per-channel statistics used by forward (batch stats in
        // train mode, running stats in eval mode)
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Relu {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        softmax: Vec<f32>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f32,
    },
    ChannelSlice {
        input: Var,
        channels: usize,
    },
    Cwi {
        input: Var,
    },
    MixWeights {
        alphas: Var,
        indices: Vec<usize>,
    },
    WeightedSum {
        weights: Var,
        inputs: Vec<Var>,
    },
    QuantAct {
        input: Var,
        clip: Var,
        reg: f32,
    },
    QuantWeight {
        input: Var,
    },
    DotReduce {
        input: Var,
        coeffs: Vec<f32>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f32>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward target w.r.t. `v`; zeros if the var
    /// never received gradient flow.
    pub fn grad(&self, v: Var) -> Vec<f32> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].value.numel()],
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    // ---- forward ops -----------------------------------------------------

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride < 1 {
            return Err(Error::Config("conv2d: stride must be >= 1".into()));
        }
        let x = self.value(input);
        let w = self.value(weight);
        let (n, cin, h, wd) = x.dims4();
        let (cout, wcin, kh, kw) = w.dims4();
        if cin != wcin {
            return Err(Error::Config(format!(
                "conv2d: input channels {cin} != weight channels {wcin}"
            )));
        }
        let ho = (h + 2 * padding).checked_sub(kh).map(|v| v / stride + 1);
        let wo = (wd + 2 * padding).checked_sub(kw).map(|v| v / stride + 1);
        let (ho, wo) = match (ho, wo) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(Error::Config(format!(
                    "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}"
                )))
            }
        };
        let mut out = Tensor::zeros(vec![n, cout, ho, wo]);
        conv2d_forward(
            &x.data, &w.data, &mut out.data, n, cin, h, wd, cout, kh, kw, stride, padding, ho, wo,
        );
        out.check_finite("conv2d output")?;
        Ok(self.push(Op::Conv2d { input, weight, stride, padding }, out))
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [f32],
        running_var: &mut [f32],
        momentum: f32,
        eps: f32,
        mode: BnMode,
    ) -> Var {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4();
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        assert_eq!(g.len(), c, "batch_norm: gamma length != channels");
        assert_eq!(b.len(), c, "batch_norm: beta length != channels");
        assert!(running_mean.len() >= c && running_var.len() >= c);
        let plane = h * w;
        let m = (n * plane) as f32;

        let (mean, var): (Vec<f32>, Vec<f32>) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let mut s = 0.0f32;
                    for ni in 0..n {
                        let base = (ni * c + ch) * plane;
                        for i in 0..plane {
                            s += x.data[base + i];
                        }
                    }
                    mean[ch] = s / m;
                    let mut v = 0.0f32;
                    for ni in 0..n {
                        let base = (ni * c + ch) * plane;
                        for i in 0..plane {
                            let d = x.data[base + i] - mean[ch];
                            v += d * d;
                        }
                    }
                    var[ch] = v / m;
                }
                for ch in 0..c {
                    running_mean[ch] = momentum * running_mean[ch] + (1.0 - momentum) * mean[ch];
                    running_var[ch] = momentum * running_var[ch] + (1.0 - momentum) * var[ch];
                }
                (mean, var)
            }
            BnMode::Eval => (running_mean[..c].to_vec(), running_var[..c].to_vec()),
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

        let mut out = Tensor::zeros(x.shape.clone());
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * plane;
                let (mu, is, gg, bb) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                for i in 0..plane {
                    out.data[base + i] = gg * (x.data[base + i] - mu) * is + bb;
                }
            }
        }
        self.push(Op::BatchNorm { input, gamma, beta, mode, mean, inv_std }, out)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data: Vec<f32> = x.data.iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(x.shape.clone(), data);
        self.push(Op::Relu { input }, out)
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let mut out = Tensor::zeros(vec![n, c]);
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * plane;
                let s: f32 = x.data[base..base + plane].iter().sum();
                out.data[ni * c + ch] = s / plane as f32;
            }
        }
        self.push(Op::GlobalAvgPool { input }, out)
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        let b = &self.value(bias).data;
        let (n, cin) = x.dims2();
        let (cout, wcin) = w.dims2();
        assert_eq!(cin, wcin, "linear: input width != weight width");
        assert_eq!(b.len(), cout, "linear: bias length != output width");
        let mut out = Tensor::zeros(vec![n, cout]);
        for ni in 0..n {
            let xr = &x.data[ni * cin..(ni + 1) * cin];
            for o in 0..cout {
                let wr = &w.data[o * cin..(o + 1) * cin];
                let mut acc = b[o];
                for i in 0..cin {
                    acc += xr[i] * wr[i];
                }
                out.data[ni * cout + o] = acc;
            }
        }
        self.push(Op::Linear { input, weight, bias }, out)
    }

    /// Mean cross-entropy over the batch; returns a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (n, k) = x.dims2();
        if labels.len() != n {
            return Err(Error::Input(format!(
                "cross-entropy: {} labels for batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("cross-entropy: label {bad} out of range 0..{k}")));
        }
        let mut softmax = vec![0.0f32; n * k];
        let mut loss = 0.0f32;
        for ni in 0..n {
            let row = &x.data[ni * k..(ni + 1) * k];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for i in 0..k {
                let e = (row[i] - mx).exp();
                softmax[ni * k + i] = e;
                z += e;
            }
            for i in 0..k {
                softmax[ni * k + i] /= z;
            }
            loss += -(softmax[ni * k + labels[ni]].max(f32::MIN_POSITIVE)).ln();
        }
        loss /= n as f32;
        let labels = labels.to_vec();
        Ok(self.push(Op::SoftmaxCrossEntropy { logits, labels, softmax }, Tensor::scalar(loss)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (xa, xb) = (self.value(a), self.value(b));
        assert_eq!(xa.shape, xb.shape, "add: shape mismatch");
        let data: Vec<f32> = xa.data.iter().zip(&xb.data).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(xa.shape.clone(), data);
        self.push(Op::Add { a, b }, out)
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let x = self.value(input);
        let data: Vec<f32> = x.data.iter().map(|&v| v * factor).collect();
        let out = Tensor::new(x.shape.clone(), data);
        self.push(Op::Scale { input, factor }, out)
    }

    /// First `channels` channels of an NCHW map. Identity (same var) when
    /// `channels` equals the input channel count.
    pub fn channel_slice(&mut self, input: Var, channels: usize) -> Var {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4();
        assert!(channels <= c, "channel_slice: {channels} > {c}");
        if channels == c {
            return input;
        }
        let plane = h * w;
        let mut out = Tensor::zeros(vec![n, channels, h, w]);
        for ni in 0..n {
            let src = (ni * c) * plane;
            let dst = (ni * channels) * plane;
            out.data[dst..dst + channels * plane]
                .copy_from_slice(&x.data[src..src + channels * plane]);
        }
        self.push(Op::ChannelSlice { input, channels }, out)
    }

    /// Channel-wise linear interpolation up to `target` channels. Identity
    /// (same var, bit-exact) when the input already has `target` channels.
    pub fn cwi(&mut self, input: Var, target: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4();
        if c > target {
            return Err(Error::Usage(format!(
                "cwi: cannot down-align {c} channels to {target}"
            )));
        }
        if c == target {
            return Ok(input);
        }
        let plane = h * w;
        let mut out = Tensor::zeros(vec![n, target, h, w]);
        let taps = cwi_taps(c, target);
        for ni in 0..n {
            for (j, &(lo, hi, frac)) in taps.iter().enumerate() {
                let dst = (ni * target + j) * plane;
                let s_lo = (ni * c + lo) * plane;
                let s_hi = (ni * c + hi) * plane;
                for i in 0..plane {
                    out.data[dst + i] =
                        (1.0 - frac) * x.data[s_lo + i] + frac * x.data[s_hi + i];
                }
            }
        }
        Ok(self.push(Op::Cwi { input }, out))
    }

    /// Softmax over the selected entries of a 1-d alpha vector, renormalized
    /// over the subset only. Output is a vector of length `indices.len()`.
    pub fn mix_weights(&mut self, alphas: Var, indices: &[usize]) -> Var {
        let a = &self.value(alphas).data;
        assert!(!indices.is_empty());
        let sel: Vec<f32> = indices.iter().map(|&i| a[i]).collect();
        let w = softmax(&sel);
        let indices = indices.to_vec();
        self.push(Op::MixWeights { alphas, indices }, Tensor::from_vec(w))
    }

    /// y = sum_j weights[j] * inputs[j], all inputs the same shape.
    pub fn weighted_sum(&mut self, weights: Var, inputs: &[Var]) -> Var {
        let k = self.value(weights).numel();
        assert_eq!(k, inputs.len(), "weighted_sum: weight/input count mismatch");
        let shape = self.value(inputs[0]).shape.clone();
        let numel = self.value(inputs[0]).numel();
        let mut data = vec![0.0f32; numel];
        for (j, &iv) in inputs.iter().enumerate() {
            let wj = self.value(weights).data[j];
            let xj = &self.nodes[iv.0].value;
            assert_eq!(xj.shape, shape, "weighted_sum: input shape mismatch");
            for i in 0..numel {
                data[i] += wj * xj.data[i];
            }
        }
        let inputs = inputs.to_vec();
        self.push(Op::WeightedSum { weights, inputs }, Tensor::new(shape, data))
    }

    /// PACT fake quantization of activations with straight-through gradients.
    /// `clip` must be a positive scalar var. The clip L2 regularizer enters
    /// only through the backward pass (`2 * reg * clip` added to the clip
    /// gradient); the forward value is the quantized tensor alone.
    pub fn quantize_activation(&mut self, input: Var, clip: Var, bits: u32, reg: f32) -> Result<Var> {
        let alpha = self.value(clip).data[0];
        if alpha <= 0.0 || !alpha.is_finite() {
            return Err(Error::Numeric(format!("quantize_activation: clip {alpha} must be positive")));
        }
        let x = self.value(input);
        let data = quantize::quantize_activation_values(&x.data, alpha, bits);
        let out = Tensor::new(x.shape.clone(), data);
        Ok(self.push(Op::QuantAct { input, clip, reg }, out))
    }

    /// Symmetric per-layer max-scaled weight fake quantization, identity STE.
    pub fn quantize_weight(&mut self, input: Var, bits: u32) -> Var {
        let x = self.value(input);
        let data = quantize::quantize_weight_values(&x.data, bits);
        let out = Tensor::new(x.shape.clone(), data);
        self.push(Op::QuantWeight { input }, out)
    }

    /// Scalar = sum_i coeffs[i] * input[i]. Used to reduce tensors to a
    /// scalar target when probing gradients.
    pub fn dot_reduce(&mut self, input: Var, coeffs: &[f32]) -> Var {
        let x = self.value(input);
        assert_eq!(x.numel(), coeffs.len());
        let s: f32 = x.data.iter().zip(coeffs).map(|(&a, &c)| a * c).sum();
        let coeffs = coeffs.to_vec();
        self.push(Op::DotReduce { input, coeffs }, Tensor::scalar(s))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar target. Gradients accumulate additively
    /// into every node reachable from `target`.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        if self.nodes[target.0].value.numel() != 1 {
            return Err(Error::Usage("backward target must be a scalar".into()));
        }
        self.add_grad(target.0, None, 1.0);
        for i in (0..self.nodes.len()).rev() {
            let out_grad = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.backward_node(i, &op, &out_grad)?;
            self.nodes[i].grad = Some(out_grad);
        }
        Ok(())
    }

    fn grad_buf(&mut self, idx: usize) -> &mut Vec<f32> {
        let n = self.nodes[idx].value.numel();
        self.nodes[idx].grad.get_or_insert_with(|| vec![0.0; n])
    }

    fn add_grad(&mut self, idx: usize, at: Option<usize>, v: f32) {
        let g = self.grad_buf(idx);
        match at {
            Some(i) => g[i] += v,
            None => g[0] += v,
        }
    }

    fn add_grad_slice(&mut self, idx: usize, contrib: &[f32]) {
        let g = self.grad_buf(idx);
        debug_assert_eq!(g.len(), contrib.len());
        for (a, b) in g.iter_mut().zip(contrib) {
            *a += *b;
        }
    }

    fn backward_node(&mut self, idx: usize, op: &Op, og: &[f32]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, stride, padding } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let (n, cin, h, wd) = x.dims4();
                let (cout, _, kh, kw) = w.dims4();
                let (_, _, ho, wo) = self.nodes[idx].value.dims4();
                let mut gx = vec![0.0f32; x.numel()];
                let mut gw = vec![0.0f32; w.numel()];
                conv2d_backward_input(
                    og, &w.data, &mut gx, n, cin, h, wd, cout, kh, kw, *stride, *padding, ho, wo,
                );
                conv2d_backward_weight(
                    og, &x.data, &mut gw, n, cin, h, wd, cout, kh, kw, *stride, *padding, ho, wo,
                );
                self.add_grad_slice(input.0, &gx);
                self.add_grad_slice(weight.0, &gw);
            }
            Op::BatchNorm { input, gamma, beta, mode, mean, inv_std } => {
                let x = &self.nodes[input.0].value;
                let g = &self.nodes[gamma.0].value.data;
                let (n, c, h, w) = x.dims4();
                let plane = h * w;
                let m = (n * plane) as f32;
                let mut gx = vec![0.0f32; x.numel()];
                let mut ggamma = vec![0.0f32; c];
                let mut gbeta = vec![0.0f32; c];
                for ch in 0..c {
                    let (mu, is) = (mean[ch], inv_std[ch]);
                    let mut sum_dy = 0.0f32;
                    let mut sum_dy_xhat = 0.0f32;
                    for ni in 0..n {
                        let base = (ni * c + ch) * plane;
                        for i in 0..plane {
                            let dy = og[base + i];
                            let xhat = (x.data[base + i] - mu) * is;
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                        }
                    }
                    ggamma[ch] = sum_dy_xhat;
                    gbeta[ch] = sum_dy;
                    match mode {
                        BnMode::Train => {
                            let k = g[ch] * is / m;
                            for ni in 0..n {
                                let base = (ni * c + ch) * plane;
                                for i in 0..plane {
                                    let dy = og[base + i];
                                    let xhat = (x.data[base + i] - mu) * is;
                                    gx[base + i] = k * (m * dy - sum_dy - xhat * sum_dy_xhat);
                                }
                            }
                        }
                        BnMode::Eval => {
                            let k = g[ch] * is;
                            for ni in 0..n {
                                let base = (ni * c + ch) * plane;
                                for i in 0..plane {
                                    gx[base + i] = k * og[base + i];
                                }
                            }
                        }
                    }
                }
                self.add_grad_slice(input.0, &gx);
                self.add_grad_slice(gamma.0, &ggamma);
                self.add_grad_slice(beta.0, &gbeta);
            }
            Op::Relu { input } => {
                let x = &self.nodes[input.0].value;
                let gx: Vec<f32> = x
                    .data
                    .iter()
                    .zip(og)
                    .map(|(&v, &dy)| if v > 0.0 { dy } else { 0.0 })
                    .collect();
                self.add_grad_slice(input.0, &gx);
            }
            Op::GlobalAvgPool { input } => {
                let x = &self.nodes[input.0].value;
                let (n, c, h, w) = x.dims4();
                let plane = h * w;
                let mut gx = vec![0.0f32; x.numel()];
                for ni in 0..n {
                    for ch in 0..c {
                        let dy = og[ni * c + ch] / plane as f32;
                        let base = (ni * c + ch) * plane;
                        for i in 0..plane {
                            gx[base + i] = dy;
                        }
                    }
                }
                self.add_grad_slice(input.0, &gx);
            }
            Op::Linear { input, weight, bias } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let (n, cin) = x.dims2();
                let (cout, _) = w.dims2();
                let mut gx = vec![0.0f32; x.numel()];
                let mut gw = vec![0.0f32; w.numel()];
                let mut gb = vec![0.0f32; cout];
                for ni in 0..n {
                    for o in 0..cout {
                        let dy = og[ni * cout + o];
                        gb[o] += dy;
                        for i in 0..cin {
                            gx[ni * cin + i] += dy * w.data[o * cin + i];
                            gw[o * cin + i] += dy * x.data[ni * cin + i];
                        }
                    }
                }
                self.add_grad_slice(input.0, &gx);
                self.add_grad_slice(weight.0, &gw);
                self.add_grad_slice(bias.0, &gb);
            }
            Op::SoftmaxCrossEntropy { logits, labels, softmax } => {
                let n = labels.len();
                let k = self.nodes[logits.0].value.shape[1];
                let scale = og[0] / n as f32;
                let mut gx = vec![0.0f32; n * k];
                for ni in 0..n {
                    for i in 0..k {
                        let onehot = if labels[ni] == i { 1.0 } else { 0.0 };
                        gx[ni * k + i] = scale * (softmax[ni * k + i] - onehot);
                    }
                }
                self.add_grad_slice(logits.0, &gx);
            }
            Op::Add { a, b } => {
                self.add_grad_slice(a.0, og);
                self.add_grad_slice(b.0, og);
            }
            Op::Scale { input, factor } => {
                let gx: Vec<f32> = og.iter().map(|&dy| dy * factor).collect();
                self.add_grad_slice(input.0, &gx);
            }
            Op::ChannelSlice { input, channels } => {
                let x = &self.nodes[input.0].value;
                let (n, c, h, w) = x.dims4();
                let plane = h * w;
                let mut gx = vec![0.0f32; x.numel()];
                for ni in 0..n {
                    let dst = (ni * c) * plane;
                    let src = (ni * channels) * plane;
                    gx[dst..dst + channels * plane]
                        .copy_from_slice(&og[src..src + channels * plane]);
                }
                self.add_grad_slice(input.0, &gx);
            }
            Op::Cwi { input } => {
                let x = &self.nodes[input.0].value;
                let (n, c, h, w) = x.dims4();
                let target = self.nodes[idx].value.shape[1];
                let plane = h * w;
                let taps = cwi_taps(c, target);
                let mut gx = vec![0.0f32; x.numel()];
                for ni in 0..n {
                    for (j, &(lo, hi, frac)) in taps.iter().enumerate() {
                        let src = (ni * target + j) * plane;
                        let d_lo = (ni * c + lo) * plane;
                        let d_hi = (ni * c + hi) * plane;
                        for i in 0..plane {
                            let dy = og[src + i];
                            gx[d_lo + i] += (1.0 - frac) * dy;
                            gx[d_hi + i] += frac * dy;
                        }
                    }
                }
                self.add_grad_slice(input.0, &gx);
            }
            Op::MixWeights { alphas, indices } => {
                let w = &self.nodes[idx].value.data;
                let dot: f32 = og.iter().zip(w).map(|(&d, &p)| d * p).sum();
                let mut ga = vec![0.0f32; self.nodes[alphas.0].value.numel()];
                for (j, &i) in indices.iter().enumerate() {
                    ga[i] += w[j] * (og[j] - dot);
                }
                self.add_grad_slice(alphas.0, &ga);
            }
            Op::WeightedSum { weights, inputs } => {
                let wv = self.nodes[weights.0].value.data.clone();
                let mut gw = vec![0.0f32; wv.len()];
                for (j, inp) in inputs.iter().enumerate() {
                    let xj = &self.nodes[inp.0].value.data;
                    let mut dot = 0.0f32;
                    for i in 0..og.len() {
                        dot += og[i] * xj[i];
                    }
                    gw[j] = dot;
                    let gx: Vec<f32> = og.iter().map(|&dy| wv[j] * dy).collect();
                    self.add_grad_slice(inp.0, &gx);
                }
                self.add_grad_slice(weights.0, &gw);
            }
            Op::QuantAct { input, clip, reg } => {
                let alpha = self.nodes[clip.0].value.data[0];
                let x = &self.nodes[input.0].value;
                let mut gx = vec![0.0f32; x.numel()];
                let mut galpha = 0.0f32;
                for (i, (&v, &dy)) in x.data.iter().zip(og).enumerate() {
                    if v > 0.0 && v < alpha {
                        gx[i] = dy;
                    } else if v >= alpha {
                        galpha += dy;
                    }
                }
                // gradient-only L2 regularizer on the clip value
                galpha += 2.0 * reg * alpha;
                self.add_grad_slice(input.0, &gx);
                self.add_grad(clip.0, None, galpha);
            }
            Op::QuantWeight { input } => {
                // identity STE: the max-|w| scale makes the clamp a no-op
                self.add_grad_slice(input.0, og);
            }
            Op::DotReduce { input, coeffs } => {
                let dy = og[0];
                let gx: Vec<f32> = coeffs.iter().map(|&c| c * dy).collect();
                self.add_grad_slice(input.0, &gx);
            }
        }
        Ok(())
    }
}

fn softmax(v: &[f32]) -> Vec<f32> {
    let mx = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = v.iter().map(|&a| (a - mx).exp()).collect();
    let z: f32 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// (lo, hi, frac) source taps for interpolating `c` channels up to `target`.
fn cwi_taps(c: usize, target: usize) -> Vec<(usize, usize, f32)> {
    assert!(c <= target && target >= 1);
    (0..target)
        .map(|j| {
            if c == 1 || target == 1 {
                return (0, 0, 0.0);
            }
            let pos = j as f32 * (c - 1) as f32 / (target - 1) as f32;
            let lo = (pos.floor() as usize).min(c - 1);
            let hi = (lo + 1).min(c - 1);
            (lo, hi, pos - lo as f32)
        })
        .collect()
}

// ---- convolution kernels ----------------------------------------------

/// Valid output-column range for a kernel column: all ow with
/// 0 <= ow*stride + kw - padding < w.
fn ow_range(kw: usize, padding: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let start = if kw >= padding {
        0
    } else {
        (padding - kw).div_ceil(stride)
    };
    // ow*stride + kw - padding <= w-1
    let end = if w + padding > kw {
        (((w + padding - kw - 1) / stride) + 1).min(wo)
    } else {
        0
    };
    (start.min(end), end)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f32],
    w: &[f32],
    out: &mut [f32],
    _n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) {
    let plane_in = h * wd;
    let plane_out = ho * wo;
    par::for_each_chunk_mut(out, plane_out, |chunk_idx, dst| {
        let ni = chunk_idx / cout;
        let co = chunk_idx % cout;
        for ci in 0..cin {
            let src = &x[(ni * cin + ci) * plane_in..][..plane_in];
            for khi in 0..kh {
                for kwi in 0..kw {
                    let wv = w[((co * cin + ci) * kh + khi) * kw + kwi];
                    let (ow_s, ow_e) = ow_range(kwi, padding, stride, wd, wo);
                    for oh in 0..ho {
                        let ih = oh * stride + khi;
                        if ih < padding || ih - padding >= h {
                            continue;
                        }
                        let in_row = &src[(ih - padding) * wd..];
                        let out_row = &mut dst[oh * wo..][..wo];
                        for ow in ow_s..ow_e {
                            let iw = ow * stride + kwi - padding;
                            out_row[ow] += wv * in_row[iw];
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    og: &[f32],
    w: &[f32],
    gx: &mut [f32],
    _n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) {
    let plane_in = h * wd;
    let plane_out = ho * wo;
    par::for_each_chunk_mut(gx, plane_in, |chunk_idx, dst| {
        let ni = chunk_idx / cin;
        let ci = chunk_idx % cin;
        for co in 0..cout {
            let gsrc = &og[(ni * cout + co) * plane_out..][..plane_out];
            for khi in 0..kh {
                for kwi in 0..kw {
                    let wv = w[((co * cin + ci) * kh + khi) * kw + kwi];
                    let (ow_s, ow_e) = ow_range(kwi, padding, stride, wd, wo);
                    for oh in 0..ho {
                        let ih = oh * stride + khi;
                        if ih < padding || ih - padding >= h {
                            continue;
                        }
                        let dst_row = &mut dst[(ih - padding) * wd..];
                        let g_row = &gsrc[oh * wo..][..wo];
                        for ow in ow_s..ow_e {
                            let iw = ow * stride + kwi - padding;
                            dst_row[iw] += wv * g_row[ow];
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weight(
    og: &[f32],
    x: &[f32],
    gw: &mut [f32],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) {
    let plane_in = h * wd;
    let plane_out = ho * wo;
    let per_filter = cin * kh * kw;
    par::for_each_chunk_mut(gw, per_filter, |co, dst| {
        for ci in 0..cin {
            for khi in 0..kh {
                for kwi in 0..kw {
                    let mut acc = 0.0f32;
                    let (ow_s, ow_e) = ow_range(kwi, padding, stride, wd, wo);
                    for ni in 0..n {
                        let src = &x[(ni * cin + ci) * plane_in..][..plane_in];
                        let gsrc = &og[(ni * cout + co) * plane_out..][..plane_out];
                        for oh in 0..ho {
                            let ih = oh * stride + khi;
                            if ih < padding || ih - padding >= h {
                                continue;
                            }
                            let in_row = &src[(ih - padding) * wd..];
                            let g_row = &gsrc[oh * wo..][..wo];
                            for ow in ow_s..ow_e {
                                let iw = ow * stride + kwi - padding;
                                acc += g_row[ow] * in_row[iw];
                            }
                        }
                    }
                    dst[(ci * kh + khi) * kw + kwi] = acc;
                }
            }
        }
    });
}
