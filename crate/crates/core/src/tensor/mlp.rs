use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    // Subgradient of ReLU at 0 is 0.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[out x in]`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Parameters of a feedforward network. Also used as the container for
/// gradients with respect to those parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Per-layer activations cached by [`mlp_forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Network input `[B x d_in]`.
    pub input: Matrix,
    /// Pre-activation of each layer `[B x out_k]`.
    pub pre: Vec<Matrix>,
    /// Post-activation of each layer; the last entry is the network output.
    pub post: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.post.last().expect("trace has at least one layer")
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    // Input to layer k.
    fn layer_input(&self, k: usize) -> &Matrix {
        if k == 0 {
            &self.input
        } else {
            &self.post[k - 1]
        }
    }
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::dim(
                    format!("layer {k} bias"),
                    layer.out_dim(),
                    layer.bias.len(),
                ));
            }
            if k > 0 && layers[k - 1].out_dim() != layer.in_dim() {
                return Err(Error::dim(
                    format!("layer {k} input"),
                    layers[k - 1].out_dim(),
                    layer.in_dim(),
                ));
            }
        }
        Ok(MlpParams { layers, activation })
    }

    /// Gaussian-initialized network with layer widths `[d_in, h_1, ..., d_out]`.
    pub fn gaussian<R: Rng + ?Sized>(widths: &[usize], std: f64, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "layer widths need an input and an output size".into(),
            ));
        }
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidArgument(format!("init std {std}: {e}")))?;
        let layers = widths
            .windows(2)
            .map(|w| {
                let (inp, out) = (w[0], w[1]);
                let weight: Vec<f64> = (0..inp * out).map(|_| normal.sample(rng)).collect();
                let bias: Vec<f64> = (0..out).map(|_| normal.sample(rng)).collect();
                Layer {
                    weight: Matrix::from_vec(out, inp, weight).expect("sized above"),
                    bias,
                }
            })
            .collect();
        MlpParams::new(layers, Activation::Relu)
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
            activation: self.activation,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer (weights row-major, then bias).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend_from_slice(l.weight.as_slice());
            v.extend_from_slice(&l.bias);
        }
        v
    }

    /// Same shape as `self`, values taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::dim("MlpParams::with_flat", self.num_params(), flat.len()));
        }
        let mut out = self.clone();
        let mut pos = 0;
        for l in &mut out.layers {
            let nw = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        Ok(out)
    }

    fn check_same_shape(&self, other: &MlpParams) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::dim("parameter layer count", self.layers.len(), other.layers.len()));
        }
        for (k, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a.weight.rows() != b.weight.rows() || a.weight.cols() != b.weight.cols() {
                return Err(Error::dim(
                    format!("layer {k} weight size"),
                    a.weight.as_slice().len(),
                    b.weight.as_slice().len(),
                ));
            }
        }
        Ok(())
    }

    /// Inner product of two same-shaped parameter sets.
    pub fn dot(&self, other: &MlpParams) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| dot(a.weight.as_slice(), b.weight.as_slice()) + dot(&a.bias, &b.bias))
            .sum())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &MlpParams, scale: f64) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.scale(s);
            l.bias.iter_mut().for_each(|b| *b *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

/// `params - step * grad`.
pub fn axpy_params(params: &MlpParams, grad: &MlpParams, step: f64) -> Result<MlpParams> {
    let mut out = params.clone();
    out.add_scaled(grad, -step)?;
    Ok(out)
}

pub fn mlp_forward(params: &MlpParams, x: &Matrix) -> Result<(Matrix, ForwardTrace)> {
    if x.cols() != params.in_dim() {
        return Err(Error::dim("layer 0 input", params.in_dim(), x.cols()));
    }
    let n_layers = params.layers.len();
    let mut pre = Vec::with_capacity(n_layers);
    let mut post: Vec<Matrix> = Vec::with_capacity(n_layers);
    for (k, layer) in params.layers.iter().enumerate() {
        let input = if k == 0 { x } else { &post[k - 1] };
        let mut z = Matrix::zeros(input.rows(), layer.out_dim());
        for b in 0..input.rows() {
            let a = input.row(b);
            let zr = z.row_mut(b);
            for (o, zo) in zr.iter_mut().enumerate() {
                *zo = dot(layer.weight.row(o), a) + layer.bias[o];
            }
        }
        let last = k + 1 == n_layers;
        let mut h = z.clone();
        if !last {
            h.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = params.activation.apply(*v));
        }
        pre.push(z);
        post.push(h);
    }
    let out = post.last().expect("non-empty").clone();
    if !out.is_finite() {
        return Err(Error::NonFinite("mlp_forward".into()));
    }
    Ok((
        out,
        ForwardTrace {
            input: x.clone(),
            pre,
            post,
        },
    ))
}

/// Per-layer error signals `dL/dpre_k` for every sample, given `dL/doutput`.
fn backward_deltas(params: &MlpParams, trace: &ForwardTrace, upstream: &Matrix) -> Vec<Matrix> {
    let n_layers = params.layers.len();
    let mut deltas: Vec<Matrix> = vec![Matrix::zeros(0, 0); n_layers];
    let mut delta = upstream.clone();
    for k in (0..n_layers).rev() {
        if k + 1 < n_layers {
            // delta currently holds dL/dpost_k
            let pre = &trace.pre[k];
            for (d, &p) in delta.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *d *= params.activation.derivative(p);
            }
        }
        let next = if k > 0 {
            let w = &params.layers[k].weight;
            let mut prev = Matrix::zeros(delta.rows(), w.cols());
            for b in 0..delta.rows() {
                let dr = delta.row(b);
                let pr = prev.row_mut(b);
                for (o, &g) in dr.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    for (p, &wv) in pr.iter_mut().zip(w.row(o)) {
                        *p += g * wv;
                    }
                }
            }
            Some(prev)
        } else {
            None
        };
        deltas[k] = delta;
        if let Some(prev) = next {
            delta = prev;
        } else {
            break;
        }
    }
    deltas
}

/// Reverse-mode pass: gradient of `sum(upstream ⊙ output)` with respect to the
/// parameters and to the network input.
pub fn mlp_backward(
    params: &MlpParams,
    trace: &ForwardTrace,
    upstream: &Matrix,
) -> Result<(MlpParams, Matrix)> {
    let out = trace.output();
    if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
        return Err(Error::dim(
            "mlp_backward upstream",
            out.rows() * out.cols(),
            upstream.rows() * upstream.cols(),
        ));
    }
    let deltas = backward_deltas(params, trace, upstream);
    let mut grad = params.zeros_like();
    for (k, layer_grad) in grad.layers.iter_mut().enumerate() {
        accumulate_layer_grad(layer_grad, &deltas[k], trace.layer_input(k), None);
    }
    let w0 = &params.layers[0].weight;
    let d0 = &deltas[0];
    let mut dinput = Matrix::zeros(d0.rows(), w0.cols());
    for b in 0..d0.rows() {
        let dr = d0.row(b);
        let ir = dinput.row_mut(b);
        for (o, &g) in dr.iter().enumerate() {
            for (p, &wv) in ir.iter_mut().zip(w0.row(o)) {
                *p += g * wv;
            }
        }
    }
    Ok((grad, dinput))
}

// grad += Σ_b delta_b ⊗ input_b, over samples in ascending order (or one sample).
fn accumulate_layer_grad(layer: &mut Layer, delta: &Matrix, input: &Matrix, only: Option<usize>) {
    let samples: Box<dyn Iterator<Item = usize>> = match only {
        Some(b) => Box::new(std::iter::once(b)),
        None => Box::new(0..delta.rows()),
    };
    for b in samples {
        let dr = delta.row(b);
        let ar = input.row(b);
        for (o, &g) in dr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (w, &a) in layer.weight.row_mut(o).iter_mut().zip(ar) {
                *w += g * a;
            }
            layer.bias[o] += g;
        }
    }
}

/// `-log softmax(logits)[label]`, with max-subtraction.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    Ok(lse - logits[label])
}

// Loss and dL/dlogits = softmax - onehot.
fn xent_with_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let loss = softmax_cross_entropy(logits, label)?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let mut g: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    g[label] -= 1.0;
    Ok((loss, g))
}

fn check_batch(params: &MlpParams, x: &Matrix, y: &[usize]) -> Result<()> {
    if y.len() != x.rows() {
        return Err(Error::dim("labels vs batch rows", x.rows(), y.len()));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= params.out_dim()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} outputs",
            params.out_dim()
        )));
    }
    Ok(())
}

/// Weighted cross-entropy `Σ_j w_j L_j` and its exact parameter gradient.
pub fn loss_and_grad(
    params: &MlpParams,
    x: &Matrix,
    y: &[usize],
    weights: &[f64],
) -> Result<(f64, MlpParams)> {
    check_batch(params, x, y)?;
    if weights.len() != x.rows() {
        return Err(Error::dim("sample weights", x.rows(), weights.len()));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative sample weight {w}")));
    }
    let (logits, trace) = mlp_forward(params, x)?;
    let mut upstream = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (j, (&label, &w)) in y.iter().zip(weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let (l, g) = xent_with_grad(logits.row(j), label)?;
        loss += w * l;
        for (u, gv) in upstream.row_mut(j).iter_mut().zip(g) {
            *u = w * gv;
        }
    }
    let (grad, _) = mlp_backward(params, &trace, &upstream)?;
    Ok((loss, grad))
}

/// Gradient of each single-example loss `L_j` with respect to the parameters.
pub fn per_sample_grads(params: &MlpParams, x: &Matrix, y: &[usize]) -> Result<Vec<MlpParams>> {
    check_batch(params, x, y)?;
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("per-sample gradients need a non-empty batch".into()));
    }
    let (logits, trace) = mlp_forward(params, x)?;
    let mut upstream = Matrix::zeros(logits.rows(), logits.cols());
    for (j, &label) in y.iter().enumerate() {
        let (_, g) = xent_with_grad(logits.row(j), label)?;
        upstream.row_mut(j).copy_from_slice(&g);
    }
    let deltas = backward_deltas(params, &trace, &upstream);
    Ok((0..x.rows())
        .map(|j| {
            let mut g = params.zeros_like();
            for (k, layer) in g.layers.iter_mut().enumerate() {
                accumulate_layer_grad(layer, &deltas[k], trace.layer_input(k), Some(j));
            }
            g
        })
        .collect())
}

/// Mean cross-entropy and top-1 accuracy. Ties in the argmax go to the lowest class.
pub fn mean_loss_and_accuracy(params: &MlpParams, x: &Matrix, y: &[usize]) -> Result<(f64, f64)> {
    check_batch(params, x, y)?;
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let (logits, _) = mlp_forward(params, x)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (j, &label) in y.iter().enumerate() {
        let row = logits.row(j);
        loss += softmax_cross_entropy(row, label)?;
        if argmax(row) == label {
            correct += 1;
        }
    }
    let n = x.rows() as f64;
    Ok((loss / n, correct as f64 / n))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
