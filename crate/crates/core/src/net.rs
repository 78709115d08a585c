//! A small feed-forward / convolutional network with exact analytic gradients.
//!
//! Parameters live in one flat [`ParamVector`]. Every parameterized layer owns a
//! contiguous slice laid out as `weights` followed by `bias`; convolution weights
//! are stored `[out][in][kh][kw]` and fully-connected weights `[out][in]`.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    FullyConnected {
        out_dim: usize,
    },
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
    },
    GlobalAvgPool,
    SoftmaxHead {
        num_classes: usize,
    },
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, padding: usize) -> Self {
        LayerSpec::Conv2d { out_channels, kernel_h: kernel, kernel_w: kernel, stride: 1, padding }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv2d { .. } | LayerSpec::FullyConnected { .. } | LayerSpec::SoftmaxHead { .. }
        )
    }
}

/// Channel-height-width extent of a single example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Location of one parameterized layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlice {
    /// Index of the layer in the network's layer list.
    pub layer: usize,
    pub offset: usize,
    pub out_channels: usize,
    /// Weights per output channel: `in_channels * kernel_h * kernel_w` (conv) or `in_dim` (FC).
    pub fan_in: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl ParamSlice {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.fan_in
    }

    pub fn bias_offset(&self) -> usize {
        self.offset + self.weight_len()
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Flat indices of the fan-in weights and bias of one output channel.
    pub fn channel_indices(&self, channel: usize) -> Vec<usize> {
        let start = self.offset + channel * self.fan_in;
        let mut idx: Vec<usize> = (start..start + self.fan_in).collect();
        idx.push(self.bias_offset() + channel);
        idx
    }
}

/// Flat parameter vector with its per-layer layout and the shared/fresh partition.
///
/// `shared[j]` is true when parameter `j` belongs to the part inherited from the
/// source architecture. The classification head is always the fresh part.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<ParamSlice>,
    pub shared: Vec<bool>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn shared_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.shared[j]).collect()
    }

    pub fn fresh_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| !self.shared[j]).collect()
    }

    pub fn shared_count(&self) -> usize {
        self.shared.iter().filter(|&&s| s).count()
    }

    /// Values restricted to the shared part, in index order.
    pub fn shared_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.shared)
            .filter_map(|(&v, &s)| s.then_some(v))
            .collect()
    }
}

/// Result of a forward pass: the input, every layer output, and the head logits.
#[derive(Debug, Clone)]
pub struct Forward {
    pub input: Tensor,
    /// Output of layer `i`, shaped `(B, c, h, w)`; the last entry holds the class probabilities as `(B, K)`.
    pub activations: Vec<Tensor>,
    pub logits: Tensor,
}

impl Forward {
    pub fn probs(&self) -> &Tensor {
        self.activations.last().expect("network has at least one layer")
    }

    /// `log f_k(x_b)` computed from the logits with a stable log-sum-exp.
    pub fn log_prob(&self, b: usize, k: usize) -> f64 {
        let row = self.logits.item(b);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        row[k] - lse
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    input_shape: Shape3,
    /// Output extent of each layer.
    shapes: Vec<Shape3>,
    pub params: ParamVector,
}

/// The reference desk-scale architecture: two conv/ReLU/max-pool stages, global
/// average pooling, and a softmax head.
pub fn desknet(num_classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(16, 3, 1),
        LayerSpec::Relu,
        LayerSpec::MaxPool { k: 2, stride: 2 },
        LayerSpec::conv(32, 3, 1),
        LayerSpec::Relu,
        LayerSpec::MaxPool { k: 2, stride: 2 },
        LayerSpec::GlobalAvgPool,
        LayerSpec::SoftmaxHead { num_classes },
    ]
}

fn conv_out(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl Network {
    /// Build a network and initialize its parameters from `seed`.
    ///
    /// Hidden layers use uniform(±sqrt(6/fan_in)); the head uses
    /// uniform(±sqrt(6/(fan_in+fan_out))). Biases start at zero.
    pub fn new(input_shape: Shape3, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut net = Self::with_zero_params(input_shape, layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slice in net.params.layout.clone() {
            let is_head = matches!(net.layers[slice.layer], LayerSpec::SoftmaxHead { .. });
            let bound = if is_head {
                (6.0 / (slice.fan_in + slice.out_channels) as f64).sqrt()
            } else {
                (6.0 / slice.fan_in as f64).sqrt()
            };
            fill_uniform(&mut net.params.values[slice.offset..slice.bias_offset()], bound, &mut rng);
        }
        Ok(net)
    }

    /// Validate the architecture and allocate an all-zero parameter vector.
    pub fn with_zero_params(input_shape: Shape3, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() {
            return Err(Error::Architecture("empty input shape".into()));
        }
        let heads = layers.iter().filter(|l| matches!(l, LayerSpec::SoftmaxHead { .. })).count();
        if heads != 1 || !matches!(layers.last(), Some(LayerSpec::SoftmaxHead { .. })) {
            return Err(Error::Architecture(
                "exactly one softmax head is required and it must be the last layer".into(),
            ));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut layout = Vec::new();
        let mut cur = input_shape;
        let mut offset = 0;
        for (i, layer) in layers.iter().enumerate() {
            let next = match *layer {
                LayerSpec::Conv2d { out_channels, kernel_h, kernel_w, stride, padding } => {
                    let h = conv_out(cur.h, kernel_h, stride, padding);
                    let w = conv_out(cur.w, kernel_w, stride, padding);
                    let (Some(h), Some(w)) = (h, w) else {
                        return Err(Error::Architecture(format!(
                            "layer {i}: conv kernel {kernel_h}x{kernel_w} does not fit input {}x{}",
                            cur.h, cur.w
                        )));
                    };
                    if out_channels == 0 {
                        return Err(Error::Architecture(format!("layer {i}: zero output channels")));
                    }
                    let slice = ParamSlice {
                        layer: i,
                        offset,
                        out_channels,
                        fan_in: cur.c * kernel_h * kernel_w,
                        in_channels: cur.c,
                        kernel_h,
                        kernel_w,
                    };
                    offset += slice.len();
                    layout.push(slice);
                    Shape3::new(out_channels, h, w)
                }
                LayerSpec::FullyConnected { out_dim: out } | LayerSpec::SoftmaxHead { num_classes: out } => {
                    if out == 0 {
                        return Err(Error::Architecture(format!("layer {i}: zero outputs")));
                    }
                    let slice = ParamSlice {
                        layer: i,
                        offset,
                        out_channels: out,
                        fan_in: cur.len(),
                        in_channels: cur.len(),
                        kernel_h: 1,
                        kernel_w: 1,
                    };
                    offset += slice.len();
                    layout.push(slice);
                    Shape3::new(out, 1, 1)
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool { k, stride } => {
                    let h = conv_out(cur.h, k, stride, 0);
                    let w = conv_out(cur.w, k, stride, 0);
                    let (Some(h), Some(w)) = (h, w) else {
                        return Err(Error::Architecture(format!(
                            "layer {i}: pool window {k} does not fit input {}x{}",
                            cur.h, cur.w
                        )));
                    };
                    Shape3::new(cur.c, h, w)
                }
                LayerSpec::GlobalAvgPool => Shape3::new(cur.c, 1, 1),
            };
            shapes.push(next);
            cur = next;
        }
        let head = *layout.last().expect("head is parameterized");
        let mut shared = vec![true; offset];
        for s in &mut shared[head.range()] {
            *s = false;
        }
        Ok(Self {
            layers,
            input_shape,
            shapes,
            params: ParamVector { values: vec![0.0; offset], layout, shared },
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input_shape
    }

    pub fn output_shape(&self, layer: usize) -> Shape3 {
        self.shapes[layer]
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::SoftmaxHead { num_classes }) => *num_classes,
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn head_slice(&self) -> ParamSlice {
        *self.params.layout.last().expect("validated at construction")
    }

    /// Parameterized layers excluding the head, in input-to-output order.
    pub fn body_slices(&self) -> &[ParamSlice] {
        let n = self.params.layout.len();
        &self.params.layout[..n - 1]
    }

    /// Swap in a freshly initialized head with `num_classes` outputs.
    ///
    /// Every non-head parameter is copied bit-for-bit; the fresh part becomes the new head.
    pub fn replace_head(&self, num_classes: usize, seed: u64) -> Result<Network> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "a replacement head needs at least 2 classes, got {num_classes}"
            )));
        }
        let mut layers = self.layers.clone();
        *layers.last_mut().expect("validated") = LayerSpec::SoftmaxHead { num_classes };
        let mut net = Network::with_zero_params(self.input_shape, layers)?;
        let old_head = self.head_slice();
        net.params.values[..old_head.offset].copy_from_slice(&self.params.values[..old_head.offset]);
        let head = net.head_slice();
        let bound = (6.0 / (head.fan_in + head.out_channels) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fill_uniform(&mut net.params.values[head.offset..head.bias_offset()], bound, &mut rng);
        Ok(net)
    }

    /// Copy of this network carrying `donor`'s classification head.
    pub fn with_head_from(&self, donor: &Network) -> Result<Network> {
        if donor.layers.len() != self.layers.len()
            || donor.input_shape != self.input_shape
            || donor.layers[..donor.layers.len() - 1] != self.layers[..self.layers.len() - 1]
        {
            return Err(Error::Shape("head donor has a different body architecture".into()));
        }
        let mut layers = self.layers.clone();
        *layers.last_mut().expect("validated") = *donor.layers.last().expect("validated");
        let mut net = Network::with_zero_params(self.input_shape, layers)?;
        let body = self.head_slice().offset;
        net.params.values[..body].copy_from_slice(&self.params.values[..body]);
        let head = donor.head_slice();
        net.params.values[head.range()].copy_from_slice(&donor.params.values[head.range()]);
        Ok(net)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        let ok = s.len() == 4
            && s[1] == self.input_shape.c
            && s[2] == self.input_shape.h
            && s[3] == self.input_shape.w;
        if !ok {
            return Err(Error::Shape(format!(
                "batch shape {:?} does not match network input (B, {}, {}, {})",
                s, self.input_shape.c, self.input_shape.h, self.input_shape.w
            )));
        }
        Ok(())
    }

    /// Run the network on a `(B, C, H, W)` batch, keeping every activation.
    pub fn forward(&self, batch: &Tensor) -> Result<Forward> {
        self.check_batch(batch)?;
        let bsz = batch.batch();
        let mut activations: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        let mut logits = Tensor::zeros(vec![bsz, 0]);
        let mut slices = self.params.layout.iter();
        let mut in_shape = self.input_shape;
        for (i, layer) in self.layers.iter().enumerate() {
            let x = if i == 0 { batch } else { &activations[i - 1] };
            let out_shape = self.shapes[i];
            let out = match *layer {
                LayerSpec::Conv2d { stride, padding, .. } => {
                    let slice = slices.next().expect("layout matches layers");
                    self.conv_forward(slice, x, in_shape, out_shape, stride, padding)
                }
                LayerSpec::FullyConnected { .. } => {
                    let slice = slices.next().expect("layout matches layers");
                    self.dense_forward(slice, x, out_shape)
                }
                LayerSpec::SoftmaxHead { num_classes } => {
                    let slice = slices.next().expect("layout matches layers");
                    let z = self.dense_forward(slice, x, out_shape).reshape(vec![bsz, num_classes])?;
                    let mut p = z.clone();
                    for b in 0..bsz {
                        softmax_in_place(p.item_mut(b));
                    }
                    logits = z;
                    p
                }
                LayerSpec::Relu => {
                    let mut y = x.clone();
                    for v in y.data_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                    y
                }
                LayerSpec::MaxPool { k, stride } => maxpool_forward(x, in_shape, out_shape, k, stride),
                LayerSpec::GlobalAvgPool => {
                    let hw = in_shape.h * in_shape.w;
                    let mut y = Tensor::zeros(vec![bsz, in_shape.c, 1, 1]);
                    for b in 0..bsz {
                        let xi = x.item(b);
                        let yi = y.item_mut(b);
                        for c in 0..in_shape.c {
                            yi[c] = xi[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64;
                        }
                    }
                    y
                }
            };
            out.ensure_finite(&format!("layer {i} output"))?;
            activations.push(out);
            in_shape = out_shape;
        }
        Ok(Forward { input: batch.clone(), activations, logits })
    }

    /// Class probabilities only, computed in chunks to bound memory.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 256;
        let n = batch.batch();
        let k = self.num_classes();
        let mut out = Vec::with_capacity(n * k);
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let fwd = self.forward(&batch.gather(&idx))?;
            out.extend_from_slice(fwd.probs().data());
            start = end;
        }
        Tensor::new(vec![n, k], out)
    }

    /// Gradient with respect to all parameters, given the gradient of a scalar
    /// objective with respect to the head logits (`(B, K)` row-major).
    ///
    /// Parameterized body layers with index `< skip_layers` get no gradient (left at 0),
    /// and backpropagation stops once nothing below needs it.
    pub fn backward(&self, fwd: &Forward, dlogits: &[f64], skip_layers: usize) -> Result<Vec<f64>> {
        let bsz = fwd.input.batch();
        let k = self.num_classes();
        if dlogits.len() != bsz * k {
            return Err(Error::Shape(format!(
                "logit gradient has {} entries, expected {}",
                dlogits.len(),
                bsz * k
            )));
        }
        let mut grad = vec![0.0; self.num_params()];
        let n_body = self.params.layout.len() - 1;
        let skip = skip_layers.min(n_body);
        // Lowest layer index whose parameters need a gradient.
        let lowest = if skip < n_body {
            self.params.layout[skip].layer
        } else {
            self.head_slice().layer
        };
        let mut slice_idx = self.params.layout.len();
        let mut dy = dlogits.to_vec();
        for i in (0..self.layers.len()).rev() {
            let x = if i == 0 { &fwd.input } else { &fwd.activations[i - 1] };
            let in_shape = if i == 0 { self.input_shape } else { self.shapes[i - 1] };
            let out_shape = self.shapes[i];
            let need_dx = i > lowest;
            dy = match self.layers[i] {
                LayerSpec::SoftmaxHead { .. } | LayerSpec::FullyConnected { .. } => {
                    slice_idx -= 1;
                    let slice = &self.params.layout[slice_idx];
                    self.dense_backward(slice, x, &dy, bsz, &mut grad, need_dx)
                }
                LayerSpec::Conv2d { stride, padding, .. } => {
                    slice_idx -= 1;
                    let slice = &self.params.layout[slice_idx];
                    self.conv_backward(slice, x, in_shape, out_shape, stride, padding, &dy, &mut grad, need_dx)
                }
                LayerSpec::Relu => {
                    let y = fwd.activations[i].data();
                    dy.iter().zip(y).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect()
                }
                LayerSpec::MaxPool { k, stride } => maxpool_backward(x, in_shape, out_shape, k, stride, &dy),
                LayerSpec::GlobalAvgPool => {
                    let hw = in_shape.h * in_shape.w;
                    let mut dx = vec![0.0; bsz * in_shape.len()];
                    for b in 0..bsz {
                        for c in 0..in_shape.c {
                            let g = dy[b * in_shape.c + c] / hw as f64;
                            let base = b * in_shape.len() + c * hw;
                            dx[base..base + hw].iter_mut().for_each(|v| *v = g);
                        }
                    }
                    dx
                }
            };
            if !need_dx {
                break;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        Ok(grad)
    }

    /// Mean negative log-likelihood over the batch and its exact gradient.
    pub fn loss_and_grad(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.loss_and_grad_skipping(batch, labels, 0)
    }

    pub(crate) fn loss_and_grad_skipping(
        &self,
        batch: &Tensor,
        labels: &[usize],
        skip_layers: usize,
    ) -> Result<(f64, Vec<f64>)> {
        let k = self.num_classes();
        if labels.len() != batch.batch() {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {}",
                labels.len(),
                batch.batch()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let fwd = self.forward(batch)?;
        let bsz = labels.len() as f64;
        let mut loss = 0.0;
        let mut dlogits = fwd.probs().data().to_vec();
        for (b, &y) in labels.iter().enumerate() {
            loss -= fwd.log_prob(b, y);
            dlogits[b * k + y] -= 1.0;
        }
        dlogits.iter_mut().for_each(|g| *g /= bsz);
        let grad = self.backward(&fwd, &dlogits, skip_layers)?;
        Ok((loss / bsz, grad))
    }

    /// Exact gradient of `log f_k(x; w)` for a single example.
    pub fn per_class_logprob_grad(&self, x: &Tensor, k: usize) -> Result<Vec<f64>> {
        if x.batch() != 1 {
            return Err(Error::Shape(format!("expected a single example, got batch {}", x.batch())));
        }
        let classes = self.num_classes();
        if k >= classes {
            return Err(Error::LabelOutOfRange { label: k, classes });
        }
        let fwd = self.forward(x)?;
        self.class_score(&fwd, k)
    }

    /// Score `∇ log f_k` for a single-example forward pass already computed.
    pub(crate) fn class_score(&self, fwd: &Forward, k: usize) -> Result<Vec<f64>> {
        let p = fwd.probs().item(0);
        if p[k] == 0.0 {
            return Err(Error::ZeroProbability(k));
        }
        let mut dlogits: Vec<f64> = p.iter().map(|&v| -v).collect();
        dlogits[k] += 1.0;
        self.backward(fwd, &dlogits, 0)
    }

    fn dense_forward(&self, slice: &ParamSlice, x: &Tensor, out_shape: Shape3) -> Tensor {
        let bsz = x.batch();
        let (n_in, n_out) = (slice.fan_in, slice.out_channels);
        let w = &self.params.values[slice.offset..slice.bias_offset()];
        let bias = &self.params.values[slice.bias_offset()..slice.bias_offset() + n_out];
        let mut y = vec![0.0; bsz * n_out];
        for b in 0..bsz {
            y[b * n_out..(b + 1) * n_out].copy_from_slice(bias);
        }
        gemm(bsz, n_in, n_out, x.data(), false, w, true, &mut y, true);
        Tensor::new(vec![bsz, out_shape.c, out_shape.h, out_shape.w], y).expect("sizes agree")
    }

    fn dense_backward(
        &self,
        slice: &ParamSlice,
        x: &Tensor,
        dy: &[f64],
        bsz: usize,
        grad: &mut [f64],
        need_dx: bool,
    ) -> Vec<f64> {
        let (n_in, n_out) = (slice.fan_in, slice.out_channels);
        let (w_range, b_off) = (slice.offset..slice.bias_offset(), slice.bias_offset());
        gemm(n_out, bsz, n_in, dy, true, x.data(), false, &mut grad[w_range.clone()], true);
        for b in 0..bsz {
            for o in 0..n_out {
                grad[b_off + o] += dy[b * n_out + o];
            }
        }
        if !need_dx {
            return Vec::new();
        }
        let mut dx = vec![0.0; bsz * n_in];
        gemm(bsz, n_out, n_in, dy, false, &self.params.values[w_range], false, &mut dx, false);
        dx
    }

    fn conv_forward(
        &self,
        slice: &ParamSlice,
        x: &Tensor,
        in_shape: Shape3,
        out_shape: Shape3,
        stride: usize,
        padding: usize,
    ) -> Tensor {
        let bsz = x.batch();
        let positions = out_shape.h * out_shape.w;
        let w = &self.params.values[slice.offset..slice.bias_offset()];
        let bias = &self.params.values[slice.bias_offset()..slice.bias_offset() + slice.out_channels];
        let mut cols = vec![0.0; slice.fan_in * positions];
        let mut y = Tensor::zeros(vec![bsz, out_shape.c, out_shape.h, out_shape.w]);
        for b in 0..bsz {
            im2col(x.item(b), in_shape, out_shape, slice, stride, padding, &mut cols);
            let yb = y.item_mut(b);
            for (o, &bv) in bias.iter().enumerate() {
                yb[o * positions..(o + 1) * positions].iter_mut().for_each(|v| *v = bv);
            }
            gemm(slice.out_channels, slice.fan_in, positions, w, false, &cols, false, yb, true);
        }
        y
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        slice: &ParamSlice,
        x: &Tensor,
        in_shape: Shape3,
        out_shape: Shape3,
        stride: usize,
        padding: usize,
        dy: &[f64],
        grad: &mut [f64],
        need_dx: bool,
    ) -> Vec<f64> {
        let bsz = x.batch();
        let positions = out_shape.h * out_shape.w;
        let n_out = slice.out_channels;
        let w_range = slice.offset..slice.bias_offset();
        let b_off = slice.bias_offset();
        let mut cols = vec![0.0; slice.fan_in * positions];
        let mut dcols = vec![0.0; slice.fan_in * positions];
        let mut dx = if need_dx { vec![0.0; bsz * in_shape.len()] } else { Vec::new() };
        let out_len = out_shape.len();
        for b in 0..bsz {
            let dyb = &dy[b * out_len..(b + 1) * out_len];
            im2col(x.item(b), in_shape, out_shape, slice, stride, padding, &mut cols);
            gemm(n_out, positions, slice.fan_in, dyb, false, &cols, true, &mut grad[w_range.clone()], true);
            for o in 0..n_out {
                grad[b_off + o] += dyb[o * positions..(o + 1) * positions].iter().sum::<f64>();
            }
            if need_dx {
                let w = &self.params.values[w_range.clone()];
                gemm(slice.fan_in, n_out, positions, w, true, dyb, false, &mut dcols, false);
                let dxb = &mut dx[b * in_shape.len()..(b + 1) * in_shape.len()];
                col2im(&dcols, in_shape, out_shape, slice, stride, padding, dxb);
            }
        }
        dx
    }
}

fn fill_uniform(values: &mut [f64], bound: f64, rng: &mut ChaCha8Rng) {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    for v in values {
        *v = dist.sample(rng);
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn im2col(
    x: &[f64],
    in_shape: Shape3,
    out_shape: Shape3,
    slice: &ParamSlice,
    stride: usize,
    padding: usize,
    cols: &mut [f64],
) {
    let positions = out_shape.h * out_shape.w;
    let (kh, kw) = (slice.kernel_h, slice.kernel_w);
    for c in 0..in_shape.c {
        let plane = &x[c * in_shape.h * in_shape.w..(c + 1) * in_shape.h * in_shape.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * positions;
                let dst = &mut cols[row..row + positions];
                for oy in 0..out_shape.h {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let line = &mut dst[oy * out_shape.w..(oy + 1) * out_shape.w];
                    if iy < 0 || iy >= in_shape.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * in_shape.w..(iy as usize + 1) * in_shape.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        *v = if ix < 0 || ix >= in_shape.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    in_shape: Shape3,
    out_shape: Shape3,
    slice: &ParamSlice,
    stride: usize,
    padding: usize,
    dx: &mut [f64],
) {
    let positions = out_shape.h * out_shape.w;
    let (kh, kw) = (slice.kernel_h, slice.kernel_w);
    for c in 0..in_shape.c {
        let plane = &mut dx[c * in_shape.h * in_shape.w..(c + 1) * in_shape.h * in_shape.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * positions;
                let src = &cols[row..row + positions];
                for oy in 0..out_shape.h {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= in_shape.h as isize {
                        continue;
                    }
                    let base = iy as usize * in_shape.w;
                    for ox in 0..out_shape.w {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < in_shape.w as isize {
                            plane[base + ix as usize] += src[oy * out_shape.w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Flat index of the maximum in each pooling window (first wins on ties).
fn maxpool_argmax(xb: &[f64], in_shape: Shape3, k: usize, stride: usize, c: usize, oy: usize, ox: usize) -> usize {
    let plane = c * in_shape.h * in_shape.w;
    let mut best = plane + oy * stride * in_shape.w + ox * stride;
    for dy in 0..k {
        for dx in 0..k {
            let idx = plane + (oy * stride + dy) * in_shape.w + ox * stride + dx;
            if xb[idx] > xb[best] {
                best = idx;
            }
        }
    }
    best
}

fn maxpool_forward(x: &Tensor, in_shape: Shape3, out_shape: Shape3, k: usize, stride: usize) -> Tensor {
    let bsz = x.batch();
    let mut y = Tensor::zeros(vec![bsz, out_shape.c, out_shape.h, out_shape.w]);
    for b in 0..bsz {
        let xb = x.item(b);
        let yb = y.item_mut(b);
        for c in 0..out_shape.c {
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let idx = maxpool_argmax(xb, in_shape, k, stride, c, oy, ox);
                    yb[(c * out_shape.h + oy) * out_shape.w + ox] = xb[idx];
                }
            }
        }
    }
    y
}

fn maxpool_backward(x: &Tensor, in_shape: Shape3, out_shape: Shape3, k: usize, stride: usize, dy: &[f64]) -> Vec<f64> {
    let bsz = x.batch();
    let mut dx = vec![0.0; bsz * in_shape.len()];
    for b in 0..bsz {
        let xb = x.item(b);
        let dxb = &mut dx[b * in_shape.len()..(b + 1) * in_shape.len()];
        let dyb = &dy[b * out_shape.len()..(b + 1) * out_shape.len()];
        for c in 0..out_shape.c {
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let idx = maxpool_argmax(xb, in_shape, k, stride, c, oy, ox);
                    dxb[idx] += dyb[(c * out_shape.h + oy) * out_shape.w + ox];
                }
            }
        }
    }
    dx
}
