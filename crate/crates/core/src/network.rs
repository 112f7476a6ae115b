//! The fixed 1-D convolutional classifier: a stack of zero-padded strided
//! convolutions followed by dense layers, rectifier activations on every
//! hidden layer and raw logits at the output.
//!
//! Parameters live in one flat vector in declaration order (each conv
//! kernel followed by its bias, then each dense weight matrix row-major
//! followed by its bias). The same layout is used for gradients, for the
//! SGD update and for the on-disk model format.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{FormatFault, KdisError, Result};
use crate::numerics::{fnv1a64, RngStream, Tensor};
use crate::parallel::{for_each_chunk_mut, map_ordered, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayerSpec {
    pub fn output_length(&self, input_length: usize) -> Option<usize> {
        let padded = input_length + 2 * self.padding;
        if self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseLayerSpec {
    pub inputs: usize,
    pub outputs: usize,
}

/// Layer configuration of the classifier. Construct through
/// [`ArchitectureSpec::new`] so the shape chain is checked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub input_channels: usize,
    pub input_length: usize,
    pub conv_layers: Vec<ConvLayerSpec>,
    pub dense_layers: Vec<DenseLayerSpec>,
    #[serde(default)]
    pub hidden_activation: Activation,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        Self::new(
            1,
            30,
            vec![
                ConvLayerSpec {
                    in_channels: 1,
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                ConvLayerSpec {
                    in_channels: 16,
                    out_channels: 32,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
            ],
            vec![
                DenseLayerSpec {
                    inputs: 256,
                    outputs: 120,
                },
                DenseLayerSpec {
                    inputs: 120,
                    outputs: 84,
                },
                DenseLayerSpec {
                    inputs: 84,
                    outputs: 2,
                },
            ],
            Activation::Relu,
        )
        .expect("default architecture is consistent")
    }
}

/// Where one layer's weights and bias sit in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlot {
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl ArchitectureSpec {
    pub fn new(
        input_channels: usize,
        input_length: usize,
        conv_layers: Vec<ConvLayerSpec>,
        dense_layers: Vec<DenseLayerSpec>,
        hidden_activation: Activation,
    ) -> Result<Self> {
        let spec = Self {
            input_channels,
            input_length,
            conv_layers,
            dense_layers,
            hidden_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks every link of the shape chain, including the flatten identity
    /// `out_channels_last × length_last == dense_layers[0].inputs`.
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.input_length == 0 {
            return Err(KdisError::invalid(
                "input channels and length must be positive",
            ));
        }
        if self.dense_layers.is_empty() {
            return Err(KdisError::invalid("at least one dense layer is required"));
        }
        let mut channels = self.input_channels;
        let mut length = self.input_length;
        for (i, layer) in self.conv_layers.iter().enumerate() {
            if layer.in_channels != channels {
                return Err(KdisError::invalid(format!(
                    "conv layer {i}: in_channels {} but previous layer yields {channels}",
                    layer.in_channels
                )));
            }
            if layer.out_channels == 0 || layer.kernel == 0 || layer.stride == 0 {
                return Err(KdisError::invalid(format!(
                    "conv layer {i}: out_channels, kernel and stride must be positive"
                )));
            }
            length = layer.output_length(length).ok_or_else(|| {
                KdisError::invalid(format!(
                    "conv layer {i}: length {length} + 2·{} < kernel {}",
                    layer.padding, layer.kernel
                ))
            })?;
            channels = layer.out_channels;
        }
        let mut width = channels * length;
        for (i, layer) in self.dense_layers.iter().enumerate() {
            if layer.inputs != width {
                return Err(KdisError::invalid(format!(
                    "dense layer {i}: inputs {} but previous stage yields {width}",
                    layer.inputs
                )));
            }
            if layer.outputs == 0 {
                return Err(KdisError::invalid(format!("dense layer {i}: zero outputs")));
            }
            width = layer.outputs;
        }
        if width < 2 {
            return Err(KdisError::invalid("classifier needs at least two classes"));
        }
        Ok(())
    }

    /// Sequence lengths: the input length followed by each conv output length.
    pub fn conv_lengths(&self) -> Vec<usize> {
        let mut lengths = vec![self.input_length];
        for layer in &self.conv_layers {
            let last = *lengths.last().unwrap();
            lengths.push(layer.output_length(last).unwrap_or(0));
        }
        lengths
    }

    pub fn flatten_size(&self) -> usize {
        let channels = self
            .conv_layers
            .last()
            .map_or(self.input_channels, |l| l.out_channels);
        channels * self.conv_lengths().last().copied().unwrap_or(0)
    }

    pub fn num_classes(&self) -> usize {
        self.dense_layers.last().map_or(0, |l| l.outputs)
    }

    pub fn sample_width(&self) -> usize {
        self.input_channels * self.input_length
    }

    /// Slots for conv layers followed by dense layers.
    pub fn layout(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        let mut slots = Vec::with_capacity(self.conv_layers.len() + self.dense_layers.len());
        let sizes = self
            .conv_layers
            .iter()
            .map(|l| (l.out_channels * l.in_channels * l.kernel, l.out_channels))
            .chain(
                self.dense_layers
                    .iter()
                    .map(|l| (l.outputs * l.inputs, l.outputs)),
            );
        for (w, b) in sizes {
            slots.push(LayerSlot {
                weight: offset..offset + w,
                bias: offset + w..offset + w + b,
            });
            offset += w + b;
        }
        slots
    }

    pub fn param_count(&self) -> usize {
        self.layout().last().map_or(0, |s| s.bias.end)
    }

    /// Human-readable layer name for a flat parameter index.
    pub fn describe_index(&self, index: usize) -> String {
        let n_conv = self.conv_layers.len();
        for (i, slot) in self.layout().iter().enumerate() {
            let (kind, layer) = if i < n_conv {
                ("conv", i)
            } else {
                ("dense", i - n_conv)
            };
            if slot.weight.contains(&index) {
                return format!("{kind}{layer}.weight[{}]", index - slot.weight.start);
            }
            if slot.bias.contains(&index) {
                return format!("{kind}{layer}.bias[{}]", index - slot.bias.start);
            }
        }
        format!("out-of-range[{index}]")
    }

    /// Little-endian u32 encoding of every layer tuple.
    pub fn descriptor_bytes(&self) -> Vec<u8> {
        let mut words: Vec<u32> = vec![
            self.input_channels as u32,
            self.input_length as u32,
            self.hidden_activation.code(),
            self.conv_layers.len() as u32,
        ];
        for l in &self.conv_layers {
            words.extend(
                [l.in_channels, l.out_channels, l.kernel, l.stride, l.padding].map(|v| v as u32),
            );
        }
        words.push(self.dense_layers.len() as u32);
        for l in &self.dense_layers {
            words.extend([l.inputs as u32, l.outputs as u32]);
        }
        words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn descriptor_hash(&self) -> u64 {
        fnv1a64(&self.descriptor_bytes())
    }
}

/// All weights and biases for one [`ArchitectureSpec`]. Gradients use the
/// same type.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnParameters {
    spec: ArchitectureSpec,
    values: Vec<f64>,
}

impl CnnParameters {
    pub fn zeros(spec: &ArchitectureSpec) -> Self {
        Self {
            values: vec![0.0; spec.param_count()],
            spec: spec.clone(),
        }
    }

    pub fn from_values(spec: &ArchitectureSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.param_count() {
            return Err(KdisError::invalid(format!(
                "architecture needs {} parameters, got {}",
                spec.param_count(),
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(KdisError::Numeric {
                index,
                detail: "parameter is not finite".into(),
            });
        }
        Ok(Self {
            spec: spec.clone(),
            values,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Cheap identity of the current values; used to detect stale caches.
    pub fn fingerprint(&self) -> u64 {
        self.values.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.to_bits())
                .wrapping_mul(0x0000_0100_0000_01b3)
                .rotate_left(5)
        })
    }

    /// FNV-1a over the little-endian parameter bytes.
    pub fn checksum(&self) -> u64 {
        crate::numerics::fnv1a64_f64(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn layer(&self, slot: &LayerSlot) -> (&[f64], &[f64]) {
        (
            &self.values[slot.weight.clone()],
            &self.values[slot.bias.clone()],
        )
    }
}

/// Fan-in scaled uniform weights (bound `sqrt(6 / fan_in)`) and zero biases,
/// drawn in declaration order.
pub fn init_params(spec: &ArchitectureSpec, rng: &mut RngStream) -> Result<CnnParameters> {
    spec.validate()?;
    let mut params = CnnParameters::zeros(spec);
    let fan_ins = spec
        .conv_layers
        .iter()
        .map(|l| l.in_channels * l.kernel)
        .chain(spec.dense_layers.iter().map(|l| l.inputs));
    for (slot, fan_in) in spec.layout().iter().zip(fan_ins) {
        let bound = (6.0 / fan_in as f64).sqrt();
        for w in &mut params.values[slot.weight.clone()] {
            *w = rng.uniform(-bound, bound);
        }
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Kernels on raw slices
// ---------------------------------------------------------------------------

/// Zero-padded patch matrix, `out_len × (in_ch·k)`; row `t` holds the
/// receptive field of output position `t` in kernel order.
fn im2col(
    input: &[f64],
    in_ch: usize,
    in_len: usize,
    layer: &ConvLayerSpec,
    out_len: usize,
) -> Vec<f64> {
    let k = layer.kernel;
    let width = in_ch * k;
    let pad = layer.padding as isize;
    let mut patches = vec![0.0; out_len * width];
    for (t, patch) in patches.chunks_exact_mut(width).enumerate() {
        let start = (t * layer.stride) as isize - pad;
        for c in 0..in_ch {
            let row = &input[c * in_len..(c + 1) * in_len];
            for j in 0..k {
                let x = start + j as isize;
                if x >= 0 && (x as usize) < in_len {
                    patch[c * k + j] = row[x as usize];
                }
            }
        }
    }
    patches
}

/// Scatter-adds a patch-matrix gradient back onto the input positions.
fn col2im_add(
    dpatches: &[f64],
    in_ch: usize,
    in_len: usize,
    layer: &ConvLayerSpec,
    out: &mut [f64],
) {
    let k = layer.kernel;
    let pad = layer.padding as isize;
    for (t, dpatch) in dpatches.chunks_exact(in_ch * k).enumerate() {
        let start = (t * layer.stride) as isize - pad;
        for c in 0..in_ch {
            for j in 0..k {
                let x = start + j as isize;
                if x >= 0 && (x as usize) < in_len {
                    out[c * in_len + x as usize] += dpatch[c * k + j];
                }
            }
        }
    }
}

fn conv_from_patches(
    patches: &[f64],
    kernel: &[f64],
    bias: &[f64],
    out_len: usize,
    out: &mut [f64],
) {
    let width = patches.len() / out_len.max(1);
    for (o, out_row) in out.chunks_exact_mut(out_len).enumerate() {
        let k_o = &kernel[o * width..(o + 1) * width];
        for (slot, patch) in out_row.iter_mut().zip(patches.chunks_exact(width)) {
            *slot = bias[o] + dot(k_o, patch);
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn dense_forward_raw(input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let n_in = input.len();
    for (o, slot) in out.iter_mut().enumerate() {
        *slot = bias[o] + dot(&weight[o * n_in..(o + 1) * n_in], input);
    }
}

fn relu(pre: &[f64], post: &mut [f64]) {
    for (p, &x) in post.iter_mut().zip(pre) {
        *p = if x > 0.0 { x } else { 0.0 };
    }
}

/// One sample's retained activations.
#[derive(Debug, Clone)]
struct SampleTrace {
    patches: Vec<Vec<f64>>,
    conv_pre: Vec<Vec<f64>>,
    conv_post: Vec<Vec<f64>>,
    dense_pre: Vec<Vec<f64>>,
    dense_post: Vec<Vec<f64>>,
}

impl SampleTrace {
    fn logits(&self) -> &[f64] {
        self.dense_pre.last().unwrap()
    }
}

fn forward_sample(params: &CnnParameters, layout: &[LayerSlot], input: &[f64]) -> SampleTrace {
    let spec = &params.spec;
    let lengths = spec.conv_lengths();
    let n_conv = spec.conv_layers.len();
    let mut trace = SampleTrace {
        patches: Vec::with_capacity(n_conv),
        conv_pre: Vec::with_capacity(n_conv),
        conv_post: Vec::with_capacity(n_conv),
        dense_pre: Vec::with_capacity(spec.dense_layers.len()),
        dense_post: Vec::with_capacity(spec.dense_layers.len()),
    };
    let mut in_ch = spec.input_channels;
    for (l, layer) in spec.conv_layers.iter().enumerate() {
        let (kernel, bias) = params.layer(&layout[l]);
        let out_len = lengths[l + 1];
        let src: &[f64] = if l == 0 {
            input
        } else {
            &trace.conv_post[l - 1]
        };
        let patches = im2col(src, in_ch, lengths[l], layer, out_len);
        let mut pre = vec![0.0; layer.out_channels * out_len];
        conv_from_patches(&patches, kernel, bias, out_len, &mut pre);
        trace.patches.push(patches);
        let mut post = vec![0.0; pre.len()];
        relu(&pre, &mut post);
        trace.conv_pre.push(pre);
        trace.conv_post.push(post);
        in_ch = layer.out_channels;
    }
    let last = spec.dense_layers.len() - 1;
    for (d, layer) in spec.dense_layers.iter().enumerate() {
        let (weight, bias) = params.layer(&layout[n_conv + d]);
        let mut pre = vec![0.0; layer.outputs];
        {
            let src: &[f64] = match d {
                0 if n_conv == 0 => input,
                0 => &trace.conv_post[n_conv - 1],
                _ => &trace.dense_post[d - 1],
            };
            dense_forward_raw(src, weight, bias, &mut pre);
        }
        let post = if d == last {
            Vec::new()
        } else {
            let mut post = vec![0.0; pre.len()];
            relu(&pre, &mut post);
            post
        };
        trace.dense_pre.push(pre);
        trace.dense_post.push(post);
    }
    trace
}

/// Loss gradients with respect to every layer's pre-activations for one
/// sample. Only the signals are propagated here; parameter gradients are
/// accumulated afterwards across the batch.
#[derive(Debug, Clone)]
struct SampleDeltas {
    conv: Vec<Vec<f64>>,
    dense: Vec<Vec<f64>>,
}

fn sample_deltas(
    params: &CnnParameters,
    layout: &[LayerSlot],
    trace: &SampleTrace,
    dlogits: &[f64],
) -> SampleDeltas {
    let spec = &params.spec;
    let n_conv = spec.conv_layers.len();
    let n_dense = spec.dense_layers.len();
    let mut dense = vec![Vec::new(); n_dense];
    let mut conv = vec![Vec::new(); n_conv];
    let mut delta = dlogits.to_vec();

    for d in (0..n_dense).rev() {
        let layer = spec.dense_layers[d];
        if d == 0 && n_conv == 0 {
            dense[d] = delta;
            return SampleDeltas { conv, dense };
        }
        let weight = &params.values[layout[n_conv + d].weight.clone()];
        let mut upstream = vec![0.0; layer.inputs];
        for (o, &g) in delta.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(
                &mut upstream,
                g,
                &weight[o * layer.inputs..(o + 1) * layer.inputs],
            );
        }
        let pre: &[f64] = if d == 0 {
            &trace.conv_pre[n_conv - 1]
        } else {
            &trace.dense_pre[d - 1]
        };
        for (u, &p) in upstream.iter_mut().zip(pre) {
            if p <= 0.0 {
                *u = 0.0;
            }
        }
        dense[d] = std::mem::replace(&mut delta, upstream);
    }

    let lengths = spec.conv_lengths();
    for l in (0..n_conv).rev() {
        if l == 0 {
            conv[0] = delta;
            break;
        }
        let layer = spec.conv_layers[l];
        let (in_ch, in_len, out_len, k) =
            (layer.in_channels, lengths[l], lengths[l + 1], layer.kernel);
        let width = in_ch * k;
        let kernel = &params.values[layout[l].weight.clone()];
        let mut dpatches = vec![0.0; out_len * width];
        for o in 0..layer.out_channels {
            let k_o = &kernel[o * width..(o + 1) * width];
            for (t, dpatch) in dpatches.chunks_exact_mut(width).enumerate() {
                let g = delta[o * out_len + t];
                if g != 0.0 {
                    axpy(dpatch, g, k_o);
                }
            }
        }
        let mut upstream = vec![0.0; in_ch * in_len];
        col2im_add(&dpatches, in_ch, in_len, &layer, &mut upstream);
        for (u, &p) in upstream.iter_mut().zip(&trace.conv_pre[l - 1]) {
            if p <= 0.0 {
                *u = 0.0;
            }
        }
        conv[l] = std::mem::replace(&mut delta, upstream);
    }
    SampleDeltas { conv, dense }
}

/// Input of layer `slot` (conv layers first, then dense) for sample `i`.
fn layer_input<'a>(
    spec: &ArchitectureSpec,
    cache: &'a ForwardCache,
    i: usize,
    slot: usize,
) -> &'a [f64] {
    let n_conv = spec.conv_layers.len();
    let width = spec.sample_width();
    let trace = &cache.traces[i];
    match slot {
        0 => &cache.inputs[i * width..(i + 1) * width],
        l if l < n_conv => &trace.conv_post[l - 1],
        l if l == n_conv => &trace.conv_post[n_conv - 1],
        l => &trace.dense_post[l - n_conv - 1],
    }
}

/// Adds the batch's contribution to one output unit's weights and bias.
/// Samples are added in batch order, one `+=` per sample and coordinate.
fn accumulate_unit(
    spec: &ArchitectureSpec,
    cache: &ForwardCache,
    deltas: &[SampleDeltas],
    slot: usize,
    o: usize,
    gw: &mut [f64],
    gb: &mut f64,
) {
    let n_conv = spec.conv_layers.len();
    if slot < n_conv {
        let out_len = spec.conv_lengths()[slot + 1];
        let mut acc = vec![0.0; gw.len()];
        for (i, sd) in deltas.iter().enumerate() {
            let patches = &cache.traces[i].patches[slot];
            let d_o = &sd.conv[slot][o * out_len..(o + 1) * out_len];
            let mut b = 0.0;
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (&g, patch) in d_o.iter().zip(patches.chunks_exact(gw.len())) {
                b += g;
                axpy(&mut acc, g, patch);
            }
            *gb += b;
            for (w, a) in gw.iter_mut().zip(&acc) {
                *w += a;
            }
        }
    } else {
        for (i, sd) in deltas.iter().enumerate() {
            let g = sd.dense[slot - n_conv][o];
            *gb += g;
            if g == 0.0 {
                continue;
            }
            axpy(gw, g, layer_input(spec, cache, i, slot));
        }
    }
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Zero-padded strided 1-D convolution of an `in_ch × L` input with an
/// `out_ch × in_ch × k` kernel.
pub fn conv1d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if input.shape().len() != 2 {
        return Err(KdisError::invalid(format!(
            "input must be in_ch × L, got shape {:?}",
            input.shape()
        )));
    }
    if kernel.shape().len() != 3 {
        return Err(KdisError::invalid(format!(
            "kernel must be out_ch × in_ch × k, got shape {:?}",
            kernel.shape()
        )));
    }
    let (in_ch, in_len) = (input.shape()[0], input.shape()[1]);
    let (out_ch, k_in, k) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if k_in != in_ch {
        return Err(KdisError::invalid(format!(
            "in_ch: input has {in_ch} channels, kernel expects {k_in}"
        )));
    }
    if bias.len() != out_ch {
        return Err(KdisError::invalid(format!(
            "out_ch: kernel has {out_ch} filters, bias has {}",
            bias.len()
        )));
    }
    if stride == 0 {
        return Err(KdisError::invalid("stride must be positive"));
    }
    let layer = ConvLayerSpec {
        in_channels: in_ch,
        out_channels: out_ch,
        kernel: k,
        stride,
        padding,
    };
    let out_len = layer.output_length(in_len).ok_or_else(|| {
        KdisError::invalid(format!(
            "length: L + 2·padding = {} < kernel {k}",
            in_len + 2 * padding
        ))
    })?;
    let mut out = vec![0.0; out_ch * out_len];
    let patches = im2col(input.values(), in_ch, in_len, &layer, out_len);
    conv_from_patches(&patches, kernel.values(), bias.values(), out_len, &mut out);
    Tensor::new(vec![out_ch, out_len], out)
}

/// Activations retained from one [`forward`] call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    batch: usize,
    inputs: Vec<f64>,
    traces: Vec<SampleTrace>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Pre-activations of conv layer `l` for sample `i`.
    pub fn conv_pre(&self, i: usize, l: usize) -> &[f64] {
        &self.traces[i].conv_pre[l]
    }

    pub fn conv_post(&self, i: usize, l: usize) -> &[f64] {
        &self.traces[i].conv_post[l]
    }

    pub fn dense_pre(&self, i: usize, l: usize) -> &[f64] {
        &self.traces[i].dense_pre[l]
    }
}

fn check_batch(spec: &ArchitectureSpec, batch: &Tensor) -> Result<usize> {
    let shape = batch.shape();
    if shape.len() != 3 || shape[1] != spec.input_channels || shape[2] != spec.input_length {
        return Err(KdisError::invalid(format!(
            "batch shape {:?} does not match B × {} × {}",
            shape, spec.input_channels, spec.input_length
        )));
    }
    Ok(shape[0])
}

/// Logits (`B × M`) and the cache needed by [`backward`].
pub fn forward(params: &CnnParameters, batch: &Tensor) -> Result<(Tensor, ForwardCache)> {
    forward_with(params, batch, Execution::default())
}

pub fn forward_with(
    params: &CnnParameters,
    batch: &Tensor,
    exec: Execution,
) -> Result<(Tensor, ForwardCache)> {
    let b = check_batch(&params.spec, batch)?;
    let layout = params.spec.layout();
    let rows: Vec<&[f64]> = batch.iter_rows().collect();
    let traces = map_ordered(&rows, exec.effective(), |_, x| {
        forward_sample(params, &layout, x)
    });
    let m = params.spec.num_classes();
    let logits: Vec<f64> = traces
        .iter()
        .flat_map(|t| t.logits().iter().copied())
        .collect();
    let logits = Tensor::new(vec![b, m], logits)?;
    Ok((
        logits,
        ForwardCache {
            fingerprint: params.fingerprint(),
            batch: b,
            inputs: batch.values().to_vec(),
            traces,
        },
    ))
}

/// Logits only; nothing retained.
pub fn predict_logits(params: &CnnParameters, batch: &Tensor) -> Result<Tensor> {
    let b = check_batch(&params.spec, batch)?;
    let layout = params.spec.layout();
    let rows: Vec<&[f64]> = batch.iter_rows().collect();
    let logits: Vec<Vec<f64>> = map_ordered(&rows, Execution::default().effective(), |_, x| {
        forward_sample(params, &layout, x).dense_pre.pop().unwrap()
    });
    Tensor::new(vec![b, params.spec.num_classes()], logits.concat())
}

/// Exact parameter gradient for a loss whose logit gradient is `dloss_dlogits`.
///
/// Per-sample contributions are summed over the batch; any mean reduction is
/// already carried by `dloss_dlogits`.
pub fn backward(
    params: &CnnParameters,
    cache: &ForwardCache,
    dloss_dlogits: &Tensor,
) -> Result<CnnParameters> {
    backward_with(params, cache, dloss_dlogits, Execution::default())
}

pub fn backward_with(
    params: &CnnParameters,
    cache: &ForwardCache,
    dloss_dlogits: &Tensor,
    exec: Execution,
) -> Result<CnnParameters> {
    if cache.fingerprint != params.fingerprint() {
        return Err(KdisError::InvalidState(
            "forward cache was produced with different parameters".into(),
        ));
    }
    let m = params.spec.num_classes();
    if dloss_dlogits.shape() != [cache.batch, m] {
        return Err(KdisError::invalid(format!(
            "logit gradient shape {:?}, expected [{}, {m}]",
            dloss_dlogits.shape(),
            cache.batch
        )));
    }
    let exec = exec.effective();
    let spec = &params.spec;
    let layout = spec.layout();
    let deltas = map_ordered(&cache.traces, exec, |i, trace| {
        sample_deltas(params, &layout, trace, dloss_dlogits.row(i))
    });
    let mut grad = CnnParameters::zeros(spec);
    let n_conv = spec.conv_layers.len();
    for (slot, range) in layout.iter().enumerate() {
        let fan = if slot < n_conv {
            let l = spec.conv_layers[slot];
            l.in_channels * l.kernel
        } else {
            spec.dense_layers[slot - n_conv].inputs
        };
        let mut weight = grad.values[range.weight.clone()].to_vec();
        let mut bias = grad.values[range.bias.clone()].to_vec();
        // Pair each unit's weight row with its bias so both land in one task.
        let mut units: Vec<(&mut [f64], &mut f64)> =
            weight.chunks_mut(fan).zip(bias.iter_mut()).collect();
        for_each_chunk_mut(&mut units, 1, exec, |o, unit| {
            let (gw, gb) = &mut unit[0];
            accumulate_unit(spec, cache, &deltas, slot, o, gw, gb);
        });
        grad.values[range.weight.clone()].copy_from_slice(&weight);
        grad.values[range.bias.clone()].copy_from_slice(&bias);
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Model file format
// ---------------------------------------------------------------------------

pub const MODEL_MAGIC: &[u8; 4] = b"KDIS";
pub const MODEL_VERSION: u16 = 1;

/// `KDIS | u16 version | descriptor | u64 FNV-1a(descriptor) | f64 params |
/// u32 CRC32`. All integers little-endian; the CRC covers every byte before it.
pub fn serialize(params: &CnnParameters) -> Vec<u8> {
    let descriptor = params.spec.descriptor_bytes();
    let mut out = Vec::with_capacity(4 + 2 + descriptor.len() + 8 + 8 * params.len() + 4);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&descriptor);
    out.extend_from_slice(&fnv1a64(&descriptor).to_le_bytes());
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(KdisError::Format(FormatFault::Truncated))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn count(&mut self) -> Result<usize> {
        let v = self.u32()? as usize;
        // Counts beyond the remaining bytes can only come from corruption.
        if v > self.bytes.len() {
            return Err(KdisError::Format(FormatFault::Truncated));
        }
        Ok(v)
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<CnnParameters> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(KdisError::Format(FormatFault::BadMagic));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(KdisError::Format(FormatFault::UnsupportedVersion(version)));
    }
    let desc_start = r.pos;
    let input_channels = r.count()?;
    let input_length = r.count()?;
    let activation =
        Activation::from_code(r.u32()?).ok_or(KdisError::Format(FormatFault::DescriptorHash))?;
    let n_conv = r.count()?;
    let mut conv_layers = Vec::with_capacity(n_conv);
    for _ in 0..n_conv {
        conv_layers.push(ConvLayerSpec {
            in_channels: r.count()?,
            out_channels: r.count()?,
            kernel: r.count()?,
            stride: r.count()?,
            padding: r.count()?,
        });
    }
    let n_dense = r.count()?;
    let mut dense_layers = Vec::with_capacity(n_dense);
    for _ in 0..n_dense {
        dense_layers.push(DenseLayerSpec {
            inputs: r.count()?,
            outputs: r.count()?,
        });
    }
    let descriptor = &bytes[desc_start..r.pos];
    let stored_hash = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    if stored_hash != fnv1a64(descriptor) {
        return Err(KdisError::Format(FormatFault::DescriptorHash));
    }
    let spec = ArchitectureSpec {
        input_channels,
        input_length,
        conv_layers,
        dense_layers,
        hidden_activation: activation,
    };
    spec.validate().map_err(|e| {
        KdisError::ArchitectureMismatch(format!("stored architecture invalid: {e}"))
    })?;
    let n = spec.param_count();
    let raw = r.take(
        n.checked_mul(8)
            .ok_or(KdisError::Format(FormatFault::Truncated))?,
    )?;
    let payload_end = r.pos;
    let stored_crc = r.u32()?;
    if r.pos != bytes.len() {
        return Err(KdisError::Format(FormatFault::TrailingBytes));
    }
    if stored_crc != crc32fast::hash(&bytes[..payload_end]) {
        return Err(KdisError::Format(FormatFault::Checksum));
    }
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    CnnParameters::from_values(&spec, values)
}

/// As [`deserialize`], additionally requiring the stored architecture to
/// hash identically to `expected`.
pub fn deserialize_expecting(bytes: &[u8], expected: &ArchitectureSpec) -> Result<CnnParameters> {
    let params = deserialize(bytes)?;
    if params.spec.descriptor_hash() != expected.descriptor_hash() {
        return Err(KdisError::ArchitectureMismatch(format!(
            "file architecture hash {:016x}, expected {:016x}",
            params.spec.descriptor_hash(),
            expected.descriptor_hash()
        )));
    }
    Ok(params)
}
