//! Functional MLP backbones.
//!
//! Networks never own their weights: every forward pass takes a flat
//! [`WeightVector`] (or a tape node holding one) so that weights produced by
//! a hyper-network can be differentiated through exactly like ordinary
//! parameters.

use std::f64::consts::PI;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::rng::{self, StreamRng};
use crate::tensor::{gemm, Tensor};

/// Fully connected ReLU network: ReLU after every hidden layer, identity at
/// the output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "an MLP needs at least input and output sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidConfig(format!("zero-width layer in {layer_sizes:?}")));
        }
        Ok(Self { layer_sizes })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.layer_sizes[1..self.layer_sizes.len() - 1]
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|p| (p[0] + 1) * p[1]).sum()
    }

    pub fn layout(&self) -> Layout {
        let mut segments = Vec::with_capacity(self.num_layers());
        let mut off = 0;
        for pair in self.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weight = off..off + fan_in * fan_out;
            off = weight.end;
            let bias = off..off + fan_out;
            off = bias.end;
            segments.push(LayerSegment {
                fan_in,
                fan_out,
                weight,
                bias,
            });
        }
        Layout { segments, total: off }
    }
}

/// Where one layer's weight matrix (`fan_in x fan_out`, row-major) and bias
/// live inside the flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSegment {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub segments: Vec<LayerSegment>,
    pub total: usize,
}

/// Flat parameter vector together with the layer layout it encodes.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    spec: MlpSpec,
    values: Tensor,
}

impl WeightVector {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            spec: spec.clone(),
            values: Tensor::zeros(&[spec.parameter_count()]),
        }
    }

    pub fn from_values(spec: &MlpSpec, values: Tensor) -> Result<Self> {
        if values.len() != spec.parameter_count() {
            return Err(Error::LayoutMismatch(format!(
                "spec {:?} needs {} parameters, got {}",
                spec.layer_sizes,
                spec.parameter_count(),
                values.len()
            )));
        }
        let values = values.reshape(vec![spec.parameter_count()])?;
        Ok(Self {
            spec: spec.clone(),
            values,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Per-layer `(weight [fan_in, fan_out], bias [fan_out])` views.
    pub fn unpack(&self) -> Vec<(Tensor, Tensor)> {
        self.spec
            .layout()
            .segments
            .iter()
            .map(|s| {
                let w = self
                    .values
                    .segment(s.weight.start, vec![s.fan_in, s.fan_out])
                    .expect("layout within bounds");
                let b = self
                    .values
                    .segment(s.bias.start, vec![s.fan_out])
                    .expect("layout within bounds");
                (w, b)
            })
            .collect()
    }

    pub fn pack(spec: &MlpSpec, layers: &[(Tensor, Tensor)]) -> Result<Self> {
        let layout = spec.layout();
        if layers.len() != layout.segments.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} layers given for a {}-layer spec",
                layers.len(),
                layout.segments.len()
            )));
        }
        let mut flat = Vec::with_capacity(layout.total);
        for ((w, b), seg) in layers.iter().zip(&layout.segments) {
            if w.len() != seg.weight.len() || b.len() != seg.bias.len() {
                return Err(Error::LayoutMismatch(format!(
                    "layer expects {}x{} weights and {} biases",
                    seg.fan_in, seg.fan_out, seg.fan_out
                )));
            }
            flat.extend_from_slice(w.as_slice());
            flat.extend_from_slice(b.as_slice());
        }
        Ok(Self {
            spec: spec.clone(),
            values: Tensor::from_parts(vec![layout.total], flat),
        })
    }
}

/// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
pub fn init_weights(spec: &MlpSpec, rng: &mut StreamRng) -> WeightVector {
    let layout = spec.layout();
    let mut flat = vec![0.0; layout.total];
    for seg in &layout.segments {
        let std = (2.0 / seg.fan_in as f64).sqrt();
        for v in &mut flat[seg.weight.clone()] {
            *v = std * rng::normal(rng);
        }
    }
    WeightVector {
        spec: spec.clone(),
        values: Tensor::from_parts(vec![layout.total], flat),
    }
}

/// Dropout applied after each hidden activation.
pub enum Dropout<'a> {
    Off,
    /// One mask per hidden layer, already scaled by `1 / (1 - rate)`.
    /// Each mask is either `[rows, width]` or a single row `[width]` shared by
    /// all rows.
    Masks(&'a [Tensor]),
    /// Draw fresh per-example masks at the given rate.
    Draw { rate: f64, rng: &'a mut StreamRng },
}

/// Inverted-dropout mask values for `rows x width` units.
pub fn dropout_mask(rows: usize, width: usize, rate: f64, rng: &mut StreamRng) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * width)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::from_parts(vec![rows, width], data)
}

/// One `[width]` mask per hidden layer, shared across a batch. This freezes a
/// single thinned sub-network, which is how MC-dropout pseudo-members are
/// evaluated.
pub fn unit_masks(spec: &MlpSpec, rate: f64, rng: &mut StreamRng) -> Vec<Tensor> {
    spec.hidden_widths()
        .iter()
        .map(|&w| dropout_mask(1, w, rate, rng).reshape(vec![w]).expect("same length"))
        .collect()
}

fn validate_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Records the MLP forward pass on `tape`. `weights` is a node holding the
/// flat parameter vector (trainable leaf or hyper-network output); the
/// returned node is `[rows, output_dim]`.
pub fn mlp_forward(
    tape: &mut Tape,
    spec: &MlpSpec,
    weights: Var,
    input: Var,
    mut dropout: Dropout<'_>,
) -> Result<Var> {
    if tape.value(weights).len() != spec.parameter_count() {
        return Err(Error::LayoutMismatch(format!(
            "spec {:?} needs {} parameters, weight node holds {}",
            spec.layer_sizes,
            spec.parameter_count(),
            tape.value(weights).len()
        )));
    }
    let rows = match tape.value(input).shape() {
        &[r, c] if c == spec.input_dim() => r,
        s => {
            return Err(Error::shape(
                "mlp_forward",
                format!("input {s:?} does not end in {}", spec.input_dim()),
            ))
        }
    };
    if let Dropout::Masks(m) = &dropout {
        if m.len() != spec.hidden_widths().len() {
            return Err(Error::shape(
                "mlp_forward",
                format!("{} dropout masks for {} hidden layers", m.len(), spec.hidden_widths().len()),
            ));
        }
    }
    if let Dropout::Draw { rate, .. } = &dropout {
        validate_rate(*rate)?;
    }

    let layout = spec.layout();
    let last = layout.segments.len() - 1;
    let mut h = input;
    for (l, seg) in layout.segments.iter().enumerate() {
        let w = tape.segment(weights, seg.weight.start, vec![seg.fan_in, seg.fan_out])?;
        let b = tape.segment(weights, seg.bias.start, vec![seg.fan_out])?;
        let z = tape.matmul(h, w)?;
        h = tape.add(z, b)?;
        if l == last {
            break;
        }
        h = tape.relu(h)?;
        let mask = match &mut dropout {
            Dropout::Off => None,
            Dropout::Masks(masks) => {
                let m = &masks[l];
                Some(if m.shape() == [seg.fan_out] {
                    let row = m.as_slice();
                    let data = (0..rows).flat_map(|_| row.iter().copied()).collect();
                    Tensor::from_parts(vec![rows, seg.fan_out], data)
                } else {
                    m.clone()
                })
            }
            Dropout::Draw { rate, rng } => {
                (*rate > 0.0).then(|| dropout_mask(rows, seg.fan_out, *rate, rng))
            }
        };
        if let Some(mask) = mask {
            let m = tape.constant(mask);
            h = tape.mul(h, m)?;
        }
    }
    Ok(h)
}

/// Reusable buffers for the tape-free inference path.
#[derive(Default)]
pub struct MlpWorkspace {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Tape-free batched forward pass used by the samplers.
///
/// The input is split as `[head | tail]` where the head (`head_dim` leading
/// columns, one row per example) varies across the batch while `tail` is
/// shared by every row; the tail's first-layer contribution is computed once.
/// `unit_masks`, when given, holds one `[width]` inverted-dropout mask per
/// hidden layer. Writes `[rows, output_dim]` into `out`.
pub fn mlp_eval_shared_tail(
    weights: &WeightVector,
    head: &[f64],
    head_dim: usize,
    tail: &[f64],
    unit_masks: Option<&[Tensor]>,
    ws: &mut MlpWorkspace,
    out: &mut Vec<f64>,
) -> Result<()> {
    let spec = weights.spec();
    if head_dim + tail.len() != spec.input_dim() {
        return Err(Error::shape(
            "mlp_forward",
            format!(
                "head {head_dim} + tail {} columns, spec expects {}",
                tail.len(),
                spec.input_dim()
            ),
        ));
    }
    if head_dim == 0 || head.len() % head_dim != 0 {
        return Err(Error::shape("mlp_forward", "batch head is not a whole number of rows"));
    }
    let rows = head.len() / head_dim;
    let vals = weights.values().as_slice();
    let layout = spec.layout();
    let last = layout.segments.len() - 1;

    for (l, seg) in layout.segments.iter().enumerate() {
        let w = &vals[seg.weight.clone()];
        let bias = &vals[seg.bias.clone()];
        let n = seg.fan_out;
        ws.b.clear();
        ws.b.resize(rows * n, 0.0);
        if l == 0 {
            // shared row: bias + tail @ W[head_dim..]
            let mut shared = bias.to_vec();
            for (k, &tv) in tail.iter().enumerate() {
                let wrow = &w[(head_dim + k) * n..(head_dim + k + 1) * n];
                shared.iter_mut().zip(wrow).for_each(|(s, wv)| *s += tv * wv);
            }
            for r in ws.b.chunks_exact_mut(n) {
                r.copy_from_slice(&shared);
            }
            gemm(rows, head_dim, n, 1.0, head, false, &w[..head_dim * n], false, 1.0, &mut ws.b);
        } else {
            for r in ws.b.chunks_exact_mut(n) {
                r.copy_from_slice(bias);
            }
            gemm(rows, seg.fan_in, n, 1.0, &ws.a, false, w, false, 1.0, &mut ws.b);
        }
        if l < last {
            match unit_masks {
                Some(masks) => {
                    let m = masks[l].as_slice();
                    for r in ws.b.chunks_exact_mut(n) {
                        r.iter_mut().zip(m).for_each(|(v, mv)| *v = v.max(0.0) * mv);
                    }
                }
                None => ws.b.iter_mut().for_each(|v| *v = v.max(0.0)),
            }
        }
        std::mem::swap(&mut ws.a, &mut ws.b);
    }
    out.clear();
    out.extend_from_slice(&ws.a);
    Ok(())
}

/// Sinusoidal embedding of a diffusion step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub num_frequencies: usize,
}

impl TimeEmbedding {
    pub fn dim(&self) -> usize {
        2 * self.num_frequencies
    }
}

/// `[sin(pi f_k t / T)..., cos(pi f_k t / T)...]` with `f_k = 2^k`.
pub fn time_embed(t: usize, total_steps: usize, emb: TimeEmbedding) -> Result<Vec<f64>> {
    if t > total_steps || total_steps == 0 {
        return Err(Error::StepOutOfRange {
            t,
            steps: total_steps,
        });
    }
    let phase = PI * t as f64 / total_steps as f64;
    let freqs = (0..emb.num_frequencies).map(|k| (1u64 << k) as f64);
    let mut out: Vec<f64> = freqs.clone().map(|f| (f * phase).sin()).collect();
    out.extend(freqs.map(|f| (f * phase).cos()));
    Ok(out)
}

#[cfg(test)]
mod tests;
