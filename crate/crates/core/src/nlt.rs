//! Neuron-level linear transformation of convolution weights.
//!
//! A neuron is one output channel of a conv layer, i.e. a `c x kh x kw`
//! kernel group. Each neuron carries a per-input-channel factor and bias;
//! the target kernel slice for input channel `c` is
//! `factor[c] * source[c] + bias[c]`, broadcast over the spatial extent.
//! Conv biases are copied from the source and never transformed.

use crate::error::{shape_err, NltError, Result};
use crate::net::{CounterNet, LayerSpec, Params};

/// One neuron's shift parameters (a view into its [`LayerShift`]).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronShift<'a> {
    pub factor: &'a [f32],
    pub bias: &'a [f32],
}

/// Shift parameters of one conv layer, stored neuron-major: entry
/// `[i * in_channels + c]` belongs to neuron `i`, input channel `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerShift {
    pub in_channels: usize,
    pub out_channels: usize,
    pub factor: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerShift {
    pub fn identity(in_channels: usize, out_channels: usize) -> Self {
        let n = in_channels * out_channels;
        LayerShift {
            in_channels,
            out_channels,
            factor: vec![1.0; n],
            bias: vec![0.0; n],
        }
    }

    fn zeros(in_channels: usize, out_channels: usize) -> Self {
        let n = in_channels * out_channels;
        LayerShift {
            in_channels,
            out_channels,
            factor: vec![0.0; n],
            bias: vec![0.0; n],
        }
    }

    pub fn neuron(&self, i: usize) -> NeuronShift<'_> {
        let c = self.in_channels;
        NeuronShift {
            factor: &self.factor[i * c..(i + 1) * c],
            bias: &self.bias[i * c..(i + 1) * c],
        }
    }

    pub fn neurons(&self) -> impl Iterator<Item = NeuronShift<'_>> {
        (0..self.out_channels).map(|i| self.neuron(i))
    }
}

/// Shift parameters for every conv layer of a network, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftBank {
    pub layers: Vec<LayerShift>,
}

impl ShiftBank {
    /// Total number of neurons `k`.
    pub fn neuron_count(&self) -> usize {
        self.layers.iter().map(|l| l.out_channels).sum()
    }

    /// Number of scalar entries per component (factor or bias).
    pub fn scalars_per_component(&self) -> usize {
        self.layers.iter().map(|l| l.factor.len()).sum()
    }

    pub fn zeros_like(&self) -> ShiftBank {
        ShiftBank {
            layers: self
                .layers
                .iter()
                .map(|l| LayerShift::zeros(l.in_channels, l.out_channels))
                .collect(),
        }
    }

    /// Flat buffer lengths in [`buffers`](Self::buffers) order.
    pub fn buffer_lens(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| l.factor.len())
            .chain(self.layers.iter().map(|l| l.bias.len()))
            .collect()
    }

    /// All factor buffers (one per layer) followed by all bias buffers.
    pub fn buffers(&self) -> Vec<&[f32]> {
        self.layers
            .iter()
            .map(|l| l.factor.as_slice())
            .chain(self.layers.iter().map(|l| l.bias.as_slice()))
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f32]> {
        let (factors, biases): (Vec<_>, Vec<_>) = self
            .layers
            .iter_mut()
            .map(|l| (l.factor.as_mut_slice(), l.bias.as_mut_slice()))
            .unzip();
        factors.into_iter().chain(biases).collect()
    }

    pub fn same_structure(&self, other: &ShiftBank) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.in_channels == b.in_channels && a.out_channels == b.out_channels
            })
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.factor.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Sets every factor to 1 (`factor`) and/or every bias to 0 (`bias`).
    pub fn reset(&mut self, factor: bool, bias: bool) {
        for l in &mut self.layers {
            if factor {
                l.factor.fill(1.0);
            }
            if bias {
                l.bias.fill(0.0);
            }
        }
    }
}

/// Fresh bank for `net`: factors 1, biases 0, one neuron per output channel
/// of every conv layer (3x3 and 1x1 alike).
pub fn init_shift_bank(net: &CounterNet) -> ShiftBank {
    ShiftBank {
        layers: net
            .conv_specs()
            .iter()
            .map(|s| LayerShift::identity(s.in_channels, s.out_channels))
            .collect(),
    }
}

fn check_structure(source: &Params, bank: &ShiftBank) -> Result<()> {
    if source.layers.len() != bank.layers.len() {
        return Err(NltError::Structure(format!(
            "source has {} conv layers, shift bank has {}",
            source.layers.len(),
            bank.layers.len()
        )));
    }
    for (li, (p, s)) in source.layers.iter().zip(&bank.layers).enumerate() {
        let [o, c, _, _] = p.weight.dims4("source weight")?;
        if o != s.out_channels {
            return Err(NltError::Structure(format!(
                "layer {li}: source has {o} neurons, shift bank has {} (first unmatched neuron index {})",
                s.out_channels,
                o.min(s.out_channels)
            )));
        }
        if c != s.in_channels || s.factor.len() != o * c || s.bias.len() != o * c {
            return Err(NltError::Structure(format!(
                "layer {li}, neuron 0: source kernels have {c} input channels, shift bank has {}",
                s.in_channels
            )));
        }
    }
    Ok(())
}

/// Target parameters `factor * source + bias`, per neuron and input channel.
/// Conv biases are copied unchanged; `source` is not modified.
pub fn apply_nlt(source: &Params, bank: &ShiftBank) -> Result<Params> {
    check_structure(source, bank)?;
    let mut target = source.clone();
    for (tl, shift) in target.layers.iter_mut().zip(&bank.layers) {
        let [_, _, kh, kw] = tl.weight.dims4("source weight")?;
        let kk = kh * kw;
        for ((slice, &f), &b) in tl
            .weight
            .data_mut()
            .chunks_exact_mut(kk)
            .zip(&shift.factor)
            .zip(&shift.bias)
        {
            for w in slice {
                *w = (f as f64 * *w as f64 + b as f64) as f32;
            }
        }
    }
    Ok(target)
}

/// Routes per-layer gradients of the target conv weights into the shift
/// bank: `dfactor = sum(G * W_source)` and `dbias = sum(G)` over each kernel
/// slice. No gradient is produced for the source weights.
pub fn backprop_through_nlt(grad_target_weights: &[&[f32]], source: &Params) -> Result<ShiftBank> {
    if grad_target_weights.len() != source.layers.len() {
        return Err(shape_err!(
            "got gradients for {} layers, source has {}",
            grad_target_weights.len(),
            source.layers.len()
        ));
    }
    let mut layers = Vec::with_capacity(source.layers.len());
    for (li, (g, p)) in grad_target_weights.iter().zip(&source.layers).enumerate() {
        let [o, c, kh, kw] = p.weight.dims4("source weight")?;
        if g.len() != p.weight.numel() {
            return Err(shape_err!(
                "layer {li}: weight gradient has {} values, weight [{o},{c},{kh},{kw}] has {}",
                g.len(),
                p.weight.numel()
            ));
        }
        let kk = kh * kw;
        let mut out = LayerShift::zeros(c, o);
        for (j, (gs, ws)) in g.chunks_exact(kk).zip(p.weight.data().chunks_exact(kk)).enumerate() {
            let (mut df, mut db) = (0.0f64, 0.0f64);
            for (&gv, &wv) in gs.iter().zip(ws) {
                df += gv as f64 * wv as f64;
                db += gv as f64;
            }
            out.factor[j] = df as f32;
            out.bias[j] = db as f32;
        }
        layers.push(out);
    }
    Ok(ShiftBank { layers })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(NltError::InvalidArgument(format!(
            "regularization weight must be a finite non-negative number, got {lambda}"
        )))
    }
}

/// `lambda * sum((factor - 1)^2 + bias^2)` over every scalar entry.
pub fn reg_loss(bank: &ShiftBank, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let sum: f64 = bank
        .layers
        .iter()
        .flat_map(|l| l.factor.iter().zip(&l.bias))
        .map(|(&f, &b)| {
            let (df, b) = (f as f64 - 1.0, b as f64);
            df * df + b * b
        })
        .sum();
    Ok(lambda * sum)
}

/// Gradient of [`reg_loss`]: `2 lambda (factor - 1)` and `2 lambda bias`.
pub fn reg_grad(bank: &ShiftBank, lambda: f64) -> Result<ShiftBank> {
    check_lambda(lambda)?;
    Ok(ShiftBank {
        layers: bank
            .layers
            .iter()
            .map(|l| LayerShift {
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                factor: l
                    .factor
                    .iter()
                    .map(|&f| (2.0 * lambda * (f as f64 - 1.0)) as f32)
                    .collect(),
                bias: l
                    .bias
                    .iter()
                    .map(|&b| (2.0 * lambda * b as f64) as f32)
                    .collect(),
            })
            .collect(),
    })
}

/// Parameter arithmetic of the transformation, conv biases excluded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftParamCount {
    pub neurons: u64,
    pub shift_scalars: u64,
    pub source_weight_scalars: u64,
}

impl ShiftParamCount {
    /// `shift_scalars / source_weight_scalars` in lowest terms.
    pub fn ratio(&self) -> (u64, u64) {
        let g = gcd(self.shift_scalars, self.source_weight_scalars).max(1);
        (self.shift_scalars / g, self.source_weight_scalars / g)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Counts over an arbitrary list of layer specs; non-conv entries are skipped.
pub fn count_layers<'a>(specs: impl IntoIterator<Item = &'a LayerSpec>) -> ShiftParamCount {
    let mut count = ShiftParamCount {
        neurons: 0,
        shift_scalars: 0,
        source_weight_scalars: 0,
    };
    for s in specs.into_iter().filter(|s| s.kind.is_conv()) {
        let (cin, cout, k) = (s.in_channels as u64, s.out_channels as u64, s.kind.kernel() as u64);
        count.neurons += cout;
        count.shift_scalars += 2 * cin * cout;
        count.source_weight_scalars += cin * cout * k * k;
    }
    count
}

/// Counts over every conv layer of `net`.
pub fn count_shift_params(net: &CounterNet) -> ShiftParamCount {
    count_layers(net.specs())
}

/// Counts over the encoder (backbone) conv layers only.
pub fn count_backbone_shift_params(net: &CounterNet) -> ShiftParamCount {
    count_layers(&net.encoder)
}
