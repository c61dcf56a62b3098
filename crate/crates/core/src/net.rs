//! Encoder-decoder density regressor.
//!
//! The encoder is a stack of 3x3 convolutions with three 2x2 max-pool stages
//! (1/8 resolution). The decoder restores full resolution with three
//! nearest-neighbour upsampling stages, each followed by a channel-halving 3x3
//! convolution, and ends in a 1x1 convolution producing one density channel.
//! The rectified output is multiplied by the fixed [`DENSITY_OUTPUT_SCALE`].

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradientTape, Var};
use crate::error::{shape_err, NltError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    MaxPool2,
    Upsample2,
}

impl LayerKind {
    pub fn is_conv(self) -> bool {
        matches!(self, LayerKind::Conv3x3 | LayerKind::Conv1x1)
    }

    pub fn kernel(self) -> usize {
        match self {
            LayerKind::Conv3x3 => 3,
            LayerKind::Conv1x1 => 1,
            _ => 0,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Conv1x1 => "conv1x1",
            LayerKind::MaxPool2 => "maxpool2",
            LayerKind::Upsample2 => "upsample2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv3x3(cin: usize, cout: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv3x3,
            in_channels: cin,
            out_channels: cout,
            activation: Activation::Relu,
        }
    }

    pub fn conv1x1(cin: usize, cout: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv1x1,
            in_channels: cin,
            out_channels: cout,
            activation: Activation::None,
        }
    }

    pub fn maxpool2(ch: usize) -> Self {
        LayerSpec {
            kind: LayerKind::MaxPool2,
            in_channels: ch,
            out_channels: ch,
            activation: Activation::None,
        }
    }

    pub fn upsample2(ch: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Upsample2,
            in_channels: ch,
            out_channels: ch,
            activation: Activation::None,
        }
    }

    /// Weight shape `[out, in, k, k]` for conv layers.
    pub fn weight_shape(&self) -> Option<[usize; 4]> {
        let k = self.kind.kernel();
        self.kind
            .is_conv()
            .then_some([self.out_channels, self.in_channels, k, k])
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let act = match self.activation {
            Activation::Relu => "relu",
            Activation::None => "none",
        };
        write!(
            f,
            "{}:{}:{}:{}",
            self.kind.as_str(),
            self.in_channels,
            self.out_channels,
            act
        )
    }
}

impl FromStr for LayerSpec {
    type Err = NltError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || NltError::InvalidSpec(format!("cannot parse layer spec {s:?}"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let [kind, cin, cout, act] = parts[..] else {
            return Err(bad());
        };
        let kind = match kind {
            "conv3x3" => LayerKind::Conv3x3,
            "conv1x1" => LayerKind::Conv1x1,
            "maxpool2" => LayerKind::MaxPool2,
            "upsample2" => LayerKind::Upsample2,
            _ => return Err(bad()),
        };
        let activation = match act {
            "relu" => Activation::Relu,
            "none" => Activation::None,
            _ => return Err(bad()),
        };
        Ok(LayerSpec {
            kind,
            in_channels: cin.parse().map_err(|_| bad())?,
            out_channels: cout.parse().map_err(|_| bad())?,
            activation,
        })
    }
}

/// Named architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetConfig {
    /// First ten VGG-16 conv layers plus the halving decoder, RGB input.
    PaperVgg16,
    /// Desk-scale analogue with grayscale input.
    DeskSmall,
}

impl NetConfig {
    pub fn name(self) -> &'static str {
        match self {
            NetConfig::PaperVgg16 => "paper_vgg16",
            NetConfig::DeskSmall => "desk_small",
        }
    }

    pub fn in_channels(self) -> usize {
        match self {
            NetConfig::PaperVgg16 => 3,
            NetConfig::DeskSmall => 1,
        }
    }

    /// Encoder and decoder layer lists.
    pub fn layer_specs(self) -> (Vec<LayerSpec>, Vec<LayerSpec>) {
        match self {
            NetConfig::PaperVgg16 => {
                let encoder = encoder_specs(3, &[64, 64, 128, 128, 256, 256, 256, 512, 512, 512], &[2, 4, 7]);
                let mut decoder = vec![LayerSpec::conv3x3(512, 256)];
                decoder.extend(halving_decoder(256, 3));
                decoder.push(LayerSpec::conv1x1(32, 1));
                (encoder, decoder)
            }
            NetConfig::DeskSmall => {
                let encoder = encoder_specs(1, &[8, 8, 16, 16, 32, 32], &[2, 4, 6]);
                let mut decoder = halving_decoder(32, 3);
                decoder.push(LayerSpec::conv1x1(4, 1));
                (encoder, decoder)
            }
        }
    }
}

impl FromStr for NetConfig {
    type Err = NltError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_vgg16" => Ok(NetConfig::PaperVgg16),
            "desk_small" => Ok(NetConfig::DeskSmall),
            other => Err(NltError::InvalidArgument(format!(
                "unknown net config {other:?} (expected paper_vgg16 or desk_small)"
            ))),
        }
    }
}

/// 3x3 conv stack with a max-pool after each (1-based) position in `pool_after`.
fn encoder_specs(cin: usize, channels: &[usize], pool_after: &[usize]) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut prev = cin;
    for (i, &ch) in channels.iter().enumerate() {
        specs.push(LayerSpec::conv3x3(prev, ch));
        if pool_after.contains(&(i + 1)) {
            specs.push(LayerSpec::maxpool2(ch));
        }
        prev = ch;
    }
    specs
}

/// `stages` repetitions of [upsample2, conv3x3 halving the channels].
fn halving_decoder(mut ch: usize, stages: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for _ in 0..stages {
        specs.push(LayerSpec::upsample2(ch));
        specs.push(LayerSpec::conv3x3(ch, ch / 2));
        ch /= 2;
    }
    specs
}

/// Weight and bias of one conv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Parameters of every conv layer, in network order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub layers: Vec<ConvParams>,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params {
            layers: self
                .layers
                .iter()
                .map(|l| ConvParams {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    /// Flat buffer lengths in `[w0, b0, w1, b1, ...]` order.
    pub fn buffer_lens(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.numel(), l.bias.numel()])
            .collect()
    }

    pub fn buffers(&self) -> Vec<&[f32]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.data()])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f32]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let ConvParams { weight, bias } = l;
                [weight.data_mut(), bias.data_mut()]
            })
            .collect()
    }

    /// Bitwise equality of every weight and bias value.
    pub fn bitwise_eq(&self, other: &Params) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.shape() == b.weight.shape()
                    && bits_eq(a.weight.data(), b.weight.data())
                    && bits_eq(a.bias.data(), b.bias.data())
            })
    }
}

pub(crate) fn bits_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Conv parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterNet {
    pub in_channels: usize,
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    pub params: Params,
}

/// Builds a named architecture with fan-in scaled normal weights and zero biases.
pub fn build_counter(config: NetConfig, seed: u64) -> CounterNet {
    let (encoder, decoder) = config.layer_specs();
    CounterNet::from_specs(config.in_channels(), encoder, decoder, seed)
        .expect("named configs are valid")
}

impl CounterNet {
    pub fn from_specs(
        in_channels: usize,
        encoder: Vec<LayerSpec>,
        decoder: Vec<LayerSpec>,
        seed: u64,
    ) -> Result<CounterNet> {
        validate_specs(in_channels, &encoder, &decoder)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = encoder
            .iter()
            .chain(&decoder)
            .filter_map(|s| s.weight_shape())
            .map(|shape| {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                ConvParams {
                    weight: Tensor::randn(&shape, (2.0 / fan_in).sqrt(), &mut rng),
                    bias: Tensor::zeros(&[shape[0]]),
                }
            })
            .collect();
        Ok(CounterNet {
            in_channels,
            encoder,
            decoder,
            params: Params { layers },
        })
    }

    /// All layer specs, encoder first.
    pub fn specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.encoder.iter().chain(&self.decoder)
    }

    /// Conv layer specs in parameter order.
    pub fn conv_specs(&self) -> Vec<&LayerSpec> {
        self.specs().filter(|s| s.kind.is_conv()).collect()
    }

    /// Number of conv layers in the encoder.
    pub fn encoder_conv_count(&self) -> usize {
        self.encoder.iter().filter(|s| s.kind.is_conv()).count()
    }

    /// Canonical one-line description used by checkpoint manifests.
    pub fn arch_string(&self) -> String {
        let enc: Vec<String> = self.encoder.iter().map(|s| s.to_string()).collect();
        let dec: Vec<String> = self.decoder.iter().map(|s| s.to_string()).collect();
        format!("in={};enc={};dec={}", self.in_channels, enc.join(","), dec.join(","))
    }

    /// Rebuilds the layer structure from [`arch_string`](Self::arch_string) with zero parameters.
    pub fn from_arch_string(s: &str) -> Result<CounterNet> {
        let bad = || NltError::InvalidSpec(format!("malformed architecture string {s:?}"));
        let mut parts = s.split(';');
        let (Some(inp), Some(enc), Some(dec), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let in_channels = inp
            .strip_prefix("in=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(bad)?;
        let parse_list = |v: &str| -> Result<Vec<LayerSpec>> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(str::parse).collect()
        };
        let encoder = parse_list(enc.strip_prefix("enc=").ok_or_else(bad)?)?;
        let decoder = parse_list(dec.strip_prefix("dec=").ok_or_else(bad)?)?;
        let mut net = CounterNet::from_specs(in_channels, encoder, decoder, 0)?;
        net.params = net.params.zeros_like();
        Ok(net)
    }

    /// Checks that `params` matches this network's conv layer shapes.
    pub fn check_params(&self, params: &Params) -> Result<()> {
        let convs = self.conv_specs();
        if convs.len() != params.layers.len() {
            return Err(NltError::Structure(format!(
                "network has {} conv layers, parameter set has {}",
                convs.len(),
                params.layers.len()
            )));
        }
        for (i, (spec, p)) in convs.iter().zip(&params.layers).enumerate() {
            let ws = spec.weight_shape().expect("conv");
            if p.weight.shape() != ws || p.bias.shape() != [ws[0]] {
                return Err(NltError::Structure(format!(
                    "conv layer {i}: expected weight {:?} and bias [{}], got {:?} and {:?}",
                    ws,
                    ws[0],
                    p.weight.shape(),
                    p.bias.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn register_params(
        &self,
        tape: &mut GradientTape,
        params: &Params,
        requires_grad: bool,
    ) -> ParamVars {
        let layers = params
            .layers
            .iter()
            .map(|l| {
                let mut w = l.weight.clone();
                let mut b = l.bias.clone();
                w.requires_grad = requires_grad;
                b.requires_grad = requires_grad;
                (tape.leaf(w), tape.leaf(b))
            })
            .collect();
        ParamVars { layers }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape[..] else {
            return Err(shape_err!("images must be [N,C,H,W], got {:?}", shape));
        };
        if c != self.in_channels {
            return Err(shape_err!(
                "network expects C={} input channels, got C={c}",
                self.in_channels
            ));
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(shape_err!(
                "input spatial size {h}x{w} must be a non-zero multiple of 8; pad the image to the next multiple of 8"
            ));
        }
        Ok(())
    }

    /// Records a forward pass on `tape`, ending in a non-negative density map.
    pub fn forward_on_tape(
        &self,
        tape: &mut GradientTape,
        params: &ParamVars,
        input: Var,
    ) -> Result<Var> {
        self.check_input(tape.value(input).shape())?;
        let mut x = input;
        let mut conv_idx = 0;
        for spec in self.specs() {
            x = match spec.kind {
                LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                    let (w, b) = *params.layers.get(conv_idx).ok_or_else(|| {
                        NltError::Structure(format!("missing parameters for conv layer {conv_idx}"))
                    })?;
                    conv_idx += 1;
                    tape.conv2d(x, w, b, 1, spec.kind.kernel() / 2)?
                }
                LayerKind::MaxPool2 => tape.max_pool2(x)?,
                LayerKind::Upsample2 => tape.upsample_nearest(x, 2)?,
            };
            if spec.activation == Activation::Relu {
                x = tape.relu(x);
            }
        }
        let y = tape.relu(x);
        Ok(tape.scale(y, DENSITY_OUTPUT_SCALE))
    }

    /// Inference with an explicit parameter set; returns `[N, 1, H, W]`.
    pub fn forward(&self, params: &Params, images: &Tensor) -> Result<Tensor> {
        self.check_params(params)?;
        let mut tape = GradientTape::new();
        let pv = self.register_params(&mut tape, params, false);
        let x = tape.leaf(images.clone());
        let y = self.forward_on_tape(&mut tape, &pv, x)?;
        Ok(tape.take(y))
    }
}

fn validate_specs(in_channels: usize, encoder: &[LayerSpec], decoder: &[LayerSpec]) -> Result<()> {
    let fail = |msg: String| Err(NltError::InvalidSpec(msg));
    let mut prev = in_channels;
    for (i, s) in encoder.iter().chain(decoder).enumerate() {
        if s.in_channels != prev {
            return fail(format!(
                "layer {i} ({s}) takes {} channels but receives {prev}",
                s.in_channels
            ));
        }
        if !s.kind.is_conv() && s.in_channels != s.out_channels {
            return fail(format!("layer {i} ({s}) is a {} and cannot change channels", s.kind.as_str()));
        }
        if s.in_channels == 0 || s.out_channels == 0 {
            return fail(format!("layer {i} ({s}) has zero channels"));
        }
        prev = s.out_channels;
    }
    let count = |list: &[LayerSpec], k: LayerKind| list.iter().filter(|s| s.kind == k).count();
    if count(encoder, LayerKind::MaxPool2) != 3 || count(encoder, LayerKind::Upsample2) != 0 {
        return fail("encoder must contain exactly three maxpool2 stages and no upsampling".into());
    }
    if count(decoder, LayerKind::Upsample2) != 3 || count(decoder, LayerKind::MaxPool2) != 0 {
        return fail("decoder must contain exactly three upsample2 stages and no pooling".into());
    }
    match decoder.last() {
        Some(s) if s.kind == LayerKind::Conv1x1 && s.out_channels == 1 => Ok(()),
        _ => fail("final layer must be conv1x1 with one output channel".into()),
    }
}

/// Constant factor on the rectified output. Ground-truth densities peak
/// near 0.01 per pixel; without it the freshly initialized net overshoots
/// and the optimizer pushes the final relu into its dead zone within a few
/// dozen steps.
pub const DENSITY_OUTPUT_SCALE: f64 = 0.01;

/// Predicted count: the sum of all density values.
pub fn count_from_density(map: &Tensor) -> f64 {
    map.sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_vgg16_channel_plan() {
        let net = build_counter(NetConfig::PaperVgg16, 0);
        let enc: Vec<usize> = net
            .encoder
            .iter()
            .filter(|s| s.kind.is_conv())
            .map(|s| s.out_channels)
            .collect();
        assert_eq!(enc, [64, 64, 128, 128, 256, 256, 256, 512, 512, 512]);
        let pools: Vec<usize> = net
            .encoder
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == LayerKind::MaxPool2)
            .map(|(i, _)| i)
            .collect();
        // pool after conv 2, 4, 7 => list positions 2, 5, 9
        assert_eq!(pools, [2, 5, 9]);
        let dec: Vec<(usize, usize)> = net
            .decoder
            .iter()
            .filter(|s| s.kind.is_conv())
            .map(|s| (s.in_channels, s.out_channels))
            .collect();
        assert_eq!(dec, [(512, 256), (256, 128), (128, 64), (64, 32), (32, 1)]);
        assert_eq!(net.conv_specs().len(), 15);
    }

    #[test]
    fn desk_small_plan() {
        let net = build_counter(NetConfig::DeskSmall, 0);
        let convs: Vec<(usize, usize)> = net
            .conv_specs()
            .iter()
            .map(|s| (s.in_channels, s.out_channels))
            .collect();
        assert_eq!(
            convs,
            [(1, 8), (8, 8), (8, 16), (16, 16), (16, 32), (32, 32), (32, 16), (16, 8), (8, 4), (4, 1)]
        );
        assert_eq!(net.encoder_conv_count(), 6);
    }

    #[test]
    fn same_seed_same_params() {
        let a = build_counter(NetConfig::DeskSmall, 7);
        let b = build_counter(NetConfig::DeskSmall, 7);
        assert!(a.params.bitwise_eq(&b.params));
        let c = build_counter(NetConfig::DeskSmall, 8);
        assert!(!a.params.bitwise_eq(&c.params));
    }

    #[test]
    fn mismatched_channels_rejected() {
        let enc = vec![
            LayerSpec::conv3x3(1, 8),
            LayerSpec::conv3x3(16, 32),
        ];
        let err = CounterNet::from_specs(1, enc, vec![], 0).unwrap_err();
        assert!(matches!(err, NltError::InvalidSpec(_)));
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn pooling_cannot_change_channels() {
        let (mut enc, dec) = NetConfig::DeskSmall.layer_specs();
        enc[2].out_channels = 9;
        assert!(CounterNet::from_specs(1, enc, dec, 0).is_err());
    }

    #[test]
    fn final_layer_must_be_single_channel_1x1() {
        let (enc, mut dec) = NetConfig::DeskSmall.layer_specs();
        dec.pop();
        let err = CounterNet::from_specs(1, enc, dec, 0).unwrap_err();
        assert!(err.to_string().contains("final layer"), "{err}");
    }

    #[test]
    fn forward_shape_and_nonnegative() {
        let net = build_counter(NetConfig::DeskSmall, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 1, 32, 32], 1.0, &mut rng);
        let y = net.forward(&net.params, &x).unwrap();
        assert_eq!(y.shape(), &[2, 1, 32, 32]);
        assert!(y.min() >= 0.0);
    }

    #[test]
    fn zero_params_zero_output() {
        let net = build_counter(NetConfig::DeskSmall, 3);
        let zero = net.params.zeros_like();
        let x = Tensor::full(&[1, 1, 16, 16], 0.7);
        let y = net.forward(&zero, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_input_asks_for_padding() {
        let net = build_counter(NetConfig::DeskSmall, 3);
        let x = Tensor::zeros(&[1, 1, 20, 24]);
        let err = net.forward(&net.params, &x).unwrap_err().to_string();
        assert!(err.contains("pad"), "{err}");
    }

    #[test]
    fn arch_string_round_trip() {
        let net = build_counter(NetConfig::PaperVgg16, 0);
        let back = CounterNet::from_arch_string(&net.arch_string()).unwrap();
        assert_eq!(back.encoder, net.encoder);
        assert_eq!(back.decoder, net.decoder);
        assert_eq!(back.params.buffer_lens(), net.params.buffer_lens());
    }

    #[test]
    fn count_is_sum() {
        assert_eq!(count_from_density(&Tensor::zeros(&[1, 1, 4, 4])), 0.0);
        assert_eq!(count_from_density(&Tensor::full(&[1, 1, 4, 4], 1.0)), 16.0);
    }
}
