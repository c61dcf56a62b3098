//! Independent f64 reference implementations used as test oracles.

#![allow(dead_code)]

use nlt_core::data::Sample;
use nlt_core::net::{CounterNet, LayerKind, DENSITY_OUTPUT_SCALE};
use nlt_core::{Params, ShiftBank, Tensor};

/// One image `[c, h, w]` in f64.
#[derive(Clone, Debug)]
pub struct Img {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Img {
    pub fn from_tensor_item(t: &Tensor, i: usize) -> Img {
        let [_, c, h, w] = t.shape() else { panic!("rank 4") };
        let (c, h, w) = (*c, *h, *w);
        let n = c * h * w;
        Img {
            c,
            h,
            w,
            data: t.data()[i * n..(i + 1) * n].iter().map(|&v| v as f64).collect(),
        }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }
}

/// Direct six-loop convolution, zero padding.
pub fn conv(x: &Img, weight: &[f64], bias: &[f64], o: usize, k: usize, stride: usize, pad: usize) -> Img {
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..x.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            acc += weight[((oc * x.c + ic) * k + ky) * k + kx] * x.at(ic, iy as usize, ix as usize);
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Img { c: o, h: oh, w: ow, data: out }
}

pub fn relu(mut x: Img) -> Img {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

pub fn maxpool2(x: &Img) -> Img {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut data = Vec::with_capacity(x.c * h * w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(dy, dx)| x.at(c, 2 * y + dy, 2 * xx + dx))
                    .fold(f64::NEG_INFINITY, f64::max);
                data.push(m);
            }
        }
    }
    Img { c: x.c, h, w, data }
}

pub fn upsample2(x: &Img) -> Img {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut data = Vec::with_capacity(x.c * h * w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                data.push(x.at(c, y / 2, xx / 2));
            }
        }
    }
    Img { c: x.c, h, w, data }
}

/// Parameters as f64 `(weight, bias)` per conv layer.
pub type RefParams = Vec<(Vec<f64>, Vec<f64>)>;

pub fn to_ref(params: &Params) -> RefParams {
    params
        .layers
        .iter()
        .map(|l| {
            (
                l.weight.data().iter().map(|&v| v as f64).collect(),
                l.bias.data().iter().map(|&v| v as f64).collect(),
            )
        })
        .collect()
}

/// `factor * w + bias` per (neuron, input channel), computed in f64.
pub fn ref_nlt(source: &Params, bank: &ShiftBank) -> RefParams {
    source
        .layers
        .iter()
        .zip(&bank.layers)
        .map(|(l, s)| {
            let [_, c, kh, kw] = l.weight.shape() else { panic!("rank 4") };
            let kk = kh * kw;
            let w = l
                .weight
                .data()
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    let g = j / kk;
                    debug_assert!(g < s.factor.len() && s.in_channels == *c);
                    s.factor[g] as f64 * v as f64 + s.bias[g] as f64
                })
                .collect();
            (w, l.bias.data().iter().map(|&v| v as f64).collect())
        })
        .collect()
}

pub fn forward(net: &CounterNet, params: &RefParams, input: &Img) -> Img {
    let mut x = input.clone();
    let mut li = 0;
    for spec in net.encoder.iter().chain(&net.decoder) {
        x = match spec.kind {
            LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                let k = spec.kind.kernel();
                let (w, b) = &params[li];
                li += 1;
                conv(&x, w, b, spec.out_channels, k, 1, k / 2)
            }
            LayerKind::MaxPool2 => maxpool2(&x),
            LayerKind::Upsample2 => upsample2(&x),
        };
        if spec.activation == nlt_core::net::Activation::Relu {
            x = relu(x);
        }
    }
    let mut y = relu(x);
    y.data.iter_mut().for_each(|v| *v *= DENSITY_OUTPUT_SCALE);
    y
}

/// `1/(2n) sum ||S(I) - Y||^2` in f64.
pub fn density_loss(net: &CounterNet, params: &RefParams, batch: &[&Sample]) -> f64 {
    let mut total = 0.0;
    for s in batch {
        let y = forward(net, params, &Img::from_tensor_item(&s.image, 0));
        total += y
            .data
            .iter()
            .zip(s.density.data())
            .map(|(a, &b)| (a - b as f64).powi(2))
            .sum::<f64>();
    }
    total / (2.0 * batch.len() as f64)
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-6 {
        (analytic - numeric).abs() / 1e-6
    } else {
        (analytic - numeric).abs() / scale
    }
}

pub fn central_diff(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Gaussian-weighted SSIM with an 11x11 window evaluated directly at every
/// valid window position.
pub fn ssim_sliding(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> f64 {
    let win = 11usize;
    let sigma = 1.5f64;
    let half = (win / 2) as f64;
    let mut k = vec![0.0; win * win];
    for y in 0..win {
        for x in 0..win {
            k[y * win + x] = (-((y as f64 - half).powi(2) + (x as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    let ksum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= ksum);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - win {
        for x0 in 0..=w - win {
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..win {
                for dx in 0..win {
                    let wgt = k[dy * win + dx];
                    let i = (y0 + dy) * w + x0 + dx;
                    ma += wgt * a[i];
                    mb += wgt * b[i];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..win {
                for dx in 0..win {
                    let wgt = k[dy * win + dx];
                    let i = (y0 + dy) * w + x0 + dx;
                    va += wgt * (a[i] - ma).powi(2);
                    vb += wgt * (b[i] - mb).powi(2);
                    cov += wgt * (a[i] - ma) * (b[i] - mb);
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Conv3x3 (1 to 2 channels) encoder and conv1x1 decoder: two conv layers.
pub fn two_layer_net(seed: u64) -> CounterNet {
    use nlt_core::LayerSpec;
    let encoder = vec![
        LayerSpec::conv3x3(1, 2),
        LayerSpec::maxpool2(2),
        LayerSpec::maxpool2(2),
        LayerSpec::maxpool2(2),
    ];
    let decoder = vec![
        LayerSpec::upsample2(2),
        LayerSpec::upsample2(2),
        LayerSpec::upsample2(2),
        LayerSpec::conv1x1(2, 1),
    ];
    CounterNet::from_specs(1, encoder, decoder, seed).expect("valid specs")
}

pub fn scenes(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    let mut spec = nlt_core::DomainSpec::default_target();
    spec.image_size = (size, size);
    spec.count_range = (2, 6);
    (0..n)
        .map(|i| nlt_core::data::generate_scene(&spec, seed + i as u64).unwrap())
        .collect()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradcheckSummary {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

impl GradcheckSummary {
    fn add(&mut self, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        self.max_abs_grad = self.max_abs_grad.max(analytic.abs());
        self.max_rel_err = self.max_rel_err.max(e);
    }
}

/// Every factor and bias scalar of a perturbed bank against central
/// differences of the f64 reference loss (density term plus regularizer).
pub fn gradcheck_shift(seed: u64, h: f64) -> GradcheckSummary {
    use rand::{Rng, SeedableRng};
    let net = two_layer_net(seed);
    let data = scenes(2, 16, seed * 100);
    let batch: Vec<&Sample> = data.iter().collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut bank = nlt_core::init_shift_bank(&net);
    for l in &mut bank.layers {
        l.factor.iter_mut().for_each(|f| *f += rng.random_range(-0.2..0.2f32));
        l.bias.iter_mut().for_each(|b| *b += rng.random_range(-0.05..0.05f32));
    }
    let lambda = 0.01;
    let (_, grad) = nlt_core::train::shift_gradients(&net, &net.params, &bank, &batch, lambda).unwrap();
    let loss = |bank: &ShiftBank| -> f64 {
        let reg: f64 = bank
            .layers
            .iter()
            .flat_map(|l| {
                l.factor
                    .iter()
                    .map(|&f| (f as f64 - 1.0).powi(2))
                    .chain(l.bias.iter().map(|&b| (b as f64).powi(2)))
            })
            .sum();
        density_loss(&net, &ref_nlt(&net.params, bank), &batch) + lambda * reg
    };
    let mut out = GradcheckSummary::default();
    for li in 0..bank.layers.len() {
        for which in 0..2 {
            for j in 0..bank.layers[li].factor.len() {
                let numeric = central_diff_actual(
                    h,
                    |d| {
                        let mut b = bank.clone();
                        let l = &mut b.layers[li];
                        let v = if which == 0 { &mut l.factor[j] } else { &mut l.bias[j] };
                        *v = (*v as f64 + d) as f32;
                        b
                    },
                    |b, factor| {
                        let l = &b.layers[li];
                        (if factor { l.factor[j] } else { l.bias[j] }) as f64
                    },
                    which == 0,
                    loss,
                );
                let g = &grad.layers[li];
                let analytic = if which == 0 { g.factor[j] } else { g.bias[j] } as f64;
                out.add(analytic, numeric);
            }
        }
    }
    out
}

/// Central difference over the value actually stored after f32 rounding.
fn central_diff_actual<T>(
    h: f64,
    perturb: impl Fn(f64) -> T,
    read: impl Fn(&T, bool) -> f64,
    field: bool,
    loss: impl Fn(&T) -> f64,
) -> f64 {
    let (plus, minus) = (perturb(h), perturb(-h));
    let step = read(&plus, field) - read(&minus, field);
    (loss(&plus) - loss(&minus)) / step
}

/// Every weight and bias of the source net under the density loss that
/// `train_source_step` minimizes.
pub fn gradcheck_source(seed: u64, h: f64) -> GradcheckSummary {
    let net = two_layer_net(seed);
    let data = scenes(2, 16, seed * 100 + 7);
    let batch: Vec<&Sample> = data.iter().collect();
    let (_, grad) = nlt_core::train::density_gradients(&net, &net.params, &batch).unwrap();
    let mut out = GradcheckSummary::default();
    for li in 0..net.params.layers.len() {
        for which in 0..2 {
            let len = if which == 0 { net.params.layers[li].weight.numel() } else { net.params.layers[li].bias.numel() };
            for j in 0..len {
                let numeric = central_diff_actual(
                    h,
                    |d| {
                        let mut p = net.params.clone();
                        let l = &mut p.layers[li];
                        let t = if which == 0 { &mut l.weight } else { &mut l.bias };
                        let v = &mut t.data_mut()[j];
                        *v = (*v as f64 + d) as f32;
                        p
                    },
                    |p, w| {
                        let l = &p.layers[li];
                        (if w { l.weight.data()[j] } else { l.bias.data()[j] }) as f64
                    },
                    which == 0,
                    |p| density_loss(&net, &to_ref(p), &batch),
                );
                let g = &grad.layers[li];
                let analytic = if which == 0 { g.weight.data()[j] } else { g.bias.data()[j] } as f64;
                out.add(analytic, numeric);
            }
        }
    }
    out
}
