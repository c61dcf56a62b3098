//! im2col convolution kernels with `f64` accumulation.
//!
//! Storage stays `f32`; every patch matrix and GEMM runs in `f64` and the
//! result is rounded once on the way out. GEMMs are laid out with the pixel
//! count as the long `m` dimension, which suits the narrow channel counts of
//! the desk-scale networks.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Stride 1 with "same" padding on a square odd kernel.
    fn is_same(&self) -> bool {
        self.stride == 1 && self.kh == self.kw && self.kh % 2 == 1 && 2 * self.padding + 1 == self.kh
    }

    /// Geometry of the input-gradient convolution for [`is_same`](Self::is_same) layers.
    fn transposed(&self) -> ConvGeometry {
        ConvGeometry {
            c: self.o,
            o: self.c,
            ..*self
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<Vec<f64>>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Runs `f` with `count` reusable scratch buffers of at least the requested lengths.
/// Contents are unspecified on entry.
fn with_scratch<R>(lens: &[usize], f: impl FnOnce(&mut [Vec<f64>]) -> R) -> R {
    let mut bufs = SCRATCH.with(|s| std::mem::take(&mut *s.borrow_mut()));
    while bufs.len() < lens.len() {
        bufs.push(Vec::new());
    }
    for (b, &len) in bufs.iter_mut().zip(lens) {
        if b.len() < len {
            b.resize(len, 0.0);
        }
    }
    let out = f(&mut bufs[..lens.len()]);
    SCRATCH.with(|s| *s.borrow_mut() = bufs);
    out
}

/// Unfolds one image `[C, H, W]` into `[C*kh*kw, OH*OW]`.
fn im2col<T: Copy + Into<f64>>(g: &ConvGeometry, image: &[T], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let pad = g.padding as isize;
    for ci in 0..g.c {
        let plane = &image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // contiguous run [x0, x1) of in-bounds source columns
                        let shift = kx as isize - pad;
                        let x0 = (-shift).clamp(0, ow as isize) as usize;
                        let x1 = (g.w as isize - shift).clamp(x0 as isize, ow as isize) as usize;
                        line[..x0].fill(0.0);
                        let s0 = (x0 as isize + shift) as usize;
                        for (d, &s) in line[x0..x1].iter_mut().zip(&src[s0..s0 + (x1 - x0)]) {
                            *d = s.into();
                        }
                        line[x1..].fill(0.0);
                    } else {
                        for (ox, slot) in line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - pad;
                            *slot = if ix < 0 || ix >= g.w as isize {
                                0.0
                            } else {
                                src[ix as usize].into()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Folds `[C*kh*kw, OH*OW]` back into an image gradient, summing overlaps.
fn col2im(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let pad = g.padding as isize;
    for ci in 0..g.c {
        let plane = &mut image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Strided view of a matrix: element `(i, j)` lives at `ptr[i * rs + j * cs]`.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

impl<'a> Mat<'a> {
    /// Row-major `rows x cols`.
    fn rm(data: &'a [f64], cols: usize) -> Self {
        Mat { data, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    fn rm_t(data: &'a [f64], cols: usize) -> Self {
        Mat { data, rs: 1, cs: cols }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n` stored with strides `(rsc, csc)`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, beta: f64, c: &mut [f64], rsc: usize, csc: usize) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (a.max_index(m, k) < a.data.len() && b.max_index(k, n) < b.data.len()));
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: every index reachable through the given strides was bounds
    // checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeometry,
    input: &[f32],
    weight: &[f32],
    bias: &[f32],
) -> Vec<f32> {
    let (k, p) = (g.patch_len(), g.out_pixels());
    let wd: Vec<f64> = weight.iter().map(|&v| v as f64).collect();
    let mut out = Vec::with_capacity(g.n * g.o * p);
    with_scratch(&[k * p, g.o * p], |bufs| {
        let [cols, acc] = bufs else { unreachable!() };
        let (cols, acc) = (&mut cols[..k * p], &mut acc[..g.o * p]);
        for img in input.chunks_exact(g.c * g.h * g.w) {
            im2col(g, img, cols);
            for (oc, row) in acc.chunks_exact_mut(p).enumerate() {
                row.fill(bias[oc] as f64);
            }
            // out^T (p x o) = cols^T (p x k) * W^T (k x o), written into out (o x p)
            gemm(p, k, g.o, Mat::rm_t(cols, p), Mat::rm_t(&wd, k), 1.0, acc, 1, p);
            out.extend(acc.iter().map(|&v| v as f32));
        }
    });
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f32],
    weight: &[f32],
    grad_out: &[f64],
    need_input_grad: bool,
) -> ConvGrads {
    let (k, p) = (g.patch_len(), g.out_pixels());
    let per_in = g.c * g.h * g.w;
    let mut dw = vec![0.0f64; g.o * k];
    let mut db = vec![0.0f64; g.o];

    with_scratch(&[k * p], |bufs| {
        let cols = &mut bufs[0][..k * p];
        for (img, dy) in input.chunks_exact(per_in).zip(grad_out.chunks_exact(g.o * p)) {
            for (oc, row) in dy.chunks_exact(p).enumerate() {
                db[oc] += row.iter().sum::<f64>();
            }
            im2col(g, img, cols);
            // dW^T (k x o) += cols (k x p) * dy^T (p x o), written into dW (o x k)
            gemm(k, p, g.o, Mat::rm(cols, p), Mat::rm_t(dy, p), 1.0, &mut dw, 1, k);
        }
    });

    let input_grad = need_input_grad.then(|| {
        if g.is_same() {
            input_grad_same(g, weight, grad_out)
        } else {
            input_grad_col2im(g, weight, grad_out)
        }
    });
    ConvGrads {
        input: input_grad,
        weight: dw,
        bias: db,
    }
}

/// dX as a convolution of dY with the spatially flipped, channel-swapped kernel.
fn input_grad_same(g: &ConvGeometry, weight: &[f32], grad_out: &[f64]) -> Vec<f64> {
    let t = g.transposed();
    let (kk, kt, p) = (g.kh * g.kw, t.patch_len(), t.out_pixels());
    // flipped[c][(o, ky, kx)] = W[o][c][kh-1-ky][kw-1-kx]
    let mut flipped = vec![0.0f64; g.c * kt];
    for o in 0..g.o {
        for c in 0..g.c {
            for r in 0..kk {
                flipped[c * kt + o * kk + r] = weight[(o * g.c + c) * kk + (kk - 1 - r)] as f64;
            }
        }
    }
    let mut dx = vec![0.0f64; g.n * g.c * p];
    with_scratch(&[kt * p], |bufs| {
        let cols = &mut bufs[0][..kt * p];
        for (dy, dimg) in grad_out
            .chunks_exact(g.o * p)
            .zip(dx.chunks_exact_mut(g.c * p))
        {
            im2col(&t, dy, cols);
            gemm(p, kt, g.c, Mat::rm_t(cols, p), Mat::rm_t(&flipped, kt), 0.0, dimg, 1, p);
        }
    });
    dx
}

fn input_grad_col2im(g: &ConvGeometry, weight: &[f32], grad_out: &[f64]) -> Vec<f64> {
    let (k, p) = (g.patch_len(), g.out_pixels());
    let wd: Vec<f64> = weight.iter().map(|&v| v as f64).collect();
    let mut dx = vec![0.0f64; g.n * g.c * g.h * g.w];
    with_scratch(&[k * p], |bufs| {
        let dcols = &mut bufs[0][..k * p];
        for (dy, dimg) in grad_out
            .chunks_exact(g.o * p)
            .zip(dx.chunks_exact_mut(g.c * g.h * g.w))
        {
            // dcols (k x p) = W^T (k x o) * dy (o x p)
            gemm(k, g.o, p, Mat::rm_t(&wd, k), Mat::rm(dy, p), 0.0, dcols, p, 1);
            col2im(g, dcols, dimg);
        }
    });
    dx
}
