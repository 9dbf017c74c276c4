//! 2-D convolution (im2col + gemm) and the 2x transposed-convolution upsampler.

use rand::Rng;

use super::linalg::{gemm, MatRef};
use super::param::Param;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square-kernel convolution with symmetric zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}
crate::impl_module!(Conv2d { weight, bias });

/// Holds the im2col matrix, or the raw input for the pointwise and direct paths.
pub struct ConvCache {
    cols: Vec<f64>,
    in_shape: [usize; 4],
    direct: bool,
}

pub fn out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Fan-in scaled uniform initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn fan_in_uniform(rng: &mut impl Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl Conv2d {
    pub fn new(
        rng: &mut impl Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::new(
            vec![out_channels, in_channels, kernel, kernel],
            fan_in_uniform(rng, fan_in, out_channels * fan_in),
        );
        Self {
            weight,
            bias: Param::constant(vec![out_channels], 0.0),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// 1x1 convolution, stride 1.
    pub fn pointwise(rng: &mut impl Rng, in_channels: usize, out_channels: usize) -> Self {
        Self::new(rng, in_channels, out_channels, 1, 1, 0)
    }

    /// Same-size convolution: stride 1, padding `(k-1)/2`.
    pub fn same(rng: &mut impl Rng, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self::new(rng, in_channels, out_channels, kernel, 1, (kernel - 1) / 2)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Stride-1 kernels with few output channels skip im2col:
    /// its buffer would dwarf the arithmetic.
    fn use_direct(&self, positions: usize) -> bool {
        self.stride == 1 && self.kernel > 1 && self.out_channels <= 8 && positions >= 16
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn output_shape(&self, input: [usize; 4]) -> [usize; 4] {
        [
            input[0],
            self.out_channels,
            out_size(input[2], self.kernel, self.stride, self.padding),
            out_size(input[3], self.kernel, self.stride, self.padding),
        ]
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        if x.c() != self.in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels,
                x.c()
            )));
        }
        let out_shape = self.output_shape(x.shape());
        let (oh, ow) = (out_shape[2], out_shape[3]);
        let positions = oh * ow;
        let k = self.patch_len();
        if self.use_direct(positions) {
            let mut out = Tensor::zeros(out_shape);
            let geom = self.direct_geometry(x.shape());
            for n in 0..x.n() {
                let dst = out.sample_mut(n);
                for (co, plane) in dst.chunks_mut(positions).enumerate() {
                    plane.fill(self.bias.value[co]);
                }
                direct_forward(&self.weight.value, x.sample(n), &geom, dst);
            }
            return Ok((out, ConvCache { cols: x.data().to_vec(), in_shape: x.shape(), direct: true }));
        }
        let cols = if self.is_pointwise() {
            x.data().to_vec()
        } else {
            let mut cols = vec![0.0; x.n() * k * positions];
            for n in 0..x.n() {
                im2col(
                    x.sample(n),
                    [x.c(), x.h(), x.w()],
                    self.kernel,
                    self.stride,
                    self.padding,
                    (oh, ow),
                    &mut cols[n * k * positions..(n + 1) * k * positions],
                );
            }
            cols
        };
        let mut out = Tensor::zeros(out_shape);
        let w = MatRef::new(&self.weight.value, self.out_channels, k);
        for n in 0..x.n() {
            let dst = out.sample_mut(n);
            for (co, plane) in dst.chunks_mut(positions).enumerate() {
                plane.fill(self.bias.value[co]);
            }
            let col = MatRef::new(&cols[n * k * positions..(n + 1) * k * positions], k, positions);
            gemm(w, col, dst, 1.0);
        }
        Ok((out, ConvCache { cols, in_shape: x.shape(), direct: false }))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache, dy: &Tensor) -> Tensor {
        let in_shape = cache.in_shape;
        let positions = dy.plane_len();
        let k = self.patch_len();
        let mut dx = Tensor::zeros(in_shape);
        if cache.direct {
            let geom = self.direct_geometry(in_shape);
            let sample = in_shape[1] * in_shape[2] * in_shape[3];
            for n in 0..in_shape[0] {
                let g = dy.sample(n);
                for (co, plane) in g.chunks(positions).enumerate() {
                    self.bias.grad[co] += plane.iter().sum::<f64>();
                }
                let x = &cache.cols[n * sample..(n + 1) * sample];
                direct_backward(&self.weight.value, &mut self.weight.grad, x, &geom, g, dx.sample_mut(n));
            }
            return dx;
        }
        let mut dcols = vec![0.0; k * positions];
        for n in 0..in_shape[0] {
            let g = dy.sample(n);
            for (co, plane) in g.chunks(positions).enumerate() {
                self.bias.grad[co] += plane.iter().sum::<f64>();
            }
            let gm = MatRef::new(g, self.out_channels, positions);
            let col = MatRef::new(&cache.cols[n * k * positions..(n + 1) * k * positions], k, positions);
            gemm(gm, col.t(), &mut self.weight.grad, 1.0);
            let w = MatRef::new(&self.weight.value, self.out_channels, k);
            if self.is_pointwise() {
                gemm(w.t(), gm, dx.sample_mut(n), 0.0);
            } else {
                gemm(w.t(), gm, &mut dcols, 0.0);
                col2im(
                    &dcols,
                    [in_shape[1], in_shape[2], in_shape[3]],
                    self.kernel,
                    self.stride,
                    self.padding,
                    (dy.h(), dy.w()),
                    dx.sample_mut(n),
                );
            }
        }
        dx
    }
}

struct DirectGeometry {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kernel: usize,
    padding: usize,
}

impl Conv2d {
    fn direct_geometry(&self, input: [usize; 4]) -> DirectGeometry {
        let out = self.output_shape(input);
        DirectGeometry {
            cin: self.in_channels,
            cout: self.out_channels,
            h: input[2],
            w: input[3],
            oh: out[2],
            ow: out[3],
            kernel: self.kernel,
            padding: self.padding,
        }
    }
}

impl DirectGeometry {
    /// Output range `[lo, hi)` whose input coordinate `o + k - padding` lies in `[0, len)`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(k);
        let hi = (len + self.padding).saturating_sub(k).min(out_len);
        (lo, hi.max(lo))
    }

    /// Calls `f(weight index, in plane offset, out plane offset, run length)` for
    /// every contiguous row run of every tap.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let k = self.kernel;
        for co in 0..self.cout {
            for ci in 0..self.cin {
                for ky in 0..k {
                    let (y0, y1) = self.valid(ky, self.h, self.oh);
                    for kx in 0..k {
                        let (x0, x1) = self.valid(kx, self.w, self.ow);
                        if x1 == x0 {
                            continue;
                        }
                        let wi = ((co * self.cin + ci) * k + ky) * k + kx;
                        for oy in y0..y1 {
                            let iy = oy + ky - self.padding;
                            let src = ci * self.h * self.w + iy * self.w + x0 + kx - self.padding;
                            let dst = co * self.oh * self.ow + oy * self.ow + x0;
                            f(wi, src, dst, x1 - x0);
                        }
                    }
                }
            }
        }
    }
}

fn direct_forward(weight: &[f64], x: &[f64], g: &DirectGeometry, out: &mut [f64]) {
    g.for_each_run(|wi, src, dst, len| {
        let wv = weight[wi];
        for (o, v) in out[dst..dst + len].iter_mut().zip(&x[src..src + len]) {
            *o += wv * v;
        }
    });
}

fn direct_backward(weight: &[f64], dweight: &mut [f64], x: &[f64], g: &DirectGeometry, dy: &[f64], dx: &mut [f64]) {
    g.for_each_run(|wi, src, dst, len| {
        let gy = &dy[dst..dst + len];
        dweight[wi] += gy.iter().zip(&x[src..src + len]).map(|(a, b)| a * b).sum::<f64>();
        let wv = weight[wi];
        for (d, v) in dx[src..src + len].iter_mut().zip(gy) {
            *d += wv * v;
        }
    });
}

fn im2col(
    x: &[f64],
    [c, h, w]: [usize; 3],
    kernel: usize,
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
    cols: &mut [f64],
) {
    let positions = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    [c, h, w]: [usize; 3],
    kernel: usize,
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
    dx: &mut [f64],
) {
    let positions = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution with a 2x2 kernel and stride 2: each input pixel
/// expands into a 2x2 output block, doubling height and width.
///
/// Weight layout is `(in_channels, out_channels, 2, 2)`.
#[derive(Clone, Debug)]
pub struct Upsample2x {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
}
crate::impl_module!(Upsample2x { weight, bias });

pub struct UpsampleCache {
    input: Tensor,
}

impl Upsample2x {
    pub fn new(rng: &mut impl Rng, in_channels: usize, out_channels: usize) -> Self {
        Self {
            weight: Param::new(
                vec![in_channels, out_channels, 2, 2],
                fan_in_uniform(rng, in_channels, in_channels * out_channels * 4),
            ),
            bias: Param::constant(vec![out_channels], 0.0),
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, UpsampleCache)> {
        if x.c() != self.in_channels {
            return Err(Error::Shape(format!(
                "upsampler expects {} channels, got {}",
                self.in_channels,
                x.c()
            )));
        }
        let (h, w) = x.spatial();
        let p = h * w;
        let rows = self.out_channels * 4;
        let mut out = Tensor::zeros([x.n(), self.out_channels, 2 * h, 2 * w]);
        let mut blocks = vec![0.0; rows * p];
        let wm = MatRef::new(&self.weight.value, self.in_channels, rows).t();
        for n in 0..x.n() {
            gemm(wm, MatRef::new(x.sample(n), self.in_channels, p), &mut blocks, 0.0);
            let dst = out.sample_mut(n);
            for co in 0..self.out_channels {
                let b = self.bias.value[co];
                for a in 0..2 {
                    for bx in 0..2 {
                        let src = &blocks[(co * 4 + a * 2 + bx) * p..][..p];
                        for y in 0..h {
                            for xx in 0..w {
                                dst[(co * 2 * h + 2 * y + a) * 2 * w + 2 * xx + bx] = src[y * w + xx] + b;
                            }
                        }
                    }
                }
            }
        }
        Ok((out, UpsampleCache { input: x.clone() }))
    }

    pub fn backward(&mut self, cache: &UpsampleCache, dy: &Tensor) -> Tensor {
        let x = &cache.input;
        let (h, w) = x.spatial();
        let p = h * w;
        let rows = self.out_channels * 4;
        let mut dx = Tensor::zeros(x.shape());
        let mut dblocks = vec![0.0; rows * p];
        for n in 0..x.n() {
            let g = dy.sample(n);
            for co in 0..self.out_channels {
                for a in 0..2 {
                    for bx in 0..2 {
                        let dst = &mut dblocks[(co * 4 + a * 2 + bx) * p..][..p];
                        for y in 0..h {
                            for xx in 0..w {
                                let v = g[(co * 2 * h + 2 * y + a) * 2 * w + 2 * xx + bx];
                                dst[y * w + xx] = v;
                                self.bias.grad[co] += v;
                            }
                        }
                    }
                }
            }
            let db = MatRef::new(&dblocks, rows, p);
            let xm = MatRef::new(x.sample(n), self.in_channels, p);
            // dW (Cin x 4Cout) += x (Cin x P) * dblocks^T
            gemm(xm, db.t(), &mut self.weight.grad, 1.0);
            let wm = MatRef::new(&self.weight.value, self.in_channels, rows);
            gemm(wm, db, dx.sample_mut(n), 0.0);
        }
        dx
    }
}

/// Nearest-neighbour 2x upsampling (no parameters).
pub fn nearest_up2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, 2 * h, 2 * w], |i, j, y, xx| x.at(i, j, y / 2, xx / 2))
}

pub fn nearest_up2_backward(dy: &Tensor) -> Tensor {
    let [n, c, h2, w2] = dy.shape();
    let mut dx = Tensor::zeros([n, c, h2 / 2, w2 / 2]);
    for i in 0..n {
        for j in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    let idx = dx.index(i, j, y / 2, x / 2);
                    dx.data_mut()[idx] += dy.at(i, j, y, x);
                }
            }
        }
    }
    dx
}
