use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;

use super::{Params, Real};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};

fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::lit(rng.random_range(-bound..=bound)))
        .collect()
}

/// Dense layer `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    /// Uniform fan-in initialization; `relu_follows` widens the bound for ReLU gain.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize, relu_follows: bool) -> Self {
        let gain = if relu_follows { 6.0 } else { 3.0 };
        let bound = (gain / d_in as f64).sqrt();
        Linear {
            weight: Array2::from_shape_vec((d_in, d_out), uniform(rng, d_in * d_out, bound))
                .expect("shape"),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Array2::zeros((d_in, d_out)),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear::zeros(self.d_in(), self.d_out())
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulate parameter gradients into `grad`; returns `dx` when asked.
    pub fn backward(
        &self,
        x: &Array2<T>,
        dy: &Array2<T>,
        grad: &mut Linear<T>,
        want_dx: bool,
    ) -> Option<Array2<T>> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        want_dx.then(|| dy.dot(&self.weight.t()))
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

fn relu<T: Real>(mut x: Array2<T>) -> Array2<T> {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
    x
}

/// Zero `d` wherever the post-ReLU activation is zero.
fn relu_backward<T: Real>(d: &mut Array2<T>, activation: &Array2<T>) {
    d.zip_mut_with(activation, |g, &a| {
        if a <= T::zero() {
            *g = T::zero()
        }
    });
}

/// Multi-layer perceptron with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

/// Input of every layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    inputs: Vec<Array2<T>>,
}

impl<T: Real> Mlp<T> {
    /// `dims = [in, hidden..., out]`. With `zero_final`, the output layer starts at zero.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dims: &[usize], zero_final: bool) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output sizes");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                if i + 1 == n && zero_final {
                    Linear::zeros(dims[i], dims[i + 1])
                } else {
                    Linear::new(rng, dims[i], dims[i + 1], i + 1 < n)
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(Linear::zeros_like).collect(),
        }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    fn check(&self, x: &Array2<T>) -> Result<()> {
        if x.ncols() != self.d_in() {
            return Err(Error::Shape(format!(
                "MLP expects {} inputs, got {}",
                self.d_in(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<Array2<T>> {
        self.check(x)?;
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            h = layer.forward(&relu(h));
        }
        Ok(h)
    }

    pub fn forward_train(&self, x: &Array2<T>) -> Result<(Array2<T>, MlpCache<T>)> {
        self.check(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(x.clone());
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            let a = relu(h);
            h = layer.forward(&a);
            inputs.push(a);
        }
        Ok((h, MlpCache { inputs }))
    }

    pub fn backward(
        &self,
        cache: &MlpCache<T>,
        dy: &Array2<T>,
        grad: &mut Mlp<T>,
        want_dx: bool,
    ) -> Option<Array2<T>> {
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            let need = want_dx || i > 0;
            let dx = self.layers[i].backward(&cache.inputs[i], &d, &mut grad.layers[i], need);
            match dx {
                Some(mut dx) if i > 0 => {
                    relu_backward(&mut dx, &cache.inputs[i]);
                    d = dx;
                }
                other => return other,
            }
        }
        None
    }
}

impl<T: Real> Params<T> for Mlp<T> {
    fn tensors(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

/// Square-kernel convolution on NHWC activations via im2col + gemm.
/// Weight layout is `(k*k*c_in, c_out)` with rows ordered `(ky, kx, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub c_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    ho: usize,
    wo: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = kernel * kernel * c_in;
        let bound = (6.0 / fan_in as f64).sqrt();
        Conv2d {
            weight: Array2::from_shape_vec((fan_in, c_out), uniform(rng, fan_in * c_out, bound))
                .expect("shape"),
            bias: Array1::zeros(c_out),
            c_in,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
            ..*self
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn geometry(&self, batch: usize, h: usize, w: usize) -> Geometry {
        let (ho, wo) = self.out_size(h, w);
        Geometry {
            batch,
            h,
            w,
            c: self.c_in,
            ho,
            wo,
        }
    }

    fn im2col(&self, mode: ExecMode, x: &[T], g: Geometry) -> Array2<T> {
        let k = self.kernel;
        let row = k * k * g.c;
        let mut cols = vec![T::zero(); g.batch * g.ho * g.wo * row];
        let (s, p) = (self.stride as isize, self.pad as isize);
        exec::fill_chunks(mode, &mut cols, g.ho * g.wo * row, |b, out| {
            let img = &x[b * g.h * g.w * g.c..(b + 1) * g.h * g.w * g.c];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let r = &mut out[(oy * g.wo + ox) * row..(oy * g.wo + ox + 1) * row];
                    for ky in 0..k {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let src = ((iy as usize) * g.w + ix as usize) * g.c;
                            let dst = (ky * k + kx) * g.c;
                            r[dst..dst + g.c].copy_from_slice(&img[src..src + g.c]);
                        }
                    }
                }
            }
        });
        Array2::from_shape_vec((g.batch * g.ho * g.wo, row), cols).expect("im2col shape")
    }

    fn col2im(&self, mode: ExecMode, dcols: &Array2<T>, g: Geometry) -> Vec<T> {
        let k = self.kernel;
        let row = k * k * g.c;
        let dcols = dcols.as_standard_layout();
        let dc = dcols.as_slice().expect("standard layout");
        let mut dx = vec![T::zero(); g.batch * g.h * g.w * g.c];
        let (s, p) = (self.stride as isize, self.pad as isize);
        exec::fill_chunks(mode, &mut dx, g.h * g.w * g.c, |b, img| {
            let src_block = &dc[b * g.ho * g.wo * row..(b + 1) * g.ho * g.wo * row];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let r = &src_block[(oy * g.wo + ox) * row..(oy * g.wo + ox + 1) * row];
                    for ky in 0..k {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let dst = ((iy as usize) * g.w + ix as usize) * g.c;
                            let src = (ky * k + kx) * g.c;
                            for c in 0..g.c {
                                img[dst + c] = img[dst + c] + r[src + c];
                            }
                        }
                    }
                }
            }
        });
        dx
    }
}

impl<T: Real> Params<T> for Conv2d<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Visual encoder: ReLU conv stack, flatten, linear projection to `d_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub convs: Vec<Conv2d<T>>,
    pub fc: Linear<T>,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub exec: ExecMode,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    batch: usize,
    cols: Vec<Array2<T>>,
    /// Post-ReLU output of every conv, `(batch*h*w, c)`.
    acts: Vec<Array2<T>>,
    sizes: Vec<(usize, usize)>,
    flat: Array2<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        channels: &[usize],
        strides: &[usize],
        kernel: usize,
        d_f: usize,
    ) -> Self {
        let mut c = in_channels;
        let (mut h, mut w) = (in_h, in_w);
        let mut convs = Vec::new();
        for (&co, &s) in channels.iter().zip(strides) {
            let conv = Conv2d::new(rng, c, co, kernel, s);
            (h, w) = conv.out_size(h, w);
            convs.push(conv);
            c = co;
        }
        Encoder {
            convs,
            fc: Linear::new(rng, h * w * c, d_f, false),
            in_channels,
            in_h,
            in_w,
            exec: ExecMode::default(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Encoder {
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
            fc: self.fc.zeros_like(),
            ..*self
        }
    }

    pub fn d_f(&self) -> usize {
        self.fc.d_out()
    }

    fn to_rows(&self, x: &Array4<T>) -> Result<Array2<T>> {
        let sh = x.shape();
        if sh[1] != self.in_channels || sh[2] != self.in_h || sh[3] != self.in_w {
            return Err(Error::Shape(format!(
                "encoder expects (_, {}, {}, {}), got {:?}",
                self.in_channels, self.in_h, self.in_w, sh
            )));
        }
        let b = sh[0];
        let nhwc = x.view().permuted_axes([0, 2, 3, 1]);
        let data: Vec<T> = nhwc.iter().copied().collect();
        Ok(Array2::from_shape_vec((b * self.in_h * self.in_w, self.in_channels), data)
            .expect("nhwc shape"))
    }

    /// Features for a batch of `(N, C, H, W)` observations.
    pub fn encode(&self, x: &Array4<T>) -> Result<Array2<T>> {
        Ok(self.forward_train(x)?.0)
    }

    pub fn forward_train(&self, x: &Array4<T>) -> Result<(Array2<T>, EncoderCache<T>)> {
        let batch = x.shape()[0];
        let mut act = self.to_rows(x)?;
        let (mut h, mut w) = (self.in_h, self.in_w);
        let mut cols = Vec::with_capacity(self.convs.len());
        let mut acts = Vec::with_capacity(self.convs.len());
        let mut sizes = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let g = conv.geometry(batch, h, w);
            let slice = act.as_standard_layout();
            let c = conv.im2col(self.exec, slice.as_slice().expect("standard"), g);
            let out = relu(c.dot(&conv.weight) + &conv.bias);
            sizes.push((h, w));
            (h, w) = (g.ho, g.wo);
            cols.push(c);
            act = out.clone();
            acts.push(out);
        }
        let flat = act
            .into_shape_with_order((batch, h * w * self.convs.last().map_or(self.in_channels, |c| c.c_out())))
            .expect("flatten");
        let feat = self.fc.forward(&flat);
        Ok((
            feat,
            EncoderCache {
                batch,
                cols,
                acts,
                sizes,
                flat,
            },
        ))
    }

    /// Accumulate parameter gradients for `dfeat`; observations get no gradient.
    pub fn backward(&self, cache: &EncoderCache<T>, dfeat: &Array2<T>, grad: &mut Encoder<T>) {
        let dflat = self
            .fc
            .backward(&cache.flat, dfeat, &mut grad.fc, !self.convs.is_empty());
        let Some(dflat) = dflat else { return };
        let last = self.convs.len() - 1;
        let mut d = dflat
            .into_shape_with_order(cache.acts[last].raw_dim())
            .expect("unflatten");
        for i in (0..self.convs.len()).rev() {
            let conv = &self.convs[i];
            relu_backward(&mut d, &cache.acts[i]);
            grad.convs[i].weight += &cache.cols[i].t().dot(&d);
            grad.convs[i].bias += &d.sum_axis(Axis(0));
            if i == 0 {
                break;
            }
            let dcols = d.dot(&conv.weight.t());
            let (h, w) = cache.sizes[i];
            let g = conv.geometry(cache.batch, h, w);
            let dx = conv.col2im(self.exec, &dcols, g);
            d = Array2::from_shape_vec((cache.batch * h * w, conv.c_in), dx).expect("col2im");
        }
    }
}

impl<T: Real> Params<T> for Encoder<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = self.convs.iter().flat_map(|c| c.tensors()).collect();
        v.extend(self.fc.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = self.convs.iter_mut().flat_map(|c| c.tensors_mut()).collect();
        v.extend(self.fc.tensors_mut());
        v
    }
}
