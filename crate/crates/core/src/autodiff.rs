//! Minimal tape-based reverse-mode differentiation over 2-D arrays.
//!
//! Every value is a `rows × cols` matrix with the batch on the row axis.
//! Image feature maps are stored flattened channel-major (`C·H·W` columns) and
//! the convolution ops carry their own geometry.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};

/// Floating-point element type usable in a [`Graph`].
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    fn lit(x: f64) -> Self {
        x as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn lit(x: f64) -> Self {
        x
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution on a `channels × height × width` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Output size of a forward convolution.
    pub fn conv_out(&self) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(self.in_height), f(self.in_width))
    }

    /// Output size of a transposed (fractionally-strided) convolution.
    pub fn transpose_out(&self) -> (usize, usize) {
        let f = |n: usize| (n - 1) * self.stride + self.kernel - 2 * self.padding;
        (f(self.in_height), f(self.in_width))
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    ScaleRows(Var, Array1<F>),
    Concat(Var, Var),
    Slice(Var, usize),
    Relu(Var),
    LeakyRelu(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    NElu(Var),
    Exp(Var),
    Square(Var),
    Softplus(Var),
    RowSum(Var),
    Mean(Var),
    ChannelAffine {
        x: Var,
        scale: Array1<F>,
        spatial: usize,
    },
    BatchNorm {
        x: Var,
        xhat: Array2<F>,
        inv_std: Array1<F>,
        spatial: usize,
    },
    ChannelBias {
        x: Var,
        bias: Var,
        spatial: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Result of a batch-norm forward in training mode.
pub struct BatchStats<F> {
    pub mean: Array1<F>,
    pub var: Array1<F>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<F> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Tape of recorded operations.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<F: Real>(slot: &mut Option<Array2<F>>, g: Array2<F>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient flows to it.
    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (a trainable parameter or a probed input).
    pub fn leaf(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul {ar}x{ac} · {br}x{bc}");
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `x + b` with `b` a `1 × cols` row broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        assert_eq!(self.shape(b).0, 1);
        assert_eq!(self.shape(x).1, self.shape(b).1);
        let value = self.value(x) + self.value(b);
        let rg = self.rg(&[x, b]);
        self.push(value, Op::AddBias(x, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let value = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let value = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b));
        let value = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let value = self.value(x) * c;
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let value = self.value(x).mapv(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(value, Op::AddScalar(x), rg)
    }

    /// Multiplies row `i` by the constant `coefs[i]`.
    pub fn scale_rows(&mut self, x: Var, coefs: Array1<F>) -> Var {
        assert_eq!(self.shape(x).0, coefs.len());
        let mut value = self.value(x).clone();
        for (mut row, &c) in value.rows_mut().into_iter().zip(coefs.iter()) {
            row *= c;
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::ScaleRows(x, coefs), rg)
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).0, self.shape(b).0);
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat rows");
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Concat(a, b), rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        let rg = self.rg(&[x]);
        self.push(value, Op::Slice(x, start), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let zero = F::zero();
        let value = self.value(x).mapv(|v| if v > zero { v } else { zero });
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Var {
        let zero = F::zero();
        let value = self
            .value(x)
            .mapv(|v| if v > zero { v } else { v * slope });
        let rg = self.rg(&[x]);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.tanh());
        let rg = self.rg(&[x]);
        self.push(value, Op::Tanh(x), rg)
    }

    /// Negated ELU of the negated input: `x` for `x < 0`, `1 - e^{-x}` otherwise.
    pub fn nelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(nelu);
        let rg = self.rg(&[x]);
        self.push(value, Op::NElu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.exp());
        let rg = self.rg(&[x]);
        self.push(value, Op::Exp(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * v);
        let rg = self.rg(&[x]);
        self.push(value, Op::Square(x), rg)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(softplus);
        let rg = self.rg(&[x]);
        self.push(value, Op::Softplus(x), rg)
    }

    /// Sum over columns, giving `rows × 1`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let value = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(&[x]);
        self.push(value, Op::RowSum(x), rg)
    }

    /// Mean of all entries, giving `1 × 1`.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = F::from_usize(v.len()).unwrap();
        let value = Array2::from_elem((1, 1), v.sum() / n);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Per-channel `x·scale + shift` with constants; columns are `channels × spatial`.
    pub fn channel_affine(
        &mut self,
        x: Var,
        scale: Array1<F>,
        shift: Array1<F>,
        spatial: usize,
    ) -> Var {
        let (_, cols) = self.shape(x);
        assert_eq!(cols, scale.len() * spatial);
        let mut value = self.value(x).clone();
        for (c, (&a, &b)) in scale.iter().zip(shift.iter()).enumerate() {
            value
                .slice_mut(s![.., c * spatial..(c + 1) * spatial])
                .mapv_inplace(|v| v * a + b);
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::ChannelAffine { x, scale, spatial }, rg)
    }

    /// Batch normalization without learned affine, using statistics of this batch.
    pub fn batch_norm(&mut self, x: Var, spatial: usize, eps: F) -> (Var, BatchStats<F>) {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        assert_eq!(cols % spatial, 0);
        let channels = cols / spatial;
        let n = F::from_usize(rows * spatial).unwrap();
        let mut mean = Array1::zeros(channels);
        let mut var = Array1::zeros(channels);
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Array1::zeros(channels);
        for c in 0..channels {
            let block = xv.slice(s![.., c * spatial..(c + 1) * spatial]);
            let m = block.sum() / n;
            let v = block.fold(F::zero(), |acc, &t| acc + (t - m) * (t - m)) / n;
            let is = F::one() / (v + eps).sqrt();
            Zip::from(xhat.slice_mut(s![.., c * spatial..(c + 1) * spatial]))
                .and(&block)
                .for_each(|o, &t| *o = (t - m) * is);
            mean[c] = m;
            var[c] = v;
            inv_std[c] = is;
        }
        let rg = self.rg(&[x]);
        let out = self.push(
            xhat.clone(),
            Op::BatchNorm {
                x,
                xhat,
                inv_std,
                spatial,
            },
            rg,
        );
        (out, BatchStats { mean, var })
    }

    /// Adds `bias[c]` to every spatial position of channel `c`.
    pub fn channel_bias(&mut self, x: Var, bias: Var, spatial: usize) -> Var {
        let (_, cols) = self.shape(x);
        let (br, channels) = self.shape(bias);
        assert_eq!(br, 1);
        assert_eq!(cols, channels * spatial);
        let mut value = self.value(x).clone();
        let b = self.value(bias);
        for c in 0..channels {
            let bc = b[[0, c]];
            value
                .slice_mut(s![.., c * spatial..(c + 1) * spatial])
                .mapv_inplace(|v| v + bc);
        }
        let rg = self.rg(&[x, bias]);
        self.push(value, Op::ChannelBias { x, bias, spatial }, rg)
    }

    /// Convolution with weight `out_channels × (in_channels·k·k)`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let (rows, cols) = self.shape(x);
        assert_eq!(cols, geom.in_channels * geom.in_height * geom.in_width);
        assert_eq!(
            self.shape(w),
            (geom.out_channels, geom.in_channels * geom.kernel * geom.kernel)
        );
        let (oh, ow) = geom.conv_out();
        let mut value = Array2::zeros((rows, geom.out_channels * oh * ow));
        let wv = self.value(w);
        for (i, row) in self.value(x).rows().into_iter().enumerate() {
            let cols_mat = im2col(&row.to_vec(), &geom);
            let out = wv.dot(&cols_mat);
            value
                .row_mut(i)
                .assign(&out.into_shape_with_order(geom.out_channels * oh * ow).unwrap());
        }
        let rg = self.rg(&[x, w]);
        self.push(value, Op::Conv2d { x, w, geom }, rg)
    }

    /// Transposed convolution with weight `in_channels × (out_channels·k·k)`, no bias.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let (rows, cols) = self.shape(x);
        assert_eq!(cols, geom.in_channels * geom.in_height * geom.in_width);
        assert_eq!(
            self.shape(w),
            (geom.in_channels, geom.out_channels * geom.kernel * geom.kernel)
        );
        let (oh, ow) = geom.transpose_out();
        let out_geom = transpose_geom(&geom);
        let mut value = Array2::zeros((rows, geom.out_channels * oh * ow));
        let wv = self.value(w);
        let spatial = geom.in_height * geom.in_width;
        for (i, row) in self.value(x).rows().into_iter().enumerate() {
            let xin = row
                .to_owned()
                .into_shape_with_order((geom.in_channels, spatial))
                .unwrap();
            let cols_mat = wv.t().dot(&xin);
            let img = col2im(cols_mat.view(), &out_geom);
            value.row_mut(i).assign(&Array1::from(img));
        }
        let rg = self.rg(&[x, w]);
        self.push(value, Op::ConvTranspose2d { x, w, geom }, rg)
    }

    /// Reverse sweep from the scalar `root` (seeded with 1).
    pub fn backward(&self, root: Var) -> Grads<F> {
        assert_eq!(self.shape(root), (1, 1), "backward root must be 1x1");
        self.backward_with(root, Array2::from_elem((1, 1), F::one()))
    }

    /// Reverse sweep from `root` seeded with `seed` (same shape as `root`).
    pub fn backward_with(&self, root: Var, seed: Array2<F>) -> Grads<F> {
        let mut grads: Vec<Option<Array2<F>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op<F>,
        out: &Array2<F>,
        g: &Array2<F>,
        grads: &mut [Option<Array2<F>>],
    ) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).t().dot(g));
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.mapv(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g * self.value(*b));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g * self.value(*a));
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g * *c);
                }
            }
            Op::AddScalar(x) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
            }
            Op::ScaleRows(x, coefs) => {
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for (mut row, &c) in gx.rows_mut().into_iter().zip(coefs.iter()) {
                        row *= c;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Concat(a, b) => {
                let ac = self.shape(*a).1;
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.slice(s![.., ..ac]).to_owned());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.slice(s![.., ac..]).to_owned());
                }
            }
            Op::Slice(x, start) => {
                if self.wants(*x) {
                    let mut gx = Array2::zeros(self.shape(*x));
                    let w = g.ncols();
                    gx.slice_mut(s![.., *start..*start + w]).assign(g);
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Relu(x) => self.unary(*x, g, grads, |_, y| {
                if y > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }, out),
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                self.unary_in(*x, g, grads, |xv| if xv > F::zero() { F::one() } else { slope })
            }
            Op::Sigmoid(x) => self.unary(*x, g, grads, |_, y| y * (F::one() - y), out),
            Op::Tanh(x) => self.unary(*x, g, grads, |_, y| F::one() - y * y, out),
            Op::NElu(x) => self.unary_in(*x, g, grads, |xv| {
                if xv < F::zero() {
                    F::one()
                } else {
                    (-xv).exp()
                }
            }),
            Op::Exp(x) => self.unary(*x, g, grads, |_, y| y, out),
            Op::Square(x) => self.unary_in(*x, g, grads, |xv| xv + xv),
            Op::Softplus(x) => self.unary_in(*x, g, grads, sigmoid),
            Op::RowSum(x) => {
                if self.wants(*x) {
                    let cols = self.shape(*x).1;
                    let gx = g.broadcast((g.nrows(), cols)).unwrap().to_owned();
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let shape = self.shape(*x);
                    let n = F::from_usize(shape.0 * shape.1).unwrap();
                    accumulate(&mut grads[x.0], Array2::from_elem(shape, g[[0, 0]] / n));
                }
            }
            Op::ChannelAffine { x, scale, spatial } => {
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for (c, &a) in scale.iter().enumerate() {
                        gx.slice_mut(s![.., c * spatial..(c + 1) * spatial])
                            .mapv_inplace(|v| v * a);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::BatchNorm {
                x,
                xhat,
                inv_std,
                spatial,
            } => {
                if self.wants(*x) {
                    let rows = g.nrows();
                    let n = F::from_usize(rows * spatial).unwrap();
                    let mut gx = Array2::zeros(g.raw_dim());
                    for (c, &is) in inv_std.iter().enumerate() {
                        let cols = s![.., c * spatial..(c + 1) * spatial];
                        let gb = g.slice(cols);
                        let xb = xhat.slice(cols);
                        let sum_g = gb.sum();
                        let sum_gx = Zip::from(&gb)
                            .and(&xb)
                            .fold(F::zero(), |acc, &a, &b| acc + a * b);
                        Zip::from(gx.slice_mut(cols))
                            .and(&gb)
                            .and(&xb)
                            .for_each(|o, &gv, &xh| {
                                *o = is * (gv - sum_g / n - xh * sum_gx / n);
                            });
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::ChannelBias { x, bias, spatial } => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if self.wants(*bias) {
                    let channels = self.shape(*bias).1;
                    let gb = Array2::from_shape_fn((1, channels), |(_, c)| {
                        g.slice(s![.., c * spatial..(c + 1) * spatial]).sum()
                    });
                    accumulate(&mut grads[bias.0], gb);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (oh, ow) = geom.conv_out();
                let wv = self.value(*w);
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut gx = want_x.then(|| Array2::zeros(self.shape(*x)));
                let mut gw = want_w.then(|| Array2::zeros(wv.raw_dim()));
                for (i, row) in self.value(*x).rows().into_iter().enumerate() {
                    let gout = g
                        .row(i)
                        .to_owned()
                        .into_shape_with_order((geom.out_channels, oh * ow))
                        .unwrap();
                    if let Some(gw) = gw.as_mut() {
                        let cols_mat = im2col(&row.to_vec(), geom);
                        *gw += &gout.dot(&cols_mat.t());
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gcols = wv.t().dot(&gout);
                        gx.row_mut(i).assign(&Array1::from(col2im(gcols.view(), geom)));
                    }
                }
                if let Some(gx) = gx {
                    accumulate(&mut grads[x.0], gx);
                }
                if let Some(gw) = gw {
                    accumulate(&mut grads[w.0], gw);
                }
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let out_geom = transpose_geom(geom);
                let spatial = geom.in_height * geom.in_width;
                let wv = self.value(*w);
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut gx = want_x.then(|| Array2::zeros(self.shape(*x)));
                let mut gw = want_w.then(|| Array2::zeros(wv.raw_dim()));
                for (i, row) in self.value(*x).rows().into_iter().enumerate() {
                    // Forward was cols = wᵀ·x, out = col2im(cols); so gcols = im2col(g).
                    let gcols = im2col(&g.row(i).to_vec(), &out_geom);
                    if let Some(gx) = gx.as_mut() {
                        let gin = wv.dot(&gcols);
                        gx.row_mut(i)
                            .assign(&gin.into_shape_with_order(geom.in_channels * spatial).unwrap());
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xin = row
                            .to_owned()
                            .into_shape_with_order((geom.in_channels, spatial))
                            .unwrap();
                        *gw += &xin.dot(&gcols.t());
                    }
                }
                if let Some(gx) = gx {
                    accumulate(&mut grads[x.0], gx);
                }
                if let Some(gw) = gw {
                    accumulate(&mut grads[w.0], gw);
                }
            }
        }
    }

    /// Elementwise op whose derivative is a function of input and output.
    fn unary(
        &self,
        x: Var,
        g: &Array2<F>,
        grads: &mut [Option<Array2<F>>],
        d: impl Fn(F, F) -> F,
        out: &Array2<F>,
    ) {
        if !self.wants(x) {
            return;
        }
        let mut gx = g.clone();
        Zip::from(&mut gx)
            .and(self.value(x))
            .and(out)
            .for_each(|gv, &xv, &yv| *gv *= d(xv, yv));
        accumulate(&mut grads[x.0], gx);
    }

    fn unary_in(&self, x: Var, g: &Array2<F>, grads: &mut [Option<Array2<F>>], d: impl Fn(F) -> F) {
        if !self.wants(x) {
            return;
        }
        let mut gx = g.clone();
        Zip::from(&mut gx)
            .and(self.value(x))
            .for_each(|gv, &xv| *gv *= d(xv));
        accumulate(&mut grads[x.0], gx);
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn nelu<F: Real>(x: F) -> F {
    if x < F::zero() {
        x
    } else {
        F::one() - (-x).exp()
    }
}

/// Geometry of the forward convolution whose adjoint is the given transposed one.
fn transpose_geom(geom: &ConvGeom) -> ConvGeom {
    let (oh, ow) = geom.transpose_out();
    ConvGeom {
        in_channels: geom.out_channels,
        in_height: oh,
        in_width: ow,
        out_channels: geom.in_channels,
        kernel: geom.kernel,
        stride: geom.stride,
        padding: geom.padding,
    }
}

/// Unfolds a `C×H×W` image into a `(C·k·k) × (oh·ow)` patch matrix.
fn im2col<F: Real>(img: &[F], geom: &ConvGeom) -> Array2<F> {
    let (oh, ow) = geom.conv_out();
    let k = geom.kernel;
    let (h, w) = (geom.in_height, geom.in_width);
    let mut cols = Array2::zeros((geom.in_channels * k * k, oh * ow));
    for c in 0..geom.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let mut row = cols.row_mut(r);
                for oi in 0..oh {
                    let ii = (oi * geom.stride + ki) as isize - geom.padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * geom.stride + kj) as isize - geom.padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        row[oi * ow + oj] = img[(c * h + ii as usize) * w + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds a patch matrix back into an image.
fn col2im<F: Real>(cols: ArrayView2<F>, geom: &ConvGeom) -> Vec<F> {
    let (oh, ow) = geom.conv_out();
    let k = geom.kernel;
    let (h, w) = (geom.in_height, geom.in_width);
    let mut img = vec![F::zero(); geom.in_channels * h * w];
    for c in 0..geom.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = cols.row((c * k + ki) * k + kj);
                for oi in 0..oh {
                    let ii = (oi * geom.stride + ki) as isize - geom.padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * geom.stride + kj) as isize - geom.padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        img[(c * h + ii as usize) * w + jj as usize] += row[oi * ow + oj];
                    }
                }
            }
        }
    }
    img
}
