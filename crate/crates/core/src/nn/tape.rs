//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the record in reverse and returns a
//! [`Gradients`] table keyed by [`Var`] and by parameter slot.

use crate::scalar::{matmul_into, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape.to_vec(), vec![T::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::new(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn scalar(v: T) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns when viewed as a matrix whose last axis is the column.
    pub fn dims2(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        let rows = if cols == 0 { 0 } else { self.data.len() / cols };
        (rows, cols)
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2dShape {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Gelu(Var),
    Exp(Var),
    Sqrt(Var),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxAll(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Sum(Var),
    Mean(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    StraightThrough(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: Conv2dShape, cols: Vec<T> },
    Upsample2x(Var),
    ConcatChannels(Vec<Var>),
    Composite { density: Var, rgb: Var, deltas: Vec<T>, background: [T; 3], samples: usize, trans: Vec<T>, weights: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients<T> {
    per_var: Vec<Option<Vec<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.per_var.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a parameter slot, summed over every time it was loaded.
    pub fn param(&self, slot: usize) -> Option<Vec<T>> {
        let mut acc: Option<Vec<T>> = None;
        for &(s, node) in &self.params {
            if s != slot {
                continue;
            }
            if let Some(g) = self.per_var[node].as_ref() {
                match acc.as_mut() {
                    Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += *y),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let y = half * x * (T::one() + th);
    let dinner = c * (T::one() + T::of(3.0) * k * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * dinner;
    (y, dy)
}

/// Alpha-composites one ray's samples front to back.
///
/// Returns `(color, weights, transmittance)` where `transmittance[i]` is the
/// fraction of light reaching sample `i` and has one extra trailing entry
/// for the light that exits the ray.
pub fn composite_ray<T: Scalar>(
    density: &[T],
    rgb: &[T],
    deltas: &[T],
    background: [T; 3],
) -> ([T; 3], Vec<T>, Vec<T>) {
    let n = density.len();
    let mut trans = Vec::with_capacity(n + 1);
    let mut weights = Vec::with_capacity(n);
    let mut t = T::one();
    let mut color = [T::zero(); 3];
    let mut wsum = T::zero();
    for i in 0..n {
        trans.push(t);
        let optical = density[i] * deltas[i];
        let keep = (-optical).exp();
        let w = t * (T::one() - keep);
        weights.push(w);
        wsum += w;
        for c in 0..3 {
            color[c] += w * rgb[3 * i + c];
        }
        t = t * keep;
    }
    trans.push(t);
    let rest = (T::one() - wsum).max(T::zero());
    for c in 0..3 {
        color[c] += rest * background[c];
    }
    (color, weights, trans)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, v: T) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn param(&mut self, slot: usize, t: &Tensor<T>) -> Var {
        self.push(t.clone(), Op::Param(slot))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = &self.nodes[x.0].value;
        let value = Tensor::new(src.shape.clone(), src.data.iter().map(|&v| f(v)).collect());
        self.push(value, op)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "elementwise shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape.clone(), data);
        self.push(value, op)
    }

    /// Matrix product `op(a) · op(b)` of 2-D operands.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (ar, ac) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.data(a), ta, self.data(b), tb, m, k, n, &mut out, false);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (_, n) = self.value(x).dims2();
        assert_eq!(self.value(b).len(), n, "bias length");
        let bias = self.data(b).to_vec();
        let src = self.value(x);
        let mut data = src.data.clone();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(&bias).for_each(|(v, &c)| *v += c);
        }
        let value = Tensor::new(src.shape.clone(), data);
        self.push(value, Op::AddBias(x, b))
    }

    /// Multiplies every row of an `m×n` matrix elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let (_, n) = self.value(x).dims2();
        assert_eq!(self.value(g).len(), n, "row gain length");
        let gain = self.data(g).to_vec();
        let src = self.value(x);
        let mut data = src.data.clone();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(&gain).for_each(|(v, &c)| *v *= c);
        }
        let value = Tensor::new(src.shape.clone(), data);
        self.push(value, Op::MulRow(x, g))
    }

    /// Scales row `i` of an `m×n` matrix by `c[i]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        assert_eq!(self.value(c).len(), m, "column gain length");
        let gain = self.data(c).to_vec();
        let src = self.value(x);
        let mut data = src.data.clone();
        for (row, &g) in data.chunks_mut(n.max(1)).zip(&gain) {
            row.iter_mut().for_each(|v| *v *= g);
        }
        let value = Tensor::new(src.shape.clone(), data);
        self.push(value, Op::MulCol(x, c))
    }

    /// Multiplies every element by a single-element variable.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let k = self.value(s).item();
        self.unary(x, |v| v * k, Op::ScaleBy(x, s))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        self.unary(x, |v| v * k, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: T) -> Var {
        self.unary(x, |v| v + k, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { v * slope }, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu(v).0, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (_, n) = src.dims2();
        let mut data = src.data.clone();
        for row in data.chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(src.shape.clone(), data);
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Log-softmax over every element of the tensor taken as one distribution.
    pub fn log_softmax_all(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mx = src.data.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = mx + src.data.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
        let value = Tensor::new(src.shape.clone(), src.data.iter().map(|&v| v - lse).collect());
        self.push(value, Op::LogSoftmaxAll(x))
    }

    /// Row-wise standardization (zero mean, unit variance, no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let src = self.value(x);
        let (m, n) = src.dims2();
        let nn = T::of(n as f64);
        let mut data = src.data.clone();
        let mut rstd = Vec::with_capacity(m);
        for row in data.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let r = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let value = Tensor::new(src.shape.clone(), data);
        self.push(value, Op::LayerNorm { x, rstd })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().copied().sum::<T>() / T::of(d.len().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean squared difference between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(x).dims2();
        assert!(start + len <= n, "column slice out of range");
        let src = self.data(x);
        let mut data = Vec::with_capacity(m * len);
        for row in src.chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        self.push(Tensor::new(vec![m, len], data), Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).dims2().1).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                assert_eq!(self.value(p).dims2().0, m, "concat row mismatch");
                data.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        self.push(Tensor::new(vec![m, total], data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(x).dims2();
        assert!(start + len <= m, "row slice out of range");
        let data = self.data(x)[start * n..(start + len) * n].to_vec();
        self.push(Tensor::new(vec![len, n], data), Op::SliceRows { x, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).dims2().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, w) = self.value(p).dims2();
            assert_eq!(w, n, "concat column mismatch");
            data.extend_from_slice(self.data(p));
            rows += m;
        }
        self.push(Tensor::new(vec![rows, n], data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let data = self.data(x).to_vec();
        self.push(Tensor::new(shape.to_vec(), data), Op::Reshape(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        let src = self.data(x);
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], data), Op::Transpose(x))
    }

    /// Forward value `hard`, backward gradient routed unchanged to `soft`.
    pub fn straight_through(&mut self, hard: Tensor<T>, soft: Var) -> Var {
        assert_eq!(hard.shape, self.value(soft).shape, "straight-through shape");
        self.push(hard, Op::StraightThrough(soft))
    }

    /// 2-D convolution of an NCHW batch with square kernels.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCkk");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let (batch, in_ch, in_h, in_w) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_ch, kernel) = (ws[0], ws[2]);
        let out_h = (in_h + 2 * pad - kernel) / stride + 1;
        let out_w = (in_w + 2 * pad - kernel) / stride + 1;
        let geom = Conv2dShape { batch, in_ch, in_h, in_w, out_ch, kernel, stride, pad, out_h, out_w };
        let ckk = in_ch * kernel * kernel;
        let hw = out_h * out_w;
        let mut cols = vec![T::zero(); batch * ckk * hw];
        let xd = self.data(x);
        for n in 0..batch {
            im2col(&xd[n * in_ch * in_h * in_w..(n + 1) * in_ch * in_h * in_w], &geom, &mut cols[n * ckk * hw..(n + 1) * ckk * hw]);
        }
        let wd = self.data(w);
        let bd = self.data(b);
        let mut out = vec![T::zero(); batch * out_ch * hw];
        for n in 0..batch {
            let o = &mut out[n * out_ch * hw..(n + 1) * out_ch * hw];
            for (oc, row) in o.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = bd[oc]);
            }
            matmul_into(wd, false, &cols[n * ckk * hw..(n + 1) * ckk * hw], false, out_ch, ckk, hw, o, true);
        }
        self.push(
            Tensor::new(vec![batch, out_ch, out_h, out_w], out),
            Op::Conv2d { x, w, b, geom, cols },
        )
    }

    /// Nearest-neighbour 2× spatial upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.data(x);
        let mut data = vec![T::zero(); nc * 4 * h * w];
        for p in 0..nc {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    data[p * 4 * h * w + i * 2 * w + j] = src[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        self.push(Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], data), Op::Upsample2x(x))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let s0 = self.shape(parts[0]).to_vec();
        let (batch, h, w) = (s0[0], s0[2], s0[3]);
        let chans: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        let total: usize = chans.iter().sum();
        let mut data = Vec::with_capacity(batch * total * h * w);
        for n in 0..batch {
            for (&p, &c) in parts.iter().zip(&chans) {
                let s = self.shape(p);
                assert!(s[0] == batch && s[2] == h && s[3] == w, "concat_channels shape mismatch");
                data.extend_from_slice(&self.data(p)[n * c * h * w..(n + 1) * c * h * w]);
            }
        }
        self.push(Tensor::new(vec![batch, total, h, w], data), Op::ConcatChannels(parts.to_vec()))
    }

    /// Volume-renders `rays` rays of `samples` samples each.
    ///
    /// `density` holds `rays·samples` nonnegative values, `rgb` the matching
    /// `rays·samples×3` colors. Returns the `rays×3` composited colors.
    pub fn composite(
        &mut self,
        density: Var,
        rgb: Var,
        deltas: Vec<T>,
        background: [T; 3],
        samples: usize,
    ) -> Var {
        let total = self.value(density).len();
        assert_eq!(deltas.len(), total, "one delta per sample");
        assert_eq!(self.value(rgb).len(), 3 * total, "three colors per sample");
        let rays = total / samples;
        let mut out = Vec::with_capacity(rays * 3);
        let mut trans_all = Vec::with_capacity(rays * (samples + 1));
        let mut weights_all = Vec::with_capacity(total);
        {
            let dd = self.data(density);
            let cd = self.data(rgb);
            for r in 0..rays {
                let span = r * samples..(r + 1) * samples;
                let (c, w, t) = composite_ray(
                    &dd[span.clone()],
                    &cd[3 * span.start..3 * span.end],
                    &deltas[span],
                    background,
                );
                out.extend_from_slice(&c);
                weights_all.extend(w);
                trans_all.extend(t);
            }
        }
        self.push(
            Tensor::new(vec![rays, 3], out),
            Op::Composite { density, rgb, deltas, background, samples, trans: trans_all, weights: weights_all },
        )
    }

    /// Per-sample compositing weights recorded by a [`Tape::composite`] node.
    pub fn composite_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Composite { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Back-propagates from a single-element `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        let mut params = Vec::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(slot) => params.push((*slot, i)),
                Op::MatMul { a, b, ta, tb } => {
                    let (ta, tb) = (*ta, *tb);
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let (ar, ac) = va.dims2();
                    let (br, bc) = vb.dims2();
                    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
                    let n = if tb { br } else { bc };
                    // dA' = G · B'^T, dB' = A'^T · G, then undo the transposes.
                    let ga = slot(&mut grads, *a, va.len());
                    if ta {
                        matmul_into(&vb.data, tb, &g, true, k, n, m, ga, true);
                    } else {
                        matmul_into(&g, false, &vb.data, !tb, m, n, k, ga, true);
                    }
                    let gb = slot(&mut grads, *b, vb.len());
                    if tb {
                        matmul_into(&g, true, &va.data, ta, n, m, k, gb, true);
                    } else {
                        matmul_into(&va.data, !ta, &g, false, k, m, n, gb, true);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                    let da: Vec<T> = g.iter().zip(vb).map(|(&x, &y)| x * y).collect();
                    let db: Vec<T> = g.iter().zip(va).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::Div(a, b) => {
                    let vb = &self.nodes[b.0].value.data;
                    let y = &node.value.data;
                    let da: Vec<T> = g.iter().zip(vb).map(|(&x, &d)| x / d).collect();
                    let db: Vec<T> = g.iter().zip(vb).zip(y).map(|((&x, &d), &q)| -x * q / d).collect();
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::AddBias(x, b) => {
                    let n = self.nodes[b.0].value.len();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    accumulate(&mut grads, *x, &g);
                    accumulate(&mut grads, *b, &db);
                }
                Op::MulRow(x, gain) => {
                    let vx = &self.nodes[x.0].value.data;
                    let vg = &self.nodes[gain.0].value.data;
                    let n = vg.len();
                    let mut dx = g.clone();
                    let mut dg = vec![T::zero(); n];
                    for (r, row) in dx.chunks_mut(n).enumerate() {
                        for j in 0..n {
                            dg[j] += row[j] * vx[r * n + j];
                            row[j] *= vg[j];
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                    accumulate(&mut grads, *gain, &dg);
                }
                Op::MulCol(x, gain) => {
                    let vx = &self.nodes[x.0].value.data;
                    let vg = &self.nodes[gain.0].value.data;
                    let m = vg.len();
                    let n = if m == 0 { 0 } else { vx.len() / m };
                    let mut dx = g.clone();
                    let mut dg = vec![T::zero(); m];
                    for r in 0..m {
                        for j in 0..n {
                            dg[r] += dx[r * n + j] * vx[r * n + j];
                            dx[r * n + j] *= vg[r];
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                    accumulate(&mut grads, *gain, &dg);
                }
                Op::ScaleBy(x, s) => {
                    let k = self.nodes[s.0].value.item();
                    let vx = &self.nodes[x.0].value.data;
                    let ds: T = g.iter().zip(vx).map(|(&a, &b)| a * b).sum();
                    let dx: Vec<T> = g.iter().map(|&v| v * k).collect();
                    accumulate(&mut grads, *x, &dx);
                    accumulate(&mut grads, *s, &[ds]);
                }
                Op::Scale(x, k) => {
                    let dx: Vec<T> = g.iter().map(|&v| v * *k).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::AddScalar(x) => accumulate(&mut grads, *x, &g),
                Op::Relu(x) => {
                    let vx = &self.nodes[x.0].value.data;
                    let dx: Vec<T> = g.iter().zip(vx).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::LeakyRelu(x, slope) => {
                    let vx = &self.nodes[x.0].value.data;
                    let dx: Vec<T> = g.iter().zip(vx).map(|(&d, &v)| if v > T::zero() { d } else { d * *slope }).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value.data;
                    let dx: Vec<T> = g.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Tanh(x) => {
                    let y = &node.value.data;
                    let dx: Vec<T> = g.iter().zip(y).map(|(&d, &t)| d * (T::one() - t * t)).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Softplus(x) => {
                    let vx = &self.nodes[x.0].value.data;
                    let dx: Vec<T> = g.iter().zip(vx).map(|(&d, &v)| d * sigmoid(v)).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Gelu(x) => {
                    let vx = &self.nodes[x.0].value.data;
                    let dx: Vec<T> = g.iter().zip(vx).map(|(&d, &v)| d * gelu(v).1).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Exp(x) => {
                    let y = &node.value.data;
                    let dx: Vec<T> = g.iter().zip(y).map(|(&d, &e)| d * e).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Sqrt(x) => {
                    let y = &node.value.data;
                    let half = T::of(0.5);
                    let dx: Vec<T> = g.iter().zip(y).map(|(&d, &s)| d * half / s).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Abs(x) => {
                    let vx = &self.nodes[x.0].value.data;
                    let dx: Vec<T> = g
                        .iter()
                        .zip(vx)
                        .map(|(&d, &v)| if v > T::zero() { d } else if v < T::zero() { -d } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Square(x) => {
                    let vx = &self.nodes[x.0].value.data;
                    let two = T::of(2.0);
                    let dx: Vec<T> = g.iter().zip(vx).map(|(&d, &v)| d * two * v).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value.data;
                    let (_, n) = node.value.dims2();
                    let mut dx = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::LogSoftmaxAll(x) => {
                    let y = &node.value.data;
                    let gs: T = g.iter().copied().sum();
                    let dx: Vec<T> = g.iter().zip(y).map(|(&d, &l)| d - l.exp() * gs).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::LayerNorm { x, rstd } => {
                    let y = &node.value.data;
                    let (_, n) = node.value.dims2();
                    let nn = T::of(n as f64);
                    let mut dx = vec![T::zero(); y.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let gm = gr.iter().copied().sum::<T>() / nn;
                        let gy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / nn;
                        for j in 0..n {
                            dx[r * n + j] = rs * (gr[j] - gm - yr[j] * gy);
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.len();
                    accumulate(&mut grads, *x, &vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.nodes[x.0].value.len();
                    let v = g[0] / T::of(n.max(1) as f64);
                    accumulate(&mut grads, *x, &vec![v; n]);
                }
                Op::SliceCols { x, start } => {
                    let (m, n) = self.nodes[x.0].value.dims2();
                    let len = node.value.dims2().1;
                    let dx = slot(&mut grads, *x, m * n);
                    for r in 0..m {
                        for j in 0..len {
                            dx[r * n + start + j] += g[r * len + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = node.value.dims2();
                    let mut off = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.dims2().1;
                        let mut dp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            dp.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        accumulate(&mut grads, p, &dp);
                        off += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let (m, n) = self.nodes[x.0].value.dims2();
                    let dx = slot(&mut grads, *x, m * n);
                    for (d, &gv) in dx[start * n..start * n + g.len()].iter_mut().zip(g.iter()) {
                        *d += gv;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        accumulate(&mut grads, p, &g[off..off + len]);
                        off += len;
                    }
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, &g),
                Op::Transpose(x) => {
                    let (m, n) = self.nodes[x.0].value.dims2();
                    let mut dx = vec![T::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = g[j * m + i];
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::StraightThrough(soft) => accumulate(&mut grads, *soft, &g),
                Op::Conv2d { x, w, b, geom, cols } => {
                    let ckk = geom.in_ch * geom.kernel * geom.kernel;
                    let hw = geom.out_h * geom.out_w;
                    let in_sz = geom.in_ch * geom.in_h * geom.in_w;
                    let wd = &self.nodes[w.0].value.data;
                    let mut db = vec![T::zero(); geom.out_ch];
                    for n in 0..geom.batch {
                        let gn = &g[n * geom.out_ch * hw..(n + 1) * geom.out_ch * hw];
                        for (oc, row) in gn.chunks(hw).enumerate() {
                            db[oc] += row.iter().copied().sum::<T>();
                        }
                    }
                    accumulate(&mut grads, *b, &db);
                    {
                        let dw = slot(&mut grads, *w, geom.out_ch * ckk);
                        for n in 0..geom.batch {
                            let gn = &g[n * geom.out_ch * hw..(n + 1) * geom.out_ch * hw];
                            let cn = &cols[n * ckk * hw..(n + 1) * ckk * hw];
                            matmul_into(gn, false, cn, true, geom.out_ch, hw, ckk, dw, true);
                        }
                    }
                    let mut dcols = vec![T::zero(); ckk * hw];
                    let dx = slot(&mut grads, *x, geom.batch * in_sz);
                    for n in 0..geom.batch {
                        let gn = &g[n * geom.out_ch * hw..(n + 1) * geom.out_ch * hw];
                        matmul_into(wd, true, gn, false, ckk, geom.out_ch, hw, &mut dcols, false);
                        col2im(&dcols, geom, &mut dx[n * in_sz..(n + 1) * in_sz]);
                    }
                }
                Op::Upsample2x(x) => {
                    let s = &self.nodes[x.0].value.shape;
                    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                    let mut dx = vec![T::zero(); nc * h * w];
                    for p in 0..nc {
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                dx[p * h * w + (i / 2) * w + j / 2] += g[p * 4 * h * w + i * 2 * w + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::ConcatChannels(parts) => {
                    let s = &node.value.shape;
                    let (batch, total, hw) = (s[0], s[1], s[2] * s[3]);
                    let mut off = 0;
                    for &p in parts {
                        let c = self.nodes[p.0].value.shape[1];
                        let mut dp = Vec::with_capacity(batch * c * hw);
                        for n in 0..batch {
                            let base = n * total * hw + off * hw;
                            dp.extend_from_slice(&g[base..base + c * hw]);
                        }
                        accumulate(&mut grads, p, &dp);
                        off += c;
                    }
                }
                Op::Composite { density, rgb, deltas, background, samples, trans, weights } => {
                    let p = *samples;
                    let rays = node.value.len() / 3;
                    let cd = &self.nodes[rgb.0].value.data;
                    let mut dd = vec![T::zero(); rays * p];
                    let mut dc = vec![T::zero(); rays * p * 3];
                    for r in 0..rays {
                        let gr = [g[3 * r], g[3 * r + 1], g[3 * r + 2]];
                        let gb: T = (0..3).map(|c| gr[c] * background[c]).sum();
                        // Contribution of sample i to the loss, relative to background.
                        let rel = |i: usize| -> T {
                            let base = 3 * (r * p + i);
                            (0..3).map(|c| gr[c] * cd[base + c]).sum::<T>() - gb
                        };
                        let mut suffix = T::zero();
                        for i in (0..p).rev() {
                            let idx = r * p + i;
                            let w = weights[idx];
                            let t_next = trans[r * (p + 1) + i + 1];
                            let ri = rel(i);
                            dd[idx] = deltas[idx] * (t_next * ri - suffix);
                            suffix += w * ri;
                            for c in 0..3 {
                                dc[3 * idx + c] = w * gr[c];
                            }
                        }
                    }
                    accumulate(&mut grads, *density, &dd);
                    accumulate(&mut grads, *rgb, &dc);
                }
            }
            grads[i] = Some(g);
        }
        Gradients { per_var: grads, params }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match grads[v.0].as_mut() {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => grads[v.0] = Some(g.to_vec()),
    }
}

fn im2col<T: Scalar>(x: &[T], geom: &Conv2dShape, cols: &mut [T]) {
    let k = geom.kernel;
    let hw = geom.out_h * geom.out_w;
    for c in 0..geom.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oi in 0..geom.out_h {
                    let ii = (oi * geom.stride + ki) as isize - geom.pad as isize;
                    for oj in 0..geom.out_w {
                        let jj = (oj * geom.stride + kj) as isize - geom.pad as isize;
                        let v = if ii >= 0 && jj >= 0 && (ii as usize) < geom.in_h && (jj as usize) < geom.in_w {
                            x[(c * geom.in_h + ii as usize) * geom.in_w + jj as usize]
                        } else {
                            T::zero()
                        };
                        cols[row * hw + oi * geom.out_w + oj] = v;
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], geom: &Conv2dShape, dx: &mut [T]) {
    let k = geom.kernel;
    let hw = geom.out_h * geom.out_w;
    for c in 0..geom.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                for oi in 0..geom.out_h {
                    let ii = (oi * geom.stride + ki) as isize - geom.pad as isize;
                    if ii < 0 || ii as usize >= geom.in_h {
                        continue;
                    }
                    for oj in 0..geom.out_w {
                        let jj = (oj * geom.stride + kj) as isize - geom.pad as isize;
                        if jj < 0 || jj as usize >= geom.in_w {
                            continue;
                        }
                        dx[(c * geom.in_h + ii as usize) * geom.in_w + jj as usize] += cols[row * hw + oi * geom.out_w + oj];
                    }
                }
            }
        }
    }
}
