use super::Tensor;
use crate::error::{argument, Result};
use crate::geometry::BBox;

/// Arguments to `log` are clamped to at least this value.
pub const LOG_FLOOR: f64 = 1e-10;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Reshape(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, axis: usize },
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    GlobalAvgPool(Var),
    MaskZero { x: Var, mask: Vec<bool> },
    Conv3x3 { x: Var, k: Var, b: Var },
    RoiPool { x: Var, boxes: Vec<BBox> },
    RoiMaxPool { x: Var, argmax: Vec<usize> },
    ContextPool { x: Var, boxes: Vec<BBox> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of a forward computation, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so every input precedes its
/// consumers and a single reverse sweep visits each operation once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for `v`, zeros when unreachable.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.lens[v.0]],
        }
    }
}

/// (outer, len, inner) strides for iterating along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().with_shape(shape)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    fn check_rank(&self, v: Var, rank: usize, what: &str) -> Result<()> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(argument!("{what} expects rank {rank}, got shape {s:?}"));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_rank(a, 2, "matmul")?;
        self.check_rank(b, 2, "matmul")?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        if k != k2 {
            return Err(argument!("matmul inner dimensions {k} and {k2} differ"));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `x·w + b` with `x: [m,k]`, `w: [k,n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check_rank(x, 2, "linear")?;
        self.check_rank(w, 2, "linear")?;
        self.check_rank(b, 1, "linear bias")?;
        let (m, k) = (self.shape(x)[0], self.shape(x)[1]);
        let (k2, n) = (self.shape(w)[0], self.shape(w)[1]);
        if k != k2 || self.shape(b)[0] != n {
            return Err(argument!(
                "linear shapes {:?}·{:?}+{:?} do not conform",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            ));
        }
        let mut out = matmul_raw(self.data(x), self.data(w), m, k, n);
        let bias = self.data(b);
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Linear { x, w, b }, rg))
    }

    /// Output shape for an elementwise binary op; one side may be a scalar.
    fn binary_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() || sb.len() == 1 {
            Ok(sa.shape().to_vec())
        } else if sa.len() == 1 {
            Ok(sb.shape().to_vec())
        } else {
            Err(argument!("{what}: shapes {:?} and {:?} differ", sa.shape(), sb.shape()))
        }
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.binary_shape(a, b, what)?;
        let (da, db) = (self.data(a), self.data(b));
        let n: usize = shape.iter().product();
        let out: Vec<f64> = (0..n)
            .map(|i| {
                f(
                    da[if da.len() == 1 { 0 } else { i }],
                    db[if db.len() == 1 { 0 } else { i }],
                )
            })
            .collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&t| f(t)).collect());
        let rg = self.needs(x);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |t| t * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |t| t + s, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.neg(x);
        self.add_scalar(n, 1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |t| t.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Natural log with the argument clamped to `[LOG_FLOOR, ∞)`.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |t| t.max(LOG_FLOOR).ln(), Op::Log(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |t| t.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(argument!("softmax axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let rg = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(argument!("axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &src[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.needs(x);
        let op = if mean {
            Op::MeanAxis { x, axis }
        } else {
            Op::SumAxis { x, axis }
        };
        Ok(self.push(Tensor::from_parts(out_shape, out), op, rg))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Per-channel mean over the spatial cells of an `H×W×D` map.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check_rank(x, 3, "global_avg_pool")?;
        let s = self.shape(x).to_vec();
        let d = s[2];
        let cells = s[0] * s[1];
        let mut out = vec![0.0; d];
        for cell in self.data(x).chunks(d) {
            for (acc, v) in out.iter_mut().zip(cell) {
                *acc += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= cells as f64);
        let rg = self.needs(x);
        Ok(self.push(Tensor::from_parts(vec![d], out), Op::GlobalAvgPool(x), rg))
    }

    /// Zeroes every channel of the cells flagged in `mask` (`H·W` entries).
    pub fn masked_zero_fill(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        self.check_rank(x, 3, "masked_zero_fill")?;
        let s = self.shape(x).to_vec();
        if mask.len() != s[0] * s[1] {
            return Err(argument!("mask of {} cells for a {}x{} map", mask.len(), s[0], s[1]));
        }
        let d = s[2];
        let mut out = self.data(x).to_vec();
        for (cell, &m) in out.chunks_mut(d).zip(mask) {
            if m {
                cell.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let rg = self.needs(x);
        Ok(self.push(Tensor::from_parts(s, out), Op::MaskZero { x, mask: mask.to_vec() }, rg))
    }

    /// 3×3, stride 1, zero-padded convolution.
    ///
    /// `x: [H,W,Cin]`, `k: [3,3,Cin,Cout]`, `b: [Cout]` → `[H,W,Cout]`.
    pub fn conv3x3(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        self.check_rank(x, 3, "conv3x3 input")?;
        self.check_rank(k, 4, "conv3x3 kernel")?;
        self.check_rank(b, 1, "conv3x3 bias")?;
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        if ks[0] != 3 || ks[1] != 3 || ks[2] != cin || self.shape(b)[0] != ks[3] {
            return Err(argument!(
                "conv3x3 kernel {ks:?} / bias {:?} do not fit input {xs:?}",
                self.shape(b)
            ));
        }
        let cout = ks[3];
        let (src, ker, bias) = (self.data(x), self.data(k), self.data(b));
        let mut out = vec![0.0; h * w * cout];
        for y in 0..h {
            for xx in 0..w {
                let orow = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                orow.copy_from_slice(bias);
                for ky in 0..3 {
                    let iy = y + ky;
                    if iy < 1 || iy > h {
                        continue;
                    }
                    let iy = iy - 1;
                    for kx in 0..3 {
                        let ix = xx + kx;
                        if ix < 1 || ix > w {
                            continue;
                        }
                        let ix = ix - 1;
                        let inp = &src[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                        let kbase = (ky * 3 + kx) * cin * cout;
                        for (ci, &v) in inp.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let krow = &ker[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (o, kv) in orow.iter_mut().zip(krow) {
                                *o += v * kv;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.needs(x) || self.needs(k) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![h, w, cout], out), Op::Conv3x3 { x, k, b }, rg))
    }

    fn check_boxes(&self, x: Var, boxes: &[BBox], what: &str) -> Result<(usize, usize, usize)> {
        self.check_rank(x, 3, what)?;
        if boxes.is_empty() {
            return Err(argument!("{what} needs at least one box"));
        }
        let s = self.shape(x);
        let (h, w, d) = (s[0], s[1], s[2]);
        for bx in boxes {
            bx.check_within(h, w)?;
        }
        Ok((h, w, d))
    }

    /// Mean of an `H×W×D` map inside each box, `[J,D]`.
    pub fn roi_pool(&mut self, x: Var, boxes: &[BBox]) -> Result<Var> {
        let (_, w, d) = self.check_boxes(x, boxes, "roi_pool")?;
        let src = self.data(x);
        let mut out = vec![0.0; boxes.len() * d];
        for (row, bx) in out.chunks_mut(d).zip(boxes) {
            for y in bx.y1..bx.y2 {
                for xx in bx.x1..bx.x2 {
                    let cell = &src[(y * w + xx) * d..(y * w + xx + 1) * d];
                    for (acc, v) in row.iter_mut().zip(cell) {
                        *acc += v;
                    }
                }
            }
            let area = bx.area() as f64;
            row.iter_mut().for_each(|v| *v /= area);
        }
        let rg = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![boxes.len(), d], out),
            Op::RoiPool {
                x,
                boxes: boxes.to_vec(),
            },
            rg,
        ))
    }

    /// Per-channel maximum of an `H×W×D` map inside each box, `[J,D]`.
    /// Ties go to the first cell in row-major order.
    pub fn roi_max_pool(&mut self, x: Var, boxes: &[BBox]) -> Result<Var> {
        let (_, w, d) = self.check_boxes(x, boxes, "roi_max_pool")?;
        let src = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; boxes.len() * d];
        let mut argmax = vec![0usize; boxes.len() * d];
        for ((row, arg), bx) in out.chunks_mut(d).zip(argmax.chunks_mut(d)).zip(boxes) {
            for y in bx.y1..bx.y2 {
                for xx in bx.x1..bx.x2 {
                    let at = (y * w + xx) * d;
                    for c in 0..d {
                        if src[at + c] > row[c] {
                            row[c] = src[at + c];
                            arg[c] = at + c;
                        }
                    }
                }
            }
        }
        let rg = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![boxes.len(), d], out),
            Op::RoiMaxPool { x, argmax },
            rg,
        ))
    }

    /// For each box, zero the map inside the box and global-average-pool
    /// the rest, `[J,D]`.
    ///
    /// Equivalent to `global_avg_pool(masked_zero_fill(x, box))` per box.
    /// Only cells outside the box are ever read, so the output is exactly
    /// independent of the box's interior.
    pub fn context_pool(&mut self, x: Var, boxes: &[BBox]) -> Result<Var> {
        let (h, w, d) = self.check_boxes(x, boxes, "context_pool")?;
        let src = self.data(x);
        let cells = (h * w) as f64;
        let mut out = vec![0.0; boxes.len() * d];
        for (row, bx) in out.chunks_mut(d).zip(boxes) {
            for y in 0..h {
                let inside_row = y >= bx.y1 && y < bx.y2;
                for xx in 0..w {
                    if inside_row && xx >= bx.x1 && xx < bx.x2 {
                        continue;
                    }
                    let cell = &src[(y * w + xx) * d..(y * w + xx + 1) * d];
                    for (acc, v) in row.iter_mut().zip(cell) {
                        *acc += v;
                    }
                }
            }
            row.iter_mut().for_each(|v| *v /= cells);
        }
        let rg = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![boxes.len(), d], out),
            Op::ContextPool {
                x,
                boxes: boxes.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(argument!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let lens = self.nodes.iter().map(|nd| nd.value.len()).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients { grads, lens })
    }

    fn accum<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Reshape(x) | Op::AddScalar(x) => {
                if let Some(gx) = self.accum(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(ga) = self.accum(grads, *a) {
                    matmul_grad_lhs(ga, g, self.data(*b), m, k, n);
                }
                if let Some(gb) = self.accum(grads, *b) {
                    matmul_grad_rhs(gb, self.data(*a), g, m, k, n);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[1];
                if let Some(gx) = self.accum(grads, *x) {
                    matmul_grad_lhs(gx, g, self.data(*w), m, k, n);
                }
                if let Some(gw) = self.accum(grads, *w) {
                    matmul_grad_rhs(gw, self.data(*x), g, m, k, n);
                }
                if let Some(gb) = self.accum(grads, *b) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if let Some(ga) = self.accum(grads, *a) {
                    broadcast_accum(ga, g, |_| 1.0);
                }
                if let Some(gb) = self.accum(grads, *b) {
                    broadcast_accum(gb, g, |_| sign);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let pick = |d: &[f64], t: usize| if d.len() == 1 { d[0] } else { d[t] };
                if let Some(ga) = self.accum(grads, *a) {
                    broadcast_accum(ga, g, |t| pick(db, t));
                }
                if let Some(gb) = self.accum(grads, *b) {
                    broadcast_accum(gb, g, |t| pick(da, t));
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.accum(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, gv)| *a += s * gv);
                }
            }
            Op::Relu(x) => {
                let src = self.data(*x);
                if let Some(gx) = self.accum(grads, *x) {
                    for ((a, gv), v) in gx.iter_mut().zip(g).zip(src) {
                        if *v > 0.0 {
                            *a += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.accum(grads, *x) {
                    for ((a, gv), y) in gx.iter_mut().zip(g).zip(out) {
                        *a += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Log(x) => {
                let src = self.data(*x);
                if let Some(gx) = self.accum(grads, *x) {
                    for ((a, gv), v) in gx.iter_mut().zip(g).zip(src) {
                        if *v >= LOG_FLOOR {
                            *a += gv / v;
                        }
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let src = self.data(*x);
                if let Some(gx) = self.accum(grads, *x) {
                    for ((a, gv), v) in gx.iter_mut().zip(g).zip(src) {
                        if v >= lo && v <= hi {
                            *a += gv;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                if let Some(gx) = self.accum(grads, *x) {
                    for o in 0..outer {
                        for t in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + t;
                            let dot: f64 = (0..len).map(|k| g[at(k)] * out[at(k)]).sum();
                            for k in 0..len {
                                gx[at(k)] += out[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.accum(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let s = if matches!(self.nodes[i].op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                if let Some(gx) = self.accum(grads, *x) {
                    for o in 0..outer {
                        for k in 0..len {
                            let dst = &mut gx[(o * len + k) * inner..(o * len + k + 1) * inner];
                            for (a, gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *a += s * gv;
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let cells = (s[0] * s[1]) as f64;
                let d = s[2];
                if let Some(gx) = self.accum(grads, *x) {
                    for cell in gx.chunks_mut(d) {
                        for (a, gv) in cell.iter_mut().zip(g) {
                            *a += gv / cells;
                        }
                    }
                }
            }
            Op::MaskZero { x, mask } => {
                let d = self.shape(*x)[2];
                if let Some(gx) = self.accum(grads, *x) {
                    for ((cell, gcell), &m) in gx.chunks_mut(d).zip(g.chunks(d)).zip(mask) {
                        if !m {
                            add_into(cell, gcell);
                        }
                    }
                }
            }
            Op::Conv3x3 { x, k, b } => self.conv3x3_backward(*x, *k, *b, g, grads),
            Op::RoiPool { x, boxes } => {
                let w = self.shape(*x)[1];
                let d = self.shape(*x)[2];
                if let Some(gx) = self.accum(grads, *x) {
                    for (grow, bx) in g.chunks(d).zip(boxes) {
                        let area = bx.area() as f64;
                        for y in bx.y1..bx.y2 {
                            for xx in bx.x1..bx.x2 {
                                let cell = &mut gx[(y * w + xx) * d..(y * w + xx + 1) * d];
                                for (a, gv) in cell.iter_mut().zip(grow) {
                                    *a += gv / area;
                                }
                            }
                        }
                    }
                }
            }
            Op::RoiMaxPool { x, argmax } => {
                if let Some(gx) = self.accum(grads, *x) {
                    for (&at, gv) in argmax.iter().zip(g) {
                        gx[at] += gv;
                    }
                }
            }
            Op::ContextPool { x, boxes } => {
                let s = self.shape(*x);
                let (h, w, d) = (s[0], s[1], s[2]);
                let cells = (h * w) as f64;
                if let Some(gx) = self.accum(grads, *x) {
                    // Every cell receives the total over boxes minus the
                    // boxes that contain it; the latter via a 2-D
                    // difference array.
                    let mut total = vec![0.0; d];
                    let mut diff = vec![0.0; (h + 1) * (w + 1) * d];
                    for (grow, bx) in g.chunks(d).zip(boxes) {
                        add_into(&mut total, grow);
                        for (y, xx, sign) in [
                            (bx.y1, bx.x1, 1.0),
                            (bx.y1, bx.x2, -1.0),
                            (bx.y2, bx.x1, -1.0),
                            (bx.y2, bx.x2, 1.0),
                        ] {
                            let at = (y * (w + 1) + xx) * d;
                            for (a, gv) in diff[at..at + d].iter_mut().zip(grow) {
                                *a += sign * gv;
                            }
                        }
                    }
                    for y in 0..=h {
                        for xx in 0..=w {
                            for c in 0..d {
                                let mut v = diff[(y * (w + 1) + xx) * d + c];
                                if y > 0 {
                                    v += diff[((y - 1) * (w + 1) + xx) * d + c];
                                }
                                if xx > 0 {
                                    v += diff[(y * (w + 1) + xx - 1) * d + c];
                                }
                                if y > 0 && xx > 0 {
                                    v -= diff[((y - 1) * (w + 1) + xx - 1) * d + c];
                                }
                                diff[(y * (w + 1) + xx) * d + c] = v;
                            }
                        }
                    }
                    for y in 0..h {
                        for xx in 0..w {
                            for c in 0..d {
                                let inside = diff[(y * (w + 1) + xx) * d + c];
                                gx[(y * w + xx) * d + c] += (total[c] - inside) / cells;
                            }
                        }
                    }
                }
            }
        }
    }

    fn conv3x3_backward(&self, x: Var, k: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let xs = self.shape(x);
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let cout = self.shape(k)[3];
        let (src, ker) = (self.data(x), self.data(k));
        if let Some(gb) = self.accum(grads, b) {
            for row in g.chunks(cout) {
                add_into(gb, row);
            }
        }
        let taps = |y: usize, xx: usize| {
            (0..3)
                .flat_map(move |ky| (0..3).map(move |kx| (ky, kx)))
                .filter_map(move |(ky, kx)| {
                    let iy = y + ky;
                    let ix = xx + kx;
                    (iy >= 1 && iy <= h && ix >= 1 && ix <= w).then(|| (ky, kx, iy - 1, ix - 1))
                })
        };
        if let Some(gk) = self.accum(grads, k) {
            for y in 0..h {
                for xx in 0..w {
                    let grow = &g[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                    for (ky, kx, iy, ix) in taps(y, xx) {
                        let inp = &src[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                        let kbase = (ky * 3 + kx) * cin * cout;
                        for (ci, &v) in inp.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let dst = &mut gk[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (a, gv) in dst.iter_mut().zip(grow) {
                                *a += v * gv;
                            }
                        }
                    }
                }
            }
        }
        if let Some(gx) = self.accum(grads, x) {
            for y in 0..h {
                for xx in 0..w {
                    let grow = &g[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                    for (ky, kx, iy, ix) in taps(y, xx) {
                        let kbase = (ky * 3 + kx) * cin * cout;
                        let dst = &mut gx[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                        for (ci, a) in dst.iter_mut().enumerate() {
                            let krow = &ker[kbase + ci * cout..kbase + (ci + 1) * cout];
                            *a += krow.iter().zip(grow).map(|(kv, gv)| kv * gv).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Accumulates `g[t]·factor(t)` into `dst`, summing when `dst` is a
/// broadcast scalar.
fn broadcast_accum(dst: &mut [f64], g: &[f64], factor: impl Fn(usize) -> f64) {
    if dst.len() == g.len() {
        for (t, (a, gv)) in dst.iter_mut().zip(g).enumerate() {
            *a += gv * factor(t);
        }
    } else {
        dst[0] += g.iter().enumerate().map(|(t, gv)| gv * factor(t)).sum::<f64>();
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `ga += g · bᵀ`
fn matmul_grad_lhs(ga: &mut [f64], g: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            ga[i * k + p] += grow.iter().zip(&b[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `gb += aᵀ · g`
fn matmul_grad_rhs(gb: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (dst, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *dst += av * gv;
            }
        }
    }
}
