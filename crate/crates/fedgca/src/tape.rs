//! Minimal reverse-mode autodiff over `ndarray` arrays.
//!
//! The training losses here mix convolutions, softmaxes, class activation
//! maps and vector penalties, so gradients are computed on a small tape
//! rather than derived by hand per loss. Nodes are recorded in creation
//! order, which is already a topological order for the backward sweep.
//! Everything is `f64`; gradient checks against central finite
//! differences are part of the test suite.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    SliceReshape {
        p: usize,
        offset: usize,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
    },
    Relu {
        p: usize,
    },
    MaxPool2 {
        p: usize,
        argmax: Vec<usize>,
    },
    Gap {
        p: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Cam {
        feats: usize,
        weight: usize,
        class_ids: Vec<usize>,
    },
    SoftmaxRows {
        p: usize,
    },
    LogSoftmaxRows {
        p: usize,
    },
    GatherRows {
        p: usize,
        ids: Vec<usize>,
    },
    Reshape {
        p: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    ScaleShift {
        p: usize,
        mul: f64,
    },
    Ln {
        p: usize,
    },
    Clamp {
        p: usize,
        lo: f64,
        hi: f64,
    },
    SumAll {
        p: usize,
    },
    Dot {
        a: usize,
        b: usize,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn leaf(&mut self, value: ArrayD<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Reads a scalar node (shape `[1]`).
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0]]
    }

    /// Flat parameter sub-range viewed with a new shape. The parent must
    /// be one-dimensional.
    pub fn slice_reshape(&mut self, p: Var, offset: usize, shape: &[usize]) -> Var {
        let len: usize = shape.iter().product();
        let flat = self.nodes[p.0]
            .value
            .as_slice()
            .expect("flat parent must be contiguous");
        let value = ArrayD::from_shape_vec(IxDyn(shape), flat[offset..offset + len].to_vec())
            .expect("slice_reshape shape");
        let needs = self.needs(p.0);
        self.push(value, Op::SliceReshape { p: p.0, offset }, needs)
    }

    pub fn reshape(&mut self, p: Var, shape: &[usize]) -> Var {
        let value = self.nodes[p.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let needs = self.needs(p.0);
        self.push(value, Op::Reshape { p: p.0 }, needs)
    }

    /// Same-padded stride-1 convolution, NCHW input and OIHW kernel with
    /// odd spatial size.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Var {
        let x = as4(&self.nodes[input.0].value);
        let k = as4(&self.nodes[kernel.0].value);
        let b = as1(&self.nodes[bias.0].value);
        let out = kernels::conv2d_same(&x, &k, Some(&b));
        let needs = self.needs(input.0) || self.needs(kernel.0) || self.needs(bias.0);
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.0,
            },
            needs,
        )
    }

    pub fn relu(&mut self, p: Var) -> Var {
        let value = self.nodes[p.0].value.mapv(|v| v.max(0.0));
        let needs = self.needs(p.0);
        self.push(value, Op::Relu { p: p.0 }, needs)
    }

    /// 2x2 max pooling with stride 2, trailing row/column dropped.
    pub fn max_pool2(&mut self, p: Var) -> Var {
        let x = as4(&self.nodes[p.0].value);
        let (n, c, h, w) = x.dim();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::<f64>::zeros((n, c, ho, wo));
        let mut argmax = vec![0usize; n * c * ho * wo];
        let mut pos = 0;
        for i in 0..n {
            for ch in 0..c {
                for y in 0..ho {
                    for xw in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let (iy, ix) = (2 * y + dy, 2 * xw + dx);
                                let v = x[(i, ch, iy, ix)];
                                if v > best {
                                    best = v;
                                    best_idx = ((i * c + ch) * h + iy) * w + ix;
                                }
                            }
                        }
                        out[(i, ch, y, xw)] = best;
                        argmax[pos] = best_idx;
                        pos += 1;
                    }
                }
            }
        }
        let needs = self.needs(p.0);
        self.push(out.into_dyn(), Op::MaxPool2 { p: p.0, argmax }, needs)
    }

    /// Global average pooling: (N,C,H,W) -> (N,C).
    pub fn gap(&mut self, p: Var) -> Var {
        let x = as4(&self.nodes[p.0].value);
        let (n, c, h, w) = x.dim();
        let scale = 1.0 / (h * w) as f64;
        let mut out = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                let mut s = 0.0;
                for y in 0..h {
                    for xw in 0..w {
                        s += x[(i, ch, y, xw)];
                    }
                }
                out[(i, ch)] = s * scale;
            }
        }
        let needs = self.needs(p.0);
        self.push(out.into_dyn(), Op::Gap { p: p.0 }, needs)
    }

    /// Fully connected layer: (N,F) x (C,F)^T + bias -> (N,C).
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let x = as2(&self.nodes[input.0].value);
        let w = as2(&self.nodes[weight.0].value);
        let b = as1(&self.nodes[bias.0].value);
        let mut out = x.dot(&w.t());
        out += &b;
        let needs = self.needs(input.0) || self.needs(weight.0) || self.needs(bias.0);
        self.push(
            out.into_dyn(),
            Op::Linear {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
            needs,
        )
    }

    /// Raw class activation maps: out[n,y,x] = sum_l W[class_ids[n], l] * F[n,l,y,x].
    pub fn cam(&mut self, feats: Var, weight: Var, class_ids: &[usize]) -> Var {
        let f = as4(&self.nodes[feats.0].value);
        let w = as2(&self.nodes[weight.0].value);
        let (n, l, h, wd) = f.dim();
        assert_eq!(class_ids.len(), n);
        let mut out = ndarray::Array3::<f64>::zeros((n, h, wd));
        for i in 0..n {
            let row = w.row(class_ids[i]);
            for li in 0..l {
                let wl = row[li];
                for y in 0..h {
                    for x in 0..wd {
                        out[(i, y, x)] += wl * f[(i, li, y, x)];
                    }
                }
            }
        }
        let needs = self.needs(feats.0) || self.needs(weight.0);
        self.push(
            out.into_dyn(),
            Op::Cam {
                feats: feats.0,
                weight: weight.0,
                class_ids: class_ids.to_vec(),
            },
            needs,
        )
    }

    /// Row-wise stabilized softmax over the last axis of a 2-D array.
    pub fn softmax_rows(&mut self, p: Var) -> Var {
        let x = as2(&self.nodes[p.0].value);
        let value = kernels::softmax_rows(&x);
        let needs = self.needs(p.0);
        self.push(value.into_dyn(), Op::SoftmaxRows { p: p.0 }, needs)
    }

    pub fn log_softmax_rows(&mut self, p: Var) -> Var {
        let x = as2(&self.nodes[p.0].value);
        let (n, c) = x.dim();
        let mut out = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            let row = x.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            for j in 0..c {
                out[(i, j)] = row[j] - lse;
            }
        }
        let needs = self.needs(p.0);
        self.push(out.into_dyn(), Op::LogSoftmaxRows { p: p.0 }, needs)
    }

    /// Picks one entry per row: out[n] = p[n, ids[n]].
    pub fn gather_rows(&mut self, p: Var, ids: &[usize]) -> Var {
        let x = as2(&self.nodes[p.0].value);
        let out = Array1::from_iter(ids.iter().enumerate().map(|(i, &j)| x[(i, j)]));
        let needs = self.needs(p.0);
        self.push(
            out.into_dyn(),
            Op::GatherRows {
                p: p.0,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Add { a: a.0, b: b.0 }, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Sub { a: a.0, b: b.0 }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Mul { a: a.0, b: b.0 }, needs)
    }

    pub fn scale_shift(&mut self, p: Var, mul: f64, add: f64) -> Var {
        let value = self.nodes[p.0].value.mapv(|v| v * mul + add);
        let needs = self.needs(p.0);
        self.push(value, Op::ScaleShift { p: p.0, mul }, needs)
    }

    pub fn scale(&mut self, p: Var, mul: f64) -> Var {
        self.scale_shift(p, mul, 0.0)
    }

    pub fn ln(&mut self, p: Var) -> Var {
        let value = self.nodes[p.0].value.mapv(f64::ln);
        let needs = self.needs(p.0);
        self.push(value, Op::Ln { p: p.0 }, needs)
    }

    pub fn clamp(&mut self, p: Var, lo: f64, hi: f64) -> Var {
        let value = self.nodes[p.0].value.mapv(|v| v.clamp(lo, hi));
        let needs = self.needs(p.0);
        self.push(value, Op::Clamp { p: p.0, lo, hi }, needs)
    }

    /// Sum of all entries, producing a shape-`[1]` scalar node.
    pub fn sum_all(&mut self, p: Var) -> Var {
        let s = self.nodes[p.0].value.sum();
        let needs = self.needs(p.0);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Op::SumAll { p: p.0 },
            needs,
        )
    }

    pub fn mean_all(&mut self, p: Var) -> Var {
        let n = self.nodes[p.0].value.len();
        let s = self.sum_all(p);
        self.scale(s, 1.0 / n as f64)
    }

    /// Inner product of two 1-D nodes, producing a shape-`[1]` scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let va = as1(&self.nodes[a.0].value);
        let vb = as1(&self.nodes[b.0].value);
        let s = va.dot(&vb);
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Op::Dot { a: a.0, b: b.0 },
            needs,
        )
    }

    /// Reverse sweep from a scalar node. Returns the gradient store;
    /// read per-variable gradients through [`Grads::get`].
    pub fn backward(&self, scalar: Var) -> Result<Grads> {
        if self.nodes[scalar.0].value.len() != 1 {
            return Err(Error::InvalidArgument(
                "backward requires a scalar (shape [1]) node".into(),
            ));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[scalar.0] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        for i in (0..=scalar.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let add_to = |grads: &mut [Option<ArrayD<f64>>], idx: usize, contrib: ArrayD<f64>| {
            match &mut grads[idx] {
                Some(acc) => *acc += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::SliceReshape { p, offset } => {
                if self.needs(*p) {
                    let mut gp = ArrayD::zeros(self.nodes[*p].value.raw_dim());
                    {
                        let gp_flat = gp.as_slice_mut().unwrap();
                        let gsrc = g.as_standard_layout();
                        let gs = gsrc.as_slice().unwrap();
                        for (k, &v) in gs.iter().enumerate() {
                            gp_flat[offset + k] += v;
                        }
                    }
                    add_to(grads, *p, gp);
                }
            }
            Op::Reshape { p } => {
                if self.needs(*p) {
                    let gp = g
                        .clone()
                        .into_shape_with_order(self.nodes[*p].value.raw_dim())
                        .unwrap();
                    add_to(grads, *p, gp);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let x = as4(&self.nodes[*input].value);
                let k = as4(&self.nodes[*kernel].value);
                let go = as4(g);
                let (din, dk, db) = kernels::conv2d_same_backward(
                    &x,
                    &k,
                    &go,
                    self.needs(*input),
                    self.needs(*kernel) || self.needs(*bias),
                );
                if self.needs(*input) {
                    add_to(grads, *input, din.unwrap().into_dyn());
                }
                if self.needs(*kernel) {
                    add_to(grads, *kernel, dk.clone().unwrap().into_dyn());
                }
                if self.needs(*bias) {
                    add_to(grads, *bias, db.unwrap().into_dyn());
                }
            }
            Op::Relu { p } => {
                if self.needs(*p) {
                    let mask = self.nodes[*p].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    add_to(grads, *p, g * &mask);
                }
            }
            Op::MaxPool2 { p, argmax } => {
                if self.needs(*p) {
                    let mut gp = ArrayD::zeros(self.nodes[*p].value.raw_dim());
                    {
                        let gp_flat = gp.as_slice_mut().unwrap();
                        let gsrc = g.as_standard_layout();
                        let gs = gsrc.as_slice().unwrap();
                        for (pos, &src) in argmax.iter().enumerate() {
                            gp_flat[src] += gs[pos];
                        }
                    }
                    add_to(grads, *p, gp);
                }
            }
            Op::Gap { p } => {
                if self.needs(*p) {
                    let x = as4(&self.nodes[*p].value);
                    let (n, c, h, w) = x.dim();
                    let scale = 1.0 / (h * w) as f64;
                    let go = as2(g);
                    let mut gp = Array4::<f64>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            let v = go[(ni, ci)] * scale;
                            for y in 0..h {
                                for x2 in 0..w {
                                    gp[(ni, ci, y, x2)] = v;
                                }
                            }
                        }
                    }
                    add_to(grads, *p, gp.into_dyn());
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let go = as2(g);
                if self.needs(*input) {
                    let w = as2(&self.nodes[*weight].value);
                    add_to(grads, *input, go.dot(&w).into_dyn());
                }
                if self.needs(*weight) {
                    let x = as2(&self.nodes[*input].value);
                    add_to(grads, *weight, go.t().dot(&x).into_dyn());
                }
                if self.needs(*bias) {
                    add_to(grads, *bias, go.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Cam {
                feats,
                weight,
                class_ids,
            } => {
                let f = as4(&self.nodes[*feats].value);
                let w = as2(&self.nodes[*weight].value);
                let (n, l, h, wd) = f.dim();
                let go = g
                    .clone()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("cam grad rank");
                if self.needs(*feats) {
                    let mut gf = Array4::<f64>::zeros((n, l, h, wd));
                    for ni in 0..n {
                        let row = w.row(class_ids[ni]);
                        for li in 0..l {
                            let wl = row[li];
                            for y in 0..h {
                                for x in 0..wd {
                                    gf[(ni, li, y, x)] = wl * go[(ni, y, x)];
                                }
                            }
                        }
                    }
                    add_to(grads, *feats, gf.into_dyn());
                }
                if self.needs(*weight) {
                    let mut gw = Array2::<f64>::zeros(w.dim());
                    for ni in 0..n {
                        for li in 0..l {
                            let mut s = 0.0;
                            for y in 0..h {
                                for x in 0..wd {
                                    s += f[(ni, li, y, x)] * go[(ni, y, x)];
                                }
                            }
                            gw[(class_ids[ni], li)] += s;
                        }
                    }
                    add_to(grads, *weight, gw.into_dyn());
                }
            }
            Op::SoftmaxRows { p } => {
                if self.needs(*p) {
                    let s = as2(&self.nodes[i].value);
                    let go = as2(g);
                    let (n, c) = s.dim();
                    let mut gp = Array2::<f64>::zeros((n, c));
                    for ni in 0..n {
                        let dot: f64 = (0..c).map(|j| go[(ni, j)] * s[(ni, j)]).sum();
                        for j in 0..c {
                            gp[(ni, j)] = s[(ni, j)] * (go[(ni, j)] - dot);
                        }
                    }
                    add_to(grads, *p, gp.into_dyn());
                }
            }
            Op::LogSoftmaxRows { p } => {
                if self.needs(*p) {
                    let logp = as2(&self.nodes[i].value);
                    let go = as2(g);
                    let (n, c) = logp.dim();
                    let mut gp = Array2::<f64>::zeros((n, c));
                    for ni in 0..n {
                        let gsum: f64 = (0..c).map(|j| go[(ni, j)]).sum();
                        for j in 0..c {
                            gp[(ni, j)] = go[(ni, j)] - logp[(ni, j)].exp() * gsum;
                        }
                    }
                    add_to(grads, *p, gp.into_dyn());
                }
            }
            Op::GatherRows { p, ids } => {
                if self.needs(*p) {
                    let mut gp = Array2::<f64>::zeros(as2(&self.nodes[*p].value).dim());
                    let go = as1(g);
                    for (ni, &j) in ids.iter().enumerate() {
                        gp[(ni, j)] += go[ni];
                    }
                    add_to(grads, *p, gp.into_dyn());
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    add_to(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    add_to(grads, *b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    add_to(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    add_to(grads, *b, g.mapv(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    add_to(grads, *a, g * &self.nodes[*b].value);
                }
                if self.needs(*b) {
                    add_to(grads, *b, g * &self.nodes[*a].value);
                }
            }
            Op::ScaleShift { p, mul } => {
                if self.needs(*p) {
                    add_to(grads, *p, g.mapv(|v| v * mul));
                }
            }
            Op::Ln { p } => {
                if self.needs(*p) {
                    add_to(grads, *p, g / &self.nodes[*p].value);
                }
            }
            Op::Clamp { p, lo, hi } => {
                if self.needs(*p) {
                    let mask = self.nodes[*p]
                        .value
                        .mapv(|v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 });
                    add_to(grads, *p, g * &mask);
                }
            }
            Op::SumAll { p } => {
                if self.needs(*p) {
                    let gv = g[[0]];
                    add_to(
                        grads,
                        *p,
                        ArrayD::from_elem(self.nodes[*p].value.raw_dim(), gv),
                    );
                }
            }
            Op::Dot { a, b } => {
                let gv = g[[0]];
                if self.needs(*a) {
                    add_to(grads, *a, self.nodes[*b].value.mapv(|v| v * gv));
                }
                if self.needs(*b) {
                    add_to(grads, *b, self.nodes[*a].value.mapv(|v| v * gv));
                }
            }
        }
    }
}

pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }
}

fn as1(a: &ArrayD<f64>) -> ndarray::Array1<f64> {
    a.clone().into_dimensionality::<ndarray::Ix1>().expect("rank-1")
}

fn as2(a: &ArrayD<f64>) -> Array2<f64> {
    a.clone().into_dimensionality::<ndarray::Ix2>().expect("rank-2")
}

fn as4(a: &ArrayD<f64>) -> Array4<f64> {
    a.clone().into_dimensionality::<ndarray::Ix4>().expect("rank-4")
}

/// Dense numeric kernels shared by the tape and the augmentation filters.
pub mod kernels {
    use ndarray::{Array1, Array2, Array4};

    /// im2col for same-padded stride-1 convolution: output is
    /// (C*k*k) x (N*H*W), column-major over (n, y, x).
    fn im2col(x: &Array4<f64>, k: usize) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        let pad = k / 2;
        let cols = n * h * w;
        let mut col = Array2::<f64>::zeros((c * k * k, cols));
        for ci in 0..c {
            for dy in 0..k {
                for dx in 0..k {
                    let row = (ci * k + dy) * k + dx;
                    for ni in 0..n {
                        for y in 0..h {
                            let iy = (y + dy) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = (ni * h + y) * w;
                            for xw in 0..w {
                                let ix = (xw + dx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                col[(row, base + xw)] = x[(ni, ci, iy as usize, ix as usize)];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(gcol: &Array2<f64>, n: usize, c: usize, h: usize, w: usize, k: usize) -> Array4<f64> {
        let pad = k / 2;
        let mut gx = Array4::<f64>::zeros((n, c, h, w));
        for ci in 0..c {
            for dy in 0..k {
                for dx in 0..k {
                    let row = (ci * k + dy) * k + dx;
                    for ni in 0..n {
                        for y in 0..h {
                            let iy = (y + dy) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = (ni * h + y) * w;
                            for xw in 0..w {
                                let ix = (xw + dx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                gx[(ni, ci, iy as usize, ix as usize)] += gcol[(row, base + xw)];
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    /// Same-padded stride-1 convolution of an NCHW batch with an OIHW
    /// kernel of odd spatial size.
    pub fn conv2d_same(x: &Array4<f64>, kernel: &Array4<f64>, bias: Option<&Array1<f64>>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (co, ci, kh, kw) = kernel.dim();
        assert_eq!(c, ci, "channel mismatch");
        assert_eq!(kh, kw, "square kernels only");
        assert_eq!(kh % 2, 1, "odd kernel size required");
        let col = im2col(x, kh);
        let kmat = kernel
            .clone()
            .into_shape_with_order((co, ci * kh * kw))
            .unwrap();
        let out = kmat.dot(&col); // (Co, N*H*W)
        let mut y = Array4::<f64>::zeros((n, co, h, w));
        for oc in 0..co {
            let b = bias.map(|b| b[oc]).unwrap_or(0.0);
            for ni in 0..n {
                for yy in 0..h {
                    let base = (ni * h + yy) * w;
                    for xw in 0..w {
                        y[(ni, oc, yy, xw)] = out[(oc, base + xw)] + b;
                    }
                }
            }
        }
        y
    }

    /// Gradients of [`conv2d_same`]; the im2col matrix is recomputed
    /// rather than cached across the forward pass.
    #[allow(clippy::type_complexity)]
    pub fn conv2d_same_backward(
        x: &Array4<f64>,
        kernel: &Array4<f64>,
        gout: &Array4<f64>,
        need_input: bool,
        need_kernel: bool,
    ) -> (Option<Array4<f64>>, Option<Array4<f64>>, Option<Array1<f64>>) {
        let (n, c, h, w) = x.dim();
        let (co, ci, kh, _) = kernel.dim();
        // (Co, N*H*W) layout of the output gradient
        let mut gmat = Array2::<f64>::zeros((co, n * h * w));
        for oc in 0..co {
            for ni in 0..n {
                for yy in 0..h {
                    let base = (ni * h + yy) * w;
                    for xw in 0..w {
                        gmat[(oc, base + xw)] = gout[(ni, oc, yy, xw)];
                    }
                }
            }
        }
        let (mut din, mut dk, mut db) = (None, None, None);
        if need_kernel {
            let col = im2col(x, kh);
            let dkm = gmat.dot(&col.t()); // (Co, C*k*k)
            dk = Some(dkm.into_shape_with_order((co, ci, kh, kh)).unwrap());
            db = Some(gmat.sum_axis(ndarray::Axis(1)));
        }
        if need_input {
            let kmat = kernel
                .clone()
                .into_shape_with_order((co, ci * kh * kh))
                .unwrap();
            let gcol = kmat.t().dot(&gmat); // (C*k*k, N*H*W)
            din = Some(col2im(&gcol, n, c, h, w, kh));
        }
        (din, dk, db)
    }

    /// Max-subtraction stabilized row softmax.
    pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
        let (n, c) = x.dim();
        let mut out = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            let row = x.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[(i, j)] = e;
                sum += e;
            }
            for j in 0..c {
                out[(i, j)] /= sum;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array1, Array2, Array4};
    use rand::Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::stream(&[seed]);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central finite differences of an arbitrary scalar tape program.
    fn fd_check<F>(n: usize, seed: u64, build: F, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let theta = rand_vec(n, seed);
        let mut tape = Tape::new();
        let p = tape.leaf(Array1::from(theta.clone()).into_dyn(), true);
        let loss = build(&mut tape, p);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(p).unwrap().clone();
        let h = 1e-5;
        for i in 0..n {
            let eval = |v: f64| {
                let mut th = theta.clone();
                th[i] = v;
                let mut t = Tape::new();
                let p = t.leaf(Array1::from(th).into_dyn(), true);
                let l = build(&mut t, p);
                t.scalar(l)
            };
            let num = (eval(theta[i] + h) - eval(theta[i] - h)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[i];
            assert_abs_diff_eq!(a, num, epsilon = tol * (1.0 + num.abs()));
        }
    }

    #[test]
    fn grad_linear_softmax_ce() {
        // 3 features, 2 classes: weight (2,3) + bias (2) = 8 params.
        fd_check(
            8,
            42,
            |t, p| {
                let w = t.slice_reshape(p, 0, &[2, 3]);
                let b = t.slice_reshape(p, 6, &[2]);
                let x = t.constant(
                    Array2::from_shape_vec((4, 3), rand_vec(12, 7)).unwrap().into_dyn(),
                );
                let logits = t.linear(x, w, b);
                let logp = t.log_softmax_rows(logits);
                let picked = t.gather_rows(logp, &[0, 1, 1, 0]);
                let s = t.mean_all(picked);
                t.scale(s, -1.0)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_conv_relu_pool_gap() {
        // conv 2x1x3x3 + bias 2 = 20 params over a 1x1x6x6 input.
        fd_check(
            20,
            3,
            |t, p| {
                let k = t.slice_reshape(p, 0, &[2, 1, 3, 3]);
                let b = t.slice_reshape(p, 18, &[2]);
                let x = t.constant(
                    Array4::from_shape_vec((1, 1, 6, 6), rand_vec(36, 9)).unwrap().into_dyn(),
                );
                let y = t.conv2d(x, k, b);
                let y = t.relu(y);
                let y = t.max_pool2(y);
                let y = t.gap(y);
                let y = t.mul(y, y);
                t.sum_all(y)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_conv_wrt_input() {
        fd_check(
            16,
            11,
            |t, p| {
                let x = t.slice_reshape(p, 0, &[1, 1, 4, 4]);
                let k = t.constant(
                    Array4::from_shape_vec((1, 1, 3, 3), rand_vec(9, 5)).unwrap().into_dyn(),
                );
                let b = t.constant(Array1::zeros(1).into_dyn());
                let y = t.conv2d(x, k, b);
                let y = t.mul(y, y);
                t.sum_all(y)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_cam_softmax_kl_like() {
        // feats 1x2x2x2 (8) + fc weight 2x2 (4) = 12 params.
        fd_check(
            12,
            17,
            |t, p| {
                let f = t.slice_reshape(p, 0, &[1, 2, 2, 2]);
                let w = t.slice_reshape(p, 8, &[2, 2]);
                let m = t.cam(f, w, &[1]);
                let m = t.reshape(m, &[1, 4]);
                let s = t.softmax_rows(m);
                let s = t.scale_shift(s, 1.0 - 1e-3, 1e-3 / 4.0);
                let l = t.ln(s);
                let sl = t.mul(s, l);
                t.sum_all(sl)
            },
            1e-6,
        );
    }

    #[test]
    fn grad_quadratic_is_identity() {
        let mut tape = Tape::new();
        let w = Array1::from(rand_vec(10, 1));
        let p = tape.leaf(w.clone().into_dyn(), true);
        let d = tape.dot(p, p);
        let loss = tape.scale(d, 0.5);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(p).unwrap();
        for (a, b) in g.iter().zip(w.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_branch_gets_no_grad() {
        let mut tape = Tape::new();
        let p = tape.leaf(Array1::from(vec![1.0, 2.0]).into_dyn(), true);
        let c = tape.constant(Array1::from(vec![3.0, 4.0]).into_dyn());
        let s = tape.add(p, c);
        let l = tape.sum_all(s);
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let p = tape.leaf(Array1::from(vec![1.0, 2.0]).into_dyn(), true);
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = crate::rng::stream(&[99]);
        let x = Array4::from_shape_fn((2, 3, 5, 5), |_| rng.random_range(-1.0..1.0));
        let k = Array4::from_shape_fn((4, 3, 3, 3), |_| rng.random_range(-1.0..1.0));
        let b = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let fast = kernels::conv2d_same(&x, &k, Some(&b));
        let (n, _, h, w) = x.dim();
        for ni in 0..n {
            for oc in 0..4 {
                for y in 0..h {
                    for xw in 0..w {
                        let mut s = b[oc];
                        for ci in 0..3 {
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let iy = y as isize + dy - 1;
                                    let ix = xw as isize + dx - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    s += k[(oc, ci, dy as usize, dx as usize)]
                                        * x[(ni, ci, iy as usize, ix as usize)];
                                }
                            }
                        }
                        assert_abs_diff_eq!(fast[(ni, oc, y, xw)], s, epsilon = 1e-10);
                    }
                }
            }
        }
    }
}
