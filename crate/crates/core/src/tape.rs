//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A `Tape` records every operation of one forward pass; `backward` walks the
//! record in reverse and accumulates gradients into each `requires_grad`
//! node. Tapes are single-threaded and cheap to discard between steps.

use std::cell::RefCell;

use crate::error::{DytxError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &mut GradStore<T>)>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    backward: Option<BackFn<T>>,
}

pub struct GradStore<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradStore<T> {
    fn add(&mut self, id: VarId, g: Tensor<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, backward: Option<BackFn<T>>) -> VarId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        VarId(nodes.len() - 1)
    }

    pub fn var(&self, value: Tensor<T>, requires_grad: bool) -> VarId {
        self.push(value, requires_grad, None)
    }

    pub fn constant(&self, value: Tensor<T>) -> VarId {
        self.push(value, false, None)
    }

    pub fn scalar(&self, v: T) -> VarId {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: VarId) -> Tensor<T> {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn shape(&self, id: VarId) -> Vec<usize> {
        self.nodes.borrow()[id.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes.borrow()[id.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gradient of the last `backward` call w.r.t. `id`, if populated.
    pub fn grad(&self, id: VarId) -> Option<Tensor<T>> {
        self.grads.borrow().get(id.0).and_then(|g| g.clone())
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// `requires_grad` node reachable from it.
    pub fn backward(&self, loss: VarId) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(DytxError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut store = GradStore {
            grads: vec![None; nodes.len()],
        };
        store.grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                store.grads[i] = None;
                continue;
            }
            let g = match store.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(back) = &nodes[i].backward {
                back(&g, &mut store);
            }
            store.grads[i] = Some(g);
        }
        *self.grads.borrow_mut() = store.grads;
        Ok(())
    }

    fn binary_same_shape(&self, a: VarId, b: VarId, name: &str) -> Result<(Tensor<T>, Tensor<T>)> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.shape() != vb.shape() {
            return Err(DytxError::Dimension(format!(
                "{name}: shapes {:?} and {:?} differ",
                va.shape(),
                vb.shape()
            )));
        }
        Ok((va, vb))
    }

    pub fn add(&self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = self.binary_same_shape(a, b, "add")?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        Ok(self.push(
            va.zip(&vb, |x, y| x + y),
            rg,
            Some(Box::new(move |g, store| {
                if rga {
                    store.add(a, g.clone());
                }
                if rgb {
                    store.add(b, g.clone());
                }
            })),
        ))
    }

    pub fn sub(&self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = self.binary_same_shape(a, b, "sub")?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        Ok(self.push(
            va.zip(&vb, |x, y| x - y),
            rg,
            Some(Box::new(move |g, store| {
                if rga {
                    store.add(a, g.clone());
                }
                if rgb {
                    store.add(b, g.map(|x| -x));
                }
            })),
        ))
    }

    pub fn mul(&self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = self.binary_same_shape(a, b, "mul")?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        let (ca, cb) = (va.clone(), vb.clone());
        Ok(self.push(
            va.zip(&vb, |x, y| x * y),
            rg,
            Some(Box::new(move |g, store| {
                if rga {
                    store.add(a, g.zip(&cb, |gv, y| gv * y));
                }
                if rgb {
                    store.add(b, g.zip(&ca, |gv, x| gv * x));
                }
            })),
        ))
    }

    pub fn div(&self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = self.binary_same_shape(a, b, "div")?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        let (ca, cb) = (va.clone(), vb.clone());
        Ok(self.push(
            va.zip(&vb, |x, y| x / y),
            rg,
            Some(Box::new(move |g, store| {
                if rga {
                    store.add(a, g.zip(&cb, |gv, y| gv / y));
                }
                if rgb {
                    let mut gb = g.zip(&ca, |gv, x| gv * x);
                    gb = gb.zip(&cb, |v, y| -v / (y * y));
                    store.add(b, gb);
                }
            })),
        ))
    }

    pub fn neg(&self, a: VarId) -> VarId {
        let va = self.value(a);
        let rg = self.requires_grad(a);
        self.push(
            va.map(|x| -x),
            rg,
            Some(Box::new(move |g, store| store.add(a, g.map(|x| -x)))),
        )
    }

    pub fn scale(&self, a: VarId, c: T) -> VarId {
        let va = self.value(a);
        let rg = self.requires_grad(a);
        self.push(
            va.map(|x| x * c),
            rg,
            Some(Box::new(move |g, store| store.add(a, g.map(|x| x * c)))),
        )
    }

    pub fn add_const(&self, a: VarId, c: T) -> VarId {
        let va = self.value(a);
        let rg = self.requires_grad(a);
        self.push(
            va.map(|x| x + c),
            rg,
            Some(Box::new(move |g, store| store.add(a, g.clone()))),
        )
    }

    fn unary(
        &self,
        a: VarId,
        fwd: impl Fn(T) -> T,
        dfd: impl Fn(T) -> T + 'static,
    ) -> VarId {
        let va = self.value(a);
        let rg = self.requires_grad(a);
        let input = va.clone();
        self.push(
            va.map(fwd),
            rg,
            Some(Box::new(move |g, store| {
                store.add(a, g.zip(&input, |gv, x| gv * dfd(x)));
            })),
        )
    }

    pub fn relu(&self, a: VarId) -> VarId {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            |x| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn gelu(&self, a: VarId) -> VarId {
        // tanh approximation
        let c = T::of_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = T::of_f64(0.044715);
        let half = T::of_f64(0.5);
        let three = T::of_f64(3.0);
        self.unary(
            a,
            move |x| {
                let u = c * (x + k * x * x * x);
                half * x * (T::one() + u.tanh())
            },
            move |x| {
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let du = c * (T::one() + three * k * x * x);
                half * (T::one() + t) + half * x * (T::one() - t * t) * du
            },
        )
    }

    pub fn sigmoid(&self, a: VarId) -> VarId {
        self.unary(
            a,
            |x| T::one() / (T::one() + (-x).exp()),
            |x| {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() - s)
            },
        )
    }

    pub fn tanh(&self, a: VarId) -> VarId {
        self.unary(
            a,
            |x| x.tanh(),
            |x| {
                let t = x.tanh();
                T::one() - t * t
            },
        )
    }

    pub fn sqrt(&self, a: VarId) -> VarId {
        self.unary(
            a,
            |x| x.sqrt(),
            |x| T::of_f64(0.5) / x.sqrt(),
        )
    }

    pub fn abs(&self, a: VarId) -> VarId {
        self.unary(
            a,
            |x| x.abs(),
            |x| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Elementwise max; gradient routes to the larger operand (ties to `a`).
    pub fn max_elem(&self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = self.binary_same_shape(a, b, "max_elem")?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        let (ca, cb) = (va.clone(), vb.clone());
        Ok(self.push(
            va.zip(&vb, |x, y| if x >= y { x } else { y }),
            rg,
            Some(Box::new(move |g, store| {
                if rga {
                    let mut ga = g.clone();
                    let sel: Vec<bool> = ca
                        .data()
                        .iter()
                        .zip(cb.data())
                        .map(|(&x, &y)| x >= y)
                        .collect();
                    for (v, keep) in ga.data_mut().iter_mut().zip(&sel) {
                        if !keep {
                            *v = T::zero();
                        }
                    }
                    store.add(a, ga);
                }
                if rgb {
                    let mut gb = g.clone();
                    let sel: Vec<bool> = ca
                        .data()
                        .iter()
                        .zip(cb.data())
                        .map(|(&x, &y)| x < y)
                        .collect();
                    for (v, keep) in gb.data_mut().iter_mut().zip(&sel) {
                        if !keep {
                            *v = T::zero();
                        }
                    }
                    store.add(b, gb);
                }
            })),
        ))
    }

    pub fn min_elem(&self, a: VarId, b: VarId) -> Result<VarId> {
        let na = self.neg(a);
        let nb = self.neg(b);
        let m = self.max_elem(na, nb)?;
        Ok(self.neg(m))
    }

    pub fn max_const(&self, a: VarId, c: T) -> VarId {
        self.unary(
            a,
            move |x| if x >= c { x } else { c },
            move |x| if x >= c { T::one() } else { T::zero() },
        )
    }

    pub fn min_const(&self, a: VarId, c: T) -> VarId {
        self.unary(
            a,
            move |x| if x <= c { x } else { c },
            move |x| if x <= c { T::one() } else { T::zero() },
        )
    }

    /// Cut the graph: same value, no gradient flow.
    pub fn detach(&self, a: VarId) -> VarId {
        self.constant(self.value(a))
    }

    pub fn matmul(&self, a: VarId, b: VarId) -> Result<VarId> {
        let va = self.value(a);
        let vb = self.value(b);
        let out = va.matmul(&vb)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        let (ca, cb) = (va, vb);
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, store| {
                if rga {
                    store.add(a, g.matmul(&cb.transpose()).expect("matmul back a"));
                }
                if rgb {
                    store.add(b, ca.transpose().matmul(g).expect("matmul back b"));
                }
            })),
        ))
    }

    pub fn transpose2d(&self, a: VarId) -> VarId {
        let va = self.value(a);
        let rg = self.requires_grad(a);
        self.push(
            va.transpose(),
            rg,
            Some(Box::new(move |g, store| store.add(a, g.transpose()))),
        )
    }

    /// `a[M,N] + b[N]` broadcast over rows.
    pub fn add_row_broadcast(&self, a: VarId, b: VarId) -> Result<VarId> {
        let va = self.value(a);
        let vb = self.value(b);
        let n = *va.shape().last().ok_or_else(|| {
            DytxError::Dimension("add_row_broadcast on 0-d tensor".into())
        })?;
        if vb.shape() != [n] {
            return Err(DytxError::Dimension(format!(
                "broadcast vector shape {:?} does not match trailing axis {n}",
                vb.shape()
            )));
        }
        let rows = va.len() / n;
        let mut out = va.clone();
        {
            let d = out.data_mut();
            for r in 0..rows {
                for j in 0..n {
                    d[r * n + j] += vb.data()[j];
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, store| {
                if rga {
                    store.add(a, g.clone());
                }
                if rgb {
                    let mut gb = vec![T::zero(); n];
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] += g.data()[r * n + j];
                        }
                    }
                    store.add(b, Tensor::new(vec![n], gb));
                }
            })),
        ))
    }

    /// `a[M,N] ∘ v[N]` broadcast over rows (per-channel scaling).
    pub fn mul_row_broadcast(&self, a: VarId, v: VarId) -> Result<VarId> {
        let va = self.value(a);
        let vv = self.value(v);
        let n = *va.shape().last().unwrap();
        if vv.shape() != [n] {
            return Err(DytxError::Dimension(format!(
                "mul_row_broadcast vector shape {:?} vs trailing axis {n}",
                vv.shape()
            )));
        }
        let rows = va.len() / n;
        let mut out = va.clone();
        {
            let d = out.data_mut();
            for r in 0..rows {
                for j in 0..n {
                    d[r * n + j] *= vv.data()[j];
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(v);
        let (rga, rgv) = (self.requires_grad(a), self.requires_grad(v));
        let (ca, cv) = (va, vv);
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, store| {
                if rga {
                    let mut ga = g.clone();
                    let d = ga.data_mut();
                    for r in 0..rows {
                        for j in 0..n {
                            d[r * n + j] *= cv.data()[j];
                        }
                    }
                    store.add(a, ga);
                }
                if rgv {
                    let mut gv = vec![T::zero(); n];
                    for r in 0..rows {
                        for j in 0..n {
                            gv[j] += g.data()[r * n + j] * ca.data()[r * n + j];
                        }
                    }
                    store.add(v, Tensor::new(vec![n], gv));
                }
            })),
        ))
    }

    /// `a[M,N] ∘ s[M]` broadcast over columns (per-row/token scaling).
    pub fn mul_col_broadcast(&self, a: VarId, s: VarId) -> Result<VarId> {
        let va = self.value(a);
        let vs = self.value(s);
        if va.shape().len() != 2 {
            return Err(DytxError::Dimension(format!(
                "mul_col_broadcast requires 2-D input, got {:?}",
                va.shape()
            )));
        }
        let (m, n) = (va.shape()[0], va.shape()[1]);
        if vs.shape() != [m] {
            return Err(DytxError::Dimension(format!(
                "mul_col_broadcast vector shape {:?} vs leading axis {m}",
                vs.shape()
            )));
        }
        let mut out = va.clone();
        {
            let d = out.data_mut();
            for i in 0..m {
                for j in 0..n {
                    d[i * n + j] *= vs.data()[i];
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(s);
        let (rga, rgs) = (self.requires_grad(a), self.requires_grad(s));
        let (ca, cs) = (va, vs);
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, store| {
                if rga {
                    let mut ga = g.clone();
                    let d = ga.data_mut();
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] *= cs.data()[i];
                        }
                    }
                    store.add(a, ga);
                }
                if rgs {
                    let mut gs = vec![T::zero(); m];
                    for i in 0..m {
                        for j in 0..n {
                            gs[i] += g.data()[i * n + j] * ca.data()[i * n + j];
                        }
                    }
                    store.add(s, Tensor::new(vec![m], gs));
                }
            })),
        ))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, a: VarId, axis: usize) -> Result<VarId> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        if axis >= shape.len() {
            return Err(DytxError::Dimension(format!(
                "softmax axis {axis} out of bounds for shape {:?}",
                shape
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = va.clone();
        {
            let d = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let mut mx = d[idx(0)];
                    for l in 1..len {
                        if d[idx(l)] > mx {
                            mx = d[idx(l)];
                        }
                    }
                    let mut sum = T::zero();
                    for l in 0..len {
                        let e = (d[idx(l)] - mx).exp();
                        d[idx(l)] = e;
                        sum += e;
                    }
                    for l in 0..len {
                        d[idx(l)] /= sum;
                    }
                }
            }
        }
        let rg = self.requires_grad(a);
        let y = out.clone();
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, store| {
                // dx = y ∘ (g − Σ_axis(g∘y))
                let mut dx = g.zip(&y, |gv, yv| gv * yv);
                {
                    let d = dx.data_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + i;
                            let mut dot = T::zero();
                            for l in 0..len {
                                dot += d[idx(l)];
                            }
                            for l in 0..len {
                                d[idx(l)] -= y.data()[idx(l)] * dot;
                            }
                        }
                    }
                }
                store.add(a, dx);
            })),
        ))
    }

    /// Layer normalization over the trailing axis with affine parameters.
    pub fn layer_norm(&self, x: VarId, gain: VarId, bias: VarId, eps: T) -> Result<VarId> {
        let vx = self.value(x);
        let vg = self.value(gain);
        let vb = self.value(bias);
        let n = *vx.shape().last().unwrap();
        if vg.shape() != [n] || vb.shape() != [n] {
            return Err(DytxError::Dimension(format!(
                "layer_norm affine shapes {:?}/{:?} vs trailing axis {n}",
                vg.shape(),
                vb.shape()
            )));
        }
        let rows = vx.len() / n;
        let nf = T::of_f64(n as f64);
        let mut xhat = vx.clone();
        let mut inv_std = vec![T::zero(); rows];
        {
            let d = xhat.data_mut();
            for r in 0..rows {
                let row = &mut d[r * n..(r + 1) * n];
                let mut mean = T::zero();
                for v in row.iter() {
                    mean += *v;
                }
                mean /= nf;
                let mut var = T::zero();
                for v in row.iter() {
                    let c = *v - mean;
                    var += c * c;
                }
                var /= nf;
                let istd = T::one() / (var + eps).sqrt();
                inv_std[r] = istd;
                for v in row.iter_mut() {
                    *v = (*v - mean) * istd;
                }
            }
        }
        let mut out = xhat.clone();
        {
            let d = out.data_mut();
            for r in 0..rows {
                for j in 0..n {
                    d[r * n + j] = d[r * n + j] * vg.data()[j] + vb.data()[j];
                }
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        let (rgx, rgg, rgb) = (
            self.requires_grad(x),
            self.requires_grad(gain),
            self.requires_grad(bias),
        );
        let cg = vg;
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, store| {
                if rgg {
                    let mut gg = vec![T::zero(); n];
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += g.data()[r * n + j] * xhat.data()[r * n + j];
                        }
                    }
                    store.add(gain, Tensor::new(vec![n], gg));
                }
                if rgb {
                    let mut gb = vec![T::zero(); n];
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] += g.data()[r * n + j];
                        }
                    }
                    store.add(bias, Tensor::new(vec![n], gb));
                }
                if rgx {
                    let mut gx = g.clone();
                    {
                        let d = gx.data_mut();
                        for r in 0..rows {
                            // dxhat = g ∘ gain
                            let mut mean_dxhat = T::zero();
                            let mut mean_dxhat_xhat = T::zero();
                            for j in 0..n {
                                let dxh = d[r * n + j] * cg.data()[j];
                                d[r * n + j] = dxh;
                                mean_dxhat += dxh;
                                mean_dxhat_xhat += dxh * xhat.data()[r * n + j];
                            }
                            mean_dxhat /= nf;
                            mean_dxhat_xhat /= nf;
                            for j in 0..n {
                                let xh = xhat.data()[r * n + j];
                                d[r * n + j] = inv_std[r]
                                    * (d[r * n + j] - mean_dxhat - xh * mean_dxhat_xhat);
                            }
                        }
                    }
                    store.add(x, gx);
                }
            })),
        ))
    }

    pub fn sum(&self, a: VarId) -> VarId {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let rg = self.requires_grad(a);
        self.push(
            Tensor::scalar(va.sum_all()),
            rg,
            Some(Box::new(move |g, store| {
                store.add(a, Tensor::full(&shape, g.item()))
            })),
        )
    }

    pub fn mean(&self, a: VarId) -> VarId {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::of_f64(n as f64))
    }

    /// Sum along one axis (axis removed from the output shape).
    pub fn sum_axis(&self, a: VarId, axis: usize) -> Result<VarId> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        if axis >= shape.len() {
            return Err(DytxError::Dimension(format!(
                "sum_axis axis {axis} out of bounds for {:?}",
                shape
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += va.data()[(o * len + l) * inner + i];
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::new(out_shape, out),
            rg,
            Some(Box::new(move |g, store| {
                let mut ga = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            ga[(o * len + l) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                store.add(a, Tensor::new(shape.clone(), ga));
            })),
        ))
    }

    /// Rows `[r0, r1)` along the first axis.
    pub fn slice_rows(&self, a: VarId, r0: usize, r1: usize) -> Result<VarId> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let m = shape[0];
        if r0 >= r1 || r1 > m {
            return Err(DytxError::Dimension(format!(
                "slice_rows [{r0},{r1}) out of bounds for leading axis {m}"
            )));
        }
        let row: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = r1 - r0;
        let out = va.data()[r0 * row..r1 * row].to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::new(out_shape, out),
            rg,
            Some(Box::new(move |g, store| {
                let mut full = vec![T::zero(); m * row];
                full[r0 * row..r1 * row].copy_from_slice(g.data());
                store.add(a, Tensor::new(shape.clone(), full));
            })),
        ))
    }

    /// Concatenate along the first axis.
    pub fn concat_rows(&self, ids: &[VarId]) -> Result<VarId> {
        assert!(!ids.is_empty());
        let first = self.value(ids[0]);
        let trailing: Vec<usize> = first.shape()[1..].to_vec();
        let row: usize = trailing.iter().product();
        let mut data = Vec::new();
        let mut row_counts = Vec::new();
        let mut rg = false;
        for &id in ids {
            let v = self.value(id);
            if v.shape()[1..] != trailing[..] {
                return Err(DytxError::Dimension(format!(
                    "concat_rows trailing shape mismatch: {:?} vs {:?}",
                    &v.shape()[1..],
                    trailing
                )));
            }
            row_counts.push(v.shape()[0]);
            data.extend_from_slice(v.data());
            rg |= self.requires_grad(id);
        }
        let total: usize = row_counts.iter().sum();
        let mut shape = vec![total];
        shape.extend_from_slice(&trailing);
        let ids: Vec<VarId> = ids.to_vec();
        let rgs: Vec<bool> = ids.iter().map(|&i| self.requires_grad(i)).collect();
        Ok(self.push(
            Tensor::new(shape, data),
            rg,
            Some(Box::new(move |g, store| {
                let mut offset = 0;
                for (idx, &id) in ids.iter().enumerate() {
                    let rows = row_counts[idx];
                    if rgs[idx] {
                        let mut shape = vec![rows];
                        shape.extend_from_slice(&trailing);
                        let part = g.data()[offset * row..(offset + rows) * row].to_vec();
                        store.add(id, Tensor::new(shape, part));
                    }
                    offset += rows;
                }
            })),
        ))
    }

    /// Columns `[c0, c1)` of a 2-D tensor.
    pub fn slice_cols(&self, a: VarId, c0: usize, c1: usize) -> Result<VarId> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(DytxError::Dimension(format!(
                "slice_cols requires 2-D input, got {:?}",
                va.shape()
            )));
        }
        let (m, n) = (va.shape()[0], va.shape()[1]);
        if c0 >= c1 || c1 > n {
            return Err(DytxError::Dimension(format!(
                "slice_cols [{c0},{c1}) out of bounds for {n} columns"
            )));
        }
        let w = c1 - c0;
        let mut out = vec![T::zero(); m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&va.data()[i * n + c0..i * n + c1]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::new(vec![m, w], out),
            rg,
            Some(Box::new(move |g, store| {
                let mut full = vec![T::zero(); m * n];
                for i in 0..m {
                    full[i * n + c0..i * n + c1].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                store.add(a, Tensor::new(vec![m, n], full));
            })),
        ))
    }

    /// Concatenate 2-D tensors along the column axis.
    pub fn concat_cols(&self, ids: &[VarId]) -> Result<VarId> {
        assert!(!ids.is_empty());
        let m = self.value(ids[0]).shape()[0];
        let mut widths = Vec::new();
        let mut rg = false;
        for &id in ids {
            let v = self.value(id);
            if v.shape().len() != 2 || v.shape()[0] != m {
                return Err(DytxError::Dimension(format!(
                    "concat_cols row-count mismatch: {:?} vs {m} rows",
                    v.shape()
                )));
            }
            widths.push(v.shape()[1]);
            rg |= self.requires_grad(id);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); m * total];
        let mut offset = 0;
        for (&id, &w) in ids.iter().zip(&widths) {
            let v = self.value(id);
            for i in 0..m {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let ids: Vec<VarId> = ids.to_vec();
        let rgs: Vec<bool> = ids.iter().map(|&i| self.requires_grad(i)).collect();
        Ok(self.push(
            Tensor::new(vec![m, total], out),
            rg,
            Some(Box::new(move |g, store| {
                let mut offset = 0;
                for (idx, &id) in ids.iter().enumerate() {
                    let w = widths[idx];
                    if rgs[idx] {
                        let mut part = vec![T::zero(); m * w];
                        for i in 0..m {
                            part[i * w..(i + 1) * w].copy_from_slice(
                                &g.data()[i * total + offset..i * total + offset + w],
                            );
                        }
                        store.add(id, Tensor::new(vec![m, w], part));
                    }
                    offset += w;
                }
            })),
        ))
    }

    pub fn reshape(&self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        let va = self.value(a);
        let old_shape = va.shape().to_vec();
        let out = va.reshape(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, store| {
                store.add(a, g.reshape(old_shape.clone()).expect("reshape back"));
            })),
        ))
    }

    /// 2-D convolution, stride 1, symmetric zero padding.
    /// `x: [Cin,H,W]`, `w: [Cout,Cin,Kh,Kw]`, `b: [Cout]`.
    pub fn conv2d(&self, x: VarId, w: VarId, b: VarId, pad: usize) -> Result<VarId> {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        if vx.shape().len() != 3 || vw.shape().len() != 4 {
            return Err(DytxError::Dimension(format!(
                "conv2d expects x[C,H,W], w[O,C,Kh,Kw]; got {:?}, {:?}",
                vx.shape(),
                vw.shape()
            )));
        }
        let (cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (cout, cin2, kh, kw) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
        if cin != cin2 || vb.shape() != [cout] {
            return Err(DytxError::Dimension(format!(
                "conv2d channel mismatch: x {:?}, w {:?}, b {:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            )));
        }
        let oh = h + 2 * pad + 1 - kh;
        let ow = wd + 2 * pad + 1 - kw;
        let kk = cin * kh * kw;
        let nn = oh * ow;

        // im2col: cols[kk, nn], zero rows where the window leaves the image
        let mut cols = vec![T::zero(); kk * nn];
        for ic in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ic * kh + ky) * kw + kx;
                    for oy in 0..oh {
                        let iy = oy + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        for ox in 0..ow {
                            let ix = ox + kx;
                            if ix < pad || ix >= wd + pad {
                                continue;
                            }
                            let ix = ix - pad;
                            cols[row * nn + oy * ow + ox] = vx.data()[(ic * h + iy) * wd + ix];
                        }
                    }
                }
            }
        }

        // out[cout, nn] = w[cout, kk] * cols + bias
        let mut out = vec![T::zero(); cout * nn];
        for oc in 0..cout {
            let bb = vb.data()[oc];
            for i in 0..nn {
                out[oc * nn + i] = bb;
            }
        }
        T::gemm_acc(cout, kk, nn, vw.data(), &cols, &mut out);

        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        let (rgx, rgw, rgb) = (
            self.requires_grad(x),
            self.requires_grad(w),
            self.requires_grad(b),
        );
        let cw = vw;
        Ok(self.push(
            Tensor::new(vec![cout, oh, ow], out),
            rg,
            Some(Box::new(move |g, store| {
                if rgb {
                    let mut gb = vec![T::zero(); cout];
                    for oc in 0..cout {
                        for i in 0..nn {
                            gb[oc] += g.data()[oc * nn + i];
                        }
                    }
                    store.add(b, Tensor::new(vec![cout], gb));
                }
                if rgw {
                    // gw[cout, kk] = g[cout, nn] * colsᵀ[nn, kk]
                    let mut cols_t = vec![T::zero(); nn * kk];
                    for r in 0..kk {
                        for c in 0..nn {
                            cols_t[c * kk + r] = cols[r * nn + c];
                        }
                    }
                    let mut gw = vec![T::zero(); cout * kk];
                    T::gemm_acc(cout, nn, kk, g.data(), &cols_t, &mut gw);
                    store.add(w, Tensor::new(vec![cout, cin, kh, kw], gw));
                }
                if rgx {
                    // gcols[kk, nn] = wᵀ[kk, cout] * g[cout, nn], then col2im
                    let mut w_t = vec![T::zero(); kk * cout];
                    for oc in 0..cout {
                        for r in 0..kk {
                            w_t[r * cout + oc] = cw.data()[oc * kk + r];
                        }
                    }
                    let mut gcols = vec![T::zero(); kk * nn];
                    T::gemm_acc(kk, cout, nn, &w_t, g.data(), &mut gcols);
                    let mut gx = vec![T::zero(); cin * h * wd];
                    for ic in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let row = (ic * kh + ky) * kw + kx;
                                for oy in 0..oh {
                                    let iy = oy + ky;
                                    if iy < pad || iy >= h + pad {
                                        continue;
                                    }
                                    let iy = iy - pad;
                                    for ox in 0..ow {
                                        let ix = ox + kx;
                                        if ix < pad || ix >= wd + pad {
                                            continue;
                                        }
                                        let ix = ix - pad;
                                        gx[(ic * h + iy) * wd + ix] += gcols[row * nn + oy * ow + ox];
                                    }
                                }
                            }
                        }
                    }
                    store.add(x, Tensor::new(vec![cin, h, wd], gx));
                }
            })),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_sum_of_squares() {
        // loss = sum(w∘w), w=[1,2] → grad [2,4]
        let tape: Tape<f64> = Tape::new();
        let w = tape.var(Tensor::from_vec(vec![1.0, 2.0]), true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_unreachable_param_no_grad() {
        let tape: Tape<f64> = Tape::new();
        let w = tape.var(Tensor::from_vec(vec![1.0, 2.0]), true);
        let u = tape.var(Tensor::from_vec(vec![3.0]), true);
        let _ = u;
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert!(tape.grad(u).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape: Tape<f64> = Tape::new();
        let w = tape.var(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(
            tape.backward(w),
            Err(DytxError::Contract(_))
        ));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.var(Tensor::from_vec(vec![0.0, 0.0]), false);
        let s = tape.softmax(a, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let b = tape.var(Tensor::from_vec(vec![1000.0, 1000.0]), false);
        let s = tape.softmax(b, 0).unwrap();
        let v = tape.value(s);
        assert!(v.data().iter().all(|x| x.is_finite()));
        assert!((v.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_closed_form() {
        // [0, ln 3] → [0.25, 0.75]
        let tape: Tape<f64> = Tape::new();
        let a = tape.var(Tensor::from_vec(vec![0.0, 3.0f64.ln()]), false);
        let s = tape.softmax(a, 0).unwrap();
        let v = tape.value(s);
        assert!((v.data()[0] - 0.25).abs() < 1e-12);
        assert!((v.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_cases() {
        let tape: Tape<f64> = Tape::new();
        let gain = tape.var(Tensor::from_vec(vec![1.0, 1.0]), false);
        let bias = tape.var(Tensor::from_vec(vec![0.0, 0.0]), false);

        // constant row → zero row
        let x = tape.var(Tensor::new(vec![1, 2], vec![3.0, 3.0]), false);
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-6));

        // [1,-1] already zero-mean unit-var
        let x = tape.var(Tensor::new(vec![1, 2], vec![1.0, -1.0]), false);
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = tape.value(y);
        assert!((v.data()[0] - 1.0).abs() < 1e-5);
        assert!((v.data()[1] + 1.0).abs() < 1e-5);

        // gain=0 → bias broadcast
        let g0 = tape.var(Tensor::from_vec(vec![0.0, 0.0]), false);
        let b7 = tape.var(Tensor::from_vec(vec![7.0, 9.0]), false);
        let x = tape.var(Tensor::new(vec![1, 2], vec![0.3, -5.0]), false);
        let y = tape.layer_norm(x, g0, b7, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0, 9.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.var(Tensor::zeros(&[2, 3]), false);
        let b = tape.var(Tensor::zeros(&[4, 5]), false);
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"));
    }

    #[test]
    fn slice_concat_roundtrip() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.var(Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]), true);
        let top = tape.slice_rows(a, 0, 1).unwrap();
        let rest = tape.slice_rows(a, 1, 3).unwrap();
        let back = tape.concat_rows(&[top, rest]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(a).data());
    }
}
