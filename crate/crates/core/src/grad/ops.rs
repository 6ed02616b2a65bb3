//! Primitive operations and their gradient rules.

use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use nalgebra::{Matrix3, Vector3};

use super::{Backward, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{Camera, RigidTransform};

/// Depths below this are clamped in [`Var::perspective`] (gradient zero there).
pub const PERSPECTIVE_ZMIN: f64 = 1e-4;

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(t.rows(), t.cols(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(a.rows(), a.cols(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn mat3(row: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(&row[..9])
}

fn put_mat3(out: &mut [f64], m: &Matrix3<f64>) {
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
}

fn v3(row: &[f64]) -> Vector3<f64> {
    Vector3::new(row[0], row[1], row[2])
}

macro_rules! backward_fn {
    ($name:ident, |$inputs:ident, $output:ident, $grad:ident| $body:expr) => {
        struct $name;
        impl Backward for $name {
            #[allow(unused_variables)]
            fn backward(&self, $inputs: &[&Tensor], $output: &Tensor, $grad: &Tensor) -> Vec<Option<Tensor>> {
                $body
            }
        }
    };
}

backward_fn!(AddOp, |i, o, g| vec![Some(g.clone()), Some(g.clone())]);
backward_fn!(SubOp, |i, o, g| vec![Some(g.clone()), Some(map(g, |v| -v))]);
backward_fn!(MulOp, |i, o, g| vec![Some(zip(g, i[1], |a, b| a * b)), Some(zip(g, i[0], |a, b| a * b))]);
backward_fn!(AbsOp, |i, o, g| vec![Some(zip(g, i[0], |gv, x| if x > 0.0 {
    gv
} else if x < 0.0 {
    -gv
} else {
    0.0
}))]);
backward_fn!(SquareOp, |i, o, g| vec![Some(zip(g, i[0], |gv, x| 2.0 * x * gv))]);
backward_fn!(SqrtOp, |i, o, g| vec![Some(zip(g, o, |gv, y| if y > 0.0 { gv / (2.0 * y) } else { 0.0 }))]);
backward_fn!(ExpOp, |i, o, g| vec![Some(zip(g, o, |gv, y| gv * y))]);
backward_fn!(SigmoidOp, |i, o, g| vec![Some(zip(g, o, |gv, y| gv * y * (1.0 - y)))]);
backward_fn!(SumOp, |i, o, g| vec![Some(Tensor::filled(i[0].rows(), i[0].cols(), g.item()))]);

struct ScaleOp(f64);
impl Backward for ScaleOp {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(map(g, |v| v * self.0))]
    }
}

backward_fn!(IdentityOp, |i, o, g| vec![Some(g.clone())]);

struct WeightedSumOp(Rc<Tensor>);
impl Backward for WeightedSumOp {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let s = g.item();
        vec![Some(map(&self.0, |w| w * s))]
    }
}

backward_fn!(SoftmaxRowsOp, |i, o, g| {
    let mut out = Tensor::zeros(o.rows(), o.cols());
    for r in 0..o.rows() {
        let y = o.row(r);
        let gr = g.row(r);
        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = y[c] * (gr[c] - dot);
        }
    }
    vec![Some(out)]
});

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.rows(), "matmul: {:?} x {:?}", a.shape(), b.shape());
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(b.row(p)) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.cols(), a.rows());
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            out.set(c, r, a.get(r, c));
        }
    }
    out
}

backward_fn!(MatmulOp, |i, o, g| vec![Some(matmul(g, &transpose(i[1]))), Some(matmul(&transpose(i[0]), g))]);

struct ReshapeOp;
impl Backward for ReshapeOp {
    fn backward(&self, i: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::from_vec(i[0].rows(), i[0].cols(), g.data().to_vec()))]
    }
}

struct GatherRowsOp(Rc<Vec<usize>>);
impl Backward for GatherRowsOp {
    fn backward(&self, i: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut out = Tensor::zeros(i[0].rows(), i[0].cols());
        for (r, &src) in self.0.iter().enumerate() {
            for (o, v) in out.row_mut(src).iter_mut().zip(g.row(r)) {
                *o += v;
            }
        }
        vec![Some(out)]
    }
}

struct GatherFlatOp(Rc<Vec<usize>>);
impl Backward for GatherFlatOp {
    fn backward(&self, i: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut out = Tensor::zeros(i[0].rows(), i[0].cols());
        let d = out.data_mut();
        for (&src, v) in self.0.iter().zip(g.data()) {
            d[src] += v;
        }
        vec![Some(out)]
    }
}

struct ColsOp {
    start: usize,
}
impl Backward for ColsOp {
    fn backward(&self, i: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut out = Tensor::zeros(i[0].rows(), i[0].cols());
        let w = g.cols();
        for r in 0..g.rows() {
            out.row_mut(r)[self.start..self.start + w].copy_from_slice(g.row(r));
        }
        vec![Some(out)]
    }
}

struct ConcatColsOp;
impl Backward for ConcatColsOp {
    fn backward(&self, i: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut start = 0;
        i.iter()
            .map(|t| {
                let mut out = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    out.row_mut(r).copy_from_slice(&g.row(r)[start..start + t.cols()]);
                }
                start += t.cols();
                Some(out)
            })
            .collect()
    }
}

struct ConcatRowsOp;
impl Backward for ConcatRowsOp {
    fn backward(&self, i: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut offset = 0;
        i.iter()
            .map(|t| {
                let n = t.len();
                let out = Tensor::from_vec(t.rows(), t.cols(), g.data()[offset..offset + n].to_vec());
                offset += n;
                Some(out)
            })
            .collect()
    }
}

backward_fn!(RowNormOp, |i, o, g| {
    let x = i[0];
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let n = o.get(r, 0);
        if n > 0.0 {
            let s = g.get(r, 0) / n;
            for (v, xv) in out.row_mut(r).iter_mut().zip(x.row(r)) {
                *v = s * xv;
            }
        }
    }
    vec![Some(out)]
});

backward_fn!(NormalizeRowsOp, |i, o, g| {
    let x = i[0];
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        let y = o.row(r);
        let gr = g.row(r);
        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = (gr[c] - y[c] * dot) / n;
        }
    }
    vec![Some(out)]
});

backward_fn!(RowVarianceOp, |i, o, g| {
    let x = i[0];
    let k = x.cols() as f64;
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / k;
        let s = g.get(r, 0) * 2.0 / k;
        for (v, xv) in out.row_mut(r).iter_mut().zip(row) {
            *v = s * (xv - mean);
        }
    }
    vec![Some(out)]
});

/// Rotation matrix of a unit quaternion `(w, x, y, z)`, row-major.
fn quat_matrix(q: &[f64]) -> [f64; 9] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

backward_fn!(QuatToRotmatOp, |i, o, g| {
    let q = i[0];
    let mut out = Tensor::zeros(q.rows(), 4);
    for r in 0..q.rows() {
        let (w, x, y, z) = (q.get(r, 0), q.get(r, 1), q.get(r, 2), q.get(r, 3));
        let gm = g.row(r);
        // d(entry)/d(w, x, y, z) for each of the nine entries.
        let d: [[f64; 4]; 9] = [
            [0.0, 0.0, -4.0 * y, -4.0 * z],
            [-2.0 * z, 2.0 * y, 2.0 * x, -2.0 * w],
            [2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x],
            [2.0 * z, 2.0 * y, 2.0 * x, 2.0 * w],
            [0.0, -4.0 * x, 0.0, -4.0 * z],
            [-2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y],
            [-2.0 * y, 2.0 * z, -2.0 * w, 2.0 * x],
            [2.0 * x, 2.0 * w, 2.0 * z, 2.0 * y],
            [0.0, -4.0 * x, -4.0 * y, 0.0],
        ];
        let row = out.row_mut(r);
        for (e, de) in d.iter().enumerate() {
            for k in 0..4 {
                row[k] += gm[e] * de[k];
            }
        }
    }
    vec![Some(out)]
});

fn gram_schmidt(row: &[f64]) -> Result<(Vector3<f64>, Vector3<f64>, Vector3<f64>, f64, f64)> {
    let a1 = v3(&row[0..3]);
    let a2 = v3(&row[3..6]);
    let n1 = a1.norm();
    if !(n1 > 1e-12) {
        return Err(Error::DegenerateRotation(format!("|a1| = {n1:.3e}")));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if !(n2 > 1e-12) {
        return Err(Error::DegenerateRotation(format!("a2 parallel to a1 (residual {n2:.3e})")));
    }
    let b2 = u2 / n2;
    Ok((b1, b2, b1.cross(&b2), n1, n2))
}

backward_fn!(Rot6dOp, |i, o, g| {
    let x = i[0];
    let mut out = Tensor::zeros(x.rows(), 6);
    for r in 0..x.rows() {
        let row = x.row(r);
        let (b1, b2, _, n1, n2) = gram_schmidt(row).expect("validated in forward");
        let a2 = v3(&row[3..6]);
        let gm = g.row(r);
        // Output is row-major with columns (b1, b2, b3).
        let g1 = Vector3::new(gm[0], gm[3], gm[6]);
        let g2 = Vector3::new(gm[1], gm[4], gm[7]);
        let g3 = Vector3::new(gm[2], gm[5], gm[8]);
        let mut gb1 = g1 + b2.cross(&g3);
        let gb2 = g2 + g3.cross(&b1);
        let gu2 = (gb2 - b2 * b2.dot(&gb2)) / n2;
        let ga2 = gu2 - b1 * b1.dot(&gu2);
        gb1 -= gu2 * b1.dot(&a2) + a2 * b1.dot(&gu2);
        let ga1 = (gb1 - b1 * b1.dot(&gb1)) / n1;
        out.row_mut(r).copy_from_slice(&[ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z]);
    }
    vec![Some(out)]
});

backward_fn!(RotmatMulOp, |i, o, g| {
    let (a, b) = (i[0], i[1]);
    let mut ga = Tensor::zeros(a.rows(), 9);
    let mut gb = Tensor::zeros(b.rows(), 9);
    for r in 0..a.rows() {
        let (am, bm, gm) = (mat3(a.row(r)), mat3(b.row(r)), mat3(g.row(r)));
        put_mat3(ga.row_mut(r), &(gm * bm.transpose()));
        put_mat3(gb.row_mut(r), &(am.transpose() * gm));
    }
    vec![Some(ga), Some(gb)]
});

backward_fn!(RigidApplyOp, |i, o, g| {
    let (rm, x) = (i[0], i[1]);
    let n = rm.rows();
    let mut gr = Tensor::zeros(n, 9);
    let mut gx = Tensor::zeros(n, 3);
    for r in 0..n {
        let m = mat3(rm.row(r));
        let gv = v3(g.row(r));
        let xv = v3(x.row(r));
        put_mat3(gr.row_mut(r), &(gv * xv.transpose()));
        let t = m.transpose() * gv;
        gx.row_mut(r).copy_from_slice(t.as_slice());
    }
    vec![Some(gr), Some(gx), Some(g.clone())]
});

struct TransformPointsOp(Matrix3<f64>);
impl Backward for TransformPointsOp {
    fn backward(&self, i: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let mut out = Tensor::zeros(i[0].rows(), 3);
        let rt = self.0.transpose();
        for r in 0..g.rows() {
            let v = rt * v3(g.row(r));
            out.row_mut(r).copy_from_slice(v.as_slice());
        }
        vec![Some(out)]
    }
}

struct PerspectiveOp(Matrix3<f64>);
impl Backward for PerspectiveOp {
    fn backward(&self, i: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let k = &self.0;
        let x = i[0];
        let mut out = Tensor::zeros(x.rows(), 3);
        for r in 0..x.rows() {
            let (px, py, pz) = (x.get(r, 0), x.get(r, 1), x.get(r, 2));
            let clamped = pz < PERSPECTIVE_ZMIN;
            let z = pz.max(PERSPECTIVE_ZMIN);
            let (gu, gv) = (g.get(r, 0), g.get(r, 1));
            let gx = gu * k[(0, 0)] / z;
            let gy = gu * k[(0, 1)] / z + gv * k[(1, 1)] / z;
            let gz = if clamped {
                0.0
            } else {
                -gu * (k[(0, 0)] * px + k[(0, 1)] * py) / (z * z) - gv * k[(1, 1)] * py / (z * z)
            };
            out.row_mut(r).copy_from_slice(&[gx, gy, gz]);
        }
        vec![Some(out)]
    }
}

struct AlphaNormalizeOp {
    threshold: f64,
}
impl Backward for AlphaNormalizeOp {
    fn backward(&self, i: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        let (x, alpha) = (i[0], i[1]);
        let mut gx = Tensor::zeros(x.rows(), x.cols());
        let mut ga = Tensor::zeros(alpha.rows(), 1);
        for r in 0..x.rows() {
            let a = alpha.get(r, 0);
            if a < self.threshold || a <= 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for c in 0..x.cols() {
                let gv = g.get(r, c);
                gx.set(r, c, gv / a);
                acc += gv * x.get(r, c);
            }
            ga.set(r, 0, -acc / (a * a));
        }
        vec![Some(gx), Some(ga)]
    }
}

impl<'t> Var<'t> {
    fn unary(&self, value: Tensor, op: impl Backward + 'static, name: &'static str) -> Var<'t> {
        self.tape.custom(&[*self], value, Box::new(op), name)
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add");
        self.tape.custom(&[*self, other], zip(&a, &b, |x, y| x + y), Box::new(AddOp), "add")
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub");
        self.tape.custom(&[*self, other], zip(&a, &b, |x, y| x - y), Box::new(SubOp), "sub")
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul");
        self.tape.custom(&[*self, other], zip(&a, &b, |x, y| x * y), Box::new(MulOp), "mul")
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(map(&self.value(), |v| v * c), ScaleOp(c), "scale")
    }

    pub fn offset(&self, c: f64) -> Var<'t> {
        self.unary(map(&self.value(), |v| v + c), IdentityOp, "offset")
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(map(&self.value(), f64::abs), AbsOp, "abs")
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(map(&self.value(), |v| v * v), SquareOp, "square")
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(map(&self.value(), f64::sqrt), SqrtOp, "sqrt")
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(map(&self.value(), f64::exp), ExpOp, "exp")
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(map(&self.value(), sigmoid), SigmoidOp, "sigmoid")
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), SumOp, "sum")
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// `Σ wᵢ xᵢ` against constant weights of the same shape.
    pub fn weighted_sum(&self, weights: Tensor) -> Var<'t> {
        let x = self.value();
        same_shape(&x, &weights, "weighted_sum");
        let s = x.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        self.unary(Tensor::scalar(s), WeightedSumOp(Rc::new(weights)), "weighted_sum")
    }

    /// Mean over the entries whose mask is set; zero when none are.
    pub fn masked_mean(&self, mask: &[bool]) -> Var<'t> {
        let (r, c) = self.shape();
        assert_eq!(mask.len(), r * c, "masked_mean: mask length");
        let n = mask.iter().filter(|&&m| m).count();
        let w = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        self.weighted_sum(Tensor::from_vec(r, c, mask.iter().map(|&m| if m { w } else { 0.0 }).collect()))
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        let x = self.value();
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(r);
            let mut s = 0.0;
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = (v - m).exp();
                s += *ov;
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        self.unary(out, SoftmaxRowsOp, "softmax_rows")
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let out = matmul(&self.value(), &other.value());
        self.tape.custom(&[*self, other], out, Box::new(MatmulOp), "matmul")
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Var<'t> {
        let x = self.value();
        assert_eq!(rows * cols, x.len(), "reshape {:?} -> {rows}x{cols}", x.shape());
        self.unary(Tensor::from_vec(rows, cols, x.data().to_vec()), ReshapeOp, "reshape")
    }

    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Var<'t> {
        let x = self.value();
        let mut data = Vec::with_capacity(idx.len() * x.cols());
        for &i in idx.iter() {
            data.extend_from_slice(x.row(i));
        }
        let out = Tensor::from_vec(idx.len(), x.cols(), data);
        self.unary(out, GatherRowsOp(idx), "gather_rows")
    }

    /// Picks flat (row-major) entries into a `rows x cols` result.
    pub fn gather_flat(&self, idx: Rc<Vec<usize>>, rows: usize, cols: usize) -> Var<'t> {
        assert_eq!(idx.len(), rows * cols);
        let x = self.value();
        let out = Tensor::from_vec(rows, cols, idx.iter().map(|&i| x.data()[i]).collect());
        self.unary(out, GatherFlatOp(idx), "gather_flat")
    }

    pub fn col_slice(&self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        assert!(start + len <= x.cols());
        let mut data = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        self.unary(Tensor::from_vec(x.rows(), len, data), ColsOp { start }, "cols")
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].rows();
        assert!(vals.iter().all(|v| v.rows() == rows), "concat_cols: row mismatch");
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        parts[0].tape.custom(parts, Tensor::from_vec(rows, cols, data), Box::new(ConcatColsOp), "concat_cols")
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let cols = vals[0].cols();
        assert!(vals.iter().all(|v| v.cols() == cols), "concat_rows: column mismatch");
        let rows: usize = vals.iter().map(|v| v.rows()).sum();
        let data: Vec<f64> = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
        parts[0].tape.custom(parts, Tensor::from_vec(rows, cols, data), Box::new(ConcatRowsOp), "concat_rows")
    }

    /// Euclidean norm of every row, `n x 1`.
    pub fn row_norm(&self) -> Var<'t> {
        let x = self.value();
        let out = Tensor::column((0..x.rows()).map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect());
        self.unary(out, RowNormOp, "row_norm")
    }

    pub fn normalize_rows(&self) -> Var<'t> {
        let x = self.value();
        let mut out = (*x).clone();
        for r in 0..x.rows() {
            let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        self.unary(out, NormalizeRowsOp, "normalize_rows")
    }

    /// Population variance across the columns of each row, `n x 1`.
    pub fn row_variance(&self) -> Var<'t> {
        let x = self.value();
        let k = x.cols() as f64;
        let out = Tensor::column(
            (0..x.rows())
                .map(|r| {
                    let row = x.row(r);
                    let m = row.iter().sum::<f64>() / k;
                    row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / k
                })
                .collect(),
        );
        self.unary(out, RowVarianceOp, "row_variance")
    }

    /// `n x 4` unit quaternions `(w, x, y, z)` to `n x 9` row-major rotations.
    pub fn quat_to_rotmat(&self) -> Var<'t> {
        let q = self.value();
        assert_eq!(q.cols(), 4);
        let mut out = Tensor::zeros(q.rows(), 9);
        for r in 0..q.rows() {
            out.row_mut(r).copy_from_slice(&quat_matrix(q.row(r)));
        }
        self.unary(out, QuatToRotmatOp, "quat_to_rotmat")
    }

    /// `n x 6` rotation columns to `n x 9` row-major rotations by Gram-Schmidt.
    pub fn rot6d_to_rotmat(&self) -> Result<Var<'t>> {
        let x = self.value();
        assert_eq!(x.cols(), 6);
        let mut out = Tensor::zeros(x.rows(), 9);
        for r in 0..x.rows() {
            let (b1, b2, b3, _, _) = gram_schmidt(x.row(r))?;
            put_mat3(out.row_mut(r), &Matrix3::from_columns(&[b1, b2, b3]));
        }
        Ok(self.unary(out, Rot6dOp, "rot6d_to_rotmat"))
    }

    /// Row-wise product of `n x 9` rotation matrices.
    pub fn rotmat_mul(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape());
        let mut out = Tensor::zeros(a.rows(), 9);
        for r in 0..a.rows() {
            put_mat3(out.row_mut(r), &(mat3(a.row(r)) * mat3(b.row(r))));
        }
        self.tape.custom(&[*self, other], out, Box::new(RotmatMulOp), "rotmat_mul")
    }

    /// Row-wise `R x + t` with `self` the `n x 9` rotations.
    pub fn rigid_apply(&self, x: Var<'t>, t: Var<'t>) -> Var<'t> {
        let (rm, xv, tv) = (self.value(), x.value(), t.value());
        assert_eq!(rm.rows(), xv.rows());
        assert_eq!(xv.shape(), tv.shape());
        let mut out = Tensor::zeros(xv.rows(), 3);
        for r in 0..xv.rows() {
            let y = mat3(rm.row(r)) * v3(xv.row(r)) + v3(tv.row(r));
            out.row_mut(r).copy_from_slice(y.as_slice());
        }
        self.tape.custom(&[*self, x, t], out, Box::new(RigidApplyOp), "rigid_apply")
    }

    /// Applies a constant rigid transform to every row of an `n x 3` input.
    pub fn transform_points(&self, tf: &RigidTransform) -> Var<'t> {
        let x = self.value();
        let mut out = Tensor::zeros(x.rows(), 3);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(tf.apply(&v3(x.row(r))).as_slice());
        }
        self.unary(out, TransformPointsOp(tf.rotation), "transform_points")
    }

    /// Camera-frame points to pixels (`n x 2`); depth is clamped at [`PERSPECTIVE_ZMIN`].
    pub fn perspective(&self, cam: &Camera) -> Var<'t> {
        let x = self.value();
        let mut out = Tensor::zeros(x.rows(), 2);
        for r in 0..x.rows() {
            let mut p = v3(x.row(r));
            p.z = p.z.max(PERSPECTIVE_ZMIN);
            let px = cam.pixel_from_camera(&p);
            out.row_mut(r).copy_from_slice(&[px.x, px.y]);
        }
        self.unary(out, PerspectiveOp(cam.k), "perspective")
    }

    /// Divides each row by its alpha; rows below `threshold` become zero.
    pub fn alpha_normalize(&self, alpha: Var<'t>, threshold: f64) -> Var<'t> {
        let (x, a) = (self.value(), alpha.value());
        assert_eq!(a.shape(), (x.rows(), 1));
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let av = a.get(r, 0);
            if av >= threshold && av > 0.0 {
                for (o, v) in out.row_mut(r).iter_mut().zip(x.row(r)) {
                    *o = v / av;
                }
            }
        }
        self.tape.custom(&[*self, alpha], out, Box::new(AlphaNormalizeOp { threshold }), "alpha_normalize")
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(&self, rhs)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(&self, rhs)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(&self, rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
