// Forward rules for every differentiable operation on `Var`.

use super::kernels::{self, ConvGeom};
use super::tape::{check_same_tape, sigmoid, Op, Var, KUMARASWAMY_EPS};
use super::{broadcast_index_map, broadcast_shape, numel, split_axis, Tensor};
use crate::error::{Error, Result};

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor {
        self.tape.value_ref(self.id).clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.value_ref(self.id).item()
    }

    pub fn numel(&self) -> usize {
        self.tape.value_ref(self.id).len()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.tape.detach_value(self.value()))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let out = self.tape.value_ref(self.id).map(f);
        self.tape.push(out, op)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        check_same_tape(*self, other)?;
        let out = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            } else {
                let shape = broadcast_shape(name, a.shape(), b.shape())?;
                let ma = broadcast_index_map(a.shape(), &shape);
                let mb = broadcast_index_map(b.shape(), &shape);
                let data = ma
                    .iter()
                    .zip(&mb)
                    .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
                    .collect();
                Tensor::from_parts(shape, data)
            }
        };
        Ok(self.tape.push(out, op))
    }

    // ── Elementwise ───────────────────────────────────────────────────

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(|x| -x, Op::Neg(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    /// Natural log; non-positive inputs yield NaN/-inf and bump the tape's
    /// non-finite counter.
    pub fn ln(&self) -> Var<'t> {
        self.unary(f64::ln, Op::Log(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&self) -> Var<'t> {
        self.unary(softplus, Op::Softplus(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(|x| x.powf(p), Op::Pow(self.id, p))
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self).expect("same shape")
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, Op::AddScalar(self.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(|x| x * c, Op::MulScalar(self.id, c))
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(|x| x.clamp(lo, hi), Op::Clamp { a: self.id, lo, hi })
    }

    // ── Linear algebra ────────────────────────────────────────────────

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        check_same_tape(*self, other)?;
        let out = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::Dimension {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
        };
        Ok(self.tape.push(out, Op::Matmul(self.id, other.id)))
    }

    /// Stride-1 cross-correlation with "same" zero padding.
    ///
    /// `self` is `[N, H, W, C]`, `kernel` is `[kh, kw, C, K]`; the result is
    /// `[N, H, W, K]`. Even kernel extents pad one extra row/column at the
    /// bottom/right.
    pub fn conv2d(&self, kernel: Var<'t>) -> Result<Var<'t>> {
        check_same_tape(*self, kernel)?;
        let out = {
            let x = self.tape.value_ref(self.id);
            let w = self.tape.value_ref(kernel.id);
            let dim_err = || Error::Dimension {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            };
            if x.ndim() != 4 || w.ndim() != 4 || x.shape()[3] != w.shape()[2] {
                return Err(dim_err());
            }
            if w.shape()[0] == 0 || w.shape()[1] == 0 {
                return Err(dim_err());
            }
            let geom = ConvGeom {
                n: x.shape()[0],
                h: x.shape()[1],
                w: x.shape()[2],
                c: x.shape()[3],
                kh: w.shape()[0],
                kw: w.shape()[1],
            };
            let k = w.shape()[3];
            let cols = kernels::im2col(x.data(), geom);
            let data = kernels::matmul(&cols, w.data(), geom.positions(), geom.patch(), k);
            Tensor::from_parts(vec![geom.n, geom.h, geom.w, k], data)
        };
        Ok(self.tape.push(out, Op::Conv2d { x: self.id, w: kernel.id }))
    }

    /// 2×2 mean pooling with stride 2 over `[N, H, W, C]`.
    pub fn avg_pool2(&self) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value_ref(self.id);
            let s = x.shape();
            if s.len() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0 {
                return Err(Error::Dimension {
                    op: "avg_pool2",
                    lhs: s.to_vec(),
                    rhs: vec![2, 2],
                });
            }
            let data = kernels::avg_pool2(x.data(), s[0], s[1], s[2], s[3]);
            Tensor::from_parts(vec![s[0], s[1] / 2, s[2] / 2, s[3]], data)
        };
        Ok(self.tape.push(out, Op::AvgPool2(self.id)))
    }

    // ── Reductions ────────────────────────────────────────────────────

    pub fn sum(&self) -> Var<'t> {
        let s = self.tape.value_ref(self.id).sum();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.tape.value_ref(self.id);
            check_axis("sum_axis", a.shape(), axis)?;
            let (outer, n, inner) = split_axis(a.shape(), axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..n {
                    let src = &a.data()[(o * n + i) * inner..][..inner];
                    for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let mut shape = a.shape().to_vec();
            shape.remove(axis);
            Tensor::from_parts(shape, data)
        };
        Ok(self.tape.push(out, Op::SumAxis { a: self.id, axis }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let n = self.shape().get(axis).copied().unwrap_or(1).max(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    // ── Structural ────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.tape.value_ref(self.id).clone().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = {
            let a = self.tape.value_ref(self.id);
            let target = broadcast_shape("broadcast_to", a.shape(), shape)?;
            if target != shape {
                return Err(Error::Dimension {
                    op: "broadcast_to",
                    lhs: a.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            let data = broadcast_index_map(a.shape(), shape)
                .into_iter()
                .map(|i| a.data()[i])
                .collect();
            Tensor::from_parts(shape.to_vec(), data)
        };
        Ok(self.tape.push(out, Op::BroadcastTo(self.id)))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let tape = first.tape;
        for p in parts {
            check_same_tape(*first, *p)?;
        }
        let out = {
            let vals: Vec<_> = parts.iter().map(|p| tape.value_ref(p.id)).collect();
            let base = vals[0].shape().to_vec();
            check_axis("concat", &base, axis)?;
            let mut total = 0;
            for v in &vals {
                let s = v.shape();
                let same_rank = s.len() == base.len();
                if !same_rank || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                    return Err(Error::Dimension {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(&base, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &vals {
                    let n = v.shape()[axis];
                    data.extend_from_slice(&v.data()[o * n * inner..][..n * inner]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::from_parts(shape, data)
        };
        Ok(tape.push(
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.tape.value_ref(self.id);
            check_axis("slice", a.shape(), axis)?;
            if start + len > a.shape()[axis] {
                return Err(Error::Dimension {
                    op: "slice",
                    lhs: a.shape().to_vec(),
                    rhs: vec![start, len],
                });
            }
            let (outer, n, inner) = split_axis(a.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&a.data()[(o * n + start) * inner..][..len * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[axis] = len;
            Tensor::from_parts(shape, data)
        };
        Ok(self.tape.push(out, Op::Slice { a: self.id, axis, start }))
    }

    /// Picks `self[i, index[i]]` from a 2-D tensor.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t>> {
        let out = {
            let a = self.tape.value_ref(self.id);
            if a.ndim() != 2 || a.shape()[0] != index.len() {
                return Err(Error::Dimension {
                    op: "gather_rows",
                    lhs: a.shape().to_vec(),
                    rhs: vec![index.len()],
                });
            }
            let width = a.shape()[1];
            if let Some(&bad) = index.iter().find(|&&j| j >= width) {
                return Err(Error::data(format!("index {bad} out of range for width {width}")));
            }
            let data = index
                .iter()
                .enumerate()
                .map(|(i, &j)| a.data()[i * width + j])
                .collect();
            Tensor::from_parts(vec![index.len()], data)
        };
        Ok(self.tape.push(
            out,
            Op::Gather {
                a: self.id,
                index: index.to_vec(),
            },
        ))
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Var<'t>> {
        let out = {
            let a = self.tape.value_ref(self.id);
            if a.ndim() == 0 || a.shape()[0] != perm.len() {
                return Err(Error::Dimension {
                    op: "permute_rows",
                    lhs: a.shape().to_vec(),
                    rhs: vec![perm.len()],
                });
            }
            a.select_rows(perm)
        };
        Ok(self.tape.push(
            out,
            Op::PermuteRows {
                a: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    // ── Normalizations ────────────────────────────────────────────────

    /// Max-shifted softmax along `axis`. NaN inputs propagate NaN.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.tape.value_ref(self.id);
            check_axis("softmax", a.shape(), axis)?;
            let mut data = a.data().to_vec();
            for_each_lane(a.shape(), axis, |idx| {
                let m = idx.iter().map(|&i| data[i]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for &i in idx {
                    data[i] = (data[i] - m).exp();
                    z += data[i];
                }
                for &i in idx {
                    data[i] /= z;
                }
            });
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        Ok(self.tape.push(out, Op::Softmax { a: self.id, axis }))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.tape.value_ref(self.id);
            check_axis("log_softmax", a.shape(), axis)?;
            let mut data = a.data().to_vec();
            for_each_lane(a.shape(), axis, |idx| {
                let m = idx.iter().map(|&i| data[i]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + idx.iter().map(|&i| (data[i] - m).exp()).sum::<f64>().ln();
                for &i in idx {
                    data[i] -= lse;
                }
            });
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        Ok(self.tape.push(out, Op::LogSoftmax { a: self.id, axis }))
    }

    /// Running product along the last axis.
    pub fn cumprod(&self) -> Result<Var<'t>> {
        let out = {
            let a = self.tape.value_ref(self.id);
            if a.ndim() == 0 {
                return Err(Error::contract("cumprod of a scalar"));
            }
            let n = a.shape()[a.ndim() - 1];
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(n.max(1)) {
                for i in 1..row.len() {
                    row[i] *= row[i - 1];
                }
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        Ok(self.tape.push(out, Op::CumProd(self.id)))
    }

    /// Kumaraswamy(a, b) draw by inverse CDF of the fixed uniforms `noise`:
    /// `(1 - (1 - G)^(1/b))^(1/a)`, clamped into `[1e-12, 1 - 1e-12]`.
    pub fn kumaraswamy(a: Var<'t>, b: Var<'t>, noise: Vec<f64>) -> Result<Var<'t>> {
        check_same_tape(a, b)?;
        let out = {
            let av = a.tape.value_ref(a.id);
            let bv = a.tape.value_ref(b.id);
            if av.shape() != bv.shape() || av.len() != noise.len() {
                return Err(Error::Dimension {
                    op: "kumaraswamy",
                    lhs: av.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
            if av.data().iter().chain(bv.data()).any(|&p| p.is_nan() || p <= 0.0) {
                return Err(Error::contract("kumaraswamy parameters must be positive"));
            }
            let data = noise
                .iter()
                .zip(av.data().iter().zip(bv.data()))
                .map(|(&g, (&a, &b))| kumaraswamy_inverse_cdf(g, a, b))
                .collect();
            Tensor::from_parts(av.shape().to_vec(), data)
        };
        Ok(a.tape.push(
            out,
            Op::Kumaraswamy {
                a: a.id,
                b: b.id,
                noise,
            },
        ))
    }
}

pub(crate) fn kumaraswamy_inverse_cdf(g: f64, a: f64, b: f64) -> f64 {
    // log u = (1/a) log(1 - (1-G)^(1/b)), evaluated in log space
    let log_w = (-g).ln_1p();
    let v = -(log_w / b).exp_m1();
    let u = (v.ln() / a).exp();
    u.clamp(KUMARASWAMY_EPS, 1.0 - KUMARASWAMY_EPS)
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        Err(Error::Dimension {
            op,
            lhs: shape.to_vec(),
            rhs: vec![axis],
        })
    } else {
        Ok(())
    }
}

/// Calls `f` with the flat indices of every 1-D lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut idx = vec![0; n];
    for o in 0..outer {
        for r in 0..inner {
            for (i, slot) in idx.iter_mut().enumerate() {
                *slot = (o * n + i) * inner + r;
            }
            f(&idx);
        }
    }
    debug_assert_eq!(outer * n * inner, numel(shape));
}

#[cfg(test)]
mod tests {
    use crate::tensor::{ParamStore, Tape, Tensor};

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = tape.constant(Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap());
        assert_eq!(eye.matmul(v).unwrap().value().data(), &[3.0, 4.0]);
    }

    #[test]
    fn zero_annihilates_matmul() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::new(&[3, 2], vec![1.0, -2.0, 3.5, 7.0, 0.1, 9.0]).unwrap());
        assert_eq!(z.matmul(b).unwrap().value().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::from_vec(vec![0.0, 0.0])).softmax(0).unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
        let s = tape.constant(Tensor::from_vec(vec![1000.0, 0.0])).softmax(0).unwrap();
        assert!((s.value().data()[0] - 1.0).abs() <= 1e-12);
        assert!(s.value().data()[1] <= 1e-12);
        assert_eq!(tape.nonfinite_count(), 0);
    }

    #[test]
    fn softmax_nan_propagates() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::from_vec(vec![f64::NAN, 0.0])).softmax(0).unwrap();
        assert!(s.value().data().iter().all(|v| v.is_nan()));
        assert!(tape.nonfinite_count() > 0);
    }

    #[test]
    fn log_of_exp_is_identity() {
        let tape = Tape::new();
        let xs: Vec<f64> = (0..=100).map(|i| -5.0 + 0.1 * i as f64).collect();
        let x = tape.constant(Tensor::from_vec(xs.clone()));
        let y = x.exp().ln().value();
        for (a, b) in xs.iter().zip(y.data()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn sum_of_ones() {
        let tape = Tape::new();
        assert_eq!(tape.constant(Tensor::ones(&[3, 4])).sum().item(), 12.0);
    }

    #[test]
    fn log_domain_violation_counts() {
        let tape = Tape::new();
        let _ = tape.constant(Tensor::from_vec(vec![-1.0, 1.0])).ln();
        assert_eq!(tape.nonfinite_count(), 1);
        let _ = tape.scalar(0.0).div(tape.scalar(0.0)).unwrap();
        assert_eq!(tape.nonfinite_count(), 2);
    }

    #[test]
    fn identity_loss_has_unit_grad() {
        let tape = Tape::new();
        let mut store = ParamStore::new();
        let x = tape.scalar(2.5);
        let grads = tape.backward(x, &mut store).unwrap();
        assert_eq!(grads.wrt(x).item(), 1.0);
    }

    #[test]
    fn sum_of_squares_grad_is_twice_x() {
        let tape = Tape::new();
        let mut store = ParamStore::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, -2.0, 0.5]));
        let loss = x.square().sum();
        let g = tape.backward(loss, &mut store).unwrap().wrt(x);
        assert_eq!(g.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let mut store = ParamStore::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.backward(x, &mut store).is_err());
    }

    #[test]
    fn backward_rejects_no_grad_tape() {
        let tape = Tape::no_grad();
        let mut store = ParamStore::new();
        let x = tape.scalar(1.0);
        assert!(tape.backward(x, &mut store).is_err());
    }

    #[test]
    fn repeated_backward_accumulates_param_grads() {
        let mut store = ParamStore::new();
        let id = store.add("w", crate::tensor::ParamGroup::Main, Tensor::from_vec(vec![3.0]));
        let tape = Tape::new();
        let w = tape.param(&store, id);
        let loss = w.square().sum();
        tape.backward(loss, &mut store).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[12.0]);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = crate::tensor::Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.slice(1, 1, 2).unwrap().value(), b.value());
    }

    #[test]
    fn cumprod_running_product() {
        let tape = Tape::new();
        let u = tape.constant(Tensor::from_vec(vec![0.5, 0.5, 0.8]));
        assert_eq!(u.cumprod().unwrap().value().data(), &[0.5, 0.25, 0.2]);
    }

    #[test]
    fn f32_precision_rounds_values() {
        let tape = Tape::new().with_precision(crate::tensor::Precision::F32);
        let x = tape.scalar(0.1);
        assert_eq!(x.item(), 0.1f32 as f64);
    }
}
