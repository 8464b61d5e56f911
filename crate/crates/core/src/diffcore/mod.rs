//! Minimal differentiable-computation core.
//!
//! The networks in this crate are small and fixed, so instead of a general
//! expression graph every layer carries a handwritten backward pass. Tensors
//! are dense row-major buffers generic over [`Scalar`]; verification runs in
//! `f64` and training in `f32`.
//!
//! All reductions iterate in a fixed order, so identical inputs and
//! parameters produce bit-identical losses and gradients.

pub mod gradcheck;
pub mod layers;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use thiserror::Error;

pub use gradcheck::{check_gradients, finite_diff_entries, finite_diff_grad, GradReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {layer}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite value {value} in {stage} at index {index}")]
    NonFinite {
        stage: String,
        index: usize,
        value: f64,
    },
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T, E = DiffError> = std::result::Result<T, E>;

/// Floating point element type of tensors and parameters.
pub trait Scalar:
    num_like::FloatOps
    + Copy
    + Default
    + PartialOrd
    + Debug
    + Display
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = a · b (+ c when accumulate)`, with `a` logically `m×k` and `b`
    /// logically `k×n`. A transposed flag means the operand is stored
    /// row-major in its transposed shape.
    #[allow(clippy::too_many_arguments)]
    fn matmul(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

/// The handful of elementwise operations the layers need, kept separate so
/// the `Scalar` bound list stays readable.
pub mod num_like {
    use std::ops::{Add, Div, Mul, Neg, Sub};

    pub trait FloatOps:
        Sized
        + Add<Output = Self>
        + Sub<Output = Self>
        + Mul<Output = Self>
        + Div<Output = Self>
        + Neg<Output = Self>
    {
        fn exp(self) -> Self;
        fn ln(self) -> Self;
        fn sqrt(self) -> Self;
        fn abs(self) -> Self;
        fn is_finite(self) -> bool;
        fn max(self, other: Self) -> Self;
    }

    macro_rules! impl_float_ops {
        ($t:ty) => {
            impl FloatOps for $t {
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
                fn ln(self) -> Self {
                    <$t>::ln(self)
                }
                fn sqrt(self) -> Self {
                    <$t>::sqrt(self)
                }
                fn abs(self) -> Self {
                    <$t>::abs(self)
                }
                fn is_finite(self) -> bool {
                    <$t>::is_finite(self)
                }
                fn max(self, other: Self) -> Self {
                    <$t>::max(self, other)
                }
            }
        };
    }
    impl_float_ops!(f32);
    impl_float_ops!(f64);
}

fn check_matmul_lens(m: usize, k: usize, n: usize, a: usize, b: usize, c: usize) {
    assert!(a >= m * k, "matmul: lhs has {a} elements, need {}", m * k);
    assert!(b >= k * n, "matmul: rhs has {b} elements, need {}", k * n);
    assert!(c >= m * n, "matmul: out has {c} elements, need {}", m * n);
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // logical (rows × cols); stored row-major either as-is or transposed
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }

            fn matmul(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                check_matmul_lens(m, k, n, a.len(), b.len(), c.len());
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                let (rsa, csa) = strides(m, k, a_trans);
                let (rsb, csb) = strides(k, n, b_trans);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: lengths were checked above against the logical
                // shapes and the strides describe dense row-major storage.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::ZERO; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DiffError::ShapeMismatch {
                layer: "tensor".into(),
                expected: shape.to_vec(),
                got: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Index and value of the first NaN/Inf entry.
    pub fn first_non_finite(&self) -> Option<(usize, f64)> {
        first_non_finite(&self.data)
    }

    pub fn ensure_finite(&self, stage: &str) -> Result<()> {
        ensure_finite(stage, &self.data)
    }

    pub fn ensure_shape(&self, layer: &str, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(DiffError::ShapeMismatch {
                layer: layer.into(),
                expected: expected.to_vec(),
                got: self.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64() * v.to_f64())
            .sum::<f64>()
            .sqrt()
    }
}

pub fn first_non_finite<T: Scalar>(data: &[T]) -> Option<(usize, f64)> {
    data.iter()
        .position(|v| !v.is_finite())
        .map(|i| (i, data[i].to_f64()))
}

pub fn ensure_finite<T: Scalar>(stage: &str, data: &[T]) -> Result<()> {
    match first_non_finite(data) {
        Some((index, value)) => Err(DiffError::NonFinite {
            stage: stage.into(),
            index,
            value,
        }),
        None => Ok(()),
    }
}

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named trainable tensors of one network, in creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        Self { params: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(DiffError::DuplicateName(name.into()));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        self.params[id.0].value.data()
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [T] {
        self.params[id.0].grad.data_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::ZERO);
        }
    }

    pub fn grads(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.grad.clone()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
        }
    }

    /// Replaces every value from `other`, which must hold the same names and
    /// shapes in the same order.
    pub fn load_values(&mut self, other: &ParamSet<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(DiffError::Invalid(format!(
                "parameter count {} does not match network ({})",
                other.len(),
                self.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(other.iter()) {
            if dst.name != src.name {
                return Err(DiffError::UnknownParameter(src.name.clone()));
            }
            src.value.ensure_shape(&dst.name, dst.value.shape())?;
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Something whose parameters can be differentiated against a scalar loss.
pub trait Differentiable<T: Scalar> {
    type Input;
    type Selector: Copy;

    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;

    /// Evaluates the selected loss and accumulates its gradient into the
    /// parameter grads.
    fn loss_and_grad(&mut self, input: &Self::Input, selector: Self::Selector) -> Result<T>;
}

/// Clears all grads, evaluates the loss and returns it along with a copy of
/// every parameter gradient in parameter order.
pub fn forward_backward<T: Scalar, N: Differentiable<T>>(
    net: &mut N,
    input: &N::Input,
    selector: N::Selector,
) -> Result<(T, Vec<Tensor<T>>)> {
    net.params_mut().zero_grad();
    let loss = net.loss_and_grad(input, selector)?;
    if !loss.is_finite() {
        return Err(DiffError::NonFinite {
            stage: "loss".into(),
            index: 0,
            value: loss.to_f64(),
        });
    }
    Ok((loss, net.params().grads()))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Single scalar weight with loss w².
    struct Square {
        params: ParamSet<f64>,
    }

    impl Differentiable<f64> for Square {
        type Input = ();
        type Selector = ();
        fn params(&self) -> &ParamSet<f64> {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamSet<f64> {
            &mut self.params
        }
        fn loss_and_grad(&mut self, _: &(), _: ()) -> Result<f64> {
            let w = self.params.value(ParamId(0))[0];
            self.params.grad_mut(ParamId(0))[0] += 2.0 * w;
            Ok(w * w)
        }
    }

    /// MSE between the input and a target equal to it.
    fn mse_to_self(input: &[f64]) -> f64 {
        let target = input.to_vec();
        let n = input.len() as f64;
        input
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }

    struct EmptyNet {
        params: ParamSet<f64>,
    }

    impl Differentiable<f64> for EmptyNet {
        type Input = Vec<f64>;
        type Selector = ();
        fn params(&self) -> &ParamSet<f64> {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamSet<f64> {
            &mut self.params
        }
        fn loss_and_grad(&mut self, input: &Vec<f64>, _: ()) -> Result<f64> {
            Ok(mse_to_self(input))
        }
    }

    #[test]
    fn square_weight_loss_and_grad() {
        let mut params = ParamSet::new();
        params.add("w", Tensor::scalar(3.0)).unwrap();
        let mut net = Square { params };
        let (loss, grads) = forward_backward(&mut net, &(), ()).unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(grads[0].data(), &[6.0]);
        // grads are cleared between calls rather than accumulated
        let (loss2, grads2) = forward_backward(&mut net, &(), ()).unwrap();
        assert_eq!(loss.to_bits(), loss2.to_bits());
        assert_eq!(grads, grads2);
    }

    #[test]
    fn identity_network_has_zero_loss() {
        let mut net = EmptyNet {
            params: ParamSet::new(),
        };
        let (loss, grads) = forward_backward(&mut net, &vec![1.0, -2.0, 0.5], ()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.is_empty());
        assert_eq!(net.params().scalar_count(), 0);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut params = ParamSet::new();
        params.add("w", Tensor::scalar(f64::INFINITY)).unwrap();
        let mut net = Square { params };
        assert!(matches!(
            forward_backward(&mut net, &(), ()),
            Err(DiffError::NonFinite { .. })
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::<f32>::new();
        p.add("a", Tensor::zeros(&[2])).unwrap();
        assert_eq!(
            p.add("a", Tensor::zeros(&[3])),
            Err(DiffError::DuplicateName("a".into()))
        );
    }

    #[test]
    fn matmul_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::matmul(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        f64::matmul(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        f64::matmul(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }
}
