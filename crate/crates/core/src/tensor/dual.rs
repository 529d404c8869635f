use super::{silu, silu_prime, Tensor};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// A tensor paired with a tangent of the same shape; arithmetic on it
/// propagates first-order directional derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTensor<T> {
    primal: Tensor<T>,
    tangent: Tensor<T>,
}

impl<T: Scalar> DualTensor<T> {
    pub fn new(primal: Tensor<T>, tangent: Tensor<T>) -> Result<Self> {
        primal.check_same_shape(&tangent, "dual tangent")?;
        Ok(Self { primal, tangent })
    }

    /// A value held fixed: zero tangent.
    pub fn constant(primal: Tensor<T>) -> Self {
        let tangent = Tensor::zeros(primal.shape().to_vec());
        Self { primal, tangent }
    }

    pub fn primal(&self) -> &Tensor<T> {
        &self.primal
    }

    pub fn tangent(&self) -> &Tensor<T> {
        &self.tangent
    }

    pub fn into_parts(self) -> (Tensor<T>, Tensor<T>) {
        (self.primal, self.tangent)
    }

    pub fn shape(&self) -> &[usize] {
        self.primal.shape()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Ok(Self { primal: self.primal.add(&other.primal)?, tangent: self.tangent.add(&other.tangent)? })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        Ok(Self { primal: self.primal.sub(&other.primal)?, tangent: self.tangent.sub(&other.tangent)? })
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        let primal = self.primal.hadamard(&other.primal)?;
        let tangent = self
            .tangent
            .hadamard(&other.primal)?
            .add(&self.primal.hadamard(&other.tangent)?)?;
        Ok(Self { primal, tangent })
    }

    pub fn scale(&self, k: T) -> Self {
        Self { primal: self.primal.scale(k), tangent: self.tangent.scale(k) }
    }

    /// Affine map with constant weights: the tangent is carried through the
    /// linear part only.
    pub fn affine(&self, w: &[T], bias: Option<&[T]>, out: usize) -> Self {
        Self { primal: self.primal.affine(w, bias, out), tangent: self.tangent.affine(w, None, out) }
    }

    pub fn silu(&self) -> Self {
        let tangent = self
            .primal
            .zip_map(&self.tangent, |x, dx| silu_prime(x) * dx)
            .expect("dual shapes agree");
        Self { primal: self.primal.map(silu), tangent }
    }

    pub fn square(&self) -> Self {
        let two = T::lit(2.0);
        let tangent = self.primal.zip_map(&self.tangent, |x, dx| two * x * dx).expect("dual shapes agree");
        Self { primal: self.primal.map(|x| x * x), tangent }
    }

    pub fn sin(&self) -> Self {
        let tangent = self.primal.zip_map(&self.tangent, |x, dx| x.cos() * dx).expect("dual shapes agree");
        Self { primal: self.primal.map(|x| x.sin()), tangent }
    }

    pub fn cos(&self) -> Self {
        let tangent = self.primal.zip_map(&self.tangent, |x, dx| -x.sin() * dx).expect("dual shapes agree");
        Self { primal: self.primal.map(|x| x.cos()), tangent }
    }

    /// Multiplies every element of row `i` by the scalar dual `k[i]`.
    pub fn scale_rows(&self, k: &DualTensor<T>) -> Result<Self> {
        if k.primal.len() != self.primal.rows() {
            return Err(dim_err("row factor count"));
        }
        let p = self.primal.scale_rows(k.primal.data())?;
        let t = self
            .tangent
            .scale_rows(k.primal.data())?
            .add(&self.primal.scale_rows(k.tangent.data())?)?;
        Ok(Self { primal: p, tangent: t })
    }
}

/// Value and directional derivative of `f` at `(point, time)` along
/// `(dir_x, dir_t)`, evaluated in one forward pass over dual tensors.
///
/// `f` receives the state as a dual tensor and the time as a one-element
/// dual tensor. The returned derivative is `∇ₓf·dir_x + ∂ₜf·dir_t`.
pub fn jvp<T, F>(
    f: F,
    point: &Tensor<T>,
    time: T,
    dir_x: &Tensor<T>,
    dir_t: T,
) -> Result<(Tensor<T>, Tensor<T>)>
where
    T: Scalar,
    F: Fn(&DualTensor<T>, &DualTensor<T>) -> Result<DualTensor<T>>,
{
    let x = DualTensor::new(point.clone(), dir_x.clone())?;
    let t = DualTensor::new(Tensor::from_parts(vec![1], vec![time]), Tensor::from_parts(vec![1], vec![dir_t]))?;
    let (value, deriv) = f(&x, &t)?.into_parts();
    Ok((value.ensure_finite("jvp value")?, deriv.ensure_finite("jvp derivative")?))
}
