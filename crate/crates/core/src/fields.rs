//! Scalar and vector field abstractions over IEEE-754 double state vectors.
//!
//! Fields carry optional closed-form derivatives; when absent, derivatives
//! fall back to Richardson-extrapolated central differences. All evaluations
//! are pure, so values can be shared freely across threads.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Base finite-difference step for first derivatives: cbrt(machine epsilon).
pub fn default_fd_step() -> f64 {
    f64::EPSILON.cbrt()
}

/// Base finite-difference step for second derivatives: eps^(1/4).
pub fn default_fd_step_second() -> f64 {
    f64::EPSILON.powf(0.25)
}

/// A point of a system's state space. Entries are finite and the length
/// matches the owning system's dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePoint {
    coords: DVector<f64>,
}

impl StatePoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                context: "StatePoint coordinates".into(),
            });
        }
        Ok(Self {
            coords: DVector::from_vec(coords),
        })
    }

    /// Construct from a slice, panicking on non-finite entries.
    ///
    /// Intended for literals in code and tests; use `new` for external data.
    pub fn of(coords: &[f64]) -> Self {
        Self::new(coords.to_vec()).expect("finite coordinates")
    }

    pub(crate) fn from_vector(coords: DVector<f64>) -> Self {
        Self { coords }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn as_slice(&self) -> &[f64] {
        self.coords.as_slice()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.coords[i]
    }
}

impl fmt::Display for StatePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.coords.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

type ScalarFn = Arc<dyn Fn(&StatePoint) -> f64 + Send + Sync>;
type GradientFn = Arc<dyn Fn(&StatePoint) -> DVector<f64> + Send + Sync>;
type HessianFn = Arc<dyn Fn(&StatePoint) -> DMatrix<f64> + Send + Sync>;
type VectorFn = Arc<dyn Fn(&StatePoint) -> DVector<f64> + Send + Sync>;
type JacobianFn = Arc<dyn Fn(&StatePoint) -> DMatrix<f64> + Send + Sync>;
type TimeVectorFn = Arc<dyn Fn(&StatePoint, f64) -> DVector<f64> + Send + Sync>;

/// Real-valued function of the state, with optional closed-form gradient
/// and Hessian. Finite differences are used where a closed form is absent.
#[derive(Clone)]
pub struct ScalarField {
    dim: usize,
    eval: ScalarFn,
    grad: Option<GradientFn>,
    hess: Option<HessianFn>,
}

impl ScalarField {
    pub fn new<F>(dim: usize, eval: F) -> Self
    where
        F: Fn(&StatePoint) -> f64 + Send + Sync + 'static,
    {
        Self {
            dim,
            eval: Arc::new(eval),
            grad: None,
            hess: None,
        }
    }

    pub fn with_gradient<G>(mut self, grad: G) -> Self
    where
        G: Fn(&StatePoint) -> DVector<f64> + Send + Sync + 'static,
    {
        self.grad = Some(Arc::new(grad));
        self
    }

    pub fn with_hessian<H>(mut self, hess: H) -> Self
    where
        H: Fn(&StatePoint) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.hess = Some(Arc::new(hess));
        self
    }

    /// The field multiplied by a constant factor, derivatives included.
    pub fn scaled(&self, factor: f64) -> Self {
        let base = self.clone();
        let mut out = Self::new(self.dim, move |x| factor * base.evaluate(x));
        if let Some(g) = &self.grad {
            let g = g.clone();
            out = out.with_gradient(move |x| factor * g(x));
        }
        if let Some(h) = &self.hess {
            let h = h.clone();
            out = out.with_hessian(move |x| factor * h(x));
        }
        out
    }

    /// Constant field of the given dimension.
    pub fn constant(dim: usize, value: f64) -> Self {
        let n = dim;
        Self::new(dim, move |_| value)
            .with_gradient(move |_| DVector::zeros(n))
            .with_hessian(move |_| DMatrix::zeros(n, n))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_closed_gradient(&self) -> bool {
        self.grad.is_some()
    }

    pub fn evaluate(&self, x: &StatePoint) -> f64 {
        (self.eval)(x)
    }

    /// Gradient: closed form when registered, finite differences otherwise.
    pub fn gradient(&self, x: &StatePoint) -> Result<DVector<f64>> {
        match &self.grad {
            Some(g) => Ok(g(x)),
            None => fd_gradient(self, x, default_fd_step()),
        }
    }

    /// Hessian: closed form when registered, finite differences otherwise.
    pub fn hessian(&self, x: &StatePoint) -> Result<DMatrix<f64>> {
        match &self.hess {
            Some(h) => Ok(h(x)),
            None => fd_hessian(self, x, default_fd_step_second()),
        }
    }
}

/// Vector-valued function of the state (output length = state dimension),
/// with optional closed-form Jacobian.
#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    eval: VectorFn,
    jac: Option<JacobianFn>,
}

impl VectorField {
    pub fn new<F>(dim: usize, eval: F) -> Self
    where
        F: Fn(&StatePoint) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            dim,
            eval: Arc::new(eval),
            jac: None,
        }
    }

    pub fn with_jacobian<J>(mut self, jac: J) -> Self
    where
        J: Fn(&StatePoint) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jac = Some(Arc::new(jac));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn evaluate(&self, x: &StatePoint) -> DVector<f64> {
        (self.eval)(x)
    }

    /// Jacobian matrix J_ij = df_i/dx_j.
    pub fn jacobian(&self, x: &StatePoint) -> Result<DMatrix<f64>> {
        match &self.jac {
            Some(j) => Ok(j(x)),
            None => fd_jacobian(self, x, default_fd_step()),
        }
    }
}

/// Vector field with explicit time dependence. At fixed t it behaves as a
/// `VectorField`.
#[derive(Clone)]
pub struct TimeDependentVectorField {
    dim: usize,
    eval: TimeVectorFn,
    partial_t: Option<TimeVectorFn>,
    jac: Option<Arc<dyn Fn(&StatePoint, f64) -> DMatrix<f64> + Send + Sync>>,
}

impl TimeDependentVectorField {
    pub fn new<F>(dim: usize, eval: F) -> Self
    where
        F: Fn(&StatePoint, f64) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            dim,
            eval: Arc::new(eval),
            partial_t: None,
            jac: None,
        }
    }

    pub fn with_partial_t<G>(mut self, partial_t: G) -> Self
    where
        G: Fn(&StatePoint, f64) -> DVector<f64> + Send + Sync + 'static,
    {
        self.partial_t = Some(Arc::new(partial_t));
        self
    }

    pub fn with_jacobian<J>(mut self, jac: J) -> Self
    where
        J: Fn(&StatePoint, f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jac = Some(Arc::new(jac));
        self
    }

    /// Wrap a time-independent field.
    pub fn from_static(field: VectorField) -> Self {
        let dim = field.dim();
        let f = field.clone();
        let mut out = Self::new(dim, move |x, _| f.evaluate(x))
            .with_partial_t(move |_, _| DVector::zeros(dim));
        if field.jac.is_some() {
            let f2 = field;
            out = out.with_jacobian(move |x, _| f2.jacobian(x).expect("closed-form jacobian"));
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn evaluate(&self, x: &StatePoint, t: f64) -> DVector<f64> {
        (self.eval)(x, t)
    }

    /// d(eta)/dt at fixed x; central difference in t when no closed form.
    pub fn partial_t(&self, x: &StatePoint, t: f64) -> DVector<f64> {
        match &self.partial_t {
            Some(p) => p(x, t),
            None => {
                let h = default_fd_step() * t.abs().max(1.0);
                let fp = (self.eval)(x, t + h);
                let fm = (self.eval)(x, t - h);
                (fp - fm) / (2.0 * h)
            }
        }
    }

    /// Freeze the time argument, producing an ordinary vector field.
    pub fn at_time(&self, t: f64) -> VectorField {
        let eval = self.eval.clone();
        let dim = self.dim;
        let mut out = VectorField::new(dim, move |x| eval(x, t));
        if let Some(jac) = &self.jac {
            let jac = jac.clone();
            out = out.with_jacobian(move |x| jac(x, t));
        }
        out
    }
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn finite_or_domain(v: f64, context: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Domain(format!("non-finite field value in {context}")))
    }
}

/// Central-difference gradient with one Richardson extrapolation level.
///
/// `h` is a base step, scaled per coordinate by max(1, |x_i|). The
/// extrapolated stencil has O(h^4) truncation error.
pub fn fd_gradient(field: &ScalarField, x: &StatePoint, h: f64) -> Result<DVector<f64>> {
    if h <= 0.0 {
        return Err(Error::Domain("finite-difference step must be positive".into()));
    }
    let n = x.dim();
    check_dims(field.dim(), n)?;
    let mut grad = DVector::zeros(n);
    let mut coords = x.coords().clone();
    for i in 0..n {
        let hi = h * x.get(i).abs().max(1.0);
        let central = |step: f64, coords: &mut DVector<f64>| -> Result<f64> {
            let orig = coords[i];
            coords[i] = orig + step;
            let fp = field.evaluate(&StatePoint::from_vector(coords.clone()));
            coords[i] = orig - step;
            let fm = field.evaluate(&StatePoint::from_vector(coords.clone()));
            coords[i] = orig;
            finite_or_domain(fp, "fd_gradient stencil")?;
            finite_or_domain(fm, "fd_gradient stencil")?;
            Ok((fp - fm) / (2.0 * step))
        };
        let d_h = central(hi, &mut coords)?;
        let d_h2 = central(hi / 2.0, &mut coords)?;
        grad[i] = (4.0 * d_h2 - d_h) / 3.0;
    }
    Ok(grad)
}

/// Finite-difference Hessian, symmetrized by averaging with its transpose.
pub fn fd_hessian(field: &ScalarField, x: &StatePoint, h: f64) -> Result<DMatrix<f64>> {
    if h <= 0.0 {
        return Err(Error::Domain("finite-difference step must be positive".into()));
    }
    let n = x.dim();
    check_dims(field.dim(), n)?;
    let mut coords = x.coords().clone();
    let f0 = finite_or_domain(field.evaluate(x), "fd_hessian center")?;
    let mut eval_at = |deltas: &[(usize, f64)]| -> Result<f64> {
        for &(i, d) in deltas {
            coords[i] += d;
        }
        let v = field.evaluate(&StatePoint::from_vector(coords.clone()));
        for &(i, d) in deltas {
            coords[i] -= d;
        }
        finite_or_domain(v, "fd_hessian stencil")
    };
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        let hi = h * x.get(i).abs().max(1.0);
        let fp = eval_at(&[(i, hi)])?;
        let fm = eval_at(&[(i, -hi)])?;
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in (i + 1)..n {
            let hj = h * x.get(j).abs().max(1.0);
            let fpp = eval_at(&[(i, hi), (j, hj)])?;
            let fpm = eval_at(&[(i, hi), (j, -hj)])?;
            let fmp = eval_at(&[(i, -hi), (j, hj)])?;
            let fmm = eval_at(&[(i, -hi), (j, -hj)])?;
            let d = (fpp - fpm - fmp + fmm) / (4.0 * hi * hj);
            hess[(i, j)] = d;
            hess[(j, i)] = d;
        }
    }
    Ok(hess)
}

/// Finite-difference Jacobian of a vector field (Richardson-extrapolated
/// central differences, column per coordinate).
pub fn fd_jacobian(field: &VectorField, x: &StatePoint, h: f64) -> Result<DMatrix<f64>> {
    if h <= 0.0 {
        return Err(Error::Domain("finite-difference step must be positive".into()));
    }
    let n = x.dim();
    check_dims(field.dim(), n)?;
    let mut jac = DMatrix::zeros(n, n);
    let mut coords = x.coords().clone();
    for j in 0..n {
        let hj = h * x.get(j).abs().max(1.0);
        let central = |step: f64, coords: &mut DVector<f64>| -> Result<DVector<f64>> {
            let orig = coords[j];
            coords[j] = orig + step;
            let fp = field.evaluate(&StatePoint::from_vector(coords.clone()));
            coords[j] = orig - step;
            let fm = field.evaluate(&StatePoint::from_vector(coords.clone()));
            coords[j] = orig;
            if fp.iter().chain(fm.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Domain("non-finite field value in fd_jacobian".into()));
            }
            Ok((fp - fm) / (2.0 * step))
        };
        let d_h = central(hj, &mut coords)?;
        let d_h2 = central(hj / 2.0, &mut coords)?;
        let col = (d_h2 * 4.0 - d_h) / 3.0;
        jac.set_column(j, &col);
    }
    Ok(jac)
}

/// Lie derivative of a scalar along a vector field: grad(C) . f.
pub fn lie_derivative_scalar(f: &VectorField, c: &ScalarField, x: &StatePoint) -> Result<f64> {
    check_dims(f.dim(), x.dim())?;
    check_dims(c.dim(), x.dim())?;
    Ok(c.gradient(x)?.dot(&f.evaluate(x)))
}

/// Lie bracket [a, b] = (a . grad) b - (b . grad) a, evaluated at x.
///
/// Antisymmetry is exact at the evaluation point because both orderings
/// reuse the same Jacobian stencils.
pub fn lie_bracket(a: &VectorField, b: &VectorField, x: &StatePoint) -> Result<DVector<f64>> {
    check_dims(a.dim(), b.dim())?;
    check_dims(a.dim(), x.dim())?;
    let ja = a.jacobian(x)?;
    let jb = b.jacobian(x)?;
    Ok(&jb * a.evaluate(x) - &ja * b.evaluate(x))
}

/// Max-norm of the symmetry-equation residual d(eta)/dt + [f, eta] at (x, t).
///
/// Vanishes when eta maps solutions of the flow f to solutions.
pub fn symmetry_residual(
    eta: &TimeDependentVectorField,
    f: &VectorField,
    x: &StatePoint,
    t: f64,
) -> Result<f64> {
    check_dims(eta.dim(), f.dim())?;
    check_dims(f.dim(), x.dim())?;
    let frozen = eta.at_time(t);
    let bracket = lie_bracket(f, &frozen, x)?;
    let residual = eta.partial_t(x, t) + bracket;
    Ok(residual.amax())
}
