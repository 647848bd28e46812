//! Registry of the concrete dynamical systems the crate works with, each
//! wired with closed-form flow, invariants, symmetry vectors, and a
//! documented sampling box.
//!
//! Registered systems:
//!
//! * `o2cart`    — O(2)-symmetric normal form, 4 cartesian variables.
//! * `o2polar`   — the same system reduced to 3 polar variables.
//! * `example1`  — the polar system with renamed variables (X1, X2, Phi)
//!                 and a sign branch s in the X2 equation.
//! * `example2`  — 3D system with a polynomial coupling Q(X1).
//! * `euler`     — free rigid-body top, dL/dt = Omega x L with Omega = L/I.

use std::f64::consts::PI;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fields::{
    lie_derivative_scalar, ScalarField, StatePoint, TimeDependentVectorField, VectorField,
};

/// Identifier of a registered system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SystemId {
    OTwoCartesian,
    OTwoPolar,
    ExampleI,
    BridgesExample,
    EulerTop,
}

impl SystemId {
    pub fn name(&self) -> &'static str {
        match self {
            SystemId::OTwoCartesian => "o2cart",
            SystemId::OTwoPolar => "o2polar",
            SystemId::ExampleI => "example1",
            SystemId::BridgesExample => "example2",
            SystemId::EulerTop => "euler",
        }
    }

    pub fn all() -> [SystemId; 5] {
        [
            SystemId::OTwoCartesian,
            SystemId::OTwoPolar,
            SystemId::ExampleI,
            SystemId::BridgesExample,
            SystemId::EulerTop,
        ]
    }
}

impl FromStr for SystemId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "o2cart" => Ok(SystemId::OTwoCartesian),
            "o2polar" => Ok(SystemId::OTwoPolar),
            "example1" => Ok(SystemId::ExampleI),
            "example2" | "bridges" => Ok(SystemId::BridgesExample),
            "euler" => Ok(SystemId::EulerTop),
            other => Err(Error::UnknownSystem(other.to_string())),
        }
    }
}

/// Parameters shared by the registered systems. Fields irrelevant to a
/// given system are ignored by it.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    /// Sign branch s of the polar/example1 family (dX2/dt = s X1^2 cos Phi).
    pub sign_branch: i8,
    /// Ascending coefficients of the real polynomial Q(X1) (example2).
    pub poly_q: Vec<f64>,
    /// Principal moments of inertia (euler).
    pub inertia: [f64; 3],
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self {
            sign_branch: -1,
            poly_q: vec![1.0],
            inertia: [1.0, 2.0, 3.0],
        }
    }
}

impl ParameterSet {
    pub fn validate(&self) -> Result<()> {
        if self.sign_branch != 1 && self.sign_branch != -1 {
            return Err(Error::InvalidParams(format!(
                "sign_branch must be +1 or -1, got {}",
                self.sign_branch
            )));
        }
        if self.poly_q.is_empty() {
            return Err(Error::InvalidParams("poly_q must have at least one coefficient".into()));
        }
        if self.inertia.iter().any(|&i| i <= 0.0 || !i.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "inertia must be strictly positive, got {:?}",
                self.inertia
            )));
        }
        Ok(())
    }

    /// Strict ordering I1 < I2 < I3, required by the elliptic closed form.
    pub fn require_ordered_inertia(&self) -> Result<()> {
        let [i1, i2, i3] = self.inertia;
        if !(i1 < i2 && i2 < i3) {
            return Err(Error::InvalidParams(format!(
                "elliptic closed form needs I1 < I2 < I3, got {:?}",
                self.inertia
            )));
        }
        Ok(())
    }
}

/// Horner evaluation of an ascending-coefficient polynomial.
pub fn poly_eval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Derivative of the polynomial at x.
pub fn poly_deriv(coeffs: &[f64], x: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (k, &c)| acc * x + k as f64 * c)
}

/// Antiderivative vanishing at 0, evaluated at x.
pub fn poly_integral(coeffs: &[f64], x: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .rev()
        .fold(0.0, |acc, (k, &c)| acc * x + c / (k + 1) as f64)
        * x
}

/// Axis-aligned sampling box with an optional rejection constraint.
#[derive(Clone)]
pub struct SamplingBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
    constraint: Option<Arc<dyn Fn(&StatePoint) -> bool + Send + Sync>>,
}

impl SamplingBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        Self { lo, hi, constraint: None }
    }

    pub fn with_constraint<C>(mut self, c: C) -> Self
    where
        C: Fn(&StatePoint) -> bool + Send + Sync + 'static,
    {
        self.constraint = Some(Arc::new(c));
        self
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> StatePoint {
        loop {
            let coords: Vec<f64> = self
                .lo
                .iter()
                .zip(&self.hi)
                .map(|(&lo, &hi)| rng.random_range(lo..hi))
                .collect();
            let p = StatePoint::of(&coords);
            match &self.constraint {
                Some(c) if !c(&p) => continue,
                _ => return p,
            }
        }
    }

    pub fn sample_many(&self, n: usize, seed: u64) -> Vec<StatePoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }
}

/// A named dynamical system: flow, invariants, symmetries, parameters, and
/// the box its verification samples are drawn from. Immutable once built.
#[derive(Clone)]
pub struct SystemDef {
    id: SystemId,
    dim: usize,
    flow: VectorField,
    invariants: Vec<(String, ScalarField)>,
    symmetries: Vec<(String, TimeDependentVectorField)>,
    params: ParameterSet,
    sampling: SamplingBox,
}

impl SystemDef {
    pub fn id(&self) -> SystemId {
        self.id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn flow(&self) -> &VectorField {
        &self.flow
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn sampling(&self) -> &SamplingBox {
        &self.sampling
    }

    pub fn invariants(&self) -> impl Iterator<Item = (&str, &ScalarField)> {
        self.invariants.iter().map(|(n, f)| (n.as_str(), f))
    }

    pub fn invariant(&self, name: &str) -> Option<&ScalarField> {
        self.invariants
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, f)| f)
    }

    pub fn symmetry(&self, name: &str) -> Option<&TimeDependentVectorField> {
        self.symmetries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, f)| f)
    }

    /// Max |grad C . f| per invariant over `n_samples` seeded box samples.
    pub fn verify_invariants(&self, n_samples: usize, seed: u64) -> Result<Vec<(String, f64)>> {
        if n_samples == 0 {
            return Err(Error::InvalidParams("n_samples must be >= 1".into()));
        }
        let points = self.sampling.sample_many(n_samples, seed);
        let mut out = Vec::with_capacity(self.invariants.len());
        for (name, c) in &self.invariants {
            let mut worst = 0.0_f64;
            for p in &points {
                worst = worst.max(lie_derivative_scalar(&self.flow, c, p)?.abs());
            }
            out.push((name.clone(), worst));
        }
        Ok(out)
    }
}

/// Build a fully wired system; construction runs a conservation self-check
/// at 20 sample points and fails loudly on any wiring or sign mistake.
pub fn make_system(id: SystemId, params: ParameterSet) -> Result<SystemDef> {
    params.validate()?;
    let sys = match id {
        SystemId::OTwoCartesian => o2_cartesian(params),
        SystemId::OTwoPolar => o2_polar(params),
        SystemId::ExampleI => example1(params),
        SystemId::BridgesExample => example2(params),
        SystemId::EulerTop => euler_top(params),
    };
    for (name, residual) in sys.verify_invariants(20, 0x5eed)? {
        if residual > 1e-9 {
            return Err(Error::SelfCheck(format!(
                "invariant {name} of {} has residual {residual:e}",
                sys.id.name()
            )));
        }
    }
    Ok(sys)
}

/// (X1, Y1, X2, Y2) -> (r1, r2, Theta) with Theta = 2 Phi1 - Phi2 wrapped
/// to (-pi, pi].
pub fn cartesian_to_polar(x4: &StatePoint) -> Result<StatePoint> {
    if x4.dim() != 4 {
        return Err(Error::DimensionMismatch { expected: 4, got: x4.dim() });
    }
    let (x1, y1, x2, y2) = (x4.get(0), x4.get(1), x4.get(2), x4.get(3));
    let r1 = x1.hypot(y1);
    let r2 = x2.hypot(y2);
    if r1 < 1e-12 || r2 < 1e-12 {
        return Err(Error::Domain("polar chart is singular at zero radius".into()));
    }
    let theta = wrap_angle(2.0 * y1.atan2(x1) - y2.atan2(x2));
    Ok(StatePoint::of(&[r1, r2, theta]))
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let w = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

fn o2_flow_eval(x: &StatePoint) -> DVector<f64> {
    let (x1, y1, x2, y2) = (x.get(0), x.get(1), x.get(2), x.get(3));
    DVector::from_vec(vec![
        x1 * x2 + y1 * y2,
        x1 * y2 - y1 * x2,
        -x1 * x1 + y1 * y1,
        -2.0 * x1 * y1,
    ])
}

fn o2_flow_jacobian(x: &StatePoint) -> DMatrix<f64> {
    let (x1, y1, x2, y2) = (x.get(0), x.get(1), x.get(2), x.get(3));
    DMatrix::from_row_slice(
        4,
        4,
        &[
            x2, y2, x1, y1, //
            y2, -x2, -y1, x1, //
            -2.0 * x1, 2.0 * y1, 0.0, 0.0, //
            -2.0 * y1, -2.0 * x1, 0.0, 0.0,
        ],
    )
}

fn o2_cartesian(params: ParameterSet) -> SystemDef {
    let flow = VectorField::new(4, o2_flow_eval).with_jacobian(o2_flow_jacobian);

    let c1 = ScalarField::new(4, |x| {
        x.get(0) * x.get(0) + x.get(1) * x.get(1) + x.get(2) * x.get(2) + x.get(3) * x.get(3)
    })
    .with_gradient(|x| 2.0 * x.coords())
    .with_hessian(|_| DMatrix::identity(4, 4) * 2.0);

    let c2 = ScalarField::new(4, |x| {
        let (x1, y1, x2, y2) = (x.get(0), x.get(1), x.get(2), x.get(3));
        2.0 * x1 * y1 * x2 - y2 * (x1 * x1 - y1 * y1)
    })
    .with_gradient(|x| {
        let (x1, y1, x2, y2) = (x.get(0), x.get(1), x.get(2), x.get(3));
        DVector::from_vec(vec![
            2.0 * y1 * x2 - 2.0 * x1 * y2,
            2.0 * x1 * x2 + 2.0 * y1 * y2,
            2.0 * x1 * y1,
            -(x1 * x1 - y1 * y1),
        ])
    })
    .with_hessian(|x| {
        let (x1, y1, x2, y2) = (x.get(0), x.get(1), x.get(2), x.get(3));
        DMatrix::from_row_slice(
            4,
            4,
            &[
                -2.0 * y2, 2.0 * x2, 2.0 * y1, -2.0 * x1, //
                2.0 * x2, 2.0 * y2, 2.0 * x1, 2.0 * y1, //
                2.0 * y1, 2.0 * x1, 0.0, 0.0, //
                -2.0 * x1, 2.0 * y1, 0.0, 0.0,
            ],
        )
    });

    // Phase-rotation symmetry.
    let eta1 = TimeDependentVectorField::new(4, |x, _| {
        DVector::from_vec(vec![-x.get(1), x.get(0), -2.0 * x.get(3), 2.0 * x.get(2)])
    })
    .with_partial_t(|_, _| DVector::zeros(4))
    .with_jacobian(|_, _| {
        DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, -1.0, 0.0, 0.0, //
                1.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, -2.0, //
                0.0, 0.0, 2.0, 0.0,
            ],
        )
    });

    // Scaling symmetry eta = x + t f(x).
    let eta2 = TimeDependentVectorField::new(4, |x, t| x.coords() + o2_flow_eval(x) * t)
        .with_partial_t(|x, _| o2_flow_eval(x))
        .with_jacobian(|x, t| DMatrix::identity(4, 4) + o2_flow_jacobian(x) * t);

    SystemDef {
        id: SystemId::OTwoCartesian,
        dim: 4,
        flow,
        invariants: vec![("C1".into(), c1), ("C2".into(), c2)],
        symmetries: vec![("eta1".into(), eta1), ("eta2".into(), eta2)],
        params,
        sampling: SamplingBox::new(vec![-1.2; 4], vec![1.2; 4]).with_constraint(|p| {
            let c1 = p.coords().norm_squared();
            let (x1, y1, x2, y2) = (p.get(0), p.get(1), p.get(2), p.get(3));
            let c2 = 2.0 * x1 * y1 * x2 - y2 * (x1 * x1 - y1 * y1);
            c1 >= 0.25 && c2.abs() >= 0.05
        }),
    }
}

/// Common 3D body of the polar / example1 family in variables (a, b, phi):
/// da/dt = a b cos(phi), db/dt = s a^2 cos(phi),
/// dphi/dt = -(2 b + s a^2 / b) sin(phi).
fn polar_family_flow(s: f64) -> VectorField {
    VectorField::new(3, move |x| {
        let (a, b, phi) = (x.get(0), x.get(1), x.get(2));
        DVector::from_vec(vec![
            a * b * phi.cos(),
            s * a * a * phi.cos(),
            -(2.0 * b + s * a * a / b) * phi.sin(),
        ])
    })
    .with_jacobian(move |x| {
        let (a, b, phi) = (x.get(0), x.get(1), x.get(2));
        let (sin, cos) = phi.sin_cos();
        DMatrix::from_row_slice(
            3,
            3,
            &[
                b * cos,
                a * cos,
                -a * b * sin,
                2.0 * s * a * cos,
                0.0,
                -s * a * a * sin,
                -2.0 * s * a / b * sin,
                -(2.0 - s * a * a / (b * b)) * sin,
                -(2.0 * b + s * a * a / b) * cos,
            ],
        )
    })
}

/// C2 = a^2 b sin(phi) with closed-form derivatives (shared by the family).
fn polar_family_c2() -> ScalarField {
    ScalarField::new(3, |x| x.get(0) * x.get(0) * x.get(1) * x.get(2).sin())
        .with_gradient(|x| {
            let (a, b, phi) = (x.get(0), x.get(1), x.get(2));
            let (sin, cos) = phi.sin_cos();
            DVector::from_vec(vec![2.0 * a * b * sin, a * a * sin, a * a * b * cos])
        })
        .with_hessian(|x| {
            let (a, b, phi) = (x.get(0), x.get(1), x.get(2));
            let (sin, cos) = phi.sin_cos();
            DMatrix::from_row_slice(
                3,
                3,
                &[
                    2.0 * b * sin,
                    2.0 * a * sin,
                    2.0 * a * b * cos,
                    2.0 * a * sin,
                    0.0,
                    a * a * cos,
                    2.0 * a * b * cos,
                    a * a * cos,
                    -a * a * b * sin,
                ],
            )
        })
}

/// C1 = scale * (a^2 - s b^2), derivatives included.
fn polar_family_c1(s: f64, scale: f64) -> ScalarField {
    ScalarField::new(3, move |x| {
        scale * (x.get(0) * x.get(0) - s * x.get(1) * x.get(1))
    })
    .with_gradient(move |x| {
        DVector::from_vec(vec![2.0 * scale * x.get(0), -2.0 * scale * s * x.get(1), 0.0])
    })
    .with_hessian(move |_| {
        DMatrix::from_diagonal(&DVector::from_vec(vec![2.0 * scale, -2.0 * scale * s, 0.0]))
    })
}

fn o2_polar(params: ParameterSet) -> SystemDef {
    let s = params.sign_branch as f64;
    SystemDef {
        id: SystemId::OTwoPolar,
        dim: 3,
        flow: polar_family_flow(s),
        // Normalized to match the 4D invariants under the polar chart
        // (r1^2 + r2^2 and r1^2 r2 sin Theta for the s = -1 branch).
        invariants: vec![
            ("C1".into(), polar_family_c1(s, 1.0)),
            ("C2".into(), polar_family_c2()),
        ],
        symmetries: vec![],
        params,
        sampling: SamplingBox::new(vec![0.2, 0.2, 0.0], vec![2.0, 2.0, 2.0 * PI]),
    }
}

fn example1(params: ParameterSet) -> SystemDef {
    let s = params.sign_branch as f64;
    SystemDef {
        id: SystemId::ExampleI,
        dim: 3,
        flow: polar_family_flow(s),
        invariants: vec![
            ("C1".into(), polar_family_c1(s, 0.5)),
            ("C2".into(), polar_family_c2()),
        ],
        symmetries: vec![],
        params,
        sampling: SamplingBox::new(vec![0.2, 0.2, 0.0], vec![2.0, 2.0, 2.0 * PI]),
    }
}

fn example2(params: ParameterSet) -> SystemDef {
    let q = params.poly_q.clone();
    let q_flow = q.clone();
    let q_jac = q.clone();
    let q_c2g = q.clone();
    let q_c2h = q.clone();
    let q_c2 = q.clone();

    let flow = VectorField::new(3, move |x| {
        let (x1, x2, x3) = (x.get(0), x.get(1), x.get(2));
        let qv = poly_eval(&q_flow, x1);
        DVector::from_vec(vec![2.0 * x3, 2.0 * qv * x3, x2 + qv * x1])
    })
    .with_jacobian(move |x| {
        let (x1, _, x3) = (x.get(0), x.get(1), x.get(2));
        let qv = poly_eval(&q_jac, x1);
        let qd = poly_deriv(&q_jac, x1);
        DMatrix::from_row_slice(
            3,
            3,
            &[
                0.0, 0.0, 2.0, //
                2.0 * qd * x3, 0.0, 2.0 * qv, //
                qd * x1 + qv, 1.0, 0.0,
            ],
        )
    });

    let c1 = ScalarField::new(3, |x| x.get(2) * x.get(2) - x.get(0) * x.get(1))
        .with_gradient(|x| DVector::from_vec(vec![-x.get(1), -x.get(0), 2.0 * x.get(2)]))
        .with_hessian(|_| {
            DMatrix::from_row_slice(3, 3, &[0.0, -1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 2.0])
        });

    let c2 = ScalarField::new(3, move |x| x.get(1) - poly_integral(&q_c2, x.get(0)))
        .with_gradient(move |x| DVector::from_vec(vec![-poly_eval(&q_c2g, x.get(0)), 1.0, 0.0]))
        .with_hessian(move |x| {
            let mut h = DMatrix::zeros(3, 3);
            h[(0, 0)] = -poly_deriv(&q_c2h, x.get(0));
            h
        });

    SystemDef {
        id: SystemId::BridgesExample,
        dim: 3,
        flow,
        invariants: vec![("C1".into(), c1), ("C2".into(), c2)],
        symmetries: vec![],
        params,
        sampling: SamplingBox::new(vec![0.2; 3], vec![2.0; 3]),
    }
}

fn euler_top(params: ParameterSet) -> SystemDef {
    let [i1, i2, i3] = params.inertia;

    let flow = VectorField::new(3, move |x| {
        let (l1, l2, l3) = (x.get(0), x.get(1), x.get(2));
        DVector::from_vec(vec![
            l2 * l3 * (1.0 / i2 - 1.0 / i3),
            l3 * l1 * (1.0 / i3 - 1.0 / i1),
            l1 * l2 * (1.0 / i1 - 1.0 / i2),
        ])
    })
    .with_jacobian(move |x| {
        let (l1, l2, l3) = (x.get(0), x.get(1), x.get(2));
        DMatrix::from_row_slice(
            3,
            3,
            &[
                0.0,
                l3 * (1.0 / i2 - 1.0 / i3),
                l2 * (1.0 / i2 - 1.0 / i3),
                l3 * (1.0 / i3 - 1.0 / i1),
                0.0,
                l1 * (1.0 / i3 - 1.0 / i1),
                l2 * (1.0 / i1 - 1.0 / i2),
                l1 * (1.0 / i1 - 1.0 / i2),
                0.0,
            ],
        )
    });

    let c1 = ScalarField::new(3, move |x| {
        0.5 * (x.get(0) * x.get(0) / i1 + x.get(1) * x.get(1) / i2 + x.get(2) * x.get(2) / i3)
    })
    .with_gradient(move |x| {
        DVector::from_vec(vec![x.get(0) / i1, x.get(1) / i2, x.get(2) / i3])
    })
    .with_hessian(move |_| {
        DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 / i1, 1.0 / i2, 1.0 / i3]))
    });

    let c2 = ScalarField::new(3, |x| x.coords().norm_squared())
        .with_gradient(|x| 2.0 * x.coords())
        .with_hessian(|_| DMatrix::identity(3, 3) * 2.0);

    SystemDef {
        id: SystemId::EulerTop,
        dim: 3,
        flow,
        invariants: vec![("C1".into(), c1), ("C2".into(), c2)],
        symmetries: vec![],
        params,
        sampling: SamplingBox::new(vec![-1.0; 3], vec![1.0; 3])
            .with_constraint(|p| p.coords().norm() >= 0.05),
    }
}
