//! Critical points via Lagrange multipliers, linearization, eigenvalue
//! classification, Casimir slopes along the critical curve, and the audit
//! of the slope-based stability criterion across alternative structures.
//!
//! The multiplier convention is grad(H) - m grad(Psi) = 0 uniformly; where
//! a registered system's reference form uses the opposite sign, the
//! registry negates the multiplier on the way in and maps slopes back on
//! the way out.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{ScalarField, StatePoint, VectorField};
use crate::poisson::PoissonStructure;
use crate::systems::{SystemDef, SystemId};

/// Residual targets for the Newton solve and the validity checks.
pub const NEWTON_TOL: f64 = 1e-11;
pub const NEWTON_MAX_ITER: usize = 50;
pub const GRADIENT_CONDITION_TOL: f64 = 1e-9;
pub const EQUILIBRIUM_TOL: f64 = 1e-8;

/// Classification thresholds on mu^2.
pub const CLASSIFY_EPS: f64 = 1e-10;

/// A critical point of grad(H) = m grad(Psi), which is an equilibrium of
/// the flow generated by (J, H) with Casimir Psi.
#[derive(Clone, Debug)]
pub struct CriticalPoint {
    pub state: StatePoint,
    pub multiplier: f64,
    pub structure_label: String,
}

impl CriticalPoint {
    /// Construct with explicit validation of the multiplier condition and
    /// the equilibrium condition.
    pub fn validated(
        state: StatePoint,
        multiplier: f64,
        h: &ScalarField,
        psi: &ScalarField,
        flow: &VectorField,
        structure_label: &str,
    ) -> Result<Self> {
        let grad_cond = (h.gradient(&state)? - multiplier * psi.gradient(&state)?).amax();
        if grad_cond > GRADIENT_CONDITION_TOL {
            return Err(Error::OffShell(format!(
                "gradient condition residual {grad_cond:e} exceeds {GRADIENT_CONDITION_TOL:e}"
            )));
        }
        let eq = flow.evaluate(&state).amax();
        if eq > EQUILIBRIUM_TOL {
            return Err(Error::OffShell(format!(
                "flow residual {eq:e} exceeds {EQUILIBRIUM_TOL:e} at the critical point"
            )));
        }
        Ok(Self { state, multiplier, structure_label: structure_label.to_string() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Elliptic,
    Hyperbolic,
    Degenerate,
}

/// Empirical relation between critical-point type and slope sign.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionRelation {
    EllipticIffSlopeNegative,
    EllipticIffSlopePositive,
    Indeterminate,
}

/// Per-multiplier stability data.
#[derive(Clone, Debug)]
pub struct StabilityReport {
    /// Multiplier in the reference (display) convention.
    pub multiplier: f64,
    pub critical_point: CriticalPoint,
    pub linearization: DMatrix<f64>,
    pub eigenvalues: [Complex64; 3],
    pub mu_squared: f64,
    /// d Psi(P_c) / d multiplier, in the display convention.
    pub casimir_slope: f64,
    pub hamiltonian_slope: f64,
    pub classification: Classification,
    pub flow_residual: f64,
}

/// Grid sweep result with the empirical criterion verdict.
#[derive(Clone, Debug)]
pub struct BridgesAudit {
    pub system: SystemId,
    pub structure: String,
    pub reports: Vec<StabilityReport>,
    pub relation: CriterionRelation,
}

/// Newton iteration on grad(H)(x) - m grad(Psi)(x) = 0 at fixed m.
///
/// Converges to residual < 1e-11 within 50 iterations or reports failure;
/// a simple step-halving guard keeps iterates from overshooting.
pub fn solve_critical(
    h: &ScalarField,
    psi: &ScalarField,
    multiplier: f64,
    x0: &StatePoint,
) -> Result<CriticalPoint> {
    let n = x0.dim();
    let g = |x: &StatePoint| -> Result<DVector<f64>> {
        Ok(h.gradient(x)? - multiplier * psi.gradient(x)?)
    };
    let _ = n;
    let mut x = x0.coords().clone();
    let mut residual = f64::INFINITY;
    for _ in 0..NEWTON_MAX_ITER {
        let xp = StatePoint::from_vector(x.clone());
        let gv = g(&xp)?;
        residual = gv.amax();
        if residual < NEWTON_TOL {
            return CriticalPoint::validated_loose(xp, multiplier);
        }
        let jac = h.hessian(&xp)? - multiplier * psi.hessian(&xp)?;
        let svd = jac.clone().svd(false, false);
        let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
        if smin <= 0.0 || smax / smin > 1e14 {
            return Err(Error::SingularNewton {
                condition: if smin > 0.0 { smax / smin } else { f64::INFINITY },
            });
        }
        let delta = jac
            .lu()
            .solve(&(-&gv))
            .ok_or(Error::SingularNewton { condition: smax / smin })?;
        // Backtracking on the residual norm keeps the iteration from
        // overshooting into degenerate regions.
        let norm_old = gv.norm();
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..25 {
            let candidate = &x + step * &delta;
            if candidate.iter().all(|v| v.is_finite()) {
                let r_new = g(&StatePoint::from_vector(candidate.clone()))?.norm();
                if r_new < (1.0 - 1e-4 * step) * norm_old {
                    x = candidate;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence { residual, iterations: NEWTON_MAX_ITER });
        }
    }
    Err(Error::NonConvergence { residual, iterations: NEWTON_MAX_ITER })
}

/// Continuation along the critical curve: solve at `m_to` starting from a
/// converged point at `m_from`, bisecting the multiplier gap on failure.
fn continue_critical(
    h: &ScalarField,
    psi: &ScalarField,
    m_from: f64,
    from: &StatePoint,
    m_to: f64,
    depth: usize,
) -> Result<CriticalPoint> {
    match solve_critical(h, psi, m_to, from) {
        Ok(cp) => Ok(cp),
        Err(e) if depth == 0 => Err(e),
        Err(_) => {
            let mid = 0.5 * (m_from + m_to);
            let half = continue_critical(h, psi, m_from, from, mid, depth - 1)?;
            continue_critical(h, psi, mid, &half.state, m_to, depth - 1)
        }
    }
}

impl CriticalPoint {
    fn validated_loose(state: StatePoint, multiplier: f64) -> Result<Self> {
        Ok(Self { state, multiplier, structure_label: String::new() })
    }
}

/// Jacobian of the flow at x. Meaningful as a stability linearization only
/// when x is an equilibrium; callers should check `flow.evaluate(x)`.
pub fn linearize_flow(f: &VectorField, x: &StatePoint) -> Result<DMatrix<f64>> {
    f.jacobian(x)
}

/// Linearization through the Poisson structure: J(P_c) (D2H - m D2Psi).
///
/// At a critical point this equals the flow Jacobian: the structure's
/// derivative term drops because grad(H) - m grad(Psi) = 0 there and
/// J grad(Psi) vanishes identically.
pub fn linearize_poisson(
    p: &PoissonStructure,
    h: &ScalarField,
    psi: &ScalarField,
    cp: &CriticalPoint,
) -> Result<DMatrix<f64>> {
    if p.dim() != 3 {
        return Err(Error::DimensionMismatch { expected: 3, got: p.dim() });
    }
    let j = p.matrix(&cp.state)?;
    let m = h.hessian(&cp.state)? - cp.multiplier * psi.hessian(&cp.state)?;
    Ok(j * m)
}

/// Eigenvalues of a real 3x3 matrix by the closed-form (trigonometric /
/// Cardano) solution of the characteristic cubic, sorted by (|Im|, Re, Im).
pub fn eigenvalues_3x3(a: &DMatrix<f64>) -> Result<[Complex64; 3]> {
    if a.nrows() != 3 || a.ncols() != 3 {
        return Err(Error::DimensionMismatch { expected: 3, got: a.nrows().max(a.ncols()) });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "eigenvalues_3x3 input".into() });
    }
    let tr = a[(0, 0)] + a[(1, 1)] + a[(2, 2)];
    let m2 = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)]
        + a[(0, 0)] * a[(2, 2)] - a[(0, 2)] * a[(2, 0)]
        + a[(1, 1)] * a[(2, 2)] - a[(1, 2)] * a[(2, 1)];
    let det = a[(0, 0)] * (a[(1, 1)] * a[(2, 2)] - a[(1, 2)] * a[(2, 1)])
        - a[(0, 1)] * (a[(1, 0)] * a[(2, 2)] - a[(1, 2)] * a[(2, 0)])
        + a[(0, 2)] * (a[(1, 0)] * a[(2, 1)] - a[(1, 1)] * a[(2, 0)]);

    // Depressed cubic t^3 + p t + q with lambda = t + tr/3.
    let s = tr / 3.0;
    let p = m2 - tr * tr / 3.0;
    let q = -2.0 * tr * tr * tr / 27.0 + tr * m2 / 3.0 - det;

    let scale = p.abs().max(q.abs()).max(1.0);
    let mut roots = if p.abs() < 1e-14 * scale && q.abs() < 1e-14 * scale {
        [Complex64::new(s, 0.0); 3]
    } else {
        let disc = -4.0 * p * p * p - 27.0 * q * q;
        if disc >= 0.0 {
            // Three real roots (p < 0 here).
            let r = 2.0 * (-p / 3.0).sqrt();
            let arg = (3.0 * q / (2.0 * p) * (-3.0 / p).sqrt()).clamp(-1.0, 1.0);
            let theta = arg.acos() / 3.0;
            let mut out = [Complex64::new(0.0, 0.0); 3];
            for (k, slot) in out.iter_mut().enumerate() {
                let t = r * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos();
                *slot = Complex64::new(t + s, 0.0);
            }
            out
        } else {
            // One real root and a conjugate pair.
            let inner = (q * q / 4.0 + p * p * p / 27.0).sqrt();
            let u = (-q / 2.0 + inner).cbrt();
            let v = if u.abs() > 1e-300 { -p / (3.0 * u) } else { (-q / 2.0 - inner).cbrt() };
            let real = u + v;
            let re_pair = -real / 2.0;
            let im_pair = (3.0_f64).sqrt() / 2.0 * (u - v);
            [
                Complex64::new(real + s, 0.0),
                Complex64::new(re_pair + s, im_pair),
                Complex64::new(re_pair + s, -im_pair),
            ]
        }
    };

    roots.sort_by(|a, b| {
        (a.im.abs(), a.re, a.im)
            .partial_cmp(&(b.im.abs(), b.re, b.im))
            .expect("finite eigenvalues")
    });
    Ok(roots)
}

/// Square of the nonzero eigenvalue pair of a linearization with one zero
/// eigenvalue: the negated product of the two largest-modulus eigenvalues
/// (real for both the elliptic and hyperbolic cases).
pub fn mu_squared(eigenvalues: &[Complex64; 3]) -> f64 {
    let mut idx = [0, 1, 2];
    idx.sort_by(|&i, &j| {
        eigenvalues[i]
            .norm()
            .partial_cmp(&eigenvalues[j].norm())
            .expect("finite moduli")
    });
    -(eigenvalues[idx[1]] * eigenvalues[idx[2]]).re
}

pub fn classify(mu2: f64) -> Classification {
    if mu2 < -CLASSIFY_EPS {
        Classification::Elliptic
    } else if mu2 > CLASSIFY_EPS {
        Classification::Hyperbolic
    } else {
        Classification::Degenerate
    }
}

/// Central-difference slopes (d Psi(P_c)/dm, d H(P_c)/dm) along the critical
/// curve, each curve point found by `solve_critical` warm-started from `x0`.
pub fn casimir_slope(
    h: &ScalarField,
    psi: &ScalarField,
    multiplier: f64,
    delta: f64,
    x0: &StatePoint,
) -> Result<(f64, f64)> {
    if delta <= 0.0 {
        return Err(Error::InvalidParams("delta must be positive".into()));
    }
    let center = solve_critical(h, psi, multiplier, x0)?;
    let plus = solve_critical(h, psi, multiplier + delta, &center.state)?;
    let minus = solve_critical(h, psi, multiplier - delta, &center.state)?;
    let dpsi = (psi.evaluate(&plus.state) - psi.evaluate(&minus.state)) / (2.0 * delta);
    let dh = (h.evaluate(&plus.state) - h.evaluate(&minus.state)) / (2.0 * delta);
    Ok((dpsi, dh))
}

/// Registry data for the slope audit: the sign mapping the display
/// multiplier to the internal minus convention, and a coarse solver anchor.
pub struct AuditSetup {
    pub multiplier_sign: f64,
    pub anchor: StatePoint,
    /// Display multiplier the anchor is calibrated for; the sweep marches
    /// outward from the grid point closest to it.
    pub anchor_multiplier: f64,
}

pub fn audit_setup(sys: &SystemDef, structure: &str) -> Result<AuditSetup> {
    match (sys.id(), structure) {
        (SystemId::ExampleI, "pois1") | (SystemId::ExampleI, "pois2") => Ok(AuditSetup {
            multiplier_sign: 1.0,
            anchor: StatePoint::of(&[0.8, 0.4, 1.5]),
            anchor_multiplier: 1.0,
        }),
        // The reference form of this system's multiplier condition carries a
        // plus sign; internally m = -lambda.
        (SystemId::BridgesExample, "pois12") => Ok(AuditSetup {
            multiplier_sign: -1.0,
            anchor: StatePoint::of(&[1.0, 1.0, 0.5]),
            anchor_multiplier: 1.0,
        }),
        (SystemId::BridgesExample, "pois22") => Ok(AuditSetup {
            multiplier_sign: -1.0,
            anchor: StatePoint::of(&[-1.0, 1.0, 0.2]),
            anchor_multiplier: 1.0,
        }),
        _ => Err(Error::UnknownStructure(structure.to_string(), sys.id().name().to_string())),
    }
}

/// Slope step: delta = 1e-4 * max(1, |m|).
pub fn slope_delta(multiplier: f64) -> f64 {
    1e-4 * multiplier.abs().max(1.0)
}

/// Sweep the multiplier grid for one (system, structure) pair and record
/// the empirical relation between critical-point type and slope sign.
///
/// Grid points are independent; the sweep runs them in parallel after a
/// serial warm-up pass that chains solver anchors along the sorted grid.
pub fn bridges_report(
    sys: &SystemDef,
    structure: &PoissonStructure,
    h: &ScalarField,
    psi: &ScalarField,
    multiplier_grid: &[f64],
) -> Result<BridgesAudit> {
    if multiplier_grid.is_empty() {
        return Err(Error::InvalidParams("empty multiplier grid".into()));
    }
    let setup = audit_setup(sys, structure.label())?;
    let mut grid: Vec<f64> = multiplier_grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite multipliers"));

    // Serial continuation: start at the grid point nearest the anchor's
    // calibration multiplier and march outward in both directions.
    let start = grid
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            (*a - setup.anchor_multiplier)
                .abs()
                .partial_cmp(&(*b - setup.anchor_multiplier).abs())
                .expect("finite multipliers")
        })
        .map(|(i, _)| i)
        .expect("non-empty grid");
    let mut anchors: Vec<Option<CriticalPoint>> = vec![None; grid.len()];
    let first = solve_critical(h, psi, setup.multiplier_sign * grid[start], &setup.anchor)?;
    anchors[start] = Some(first);
    for i in (start + 1)..grid.len() {
        let prev = anchors[i - 1].as_ref().expect("filled in order");
        let cp = continue_critical(
            h,
            psi,
            setup.multiplier_sign * grid[i - 1],
            &prev.state.clone(),
            setup.multiplier_sign * grid[i],
            12,
        )?;
        anchors[i] = Some(cp);
    }
    for i in (0..start).rev() {
        let prev = anchors[i + 1].as_ref().expect("filled in order");
        let cp = continue_critical(
            h,
            psi,
            setup.multiplier_sign * grid[i + 1],
            &prev.state.clone(),
            setup.multiplier_sign * grid[i],
            12,
        )?;
        anchors[i] = Some(cp);
    }
    let anchors: Vec<CriticalPoint> = anchors.into_iter().map(|c| c.expect("all filled")).collect();

    let reports: Result<Vec<StabilityReport>> = grid
        .par_iter()
        .zip(anchors.par_iter())
        .map(|(&m_disp, cp0)| {
            let m_int = setup.multiplier_sign * m_disp;
            let mut cp = cp0.clone();
            cp.structure_label = structure.label().to_string();
            let lin = linearize_flow(sys.flow(), &cp.state)?;
            let eigenvalues = eigenvalues_3x3(&lin)?;
            let mu2 = mu_squared(&eigenvalues);
            let (dpsi_dm, dh_dm) =
                casimir_slope(h, psi, m_int, slope_delta(m_int), &cp.state)?;
            Ok(StabilityReport {
                multiplier: m_disp,
                flow_residual: sys.flow().evaluate(&cp.state).amax(),
                critical_point: cp,
                linearization: lin,
                eigenvalues,
                mu_squared: mu2,
                casimir_slope: setup.multiplier_sign * dpsi_dm,
                hamiltonian_slope: setup.multiplier_sign * dh_dm,
                classification: classify(mu2),
            })
        })
        .collect();
    let reports = reports?;

    let mut relation: Option<CriterionRelation> = None;
    for r in &reports {
        let point_relation = match (r.classification, r.casimir_slope) {
            (Classification::Elliptic, s) if s < 0.0 => CriterionRelation::EllipticIffSlopeNegative,
            (Classification::Hyperbolic, s) if s > 0.0 => CriterionRelation::EllipticIffSlopeNegative,
            (Classification::Elliptic, s) if s > 0.0 => CriterionRelation::EllipticIffSlopePositive,
            (Classification::Hyperbolic, s) if s < 0.0 => CriterionRelation::EllipticIffSlopePositive,
            _ => CriterionRelation::Indeterminate,
        };
        relation = Some(match relation {
            None => point_relation,
            Some(prev) if prev == point_relation => prev,
            Some(_) => CriterionRelation::Indeterminate,
        });
    }

    Ok(BridgesAudit {
        system: sys.id(),
        structure: structure.label().to_string(),
        reports,
        relation: relation.unwrap_or(CriterionRelation::Indeterminate),
    })
}

/// A relative equilibrium of the rigid-body top: angular momentum along a
/// principal axis. The multiplier is 1/(2 I_axis) for the (C1, C2) split
/// and I_axis for the (C2/2, C1) split.
pub fn euler_relative_equilibrium(
    sys: &SystemDef,
    structure_label: &str,
    axis: usize,
    magnitude: f64,
) -> Result<CriticalPoint> {
    if sys.id() != SystemId::EulerTop || axis > 2 {
        return Err(Error::InvalidParams("euler relative equilibrium needs the top and axis 0..2".into()));
    }
    let inertia = sys.params().inertia[axis];
    let multiplier = match structure_label {
        "euler1" => 1.0 / (2.0 * inertia),
        "euler2" => inertia,
        other => {
            return Err(Error::UnknownStructure(other.to_string(), "euler".to_string()));
        }
    };
    let mut coords = [0.0; 3];
    coords[axis] = magnitude;
    let state = StatePoint::of(&coords);
    let (h, psi) = match structure_label {
        "euler1" => (
            sys.invariant("C1").expect("C1").clone(),
            sys.invariant("C2").expect("C2").clone(),
        ),
        _ => (
            sys.invariant("C2").expect("C2").scaled(0.5),
            sys.invariant("C1").expect("C1").clone(),
        ),
    };
    CriticalPoint::validated(state, multiplier, &h, &psi, sys.flow(), structure_label)
}
