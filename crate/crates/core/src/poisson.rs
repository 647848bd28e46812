//! Construction and numerical verification of Poisson structures.
//!
//! Two constructions are provided: the rank-2 ansatz built from a flow and
//! a symmetry vector normalized by the deformation of the Hamiltonian, and
//! the 3D cross-product family J^{ab} = sign * mu(x) * eps^{abc} d(psi)/dx^c
//! whose psi is a Casimir by antisymmetry.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fields::{
    default_fd_step, ScalarField, StatePoint, TimeDependentVectorField, VectorField,
};
use crate::systems::{SystemDef, SystemId};

/// |K| below this threshold makes the rank-2 ansatz degenerate.
pub const DEFORMATION_THRESHOLD: f64 = 1e-8;

/// Threshold on singular values (relative to the largest) for numerical rank.
pub const RANK_THRESHOLD: f64 = 1e-10;

type MatrixFn = Arc<dyn Fn(&StatePoint, f64) -> Result<DMatrix<f64>> + Send + Sync>;
type PartialsFn = Arc<dyn Fn(&StatePoint, f64) -> Result<Vec<DMatrix<f64>>> + Send + Sync>;

/// A point-dependent antisymmetric matrix field with optional Hamiltonian
/// and Casimir attachments. Antisymmetry is exact by construction: entries
/// are assembled from the strict upper triangle.
#[derive(Clone)]
pub struct PoissonStructure {
    label: String,
    dim: usize,
    matrix: MatrixFn,
    partials: Option<PartialsFn>,
    hamiltonian: Option<ScalarField>,
    casimirs: Vec<ScalarField>,
}

/// Mirror the strict upper triangle into an exactly antisymmetric matrix.
fn antisymmetric_from_upper(n: usize, upper: &dyn Fn(usize, usize) -> f64) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in (a + 1)..n {
            let v = upper(a, b);
            j[(a, b)] = v;
            j[(b, a)] = -v;
        }
    }
    j
}

impl PoissonStructure {
    /// Wrap an arbitrary antisymmetric matrix function (no closed-form
    /// partial derivatives; the Jacobi check falls back to differencing).
    pub fn from_matrix_fn<F>(label: &str, dim: usize, f: F) -> Self
    where
        F: Fn(&StatePoint, f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            label: label.to_string(),
            dim,
            matrix: Arc::new(move |x, t| Ok(f(x, t))),
            partials: None,
            hamiltonian: None,
            casimirs: Vec::new(),
        }
    }

    pub fn with_hamiltonian(mut self, h: ScalarField) -> Self {
        self.hamiltonian = Some(h);
        self
    }

    pub fn with_casimir(mut self, c: ScalarField) -> Self {
        self.casimirs.push(c);
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hamiltonian(&self) -> Option<&ScalarField> {
        self.hamiltonian.as_ref()
    }

    pub fn casimirs(&self) -> &[ScalarField] {
        &self.casimirs
    }

    /// J(x, t).
    pub fn matrix_at(&self, x: &StatePoint, t: f64) -> Result<DMatrix<f64>> {
        let j = (self.matrix)(x, t)?;
        debug_assert!((&j + j.transpose()).amax() == 0.0, "antisymmetry violated");
        Ok(j)
    }

    /// J(x, 0) for time-independent use.
    pub fn matrix(&self, x: &StatePoint) -> Result<DMatrix<f64>> {
        self.matrix_at(x, 0.0)
    }

    /// dJ/dx_d for d = 0..N-1: closed form when registered, otherwise
    /// Richardson-extrapolated central differences entry by entry.
    pub fn matrix_partials(&self, x: &StatePoint, t: f64) -> Result<Vec<DMatrix<f64>>> {
        if let Some(p) = &self.partials {
            return p(x, t);
        }
        let n = self.dim;
        let h0 = default_fd_step();
        let mut out = Vec::with_capacity(n);
        for d in 0..n {
            let hd = h0 * x.get(d).abs().max(1.0);
            let central = |step: f64| -> Result<DMatrix<f64>> {
                let mut cp = x.coords().clone();
                cp[d] += step;
                let jp = (self.matrix)(&StatePoint::from_vector(cp.clone()), t)?;
                cp[d] -= 2.0 * step;
                let jm = (self.matrix)(&StatePoint::from_vector(cp), t)?;
                Ok((jp - jm) / (2.0 * step))
            };
            let d_h = central(hd)?;
            let d_h2 = central(hd / 2.0)?;
            out.push((d_h2 * 4.0 - d_h) / 3.0);
        }
        Ok(out)
    }
}

/// Rank-2 ansatz J = (f eta^T - eta f^T) / K with K = grad(H) . eta.
///
/// Requires L_f H = 0 on the domain of interest; then J grad(H) = f wherever
/// K is nonvanishing. Evaluation fails where |K| < `DEFORMATION_THRESHOLD`.
pub fn from_flow_symmetry(
    label: &str,
    f: &VectorField,
    eta: &TimeDependentVectorField,
    h: &ScalarField,
) -> Result<PoissonStructure> {
    let n = f.dim();
    if eta.dim() != n || h.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: eta.dim().max(h.dim()) });
    }

    let (fm, em, hm) = (f.clone(), eta.clone(), h.clone());
    let matrix = move |x: &StatePoint, t: f64| -> Result<DMatrix<f64>> {
        let fv = fm.evaluate(x);
        let ev = em.evaluate(x, t);
        let k = hm.gradient(x)?.dot(&ev);
        if k.abs() < DEFORMATION_THRESHOLD {
            return Err(Error::DegenerateDeformation { value: k, threshold: DEFORMATION_THRESHOLD });
        }
        Ok(antisymmetric_from_upper(n, &|a, b| {
            (fv[a] * ev[b] - fv[b] * ev[a]) / k
        }))
    };

    let (fp, ep, hp) = (f.clone(), eta.clone(), h.clone());
    let partials = move |x: &StatePoint, t: f64| -> Result<Vec<DMatrix<f64>>> {
        let fv = fp.evaluate(x);
        let ev = ep.evaluate(x, t);
        let jf = fp.jacobian(x)?;
        let je = ep.at_time(t).jacobian(x)?;
        let gh = hp.gradient(x)?;
        let hh = hp.hessian(x)?;
        let k = gh.dot(&ev);
        if k.abs() < DEFORMATION_THRESHOLD {
            return Err(Error::DegenerateDeformation { value: k, threshold: DEFORMATION_THRESHOLD });
        }
        let grad_k = &hh * &ev + je.transpose() * &gh;
        let j = antisymmetric_from_upper(n, &|a, b| (fv[a] * ev[b] - fv[b] * ev[a]) / k);
        let mut out = Vec::with_capacity(n);
        for d in 0..n {
            let fd = jf.column(d);
            let ed = je.column(d);
            out.push(antisymmetric_from_upper(n, &|a, b| {
                (fd[a] * ev[b] + fv[a] * ed[b] - fd[b] * ev[a] - fv[b] * ed[a]) / k
                    - j[(a, b)] * grad_k[d] / k
            }));
        }
        Ok(out)
    };

    Ok(PoissonStructure {
        label: label.to_string(),
        dim: n,
        matrix: Arc::new(matrix),
        partials: Some(Arc::new(partials)),
        hamiltonian: Some(h.clone()),
        casimirs: Vec::new(),
    })
}

/// 3D cross-product family J^{ab} = sign * mu(x) * eps^{abc} d(psi)/dx^c.
///
/// psi is a Casimir of the result identically; the Jacobi identity holds for
/// any smooth mu because mu grad(psi) has no twist along itself.
pub fn from_casimir_3d(
    label: &str,
    psi: &ScalarField,
    mu: &ScalarField,
    sign: f64,
) -> Result<PoissonStructure> {
    if psi.dim() != 3 || mu.dim() != 3 {
        return Err(Error::DimensionMismatch { expected: 3, got: psi.dim().max(mu.dim()) });
    }
    if sign != 1.0 && sign != -1.0 {
        return Err(Error::InvalidParams(format!("sign must be +1 or -1, got {sign}")));
    }

    let (pm, mm) = (psi.clone(), mu.clone());
    let matrix = move |x: &StatePoint, _t: f64| -> Result<DMatrix<f64>> {
        let g = pm.gradient(x)?;
        let m = mm.evaluate(x);
        // eps^{12c} g_c = g_3, eps^{13c} g_c = -g_2, eps^{23c} g_c = g_1
        Ok(antisymmetric_from_upper(3, &|a, b| {
            let v = match (a, b) {
                (0, 1) => g[2],
                (0, 2) => -g[1],
                (1, 2) => g[0],
                _ => unreachable!(),
            };
            sign * m * v
        }))
    };

    let (pp, mp) = (psi.clone(), mu.clone());
    let partials = move |x: &StatePoint, _t: f64| -> Result<Vec<DMatrix<f64>>> {
        let g = pp.gradient(x)?;
        let hess = pp.hessian(x)?;
        let m = mp.evaluate(x);
        let gm = mp.gradient(x)?;
        let mut out = Vec::with_capacity(3);
        for d in 0..3 {
            out.push(antisymmetric_from_upper(3, &|a, b| {
                let (v, dv) = match (a, b) {
                    (0, 1) => (g[2], hess[(2, d)]),
                    (0, 2) => (-g[1], -hess[(1, d)]),
                    (1, 2) => (g[0], hess[(0, d)]),
                    _ => unreachable!(),
                };
                sign * (gm[d] * v + m * dv)
            }));
        }
        Ok(out)
    };

    Ok(PoissonStructure {
        label: label.to_string(),
        dim: 3,
        matrix: Arc::new(matrix),
        partials: Some(Arc::new(partials)),
        hamiltonian: None,
        casimirs: vec![psi.clone()],
    })
}

/// Poisson bracket {F, G}(x) = grad(F) . J(x, t) . grad(G).
pub fn bracket_at(
    p: &PoissonStructure,
    f: &ScalarField,
    g: &ScalarField,
    x: &StatePoint,
    t: f64,
) -> Result<f64> {
    if f.dim() != p.dim() || g.dim() != p.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), got: f.dim().max(g.dim()) });
    }
    let j = p.matrix_at(x, t)?;
    Ok(f.gradient(x)?.dot(&(&j * g.gradient(x)?)))
}

/// Bracket at t = 0.
pub fn bracket(p: &PoissonStructure, f: &ScalarField, g: &ScalarField, x: &StatePoint) -> Result<f64> {
    bracket_at(p, f, g, x, 0.0)
}

/// Max over index triples of the cyclic Jacobi sum
/// |J^{ad} d_d J^{bc} + J^{bd} d_d J^{ca} + J^{cd} d_d J^{ab}|.
pub fn jacobi_residual_at(p: &PoissonStructure, x: &StatePoint, t: f64) -> Result<f64> {
    let n = p.dim();
    let j = p.matrix_at(x, t)?;
    let dj = p.matrix_partials(x, t)?;
    let mut worst = 0.0_f64;
    for a in 0..n {
        for b in (a + 1)..n {
            for c in (b + 1)..n {
                let mut sum = 0.0;
                for d in 0..n {
                    sum += j[(a, d)] * dj[d][(b, c)]
                        + j[(b, d)] * dj[d][(c, a)]
                        + j[(c, d)] * dj[d][(a, b)];
                }
                worst = worst.max(sum.abs());
            }
        }
    }
    Ok(worst)
}

pub fn jacobi_residual(p: &PoissonStructure, x: &StatePoint) -> Result<f64> {
    jacobi_residual_at(p, x, 0.0)
}

/// Max-norm of J grad(H) - f at x.
pub fn hamilton_residual_at(
    p: &PoissonStructure,
    h: &ScalarField,
    f: &VectorField,
    x: &StatePoint,
    t: f64,
) -> Result<f64> {
    let j = p.matrix_at(x, t)?;
    let r = &j * h.gradient(x)? - f.evaluate(x);
    Ok(r.amax())
}

pub fn hamilton_residual(
    p: &PoissonStructure,
    h: &ScalarField,
    f: &VectorField,
    x: &StatePoint,
) -> Result<f64> {
    hamilton_residual_at(p, h, f, x, 0.0)
}

/// Max-norm of J grad(psi) over the registered Casimirs.
pub fn casimir_residual_at(p: &PoissonStructure, x: &StatePoint, t: f64) -> Result<f64> {
    let j = p.matrix_at(x, t)?;
    let mut worst = 0.0_f64;
    for c in p.casimirs() {
        worst = worst.max((&j * c.gradient(x)?).amax());
    }
    Ok(worst)
}

/// Numerical rank of J(x, t): singular values above RANK_THRESHOLD * largest.
pub fn rank_at(p: &PoissonStructure, x: &StatePoint, t: f64) -> Result<usize> {
    let j = p.matrix_at(x, t)?;
    let sv = j.svd(false, false).singular_values;
    let largest = sv.iter().cloned().fold(0.0, f64::max);
    Ok(sv.iter().filter(|&&s| s > RANK_THRESHOLD * largest).count())
}

/// Structure labels registered for a system.
pub fn registered_structures(id: SystemId) -> &'static [&'static str] {
    match id {
        SystemId::OTwoCartesian => &["ansatz_c1", "ansatz_c2"],
        SystemId::OTwoPolar => &[],
        SystemId::ExampleI => &["pois1", "pois2"],
        SystemId::BridgesExample => &["pois12", "pois22"],
        SystemId::EulerTop => &["euler1", "euler2"],
    }
}

/// Fixed times at which a time-dependent structure is verified.
pub fn verification_times(label: &str) -> &'static [f64] {
    match label {
        "ansatz_c1" | "ansatz_c2" => &[0.0, 0.5, 1.0],
        _ => &[0.0],
    }
}

fn inverse_x1x2_weight() -> ScalarField {
    ScalarField::new(3, |x| 1.0 / (x.get(0) * x.get(1))).with_gradient(|x| {
        let (a, b) = (x.get(0), x.get(1));
        DVector::from_vec(vec![-1.0 / (a * a * b), -1.0 / (a * b * b), 0.0])
    })
}

/// Casimir of the rank-2 ansatz structures: C2^2 / C1^3 has vanishing
/// deformation along the scaling symmetry (weights 2 and 3 cancel).
fn ansatz_casimir(sys: &SystemDef) -> ScalarField {
    let c1 = sys.invariant("C1").expect("C1").clone();
    let c2 = sys.invariant("C2").expect("C2").clone();
    let (c1g, c2g) = (c1.clone(), c2.clone());
    ScalarField::new(4, move |x| {
        let a = c1.evaluate(x);
        let b = c2.evaluate(x);
        b * b / (a * a * a)
    })
    .with_gradient(move |x| {
        let a = c1g.evaluate(x);
        let b = c2g.evaluate(x);
        let ga = c1g.gradient(x).expect("closed gradient");
        let gb = c2g.gradient(x).expect("closed gradient");
        gb * (2.0 * b / (a * a * a)) - ga * (3.0 * b * b / (a * a * a * a))
    })
}

/// Build a registered Poisson structure for the given system.
///
/// The stored sign of each cross-product structure is the one that zeroes
/// the Hamilton residual for the registered Hamiltonian; where that differs
/// from commonly quoted forms, the discrepancy is listed by the errata
/// report.
pub fn make_structure(sys: &SystemDef, label: &str) -> Result<PoissonStructure> {
    let missing = || Error::UnknownStructure(label.to_string(), sys.id().name().to_string());
    let c1 = sys.invariant("C1").ok_or_else(missing)?.clone();
    let c2 = sys.invariant("C2").ok_or_else(missing)?.clone();
    match (sys.id(), label) {
        (SystemId::ExampleI, "pois1") => {
            let p = from_casimir_3d(label, &c2, &inverse_x1x2_weight(), 1.0)?;
            Ok(p.with_hamiltonian(c1))
        }
        (SystemId::ExampleI, "pois2") => {
            let sign = sys.params().sign_branch as f64;
            let p = from_casimir_3d(label, &c1, &inverse_x1x2_weight(), sign)?;
            Ok(p.with_hamiltonian(c2))
        }
        (SystemId::BridgesExample, "pois12") => {
            let p = from_casimir_3d(label, &c2, &ScalarField::constant(3, 1.0), -1.0)?;
            Ok(p.with_hamiltonian(c1))
        }
        (SystemId::BridgesExample, "pois22") => {
            let p = from_casimir_3d(label, &c1, &ScalarField::constant(3, 1.0), 1.0)?;
            Ok(p.with_hamiltonian(c2))
        }
        (SystemId::EulerTop, "euler1") => {
            let p = from_casimir_3d(label, &c2, &ScalarField::constant(3, 0.5), 1.0)?;
            Ok(p.with_hamiltonian(c1))
        }
        (SystemId::EulerTop, "euler2") => {
            let p = from_casimir_3d(label, &c1, &ScalarField::constant(3, 1.0), -1.0)?;
            Ok(p.with_hamiltonian(c2.scaled(0.5)))
        }
        (SystemId::OTwoCartesian, "ansatz_c1") => {
            let eta = sys.symmetry("eta2").ok_or_else(missing)?;
            let p = from_flow_symmetry(label, sys.flow(), eta, &c1)?;
            Ok(p.with_casimir(ansatz_casimir(sys)))
        }
        (SystemId::OTwoCartesian, "ansatz_c2") => {
            let eta = sys.symmetry("eta2").ok_or_else(missing)?;
            let p = from_flow_symmetry(label, sys.flow(), eta, &c2)?;
            Ok(p.with_casimir(ansatz_casimir(sys)))
        }
        _ => Err(missing()),
    }
}
