//! Reference trajectory generation: embedded Runge-Kutta 5(4) pair
//! (Dormand-Prince coefficients, FSAL) with proportional-integral step
//! control, quartic dense output, and invariant-drift auditing.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::fields::{ScalarField, StatePoint, VectorField};

const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

// PI controller constants (beta stabilization as in the classic dopri5).
const BETA: f64 = 0.04;
const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

/// Integrator settings.
#[derive(Clone, Debug)]
pub struct IntegratorConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    pub dense_output: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            max_step: f64::INFINITY,
            dense_output: false,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tols(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol, ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.rtol <= 0.0 || self.atol <= 0.0 {
            return Err(Error::InvalidParams("rtol and atol must be positive".into()));
        }
        Ok(())
    }
}

/// Dense-output coefficients for one accepted step.
#[derive(Clone, Debug)]
pub(crate) struct DenseSegment {
    t0: f64,
    h: f64,
    cont: [DVector<f64>; 5],
}

impl DenseSegment {
    // Quartic polynomial in theta matching value and slope at both step ends.
    fn eval(&self, t: f64) -> DVector<f64> {
        let theta = (t - self.t0) / self.h;
        let theta1 = 1.0 - theta;
        &self.cont[0]
            + theta
                * (&self.cont[1]
                    + theta1 * (&self.cont[2] + theta * (&self.cont[3] + theta1 * &self.cont[4])))
    }

    fn covers(&self, t: f64, forward: bool) -> bool {
        let end = self.t0 + self.h;
        let eps = 1e-12 * (1.0 + end.abs());
        if forward {
            t <= end + eps
        } else {
            t >= end - eps
        }
    }
}

/// Time grid, states, and per-invariant drift series |C(x(t)) - C(x(0))|.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StatePoint>,
    pub invariant_names: Vec<String>,
    /// drifts[i][k] = |C_i(x(t_k)) - C_i(x(t_0))|
    pub drifts: Vec<Vec<f64>>,
    pub(crate) dense: Option<Vec<DenseSegment>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> &StatePoint {
        self.states.last().expect("non-empty trajectory")
    }

    pub fn max_drift(&self, invariant: usize) -> f64 {
        self.drifts[invariant].iter().cloned().fold(0.0, f64::max)
    }

    pub fn has_dense_output(&self) -> bool {
        self.dense.is_some()
    }

    /// Interpolated state at time t (requires dense output; t within span).
    pub fn state_at(&self, t: f64) -> Result<StatePoint> {
        let dense = self
            .dense
            .as_ref()
            .ok_or_else(|| Error::InvalidParams("trajectory has no dense output".into()))?;
        let (t_start, t_end) = (self.times[0], *self.times.last().unwrap());
        let (lo, hi) = (t_start.min(t_end), t_start.max(t_end));
        let eps = 1e-12 * (1.0 + hi.abs());
        if t < lo - eps || t > hi + eps {
            return Err(Error::Domain(format!("t = {t} outside trajectory span")));
        }
        if dense.is_empty() {
            return Ok(self.states[0].clone());
        }
        let forward = t_end >= t_start;
        let seg = dense
            .iter()
            .find(|s| s.covers(t, forward))
            .unwrap_or_else(|| dense.last().unwrap());
        Ok(StatePoint::from_vector(seg.eval(t)))
    }

    /// Resample onto an explicit grid using dense output.
    pub fn sample_on(&self, grid: &[f64]) -> Result<Vec<StatePoint>> {
        grid.iter().map(|&t| self.state_at(t)).collect()
    }

    /// CSV with header `t,x1..xN,<invariant names>`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, |s| s.dim());
        let mut header: Vec<String> = vec!["t".into()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend(self.invariant_names.iter().cloned());
        let mut out = header.join(",");
        out.push('\n');
        for (k, (&t, state)) in self.times.iter().zip(&self.states).enumerate() {
            let mut row: Vec<String> = vec![format!("{t:.16e}")];
            row.extend(state.as_slice().iter().map(|v| format!("{v:.16e}")));
            row.extend(self.drifts.iter().map(|d| format!("{:.16e}", d[k])));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn error_norm(err: &DVector<f64>, y0: &DVector<f64>, y1: &DVector<f64>, cfg: &IntegratorConfig) -> f64 {
    let n = err.len() as f64;
    let sum: f64 = err
        .iter()
        .zip(y0.iter().zip(y1.iter()))
        .map(|(e, (a, b))| {
            let scale = cfg.atol + cfg.rtol * a.abs().max(b.abs());
            (e / scale) * (e / scale)
        })
        .sum();
    (sum / n).sqrt()
}

/// Crude but deterministic starting step from the scaled size of f(x0).
fn initial_step(f0: &DVector<f64>, y0: &DVector<f64>, span: f64, cfg: &IntegratorConfig) -> f64 {
    let scale: DVector<f64> = y0.map(|v| cfg.atol + cfg.rtol * v.abs());
    let d0 = y0.component_div(&scale).norm();
    let d1 = f0.component_div(&scale).norm();
    let h = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h.min(span.abs() * 0.1).min(cfg.max_step).max(1e-10)
}

/// Integrate dx/dt = f(x) over `t_span`, recording accepted steps and the
/// drift of each supplied invariant.
///
/// Near a singular point the controller's step collapses; integration then
/// stops with `Error::StepUnderflow` (callers needing partial data can use
/// `integrate_partial`).
pub fn integrate(
    f: &VectorField,
    x0: &StatePoint,
    t_span: (f64, f64),
    invariants: &[(String, ScalarField)],
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    let (traj, truncated) = integrate_partial(f, x0, t_span, invariants, cfg)?;
    if let Some(t) = truncated {
        return Err(Error::StepUnderflow { t });
    }
    Ok(traj)
}

/// As `integrate`, but on step underflow returns the truncated trajectory
/// together with the truncation time.
pub fn integrate_partial(
    f: &VectorField,
    x0: &StatePoint,
    t_span: (f64, f64),
    invariants: &[(String, ScalarField)],
    cfg: &IntegratorConfig,
) -> Result<(Trajectory, Option<f64>)> {
    cfg.validate()?;
    if f.dim() != x0.dim() {
        return Err(Error::DimensionMismatch { expected: f.dim(), got: x0.dim() });
    }
    let (t0, tf) = t_span;
    if !(t0.is_finite() && tf.is_finite()) {
        return Err(Error::InvalidParams("t_span must be finite".into()));
    }

    let c0: Vec<f64> = invariants.iter().map(|(_, c)| c.evaluate(x0)).collect();
    let mut traj = Trajectory {
        times: vec![t0],
        states: vec![x0.clone()],
        invariant_names: invariants.iter().map(|(n, _)| n.clone()).collect(),
        drifts: vec![vec![0.0]; invariants.len()],
        dense: cfg.dense_output.then(Vec::new),
    };
    if t0 == tf {
        return Ok((traj, None));
    }

    let dir = (tf - t0).signum();
    let mut t = t0;
    let mut y = x0.coords().clone();
    let mut k1 = f.evaluate(x0);
    let mut h = initial_step(&k1, &y, tf - t0, cfg) * dir;
    let mut err_old: f64 = 1e-4;
    let mut truncated = None;

    let mut k = vec![DVector::zeros(y.len()); 7];
    while (tf - t) * dir > 0.0 {
        if h.abs() > cfg.max_step {
            h = cfg.max_step * dir;
        }
        if (t + h - tf) * dir > 0.0 {
            h = tf - t;
        }
        let h_floor = 1e-14 * t.abs().max(1.0);
        if h.abs() < h_floor {
            truncated = Some(t);
            break;
        }

        k[0] = k1.clone();
        let mut failed_eval = false;
        for stage in 0..6 {
            let mut yi = y.clone();
            for (j, kj) in k.iter().enumerate().take(stage + 1) {
                if A[stage][j] != 0.0 {
                    yi += h * A[stage][j] * kj;
                }
            }
            if yi.iter().any(|v| !v.is_finite()) {
                failed_eval = true;
                break;
            }
            k[stage + 1] = f.evaluate(&StatePoint::from_vector(yi));
            if k[stage + 1].iter().any(|v| !v.is_finite()) {
                failed_eval = true;
                break;
            }
        }
        if failed_eval {
            h *= 0.25;
            continue;
        }

        // FSAL: the 6th stage argument already uses the 5th-order b row, so
        // y_new is that argument and k[6] = f(t + h, y_new).
        let mut y_new = y.clone();
        for (j, kj) in k.iter().enumerate().take(6) {
            if A[5][j] != 0.0 {
                y_new += h * A[5][j] * kj;
            }
        }
        let mut err_vec = DVector::zeros(y.len());
        for (j, kj) in k.iter().enumerate() {
            if E[j] != 0.0 {
                err_vec += h * E[j] * kj;
            }
        }
        let err = error_norm(&err_vec, &y, &y_new, cfg);

        if err <= 1.0 {
            if let Some(dense) = traj.dense.as_mut() {
                let ydiff = &y_new - &y;
                let bspl = h * &k[0] - &ydiff;
                let mut cont4 = DVector::zeros(y.len());
                for (j, kj) in k.iter().enumerate() {
                    if D[j] != 0.0 {
                        cont4 += D[j] * kj;
                    }
                }
                cont4 *= h;
                let cont = [
                    y.clone(),
                    ydiff.clone(),
                    bspl.clone(),
                    -h * &k[6] + ydiff - bspl,
                    cont4,
                ];
                dense.push(DenseSegment { t0: t, h, cont });
            }
            t += h;
            y = y_new;
            k1 = k[6].clone();
            traj.times.push(t);
            let state = StatePoint::from_vector(y.clone());
            for (i, (_, c)) in invariants.iter().enumerate() {
                traj.drifts[i].push((c.evaluate(&state) - c0[i]).abs());
            }
            traj.states.push(state);

            let fac = SAFETY * err.max(1e-10).powf(-0.2 + BETA * 0.75) * err_old.powf(BETA);
            h *= fac.clamp(FAC_MIN, FAC_MAX);
            err_old = err.max(1e-10);
        } else {
            let fac = SAFETY * err.powf(-0.2);
            h *= fac.clamp(FAC_MIN, 1.0);
        }
    }

    Ok((traj, truncated))
}

/// Integrate and resample onto an explicit grid (dense output internally).
pub fn integrate_on_grid(
    f: &VectorField,
    x0: &StatePoint,
    grid: &[f64],
    invariants: &[(String, ScalarField)],
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    if grid.len() < 2 {
        return Err(Error::InvalidParams("grid needs at least two points".into()));
    }
    let mut dense_cfg = cfg.clone();
    dense_cfg.dense_output = true;
    let base = integrate(f, x0, (grid[0], *grid.last().unwrap()), invariants, &dense_cfg)?;
    let c0: Vec<f64> = invariants.iter().map(|(_, c)| c.evaluate(x0)).collect();
    let mut traj = Trajectory {
        times: Vec::with_capacity(grid.len()),
        states: Vec::with_capacity(grid.len()),
        invariant_names: base.invariant_names.clone(),
        drifts: vec![Vec::with_capacity(grid.len()); invariants.len()],
        dense: None,
    };
    for &t in grid {
        let state = base.state_at(t)?;
        traj.times.push(t);
        for (i, (_, c)) in invariants.iter().enumerate() {
            traj.drifts[i].push((c.evaluate(&state) - c0[i]).abs());
        }
        traj.states.push(state);
    }
    Ok(traj)
}

/// Uniform grid over [a, b] with `n` points.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{make_system, ParameterSet, SystemId};

    fn rotation_field() -> VectorField {
        VectorField::new(2, |x| DVector::from_vec(vec![x.get(1), -x.get(0)]))
    }

    #[test]
    fn circular_rotation_returns_to_start() {
        let f = rotation_field();
        let cfg = IntegratorConfig::with_tols(1e-10, 1e-12);
        let traj = integrate(
            &f,
            &StatePoint::of(&[1.0, 0.0]),
            (0.0, 2.0 * std::f64::consts::PI),
            &[],
            &cfg,
        )
        .unwrap();
        let last = traj.last_state();
        assert!((last.get(0) - 1.0).abs() < 1e-8, "x = {}", last.get(0));
        assert!(last.get(1).abs() < 1e-8, "y = {}", last.get(1));
    }

    #[test]
    fn global_error_scales_with_tolerance() {
        let f = rotation_field();
        let mut errs = Vec::new();
        for rtol in [1e-6, 1e-8, 1e-10] {
            let cfg = IntegratorConfig::with_tols(rtol, rtol * 1e-2);
            let traj = integrate(
                &f,
                &StatePoint::of(&[1.0, 0.0]),
                (0.0, 2.0 * std::f64::consts::PI),
                &[],
                &cfg,
            )
            .unwrap();
            let last = traj.last_state();
            let err = ((last.get(0) - 1.0).powi(2) + last.get(1).powi(2)).sqrt();
            assert!(err < 100.0 * rtol, "error {err:e} at rtol {rtol:e}");
            errs.push(err);
        }
        assert!(errs[0] > errs[2], "error should shrink with tolerance: {errs:?}");
    }

    #[test]
    fn zero_field_gives_constant_trajectory() {
        let f = VectorField::new(3, |_| DVector::zeros(3));
        let cfg = IntegratorConfig::default();
        let traj = integrate(&f, &StatePoint::of(&[0.1, -0.2, 0.3]), (0.0, 5.0), &[], &cfg).unwrap();
        for s in &traj.states {
            assert_eq!(s.as_slice(), &[0.1, -0.2, 0.3]);
        }
    }

    #[test]
    fn degenerate_span_returns_initial_point_only() {
        let f = rotation_field();
        let traj = integrate(
            &f,
            &StatePoint::of(&[1.0, 0.0]),
            (2.0, 2.0),
            &[],
            &IntegratorConfig::default(),
        )
        .unwrap();
        assert_eq!(traj.len(), 1);
    }

    #[test]
    fn euler_top_invariant_drift_stays_small() {
        let sys = make_system(SystemId::EulerTop, ParameterSet::default()).unwrap();
        let invariants: Vec<(String, ScalarField)> = sys
            .invariants()
            .map(|(n, c)| (n.to_string(), c.clone()))
            .collect();
        let cfg = IntegratorConfig::with_tols(1e-10, 1e-12);
        let traj = integrate(
            sys.flow(),
            &StatePoint::of(&[0.2, 0.3, 0.9]),
            (0.0, 50.0),
            &invariants,
            &cfg,
        )
        .unwrap();
        assert!(traj.max_drift(0) < 1e-8, "C1 drift {:e}", traj.max_drift(0));
        assert!(traj.max_drift(1) < 1e-8, "C2 drift {:e}", traj.max_drift(1));
    }

    #[test]
    fn drift_below_hundred_rtol_for_registered_systems() {
        let rtol = 1e-10;
        let cases = [
            (SystemId::OTwoCartesian, ParameterSet::default(), vec![0.8, 0.1, 0.5, 0.4]),
            (SystemId::OTwoPolar, ParameterSet::default(), vec![1.0, 1.0, std::f64::consts::FRAC_PI_6]),
            (SystemId::ExampleI, ParameterSet::default(), vec![1.0, 1.0, std::f64::consts::FRAC_PI_6]),
            // Q(s) = 1 - s^2 keeps example2 orbits bounded over the long horizon.
            (
                SystemId::BridgesExample,
                ParameterSet { poly_q: vec![1.0, 0.0, -1.0], ..Default::default() },
                vec![0.4, 0.6, 0.3],
            ),
            (SystemId::EulerTop, ParameterSet::default(), vec![0.2, 0.3, 0.9]),
        ];
        for (id, params, x0) in cases {
            let sys = make_system(id, params).unwrap();
            let invariants: Vec<(String, ScalarField)> = sys
                .invariants()
                .map(|(n, c)| (n.to_string(), c.clone()))
                .collect();
            let cfg = IntegratorConfig::with_tols(rtol, 1e-12);
            let traj = integrate(sys.flow(), &StatePoint::of(&x0), (0.0, 50.0), &invariants, &cfg).unwrap();
            for i in 0..invariants.len() {
                assert!(
                    traj.max_drift(i) < 100.0 * rtol,
                    "{} invariant {i} drift {:e}",
                    id.name(),
                    traj.max_drift(i)
                );
            }
        }
    }

    #[test]
    fn dense_output_matches_closed_form() {
        let f = rotation_field();
        let mut cfg = IntegratorConfig::with_tols(1e-10, 1e-12);
        cfg.dense_output = true;
        let traj = integrate(&f, &StatePoint::of(&[1.0, 0.0]), (0.0, 3.0), &[], &cfg).unwrap();
        for &t in &[0.1, 0.77, 1.5, 2.9] {
            let s = traj.state_at(t).unwrap();
            assert!((s.get(0) - t.cos()).abs() < 1e-9);
            assert!((s.get(1) + t.sin()).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_time_blowup_truncates_with_diagnostic() {
        // dx/dt = 1 + x^2 reaches infinity at t = pi/2 - atan(x0).
        let f = VectorField::new(1, |x| DVector::from_vec(vec![1.0 + x.get(0) * x.get(0)]));
        let cfg = IntegratorConfig::with_tols(1e-8, 1e-10);
        let res = integrate(&f, &StatePoint::of(&[0.0]), (0.0, 3.0), &[], &cfg);
        match res {
            Err(Error::StepUnderflow { t }) => {
                assert!((t - std::f64::consts::FRAC_PI_2).abs() < 1e-3, "blowup time {t}");
            }
            other => panic!("expected step underflow, got {other:?}"),
        }
        let (partial, truncated) = integrate_partial(&f, &StatePoint::of(&[0.0]), (0.0, 3.0), &[], &cfg).unwrap();
        assert!(truncated.is_some());
        assert!(partial.len() > 1);
    }

    #[test]
    fn stiff_bounce_near_small_x2_is_integrated_through() {
        // example1 orbits with C2 != 0 graze X2 ~ C2 / (2 C1) where the
        // angle equation is stiff but finite.
        let sys = make_system(SystemId::ExampleI, ParameterSet::default()).unwrap();
        let invariants: Vec<(String, ScalarField)> = sys
            .invariants()
            .map(|(n, c)| (n.to_string(), c.clone()))
            .collect();
        let cfg = IntegratorConfig::with_tols(1e-10, 1e-12);
        let traj = integrate(
            sys.flow(),
            &StatePoint::of(&[1.5, 0.05, 0.3]),
            (0.0, 2.0),
            &invariants,
            &cfg,
        )
        .unwrap();
        assert!(traj.max_drift(0) < 1e-7, "C1 drift {:e}", traj.max_drift(0));
        assert!(traj.max_drift(1) < 1e-7, "C2 drift {:e}", traj.max_drift(1));
    }

    #[test]
    fn csv_has_header_and_17_significant_digits() {
        let f = rotation_field();
        let invariants: Vec<(String, ScalarField)> = vec![(
            "C1".into(),
            ScalarField::new(2, |x| x.coords().norm_squared()),
        )];
        let traj = integrate(
            &f,
            &StatePoint::of(&[1.0, 0.0]),
            (0.0, 0.5),
            &invariants,
            &IntegratorConfig::default(),
        )
        .unwrap();
        let csv = traj.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,x1,x2,C1");
        let first = lines.next().unwrap();
        assert!(first.starts_with("0.0000000000000000e0,1.0000000000000000e0,"));
    }
}
