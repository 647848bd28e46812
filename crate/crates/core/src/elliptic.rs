//! Jacobi elliptic functions and the complete elliptic integral of the
//! first kind, via the arithmetic-geometric mean and descending Landen
//! transformations.
//!
//! Parameter convention is m = k^2 throughout.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// AGM termination: |a_n - g_n| < AGM_EPS * a_n.
const AGM_EPS: f64 = 1e-15;
const AGM_MAX_ITER: usize = 40;

/// Elliptic parameter m = k^2 with 0 <= m < 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EllipticModulus(f64);

impl EllipticModulus {
    pub fn new(m: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&m) {
            return Err(Error::ModulusOutOfRange(m));
        }
        Ok(Self(m))
    }

    pub fn m(&self) -> f64 {
        self.0
    }
}

/// Complete elliptic integral of the first kind, K(m) = pi / (2 AGM(1, sqrt(1-m))).
pub fn complete_k(m: EllipticModulus) -> f64 {
    if m.m() == 0.0 {
        return PI / 2.0;
    }
    let (a, _) = agm(1.0, (1.0 - m.m()).sqrt());
    PI / (2.0 * a)
}

/// Arithmetic-geometric mean of (a0, b0), returning (limit, scale sequence length).
fn agm(a0: f64, b0: f64) -> (f64, usize) {
    let mut a = a0;
    let mut b = b0;
    for n in 0..AGM_MAX_ITER {
        let a_next = 0.5 * (a + b);
        let b_next = (a * b).sqrt();
        if (a - b).abs() < AGM_EPS * a {
            return (a_next, n);
        }
        a = a_next;
        b = b_next;
    }
    (0.5 * (a + b), AGM_MAX_ITER)
}

/// Jacobi elliptic functions (sn, cn, dn) at argument u with parameter m.
///
/// Uses the AGM scale sequence with backward recovery of the amplitude
/// angle. The argument is reduced modulo the real period 4K(m) first, so
/// large |u| do not degrade the phase recursion.
pub fn jacobi_sn_cn_dn(u: f64, m: EllipticModulus) -> (f64, f64, f64) {
    let mv = m.m();
    if mv == 0.0 {
        return (u.sin(), u.cos(), 1.0);
    }
    if u == 0.0 {
        return (0.0, 1.0, 1.0);
    }

    let k = complete_k(m);
    let period = 4.0 * k;
    let u_red = u - period * (u / period).round();

    // Ascending AGM scale: a_{n+1} = (a_n + b_n)/2, c_{n+1} = (a_n - b_n)/2.
    let mut a = vec![1.0_f64];
    let mut c = vec![mv.sqrt()];
    let mut b = (1.0 - mv).sqrt();
    while c.last().unwrap().abs() > AGM_EPS * a.last().unwrap() && a.len() < AGM_MAX_ITER {
        let an = a.last().unwrap();
        let a_next = 0.5 * (an + b);
        let c_next = 0.5 * (an - b);
        b = (an * b).sqrt();
        a.push(a_next);
        c.push(c_next);
    }
    let n_levels = a.len() - 1;

    // Backward phase recursion from phi_N = 2^N a_N u.
    let mut phi = (1u64 << n_levels) as f64 * a[n_levels] * u_red;
    let mut phi_prev = phi;
    for n in (1..=n_levels).rev() {
        let s = (c[n] / a[n] * phi.sin()).clamp(-1.0, 1.0);
        phi_prev = phi;
        phi = 0.5 * (phi + s.asin());
    }

    let sn = phi.sin();
    let cn = phi.cos();
    let delta = phi_prev - phi;
    let dn = if delta.cos().abs() > 0.1 {
        cn / delta.cos()
    } else {
        // Fallback near cos(delta) ~ 0 (large m): use the defining identity.
        (1.0 - mv * sn * sn).sqrt()
    };
    (sn, cn, dn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Plain AGM loop, written independently of `complete_k`.
    fn agm_oracle_k(m: f64) -> f64 {
        let mut a: f64 = 1.0;
        let mut b: f64 = (1.0 - m).sqrt();
        for _ in 0..60 {
            let (an, bn) = (0.5 * (a + b), (a * b).sqrt());
            a = an;
            b = bn;
        }
        PI / (2.0 * a)
    }

    #[test]
    fn k_at_zero_is_half_pi() {
        let m = EllipticModulus::new(0.0).unwrap();
        assert_eq!(complete_k(m), PI / 2.0);
    }

    #[test]
    fn k_matches_agm_oracle() {
        for &mv in &[0.25, 0.2137, 0.5, 0.9] {
            let m = EllipticModulus::new(mv).unwrap();
            let diff = (complete_k(m) - agm_oracle_k(mv)).abs();
            assert!(diff < 1e-14, "K({mv}) off by {diff:e}");
        }
        // Reference magnitude check for m = 0.25.
        assert!((complete_k(EllipticModulus::new(0.25).unwrap()) - 1.6857503548).abs() < 1e-9);
    }

    #[test]
    fn modulus_range_is_enforced() {
        assert!(EllipticModulus::new(-0.1).is_err());
        assert!(EllipticModulus::new(1.0).is_err());
        assert!(EllipticModulus::new(1.5).is_err());
        assert!(EllipticModulus::new(0.0).is_ok());
    }

    #[test]
    fn degenerate_limit_is_circular() {
        let m = EllipticModulus::new(0.0).unwrap();
        for &u in &[-2.0, 0.3, 1.7, 11.0] {
            let (sn, cn, dn) = jacobi_sn_cn_dn(u, m);
            assert!((sn - u.sin()).abs() < 1e-15);
            assert!((cn - u.cos()).abs() < 1e-15);
            assert_eq!(dn, 1.0);
        }
    }

    #[test]
    fn value_at_origin() {
        let m = EllipticModulus::new(0.63).unwrap();
        assert_eq!(jacobi_sn_cn_dn(0.0, m), (0.0, 1.0, 1.0));
    }

    #[test]
    fn quarter_period_identities() {
        let m = EllipticModulus::new(0.25).unwrap();
        let k = complete_k(m);
        let (sn, cn, dn) = jacobi_sn_cn_dn(k, m);
        assert!((sn - 1.0).abs() < 1e-12, "sn(K) = {sn}");
        assert!(cn.abs() < 1e-12, "cn(K) = {cn}");
        assert!((dn - 0.75f64.sqrt()).abs() < 1e-12, "dn(K) = {dn}");
    }

    #[test]
    fn squared_identities_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let mv: f64 = rng.random_range(0.0..0.95);
            let m = EllipticModulus::new(mv).unwrap();
            let k = complete_k(m);
            let u: f64 = rng.random_range(-4.0 * k..4.0 * k);
            let (sn, cn, dn) = jacobi_sn_cn_dn(u, m);
            assert!((sn * sn + cn * cn - 1.0).abs() < 1e-12, "sn2+cn2 at u={u}, m={mv}");
            assert!(
                (dn * dn + mv * sn * sn - 1.0).abs() < 1e-12,
                "dn2+m sn2 at u={u}, m={mv}"
            );
        }
    }

    #[test]
    fn periodicity_over_4k() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let mv: f64 = rng.random_range(0.0..0.9);
            let m = EllipticModulus::new(mv).unwrap();
            let k = complete_k(m);
            let u: f64 = rng.random_range(-k..k);
            let (s0, c0, d0) = jacobi_sn_cn_dn(u, m);
            let (s1, c1, d1) = jacobi_sn_cn_dn(u + 4.0 * k, m);
            assert!((s0 - s1).abs() < 1e-10);
            assert!((c0 - c1).abs() < 1e-10);
            assert!((d0 - d1).abs() < 1e-10);
        }
    }

    #[test]
    fn derivative_of_sn_is_cn_dn() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-5;
        for _ in 0..200 {
            let mv: f64 = rng.random_range(0.0..0.9);
            let m = EllipticModulus::new(mv).unwrap();
            let u: f64 = rng.random_range(-2.0..2.0);
            let (snp, _, _) = jacobi_sn_cn_dn(u + h, m);
            let (snm, _, _) = jacobi_sn_cn_dn(u - h, m);
            let (_, cn, dn) = jacobi_sn_cn_dn(u, m);
            let fd = (snp - snm) / (2.0 * h);
            assert!((fd - cn * dn).abs() < 1e-8, "d/du sn at u={u}, m={mv}");
        }
    }
}
