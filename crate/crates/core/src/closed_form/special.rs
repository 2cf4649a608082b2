//! The functions `E₀` and `Eₘ` that solve scalar linear ODEs with
//! exponential (times monomial) forcing.

use crate::error::{domain, Result};

/// Largest supported monomial degree in [`em`].
pub const MAX_DEGREE: u32 = 20;

/// Above this value of `|ρ − σ|·t` the alternating closed form is used;
/// below it a series with positive terms.
const SERIES_LIMIT: f64 = 50.0;

fn check_rate(name: &str, x: f64) -> Result<()> {
    if x.is_finite() && x >= 0.0 {
        Ok(())
    } else {
        domain(format!("{name} = {x} must be a nonnegative number"))
    }
}

/// `E₀(α, β; t) = (e^{−βt} − e^{−αt}) / (α − β)`, and `t e^{−αt}` for
/// `α = β`. Symmetric in `α`, `β`.
pub fn e0(alpha: f64, beta: f64, t: f64) -> Result<f64> {
    check_rate("alpha", alpha)?;
    check_rate("beta", beta)?;
    check_rate("t", t)?;
    let (hi, lo) = if alpha >= beta { (alpha, beta) } else { (beta, alpha) };
    let d = hi - lo;
    if d == 0.0 {
        return Ok(t * (-lo * t).exp());
    }
    // e^{−lo·t}(1 − e^{−d t})/d; expm1 keeps small d·t free of cancellation.
    Ok((-lo * t).exp() * (-(-d * t).exp_m1()) / d)
}

/// `Eₘ(ρ, σ; t) = e^{−ρt} ∫₀ᵗ τ^m/m! e^{(ρ−σ)τ} dτ`.
pub fn em(rho: f64, sigma: f64, m: u32, t: f64) -> Result<f64> {
    check_rate("rho", rho)?;
    check_rate("sigma", sigma)?;
    check_rate("t", t)?;
    if m > MAX_DEGREE {
        return domain(format!("degree {m} exceeds {MAX_DEGREE}"));
    }
    let c = rho - sigma;
    let fact = |k: u32| (1..=k).fold(1.0f64, |acc, j| acc * j as f64);
    if c == 0.0 || t == 0.0 {
        return Ok(t.powi(m as i32 + 1) / fact(m + 1) * (-rho * t).exp());
    }
    let x = c.abs() * t;
    if x > SERIES_LIMIT {
        return Ok(closed(rho, sigma, m, t, &fact));
    }
    let mf = m as f64;
    let mut sum = 0.0;
    if c > 0.0 {
        // e^{−ρt} t^{m+1}/m! Σ_k (ct)^k / (k! (m+k+1))
        let mut term = 1.0;
        let mut k = 0.0;
        loop {
            let add = term / (mf + k + 1.0);
            sum += add;
            if k > x && add <= 1e-17 * sum {
                break;
            }
            k += 1.0;
            term *= x / k;
        }
        Ok((-rho * t).exp() * t.powi(m as i32 + 1) / fact(m) * sum)
    } else {
        // e^{−σt} t^{m+1} Σ_k (|c|t)^k / (m+k+1)!
        let mut term = 1.0 / fact(m + 1);
        let mut k = 0.0;
        loop {
            sum += term;
            if k > x && term <= 1e-17 * sum {
                break;
            }
            k += 1.0;
            term *= x / (mf + k + 1.0);
        }
        Ok((-sigma * t).exp() * t.powi(m as i32 + 1) * sum)
    }
}

/// `e^{−ρt}(−1)^{m+1}/c^{m+1} + e^{−σt} Σ_ℓ (−1)^ℓ t^{m−ℓ}/((m−ℓ)! c^{ℓ+1})`,
/// `c = ρ − σ ≠ 0`.
fn closed(rho: f64, sigma: f64, m: u32, t: f64, fact: &dyn Fn(u32) -> f64) -> f64 {
    let c = rho - sigma;
    let sign = if m.is_multiple_of(2) { -1.0 } else { 1.0 };
    let head = (-rho * t).exp() * sign / c.powi(m as i32 + 1);
    let mut tail = 0.0;
    for l in 0..=m {
        let s = if l % 2 == 0 { 1.0 } else { -1.0 };
        tail += s * t.powi((m - l) as i32) / (fact(m - l) * c.powi(l as i32 + 1));
    }
    head + (-sigma * t).exp() * tail
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Adaptive Simpson quadrature.
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                    + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 50)
    }

    fn em_by_quadrature(rho: f64, sigma: f64, m: u32, t: f64) -> f64 {
        let fact: f64 = (1..=m).map(|j| j as f64).product();
        let f = move |tau: f64| tau.powi(m as i32) / fact * (-rho * (t - tau) - sigma * tau).exp();
        // fixed pieces so that narrow peaks are not missed by the first samples
        let pieces = 64;
        (0..pieces)
            .map(|k| {
                let a = t * k as f64 / pieces as f64;
                let b = t * (k + 1) as f64 / pieces as f64;
                simpson(&f, a, b, 1e-16)
            })
            .sum()
    }

    #[test]
    fn e0_examples() {
        let v = e0(1.0, 2.0, 1.0).unwrap();
        assert!((v - ((-1.0f64).exp() - (-2.0f64).exp())).abs() < 1e-15);
        assert!((v - 0.232544).abs() < 1e-6);
        assert_eq!(e0(1.0, 2.0, 1.0).unwrap(), e0(2.0, 1.0, 1.0).unwrap());
        assert!((e0(0.7, 0.7, 2.0).unwrap() - 2.0 * (-1.4f64).exp()).abs() < 1e-15);
        let near = e0(0.7 + 1e-12, 0.7, 2.0).unwrap();
        assert!((near - 2.0 * (-1.4f64).exp()).abs() < 1e-11);
        assert!(e0(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn em_degenerate_branch() {
        for m in 0..5 {
            let fact: f64 = (1..=m + 1).map(|j| j as f64).product();
            let expected = 1.5f64.powi(m as i32 + 1) / fact * (-0.8 * 1.5f64).exp();
            assert!((em(0.8, 0.8, m, 1.5).unwrap() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn em_at_degree_zero_is_e0() {
        for &(r, s, t) in &[(1.0, 2.0, 1.0), (3.0, 0.5, 2.0), (0.2, 0.2, 4.0), (90.0, 1.0, 1.0)] {
            assert!((em(r, s, 0, t).unwrap() - e0(r, s, t).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn em_matches_quadrature() {
        assert!((em(1.0, 2.0, 2, 1.0).unwrap() - em_by_quadrature(1.0, 2.0, 2, 1.0)).abs() < 1e-8);
        for &(r, s) in &[(0.0, 3.0), (5.0, 0.1), (2.0, 2.0 + 1e-9), (40.0, 0.0), (0.0, 40.0)] {
            for m in [0, 1, 3, 7] {
                for t in [0.1, 1.0, 3.0] {
                    let (a, b) = (em(r, s, m, t).unwrap(), em_by_quadrature(r, s, m, t));
                    assert!((a - b).abs() < 1e-8 * b.abs().max(1.0), "{r} {s} {m} {t}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn em_branches_agree_near_switch() {
        for m in [0, 2, 5] {
            let t = 1.0;
            let inside = em(SERIES_LIMIT - 1e-9, 0.0, m, t).unwrap();
            let outside = em(SERIES_LIMIT + 1e-9, 0.0, m, t).unwrap();
            assert!((inside - outside).abs() <= 1e-8 * inside.abs());
        }
        assert!(em(1.0, 1.0, MAX_DEGREE + 1, 1.0).is_err());
    }
}
