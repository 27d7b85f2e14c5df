//! Renyi differential privacy of the subsampled Gaussian mechanism.
//!
//! `log A_alpha` follows Mironov, Talwar and Zhang (2019): an exact binomial
//! expansion for integer orders and a convergent two-sided series for
//! fractional ones.

use std::f64::consts::PI;

use statrs::function::erf::erfc;

/// Orders `1.25, 1.5, ..., 64` followed by the integers `65..=256`.
pub fn default_orders() -> Vec<f64> {
    (5..=256)
        .map(|k| k as f64 * 0.25)
        .chain((65..=256).map(f64::from))
        .collect()
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `log(exp(a) - exp(b))` for `a >= b`.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

fn log_erfc(x: f64) -> f64 {
    if x < 25.0 {
        erfc(x).ln()
    } else {
        // asymptotic expansion, erfc underflows here
        let x2 = x * x;
        -x2 - x.ln() - 0.5 * PI.ln() + (1.0 - 0.5 / x2 + 0.75 / (x2 * x2)).ln()
    }
}

fn ln_binom_int(n: u64, k: u64) -> f64 {
    statrs::function::factorial::ln_binomial(n, k)
}

fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let (lq, l1q) = (q.ln(), (1.0 - q).ln());
    let s2 = sigma * sigma;
    (0..=alpha).fold(f64::NEG_INFINITY, |acc, i| {
        let i_f = i as f64;
        let term = ln_binom_int(alpha, i) + i_f * lq + (alpha - i) as f64 * l1q + (i_f * i_f - i_f) / (2.0 * s2);
        log_add(acc, term)
    })
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let s2 = sigma * sigma;
    let (lq, l1q) = (q.ln(), (1.0 - q).ln());
    let z0 = s2 * (1.0 / q - 1.0).ln() + 0.5;
    let (mut a0, mut a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut coef = 1.0f64;
    let mut i = 0u64;
    loop {
        let i_f = i as f64;
        let j = alpha - i_f;
        let log_coef = coef.abs().ln();
        let t0 = log_coef + i_f * lq + j * l1q;
        let t1 = log_coef + j * lq + i_f * l1q;
        let e0 = 0.5f64.ln() + log_erfc((i_f - z0) / (2.0f64.sqrt() * sigma));
        let e1 = 0.5f64.ln() + log_erfc((z0 - j) / (2.0f64.sqrt() * sigma));
        let s0 = t0 + (i_f * i_f - i_f) / (2.0 * s2) + e0;
        let s1 = t1 + (j * j - j) / (2.0 * s2) + e1;
        if coef > 0.0 {
            a0 = log_add(a0, s0);
            a1 = log_add(a1, s1);
        } else {
            a0 = log_sub(a0, s0);
            a1 = log_sub(a1, s1);
        }
        if s0.max(s1) < -30.0 || i > 100_000 {
            break;
        }
        coef *= (alpha - i_f) / (i_f + 1.0);
        i += 1;
    }
    log_add(a0, a1)
}

/// RDP of one step of the Gaussian mechanism with sampling rate `q`, noise
/// multiplier `sigma`, at order `alpha > 1`.
pub fn rdp_step(q: f64, sigma: f64, alpha: f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if sigma <= 0.0 {
        return f64::INFINITY;
    }
    if q >= 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_int(q, sigma, alpha as u64)
    } else {
        log_a_frac(q, sigma, alpha)
    };
    let rdp = log_a / (alpha - 1.0);
    if rdp.is_nan() {
        f64::INFINITY
    } else {
        rdp.max(0.0)
    }
}

/// `min over orders of rdp(alpha) * steps + ln(1/delta) / (alpha - 1)`,
/// together with the minimising order.
pub fn rdp_to_epsilon(q: f64, sigma: f64, steps: u64, delta: f64, orders: &[f64]) -> (f64, f64) {
    if steps == 0 {
        return (0.0, orders.first().copied().unwrap_or(f64::NAN));
    }
    let mut best = (f64::INFINITY, f64::NAN);
    for &alpha in orders {
        let eps = rdp_step(q, sigma, alpha) * steps as f64 + (1.0 / delta).ln() / (alpha - 1.0);
        if eps < best.0 {
            best = (eps, alpha);
        }
    }
    best
}
