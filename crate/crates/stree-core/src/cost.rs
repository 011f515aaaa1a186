//! Runtime cost models for packed forward passes, and the acceptance-rate
//! break-even arithmetic built on them.
//!
//! Measurements (packed token count N, wall time t) are fitted by least
//! squares to t = kN + C or t = aN^2 + bN + c through the normal
//! equations. Moving from configuration 1 to configuration 2 pays off when
//! tau_2 / tau_1 >= t_2(N_2) / t_1(N_1), so `required_tau_ratio` returns
//! that right-hand side.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::{Error, Result};

/// One timing measurement: a forward pass over `n` packed tokens took
/// `millis` milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuntimeSample {
    pub n: usize,
    pub millis: f64,
}

/// A fitted per-call runtime model. `residual` is the fit's RMSE.
#[derive(Debug, Clone, PartialEq)]
pub enum CostModel {
    Linear { k: f64, c: f64, residual: f64 },
    Quadratic { a: f64, b: f64, c: f64, residual: f64 },
}

impl CostModel {
    /// Predicted per-call time at `n` packed tokens.
    pub fn predict(&self, n: usize) -> f64 {
        let x = n as f64;
        match self {
            CostModel::Linear { k, c, .. } => k * x + c,
            CostModel::Quadratic { a, b, c, .. } => a * x * x + b * x + c,
        }
    }

    pub fn residual(&self) -> f64 {
        match self {
            CostModel::Linear { residual, .. } => *residual,
            CostModel::Quadratic { residual, .. } => *residual,
        }
    }
}

/// Serialization mirror: `kind` is "linear" or "quadratic", `params` the
/// coefficients from the highest power down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub kind: String,
    pub params: Vec<f64>,
    pub residual: f64,
}

impl From<&CostModel> for FitReport {
    fn from(model: &CostModel) -> FitReport {
        match model {
            CostModel::Linear { k, c, residual } => FitReport {
                kind: "linear".into(),
                params: vec![*k, *c],
                residual: *residual,
            },
            CostModel::Quadratic { a, b, c, residual } => FitReport {
                kind: "quadratic".into(),
                params: vec![*a, *b, *c],
                residual: *residual,
            },
        }
    }
}

impl FitReport {
    pub fn to_model(&self) -> Result<CostModel> {
        match (self.kind.as_str(), self.params.as_slice()) {
            ("linear", [k, c]) => Ok(CostModel::Linear {
                k: *k,
                c: *c,
                residual: self.residual,
            }),
            ("quadratic", [a, b, c]) => Ok(CostModel::Quadratic {
                a: *a,
                b: *b,
                c: *c,
                residual: self.residual,
            }),
            _ => Err(Error::Structure(alloc::format!(
                "fit report kind {:?} with {} params",
                self.kind,
                self.params.len()
            ))),
        }
    }
}

fn distinct_ns(samples: &[RuntimeSample]) -> usize {
    let mut ns: Vec<usize> = samples.iter().map(|s| s.n).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.len()
}

fn rmse(samples: &[RuntimeSample], model: &CostModel) -> f64 {
    let sse: f64 = samples
        .iter()
        .map(|s| {
            let e = s.millis - model.predict(s.n);
            e * e
        })
        .sum();
    math::sqrt(sse / samples.len() as f64)
}

/// Least-squares fit of t = kN + C.
pub fn fit_linear(samples: &[RuntimeSample]) -> Result<CostModel> {
    if distinct_ns(samples) < 2 {
        return Err(Error::DegenerateFit(
            "linear fit needs at least 2 distinct N".into(),
        ));
    }
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    let (mut b0, mut b1) = (0.0, 0.0);
    for s in samples {
        let x = s.n as f64;
        s0 += 1.0;
        s1 += x;
        s2 += x * x;
        b0 += s.millis;
        b1 += x * s.millis;
    }
    let mut a = [s2, s1, s1, s0];
    check_conditioning(&mut a.clone(), 2)?;
    let sol = solve(&mut a, &mut [b1, b0], 2)?;
    let mut model = CostModel::Linear {
        k: sol[0],
        c: sol[1],
        residual: 0.0,
    };
    let r = rmse(samples, &model);
    if let CostModel::Linear { residual, .. } = &mut model {
        *residual = r;
    }
    Ok(model)
}

/// Least-squares fit of t = aN^2 + bN + c.
pub fn fit_quadratic(samples: &[RuntimeSample]) -> Result<CostModel> {
    if distinct_ns(samples) < 3 {
        return Err(Error::DegenerateFit(
            "quadratic fit needs at least 3 distinct N".into(),
        ));
    }
    let mut m = [0.0f64; 5];
    let mut b = [0.0f64; 3];
    for s in samples {
        let x = s.n as f64;
        let mut p = 1.0;
        for moment in m.iter_mut() {
            *moment += p;
            p *= x;
        }
        b[2] += s.millis;
        b[1] += x * s.millis;
        b[0] += x * x * s.millis;
    }
    // Normal matrix over moments S4..S0.
    let mut a = [
        m[4], m[3], m[2], //
        m[3], m[2], m[1], //
        m[2], m[1], m[0],
    ];
    check_conditioning(&mut a.clone(), 3)?;
    let sol = solve(&mut a, &mut b, 3)?;
    let mut model = CostModel::Quadratic {
        a: sol[0],
        b: sol[1],
        c: sol[2],
        residual: 0.0,
    };
    let r = rmse(samples, &model);
    if let CostModel::Quadratic { residual, .. } = &mut model {
        *residual = r;
    }
    Ok(model)
}

/// Fits both families and keeps the simpler one unless the quadratic
/// clearly earns its extra coefficient: linear wins outright when its RMSE
/// is already negligible, and otherwise the quadratic must cut the RMSE by
/// at least 10%.
pub fn select_model(samples: &[RuntimeSample]) -> Result<CostModel> {
    let linear = fit_linear(samples)?;
    if linear.residual() <= 1e-9 {
        return Ok(linear);
    }
    match fit_quadratic(samples) {
        Ok(quad) if quad.residual() < 0.9 * linear.residual() => Ok(quad),
        _ => Ok(linear),
    }
}

/// The acceptance-rate ratio tau_2/tau_1 at which configuration 2 (cost
/// model `m2` run at `n2` packed tokens) breaks even against
/// configuration 1.
pub fn required_tau_ratio(m1: &CostModel, n1: usize, m2: &CostModel, n2: usize) -> Result<f64> {
    let t1 = m1.predict(n1);
    let t2 = m2.predict(n2);
    if !(t1.is_finite() && t2.is_finite()) || t1 <= 0.0 {
        return Err(Error::Numeric(alloc::format!(
            "per-call times t1={t1}, t2={t2} do not form a ratio"
        )));
    }
    Ok(t2 / t1)
}

/// Gaussian elimination with partial pivoting on a dense nxn system.
fn solve(a: &mut [f64], b: &mut [f64], n: usize) -> Result<[f64; 3]> {
    debug_assert!(n <= 3 && a.len() == n * n && b.len() == n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r1, &r2| math::abs(a[r1 * n + col]).total_cmp(&math::abs(a[r2 * n + col])))
            .expect("non-empty range");
        if math::abs(a[pivot * n + col]) < 1e-300 {
            return Err(Error::DegenerateFit("singular normal matrix".into()));
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 3];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for j in col + 1..n {
            acc -= a[col * n + j] * x[j];
        }
        x[col] = acc / a[col * n + col];
    }
    Ok(x)
}

/// Jacobi eigenvalue sweep for a small symmetric matrix; rejects the fit
/// when the spectral condition number exceeds 1e12.
fn check_conditioning(a: &mut [f64], n: usize) -> Result<()> {
    debug_assert!(n <= 3 && a.len() == n * n);
    for _ in 0..64 {
        // Largest off-diagonal element.
        let (mut p, mut q, mut off) = (0, 1, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                if math::abs(a[i * n + j]) > off {
                    off = math::abs(a[i * n + j]);
                    p = i;
                    q = j;
                }
            }
        }
        if off < 1e-30 {
            break;
        }
        let app = a[p * n + p];
        let aqq = a[q * n + q];
        let apq = a[p * n + q];
        let theta = 0.5 * libm::atan2(2.0 * apq, aqq - app);
        let (s, c) = (libm::sin(theta), libm::cos(theta));
        for k in 0..n {
            let akp = a[k * n + p];
            let akq = a[k * n + q];
            a[k * n + p] = c * akp - s * akq;
            a[k * n + q] = s * akp + c * akq;
        }
        for k in 0..n {
            let apk = a[p * n + k];
            let aqk = a[q * n + k];
            a[p * n + k] = c * apk - s * aqk;
            a[q * n + k] = s * apk + c * aqk;
        }
    }
    let mut min = f64::INFINITY;
    let mut max: f64 = 0.0;
    for i in 0..n {
        let ev = math::abs(a[i * n + i]);
        if ev < min {
            min = ev;
        }
        if ev > max {
            max = ev;
        }
    }
    if min <= 0.0 || max / min > 1e12 {
        return Err(Error::DegenerateFit(alloc::format!(
            "normal matrix condition {:.3e} beyond 1e12",
            if min > 0.0 { max / min } else { f64::INFINITY }
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn samples(pairs: &[(usize, f64)]) -> Vec<RuntimeSample> {
        pairs
            .iter()
            .map(|&(n, millis)| RuntimeSample { n, millis })
            .collect()
    }

    #[test]
    fn linear_fit_recovers_exact_line() {
        let s = samples(&[(1, 10.0), (2, 12.0)]);
        let CostModel::Linear { k, c, residual } = fit_linear(&s).unwrap() else {
            panic!("expected linear")
        };
        assert!((k - 2.0).abs() < 1e-12);
        assert!((c - 8.0).abs() < 1e-12);
        assert!(residual < 1e-12);
    }

    #[test]
    fn linear_fit_on_bench_sized_inputs_is_exact() {
        let s = samples(&[(15, 130.0), (31, 162.0), (63, 226.0)]);
        let m = fit_linear(&s).unwrap();
        let CostModel::Linear { k, c, residual } = m else {
            panic!()
        };
        assert!((k - 2.0).abs() < 1e-9);
        assert!((c - 100.0).abs() < 1e-9);
        assert!(residual < 1e-9);
    }

    #[test]
    fn quadratic_fit_recovers_exact_parabola() {
        // t = 0.5 N^2 + N + 3
        let s = samples(&[(15, 130.5), (31, 514.5), (63, 2050.5)]);
        let CostModel::Quadratic { a, b, c, residual } = fit_quadratic(&s).unwrap() else {
            panic!("expected quadratic")
        };
        assert!((a - 0.5).abs() < 1e-9, "a={a}");
        assert!((b - 1.0).abs() < 1e-7, "b={b}");
        assert!((c - 3.0).abs() < 1e-6, "c={c}");
        assert!(residual < 1e-6);
    }

    #[test]
    fn fits_reject_degenerate_inputs() {
        assert!(matches!(
            fit_linear(&samples(&[(5, 1.0)])),
            Err(Error::DegenerateFit(_))
        ));
        assert!(matches!(
            fit_linear(&samples(&[(5, 1.0), (5, 2.0), (5, 3.0)])),
            Err(Error::DegenerateFit(_))
        ));
        assert!(matches!(
            fit_quadratic(&samples(&[(5, 1.0), (9, 2.0)])),
            Err(Error::DegenerateFit(_))
        ));
        assert!(fit_quadratic(&samples(&[(5, 1.0), (9, 2.0), (13, 3.0)])).is_ok());
    }

    #[test]
    fn noisy_linear_fit_lands_near_truth() {
        let mut rng = SplitMix64::new(6);
        let s: Vec<RuntimeSample> = (0..40)
            .map(|i| {
                let n = 5 + 3 * i;
                RuntimeSample {
                    n,
                    millis: 1.5 * n as f64 + 20.0 + rng.uniform(-0.5, 0.5),
                }
            })
            .collect();
        let CostModel::Linear { k, c, residual } = fit_linear(&s).unwrap() else {
            panic!()
        };
        assert!((k - 1.5).abs() < 0.05, "k={k}");
        assert!((c - 20.0).abs() < 2.0, "c={c}");
        assert!(residual > 0.0 && residual < 1.0);
    }

    #[test]
    fn fit_is_scale_equivariant() {
        let mut rng = SplitMix64::new(60);
        let base: Vec<RuntimeSample> = (0..20)
            .map(|i| RuntimeSample {
                n: 4 + 7 * i,
                millis: 0.8 * (4 + 7 * i) as f64 + 11.0 + rng.uniform(-0.2, 0.2),
            })
            .collect();
        let scaled: Vec<RuntimeSample> = base
            .iter()
            .map(|s| RuntimeSample {
                n: s.n,
                millis: 3.0 * s.millis,
            })
            .collect();
        let (m1, m2) = (fit_linear(&base).unwrap(), fit_linear(&scaled).unwrap());
        let (CostModel::Linear { k: k1, c: c1, .. }, CostModel::Linear { k: k2, c: c2, .. }) =
            (m1, m2)
        else {
            panic!()
        };
        assert!((k2 - 3.0 * k1).abs() < 1e-9);
        assert!((c2 - 3.0 * c1).abs() < 1e-9);
    }

    #[test]
    fn selection_prefers_the_simpler_model() {
        // Exactly linear: stays linear even though a quadratic fits too.
        let lin = samples(&[(15, 130.0), (31, 162.0), (63, 226.0), (100, 300.0)]);
        assert!(matches!(
            select_model(&lin).unwrap(),
            CostModel::Linear { .. }
        ));
        // Strongly quadratic data flips the choice.
        let quad = samples(&[(10, 120.0), (20, 430.0), (40, 1660.0), (80, 6520.0)]);
        assert!(matches!(
            select_model(&quad).unwrap(),
            CostModel::Quadratic { .. }
        ));
    }

    #[test]
    fn tau_ratio_matches_hand_computation() {
        let m = CostModel::Linear {
            k: 2.0,
            c: 100.0,
            residual: 0.0,
        };
        let r = required_tau_ratio(&m, 5, &m, 15).unwrap();
        assert!((r - 130.0 / 110.0).abs() < 1e-12);
        assert_eq!(required_tau_ratio(&m, 9, &m, 9).unwrap(), 1.0);
    }

    #[test]
    fn tau_ratio_rejects_nonpositive_baseline() {
        let m = CostModel::Linear {
            k: 0.0,
            c: 0.0,
            residual: 0.0,
        };
        assert!(required_tau_ratio(&m, 5, &m, 15).is_err());
    }

    #[test]
    fn fit_report_round_trips() {
        let model = CostModel::Quadratic {
            a: 0.5,
            b: 1.0,
            c: 3.0,
            residual: 0.25,
        };
        let report = FitReport::from(&model);
        assert_eq!(report.kind, "quadratic");
        assert_eq!(report.params, vec![0.5, 1.0, 3.0]);
        assert_eq!(report.to_model().unwrap(), model);

        let json = serde_json::to_string(&report).unwrap();
        let back: FitReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        let bad = FitReport {
            kind: "cubic".into(),
            params: vec![1.0],
            residual: 0.0,
        };
        assert!(bad.to_model().is_err());
    }

    #[test]
    fn predict_evaluates_the_polynomial() {
        let m = CostModel::Quadratic {
            a: 1.0,
            b: 2.0,
            c: 3.0,
            residual: 0.0,
        };
        assert_eq!(m.predict(0), 3.0);
        assert_eq!(m.predict(10), 123.0);
    }
}
