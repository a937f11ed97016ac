//! Closed-form convergence bounds and step-size feasibility conditions.

use serde::Serialize;

use crate::error::{Error, Result};

/// Problem, network and schedule constants the bounds are stated in.
/// `tau2` may be `f64::INFINITY`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundParams {
    pub l: f64,
    pub mu: f64,
    /// Gradient noise measured against the global gradient.
    pub sigma_sq: f64,
    /// Node average of the local sampling variances.
    pub sigma_bar_sq: f64,
    pub g_sq: f64,
    pub zeta: f64,
    pub beta: f64,
    pub delta: f64,
    pub eta: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub n: f64,
    pub t: f64,
    pub f_gap: f64,
    pub a: f64,
    /// `None` means `p / (2 (1 − p))`.
    pub theta: Option<f64>,
}

impl Default for BoundParams {
    fn default() -> Self {
        Self {
            l: 1.0,
            mu: 0.1,
            sigma_sq: 1.0,
            sigma_bar_sq: 1.0,
            g_sq: 1.0,
            zeta: 0.87,
            beta: 4.0 / 3.0,
            delta: 1.0,
            eta: 0.01,
            tau1: 4.0,
            tau2: 4.0,
            n: 10.0,
            t: 1000.0,
            f_gap: 1.0,
            a: 160.0,
            theta: None,
        }
    }
}

impl BoundParams {
    pub fn tau(&self) -> f64 {
        self.tau1 + self.tau2
    }

    pub fn rho(&self) -> f64 {
        1.0 - self.zeta
    }

    pub fn kappa(&self) -> f64 {
        self.l / self.mu
    }

    /// `p = ρ²δ / 82`.
    pub fn p(&self) -> f64 {
        let rho = self.rho();
        rho * rho * self.delta / 82.0
    }

    pub fn theta(&self) -> f64 {
        self.theta.unwrap_or_else(|| {
            let p = self.p();
            p / (2.0 * (1.0 - p))
        })
    }

    fn check_zeta(&self) -> Result<()> {
        if self.zeta >= 1.0 {
            Err(Error::InfeasibleTopology)
        } else {
            Ok(())
        }
    }

    fn drift_bracket(&self) -> f64 {
        let z = self.zeta.powf(self.tau2);
        let tau = self.tau();
        let (el, tau1) = (self.eta * self.l, self.tau1);
        el * el * tau / (1.0 - z)
            * (2.0 * tau1 * z * z / (1.0 + z) + 2.0 * tau1 * z / (1.0 - z) + tau - 1.0)
    }

    /// Left-hand side of the main-text step-size condition.
    pub fn lr_condition(&self) -> Result<f64> {
        self.check_zeta()?;
        Ok(self.eta * self.l + self.drift_bracket())
    }

    /// Left-hand side of the appendix step-size condition, which adds the
    /// `β/N` and `β`-drift terms.
    pub fn lr_condition_strict(&self) -> Result<f64> {
        self.check_zeta()?;
        let el = self.eta * self.l;
        let z2 = self.zeta.powf(2.0 * self.tau2);
        Ok(el * (self.beta / self.n + 1.0)
            + 2.0 * el * el * self.beta * self.tau() / (1.0 - z2)
            + self.drift_bracket())
    }
}

pub fn lr_feasible(p: &BoundParams) -> Result<bool> {
    Ok(p.lr_condition()? <= 1.0)
}

pub fn lr_feasible_strict(p: &BoundParams) -> Result<bool> {
    Ok(p.lr_condition_strict()? <= 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DflBound {
    /// `2 F_gap / (η T) + η L σ² / N`.
    pub sync_sgd: f64,
    /// `2 η² L² σ² (τ₁ / (1 − ζ^{2τ₂}) − 1)`; infinite when `ζ = 1`.
    pub local_drift: f64,
    pub total: f64,
    /// Whether the main-text step-size condition holds.
    pub feasible: bool,
}

fn drift_term(p: &BoundParams) -> f64 {
    if p.zeta >= 1.0 {
        return f64::INFINITY;
    }
    let el = p.eta * p.l;
    2.0 * el * el * p.sigma_sq * (p.tau1 / (1.0 - p.zeta.powf(2.0 * p.tau2)) - 1.0)
}

/// Average squared gradient norm bound after `T` steps. Evaluated even when
/// the step size is infeasible; check [`DflBound::feasible`].
pub fn dfl_bound(p: &BoundParams) -> DflBound {
    let sync_sgd = 2.0 * p.f_gap / (p.eta * p.t) + p.eta * p.l * p.sigma_sq / p.n;
    let local_drift = drift_term(p);
    DflBound {
        sync_sgd,
        local_drift,
        total: sync_sgd + local_drift,
        feasible: lr_feasible(p).unwrap_or(false),
    }
}

/// The `T → ∞` limit of [`dfl_bound`].
pub fn dfl_bound_asymptotic(p: &BoundParams) -> f64 {
    p.eta * p.l * p.sigma_sq / p.n + drift_term(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CdflBound {
    pub s_k: f64,
    /// `μ τ₁ a³ ‖u₀ − u*‖² / (8 S_K)`.
    pub initial: f64,
    /// `4K(K+2a) τ₁ σ̄² / (μ S_K N)`.
    pub noise: f64,
    /// `64K/(μ² S_K) · (L+μ) σ̄² τ₁ / (3N)`.
    pub noise_drift: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    /// `64K/(μ² S_K) · (D₁ + D₂ + D₃)`.
    pub compression: f64,
    pub total: f64,
}

/// `S_K = Σ_{k<K} (a + k)²`.
pub fn averaging_mass(a: f64, rounds: usize) -> f64 {
    (0..rounds).map(|k| (a + k as f64).powi(2)).sum()
}

/// Explicit C-DFL bound on `F(w_avg) − F*` after `K` rounds, with the
/// geometric factor evaluated at `k = K − 1`.
pub fn cdfl_bound(p: &BoundParams, rounds: usize, u0_dist_sq: f64) -> Result<CdflBound> {
    if rounds == 0 {
        return Err(Error::config("rounds", "need at least one round"));
    }
    if !(p.mu > 0.0) {
        return Err(Error::UnsupportedObjective(
            "C-DFL bound needs mu > 0".into(),
        ));
    }
    if !(p.rho() > 0.0) {
        return Err(Error::InfeasibleTopology);
    }
    if p.a < 16.0 * p.kappa() {
        return Err(Error::config(
            "a",
            format!("must be >= 16 kappa = {}, got {}", 16.0 * p.kappa(), p.a),
        ));
    }
    let theta = p.theta();
    if !(theta > 0.0) {
        return Err(Error::config("theta", format!("must be > 0, got {theta}")));
    }
    let decay = (1.0 - p.p()).powf(p.tau2);
    let r = (1.0 + theta) * decay;
    if r >= 1.0 {
        return Err(Error::InsufficientCommunication { factor: r });
    }
    let k = rounds as f64;
    let geometric = (r.powf(k - 1.0) - 1.0) / (r - 1.0);
    let head = (1.0 + 1.0 / theta) * decay * geometric;
    let (l, mu, g2, tau1) = (p.l, p.mu, p.g_sq, p.tau1);
    let d1 = 2.0 * head * l * tau1 * tau1 * g2 + l * tau1 * tau1 * g2 / 3.0;
    let d2 = 8.0 * head * (l + mu) * tau1 * g2 + 4.0 / 3.0 * (l + mu) * tau1 * g2;
    let tau1_4 = tau1.powi(4);
    let d3 = head * (l + mu) * tau1_4 * g2 / 6.0 + (l + mu) * tau1_4 * g2 / 36.0;
    let s_k = averaging_mass(p.a, rounds);
    let initial = mu * tau1 * p.a.powi(3) * u0_dist_sq / (8.0 * s_k);
    let noise = 4.0 * k * (k + 2.0 * p.a) / (mu * s_k) * tau1 * p.sigma_bar_sq / p.n;
    let outer = 64.0 * k / (mu * mu * s_k);
    let noise_drift = outer * (l + mu) * p.sigma_bar_sq * tau1 / (3.0 * p.n);
    let compression = outer * (d1 + d2 + d3);
    Ok(CdflBound {
        s_k,
        initial,
        noise,
        noise_drift,
        d1,
        d2,
        d3,
        compression,
        total: initial + noise + noise_drift + compression,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Tau1,
    Tau2,
    Zeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AxisDifference {
    pub axis: Axis,
    /// Grid point the step starts from.
    pub tau1: f64,
    pub tau2: f64,
    pub zeta: f64,
    /// `bound(next) − bound(here)` along `axis`.
    pub difference: f64,
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub rows: Vec<AxisDifference>,
}

impl MonotonicityReport {
    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| r.violation).count()
    }
}

/// Finite differences of [`dfl_bound`] along each grid axis. The bound
/// should rise with `τ₁` and `ζ` and fall with `τ₂`. At `ζ = 0` the bound
/// does not depend on `τ₂`, so an exactly zero `τ₂` difference there is not
/// a violation.
///
/// Only the drift term depends on `τ₁`, `τ₂` and `ζ`, so differences are
/// taken on it directly; subtracting full totals would lose the tiny
/// `ζ^{2τ₂}` changes to round-off.
pub fn monotonicity_report(
    base: &BoundParams,
    tau1s: &[f64],
    tau2s: &[f64],
    zetas: &[f64],
) -> MonotonicityReport {
    let eval = |t1: f64, t2: f64, z: f64| {
        drift_term(&BoundParams {
            tau1: t1,
            tau2: t2,
            zeta: z,
            ..*base
        })
    };
    let mut rows = Vec::new();
    for (i1, &t1) in tau1s.iter().enumerate() {
        for (i2, &t2) in tau2s.iter().enumerate() {
            for (iz, &z) in zetas.iter().enumerate() {
                let here = eval(t1, t2, z);
                let mut push = |axis, next: f64| {
                    let difference = next - here;
                    let violation = match axis {
                        Axis::Tau1 | Axis::Zeta => !(difference > 0.0),
                        Axis::Tau2 => !(difference < 0.0 || (z == 0.0 && difference == 0.0)),
                    };
                    rows.push(AxisDifference {
                        axis,
                        tau1: t1,
                        tau2: t2,
                        zeta: z,
                        difference,
                        violation,
                    });
                };
                if let Some(&n1) = tau1s.get(i1 + 1) {
                    push(Axis::Tau1, eval(n1, t2, z));
                }
                if let Some(&n2) = tau2s.get(i2 + 1) {
                    push(Axis::Tau2, eval(t1, n2, z));
                }
                if let Some(&nz) = zetas.get(iz + 1) {
                    push(Axis::Zeta, eval(t1, t2, nz));
                }
            }
        }
    }
    MonotonicityReport { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference() -> BoundParams {
        BoundParams {
            eta: 0.01,
            l: 1.0,
            sigma_sq: 1.0,
            n: 10.0,
            tau1: 4.0,
            tau2: 4.0,
            zeta: 0.87,
            f_gap: 1.0,
            t: 1000.0,
            ..BoundParams::default()
        }
    }

    #[test]
    fn hand_evaluated_bound() {
        let b = dfl_bound(&reference());
        let drift = 2e-4 * (4.0 / (1.0 - 0.87f64.powi(8)) - 1.0);
        assert!((b.sync_sgd - 0.201).abs() < 1e-15);
        assert!((b.local_drift - drift).abs() < 1e-15);
        assert!((b.total - 0.20199).abs() < 1e-4);
    }

    #[test]
    fn infinite_tau2_limit() {
        let p = BoundParams {
            tau1: 1.0,
            tau2: f64::INFINITY,
            ..reference()
        };
        let b = dfl_bound(&p);
        let expected = 2.0 * p.f_gap / (p.eta * p.t) + p.eta * p.l * p.sigma_sq / p.n;
        assert!((b.total - expected).abs() <= 1e-12);
        assert_eq!(b.local_drift, 0.0);
        assert!((dfl_bound_asymptotic(&p) - p.eta * p.l * p.sigma_sq / p.n).abs() <= 1e-15);
    }

    #[test]
    fn zero_zeta_closed_form() {
        let p = BoundParams {
            zeta: 0.0,
            ..reference()
        };
        let el = p.eta * p.l;
        assert_eq!(
            dfl_bound(&p).local_drift,
            2.0 * el * el * p.sigma_sq * (p.tau1 - 1.0)
        );
    }

    #[test]
    fn asymptotic_matches_long_horizon() {
        let p = reference();
        let long = dfl_bound(&BoundParams { t: 1e12, ..p }).total;
        let asym = dfl_bound_asymptotic(&p);
        assert!((long - asym).abs() <= 1e-9);
    }

    #[test]
    fn asymptotic_decreases_in_tau2() {
        let vals: Vec<f64> = (1..=15)
            .map(|t2| {
                dfl_bound_asymptotic(&BoundParams {
                    tau2: t2 as f64,
                    ..reference()
                })
            })
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn feasibility_examples() {
        let p = BoundParams {
            zeta: 0.0,
            tau1: 1.0,
            tau2: 7.0,
            eta: 1e-3,
            l: 1.0,
            ..reference()
        };
        assert!(lr_feasible(&p).unwrap());
        assert!(!lr_feasible(&BoundParams { eta: 2.0, ..p }).unwrap());
        let point = BoundParams {
            eta: 0.002,
            l: 1.0,
            ..reference()
        };
        assert!(lr_feasible(&point).unwrap());
        assert!(lr_feasible_strict(&point).unwrap());
        assert!(matches!(
            lr_feasible(&BoundParams { zeta: 1.0, ..point }),
            Err(Error::InfeasibleTopology)
        ));
    }

    #[test]
    fn strict_condition_implies_main() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        for _ in 0..1000 {
            let p = BoundParams {
                eta: 10f64.powf(rng.random_range(-4.0..0.0)),
                l: rng.random_range(0.1..10.0),
                zeta: rng.random_range(0.0..0.999),
                beta: rng.random_range(0.0..2.0),
                n: rng.random_range(2..100) as f64,
                tau1: rng.random_range(1..20) as f64,
                tau2: rng.random_range(1..20) as f64,
                ..reference()
            };
            if lr_feasible_strict(&p).unwrap() {
                assert!(lr_feasible(&p).unwrap());
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn drift_is_infinite_on_disconnected_graph() {
        let b = dfl_bound(&BoundParams {
            zeta: 1.0,
            ..reference()
        });
        assert!(b.local_drift.is_infinite());
        assert!(!b.feasible);
    }

    fn cdfl_params() -> BoundParams {
        BoundParams {
            l: 2.0,
            mu: 0.5,
            a: 64.0,
            zeta: 0.5,
            beta: 1.0,
            delta: 0.5,
            ..BoundParams::default()
        }
    }

    #[test]
    fn averaging_mass_lower_bound() {
        for k in [10, 100, 1000] {
            let kf = k as f64;
            for a in [1.0, 16.0, 160.0] {
                assert!(averaging_mass(a, k) >= kf.powi(3) / 3.0);
            }
        }
    }

    #[test]
    fn cdfl_noise_term_halves_with_k() {
        let p = cdfl_params();
        let b1 = cdfl_bound(&p, 20_000, 1.0).unwrap();
        let b2 = cdfl_bound(&p, 40_000, 1.0).unwrap();
        let ratio = b2.noise / b1.noise;
        assert!((ratio - 0.5).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn cdfl_terms_decrease_in_tau2() {
        let base = cdfl_params();
        let mut prev: Option<CdflBound> = None;
        for t2 in 1..=10 {
            let b = cdfl_bound(
                &BoundParams {
                    tau2: t2 as f64,
                    ..base
                },
                50,
                1.0,
            )
            .unwrap();
            if let Some(pb) = prev {
                assert!(b.d1 < pb.d1 && b.d2 < pb.d2 && b.d3 < pb.d3);
            }
            prev = Some(b);
        }
    }

    #[test]
    fn cdfl_boundary_is_exact() {
        let base = cdfl_params();
        let decay = (1.0 - base.p()).powf(base.tau2);
        // theta that puts the factor exactly at one
        let edge = 1.0 / decay - 1.0;
        let at = BoundParams {
            theta: Some(edge * (1.0 + 1e-9)),
            ..base
        };
        assert!(matches!(
            cdfl_bound(&at, 10, 1.0),
            Err(Error::InsufficientCommunication { .. })
        ));
        let below = BoundParams {
            theta: Some(edge * (1.0 - 1e-9)),
            ..base
        };
        assert!(cdfl_bound(&below, 10, 1.0).unwrap().total.is_finite());
    }

    #[test]
    fn cdfl_preconditions() {
        let p = cdfl_params();
        assert!(matches!(
            cdfl_bound(&BoundParams { a: 1.0, ..p }, 5, 1.0),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            cdfl_bound(&BoundParams { zeta: 1.0, ..p }, 5, 1.0),
            Err(Error::InfeasibleTopology)
        ));
        assert!(matches!(
            cdfl_bound(&BoundParams { mu: 0.0, ..p }, 5, 1.0),
            Err(Error::UnsupportedObjective(_))
        ));
    }

    #[test]
    fn monotone_on_grid() {
        let base = BoundParams {
            eta: 1e-4,
            ..reference()
        };
        let r = monotonicity_report(
            &base,
            &[1.0, 2.0, 4.0, 8.0, 16.0],
            &[1.0, 2.0, 4.0, 8.0, 15.0],
            &[0.0, 0.5, 0.87, 0.99],
        );
        let bad: Vec<_> = r.rows.iter().filter(|d| d.violation).collect();
        assert!(bad.is_empty(), "{bad:?}");
        assert!(r
            .rows
            .iter()
            .any(|d| d.axis == Axis::Tau2 && d.zeta == 0.0 && d.difference == 0.0));
    }
}
