//! Ground-truth simulation of stochastic Volterra equations
//!
//! ```text
//! X_t = xi g(t) + int_0^t K_mu(t-s) mu(s, X_s) ds + int_0^t K_sigma(t-s) sigma(s, X_s) dB_s
//! ```
//!
//! discretized with the explicit left-point Volterra Euler-Maruyama scheme.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::paths::{BrownianPath, SamplePath, TimeGrid};

/// Convolution kernel `K(lag)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    Constant { value: f64 },
    /// `K(r) = r`
    LinearLag,
    /// `K(r) = exp(-theta r)`
    Exponential { theta: f64 },
    /// `K(r) = r^(-alpha) / Gamma(alpha)`, singular at zero.
    PowerGamma { alpha: f64 },
    /// `K(r) = 1` for `r <= tau`, `-1` otherwise.
    PiecewiseSign { tau: f64 },
    /// `K(r) + eps`
    Shifted { base: Box<Kernel>, eps: f64 },
}

impl Kernel {
    pub fn validate(&self) -> Result<()> {
        match self {
            Kernel::PowerGamma { alpha } if !(*alpha > 0.0 && *alpha < 0.5) => Err(
                Error::Validation(format!("power kernel exponent {alpha} outside (0, 1/2)")),
            ),
            Kernel::PiecewiseSign { tau } if !(*tau > 0.0) => Err(Error::Validation(format!(
                "sign-switch lag {tau} must be positive"
            ))),
            Kernel::Shifted { base, .. } => base.validate(),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, lag: f64) -> Result<f64> {
        if lag < 0.0 {
            return Err(Error::Validation(format!("negative kernel lag {lag}")));
        }
        Ok(match self {
            Kernel::Constant { value } => *value,
            Kernel::LinearLag => lag,
            Kernel::Exponential { theta } => (-theta * lag).exp(),
            Kernel::PowerGamma { alpha } => {
                if lag == 0.0 {
                    return Err(Error::SingularAtZero);
                }
                lag.powf(-alpha) / gamma(*alpha)
            }
            Kernel::PiecewiseSign { tau } => {
                if lag <= *tau {
                    1.0
                } else {
                    -1.0
                }
            }
            Kernel::Shifted { base, eps } => base.eval(lag)? + eps,
        })
    }

    pub fn shifted(self, eps: f64) -> Kernel {
        Kernel::Shifted {
            base: Box::new(self),
            eps,
        }
    }

    /// Values at lags `k dt` for `k = 0..=n`; entry 0 is unused by the
    /// scheme and left at zero.
    pub fn table(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        let mut out = vec![0.0; grid.n_nodes()];
        for (k, v) in out.iter_mut().enumerate().skip(1) {
            *v = self.eval(grid.time(k))?;
        }
        Ok(out)
    }
}

/// Deterministic initial-condition profile `g(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    Constant { value: f64 },
    /// `exp(-theta t)`
    ExpDecay { theta: f64 },
    Shifted { base: Box<Profile>, eps: f64 },
}

impl Profile {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Profile::Constant { value } => *value,
            Profile::ExpDecay { theta } => (-theta * t).exp(),
            Profile::Shifted { base, eps } => base.eval(t) + eps,
        }
    }

    pub fn shifted(self, eps: f64) -> Profile {
        Profile::Shifted {
            base: Box::new(self),
            eps,
        }
    }
}

/// Componentwise coefficient `f(t, x_r)`.
///
/// As a drift it maps `x` to the vector `(f(t, x_1), ..., f(t, x_d))`. As a
/// diffusion it yields the `d x m` matrix with `f(t, x_r)` on the diagonal
/// (`m = d`) or as a single column (`m = 1`), zeros elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoefficientFn {
    Identity,
    /// `level - x`
    AffineReversion { level: f64 },
    /// `sqrt(|x|)`
    SqrtAbs,
    /// `(x^2 + delta^2)^(1/4)`, a Lipschitz surrogate for `sqrt(|x|)`.
    SmoothSqrtAbs { delta: f64 },
    Constant { value: f64 },
    Shifted { base: Box<CoefficientFn>, eps: f64 },
}

impl CoefficientFn {
    #[inline]
    pub fn apply(&self, t: f64, x: f64) -> f64 {
        match self {
            CoefficientFn::Identity => x,
            CoefficientFn::AffineReversion { level } => level - x,
            CoefficientFn::SqrtAbs => x.abs().sqrt(),
            CoefficientFn::SmoothSqrtAbs { delta } => (x * x + delta * delta).sqrt().sqrt(),
            CoefficientFn::Constant { value } => *value,
            CoefficientFn::Shifted { base, eps } => base.apply(t, x) + eps,
        }
    }

    pub fn shifted(self, eps: f64) -> CoefficientFn {
        CoefficientFn::Shifted {
            base: Box::new(self),
            eps,
        }
    }

    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        for (o, &v) in out.iter_mut().zip(x) {
            *o = self.apply(t, v);
        }
    }

    /// Writes `sigma(t, x) . db` (a `d`-vector) into `out`.
    pub fn diffusion_times(&self, t: f64, x: &[f64], db: &[f64], out: &mut [f64]) {
        let m = db.len();
        for (r, (o, &v)) in out.iter_mut().zip(x).enumerate() {
            let dbr = if m == 1 { db[0] } else { db[r] };
            *o = self.apply(t, v) * dbr;
        }
    }
}

/// The data of one SVE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SveProblem {
    pub d: usize,
    pub m: usize,
    pub g: Profile,
    pub kernel_mu: Kernel,
    pub kernel_sigma: Kernel,
    pub mu: CoefficientFn,
    pub sigma: CoefficientFn,
}

impl SveProblem {
    pub fn new(
        d: usize,
        m: usize,
        g: Profile,
        kernel_mu: Kernel,
        kernel_sigma: Kernel,
        mu: CoefficientFn,
        sigma: CoefficientFn,
    ) -> Result<Self> {
        let g0 = g.eval(0.0);
        if (g0 - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("g(0) = {g0}, expected 1")));
        }
        let p = Self {
            d,
            m,
            g,
            kernel_mu,
            kernel_sigma,
            mu,
            sigma,
        };
        p.check_shapes()?;
        Ok(p)
    }

    fn check_shapes(&self) -> Result<()> {
        if self.d == 0 || self.m == 0 {
            return Err(Error::BadDims("d and m must be positive".into()));
        }
        if self.m != 1 && self.m != self.d {
            return Err(Error::BadDims(format!(
                "componentwise diffusion needs m = 1 or m = d, got d = {}, m = {}",
                self.d, self.m
            )));
        }
        self.kernel_mu.validate()?;
        self.kernel_sigma.validate()
    }

    /// Solve along one noise realization.
    pub fn solve(&self, xi: &[f64], noise: &BrownianPath) -> Result<SamplePath> {
        euler_maruyama(self, xi, noise)
    }
}

/// Left-point Volterra Euler-Maruyama:
///
/// `X_i = xi g(t_i) + sum_{j<i} K_mu((i-j)dt) mu(t_j, X_j) dt + sum_{j<i} K_sigma((i-j)dt) sigma(t_j, X_j) dB_j`
///
/// The smallest lag used is `dt`, so singular kernels are never evaluated at zero.
pub fn euler_maruyama(prob: &SveProblem, xi: &[f64], noise: &BrownianPath) -> Result<SamplePath> {
    let (d, m) = (prob.d, prob.m);
    if noise.dim() != m {
        return Err(Error::DimMismatch(format!(
            "noise has dimension {}, problem expects {m}",
            noise.dim()
        )));
    }
    if xi.len() != d {
        return Err(Error::DimMismatch(format!(
            "initial value has length {}, problem expects {d}",
            xi.len()
        )));
    }
    let grid = *noise.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let k_mu = prob.kernel_mu.table(&grid)?;
    let k_sigma = prob.kernel_sigma.table(&grid)?;

    let mut x = vec![0.0; grid.n_nodes() * d];
    // drift[j] = mu(t_j, X_j) dt, shock[j] = sigma(t_j, X_j) dB_j
    let mut drift = vec![0.0; n * d];
    let mut shock = vec![0.0; n * d];

    for i in 0..=n {
        let t = grid.time(i);
        let gi = prob.g.eval(t);
        let row = &mut x[i * d..(i + 1) * d];
        for (o, &v) in row.iter_mut().zip(xi) {
            *o = v * gi;
        }
        for j in 0..i {
            let km = k_mu[i - j];
            let ks = k_sigma[i - j];
            let a = &drift[j * d..(j + 1) * d];
            let b = &shock[j * d..(j + 1) * d];
            for r in 0..d {
                row[r] += km * a[r] + ks * b[r];
            }
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinitePath {
                node: i,
                sample: None,
            });
        }
        if i < n {
            let a = &mut drift[i * d..(i + 1) * d];
            prob.mu.drift(t, row, a);
            for v in a.iter_mut() {
                *v *= dt;
            }
            prob.sigma
                .diffusion_times(t, row, noise.increment(i), &mut shock[i * d..(i + 1) * d]);
        }
    }
    SamplePath::new(grid, d, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Gamma(0.4) from standard tables.
    const GAMMA_04: f64 = 2.218_159_543_757_688;

    #[test]
    fn kernel_values() {
        assert_eq!(Kernel::Exponential { theta: 1.0 }.eval(0.0).unwrap(), 1.0);
        assert_eq!(Kernel::PiecewiseSign { tau: 1.25 }.eval(2.0).unwrap(), -1.0);
        assert_eq!(Kernel::PiecewiseSign { tau: 1.25 }.eval(1.25).unwrap(), 1.0);
        assert_eq!(Kernel::LinearLag.eval(0.7).unwrap(), 0.7);
        let v = Kernel::PowerGamma { alpha: 0.4 }.eval(0.1).unwrap();
        let expected = 0.1f64.powf(-0.4) / GAMMA_04;
        assert!((v - expected).abs() < 1e-12 * expected);
        assert!(matches!(
            Kernel::PowerGamma { alpha: 0.4 }.eval(0.0),
            Err(Error::SingularAtZero)
        ));
        assert_eq!(
            Kernel::LinearLag.shifted(0.5).eval(1.0).unwrap(),
            1.5
        );
    }

    #[test]
    fn kernel_validation() {
        assert!(Kernel::PowerGamma { alpha: 0.6 }.validate().is_err());
        assert!(Kernel::PiecewiseSign { tau: 0.0 }.validate().is_err());
        assert!(Kernel::PowerGamma { alpha: 0.4 }.validate().is_ok());
    }

    #[test]
    fn g_must_start_at_one() {
        let r = SveProblem::new(
            1,
            1,
            Profile::Constant { value: 2.0 },
            Kernel::LinearLag,
            Kernel::LinearLag,
            CoefficientFn::Identity,
            CoefficientFn::Identity,
        );
        assert!(r.is_err());
    }

    #[test]
    fn zero_coefficients_reproduce_profile() {
        let prob = SveProblem::new(
            1,
            1,
            Profile::ExpDecay { theta: 1.0 },
            Kernel::Exponential { theta: 1.0 },
            Kernel::Exponential { theta: 1.0 },
            CoefficientFn::Constant { value: 0.0 },
            CoefficientFn::Constant { value: 0.0 },
        )
        .unwrap();
        let grid = TimeGrid::uniform(5.0, 0.1).unwrap();
        let w = BrownianPath::sample(grid, 1, 3).unwrap();
        let x = euler_maruyama(&prob, &[2.0], &w).unwrap();
        for i in 0..grid.n_nodes() {
            assert_eq!(x.at(i)[0], 2.0 * (-grid.time(i)).exp());
        }
    }

    #[test]
    fn unit_kernels_match_classical_stepper() {
        let prob = SveProblem::new(
            2,
            2,
            Profile::Constant { value: 1.0 },
            Kernel::Constant { value: 1.0 },
            Kernel::Constant { value: 1.0 },
            CoefficientFn::AffineReversion { level: 2.0 },
            CoefficientFn::SqrtAbs,
        )
        .unwrap();
        let grid = TimeGrid::uniform(5.0, 0.1).unwrap();
        let w = BrownianPath::sample(grid, 2, 11).unwrap();
        let xi = [1.5, 3.0];
        let x = euler_maruyama(&prob, &xi, &w).unwrap();

        // dX = (2 - X) dt + sqrt|X| dB, stepped directly.
        let mut y = xi.to_vec();
        for i in 0..grid.n_steps() {
            let db = w.increment(i);
            let next: Vec<f64> = (0..2)
                .map(|r| y[r] + (2.0 - y[r]) * grid.dt() + y[r].abs().sqrt() * db[r])
                .collect();
            y = next;
            for r in 0..2 {
                let got = x.at(i + 1)[r];
                assert!((got - y[r]).abs() < 1e-12 * (1.0 + y[r].abs()), "node {}", i + 1);
            }
        }
    }

    #[test]
    fn dimension_checks() {
        let prob = SveProblem::new(
            1,
            1,
            Profile::Constant { value: 1.0 },
            Kernel::LinearLag,
            Kernel::LinearLag,
            CoefficientFn::Identity,
            CoefficientFn::Identity,
        )
        .unwrap();
        let grid = TimeGrid::uniform(1.0, 0.1).unwrap();
        let w2 = BrownianPath::sample(grid, 2, 0).unwrap();
        assert!(matches!(
            euler_maruyama(&prob, &[1.0], &w2),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn overflow_is_reported() {
        let prob = SveProblem::new(
            1,
            1,
            Profile::Constant { value: 1.0 },
            Kernel::Constant { value: 1e300 },
            Kernel::Constant { value: 0.0 },
            CoefficientFn::Identity,
            CoefficientFn::Identity,
        )
        .unwrap();
        let grid = TimeGrid::uniform(1.0, 0.1).unwrap();
        let w = BrownianPath::sample(grid, 1, 0).unwrap();
        let err = euler_maruyama(&prob, &[1.0], &w).unwrap_err();
        assert!(matches!(err, Error::NonFinitePath { .. }));
    }
}
