//! Coupled perturbation experiments: how far does the solution move when one
//! ingredient of the equation is shifted by a constant `eps`?
//!
//! For each `eps` the base and perturbed equations are driven by the same
//! initial values and Brownian paths, and
//! `D(eps) = max_t mean |X_t - X~_t|^p` is recorded. A log-log least-squares
//! fit of `D` against `eps` estimates the scaling exponent.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{Benchmark, ExperimentSpec, InitialLaw};
use crate::paths::{BrownianPath, TimeGrid};
use crate::sve::{CoefficientFn, SveProblem};

/// Monte-Carlo batches used for the sampling part of the slope error.
pub const N_GROUPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// `mu + eps`
    Drift,
    /// `sigma + eps`
    Diffusion,
    /// `K_mu + eps` and `K_sigma + eps`
    Kernel,
    /// `g + eps`
    G,
}

impl std::str::FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drift" => Ok(Channel::Drift),
            "diffusion" => Ok(Channel::Diffusion),
            "kernel" => Ok(Channel::Kernel),
            "g" => Ok(Channel::G),
            other => Err(Error::Config {
                key: "channel".into(),
                msg: format!("unknown perturbation channel `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPlan {
    pub base: SveProblem,
    pub initial: InitialLaw,
    pub channel: Channel,
    pub eps: Vec<f64>,
    pub p: f64,
    pub n_mc: usize,
    pub grid: TimeGrid,
}

fn is_lipschitz(f: &CoefficientFn) -> bool {
    match f {
        CoefficientFn::SqrtAbs => false,
        CoefficientFn::Shifted { base, .. } => is_lipschitz(base),
        _ => true,
    }
}

impl PerturbationPlan {
    /// Default scan values: 1.5 decades, roughly log-spaced.
    pub fn default_eps() -> Vec<f64> {
        vec![0.01, 0.02, 0.05, 0.1, 0.2, 0.32]
    }

    /// The one-dimensional OU benchmark with its square-root diffusion
    /// replaced by the smoothed, Lipschitz `(x^2 + 0.05^2)^(1/4)`.
    pub fn lipschitz_ou() -> SveProblem {
        let mut p = ExperimentSpec::new(Benchmark::Ou1d).problem;
        p.sigma = CoefficientFn::SmoothSqrtAbs { delta: 0.05 };
        p
    }

    pub fn new(base: SveProblem, channel: Channel, n_mc: usize) -> Self {
        Self {
            base,
            initial: ExperimentSpec::new(Benchmark::Ou1d).initial,
            channel,
            eps: Self::default_eps(),
            p: 2.0,
            n_mc,
            grid: ExperimentSpec::default_grid(),
        }
    }

    /// Drift shift on the Lipschitz OU problem.
    pub fn drift_shift(n_mc: usize) -> Self {
        Self::new(Self::lipschitz_ou(), Channel::Drift, n_mc)
    }

    /// Shift of `g` with both coefficients switched off, so that
    /// `X - X~ = -xi eps` at every node.
    pub fn g_shift(n_mc: usize) -> Self {
        let mut base = Self::lipschitz_ou();
        base.mu = CoefficientFn::Constant { value: 0.0 };
        base.sigma = CoefficientFn::Constant { value: 0.0 };
        Self::new(base, Channel::G, n_mc)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 2.0) {
            return Err(Error::Validation(format!("p = {} must be at least 2", self.p)));
        }
        if self.n_mc < 1000 {
            return Err(Error::Validation(format!("n_mc = {} below 1000", self.n_mc)));
        }
        if self.eps.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::Validation("eps values must be positive".into()));
        }
        if self.eps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("eps list must be strictly ascending".into()));
        }
        let (lo, hi) = (self.eps[0], *self.eps.last().unwrap_or(&0.0));
        if self.eps.len() < 3 || (hi / lo).log10() < 1.5 - 1e-12 {
            return Err(Error::Validation(
                "eps list must have at least 3 values spanning 1.5 decades".into(),
            ));
        }
        if !is_lipschitz(&self.base.mu) || !is_lipschitz(&self.base.sigma) {
            return Err(Error::Validation(
                "stability scans need Lipschitz coefficients".into(),
            ));
        }
        if self.initial.dim() != self.base.d {
            return Err(Error::DimMismatch(format!(
                "initial law has dimension {}, problem expects {}",
                self.initial.dim(),
                self.base.d
            )));
        }
        Ok(())
    }

    /// The perturbed problem for shift `eps`.
    pub fn perturbed(&self, eps: f64) -> SveProblem {
        let mut p = self.base.clone();
        match self.channel {
            Channel::Drift => p.mu = p.mu.shifted(eps),
            Channel::Diffusion => p.sigma = p.sigma.shifted(eps),
            Channel::Kernel => {
                p.kernel_mu = p.kernel_mu.shifted(eps);
                p.kernel_sigma = p.kernel_sigma.shifted(eps);
            }
            Channel::G => p.g = p.g.shifted(eps),
        }
        p
    }

    /// Norm of the perturbation measured as in the bound. A constant kernel
    /// shift has `L^(2q)` norm `eps T^((p-2)/(2p))` on `[0, T]`; the other
    /// channels have sup norm `eps`.
    pub fn abscissa(&self, eps: f64) -> f64 {
        match self.channel {
            Channel::Kernel => eps * self.grid.horizon().powf((self.p - 2.0) / (2.0 * self.p)),
            _ => eps,
        }
    }
}

/// Per-node sums of `|X - X~|^p` over samples `range` for each problem in
/// `perturbed`.
fn group_sums(
    plan: &PerturbationPlan,
    perturbed: &[SveProblem],
    range: std::ops::Range<usize>,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let nodes = plan.grid.n_nodes();
    let mut sums = vec![vec![0.0; nodes]; perturbed.len()];
    for i in range {
        let noise = BrownianPath::sample_indexed(plan.grid, plan.base.m, seed, i as u64)?;
        let xi = plan.initial.sample(seed, i as u64);
        let x = plan.base.solve(&xi, &noise).map_err(|e| e.at_sample(i))?;
        for (prob, acc) in perturbed.iter().zip(sums.iter_mut()) {
            let y = prob.solve(&xi, &noise).map_err(|e| e.at_sample(i))?;
            for (k, a) in acc.iter_mut().enumerate() {
                let dist2: f64 = x.at(k).iter().zip(y.at(k)).map(|(u, v)| (u - v) * (u - v)).sum();
                *a += dist2.powf(plan.p / 2.0);
            }
        }
    }
    Ok(sums)
}

/// `D(eps)` for arbitrary shifts (zero allowed), computed on `n` coupled pairs.
pub fn coupled_distance(plan: &PerturbationPlan, eps: &[f64], n: usize, seed: u64) -> Result<Vec<f64>> {
    let perturbed: Vec<SveProblem> = eps.iter().map(|&e| plan.perturbed(e)).collect();
    let sums = group_sums(plan, &perturbed, 0..n, seed)?;
    Ok(sums
        .iter()
        .map(|s| s.iter().fold(0.0f64, |m, v| m.max(v / n as f64)))
        .collect())
}

/// Least-squares slope of `y` on `x` and its residual standard error.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let se = if x.len() > 2 {
        let ssr: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| {
                let r = b - intercept - slope * a;
                r * r
            })
            .sum();
        (ssr / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (slope, intercept, se)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    pub channel: Channel,
    pub p: f64,
    pub n_mc: usize,
    pub eps: Vec<f64>,
    /// Perturbation norm used as the fit abscissa.
    pub norm: Vec<f64>,
    pub d: Vec<f64>,
    /// Slope fitted on the first `k + 1` points; `None` for `k = 0`.
    pub slope_running: Vec<Option<f64>>,
    pub slope: f64,
    /// Combined regression and Monte-Carlo standard error of `slope`.
    pub slope_stderr: f64,
    /// `C` in `D = C norm^p`, fitted on the two smallest shifts.
    pub c_estimate: f64,
}

impl StabilityResult {
    /// Whether `D <= factor C norm^p` at every scanned shift.
    pub fn bound_holds(&self, factor: f64) -> bool {
        self.norm
            .iter()
            .zip(&self.d)
            .all(|(x, d)| *d <= factor * self.c_estimate * x.powf(self.p))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epsilon,D,slope_running")?;
        for ((e, d), s) in self.eps.iter().zip(&self.d).zip(&self.slope_running) {
            match s {
                Some(s) => writeln!(out, "{e:.16e},{d:.16e},{s:.16e}")?,
                None => writeln!(out, "{e:.16e},{d:.16e},")?,
            }
        }
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "channel": self.channel,
            "p": self.p,
            "n_mc": self.n_mc,
            "slope": self.slope,
            "slope_stderr": self.slope_stderr,
            "c_estimate": self.c_estimate,
        })
    }
}

fn log_points(norm: &[f64], d: &[f64]) -> (Vec<f64>, Vec<f64>) {
    norm.iter()
        .zip(d)
        .filter(|(_, d)| d.is_finite() && **d > 0.0)
        .map(|(x, d)| (x.ln(), d.ln()))
        .unzip()
}

pub fn stability_scan(plan: &PerturbationPlan, seed: u64) -> Result<StabilityResult> {
    plan.validate()?;
    let perturbed: Vec<SveProblem> = plan.eps.iter().map(|&e| plan.perturbed(e)).collect();
    let n = plan.n_mc;
    let bounds: Vec<_> = (0..N_GROUPS)
        .map(|g| (g * n / N_GROUPS)..((g + 1) * n / N_GROUPS))
        .collect();
    let groups = bounds
        .into_par_iter()
        .map(|r| group_sums(plan, &perturbed, r, seed))
        .collect::<Result<Vec<_>>>()?;

    let nodes = plan.grid.n_nodes();
    let mut total = vec![vec![0.0; nodes]; plan.eps.len()];
    for g in &groups {
        for (t, s) in total.iter_mut().zip(g) {
            for (a, b) in t.iter_mut().zip(s) {
                *a += b;
            }
        }
    }
    let sup = |sums: &[f64], count: usize| sums.iter().fold(0.0f64, |m, v| m.max(v / count as f64));
    let d: Vec<f64> = total.iter().map(|s| sup(s, n)).collect();
    let norm: Vec<f64> = plan.eps.iter().map(|&e| plan.abscissa(e)).collect();

    let (lx, ly) = log_points(&norm, &d);
    if lx.len() < 3 {
        return Err(Error::DegenerateFit(lx.len()));
    }
    let (slope, _, se_reg) = fit_line(&lx, &ly);

    // Spread of the slope across Monte-Carlo batches.
    let group_slopes: Vec<f64> = groups
        .iter()
        .enumerate()
        .filter_map(|(gi, g)| {
            let count = (gi + 1) * n / N_GROUPS - gi * n / N_GROUPS;
            let dg: Vec<f64> = g.iter().map(|s| sup(s, count)).collect();
            let (gx, gy) = log_points(&norm, &dg);
            (gx.len() >= 2).then(|| fit_line(&gx, &gy).0)
        })
        .collect();
    let se_mc = if group_slopes.len() > 1 {
        let k = group_slopes.len() as f64;
        let mean = group_slopes.iter().sum::<f64>() / k;
        let var = group_slopes.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (k - 1.0);
        (var / k).sqrt()
    } else {
        0.0
    };

    let slope_running = (0..plan.eps.len())
        .map(|k| {
            let (x, y) = log_points(&norm[..=k], &d[..=k]);
            (x.len() >= 2).then(|| fit_line(&x, &y).0)
        })
        .collect();

    let c_estimate = {
        let logs: Vec<f64> = norm
            .iter()
            .zip(&d)
            .filter(|(_, d)| **d > 0.0)
            .take(2)
            .map(|(x, d)| d.ln() - plan.p * x.ln())
            .collect();
        (logs.iter().sum::<f64>() / logs.len() as f64).exp()
    };

    Ok(StabilityResult {
        channel: plan.channel,
        p: plan.p,
        n_mc: n,
        eps: plan.eps.clone(),
        norm,
        d,
        slope_running,
        slope,
        slope_stderr: (se_reg * se_reg + se_mc * se_mc).sqrt(),
        c_estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shift_gives_zero_distance() {
        let plan = PerturbationPlan::drift_shift(1000);
        let d = coupled_distance(&plan, &[0.0, 0.1], 50, 3).unwrap();
        assert_eq!(d[0], 0.0);
        assert!(d[1] > 0.0);
    }

    #[test]
    fn g_shift_matches_moment_of_xi() {
        let plan = PerturbationPlan::g_shift(1000);
        let res = stability_scan(&plan, 11).unwrap();
        let moment: f64 = (0..1000u64)
            .map(|i| plan.initial.sample(11, i)[0].abs().powi(2))
            .sum::<f64>()
            / 1000.0;
        for (e, d) in res.eps.iter().zip(&res.d) {
            let want = moment * e * e;
            assert!((d - want).abs() / want < 1e-9, "eps {e}: {d} vs {want}");
        }
        assert!((res.slope - 2.0).abs() < 1e-6);
    }

    #[test]
    fn plan_validation() {
        let mut plan = PerturbationPlan::drift_shift(1000);
        assert!(plan.validate().is_ok());
        plan.eps = vec![0.01, 0.02, 0.05, 0.1, 0.2, 0.3];
        assert!(plan.validate().is_err());
        plan.eps = vec![0.01, 0.5, 0.1];
        assert!(plan.validate().is_err());
        let mut plan = PerturbationPlan::drift_shift(1000);
        plan.base.sigma = CoefficientFn::SqrtAbs;
        assert!(plan.validate().is_err());
        let mut plan = PerturbationPlan::drift_shift(999);
        assert!(plan.validate().is_err());
        plan.n_mc = 1000;
        plan.p = 1.5;
        assert!(plan.validate().is_err());
    }

    #[test]
    fn line_fit_recovers_exact_slope() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 1.5 - 2.0 * v).collect();
        let (s, b, se) = fit_line(&x, &y);
        assert!((s + 2.0).abs() < 1e-12 && (b - 1.5).abs() < 1e-12 && se < 1e-12);
    }

    #[test]
    fn kernel_norm_factor() {
        let mut plan = PerturbationPlan::new(PerturbationPlan::lipschitz_ou(), Channel::Kernel, 1000);
        assert_eq!(plan.abscissa(0.1), 0.1);
        plan.p = 4.0;
        assert!((plan.abscissa(0.1) - 0.1 * 5f64.powf(0.25)).abs() < 1e-15);
    }

    #[test]
    fn csv_header_and_rows() {
        let plan = PerturbationPlan::g_shift(1000);
        let res = stability_scan(&plan, 1).unwrap();
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "epsilon,D,slope_running");
        assert_eq!(lines.len(), 1 + plan.eps.len());
        assert!(lines[1].ends_with(','));
    }
}
