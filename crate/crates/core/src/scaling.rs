//! Learning curves and the saturating power law `L(n) = A(1/n + α)^β`.
//!
//! The fit minimizes the squared log error. For fixed `α` the problem
//! `log L = log A + β·log(1/n + α)` is ordinary least squares, so only `α`
//! is searched: a logarithmic grid over `(0, 1]` plus `α = 0`, then
//! golden-section refinement around the best grid cell.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid points on the log-spaced `α` grid.
pub const ALPHA_GRID_POINTS: usize = 64;
/// Smallest nonzero `α` on the grid.
pub const ALPHA_GRID_MIN: f64 = 1e-9;
/// Exponents below this are reported as "no scaling".
pub const NO_SCALING_BETA: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: u64,
    pub error: f64,
    #[serde(default)]
    pub stderr: Option<f64>,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub model_tag: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    #[serde(rename = "A")]
    pub a: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Sum of squared log errors (weighted when the fit was weighted).
    pub residual: f64,
    pub n_range: (u64, u64),
    pub no_scaling: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Weight each point by `(error/stderr)²`, the inverse variance of its log.
    #[serde(default)]
    pub stderr_weighted: bool,
}

impl LearningCurve {
    pub fn new(model_tag: impl Into<String>, points: Vec<CurvePoint>) -> Result<Self> {
        let curve = LearningCurve { model_tag: model_tag.into(), points };
        curve.validate()?;
        Ok(curve)
    }

    /// Mean and standard error over seeds; `per_seed[s][k]` is the error of
    /// seed `s` at `ns[k]`.
    pub fn from_seeds(model_tag: impl Into<String>, ns: &[u64], per_seed: &[Vec<f64>]) -> Result<Self> {
        let points = ns
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let vals: Vec<f64> = per_seed.iter().map(|s| s[k]).collect();
                let (mean, se) = mean_stderr(&vals);
                CurvePoint { n, error: mean, stderr: se, seeds: vals.len() }
            })
            .collect();
        LearningCurve::new(model_tag, points)
    }

    fn validate(&self) -> Result<()> {
        if self.points.windows(2).any(|w| w[0].n >= w[1].n) {
            return Err(Error::Data(format!("curve {:?}: n must be strictly increasing", self.model_tag)));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,error,stderr,seeds\n");
        for p in &self.points {
            let se = p.stderr.map(|v| format!("{v:e}")).unwrap_or_default();
            s.push_str(&format!("{},{:e},{},{}\n", p.n, p.error, se, p.seeds));
        }
        s
    }

    pub fn from_csv(model_tag: &str, text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut points = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let num = |i: usize| field(i).parse::<f64>().map_err(|e| Error::Data(format!("{e}: {:?}", field(i))));
            points.push(CurvePoint {
                n: num(0)? as u64,
                error: num(1)?,
                stderr: if field(2).is_empty() { None } else { Some(num(2)?) },
                seeds: num(3)? as usize,
            });
        }
        LearningCurve::new(model_tag, points)
    }
}

/// Sample mean and standard error of the mean (`None` for one value).
pub fn mean_stderr(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, None);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

struct Ols {
    log_a: f64,
    beta: f64,
    residual: f64,
}

fn ols(xs: &[f64], ys: &[f64], ws: &[f64]) -> Ols {
    let sw: f64 = ws.iter().sum();
    let mx = xs.iter().zip(ws).map(|(x, w)| w * x).sum::<f64>() / sw;
    let my = ys.iter().zip(ws).map(|(y, w)| w * y).sum::<f64>() / sw;
    let sxx: f64 = xs.iter().zip(ws).map(|(x, w)| w * (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).zip(ws).map(|((x, y), w)| w * (x - mx) * (y - my)).sum();
    let beta = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let log_a = my - beta * mx;
    let residual = xs
        .iter()
        .zip(ys)
        .zip(ws)
        .map(|((x, y), w)| w * (y - log_a - beta * x).powi(2))
        .sum();
    Ols { log_a, beta, residual }
}

struct Problem {
    inv_n: Vec<f64>,
    log_err: Vec<f64>,
    weights: Vec<f64>,
}

impl Problem {
    fn solve(&self, alpha: f64) -> Ols {
        let xs: Vec<f64> = self.inv_n.iter().map(|v| (v + alpha).ln()).collect();
        ols(&xs, &self.log_err, &self.weights)
    }
}

/// Golden-section minimization of `f` on `[lo, hi]`.
fn golden<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (hi - lo).abs() <= 1e-15 * (lo.abs() + hi.abs()) {
            break;
        }
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = f(d);
        }
    }
    if fc < fd {
        c
    } else {
        d
    }
}

pub fn fit_scaling_law(curve: &LearningCurve) -> Result<ScalingFit> {
    fit_scaling_law_with(curve, FitOptions::default())
}

pub fn fit_scaling_law_with(curve: &LearningCurve, opts: FitOptions) -> Result<ScalingFit> {
    curve.validate()?;
    let pts = &curve.points;
    if pts.len() < 3 {
        return Err(Error::TooFewPoints(pts.len()));
    }
    if let Some(p) = pts.iter().find(|p| !(p.error > 0.0)) {
        return Err(Error::NonPositiveError(p.error));
    }
    let weights = if opts.stderr_weighted {
        pts.iter()
            .map(|p| match p.stderr {
                Some(se) if se > 0.0 => Ok((p.error / se).powi(2)),
                _ => Err(Error::Data(format!("point n={} has no positive stderr for weighting", p.n))),
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![1.0; pts.len()]
    };
    let prob = Problem {
        inv_n: pts.iter().map(|p| 1.0 / p.n as f64).collect(),
        log_err: pts.iter().map(|p| p.error.ln()).collect(),
        weights,
    };

    let log_min = ALPHA_GRID_MIN.ln();
    let grid: Vec<f64> = std::iter::once(0.0)
        .chain((0..ALPHA_GRID_POINTS).map(|k| (log_min * (1.0 - k as f64 / (ALPHA_GRID_POINTS - 1) as f64)).exp()))
        .collect();
    let scores: Vec<f64> = grid.iter().map(|&a| prob.solve(a).residual).collect();
    let best = (0..grid.len()).fold(0, |b, k| if scores[k] < scores[b] { k } else { b });

    let mut candidates = vec![grid[best]];
    if best == 0 {
        candidates.push(golden(|a| prob.solve(a).residual, 0.0, grid[1]));
    } else {
        let lo = if best == 1 { grid[1] / 10.0 } else { grid[best - 1] };
        let hi = grid[(best + 1).min(grid.len() - 1)];
        let t = golden(|t| prob.solve(t.exp()).residual, lo.ln(), hi.ln());
        candidates.push(t.exp());
        if best == 1 {
            candidates.push(0.0);
        }
    }
    let alpha = candidates
        .into_iter()
        .map(|a| (a, prob.solve(a).residual))
        .fold((0.0, f64::INFINITY), |acc, c| if c.1 < acc.1 { c } else { acc })
        .0;
    let sol = prob.solve(alpha);
    Ok(ScalingFit {
        a: sol.log_a.exp(),
        alpha,
        beta: sol.beta,
        residual: sol.residual,
        n_range: (pts[0].n, pts[pts.len() - 1].n),
        no_scaling: sol.beta < NO_SCALING_BETA,
    })
}

/// `A(1/n + α)^β`.
pub fn predict_error(fit: &ScalingFit, n: f64) -> f64 {
    fit.a * (1.0 / n + fit.alpha).powf(fit.beta)
}

/// The fitted curve sampled at `points` log-spaced sizes over its fit range.
pub fn fit_overlay(fit: &ScalingFit, points: usize) -> Vec<(f64, f64)> {
    let (lo, hi) = ((fit.n_range.0 as f64).ln(), (fit.n_range.1 as f64).ln());
    (0..points)
        .map(|k| {
            let t = if points > 1 { k as f64 / (points - 1) as f64 } else { 0.0 };
            let n = (lo + t * (hi - lo)).exp();
            (n, predict_error(fit, n))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub beta_stderr: f64,
    pub replicates: usize,
    pub skipped: usize,
}

/// Bootstrap standard error of `β`: seeds are resampled with replacement,
/// the seed-mean curve is refit, and the spread of the refit exponents is
/// reported. Replicates whose mean curve hits zero error are skipped.
pub fn bootstrap_beta(ns: &[u64], per_seed: &[Vec<f64>], replicates: usize, seed: u64) -> Result<BootstrapSummary> {
    let s = per_seed.len();
    if s < 2 {
        return Err(Error::InsufficientSamples { requested: 2, available: s });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut betas = Vec::with_capacity(replicates);
    let mut skipped = 0;
    for _ in 0..replicates {
        let draw: Vec<Vec<f64>> = (0..s).map(|_| per_seed[rng.random_range(0..s)].clone()).collect();
        let curve = LearningCurve::from_seeds("bootstrap", ns, &draw)?;
        match fit_scaling_law(&curve) {
            Ok(f) => betas.push(f.beta),
            Err(Error::NonPositiveError(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if betas.len() < 2 {
        return Err(Error::InsufficientSamples { requested: 2, available: betas.len() });
    }
    let m = betas.iter().sum::<f64>() / betas.len() as f64;
    let var = betas.iter().map(|b| (b - m).powi(2)).sum::<f64>() / (betas.len() - 1) as f64;
    Ok(BootstrapSummary { beta_stderr: var.sqrt(), replicates: betas.len(), skipped })
}
