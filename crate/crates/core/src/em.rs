//! Isotropic Gaussian-mixture EM with a fixed shared variance, and an
//! empirical probe of the EM contraction bound
//! `|theta_n - theta*| <= kappa^n |theta_0 - theta*| + eps / (1 - kappa)`.

use std::f64::consts::PI;
use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_VARIANCE: f64 = 1.0;
/// Column mass below which a cluster is treated as empty.
pub const DEGENERATE_MASS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState {
    /// `K x D` cluster centers.
    pub centers: Tensor,
    /// Mixing weights, summing to one.
    pub weights: Vec<f64>,
    pub variance: f64,
}

impl MixtureState {
    pub fn new(centers: Tensor, weights: Vec<f64>, variance: f64) -> Result<Self> {
        let (k, _) = centers.dims2()?;
        if weights.len() != k {
            return Err(Error::Param(format!("{} weights for {k} centers", weights.len())));
        }
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::Param(format!("variance must be positive, got {variance}")));
        }
        if weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(Error::Param("mixing weights must lie in [0, 1]".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Param(format!("mixing weights sum to {total}")));
        }
        Ok(Self { centers, weights, variance })
    }

    pub fn uniform(centers: Tensor, variance: f64) -> Result<Self> {
        let (k, _) = centers.dims2()?;
        Self::new(centers, vec![1.0 / k as f64; k], variance)
    }

    /// The mixture whose E-step reproduces the prototyping softmax
    /// `softmax_k(x . theta_k / sqrt(D))`: variance `sqrt(D)` and weights
    /// `pi_k ~ exp(|theta_k|^2 / (2 sigma^2))`, which cancel the
    /// `-|theta_k|^2 / (2 sigma^2)` part of the Gaussian exponent.
    pub fn matched_to_attention(centers: Tensor) -> Result<Self> {
        let (k, d) = centers.dims2()?;
        let variance = (d as f64).sqrt();
        let logits: Vec<f64> = (0..k)
            .map(|i| centers.row(i).iter().map(|v| v * v).sum::<f64>() / (2.0 * variance))
            .collect();
        let weights = Tensor::vector(&logits)?.softmax_axis(0)?.into_data();
        let total: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / total).collect();
        Self::new(centers, weights, variance)
    }

    pub fn components(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    fn log_weight(&self, k: usize) -> f64 {
        self.weights[k].max(f64::MIN_POSITIVE).ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    /// `N x K` posterior membership, rows summing to one.
    pub r: Tensor,
    /// `N x K` unnormalised log posteriors `ln pi_k - |x_i - theta_k|^2 / (2 sigma^2)`.
    pub logits: Tensor,
    /// Rows that underflowed and were reset to the uniform distribution.
    pub underflow_rows: Vec<usize>,
}

fn check_data(data: &Tensor, state: &MixtureState) -> Result<(usize, usize)> {
    let (n, d) = data.dims2()?;
    if d != state.dim() {
        return Err(Error::Shape {
            op: "em",
            lhs: data.shape().to_vec(),
            rhs: state.centers.shape().to_vec(),
        });
    }
    Ok((n, d))
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn e_step(data: &Tensor, state: &MixtureState) -> Result<Responsibilities> {
    let (n, _) = check_data(data, state)?;
    let k = state.components();
    let mut logits = Vec::with_capacity(n * k);
    let mut r = Vec::with_capacity(n * k);
    let mut underflow_rows = Vec::new();
    for i in 0..n {
        let row: Vec<f64> = (0..k)
            .map(|j| state.log_weight(j) - squared_distance(data.row(i), state.centers.row(j)) / (2.0 * state.variance))
            .collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            underflow_rows.push(i);
            r.extend(std::iter::repeat(1.0 / k as f64).take(k));
        } else {
            r.extend(exps.iter().map(|e| e / total));
        }
        logits.extend(row);
    }
    Ok(Responsibilities {
        r: Tensor::new(&[n, k], r)?,
        logits: Tensor::new(&[n, k], logits)?,
        underflow_rows,
    })
}

/// Responsibility-weighted centers and column-mean weights. Clusters whose
/// column mass is below [`DEGENERATE_MASS`] keep their previous center and
/// are listed in the second return value.
pub fn m_step(data: &Tensor, resp: &Responsibilities, prev: &MixtureState) -> Result<(MixtureState, Vec<usize>)> {
    let (n, d) = check_data(data, prev)?;
    let (rn, k) = resp.r.dims2()?;
    if rn != n || k != prev.components() {
        return Err(Error::Shape {
            op: "m_step",
            lhs: data.shape().to_vec(),
            rhs: resp.r.shape().to_vec(),
        });
    }
    let mut centers = prev.centers.data().to_vec();
    let mut weights = vec![0.0; k];
    let mut degenerate = Vec::new();
    for j in 0..k {
        let mass: f64 = (0..n).map(|i| resp.r.at2(i, j)).sum();
        weights[j] = mass / n as f64;
        if mass < DEGENERATE_MASS {
            degenerate.push(j);
            continue;
        }
        for c in 0..d {
            let acc: f64 = (0..n).map(|i| resp.r.at2(i, j) * data.at2(i, c)).sum();
            centers[j * d + c] = acc / mass;
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    let state = MixtureState::new(Tensor::new(&[k, d], centers)?, weights, prev.variance)?;
    Ok((state, degenerate))
}

/// Total data log-likelihood under the mixture.
pub fn log_likelihood(data: &Tensor, state: &MixtureState) -> Result<f64> {
    let resp = e_step(data, state)?;
    let (n, k) = resp.logits.dims2()?;
    let norm = 0.5 * state.dim() as f64 * (2.0 * PI * state.variance).ln();
    let mut total = 0.0;
    for i in 0..n {
        let row = resp.logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += max + row.iter().map(|s| (s - max).exp()).sum::<f64>().ln() - norm;
    }
    debug_assert_eq!(k, state.components());
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct EmRun {
    pub state: MixtureState,
    /// Log-likelihood of the initial state followed by one entry per iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// Set if any M-step met an empty cluster.
    pub degenerate: bool,
}

pub fn run_em(data: &Tensor, init: &MixtureState, max_iter: usize, tol: f64) -> Result<EmRun> {
    if max_iter == 0 {
        return Err(Error::Param("max_iter must be at least 1".into()));
    }
    let mut state = init.clone();
    let mut trace = vec![log_likelihood(data, &state)?];
    let mut degenerate = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let resp = e_step(data, &state).map_err(|e| diverged(iterations, e))?;
        let (next, empty) = m_step(data, &resp, &state).map_err(|e| diverged(iterations, e))?;
        degenerate |= !empty.is_empty();
        state = next;
        let ll = log_likelihood(data, &state).map_err(|e| diverged(iterations, e))?;
        if !ll.is_finite() {
            return Err(Error::EmDiverged {
                iteration: iterations,
                msg: format!("log-likelihood {ll}"),
            });
        }
        let gain = ll - trace[trace.len() - 1];
        trace.push(ll);
        if gain < tol {
            break;
        }
    }
    Ok(EmRun { state, trace, iterations, degenerate })
}

fn diverged(iteration: usize, e: Error) -> Error {
    Error::EmDiverged { iteration, msg: e.to_string() }
}

/// One EM update of the centers with weights and variance held fixed, as a
/// map on the flattened `K * D` center vector.
pub fn em_center_operator<'a>(data: &'a Tensor, weights: &[f64], variance: f64) -> impl Fn(&[f64]) -> Vec<f64> + 'a {
    let weights = weights.to_vec();
    move |theta: &[f64]| {
        let k = weights.len();
        let d = theta.len() / k;
        let apply = || -> Result<Vec<f64>> {
            let state = MixtureState::new(Tensor::new(&[k, d], theta.to_vec())?, weights.clone(), variance)?;
            let resp = e_step(data, &state)?;
            Ok(m_step(data, &resp, &state)?.0.centers.into_data())
        };
        apply().unwrap_or_else(|_| vec![f64::NAN; theta.len()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    Contracting { kappa: f64 },
    NonContracting,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRow {
    pub n: usize,
    pub dist: f64,
    pub bound: f64,
    pub satisfied: bool,
}

/// Relative resolution below which distances to the fixed point are
/// rounding noise and excluded from the contraction estimate.
pub const DISTANCE_FLOOR: f64 = 1e-12;
/// Relative slack allowed when comparing a distance with its bound.
pub const BOUND_SLACK: f64 = 1e-9;
pub const ASSUMED_CONDITIONS: &str = "first-order stability and strong concavity of the population objective assumed";

#[derive(Debug, Clone)]
pub struct ConvergenceProbe {
    pub iterates: Vec<Vec<f64>>,
    pub fixed_point: Vec<f64>,
    pub verdict: Verdict,
    /// Statistical-error estimate; zero without a population operator.
    pub epsilon: f64,
    /// `|theta_0 - theta*|`.
    pub radius: f64,
    /// Failure-probability budget, recorded only.
    pub delta: f64,
    /// Empty when the trajectory does not contract.
    pub rows: Vec<ProbeRow>,
    pub assumptions: &'static str,
}

impl ConvergenceProbe {
    pub fn kappa(&self) -> Option<f64> {
        match self.verdict {
            Verdict::Contracting { kappa } => Some(kappa),
            Verdict::NonContracting => None,
        }
    }

    pub fn certified(&self) -> bool {
        self.kappa().is_some() && self.rows.iter().all(|r| r.satisfied)
    }

    /// Writes `n,dist_to_fixed_point,bound_value,satisfied`.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "n,dist_to_fixed_point,bound_value,satisfied")?;
        for r in &self.rows {
            writeln!(out, "{},{:e},{:e},{}", r.n, r.dist, r.bound, u8::from(r.satisfied))?;
        }
        Ok(())
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Iterates `operator` from `init` for `n_iters` steps and checks the
/// geometric bound at every step against `fixed_point`. The contraction
/// coefficient is the largest observed ratio of consecutive distances to
/// the fixed point. When `population` is given, the statistical error is
/// the largest observed gap between the two operators along the trajectory.
pub fn probe_convergence(
    operator: impl Fn(&[f64]) -> Vec<f64>,
    init: &[f64],
    fixed_point: &[f64],
    n_iters: usize,
    population: Option<&dyn Fn(&[f64]) -> Vec<f64>>,
    delta: f64,
) -> Result<ConvergenceProbe> {
    if fixed_point.len() != init.len() {
        return Err(Error::Param("fixed point and initial iterate differ in length".into()));
    }
    let mut iterates = vec![init.to_vec()];
    for _ in 0..n_iters {
        let next = operator(&iterates[iterates.len() - 1]);
        if next.len() != init.len() {
            return Err(Error::Param("operator changed the parameter length".into()));
        }
        iterates.push(next);
    }
    let dists: Vec<f64> = iterates.iter().map(|t| distance(t, fixed_point)).collect();
    let radius = dists[0];
    let scale = fixed_point.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    let floor = DISTANCE_FLOOR * scale;

    let mut epsilon = 0.0;
    if let Some(pop) = population {
        for t in &iterates[..n_iters] {
            epsilon = f64::max(epsilon, distance(&operator(t), &pop(t)));
        }
    }

    let mut probe = ConvergenceProbe {
        iterates,
        fixed_point: fixed_point.to_vec(),
        verdict: Verdict::NonContracting,
        epsilon,
        radius,
        delta,
        rows: Vec::new(),
        assumptions: ASSUMED_CONDITIONS,
    };
    if dists.iter().any(|d| !d.is_finite()) || !epsilon.is_finite() {
        return Ok(probe);
    }
    let kappa = dists
        .windows(2)
        .filter(|w| w[0] > floor)
        .map(|w| w[1] / w[0])
        .fold(0.0, f64::max);
    if kappa >= 1.0 {
        return Ok(probe);
    }
    let kappa = kappa.max(f64::MIN_POSITIVE);
    probe.verdict = Verdict::Contracting { kappa };
    let slack = BOUND_SLACK * radius.max(floor);
    probe.rows = dists
        .iter()
        .enumerate()
        .map(|(n, &dist)| {
            let bound = kappa.powi(n as i32) * radius + epsilon / (1.0 - kappa);
            ProbeRow { n, dist, bound, satisfied: dist <= bound + slack }
        })
        .collect();
    Ok(probe)
}

/// Applies `operator` `n` times.
pub fn iterate(operator: impl Fn(&[f64]) -> Vec<f64>, init: &[f64], n: usize) -> Vec<f64> {
    (0..n).fold(init.to_vec(), |t, _| operator(&t))
}
