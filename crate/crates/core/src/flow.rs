//! Rectified-flow interpolation and loss, the deterministic sampler, the
//! marginal-preserving SDE sampler and its Gaussian transition densities.
//!
//! Time runs from noise at `t = 1` to data at `t = 0`; a step goes from `t`
//! to `t − Δt`. The velocity target is `x1 − x0`, so the deterministic update
//! is `x − v·Δt` and the SDE mean collapses to it when `σ = 0`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, Tape, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite state in row {row} at step {step}")]
    NonFinite { row: usize, step: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("velocity model: {0}")]
    Model(String),
}

/// A velocity field `v(x_t, t)` evaluated on a batch of rows.
pub trait VelocityField {
    /// `x_t` is `[m, D]`, `t` holds one time per row; returns `[m, D]`.
    fn velocity<'t>(&self, tape: &'t Tape, x_t: &Tensor, t: &[f64]) -> Result<Var<'t>, FlowError>;
}

/// One discretised SDE step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    /// Start time of the step, clamped into the coefficient-safe range.
    pub t: f64,
    /// Step length from the unclamped grid.
    pub dt: f64,
    /// Diffusion coefficient `a·√(t/(1−t))` at the clamped time.
    pub sigma: f64,
}

/// Discretised timesteps with their step sizes and diffusion coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub noise_level: f64,
    pub t_clamp: (f64, f64),
    pub steps: Vec<ScheduleStep>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

pub const DEFAULT_T_CLAMP: (f64, f64) = (1e-3, 0.96);

pub fn diffusion_coefficient(noise_level: f64, t: f64) -> f64 {
    noise_level * (t / (1.0 - t)).sqrt()
}

/// Uniform grid `t_i = (T − i)/T`; each start time is clamped into
/// `t_clamp` before the diffusion coefficient is evaluated, while `Δt`
/// comes from the unclamped grid.
pub fn build_schedule(
    steps: usize,
    noise_level: f64,
    t_clamp: (f64, f64),
) -> Result<NoiseSchedule, FlowError> {
    if steps == 0 {
        return Err(FlowError::Invalid(
            "schedule needs at least one step".into(),
        ));
    }
    let (lo, hi) = t_clamp;
    if !(0.0 < lo && lo < hi && hi < 1.0) {
        return Err(FlowError::Invalid(format!(
            "clamp range ({lo}, {hi}) must satisfy 0 < lo < hi < 1"
        )));
    }
    if !(noise_level >= 0.0 && noise_level.is_finite()) {
        return Err(FlowError::Invalid(format!("noise level {noise_level}")));
    }
    let grid: Vec<f64> = (0..=steps)
        .map(|i| (steps - i) as f64 / steps as f64)
        .collect();
    let steps = grid
        .windows(2)
        .map(|w| {
            let t = w[0].clamp(lo, hi);
            ScheduleStep {
                t,
                dt: w[0] - w[1],
                sigma: diffusion_coefficient(noise_level, t),
            }
        })
        .collect();
    Ok(NoiseSchedule {
        noise_level,
        t_clamp,
        steps,
    })
}

/// `(1 − t)·x0 + t·x1`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor, FlowError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::TimeOutOfRange(t));
    }
    Ok(x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)?)
}

/// Mean-square flow-matching regression `‖v(x_t, t) − (x1 − x0)‖²`, with one
/// time per row of the `[m, D]` batch.
pub fn fm_loss<'t, M: VelocityField + ?Sized>(
    tape: &'t Tape,
    model: &M,
    x0: &Tensor,
    x1: &Tensor,
    t: &[f64],
) -> Result<Var<'t>, FlowError> {
    x0.check_same_shape(x1)?;
    let (rows, cols) = x0.as_matrix_dims();
    if t.len() != rows {
        return Err(FlowError::Invalid(format!(
            "{} times for {rows} rows",
            t.len()
        )));
    }
    let mut xt = Vec::with_capacity(rows * cols);
    for (r, &tr) in t.iter().enumerate() {
        if !(0.0..=1.0).contains(&tr) {
            return Err(FlowError::TimeOutOfRange(tr));
        }
        xt.extend(
            x0.row(r)
                .iter()
                .zip(x1.row(r))
                .map(|(a, b)| (1.0 - tr) * a + tr * b),
        );
    }
    let xt = Tensor::new(x0.shape().to_vec(), xt)?;
    let target = x1.zip_map(x0, |a, b| a - b)?;
    let v = model.velocity(tape, &xt, t)?;
    if v.value().shape() != target.shape() {
        return Err(FlowError::Invalid(format!(
            "velocity shape {:?} vs target {:?}",
            v.value().shape(),
            target.shape()
        )));
    }
    Ok((v - tape.constant(target)).square().mean())
}

/// Deterministic Euler step from `t` to `t − Δt`.
pub fn ode_step(x_t: &Tensor, v: &Tensor, dt: f64) -> Result<Tensor, FlowError> {
    if !(dt >= 0.0) {
        return Err(FlowError::Invalid(format!("step size {dt}")));
    }
    Ok(x_t.zip_map(v, |x, v| x - v * dt)?)
}

/// Multipliers `(c_x, c_v)` with `μ = c_x·x_t − c_v·v`.
pub fn sde_coefficients(t: f64, dt: f64, sigma: f64) -> Result<(f64, f64), FlowError> {
    if !(t > 0.0 && t < 1.0) {
        return Err(FlowError::Invalid(format!(
            "SDE coefficients need t in (0, 1), got {t}"
        )));
    }
    let s2 = sigma * sigma;
    Ok((
        1.0 - s2 * dt / (2.0 * t),
        (1.0 + s2 * (1.0 - t) / (2.0 * t)) * dt,
    ))
}

/// Transition mean of the marginal-preserving SDE.
pub fn sde_mean(
    x_t: &Tensor,
    v: &Tensor,
    t: f64,
    dt: f64,
    sigma: f64,
) -> Result<Tensor, FlowError> {
    let (cx, cv) = sde_coefficients(t, dt, sigma)?;
    Ok(x_t.zip_map(v, |x, v| x * cx - v * cv)?)
}

/// Per-element Gaussian log-densities and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionLogProb {
    pub per_element: Vec<f64>,
    pub total: f64,
}

impl TransitionLogProb {
    pub fn spatial_mean(&self) -> f64 {
        self.total / self.per_element.len() as f64
    }
}

fn first_non_finite_row(x: &Tensor) -> Option<usize> {
    let (rows, _) = x.as_matrix_dims();
    (0..rows).find(|&r| x.row(r).iter().any(|v| !v.is_finite()))
}

fn gaussian_terms(sigma: f64, dt: f64) -> (f64, f64) {
    let var = sigma * sigma * dt;
    let log_norm = (sigma * (2.0 * PI * dt).sqrt()).ln();
    (1.0 / (2.0 * var), log_norm)
}

/// `Σ_d −(x_next − μ)²/(2σ²Δt) − ln(σ√(2πΔt))`.
pub fn transition_log_prob(
    x_next: &[f64],
    mean: &[f64],
    sigma: f64,
    dt: f64,
) -> Result<TransitionLogProb, FlowError> {
    if !(sigma * dt.sqrt() > 0.0) {
        return Err(FlowError::Invalid(format!(
            "σ√Δt must be positive (σ={sigma}, Δt={dt})"
        )));
    }
    if x_next.len() != mean.len() {
        return Err(FlowError::Invalid("length mismatch".into()));
    }
    let (inv_two_var, log_norm) = gaussian_terms(sigma, dt);
    let per_element: Vec<f64> = x_next
        .iter()
        .zip(mean)
        .map(|(x, m)| {
            let d = x - m;
            (d * d) * -inv_two_var + -log_norm
        })
        .collect();
    let total = per_element.iter().sum();
    Ok(TransitionLogProb { per_element, total })
}

/// One SDE transition; returns the next state and its log-probability.
pub fn sde_step(
    x_t: &Tensor,
    v: &Tensor,
    t: f64,
    dt: f64,
    sigma: f64,
    noise: &Tensor,
) -> Result<(Tensor, TransitionLogProb), FlowError> {
    if !(sigma > 0.0) {
        return Err(FlowError::Invalid(format!(
            "σ must be positive, got {sigma}"
        )));
    }
    let mean = sde_mean(x_t, v, t, dt, sigma)?;
    let scale = sigma * dt.sqrt();
    let next = mean.zip_map(noise, |m, e| m + scale * e)?;
    let lp = transition_log_prob(next.data(), mean.data(), sigma, dt)?;
    Ok((next, lp))
}

/// SDE mean built on the tape so gradients reach the velocity.
pub fn sde_mean_var<'t>(
    tape: &'t Tape,
    x_t: &Tensor,
    v: Var<'t>,
    step: &ScheduleStep,
) -> Result<Var<'t>, FlowError> {
    let (cx, cv) = sde_coefficients(step.t, step.dt, step.sigma)?;
    Ok(tape.constant(x_t.clone()).scale(cx) - v.scale(cv))
}

/// Row-wise summed transition log-probabilities on the tape (`[m]`).
///
/// Performs the same floating-point operations, in the same order, as
/// [`transition_log_prob`], so stored and replayed values agree bitwise.
pub fn log_prob_rows<'t>(
    tape: &'t Tape,
    x_next: &Tensor,
    mean: Var<'t>,
    step: &ScheduleStep,
) -> Var<'t> {
    let (inv_two_var, log_norm) = gaussian_terms(step.sigma, step.dt);
    (tape.constant(x_next.clone()) - mean)
        .square()
        .scale(-inv_two_var)
        .add_scalar(-log_norm)
        .row_sum()
}

/// One stored SDE transition of a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub step: ScheduleStep,
    pub state: Vec<f64>,
    pub mean: Vec<f64>,
    pub noise: Vec<f64>,
    /// Behaviour-policy log-probability summed over elements.
    pub log_prob: f64,
}

/// A stored SDE rollout of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial_noise: Vec<f64>,
    pub steps: Vec<TrajectoryStep>,
    pub final_sample: Vec<f64>,
}

impl Trajectory {
    /// State after step `i` (the input of step `i + 1`).
    pub fn next_state(&self, i: usize) -> &[f64] {
        match self.steps.get(i + 1) {
            Some(s) => &s.state,
            None => &self.final_sample,
        }
    }

    pub fn dim(&self) -> usize {
        self.initial_noise.len()
    }
}

fn stack_rows(rows: &[&[f64]]) -> Tensor {
    let cols = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        data.extend_from_slice(r);
    }
    Tensor::matrix(rows.len(), cols, data)
}

/// Runs the SDE sampler on every row of `initial_noise` (`[m, D]`).
///
/// `draw_noise(step)` must return a standard-normal `[m, D]` tensor.
pub fn sample_sde<M: VelocityField + ?Sized>(
    model: &M,
    initial_noise: &Tensor,
    schedule: &NoiseSchedule,
    mut draw_noise: impl FnMut(usize) -> Tensor,
) -> Result<Vec<Trajectory>, FlowError> {
    let (rows, cols) = initial_noise.as_matrix_dims();
    let mut x = Tensor::matrix(rows, cols, initial_noise.data().to_vec());
    let mut trajs: Vec<Trajectory> = (0..rows)
        .map(|r| Trajectory {
            initial_noise: x.row(r).to_vec(),
            steps: Vec::new(),
            final_sample: Vec::new(),
        })
        .collect();
    for (i, step) in schedule.steps.iter().enumerate() {
        if !(step.sigma > 0.0) {
            return Err(FlowError::Invalid(format!(
                "σ must be positive at step {i}"
            )));
        }
        let tape = Tape::new();
        let v = model.velocity(&tape, &x, &vec![step.t; rows])?;
        let mean = sde_mean_var(&tape, &x, v, step)?;
        let mean_val = mean.value();
        let noise = draw_noise(i);
        if noise.as_matrix_dims() != (rows, cols) {
            return Err(FlowError::Invalid("noise shape".into()));
        }
        let scale = step.sigma * step.dt.sqrt();
        let next = mean_val.zip_map(&noise, |m, e| m + scale * e)?;
        if let Some(row) = first_non_finite_row(&next) {
            return Err(FlowError::NonFinite { row, step: i });
        }
        let lp = log_prob_rows(&tape, &next, mean, step).value();
        for (r, traj) in trajs.iter_mut().enumerate() {
            traj.steps.push(TrajectoryStep {
                step: *step,
                state: x.row(r).to_vec(),
                mean: mean_val.row(r).to_vec(),
                noise: noise.row(r).to_vec(),
                log_prob: lp.data()[r],
            });
        }
        x = next;
    }
    for (r, traj) in trajs.iter_mut().enumerate() {
        traj.final_sample = x.row(r).to_vec();
    }
    Ok(trajs)
}

/// Deterministic Euler integration of every row from `t = 1` to `t = 0`.
pub fn sample_ode<M: VelocityField + ?Sized>(
    model: &M,
    initial_noise: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor, FlowError> {
    let (rows, cols) = initial_noise.as_matrix_dims();
    let mut x = Tensor::matrix(rows, cols, initial_noise.data().to_vec());
    for (i, step) in schedule.steps.iter().enumerate() {
        let tape = Tape::new();
        let v = model.velocity(&tape, &x, &vec![step.t; rows])?.value();
        x = ode_step(&x, &v, step.dt)?;
        if let Some(row) = first_non_finite_row(&x) {
            return Err(FlowError::NonFinite { row, step: i });
        }
    }
    Ok(x)
}

/// Assembles the `[m, D]` batch of states at step `i` for the given
/// trajectories.
pub fn states_at(trajs: &[&Trajectory], i: usize) -> Tensor {
    stack_rows(
        &trajs
            .iter()
            .map(|t| t.steps[i].state.as_slice())
            .collect::<Vec<_>>(),
    )
}

/// The `[m, D]` batch of post-step states at step `i`.
pub fn next_states_at(trajs: &[&Trajectory], i: usize) -> Tensor {
    stack_rows(&trajs.iter().map(|t| t.next_state(i)).collect::<Vec<_>>())
}

/// Exact velocity of the rectified flow between a diagonal Gaussian data
/// distribution `N(m, diag(s²))` and standard-normal noise.
#[derive(Debug, Clone)]
pub struct GaussianFlow {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianFlow {
    /// Marginal mean and variance of `x_t` per dimension.
    pub fn marginal(&self, t: f64) -> Vec<(f64, f64)> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| ((1.0 - t) * m, (1.0 - t) * (1.0 - t) * s * s + t * t))
            .collect()
    }
}

impl VelocityField for GaussianFlow {
    fn velocity<'t>(&self, tape: &'t Tape, x_t: &Tensor, t: &[f64]) -> Result<Var<'t>, FlowError> {
        let (rows, cols) = x_t.as_matrix_dims();
        if cols != self.mean.len() || t.len() != rows {
            return Err(FlowError::Invalid("gaussian flow dimension".into()));
        }
        let mut out = Vec::with_capacity(rows * cols);
        for (r, &tr) in t.iter().enumerate() {
            for (d, &x) in x_t.row(r).iter().enumerate() {
                let (m, s2) = (self.mean[d], self.std[d] * self.std[d]);
                // E[x1 − x0 | x_t = x]
                let var = (1.0 - tr) * (1.0 - tr) * s2 + tr * tr;
                let gain = (tr - (1.0 - tr) * s2) / var;
                out.push(-m + gain * (x - (1.0 - tr) * m));
            }
        }
        Ok(tape.constant(Tensor::matrix(rows, cols, out)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x0 = Tensor::vector(vec![0.0, 2.0]);
        let x1 = Tensor::vector(vec![4.0, -2.0]);
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1);
        assert_eq!(interpolate(&x0, &x1, 0.25).unwrap().data()[0], 1.0);
        assert!(matches!(
            interpolate(&x0, &x1, 1.5),
            Err(FlowError::TimeOutOfRange(_))
        ));
    }

    struct Fixed(Tensor);
    impl VelocityField for Fixed {
        fn velocity<'t>(
            &self,
            tape: &'t Tape,
            _x: &Tensor,
            _t: &[f64],
        ) -> Result<Var<'t>, FlowError> {
            Ok(tape.constant(self.0.clone()))
        }
    }

    #[test]
    fn fm_loss_cases() {
        let x0 = Tensor::matrix(1, 2, vec![0.0, 1.0]);
        let x1 = Tensor::matrix(1, 2, vec![1.0, 2.0]);
        let tape = Tape::new();
        let exact = Fixed(Tensor::matrix(1, 2, vec![1.0, 1.0]));
        assert_eq!(
            fm_loss(&tape, &exact, &x0, &x1, &[0.3])
                .unwrap()
                .value()
                .item(),
            0.0
        );
        let zero = Fixed(Tensor::matrix(1, 2, vec![0.0, 0.0]));
        assert_eq!(
            fm_loss(&tape, &zero, &x0, &x1, &[0.3])
                .unwrap()
                .value()
                .item(),
            1.0
        );
        let bad = Fixed(Tensor::matrix(1, 3, vec![0.0; 3]));
        assert!(fm_loss(&tape, &bad, &x0, &x1, &[0.3]).is_err());
    }

    #[test]
    fn ode_step_cases() {
        let x = Tensor::vector(vec![1.0]);
        assert_eq!(ode_step(&x, &Tensor::vector(vec![0.0]), 0.5).unwrap(), x);
        assert_eq!(
            ode_step(&x, &Tensor::vector(vec![2.0]), 0.5)
                .unwrap()
                .data(),
            &[0.0]
        );
        let v = Tensor::vector(vec![0.7]);
        let half = ode_step(&ode_step(&x, &v, 0.25).unwrap(), &v, 0.25).unwrap();
        let full = ode_step(&x, &v, 0.5).unwrap();
        assert!((half.data()[0] - full.data()[0]).abs() < 1e-15);
    }

    #[test]
    fn sde_mean_hand_value() {
        let x = Tensor::vector(vec![1.0]);
        let v = Tensor::vector(vec![1.0]);
        let mu = sde_mean(&x, &v, 0.5, 0.125, 0.7).unwrap();
        assert!((mu.data()[0] - 0.783125).abs() < 1e-15);
        // σ = 0 collapses to the deterministic drift
        let mu0 = sde_mean(&x, &v, 0.5, 0.125, 0.0).unwrap();
        assert_eq!(mu0.data()[0], 1.0 - 0.125);
        assert_eq!(sde_mean(&x, &v, 0.5, 0.0, 0.7).unwrap(), x);
        assert!(sde_mean(&x, &v, 0.0, 0.1, 0.7).is_err());
    }

    #[test]
    fn sde_step_zero_noise_and_inverse() {
        let x = Tensor::vector(vec![0.3, -0.4]);
        let v = Tensor::vector(vec![1.1, 0.2]);
        let (next, _) = sde_step(&x, &v, 0.6, 0.1, 0.8, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(next, sde_mean(&x, &v, 0.6, 0.1, 0.8).unwrap());

        let eps = Tensor::vector(vec![0.5, -1.5]);
        let (next, lp) = sde_step(&x, &v, 0.6, 0.1, 0.8, &eps).unwrap();
        let mu = sde_mean(&x, &v, 0.6, 0.1, 0.8).unwrap();
        let scale = 0.8 * 0.1f64.sqrt();
        for d in 0..2 {
            let rec = (next.data()[d] - mu.data()[d]) / scale;
            assert!((rec - eps.data()[d]).abs() < 1e-12);
        }
        let direct = transition_log_prob(next.data(), mu.data(), 0.8, 0.1).unwrap();
        assert!((lp.total - direct.total).abs() < 1e-12);
        assert!(sde_step(&x, &v, 0.6, 0.1, 0.0, &eps).is_err());
    }

    #[test]
    fn log_prob_hand_values() {
        let lp = transition_log_prob(&[0.3], &[0.3], 1.0, 1.0).unwrap();
        assert!((lp.total + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        let a = transition_log_prob(&[0.0; 5], &[0.0; 5], 0.5, 0.2).unwrap();
        let b = transition_log_prob(&[0.0; 5], &[0.0; 5], 1.0, 0.2).unwrap();
        assert!((a.total - b.total - 5.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn schedule_values() {
        let s = build_schedule(8, 0.7, DEFAULT_T_CLAMP).unwrap();
        assert_eq!(s.len(), 8);
        assert!(s.steps.iter().all(|st| (st.dt - 0.125).abs() < 1e-15));
        assert!(s.steps.iter().all(|st| st.t > 0.0 && st.t < 1.0));
        assert!((diffusion_coefficient(0.7, 0.5) - 0.7).abs() < 1e-15);
        assert!((diffusion_coefficient(0.7, 0.8) - 1.4).abs() < 1e-12);
        assert!(build_schedule(0, 0.7, DEFAULT_T_CLAMP).is_err());
        assert_eq!(s.steps[0].t, 0.96);
    }

    #[test]
    fn tape_log_prob_matches_plain_bitwise() {
        let step = ScheduleStep {
            t: 0.625,
            dt: 0.125,
            sigma: diffusion_coefficient(0.7, 0.625),
        };
        let x = Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.9, -1.1, 0.05]);
        let v = Tensor::matrix(2, 3, vec![0.4, 0.1, -0.7, 0.2, 0.3, -0.2]);
        let next = Tensor::matrix(2, 3, vec![0.0, 0.2, 0.1, 0.5, -0.9, 0.4]);
        let tape = Tape::new();
        let mu = sde_mean_var(&tape, &x, tape.constant(v.clone()), &step).unwrap();
        let rows = log_prob_rows(&tape, &next, mu, &step).value();
        let plain_mu = sde_mean(&x, &v, step.t, step.dt, step.sigma).unwrap();
        assert_eq!(*mu.value(), plain_mu);
        for r in 0..2 {
            let lp =
                transition_log_prob(next.row(r), plain_mu.row(r), step.sigma, step.dt).unwrap();
            assert_eq!(lp.total, rows.data()[r]);
        }
    }
}
