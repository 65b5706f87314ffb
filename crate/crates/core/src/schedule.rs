//! Noise schedules, forward diffusion, DDIM updates and pivot replacement.
//!
//! Timesteps are 1-indexed: `t = 1..=T` are noisy states and `t = 0` is the
//! clean state with `alpha_bar(0) = 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{bilinear_upsample, Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Linear betas from 1e-4 to 2e-2.
    Linear,
    /// Squared-cosine alpha_bar with offset 0.008.
    Cosine,
}

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 2e-2;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: Option<ScheduleKind>,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    pivot_step: usize,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, num_steps: usize, pivot_step: usize) -> Result<Self> {
        if num_steps < 2 {
            return Err(Error::invalid(format!("schedule needs T >= 2, got {num_steps}")));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..num_steps)
                .map(|i| LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (num_steps - 1) as f64)
                .collect(),
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    ((t / num_steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                (1..=num_steps)
                    .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-8, 0.999))
                    .collect()
            }
        };
        let mut s = Self::from_betas(betas, pivot_step)?;
        s.kind = Some(kind);
        Ok(s)
    }

    /// Schedule from explicit per-step variances, each in `[0, 1)`.
    pub fn from_betas(betas: Vec<f64>, pivot_step: usize) -> Result<Self> {
        let steps = betas.len();
        if steps < 2 {
            return Err(Error::invalid(format!("schedule needs T >= 2, got {steps}")));
        }
        if pivot_step == 0 || pivot_step >= steps {
            return Err(Error::invalid(format!(
                "pivot step K must satisfy 0 < K < T, got K={pivot_step}, T={steps}"
            )));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::invalid(format!("beta {b} outside [0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            kind: None,
            betas,
            alpha_bars,
            pivot_step,
        })
    }

    pub fn kind(&self) -> Option<ScheduleKind> {
        self.kind
    }

    /// `T`.
    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    /// `K`.
    pub fn pivot_step(&self) -> usize {
        self.pivot_step
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar(t)` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.num_steps())));
        }
        Ok(())
    }
}

/// `sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse<F: Float>(z0: &Tensor<F>, t: usize, eps: &Tensor<F>, s: &NoiseSchedule) -> Result<Tensor<F>> {
    s.check_t(t)?;
    let ab = s.alpha_bar(t);
    z0.axpby(F::lit(ab.sqrt()), eps, F::lit((1.0 - ab).sqrt()))
}

/// Forward diffusion with one timestep per batch item.
pub fn forward_diffuse_batch<F: Float>(z0: &Tensor<F>, ts: &[usize], eps: &Tensor<F>, s: &NoiseSchedule) -> Result<Tensor<F>> {
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "forward_diffuse",
            lhs: z0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let b = z0.shape().first().copied().unwrap_or(0);
    if ts.len() != b {
        return Err(Error::invalid(format!("{} timesteps for batch of {b}", ts.len())));
    }
    let per = z0.numel() / b.max(1);
    let mut out = Vec::with_capacity(z0.numel());
    for (i, &t) in ts.iter().enumerate() {
        s.check_t(t)?;
        let ab = s.alpha_bar(t);
        let (a, c) = (F::lit(ab.sqrt()), F::lit((1.0 - ab).sqrt()));
        let zs = &z0.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        out.extend(zs.iter().zip(es).map(|(&z, &e)| a * z + c * e));
    }
    Tensor::new(z0.shape(), out)
}

/// One DDIM update from `t` to `t_prev < t`. With `eta = 0` the update is
/// deterministic and `noise` is ignored.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<F: Float>(
    z_t: &Tensor<F>,
    eps_pred: &Tensor<F>,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
    eta: f64,
    noise: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    if t_prev >= t {
        return Err(Error::invalid(format!("ddim step needs t_prev < t, got {t_prev} >= {t}")));
    }
    s.check_t(t)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta must lie in [0, 1], got {eta}")));
    }
    let ab_t = s.alpha_bar(t);
    let ab_prev = s.alpha_bar(t_prev);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).max(0.0).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    // z_prev = sqrt(ab_prev) * x0_hat + dir * eps, x0_hat = (z - sqrt(1-ab_t) eps) / sqrt(ab_t)
    let c_z = F::lit(ab_prev.sqrt() / ab_t.sqrt());
    let c_eps = F::lit(dir - ab_prev.sqrt() * (1.0 - ab_t).sqrt() / ab_t.sqrt());
    let out = z_t.axpby(c_z, eps_pred, c_eps)?;
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| Error::invalid("ddim step with eta > 0 needs a noise tensor"))?;
        return out.axpby(F::one(), noise, F::lit(sigma));
    }
    Ok(out)
}

/// Clean-sample estimate implied by an epsilon prediction.
pub fn predict_x0<F: Float>(z_t: &Tensor<F>, eps_pred: &Tensor<F>, t: usize, s: &NoiseSchedule) -> Result<Tensor<F>> {
    s.check_t(t)?;
    let ab = s.alpha_bar(t);
    z_t.axpby(F::lit(1.0 / ab.sqrt()), eps_pred, F::lit(-(1.0 - ab).sqrt() / ab.sqrt()))
}

/// Epsilon implied by the clean-sample estimate clamped to [-1, 1]; feeding
/// it to `ddim_step` performs the clipped update.
pub fn clipped_eps<F: Float>(z_t: &Tensor<F>, eps_pred: &Tensor<F>, t: usize, s: &NoiseSchedule) -> Result<Tensor<F>> {
    let one = F::one();
    let x0 = predict_x0(z_t, eps_pred, t, s)?.map(|v| v.max(-one).min(one));
    let ab = s.alpha_bar(t);
    let c = (1.0 - ab).sqrt();
    z_t.axpby(F::lit(1.0 / c), &x0, F::lit(-ab.sqrt() / c))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DdimPlan {
    pub eta: f64,
    pub start_step: usize,
    /// Strictly decreasing, first element `start_step`, last element 1.
    pub step_indices: Vec<usize>,
}

impl DdimPlan {
    /// `steps` timesteps uniformly spaced over `[1, start_step]`. Asking for
    /// more steps than `start_step` yields every timestep.
    pub fn new(start_step: usize, steps: usize, eta: f64) -> Result<Self> {
        if start_step == 0 || steps == 0 {
            return Err(Error::invalid("ddim plan needs start_step >= 1 and steps >= 1"));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid(format!("eta must lie in [0, 1], got {eta}")));
        }
        let steps = steps.min(start_step);
        let step_indices = if steps == 1 {
            vec![start_step]
        } else {
            (0..steps)
                .map(|i| {
                    let frac = (steps - 1 - i) as f64 / (steps - 1) as f64;
                    1 + ((start_step - 1) as f64 * frac).round() as usize
                })
                .collect()
        };
        Ok(Self {
            eta,
            start_step,
            step_indices,
        })
    }

    /// `(t, t_prev)` pairs ending at `t_prev = 0`.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.step_indices
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.step_indices.get(i + 1).copied().unwrap_or(0)))
    }
}

/// Pivot replacement at step `K`: `sqrt(ab_K) up(z0_prev) + sqrt(1 - ab_K) eps`.
pub fn pivot_replace<F: Float, R: Rng + ?Sized>(z0_prev: &Tensor<F>, s: &NoiseSchedule, factor: usize, rng: &mut R) -> Result<Tensor<F>> {
    pivot_replace_at(z0_prev, s, s.pivot_step(), factor, rng)
}

/// Pivot replacement at an arbitrary step in `1..=T`.
pub fn pivot_replace_at<F: Float, R: Rng + ?Sized>(
    z0_prev: &Tensor<F>,
    s: &NoiseSchedule,
    step: usize,
    factor: usize,
    rng: &mut R,
) -> Result<Tensor<F>> {
    s.check_t(step)?;
    let up = bilinear_upsample(z0_prev, factor)?;
    let eps = Tensor::randn(up.shape(), rng);
    forward_diffuse(&up, step, &eps, s)
}

/// Integer per-axis factor between a stage-(r-1) tensor and a stage-r shape.
pub fn stage_factor(prev: &[usize], next: &[usize]) -> Result<usize> {
    let mismatch = || Error::ShapeMismatch {
        op: "stage_factor",
        lhs: prev.to_vec(),
        rhs: next.to_vec(),
    };
    let (&[b, c, h, w], &[b2, c2, h2, w2]) = (prev, next) else {
        return Err(mismatch());
    };
    if b != b2 || c != c2 || h == 0 || w == 0 || h2 % h != 0 || h2 / h != w2 / w || w2 % w != 0 {
        return Err(mismatch());
    }
    Ok(h2 / h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn default() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleKind::Linear, 1000, 700).unwrap()
    }

    #[test]
    fn default_schedule_invariants() {
        for s in [default(), NoiseSchedule::new(ScheduleKind::Cosine, 1000, 700).unwrap()] {
            assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
            assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
            assert!(s.alpha_bar(1) > 0.99);
            assert!(s.alpha_bar(1000) < 0.01);
        }
    }

    #[test]
    fn clipping_only_moves_out_of_range_estimates() {
        let s = default();
        let x0 = Tensor::<f64>::new(&[1, 1, 1, 3], vec![-0.5, 0.2, 0.9]).unwrap();
        let eps = Tensor::<f64>::randn(&[1, 1, 1, 3], &mut stream(2, &[]));
        let z = forward_diffuse(&x0, 400, &eps, &s).unwrap();
        assert!(clipped_eps(&z, &eps, 400, &s).unwrap().max_abs_diff(&eps).unwrap() < 1e-9);

        let wild = eps.scale(3.0);
        let fixed = clipped_eps(&z, &wild, 400, &s).unwrap();
        let est = predict_x0(&z, &fixed, 400, &s).unwrap();
        assert!(est.data().iter().all(|v| v.abs() <= 1.0 + 1e-9));
        assert!(predict_x0(&z, &wild, 400, &s).unwrap().data().iter().any(|v| v.abs() > 1.0));
    }

    #[test]
    fn cumulative_product_identity() {
        let s = default();
        let direct: f64 = (1..=500).map(|t| 1.0 - s.beta(t)).product();
        assert!((s.alpha_bar(500) - direct).abs() < 1e-10);
        for t in [1usize, 2, 10, 999, 1000] {
            let p: f64 = (1..=t).map(|k| 1.0 - s.beta(k)).product();
            assert!((s.alpha_bar(t) - p).abs() < 1e-10);
        }
    }

    #[test]
    fn smallest_schedule() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 2, 1).unwrap();
        assert_eq!(s.alpha_bar(2), (1.0 - s.beta(1)) * (1.0 - s.beta(2)));
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 2, 2).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 1, 0).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 10, 0).is_err());
    }

    #[test]
    fn forward_diffuse_limits() {
        let flat = NoiseSchedule::from_betas(vec![0.0; 10], 5).unwrap();
        let mut r = stream(1, &[]);
        let z0 = Tensor::<f64>::randn(&[1, 3, 4, 4], &mut r);
        let eps = Tensor::<f64>::randn(&[1, 3, 4, 4], &mut r);
        assert_eq!(forward_diffuse(&z0, 5, &eps, &flat).unwrap(), z0);

        let s = default();
        let zero = Tensor::zeros(z0.shape());
        let out = forward_diffuse(&zero, 700, &eps, &s).unwrap();
        assert_eq!(out, eps.scale((1.0 - s.alpha_bar(700)).sqrt()));
        assert!(forward_diffuse(&z0, 0, &eps, &s).is_err());
        assert!(forward_diffuse(&z0, 1001, &eps, &s).is_err());
    }

    #[test]
    fn forward_diffuse_is_homogeneous() {
        let s = default();
        let mut r = stream(2, &[]);
        let z0 = Tensor::<f64>::randn(&[2, 1, 3, 3], &mut r);
        let eps = Tensor::<f64>::randn(&[2, 1, 3, 3], &mut r);
        let a = 2.0;
        let lhs = forward_diffuse(&z0.scale(a), 321, &eps.scale(a), &s).unwrap();
        let rhs = forward_diffuse(&z0, 321, &eps, &s).unwrap().scale(a);
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn forward_diffuse_moments() {
        let s = default();
        let z0 = Tensor::<f64>::new(&[1, 1, 1, 2], vec![0.8, -0.5]).unwrap();
        let mut r = stream(3, &[]);
        let n = 10_000;
        let ab = s.alpha_bar(700);
        let mut sums = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eps = Tensor::randn(z0.shape(), &mut r);
            let z = forward_diffuse(&z0, 700, &eps, &s).unwrap();
            for k in 0..2 {
                sums[k] += z.data()[k];
                sq[k] += z.data()[k] * z.data()[k];
            }
        }
        for k in 0..2 {
            let mean = sums[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            let sigma = ((1.0 - ab) / n as f64).sqrt();
            assert!((mean - ab.sqrt() * z0.data()[k]).abs() < 3.0 * sigma);
            assert!((var / (1.0 - ab) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn ddim_inverts_perfect_denoiser() {
        let s = default();
        let mut r = stream(4, &[]);
        let z0 = Tensor::<f32>::randn(&[1, 3, 4, 4], &mut r);
        let eps = Tensor::<f32>::randn(&[1, 3, 4, 4], &mut r);
        for t in [1, 250, 700] {
            let zt = forward_diffuse(&z0, t, &eps, &s).unwrap();
            let back = ddim_step(&zt, &eps, t, 0, &s, 0.0, None).unwrap();
            assert!(back.max_abs_diff(&z0).unwrap() < 1e-5, "t={t}");
        }
        let zt = forward_diffuse(&z0, 10, &eps, &s).unwrap();
        assert!(ddim_step(&zt, &eps, 10, 10, &s, 0.0, None).is_err());
        assert!(ddim_step(&zt, &eps, 10, 5, &s, 0.5, None).is_err());
    }

    #[test]
    fn ddim_is_pure() {
        let s = default();
        let mut r = stream(5, &[]);
        let z = Tensor::<f32>::randn(&[1, 3, 8, 8], &mut r);
        let e = Tensor::<f32>::randn(&[1, 3, 8, 8], &mut r);
        let a = ddim_step(&z, &e, 500, 480, &s, 0.0, None).unwrap();
        let b = ddim_step(&z, &e, 500, 480, &s, 0.0, None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn chained_ddim_matches_closed_form_for_linear_denoiser() {
        // eps_pred = a * z makes every update a scalar multiple of z, so the
        // whole trajectory collapses to a product of per-step gains.
        let s = default();
        let gain = 0.3;
        let plan = DdimPlan::new(1000, 50, 0.0).unwrap();
        let mut r = stream(6, &[]);
        let z_start = Tensor::<f64>::randn(&[1, 2, 4, 4], &mut r);
        let mut z = z_start.clone();
        for (t, tp) in plan.transitions() {
            let eps = z.scale(gain);
            z = ddim_step(&z, &eps, t, tp, &s, 0.0, None).unwrap();
        }
        let mut total = 1.0f64;
        for (t, tp) in plan.transitions() {
            let (a, ap) = (s.alpha_bar(t), s.alpha_bar(tp));
            let x0_gain = (1.0 - (1.0 - a).sqrt() * gain) / a.sqrt();
            total *= ap.sqrt() * x0_gain + (1.0 - ap).sqrt() * gain;
        }
        let want = z_start.scale(total);
        let tol = 1e-4 * want.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(z.max_abs_diff(&want).unwrap() < tol);
    }

    #[test]
    fn ddim_plan_shape() {
        let p = DdimPlan::new(1000, 50, 0.0).unwrap();
        assert_eq!(p.step_indices.len(), 50);
        assert_eq!(p.step_indices[0], 1000);
        assert_eq!(*p.step_indices.last().unwrap(), 1);
        assert!(p.step_indices.windows(2).all(|w| w[0] > w[1]));
        let k = DdimPlan::new(700, 50, 0.0).unwrap();
        assert_eq!(k.step_indices[0], 700);
        let all = DdimPlan::new(5, 50, 0.0).unwrap();
        assert_eq!(all.step_indices, vec![5, 4, 3, 2, 1]);
        assert_eq!(all.transitions().last(), Some((1, 0)));
    }

    #[test]
    fn pivot_replace_zero_noise_limit() {
        let flat = NoiseSchedule::from_betas(vec![0.0; 10], 7).unwrap();
        let mut r = stream(7, &[]);
        let z = Tensor::<f64>::randn(&[1, 3, 4, 4], &mut r);
        let out = pivot_replace(&z, &flat, 2, &mut r).unwrap();
        assert_eq!(out, bilinear_upsample(&z, 2).unwrap());
        assert!(pivot_replace(&z, &flat, 0, &mut r).is_err());
    }

    #[test]
    fn stage_factor_checks_shapes() {
        assert_eq!(stage_factor(&[1, 3, 8, 8], &[1, 3, 16, 16]).unwrap(), 2);
        assert!(stage_factor(&[1, 3, 8, 8], &[1, 3, 16, 8]).is_err());
        assert!(stage_factor(&[1, 3, 8, 8], &[1, 3, 12, 12]).is_err());
    }
}
