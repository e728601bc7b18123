//! CVAE guide generator: latent sampling, decoding conditioned on fused
//! features, an MLP acceleration head and double integration onto the
//! guide grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Linear, Mlp, Mode, ParamStore, Tape, Tensor, Var};
use crate::data::{Trajectory, Waypoint};
use crate::encoder::{EncoderConfig, Tcn};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvaeConfig {
    pub latent_dim: usize,
    /// Hidden widths of the recognition network Q.
    pub encoder_widths: Vec<usize>,
    /// Hidden widths of the decoder P; the last one is the width of `h_cvae`.
    pub decoder_widths: Vec<usize>,
    /// Hidden widths of the acceleration head.
    pub mlp_widths: Vec<usize>,
    /// `k / dt`; filled from the window geometry when zero.
    pub guide_steps: usize,
    pub accel_dims: usize,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig {
            latent_dim: 16,
            encoder_widths: vec![64],
            decoder_widths: vec![64],
            mlp_widths: vec![64],
            guide_steps: 12,
            accel_dims: 3,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("cvae: {}", m)));
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive");
        }
        if self.guide_steps == 0 {
            return bad("guide_steps must be at least 1");
        }
        if self.accel_dims != 3 {
            return bad("accel_dims must be 3 (x, y, z)");
        }
        if self.decoder_widths.is_empty() {
            return bad("decoder needs at least one layer");
        }
        let widths = self
            .encoder_widths
            .iter()
            .chain(&self.decoder_widths)
            .chain(&self.mlp_widths);
        if widths.into_iter().any(|&w| w == 0) {
            return bad("layer widths must be positive");
        }
        Ok(())
    }
}

/// Coarse future trajectory: `guide_steps` points spaced `interval` apart,
/// starting one interval after the last observed point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuideTrajectory {
    trajectory: Trajectory,
    interval: f64,
}

impl GuideTrajectory {
    pub fn new(trajectory: Trajectory, interval: f64) -> Result<Self> {
        if !(interval > 0.0) {
            return Err(Error::Config(format!("guide interval {} must be positive", interval)));
        }
        if let Some(w) = trajectory
            .points()
            .windows(2)
            .find(|w| ((w[1].t - w[0].t) - interval).abs() > 1e-9 * interval.max(1.0))
        {
            return Err(Error::Config(format!(
                "guide points at {} and {} are not {} apart",
                w[0].t, w[1].t, interval
            )));
        }
        Ok(GuideTrajectory { trajectory, interval })
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn into_trajectory(self) -> Trajectory {
        self.trajectory
    }

    pub fn interval(&self) -> f64 {
        self.interval
    }

    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_traj: f64,
    pub loss_cvae: f64,
    pub loss_total: f64,
}

impl LossBreakdown {
    pub fn new(loss_traj: f64, loss_cvae: f64) -> Self {
        LossBreakdown {
            loss_traj,
            loss_cvae,
            loss_total: loss_traj + loss_cvae,
        }
    }
}

/// Integration seeds on the guide grid: `curr = p_n` and `prev` one guide
/// interval earlier along the last observed velocity.
pub fn seed_points(past: &Trajectory, interval: f64) -> Result<([f64; 3], [f64; 3])> {
    let pts = past.points();
    if pts.len() < 2 {
        return Err(Error::shape(
            "seed_points",
            format!("{} past points, need 2", pts.len()),
        ));
    }
    let (a, b) = (&pts[pts.len() - 2], &pts[pts.len() - 1]);
    let steps = interval / (b.t - a.t);
    let (pa, pb) = (a.position(), b.position());
    let prev = std::array::from_fn(|d| pb[d] - (pb[d] - pa[d]) * steps);
    Ok((prev, pb))
}

/// `p[j+1] = 2 p[j] - p[j-1] + a[j] dt^2`, starting from `p[-1] = prev` and
/// `p[0] = curr`. The result has one point per acceleration at times
/// `curr.t + dt, curr.t + 2 dt, ...`.
pub fn integrate_guide(
    prev: &Waypoint,
    curr: &Waypoint,
    accelerations: &[[f64; 3]],
    dt: f64,
) -> Result<GuideTrajectory> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("integration step {} must be positive", dt)));
    }
    if accelerations.is_empty() {
        return Err(Error::Empty("guide accelerations".into()));
    }
    let (mut before, mut now) = (prev.position(), curr.position());
    let mut points = Vec::with_capacity(accelerations.len());
    for (j, a) in accelerations.iter().enumerate() {
        let next: [f64; 3] = std::array::from_fn(|d| 2.0 * now[d] - before[d] + a[d] * dt * dt);
        points.push(Waypoint::at(curr.t + (j + 1) as f64 * dt, next)?);
        before = now;
        now = next;
    }
    GuideTrajectory::new(Trajectory::new(0, points)?, dt)
}

/// Inverse of [`integrate_guide`]: second differences divided by `dt^2`.
pub fn recover_accelerations(prev: [f64; 3], curr: [f64; 3], guide: &[[f64; 3]], dt: f64) -> Vec<[f64; 3]> {
    let mut seq = vec![prev, curr];
    seq.extend_from_slice(guide);
    seq.windows(3)
        .map(|w| std::array::from_fn(|d| (w[2][d] - 2.0 * w[1][d] + w[0][d]) / (dt * dt)))
        .collect()
}

/// Mean squared error over every point and coordinate.
pub fn loss_traj(guide: &Trajectory, truth: &Trajectory) -> Result<f64> {
    if guide.len() != truth.len() {
        return Err(Error::shape(
            "loss_traj",
            format!("{} guide points vs {} truth points", guide.len(), truth.len()),
        ));
    }
    let total: f64 = guide
        .positions()
        .zip(truth.positions())
        .map(|(a, b)| (0..3).map(|d| (a[d] - b[d]).powi(2)).sum::<f64>())
        .sum();
    Ok(total / (3 * guide.len()) as f64)
}

/// `KL(N(mu, diag(exp(logvar))) || N(0, I)) = 1/2 sum(exp(lv) + mu^2 - 1 - lv)`.
pub fn loss_cvae(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(Error::shape("loss_cvae", format!("{} vs {}", mu.len(), logvar.len())));
    }
    Ok(0.5
        * mu.iter()
            .zip(logvar)
            .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
            .sum::<f64>())
}

/// Tape nodes of one training forward pass.
pub struct CvaeTrainOutput {
    /// `[batch, guide_steps, 3]`.
    pub guide: Var,
    pub accel: Var,
    pub mu: Var,
    pub logvar: Var,
}

#[derive(Clone, Debug)]
pub struct Cvae {
    pub config: CvaeConfig,
    pub cond_dim: usize,
    pub interval: f64,
    pub guide_tcn: Tcn,
    pub recognition: Mlp,
    pub q_mu: Linear,
    pub q_logvar: Linear,
    pub decoder: Mlp,
    pub accel_head: Mlp,
}

impl Cvae {
    /// `encoder` configures the TCN that embeds ground-truth guides; it is a
    /// separate instance from the past-trajectory TCN.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: &CvaeConfig,
        encoder: &EncoderConfig,
        cond_dim: usize,
        interval: f64,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        encoder.validate()?;
        if !(interval > 0.0) {
            return Err(Error::Config(format!("guide interval {} must be positive", interval)));
        }
        let guide_tcn = Tcn::new(store, &format!("{name}.guide_tcn"), 3, encoder, rng);
        let q_in = guide_tcn.output_width() + cond_dim;
        let mut q_widths = vec![q_in];
        q_widths.extend(&config.encoder_widths);
        let recognition = Mlp::new(store, &format!("{name}.q"), &q_widths, true, rng);
        let q_hidden = *q_widths.last().unwrap_or(&q_in);
        let q_mu = Linear::new(store, &format!("{name}.q_mu"), q_hidden, config.latent_dim, rng);
        let q_logvar = Linear::new(store, &format!("{name}.q_logvar"), q_hidden, config.latent_dim, rng);
        // Q starts as N(0, I).
        for head in [&q_mu, &q_logvar] {
            store.set_value(head.weight, Tensor::zeros(vec![config.latent_dim, q_hidden]))?;
        }
        let mut p_widths = vec![config.latent_dim + cond_dim];
        p_widths.extend(&config.decoder_widths);
        let decoder = Mlp::new(store, &format!("{name}.p"), &p_widths, true, rng);
        let mut a_widths = vec![decoder.output_width()];
        a_widths.extend(&config.mlp_widths);
        a_widths.push(config.guide_steps * config.accel_dims);
        let accel_head = Mlp::new(store, &format!("{name}.accel"), &a_widths, false, rng);
        Ok(Cvae {
            config: config.clone(),
            cond_dim,
            interval,
            guide_tcn,
            recognition,
            q_mu,
            q_logvar,
            decoder,
            accel_head,
        })
    }

    pub fn guide_steps(&self) -> usize {
        self.config.guide_steps
    }

    /// `guide: [batch, 3, guide_steps]` ground-truth guide, channels first.
    pub fn encode_guide(&self, tape: &mut Tape, bound: &Bound, guide: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let s = tape.value(guide).shape();
        if s.len() != 3 || s[1] != 3 || s[2] != self.guide_steps() {
            return Err(Error::shape(
                "cvae_encode",
                format!("guide {:?}, expected [batch, 3, {}]", s, self.guide_steps()),
            ));
        }
        self.guide_tcn.forward(tape, bound, guide, mode)
    }

    fn check_condition(&self, tape: &Tape, condition: Var, op: &'static str) -> Result<usize> {
        let s = tape.value(condition).shape();
        if s.len() != 2 || s[1] != self.cond_dim {
            return Err(Error::shape(
                op,
                format!("condition {:?}, expected [batch, {}]", s, self.cond_dim),
            ));
        }
        Ok(s[0])
    }

    /// Recognition network `Q(z | h_guide, condition)` as `(mu, logvar)`.
    pub fn cvae_encode(&self, tape: &mut Tape, bound: &Bound, h_guide: Var, condition: Var) -> Result<(Var, Var)> {
        self.check_condition(tape, condition, "cvae_encode")?;
        let x = tape.concat(&[h_guide, condition], 1)?;
        let h = self.recognition.forward(tape, bound, x)?;
        Ok((
            self.q_mu.forward(tape, bound, h)?,
            self.q_logvar.forward(tape, bound, h)?,
        ))
    }

    pub fn cvae_decode(&self, tape: &mut Tape, bound: &Bound, z: Var, condition: Var) -> Result<Var> {
        let batch = self.check_condition(tape, condition, "cvae_decode")?;
        if tape.value(z).shape() != [batch, self.config.latent_dim] {
            return Err(Error::shape(
                "cvae_decode",
                format!(
                    "z {:?}, expected [{}, {}]",
                    tape.value(z).shape(),
                    batch,
                    self.config.latent_dim
                ),
            ));
        }
        let x = tape.concat(&[z, condition], 1)?;
        self.decoder.forward(tape, bound, x)
    }

    /// `h_cvae -> [batch, guide_steps, 3]` accelerations. The head's last
    /// layer is divided by `dt^2`, so its raw output is a position increment.
    pub fn mlp_accelerations(&self, tape: &mut Tape, bound: &Bound, h_cvae: Var) -> Result<Var> {
        let batch = tape.value(h_cvae).shape().first().copied().unwrap_or(0);
        let raw = self.accel_head.forward(tape, bound, h_cvae)?;
        let scaled = tape.scale(raw, 1.0 / (self.interval * self.interval))?;
        tape.reshape(scaled, vec![batch, self.guide_steps(), self.config.accel_dims])
    }

    /// Decode `z`, predict accelerations and integrate from `prev`/`curr`
    /// (`[batch, 3]`). Returns `(guide, accel)`.
    pub fn decode_guide(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z: Var,
        condition: Var,
        prev: Var,
        curr: Var,
    ) -> Result<(Var, Var)> {
        let h = self.cvae_decode(tape, bound, z, condition)?;
        let accel = self.mlp_accelerations(tape, bound, h)?;
        let guide = tape.kinematic_integrate(accel, prev, curr, self.interval)?;
        Ok((guide, accel))
    }

    /// Training pass: `z = mu + exp(logvar / 2) eps` from the recognition
    /// network. In inference mode `z = mu`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        condition: Var,
        guide_truth: Var,
        prev: Var,
        curr: Var,
        mode: &mut Mode<'_>,
    ) -> Result<CvaeTrainOutput> {
        let h_guide = self.encode_guide(tape, bound, guide_truth, mode)?;
        let (mu, logvar) = self.cvae_encode(tape, bound, h_guide, condition)?;
        let z = match mode {
            Mode::Train(rng) => tape.gaussian_sample_reparam(mu, logvar, &mut **rng)?,
            Mode::Infer => mu,
        };
        let (guide, accel) = self.decode_guide(tape, bound, z, condition, prev, curr)?;
        Ok(CvaeTrainOutput {
            guide,
            accel,
            mu,
            logvar,
        })
    }

    /// Prior draw `z ~ N(0, I)`, one row per condition row.
    pub fn sample_latent<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Tensor {
        Tensor::standard_normal(vec![batch, self.config.latent_dim], rng)
    }
}

/// `loss_traj` and `loss_cvae` on the tape; the KL term is averaged over the
/// batch. Returns `(traj, cvae, total)`.
pub fn training_loss(tape: &mut Tape, out: &CvaeTrainOutput, target: Var) -> Result<(Var, Var, Var)> {
    let batch = tape.value(out.mu).shape()[0].max(1);
    let traj = tape.mse(out.guide, target)?;
    let kl = tape.kl_standard_normal(out.mu, out.logvar)?;
    let cvae = tape.scale(kl, 1.0 / batch as f64)?;
    let total = tape.add(traj, cvae)?;
    Ok((traj, cvae, total))
}

#[cfg(test)]
mod tests;
