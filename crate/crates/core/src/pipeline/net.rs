use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::{AgentBatch, GuideTargets};
use super::config::PipelineConfig;
use crate::autodiff::{Bound, Mode, ParamStore, Tape, Tensor, Var};
use crate::codec::{Reader, Writer};
use crate::data::NormStats;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::fusion::{build_condition, Gat};
use crate::guide::{training_loss, Cvae, LossBreakdown};

/// Encoder, fusion and CVAE guide generator sharing one parameter store,
/// plus the normalization they were trained under.
#[derive(Clone, Debug)]
pub struct GuideNet {
    pub config: PipelineConfig,
    pub stats: NormStats,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub gat: Gat,
    pub cvae: Cvae,
}

impl GuideNet {
    pub fn new<R: Rng + ?Sized>(config: &PipelineConfig, stats: NormStats, rng: &mut R) -> Result<Self> {
        config.validate()?;
        stats.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "encoder", &config.encoder, config.window.past_len, rng)?;
        let enc_width = encoder.output_width();
        let gat = Gat::new(&mut store, "fusion", enc_width, config.encoder.hidden_dim, rng);
        let cvae = Cvae::new(
            &mut store,
            "guide",
            &config.cvae_config(),
            &config.encoder,
            enc_width + config.encoder.hidden_dim,
            config.window.guide_interval as f64,
            rng,
        )?;
        Ok(GuideNet {
            config: config.clone(),
            stats,
            store,
            encoder,
            gat,
            cvae,
        })
    }

    pub fn past_len(&self) -> usize {
        self.config.window.past_len
    }

    pub fn interval(&self) -> f64 {
        self.config.window.guide_interval as f64
    }

    pub fn guide_steps(&self) -> usize {
        self.cvae.guide_steps()
    }

    /// `[samples, cond]` fused ego features.
    pub fn condition(&self, tape: &mut Tape, bound: &Bound, batch: &AgentBatch, mode: &mut Mode<'_>) -> Result<Var> {
        let past = tape.constant(batch.positions.clone());
        let wind = tape.constant(batch.wind.clone());
        let h_enc = self.encoder.encode_agent(tape, bound, past, wind, &batch.mask, mode)?;
        let (h_gat, _) = self.gat.forward(tape, bound, h_enc, &batch.graph)?;
        build_condition(tape, h_enc, h_gat, &batch.ego_rows)
    }

    /// `(traj, cvae, total)` loss nodes for one batch.
    pub fn loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &AgentBatch,
        targets: &GuideTargets,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Var, Var)> {
        let cond = self.condition(tape, bound, batch, mode)?;
        let guide_in = tape.constant(targets.channels_first.clone());
        let prev = tape.constant(batch.prev.clone());
        let curr = tape.constant(batch.curr.clone());
        let out = self.cvae.forward_train(tape, bound, cond, guide_in, prev, curr, mode)?;
        let target = tape.constant(targets.points.clone());
        training_loss(tape, &out, target)
    }

    /// Inference-mode loss (`z = mu`, no dropout).
    pub fn eval_loss(&self, batch: &AgentBatch, targets: &GuideTargets) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let (traj, cvae, _) = self.loss(&mut tape, &bound, batch, targets, &mut Mode::Infer)?;
        Ok(LossBreakdown::new(scalar(&tape, traj), scalar(&tape, cvae)))
    }

    /// Prior guides, `per_sample` per batch sample, in normalized
    /// coordinates: entry `s * per_sample + g` is guide `g` of sample `s`.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        batch: &AgentBatch,
        per_sample: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<[f64; 3]>>> {
        if per_sample == 0 {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let cond = self.condition(&mut tape, &bound, batch, &mut Mode::Infer)?;
        let rows: Vec<usize> = (0..batch.samples)
            .flat_map(|s| std::iter::repeat_n(s, per_sample))
            .collect();
        let cond = tape.gather_rows(cond, &rows)?;
        let prev = tape.constant(batch.prev.clone());
        let prev = tape.gather_rows(prev, &rows)?;
        let curr = tape.constant(batch.curr.clone());
        let curr = tape.gather_rows(curr, &rows)?;
        let z = tape.constant(self.cvae.sample_latent(rows.len(), rng));
        let (guide, _) = self.cvae.decode_guide(&mut tape, &bound, z, cond, prev, curr)?;
        let steps = self.guide_steps();
        let data = tape.value(guide).data();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("generated guide"));
        }
        Ok(data
            .chunks_exact(3 * steps)
            .map(|g| g.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect())
            .collect())
    }

    pub(crate) fn write(&self, w: &mut Writer) -> Result<()> {
        w.str(&self.config.to_toml()?);
        write_stats(w, &self.stats);
        w.usize(self.store.len());
        for p in self.store.iter() {
            w.str(&p.name);
            w.usize(p.value.ndim());
            for d in p.value.shape() {
                w.usize(*d);
            }
            w.f64s(p.value.data());
        }
        Ok(())
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let config = PipelineConfig::from_toml(&r.str()?)?;
        let stats = read_stats(r)?;
        // Architecture first; every value is then overwritten from the file.
        let mut net = GuideNet::new(&config, stats, &mut ChaCha8Rng::seed_from_u64(0))?;
        let count = r.len_of(8)?;
        let mut loaded = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str()?;
            let ndim = r.len_of(8)?;
            let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Format(format!("parameter {} shape overflows", name)))?;
            loaded.push((name, Tensor::new(shape, r.f64s(numel)?)?));
        }
        net.store.load_values(&loaded)?;
        Ok(net)
    }
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item().unwrap_or(f64::NAN)
}

pub(crate) fn write_stats(w: &mut Writer, s: &NormStats) {
    w.f64s(&s.position_mean);
    w.f64s(&s.position_scale);
    w.f64s(&s.wind_mean);
    w.f64s(&s.wind_scale);
}

pub(crate) fn read_stats(r: &mut Reader<'_>) -> Result<NormStats> {
    let v = r.f64s(10)?;
    let stats = NormStats {
        position_mean: [v[0], v[1], v[2]],
        position_scale: [v[3], v[4], v[5]],
        wind_mean: [v[6], v[7]],
        wind_scale: [v[8], v[9]],
    };
    stats.validate()?;
    Ok(stats)
}
