//! Two-stage training (guide network, then mixture on generated guides),
//! prediction, evaluation and model bundles.

mod batch;
mod config;
mod net;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Mode, Tape};
use crate::codec::{self, Reader, Writer};
use crate::data::{
    generate_synthetic_scene, normalize, window_scene, AgentId, AgentPast, NormStats, Scene, TrainingSample,
    Trajectory, Waypoint, WindowConfig,
};
use crate::error::{Error, Result};
use crate::guide::{GuideTrajectory, LossBreakdown};
use crate::metrics::{best_of_n_with, summarize, EvalRecord, Summary};
use crate::mixture::{em_fit, flatten_input, flatten_joint, unflatten_output, Conditioner, EmFit, MixtureModel};

pub use batch::{AgentBatch, GuideTargets};
pub use config::{
    derive_seed, require_dir, stream_rng, DataConfig, EvalConfig, MixtureConfig, PipelineConfig, SyntheticConfig,
    TrainConfig,
};
pub use net::GuideNet;

const NET_MAGIC: &[u8; 8] = b"GMRNNET\0";
const NET_VERSION: u32 = 1;
const BUNDLE_MAGIC: &[u8; 8] = b"GMRNBDL\0";
const BUNDLE_VERSION: u32 = 1;
const DATASET_MAGIC: &[u8; 8] = b"GMRNGDS\0";
const DATASET_VERSION: u32 = 1;

/// Which predictor an evaluation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Guide network followed by guide-conditioned mixture regression.
    Full,
    /// Mixture regression conditioned on the past alone.
    GmrOnly,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::GmrOnly => "gmr-only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's batches.
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Inference-mode training loss of the initialized network.
    pub initial: LossBreakdown,
    pub epochs: Vec<EpochLoss>,
    /// Epoch whose parameters were kept, by validation loss; `None` when
    /// no epoch ran or no validation data was given (last epoch kept).
    pub best_epoch: Option<usize>,
    /// Inference-mode training loss of the returned network.
    pub final_train: LossBreakdown,
}

pub struct TrainedNn {
    pub net: GuideNet,
    pub history: TrainingHistory,
}

fn normalize_all(samples: &[TrainingSample], stats: &NormStats) -> Result<Vec<TrainingSample>> {
    samples.iter().map(|s| normalize(s, stats)).collect()
}

fn batches<'a>(samples: &'a [TrainingSample], order: &[usize], size: usize) -> Vec<Vec<&'a TrainingSample>> {
    order
        .chunks(size)
        .map(|c| c.iter().map(|&i| &samples[i]).collect())
        .collect()
}

/// Weighted mean inference-mode loss over `samples` (normalized).
fn dataset_loss(net: &GuideNet, samples: &[TrainingSample], batch_size: usize) -> Result<LossBreakdown> {
    let order: Vec<usize> = (0..samples.len()).collect();
    let (mut traj, mut cvae) = (0.0, 0.0);
    for chunk in batches(samples, &order, batch_size) {
        let batch = AgentBatch::from_samples(&chunk, net.past_len(), net.interval())?;
        let targets = GuideTargets::from_samples(&chunk, net.guide_steps())?;
        let l = net.eval_loss(&batch, &targets)?;
        traj += l.loss_traj * chunk.len() as f64;
        cvae += l.loss_cvae * chunk.len() as f64;
    }
    let n = samples.len() as f64;
    Ok(LossBreakdown::new(traj / n, cvae / n))
}

/// Train the guide network end to end with Adam on `loss_total`.
///
/// Normalization is fitted on `train`. Parameters from the epoch with the
/// lowest validation loss are returned; without validation data the last
/// epoch is kept. A non-finite loss aborts with the epoch and batch.
pub fn train_nn(config: &PipelineConfig, train: &[TrainingSample], val: &[TrainingSample]) -> Result<TrainedNn> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training samples".into()));
    }
    let stats = NormStats::fit(train)?;
    let train = normalize_all(train, &stats)?;
    let val = normalize_all(val, &stats)?;
    let mut init_rng = stream_rng(config.seed, "nn/init", 0);
    let mut net = GuideNet::new(config, stats, &mut init_rng)?;
    let bs = config.training.batch_size;
    let initial = dataset_loss(&net, &train, bs)?;

    let mut adam = AdamState::new(&net.store, config.training.adam());
    let mut shuffle_rng = stream_rng(config.seed, "nn/shuffle", 0);
    let mut noise_rng = stream_rng(config.seed, "nn/noise", 0);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(config.training.epochs);
    let mut best: Option<(f64, usize, Vec<crate::autodiff::Tensor>)> = None;
    for epoch in 0..config.training.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut traj, mut cvae) = (0.0, 0.0);
        for (b, chunk) in batches(&train, &order, bs).into_iter().enumerate() {
            let batch = AgentBatch::from_samples(&chunk, net.past_len(), net.interval())?;
            let targets = GuideTargets::from_samples(&chunk, net.guide_steps())?;
            let mut tape = Tape::new();
            let bound = net.store.bind(&mut tape);
            let mut mode = Mode::Train(&mut noise_rng);
            let (lt, lc, total) = net
                .loss(&mut tape, &bound, &batch, &targets, &mut mode)
                .map_err(|e| match e {
                    Error::NonFinite { op } => Error::Diverged {
                        epoch,
                        batch: b,
                        detail: format!("non-finite value in {}", op),
                    },
                    e => e,
                })?;
            let (vt, vc) = (tape.value(lt).data()[0], tape.value(lc).data()[0]);
            if !(vt + vc).is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("loss_traj = {}, loss_cvae = {}", vt, vc),
                });
            }
            let grads = tape.backward(total)?;
            net.store.absorb(&grads, &bound);
            if net
                .store
                .iter()
                .any(|p| p.grad.as_ref().is_some_and(|g| g.data().iter().any(|v| !v.is_finite())))
            {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    detail: "non-finite gradient".into(),
                });
            }
            adam_step(&mut net.store, &mut adam)?;
            traj += vt * chunk.len() as f64;
            cvae += vc * chunk.len() as f64;
        }
        let n = train.len() as f64;
        let train_loss = LossBreakdown::new(traj / n, cvae / n);
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(dataset_loss(&net, &val, bs)?)
        };
        log::info!(
            "epoch {}: train {:.6} val {}",
            epoch,
            train_loss.loss_total,
            val_loss.map_or("-".into(), |v| format!("{:.6}", v.loss_total))
        );
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _, _)| v.loss_total < *b) {
                best = Some((v.loss_total, epoch, net.store.values()));
            }
        }
        epochs.push(EpochLoss {
            epoch,
            train: train_loss,
            val: val_loss,
        });
    }
    let best_epoch = match best {
        Some((_, epoch, values)) => {
            let named: Vec<_> = net.store.iter().map(|p| p.name.clone()).zip(values).collect();
            net.store.load_values(&named)?;
            Some(epoch)
        }
        None => None,
    };
    net.store.zero_grad();
    let final_train = dataset_loss(&net, &train, bs)?;
    Ok(TrainedNn {
        net,
        history: TrainingHistory {
            initial,
            epochs,
            best_epoch,
            final_train,
        },
    })
}

/// Flattened, normalized joint vectors for mixture training.
#[derive(Clone, Debug, PartialEq)]
pub struct GuideDataset {
    /// Dimension of the conditioning block at the front of each row.
    pub input_dim: usize,
    pub rows: Vec<Vec<f64>>,
    pub stats: NormStats,
}

impl GuideDataset {
    pub fn output_dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len() - self.input_dim)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.usize(self.input_dim);
        net::write_stats(&mut w, &self.stats);
        w.usize(self.rows.len());
        w.usize(self.rows.first().map_or(0, |r| r.len()));
        for r in &self.rows {
            w.f64s(r);
        }
        codec::frame(DATASET_MAGIC, DATASET_VERSION, &w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let payload = codec::unframe(bytes, DATASET_MAGIC, DATASET_VERSION, "guide dataset")?;
        let mut r = Reader::new(payload);
        let input_dim = r.usize()?;
        let stats = net::read_stats(&mut r)?;
        let count = r.usize()?;
        let width = r.usize()?;
        if count.saturating_mul(width).saturating_mul(8) != r.remaining() {
            return Err(Error::Format(format!(
                "{} rows of {} values do not fill the payload",
                count, width
            )));
        }
        let rows = (0..count).map(|_| r.f64s(width)).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(GuideDataset { input_dim, rows, stats })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn normalized_guide(points: &[[f64; 3]], origin_t: f64, interval: f64, agent: AgentId) -> Result<GuideTrajectory> {
    let pts = points
        .iter()
        .enumerate()
        .map(|(j, p)| Waypoint::at(origin_t + (j + 1) as f64 * interval, *p))
        .collect::<Result<Vec<_>>>()?;
    GuideTrajectory::new(Trajectory::new(agent, pts)?, interval)
}

const GENERATION_BATCH: usize = 64;

/// Rows `past ⊕ guide ⊕ future`, with `guides_per_sample` prior guides
/// drawn for each sample.
pub fn generate_guide_dataset<R: Rng + ?Sized>(
    net: &GuideNet,
    samples: &[TrainingSample],
    guides_per_sample: usize,
    rng: &mut R,
) -> Result<GuideDataset> {
    if samples.is_empty() {
        return Err(Error::Empty("samples for the guide dataset".into()));
    }
    let identity = NormStats::identity();
    let normed = normalize_all(samples, &net.stats)?;
    let mut rows = Vec::with_capacity(samples.len() * guides_per_sample);
    let order: Vec<usize> = (0..normed.len()).collect();
    for chunk in batches(&normed, &order, GENERATION_BATCH) {
        let batch = AgentBatch::from_samples(&chunk, net.past_len(), net.interval())?;
        let guides = net.generate(&batch, guides_per_sample, rng)?;
        for (i, g) in guides.iter().enumerate() {
            let s = chunk[i / guides_per_sample];
            let guide = normalized_guide(g, s.past().last().t, net.interval(), s.ego_id())?;
            rows.push(flatten_joint(s.past(), Some(&guide), &s.future_truth, &identity));
        }
    }
    Ok(GuideDataset {
        input_dim: (net.past_len() + net.guide_steps()) * 3,
        rows,
        stats: net.stats,
    })
}

/// Rows `past ⊕ future` for the past-only baseline.
pub fn baseline_dataset(samples: &[TrainingSample], stats: &NormStats) -> Result<GuideDataset> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Empty("samples for the baseline dataset".into()))?;
    let rows = samples
        .iter()
        .map(|s| flatten_joint(s.past(), None, &s.future_truth, stats))
        .collect();
    Ok(GuideDataset {
        input_dim: first.past().len() * 3,
        rows,
        stats: *stats,
    })
}

pub fn train_gmm(dataset: &GuideDataset, config: &MixtureConfig, seed: u64) -> Result<EmFit> {
    em_fit(&dataset.rows, dataset.input_dim, dataset.stats, &config.em(seed))
}

/// Everything needed to predict: the guide network, the guide-conditioned
/// mixture and optionally the past-only baseline.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    net: GuideNet,
    gmm: MixtureModel,
    baseline: Option<MixtureModel>,
    conditioner: Conditioner,
    baseline_conditioner: Option<Conditioner>,
}

impl ModelBundle {
    pub fn new(net: GuideNet, gmm: MixtureModel, baseline: Option<MixtureModel>) -> Result<Self> {
        let w = &net.config.window;
        let expect = |m: &MixtureModel, input: usize, what: &str| -> Result<()> {
            if m.input_dim() != input || m.output_dim() != 3 * w.horizon {
                return Err(Error::shape(
                    "model bundle",
                    format!(
                        "{} mixture maps {} -> {}, window needs {} -> {}",
                        what,
                        m.input_dim(),
                        m.output_dim(),
                        input,
                        3 * w.horizon
                    ),
                ));
            }
            if m.stats != net.stats {
                return Err(Error::Config(format!(
                    "{} mixture was fitted under different normalization",
                    what
                )));
            }
            Ok(())
        };
        expect(&gmm, 3 * (w.past_len + w.guide_steps()), "guide-conditioned")?;
        if let Some(b) = &baseline {
            expect(b, 3 * w.past_len, "baseline")?;
        }
        let conditioner = gmm.conditioner()?;
        let baseline_conditioner = baseline.as_ref().map(|b| b.conditioner()).transpose()?;
        Ok(ModelBundle {
            net,
            gmm,
            baseline,
            conditioner,
            baseline_conditioner,
        })
    }

    pub fn net(&self) -> &GuideNet {
        &self.net
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.net.config
    }

    pub fn stats(&self) -> &NormStats {
        &self.net.stats
    }

    pub fn gmm(&self) -> &MixtureModel {
        &self.gmm
    }

    pub fn baseline(&self) -> Option<&MixtureModel> {
        self.baseline.as_ref()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        self.net.write(&mut w)?;
        self.gmm.write_payload(&mut w);
        match &self.baseline {
            Some(b) => {
                w.u32(1);
                b.write_payload(&mut w);
            }
            None => w.u32(0),
        }
        Ok(codec::frame(BUNDLE_MAGIC, BUNDLE_VERSION, &w.into_bytes()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let payload = codec::unframe(bytes, BUNDLE_MAGIC, BUNDLE_VERSION, "model bundle")?;
        let mut r = Reader::new(payload);
        let net = GuideNet::read(&mut r)?;
        let gmm = MixtureModel::read_payload(&mut r)?;
        let baseline = match r.u32()? {
            0 => None,
            1 => Some(MixtureModel::read_payload(&mut r)?),
            other => return Err(Error::Format(format!("baseline flag {}", other))),
        };
        r.finish()?;
        Self::new(net, gmm, baseline)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn save_bundle(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    bundle.save(path)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ModelBundle> {
    ModelBundle::load(path)
}

impl GuideNet {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        self.write(&mut w)?;
        Ok(codec::frame(NET_MAGIC, NET_VERSION, &w.into_bytes()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let payload = codec::unframe(bytes, NET_MAGIC, NET_VERSION, "guide network")?;
        let mut r = Reader::new(payload);
        let net = GuideNet::read(&mut r)?;
        r.finish()?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// One predicted future with the guide it was conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub trajectory: Trajectory,
    /// Denormalized guide; `None` for the past-only baseline.
    pub guide: Option<GuideTrajectory>,
}

/// Full prediction for one ego agent: `n_samples` candidates, each from its
/// own prior guide and one mixture-regression draw.
pub fn predict<R: Rng + ?Sized>(
    bundle: &ModelBundle,
    ego: &AgentPast,
    neighbors: &[AgentPast],
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    Ok(
        predict_candidates(bundle, Method::Full, ego, neighbors, n_samples, rng)?
            .into_iter()
            .map(|c| c.trajectory)
            .collect(),
    )
}

pub fn predict_candidates<R: Rng + ?Sized>(
    bundle: &ModelBundle,
    method: Method,
    ego: &AgentPast,
    neighbors: &[AgentPast],
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<Candidate>> {
    let net = &bundle.net;
    let n = net.past_len();
    if ego.trajectory.len() != n {
        return Err(Error::shape(
            "predict",
            format!("past window has {} points, model needs {}", ego.trajectory.len(), n),
        ));
    }
    for w in ego.trajectory.points().windows(2) {
        if (w[1].t - w[0].t - 1.0).abs() > 1e-9 {
            return Err(Error::shape("predict", "past points must be one second apart"));
        }
    }
    let stats = &net.stats;
    let identity = NormStats::identity();
    let ego_n = stats.normalize_past(ego)?;
    let origin = ego.trajectory.last().t;
    let agent = ego.trajectory.agent_id();
    match method {
        Method::Full => {
            let neighbors_n = neighbors
                .iter()
                .map(|p| stats.normalize_past(p))
                .collect::<Result<Vec<_>>>()?;
            let batch = AgentBatch::from_pasts(&[(&ego_n, &neighbors_n)], n, net.interval())?;
            let guides = net.generate(&batch, n_samples, rng)?;
            guides
                .iter()
                .map(|g| {
                    let guide = normalized_guide(g, origin, net.interval(), agent)?;
                    let x = flatten_input(&ego_n.trajectory, Some(&guide), &identity);
                    let y = bundle.conditioner.condition(&x)?.sample(rng)?;
                    Ok(Candidate {
                        trajectory: unflatten_output(y.as_slice(), origin, agent, stats)?,
                        guide: Some(GuideTrajectory::new(
                            stats.denormalize_trajectory(guide.trajectory())?,
                            net.interval(),
                        )?),
                    })
                })
                .collect()
        }
        Method::GmrOnly => {
            let cond = bundle
                .baseline_conditioner
                .as_ref()
                .ok_or_else(|| Error::Config("bundle has no past-only baseline mixture".into()))?;
            let x = flatten_input(&ego_n.trajectory, None, &identity);
            let c = cond.condition(&x)?;
            (0..n_samples)
                .map(|_| {
                    let y = c.sample(rng)?;
                    Ok(Candidate {
                        trajectory: unflatten_output(y.as_slice(), origin, agent, stats)?,
                        guide: None,
                    })
                })
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case: usize,
    pub ego_id: AgentId,
    #[serde(flatten)]
    pub record: EvalRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: Method,
    pub n_samples: usize,
    pub cases: Vec<CaseRecord>,
    pub summary: Summary,
}

/// Best-of-`n_samples` evaluation over `samples`, one independent random
/// stream per case derived from `seed`.
pub fn evaluate(
    bundle: &ModelBundle,
    samples: &[TrainingSample],
    method: Method,
    config: &EvalConfig,
    seed: u64,
) -> Result<EvaluationReport> {
    if samples.is_empty() {
        return Err(Error::Empty("test samples".into()));
    }
    let label = format!("eval/{}", method.name());
    let mut cases = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let mut rng = stream_rng(seed, &label, i as u64);
        let start = Instant::now();
        let candidates = predict_candidates(bundle, method, &s.ego, &s.neighbors, config.n_samples, &mut rng)?;
        let elapsed = start.elapsed().as_secs_f64();
        let trajectories: Vec<Trajectory> = candidates.into_iter().map(|c| c.trajectory).collect();
        let mut record = best_of_n_with(&trajectories, &s.future_truth, config.selection)?;
        record.gen_time_per_step = elapsed / s.future_truth.len() as f64;
        cases.push(CaseRecord {
            case: i,
            ego_id: s.ego_id(),
            record,
        });
    }
    let records: Vec<EvalRecord> = cases.iter().map(|c| c.record.clone()).collect();
    Ok(EvaluationReport {
        method,
        n_samples: config.n_samples,
        summary: summarize(&records)?,
        cases,
    })
}

/// Scenes for each split, generated from independent seeds.
#[derive(Clone, Debug, Default)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

pub fn synthetic_scenes(config: &SyntheticConfig, seed: u64) -> Result<Splits<Scene>> {
    let make = |split: &str, count: usize| -> Result<Vec<Scene>> {
        (0..count)
            .map(|i| {
                generate_synthetic_scene(
                    derive_seed(seed, &format!("scene/{}/{}", split, i)),
                    config.agents_per_scene,
                    &config.pattern,
                )
            })
            .collect()
    };
    Ok(Splits {
        train: make("train", config.train_scenes)?,
        val: make("val", config.val_scenes)?,
        test: make("test", config.test_scenes)?,
    })
}

pub fn window_scenes(scenes: &[Scene], window: &WindowConfig) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for s in scenes {
        out.extend(window_scene(s, window)?);
    }
    Ok(out)
}

pub fn window_splits(scenes: &Splits<Scene>, window: &WindowConfig) -> Result<Splits<TrainingSample>> {
    Ok(Splits {
        train: window_scenes(&scenes.train, window)?,
        val: window_scenes(&scenes.val, window)?,
        test: window_scenes(&scenes.test, window)?,
    })
}

/// Everything produced by [`run_training`].
pub struct TrainedPipeline {
    pub bundle: ModelBundle,
    pub history: TrainingHistory,
    pub gmm_fit: EmFit,
    pub baseline_fit: Option<EmFit>,
}

/// Both stages in order: train the network, draw guides for the training
/// set, fit the mixture (and the baseline when configured).
pub fn run_training(
    config: &PipelineConfig,
    train: &[TrainingSample],
    val: &[TrainingSample],
) -> Result<TrainedPipeline> {
    let nn = train_nn(config, train, val)?;
    let mut rng = stream_rng(config.seed, "guides", 0);
    let dataset = generate_guide_dataset(&nn.net, train, config.mixture.guides_per_sample, &mut rng)?;
    let gmm_fit = train_gmm(&dataset, &config.mixture, derive_seed(config.seed, "em"))?;
    let baseline_fit = if config.mixture.fit_baseline {
        let data = baseline_dataset(train, &nn.net.stats)?;
        Some(train_gmm(
            &data,
            &config.mixture,
            derive_seed(config.seed, "em/baseline"),
        )?)
    } else {
        None
    };
    let bundle = ModelBundle::new(
        nn.net,
        gmm_fit.model.clone(),
        baseline_fit.as_ref().map(|f| f.model.clone()),
    )?;
    Ok(TrainedPipeline {
        bundle,
        history: nn.history,
        gmm_fit,
        baseline_fit,
    })
}
