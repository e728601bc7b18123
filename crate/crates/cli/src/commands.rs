use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use gmrnet::data::{load_scene, load_scene_dir, pasts_at, write_scene, TrainingSample};
use gmrnet::metrics::{format_summary_table, measure_generation_time, per_step_csv, ReportRow};
use gmrnet::mixture::EmFit;
use gmrnet::pipeline::{
    self, baseline_dataset, derive_seed, generate_guide_dataset, load_bundle, predict_candidates, require_dir,
    save_bundle, stream_rng, synthetic_scenes, window_scenes, GuideDataset, GuideNet, Method, ModelBundle,
    PipelineConfig,
};
use serde::Serialize;

use crate::manifest::Manifest;

/// Overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "GMRNET_OUT_DIR";

pub const NET_FILE: &str = "guide_net.bin";
pub const HISTORY_FILE: &str = "training_history.json";
pub const GUIDES_FILE: &str = "guides.bin";
pub const BUNDLE_FILE: &str = "model.bundle";
pub const EM_FILE: &str = "em_trace.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const EVAL_DIR: &str = "eval";
pub const BENCH_FILE: &str = "bench.json";

/// Resolved configuration and the provenance collected while a command runs.
pub struct Context {
    command: &'static str,
    config_path: Option<PathBuf>,
    pub config: PipelineConfig,
    pub out_dir: PathBuf,
    streams: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Context {
    pub fn new(command: &'static str, config_path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<Self> {
        let mut config = match config_path {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = seed {
            config.seed = s;
        }
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            config.output_dir = dir.into();
        }
        let out_dir = config.output_dir.clone();
        fs::create_dir_all(&out_dir).with_context(|| format!("creating output directory {}", out_dir.display()))?;
        Ok(Context {
            command,
            config_path: config_path.map(Path::to_path_buf),
            config,
            out_dir,
            streams: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Record a stream seeded from the master seed and return its label.
    fn stream(&mut self, label: &str) -> String {
        self.streams
            .insert(label.to_string(), derive_seed(self.config.seed, label));
        label.to_string()
    }

    fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    fn output(&mut self, path: PathBuf) {
        log::info!("wrote {}", path.display());
        self.outputs.push(path);
    }

    /// Existing artifact from an earlier stage.
    fn artifact(&mut self, name: &str, producer: &str) -> anyhow::Result<PathBuf> {
        let path = self.out(name);
        if !path.is_file() {
            return Err(gmrnet::Error::Config(format!(
                "{} not found; run `gmrnet {}` first",
                path.display(),
                producer
            ))
            .into());
        }
        self.input(&path);
        Ok(path)
    }

    fn split(&mut self, dir: &Path, what: &str) -> anyhow::Result<Vec<TrainingSample>> {
        require_dir(dir, what)?;
        self.input(dir);
        let scenes = load_scene_dir(dir)?;
        Ok(window_scenes(&scenes, &self.config.window)?)
    }

    /// Refuse artifacts built with a different window geometry.
    fn check_window(&self, net: &GuideNet) -> anyhow::Result<()> {
        if net.config.window != self.config.window {
            return Err(gmrnet::Error::Config(format!(
                "window {:?} differs from the {:?} the network was trained with",
                self.config.window, net.config.window
            ))
            .into());
        }
        Ok(())
    }

    pub fn finish(self) -> anyhow::Result<()> {
        let manifest = Manifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_path: self.config_path,
            config_hash: self.config.hash()?,
            seed: self.config.seed,
            streams: self.streams,
            inputs: self.inputs,
            outputs: self.outputs,
            config: self.config.to_toml()?,
        };
        manifest.write(&self.out_dir)?;
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(ctx: &mut Context) -> anyhow::Result<()> {
    let cfg = ctx.config.clone();
    let splits = synthetic_scenes(&cfg.synthetic, cfg.seed)?;
    for (name, dir, scenes) in [
        ("train", &cfg.data.train, &splits.train),
        ("val", &cfg.data.val, &splits.val),
        ("test", &cfg.data.test, &splits.test),
    ] {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (i, scene) in scenes.iter().enumerate() {
            ctx.stream(&format!("scene/{}/{}", name, i));
            let path = dir.join(format!("scene_{:03}.txt", i));
            write_scene(scene, &path)?;
            ctx.output(path);
        }
    }
    Ok(())
}

pub fn train_nn(ctx: &mut Context) -> anyhow::Result<()> {
    let (train_dir, val_dir) = (ctx.config.data.train.clone(), ctx.config.data.val.clone());
    let train = ctx.split(&train_dir, "training")?;
    let val = ctx.split(&val_dir, "validation")?;
    log::info!("{} training and {} validation windows", train.len(), val.len());
    for label in ["nn/init", "nn/shuffle", "nn/noise"] {
        ctx.stream(label);
    }
    let trained = pipeline::train_nn(&ctx.config, &train, &val)?;
    let net_path = ctx.out(NET_FILE);
    trained.net.save(&net_path)?;
    ctx.output(net_path);
    let history_path = ctx.out(HISTORY_FILE);
    write_json(&history_path, &trained.history)?;
    ctx.output(history_path);
    Ok(())
}

pub fn gen_guides(ctx: &mut Context) -> anyhow::Result<()> {
    let net_path = ctx.artifact(NET_FILE, "train-nn")?;
    let net = GuideNet::load(&net_path)?;
    ctx.check_window(&net)?;
    let train_dir = ctx.config.data.train.clone();
    let train = ctx.split(&train_dir, "training")?;
    let label = ctx.stream("guides");
    let mut rng = stream_rng(ctx.config.seed, &label, 0);
    let dataset = generate_guide_dataset(&net, &train, ctx.config.mixture.guides_per_sample, &mut rng)?;
    log::info!("{} guide rows of dimension {}", dataset.rows.len(), dataset.input_dim);
    let path = ctx.out(GUIDES_FILE);
    dataset.save(&path)?;
    ctx.output(path);
    Ok(())
}

#[derive(Serialize)]
struct EmTrace {
    iterations: usize,
    converged: bool,
    components: usize,
    log_likelihood: Vec<f64>,
}

impl From<&EmFit> for EmTrace {
    fn from(f: &EmFit) -> Self {
        EmTrace {
            iterations: f.iterations,
            converged: f.converged,
            components: f.model.n_components(),
            log_likelihood: f.log_likelihood.clone(),
        }
    }
}

pub fn train_gmm(ctx: &mut Context) -> anyhow::Result<()> {
    let net_path = ctx.artifact(NET_FILE, "train-nn")?;
    let guides_path = ctx.artifact(GUIDES_FILE, "gen-guides")?;
    let net = GuideNet::load(&net_path)?;
    ctx.check_window(&net)?;
    let dataset = GuideDataset::load(&guides_path)?;
    if dataset.stats != net.stats {
        bail!(gmrnet::Error::Config(format!(
            "{} was not generated by {}",
            guides_path.display(),
            net_path.display()
        )));
    }
    let train_dir = ctx.config.data.train.clone();
    let baseline_train = if ctx.config.mixture.fit_baseline {
        Some(ctx.split(&train_dir, "training")?)
    } else {
        None
    };
    let mixture = ctx.config.mixture.clone();
    let label = ctx.stream("em");
    let fit = pipeline::train_gmm(&dataset, &mixture, derive_seed(ctx.config.seed, &label))?;
    let mut traces = BTreeMap::new();
    traces.insert(Method::Full.name(), EmTrace::from(&fit));
    let baseline = match baseline_train {
        Some(train) => {
            let label = ctx.stream("em/baseline");
            let data = baseline_dataset(&train, &net.stats)?;
            let b = pipeline::train_gmm(&data, &mixture, derive_seed(ctx.config.seed, &label))?;
            traces.insert(Method::GmrOnly.name(), EmTrace::from(&b));
            Some(b.model)
        }
        None => None,
    };
    let bundle = ModelBundle::new(net, fit.model, baseline)?;
    let path = ctx.out(BUNDLE_FILE);
    save_bundle(&bundle, &path)?;
    ctx.output(path);
    let trace_path = ctx.out(EM_FILE);
    write_json(&trace_path, &traces)?;
    ctx.output(trace_path);
    Ok(())
}

fn load_checked_bundle(ctx: &mut Context) -> anyhow::Result<ModelBundle> {
    let path = ctx.artifact(BUNDLE_FILE, "train-gmm")?;
    let bundle = load_bundle(&path)?;
    ctx.check_window(bundle.net())?;
    Ok(bundle)
}

fn methods(bundle: &ModelBundle) -> Vec<Method> {
    if bundle.baseline().is_some() {
        vec![Method::Full, Method::GmrOnly]
    } else {
        vec![Method::Full]
    }
}

#[derive(Serialize)]
struct PredictionRecord {
    candidate: usize,
    method: Method,
    agent_id: u64,
    frame: u64,
    /// `[t, x, y, z]` rows; `t` is seconds after the last observed frame.
    points: Vec<[f64; 4]>,
    guide: Option<Vec<[f64; 4]>>,
}

fn rows(t: &gmrnet::data::Trajectory) -> Vec<[f64; 4]> {
    t.points().iter().map(|p| [p.t, p.x, p.y, p.z]).collect()
}

pub fn predict(
    ctx: &mut Context,
    scene_path: &Path,
    ego: u64,
    frame: u64,
    samples: Option<usize>,
    method: Method,
) -> anyhow::Result<()> {
    ctx.input(scene_path);
    let bundle = load_checked_bundle(ctx)?;
    if method == Method::GmrOnly && bundle.baseline().is_none() {
        bail!(gmrnet::Error::Config("the bundle has no gmr-only mixture".into()));
    }
    let scene = load_scene(scene_path)?;
    let (past, neighbors) = pasts_at(&scene, ego, frame, bundle.net().past_len())?;
    let n = samples.unwrap_or(ctx.config.evaluation.n_samples);
    let label = ctx.stream("predict");
    let mut rng = stream_rng(ctx.config.seed, &label, 0);
    let candidates = predict_candidates(&bundle, method, &past, &neighbors, n, &mut rng)?;
    let mut text = String::new();
    for (i, c) in candidates.iter().enumerate() {
        let record = PredictionRecord {
            candidate: i,
            method,
            agent_id: ego,
            frame,
            points: rows(&c.trajectory),
            guide: c.guide.as_ref().map(|g| rows(g.trajectory())),
        };
        text.push_str(&serde_json::to_string(&record)?);
        text.push('\n');
    }
    let path = ctx.out(PREDICTIONS_FILE);
    write_text(&path, &text)?;
    ctx.output(path);
    Ok(())
}

pub fn evaluate(ctx: &mut Context) -> anyhow::Result<()> {
    let bundle = load_checked_bundle(ctx)?;
    let test_dir = ctx.config.data.test.clone();
    let test = ctx.split(&test_dir, "test")?;
    let dir = ctx.out(EVAL_DIR);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut reports = Vec::new();
    for method in methods(&bundle) {
        ctx.stream(&format!("eval/{}", method.name()));
        let report = pipeline::evaluate(&bundle, &test, method, &ctx.config.evaluation, ctx.config.seed)?;
        let mut lines = String::new();
        for case in &report.cases {
            lines.push_str(&serde_json::to_string(case)?);
            lines.push('\n');
        }
        let path = dir.join(format!("{}.jsonl", method.name()));
        write_text(&path, &lines)?;
        ctx.output(path);
        reports.push(report);
    }
    let dataset = test_dir
        .file_name()
        .map_or_else(|| "test".to_string(), |n| n.to_string_lossy().into_owned());
    let table_rows: Vec<ReportRow<'_>> = reports
        .iter()
        .map(|r| ReportRow {
            method: r.method.name(),
            dataset: &dataset,
            summary: &r.summary,
        })
        .collect();
    let table = format_summary_table(&table_rows);
    println!("{}", table);
    let table_path = dir.join("summary.txt");
    write_text(&table_path, &table)?;
    ctx.output(table_path);
    let summaries: BTreeMap<&str, _> = reports.iter().map(|r| (r.method.name(), &r.summary)).collect();
    let summary_path = dir.join("summary.json");
    write_json(&summary_path, &summaries)?;
    ctx.output(summary_path);
    let curves: Vec<(&str, &[f64])> = reports
        .iter()
        .map(|r| (r.method.name(), r.summary.per_step_ade.as_slice()))
        .collect();
    let csv_path = dir.join("per_step_ade.csv");
    write_text(&csv_path, &per_step_csv(&curves)?)?;
    ctx.output(csv_path);
    Ok(())
}

#[derive(Serialize)]
struct BenchRecord {
    method: Method,
    components: usize,
    n_samples: usize,
    steps: usize,
    cases: usize,
    /// Seconds per predicted step.
    timing: gmrnet::metrics::Timing,
}

pub fn bench(ctx: &mut Context, cases: usize) -> anyhow::Result<()> {
    if cases == 0 {
        bail!(gmrnet::Error::Config("bench needs at least one case".into()));
    }
    let bundle = load_checked_bundle(ctx)?;
    let test_dir = ctx.config.data.test.clone();
    let mut test = ctx.split(&test_dir, "test")?;
    test.truncate(cases);
    let eval = ctx.config.evaluation.clone();
    let steps = ctx.config.window.horizon;
    let mut records = Vec::new();
    for method in methods(&bundle) {
        let label = ctx.stream(&format!("bench/{}", method.name()));
        let mut rng = stream_rng(ctx.config.seed, &label, 0);
        let timing = measure_generation_time(
            |s: &TrainingSample| predict_candidates(&bundle, method, &s.ego, &s.neighbors, eval.n_samples, &mut rng),
            &test,
            steps,
            eval.timing_runs,
        )?;
        let components = match method {
            Method::Full => bundle.gmm().n_components(),
            Method::GmrOnly => bundle.baseline().map_or(0, |b| b.n_components()),
        };
        println!(
            "{:<9} K={:<4} {:.6} s/step (min {:.6}, max {:.6}, {} runs)",
            method.name(),
            components,
            timing.mean,
            timing.min,
            timing.max,
            timing.runs
        );
        records.push(BenchRecord {
            method,
            components,
            n_samples: eval.n_samples,
            steps,
            cases: test.len(),
            timing,
        });
    }
    let path = ctx.out(BENCH_FILE);
    write_json(&path, &records)?;
    ctx.output(path);
    Ok(())
}
