//! Deterministic experiment driver: two-stage training over lambda x alpha x
//! seed grids with run caching, metric logging and checkpointing.
//!
//! Every run consumes four named random streams derived from its seed (data
//! sampling, quantizer noise, codec init, source-model init), so runs that
//! share a seed are noise-matched across alphas and the anchor is bit-identical
//! to a build with the regularizer ablated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::codec::{CodecArch, CodecModel, NoiseSource};
use crate::error::{Error, Result};
use crate::params::AdamOptions;
use crate::rng::{stream, StreamKind};
use crate::source_model::{
    regularized_loss_nodes, source_model_step_loss, ContextMode, SourceModel, SourceModelArch,
};
use crate::sources::{default_gauss_mix, SourceBatch, SourceSpec};

/// Source-model knobs exposed in config files; the dimension always follows
/// the codec input.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct SourceModelConfig {
    pub hidden: Vec<usize>,
    pub context: ContextMode,
}

impl Default for SourceModelConfig {
    fn default() -> Self {
        SourceModelConfig {
            hidden: vec![32, 32],
            context: ContextMode::Factorized,
        }
    }
}

/// Experiment grid configuration, strictly parsed.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    /// Finite pool drawn once per run, then split 9:1 into train and held-out
    /// validation parts.
    pub dataset_size: usize,
    pub codec_lr: f64,
    pub source_lr: f64,
    /// Stage 2 runs every this many steps.
    pub stage2_period: u64,
    pub source: SourceSpec,
    pub codec: CodecArch,
    pub source_model: SourceModelConfig,
    pub out_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambdas: vec![0.0018, 0.0035, 0.0067, 0.0130],
            alphas: vec![0.0, 0.1, 0.3, 1.0, 3.0],
            seeds: vec![1],
            steps: 200_000,
            batch_size: 256,
            eval_every: 5_000,
            dataset_size: 25_600,
            codec_lr: 1e-4,
            source_lr: 1e-3,
            stage2_period: 1,
            source: default_gauss_mix(8),
            codec: CodecArch::default(),
            source_model: SourceModelConfig::default(),
            out_dir: "runs".to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.lambdas.iter().any(|&l| l <= 0.0) {
            return Err(Error::invalid("lambdas must be non-empty and > 0"));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|&a| a < 0.0) {
            return Err(Error::invalid("alphas must be non-empty and >= 0"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.stage2_period == 0 {
            return Err(Error::invalid(
                "batch_size, eval_every and stage2_period must be >= 1",
            ));
        }
        if self.dataset_size < 10 {
            return Err(Error::invalid("dataset_size must be >= 10 for the 9:1 split"));
        }
        if self.codec_lr <= 0.0 || self.source_lr <= 0.0 {
            return Err(Error::invalid("learning rates must be > 0"));
        }
        self.source.validate()?;
        self.codec.validate()?;
        if self.source.dim() != self.codec.input_dim {
            return Err(Error::invalid(format!(
                "source dim {} does not match codec input dim {}",
                self.source.dim(),
                self.codec.input_dim
            )));
        }
        Ok(())
    }

    /// Resolves the per-run configuration for one grid point.
    pub fn resolve(&self, lambda: f64, alpha: f64, seed: u64) -> RunConfig {
        RunConfig {
            lambda,
            alpha,
            seed,
            steps: self.steps,
            batch_size: self.batch_size,
            eval_every: self.eval_every,
            dataset_size: self.dataset_size,
            codec_lr: self.codec_lr,
            source_lr: self.source_lr,
            stage2_period: self.stage2_period,
            source: self.source.clone(),
            codec: self.codec.clone(),
            source_model: SourceModelArch {
                dim: self.codec.input_dim,
                hidden: self.source_model.hidden.clone(),
                context: self.source_model.context,
            },
        }
    }

    pub fn grid(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &lambda in &self.lambdas {
            for &alpha in &self.alphas {
                for &seed in &self.seeds {
                    out.push(self.resolve(lambda, alpha, seed));
                }
            }
        }
        out
    }
}

/// Fully resolved configuration of a single run; its hash names the run
/// directory and is stamped into every artifact the run produces.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub dataset_size: usize,
    pub codec_lr: f64,
    pub source_lr: f64,
    pub stage2_period: u64,
    pub source: SourceSpec,
    pub codec: CodecArch,
    pub source_model: SourceModelArch,
}

impl RunConfig {
    /// Twelve hex chars of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("run config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(12);
        for b in digest.iter().take(6) {
            let _ = write!(hex, "{b:02x}");
        }
        hex
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RunStatus {
    Complete,
    Diverged { step: u64 },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub lambda: f64,
    pub alpha: f64,
    pub seed: u64,
    pub rate_bpd: f64,
    pub mse: f64,
    pub quality_db: f64,
    pub reg_bits: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: RunConfig,
    pub status: RunStatus,
    pub metrics: Vec<MetricRow>,
    pub run_dir: PathBuf,
    pub wall_secs: f64,
    pub cached: bool,
}

impl RunRecord {
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.run_dir.join("checkpoint")
    }

    pub fn final_metrics(&self) -> Result<&MetricRow> {
        self.metrics
            .last()
            .ok_or_else(|| Error::invariant(format!("run {} has no metrics", self.run_id)))
    }
}

/// Options that affect how a run executes but not what it computes; they are
/// deliberately excluded from the run hash.
#[derive(Clone, Debug, Default)]
pub struct TrainOpts {
    /// Hard-disables the regularizer machinery: a separate code path used to
    /// demonstrate that alpha = 0 runs are bit-identical to it.
    pub ablate_regularizer: bool,
    /// Recorded in run.json so artifacts name their producing command.
    pub command_line: String,
}

fn format_float(v: f64) -> String {
    // Shortest round-trip representation; stable for byte-compared outputs.
    format!("{v}")
}

pub fn metrics_to_csv(run_id: &str, seed: u64, rows: &[MetricRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# config_hash: {run_id}");
    let _ = writeln!(out, "# seed: {seed}");
    let _ = writeln!(out, "step,lambda,alpha,seed,rate_bpd,mse,quality_db,reg_bits");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step,
            format_float(r.lambda),
            format_float(r.alpha),
            r.seed,
            format_float(r.rate_bpd),
            format_float(r.mse),
            format_float(r.quality_db),
            format_float(r.reg_bits)
        );
    }
    out
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("step,") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::invalid(format!(
                "metrics row has {} fields, expected 8: {line}",
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad float {s:?} in metrics row")))
        };
        let parse_u = |s: &str| -> Result<u64> {
            s.parse::<u64>()
                .map_err(|_| Error::invalid(format!("bad integer {s:?} in metrics row")))
        };
        rows.push(MetricRow {
            step: parse_u(fields[0])?,
            lambda: parse_f(fields[1])?,
            alpha: parse_f(fields[2])?,
            seed: parse_u(fields[3])?,
            rate_bpd: parse_f(fields[4])?,
            mse: parse_f(fields[5])?,
            quality_db: parse_f(fields[6])?,
            reg_bits: parse_f(fields[7])?,
        });
    }
    Ok(rows)
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    run_id: String,
    config: RunConfig,
    status: RunStatus,
    wall_secs: f64,
    command_line: String,
    checkpoint: String,
    metrics: String,
    source_model_checkpoint: Option<String>,
}

fn load_cached(dir: &Path) -> Result<Option<RunRecord>> {
    let manifest_path = dir.join("run.json");
    if !manifest_path.exists() {
        return Ok(None);
    }
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if !matches!(manifest.status, RunStatus::Complete) {
        return Ok(None);
    }
    let metrics = metrics_from_csv(&fs::read_to_string(dir.join(&manifest.metrics))?)?;
    Ok(Some(RunRecord {
        run_id: manifest.run_id,
        config: manifest.config,
        status: manifest.status,
        metrics,
        run_dir: dir.to_path_buf(),
        wall_secs: manifest.wall_secs,
        cached: true,
    }))
}

struct SplitPool {
    train: SourceBatch,
    eval: SourceBatch,
}

fn split_dataset(cfg: &RunConfig, data_rng: &mut rand_chacha::ChaCha12Rng) -> Result<SplitPool> {
    let sampler = cfg.source.sampler()?;
    let pool = sampler.sample_batch(data_rng, cfg.dataset_size);
    let train_rows = cfg.dataset_size * 9 / 10;
    let val_rows = cfg.dataset_size - train_rows;
    let dim = pool.dim;
    let train = SourceBatch {
        rows: train_rows,
        dim,
        data: pool.data[..train_rows * dim].to_vec(),
        domain: pool.domain.clone(),
    };
    let eval_rows = val_rows.min(cfg.batch_size);
    let eval = SourceBatch {
        rows: eval_rows,
        dim,
        data: pool.data[train_rows * dim..(train_rows + eval_rows) * dim].to_vec(),
        domain: pool.domain,
    };
    Ok(SplitPool { train, eval })
}

fn gather_batch(pool: &SourceBatch, rng: &mut rand_chacha::ChaCha12Rng, rows: usize) -> SourceBatch {
    use rand::Rng;
    let dim = pool.dim;
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let i = rng.random_range(0..pool.rows);
        data.extend_from_slice(pool.row(i));
    }
    SourceBatch {
        rows,
        dim,
        data,
        domain: pool.domain.clone(),
    }
}

/// Eval-mode metrics on the held-out batch: hard quantization, rate on the
/// integer latent, quality as -10 log10(MSE).
fn eval_metrics(
    cfg: &RunConfig,
    codec: &CodecModel,
    sm: Option<&SourceModel>,
    eval_batch: &SourceBatch,
    step: u64,
) -> Result<MetricRow> {
    let out = codec.encode_eval(eval_batch)?;
    let reg_bits = match sm {
        Some(sm) => {
            let nll = sm.source_nll(eval_batch, &out.reconstruction)?;
            -nll * eval_batch.dim as f64
        }
        None => 0.0,
    };
    let quality_db = if out.distortion_mse > 0.0 {
        -10.0 * out.distortion_mse.log10()
    } else {
        f64::INFINITY
    };
    Ok(MetricRow {
        step,
        lambda: cfg.lambda,
        alpha: cfg.alpha,
        seed: cfg.seed,
        rate_bpd: out.rate_bits_per_dim,
        mse: out.distortion_mse,
        quality_db,
        reg_bits,
    })
}

fn save_checkpoints(
    dir: &Path,
    run_id: &str,
    cfg: &RunConfig,
    codec: &CodecModel,
    sm: Option<&SourceModel>,
) -> Result<()> {
    let header = serde_json::json!({
        "codec": codec.arch,
        "config_hash": run_id,
        "seed": cfg.seed,
    });
    crate::checkpoint::save(&dir.join("checkpoint"), &codec.params, &header)?;
    if let Some(sm) = sm {
        let header = serde_json::json!({
            "source_model": sm.arch,
            "config_hash": run_id,
            "seed": cfg.seed,
        });
        crate::checkpoint::save(&dir.join("source_model"), &sm.params, &header)?;
    }
    Ok(())
}

/// Executes one run (or returns its cached record). Deterministic given
/// (config, seed): reruns produce byte-identical metrics files.
pub fn train_one(cfg: &RunConfig, out_root: &Path, opts: &TrainOpts) -> Result<RunRecord> {
    let run_id = cfg.hash();
    let dir = out_root.join(&run_id);
    if let Some(cached) = load_cached(&dir)? {
        return Ok(cached);
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("in_progress"), b"")?;
    let started = Instant::now();

    // One data stream serves pool sampling first, then batch indices.
    let mut data_rng = stream(cfg.seed, StreamKind::DataSampling);
    let pool = split_dataset(cfg, &mut data_rng)?;
    let mut codec = CodecModel::init(cfg.codec.clone(), &mut stream(cfg.seed, StreamKind::CodecInit))?;
    let use_regularizer = cfg.alpha > 0.0 && !opts.ablate_regularizer;
    let mut sm = if use_regularizer {
        Some(SourceModel::init(
            cfg.source_model.clone(),
            &mut stream(cfg.seed, StreamKind::SourceModelInit),
        )?)
    } else {
        None
    };
    let mut noise = NoiseSource::Seeded(stream(cfg.seed, StreamKind::QuantizerNoise));

    let mut metrics = Vec::new();
    metrics.push(eval_metrics(cfg, &codec, sm.as_ref(), &pool.eval, 0)?);
    save_checkpoints(&dir, &run_id, cfg, &codec, sm.as_ref())?;

    let mut status = RunStatus::Complete;
    let adam = AdamOptions::default();
    let mut last_eval = 0u64;

    'steps: for t in 1..=cfg.steps {
        let batch = gather_batch(&pool.train, &mut data_rng, cfg.batch_size);

        // Stage 1: update the codec; the source model, when present, is bound
        // frozen so only its reconstruction path contributes gradients.
        let mut tape = Tape::new();
        let stage1 = (|| -> Result<Vec<f64>> {
            let codec_ids = codec.params.bind_trainable(&mut tape)?;
            let nodes = codec.train_graph(&mut tape, &codec_ids, &batch, &mut noise)?;
            let loss = if opts.ablate_regularizer || sm.is_none() {
                crate::codec::rd_loss_node(&mut tape, &nodes, cfg.lambda)?
            } else {
                let sm_ref = sm.as_ref().expect("regularizer enabled");
                let sm_ids = sm_ref.params.bind_frozen(&mut tape)?;
                regularized_loss_nodes(&mut tape, &nodes, Some((sm_ref, &sm_ids)), cfg.lambda, cfg.alpha)?
                    .total
            };
            if !tape.scalar(loss).is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "non-finite loss at step {t}"
                )));
            }
            let grads = tape.backward(loss)?;
            let grad_map = codec.params.collect_grads(&tape, &codec_ids, &grads);
            codec.params.adam_step(&grad_map, cfg.codec_lr, adam)?;
            Ok(tape.value(nodes.xhat).to_vec())
        })();
        let xhat_frozen = match stage1 {
            Ok(v) => v,
            Err(Error::TrainingDiverged(msg)) | Err(Error::ModelDiverged(msg)) => {
                log::warn!("run {run_id}: aborting at step {t}: {msg}");
                status = RunStatus::Diverged { step: t };
                break 'steps;
            }
            Err(e) => return Err(e),
        };

        // Stage 2: freeze the codec, fit the source model by maximum
        // likelihood on the pre-update reconstruction.
        if let Some(sm_mut) = sm.as_mut() {
            if t % cfg.stage2_period == 0 {
                let mut tape2 = Tape::new();
                let stage2 = (|| -> Result<()> {
                    let sm_ids = sm_mut.params.bind_trainable(&mut tape2)?;
                    let loss =
                        source_model_step_loss(&mut tape2, sm_mut, &sm_ids, &batch, &xhat_frozen)?;
                    let grads = tape2.backward(loss)?;
                    let grad_map = sm_mut.params.collect_grads(&tape2, &sm_ids, &grads);
                    sm_mut
                        .params
                        .adam_step(&grad_map, cfg.source_lr, adam)
                        .map_err(|e| match e {
                            Error::TrainingDiverged(m) => Error::ModelDiverged(m),
                            other => other,
                        })?;
                    Ok(())
                })();
                if let Err(Error::ModelDiverged(msg)) | Err(Error::TrainingDiverged(msg)) = stage2 {
                    log::warn!("run {run_id}: source model diverged at step {t}: {msg}");
                    status = RunStatus::Diverged { step: t };
                    break 'steps;
                }
            }
        }

        if t % cfg.eval_every == 0 || t == cfg.steps {
            if t != last_eval {
                metrics.push(eval_metrics(cfg, &codec, sm.as_ref(), &pool.eval, t)?);
                save_checkpoints(&dir, &run_id, cfg, &codec, sm.as_ref())?;
                last_eval = t;
            }
        }
    }

    let wall_secs = started.elapsed().as_secs_f64();
    fs::write(dir.join("metrics.csv"), metrics_to_csv(&run_id, cfg.seed, &metrics))?;
    let manifest = RunManifest {
        run_id: run_id.clone(),
        config: cfg.clone(),
        status,
        wall_secs,
        command_line: opts.command_line.clone(),
        checkpoint: "checkpoint".to_string(),
        metrics: "metrics.csv".to_string(),
        source_model_checkpoint: sm.as_ref().map(|_| "source_model".to_string()),
    };
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&manifest)?)?;
    let _ = fs::remove_file(dir.join("in_progress"));
    Ok(RunRecord {
        run_id,
        config: cfg.clone(),
        status,
        metrics,
        run_dir: dir,
        wall_secs,
        cached: false,
    })
}

#[derive(Debug)]
pub struct GridOutcome {
    pub records: Vec<RunRecord>,
    pub failures: Vec<(String, String)>,
}

impl GridOutcome {
    pub fn all_complete(&self) -> bool {
        self.failures.is_empty()
            && self
                .records
                .iter()
                .all(|r| matches!(r.status, RunStatus::Complete))
    }
}

/// Runs every grid point, fanning out across worker threads. Failed runs are
/// reported and do not stop the rest; results keep grid order.
pub fn train_grid(config: &TrainConfig, out_root: &Path, opts: &TrainOpts) -> Result<GridOutcome> {
    use rayon::prelude::*;
    config.validate()?;
    let grid = config.grid();
    let results: Vec<(RunConfig, Result<RunRecord>)> = grid
        .into_par_iter()
        .map(|cfg| {
            let r = train_one(&cfg, out_root, opts);
            (cfg, r)
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (cfg, r) in results {
        match r {
            Ok(rec) => {
                if let RunStatus::Diverged { step } = rec.status {
                    failures.push((rec.run_id.clone(), format!("diverged at step {step}")));
                }
                records.push(rec);
            }
            Err(e) => failures.push((cfg.hash(), e.to_string())),
        }
    }
    Ok(GridOutcome { records, failures })
}

/// Groups records by (alpha, seed), each group sorted by lambda; used by the
/// reporting layer.
pub fn group_by_alpha_seed(records: &[RunRecord]) -> BTreeMap<(String, u64), Vec<&RunRecord>> {
    let mut groups: BTreeMap<(String, u64), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((format_float(r.config.alpha), r.config.seed))
            .or_default()
            .push(r);
    }
    for group in groups.values_mut() {
        group.sort_by(|a, b| a.config.lambda.total_cmp(&b.config.lambda));
    }
    groups
}
