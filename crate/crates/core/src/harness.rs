//! Experiment orchestration: configuration, presets, the pretraining loop
//! with metrics, checkpoints and probes, equivalence verification, plot
//! export and partition inspection.
//!
//! All artifacts of a run land in one directory:
//!
//! ```text
//! config.toml          effective configuration
//! metrics.jsonl        one record per round (deterministic)
//! timing.jsonl         wall-clock time per round
//! checkpoints/         round-NNNNNN.ckpt
//! probes/              round-NNNNNN.json (periodic linear probes)
//! transcripts/         round-NNNNNN.dctr (only with round.record_transcript)
//! model.params         final parameters
//! report.json          final probes and summary
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Checkpoint};
use crate::data::{class_histogram, dirichlet_partition, stratified_subset, total_variation, AugmentConfig, ClientDataset, DataSource, Dataset, PartitionSpec, SyntheticConfig};
use crate::encoder::{encode_value, init_params, EncoderConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::params::ModelParams;
use crate::probe::{self, EvalReport, ProbeConfig, Protocol};
use crate::protocol::{centralized_cco_step, client_views, Federation, Method, RoundConfig, ServerState, Views};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub method: Method,
    pub rounds: usize,
    /// Drives model init, client sampling, augmentation and probes.
    pub seed: u64,
    /// Client-parallel workers; results do not depend on it.
    pub workers: usize,
    /// Rounds between checkpoints; 0 means every 5% of the run.
    pub checkpoint_every: usize,
    /// Rounds between linear probes; 0 means every 10% of the run.
    pub probe_every: usize,
    pub final_probes: Vec<Protocol>,
    pub data: DataSource,
    pub partition: PartitionSpec,
    pub encoder: EncoderConfig,
    pub round: RoundConfig,
    pub server: OptimizerConfig,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let nuisance = 32;
        ExperimentConfig {
            name: "experiment".into(),
            method: Method::Dcco,
            rounds: 2000,
            seed: 0,
            workers: 1,
            checkpoint_every: 0,
            probe_every: 0,
            final_probes: vec![Protocol::Linear, Protocol::Finetune, Protocol::Scratch],
            data: DataSource::Synthetic(SyntheticConfig {
                noise_std: 0.3,
                nuisance_dims: nuisance,
                nuisance_std: 2.0,
                seed: 1,
                ..SyntheticConfig::default()
            }),
            partition: PartitionSpec {
                num_clients: 1000,
                samples_per_client: 2,
                alpha: 0.0,
                seed: 0,
            },
            encoder: EncoderConfig {
                input_dim: 64,
                hidden_dims: vec![64],
                embed_dim: 64,
                projection_dims: vec![64, 16],
                groups: 8,
                ..EncoderConfig::default()
            },
            round: RoundConfig {
                clients_per_round: 32,
                local_lr: 1.0,
                lambda: 5.0,
                augment: AugmentConfig {
                    noise_std: 0.5,
                    mask_prob: 0.2,
                    nuisance_dims: nuisance,
                    nuisance_noise_std: 3.0,
                    ..AugmentConfig::default()
                },
                ..RoundConfig::default()
            },
            server: OptimizerConfig::adam(5e-3),
            probe: ProbeConfig {
                labeled_fraction: 0.02,
                ..ProbeConfig::default()
            },
        }
    }
}

/// Names of the shipped presets.
pub const PRESETS: &[&str] = &[
    "toy-trend",
    "table1-noniid-1spc",
    "table1-noniid-4spc",
    "table1-noniid-8spc",
    "table1-noniid-16spc",
    "table1-iid-4spc",
    "table1-iid-8spc",
    "table1-iid-16spc",
    "table2-16cpr",
    "table2-32cpr",
    "table2-64cpr",
];

/// Concentration used for the "IID" presets.
pub const IID_ALPHA: f64 = 1000.0;

impl ExperimentConfig {
    /// A named preset.
    ///
    /// Table 1 columns keep their samples-per-client and scale the pool from
    /// 50K to 2K samples (so client counts shrink 25x) and the global batch
    /// from 512 to 64 samples per round. Table 2 settings divide the clients
    /// per round by four over 1000 two-sample clients and finetune.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = ExperimentConfig {
            name: name.to_string(),
            ..ExperimentConfig::default()
        };
        let table1 = |c: &mut ExperimentConfig, spc: usize, alpha: f64| {
            c.partition.samples_per_client = spc;
            c.partition.num_clients = 2000 / spc;
            c.partition.alpha = alpha;
            c.round.clients_per_round = 64 / spc;
        };
        let table2 = |c: &mut ExperimentConfig, k: usize| {
            c.round.clients_per_round = k;
            c.final_probes = vec![Protocol::Finetune, Protocol::Scratch];
        };
        match name {
            "toy-trend" => {}
            "table1-noniid-1spc" => table1(&mut c, 1, 0.0),
            "table1-noniid-4spc" => table1(&mut c, 4, 0.0),
            "table1-noniid-8spc" => table1(&mut c, 8, 0.0),
            "table1-noniid-16spc" => table1(&mut c, 16, 0.0),
            "table1-iid-4spc" => table1(&mut c, 4, IID_ALPHA),
            "table1-iid-8spc" => table1(&mut c, 8, IID_ALPHA),
            "table1-iid-16spc" => table1(&mut c, 16, IID_ALPHA),
            "table2-16cpr" => table2(&mut c, 16),
            "table2-32cpr" => table2(&mut c, 32),
            "table2-64cpr" => table2(&mut c, 64),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(c)
    }

    /// Parses TOML, applies `key=value` overrides (dotted keys, TOML
    /// literals; bare words are taken as strings) and validates.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: toml::Table = toml::from_str(text).map_err(|e| Error::parse("config", e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut value, k, v)?;
        }
        let config: ExperimentConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_preset(name: &str, overrides: &[(String, String)]) -> Result<Self> {
        Self::from_toml(&Self::preset(name)?.to_toml()?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(format!("cannot serialize config: {e}")))
    }

    /// Checks everything that does not need the data loaded.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| match e {
            Error::InvalidConfig(m) if !m.starts_with(name) => Error::InvalidConfig(format!("{name}: {m}")),
            other => other,
        };
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be positive".into()));
        }
        self.method
            .check_samples_per_client(self.partition.samples_per_client)
            .map_err(|e| field("partition.samples_per_client", e))?;
        self.encoder.validate().map_err(|e| field("encoder", e))?;
        self.round.validate().map_err(|e| field("round", e))?;
        self.server.validate("server")?;
        self.probe.validate()?;
        if let DataSource::Synthetic(s) = &self.data {
            s.validate().map_err(|e| field("data", e))?;
            if s.dim != self.encoder.input_dim {
                return Err(Error::InvalidConfig(format!(
                    "encoder.input_dim {} does not match data.dim {}",
                    self.encoder.input_dim, s.dim
                )));
            }
            self.partition.validate(s.samples).map_err(|e| field("partition", e))?;
        }
        if self.round.clients_per_round > self.partition.num_clients {
            return Err(Error::KTooLarge {
                k: self.round.clients_per_round,
                pool: self.partition.num_clients,
            });
        }
        Ok(())
    }

    pub fn checkpoint_interval(&self) -> usize {
        interval(self.checkpoint_every, self.rounds, 20)
    }

    pub fn probe_interval(&self) -> usize {
        interval(self.probe_every, self.rounds, 10)
    }

    fn round_config(&self) -> RoundConfig {
        RoundConfig {
            seed: self.seed,
            ..self.round.clone()
        }
    }

    fn probe_config(&self, protocol: Protocol) -> ProbeConfig {
        ProbeConfig {
            protocol,
            seed: self.seed,
            ..self.probe.clone()
        }
    }
}

fn interval(explicit: usize, rounds: usize, parts: usize) -> usize {
    if explicit > 0 {
        explicit
    } else {
        (rounds / parts).max(1)
    }
}

/// Sets `key` (dotted path) in `table` to `raw` parsed as a TOML value.
pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parsed = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::InvalidConfig(format!("empty override key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), parsed);
    Ok(())
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: u64,
    pub loss: f64,
    pub lr: f64,
    pub probe_accuracy: Option<f64>,
    pub messages: u64,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats_digest: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicProbe {
    /// Rounds completed when the probe ran.
    pub round: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub method: Method,
    pub rounds: usize,
    pub seed: u64,
    pub final_loss: f64,
    pub partition_fallbacks: usize,
    pub periodic_probes: Vec<PeriodicProbe>,
    /// Best periodic (or final) linear probe.
    pub best_linear: Option<PeriodicProbe>,
    pub final_probes: Vec<EvalReport>,
}

impl ExperimentReport {
    pub fn accuracy(&self, protocol: Protocol) -> Option<f64> {
        self.final_probes.iter().find(|r| r.protocol == protocol).map(|r| r.accuracy)
    }
}

/// Everything derived from the config before training starts.
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub clients: Vec<ClientDataset>,
    pub fallbacks: usize,
    pub labeled_indices: Vec<usize>,
    pub labeled: Dataset,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let (train, test) = config.data.load()?;
    if train.dim() != config.encoder.input_dim {
        return Err(Error::InvalidConfig(format!(
            "encoder.input_dim {} does not match the data ({} columns)",
            config.encoder.input_dim,
            train.dim()
        )));
    }
    let partition = dirichlet_partition(&train, &config.partition)?;
    let labeled_indices = stratified_subset(&train, config.probe.labeled_fraction, seed::derive(&[config.seed, 0x1abe1]))?;
    let labeled = train.subset(&labeled_indices)?;
    Ok(Prepared {
        train,
        test,
        clients: partition.clients,
        fallbacks: partition.fallbacks,
        labeled_indices,
        labeled,
    })
}

fn round_file(dir: &Path, round: u64, ext: &str) -> PathBuf {
    dir.join(format!("round-{round:06}.{ext}"))
}

/// Writes via a temporary file and a rename so readers never see a partial
/// file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let round = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("round-"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(r) = round {
            if best.as_ref().is_none_or(|(b, _)| r > *b) {
                best = Some((r, path));
            }
        }
    }
    Ok(best)
}

/// Reads metrics records, reporting `file:line` on malformed lines.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

/// Keeps the metrics and timing lines for rounds before `round`. A torn
/// final line (from a crash) is dropped rather than treated as an error.
fn truncate_jsonl(path: &Path, round: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines() {
        let Ok(v) = serde_json::from_str::<serde_json::Value>(line) else { continue };
        if v.get("round").and_then(|r| r.as_u64()).is_some_and(|r| r < round) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

fn append_line(file: &mut File, value: &impl Serialize) -> Result<()> {
    let mut line = serde_json::to_string(value).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    line.push('\n');
    file.write_all(line.as_bytes())?;
    file.flush()?;
    Ok(())
}

fn to_json(value: &impl Serialize) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(value).map_err(|e| Error::InvalidConfig(e.to_string()))
}

/// Runs pretraining and evaluation, writing every artifact under `out`.
///
/// With `resume`, training continues from the newest checkpoint in `out`
/// and produces the same artifacts as an uninterrupted run.
pub fn run_experiment(config: &ExperimentConfig, out: &Path, resume: bool) -> Result<ExperimentReport> {
    let prepared = prepare(config)?;
    fs::create_dir_all(out.join("checkpoints"))?;
    fs::create_dir_all(out.join("probes"))?;
    let config_path = out.join("config.toml");
    let echo = config.to_toml()?;
    if resume && config_path.exists() {
        let previous = fs::read_to_string(&config_path)?;
        let previous: ExperimentConfig = toml::from_str(&previous).map_err(|e| Error::parse(config_path.display().to_string(), e.to_string()))?;
        if (ExperimentConfig { workers: 0, ..previous }) != (ExperimentConfig { workers: 0, ..config.clone() }) {
            return Err(Error::InvalidConfig(format!(
                "{} differs from the configuration being resumed",
                config_path.display()
            )));
        }
    }
    write_atomic(&config_path, echo.as_bytes())?;

    let exec = Exec::with_workers(config.workers);
    let round_config = config.round_config();
    let fed = Federation {
        encoder: &config.encoder,
        config: &round_config,
        clients: &prepared.clients,
        exec: &exec,
    };
    let mut server = ServerState::new(init_params(&config.encoder, config.seed)?, OptimizerState::new(config.server.clone()));

    let metrics_path = out.join("metrics.jsonl");
    let timing_path = out.join("timing.jsonl");
    let mut periodic = Vec::new();
    let start = match latest_checkpoint(&out.join("checkpoints"))? {
        Some((round, path)) if resume => {
            let ck = Checkpoint::decode(&fs::read(&path)?)?;
            ck.restore_optimizer(&mut server.optimizer)?;
            ck.model.check_aligned(&server.model)?;
            server.model = ck.model;
            server.round = ck.round;
            truncate_jsonl(&metrics_path, round)?;
            truncate_jsonl(&timing_path, round)?;
            for rec in read_metrics(&metrics_path)? {
                if let Some(a) = rec.probe_accuracy {
                    periodic.push(PeriodicProbe {
                        round: rec.round + 1,
                        accuracy: a,
                    });
                }
            }
            log::info!("resuming {} from round {round}", config.name);
            round
        }
        _ => {
            File::create(&metrics_path)?;
            File::create(&timing_path)?;
            0
        }
    };
    let mut metrics = OpenOptions::new().append(true).open(&metrics_path)?;
    let mut timing = OpenOptions::new().append(true).open(&timing_path)?;

    let ck_every = config.checkpoint_interval() as u64;
    let probe_every = config.probe_interval() as u64;
    let total = config.rounds as u64;
    let linear = config.probe_config(Protocol::Linear);
    let mut last_loss = f64::NAN;
    for r in start..total {
        let lr = config.server.lr_at(r as usize, config.rounds)?;
        let output = fed.run_round(config.method, &mut server, lr)?;
        let trace = output.trace;
        last_loss = trace.loss;
        if let Some(t) = output.transcript {
            let dir = out.join("transcripts");
            fs::create_dir_all(&dir)?;
            write_atomic(&round_file(&dir, r, "dctr"), &t.to_bytes())?;
        }
        let done = r + 1;
        let probe_accuracy = if done % probe_every == 0 || done == total {
            let report = probe::linear_eval(&server.model, &config.encoder, &prepared.labeled, &prepared.test, &linear)?;
            write_atomic(&round_file(&out.join("probes"), done, "json"), &to_json(&report)?)?;
            periodic.push(PeriodicProbe {
                round: done,
                accuracy: report.accuracy,
            });
            Some(report.accuracy)
        } else {
            None
        };
        append_line(
            &mut metrics,
            &MetricsRecord {
                round: r,
                loss: trace.loss,
                lr,
                probe_accuracy,
                messages: trace.messages.total(),
                attempts: trace.attempts,
                stats_digest: trace.stats_digest,
            },
        )?;
        append_line(&mut timing, &serde_json::json!({"round": r, "wall_ms": trace.wall_ms}))?;
        if done % ck_every == 0 || done == total {
            let ck = Checkpoint::new(done, &server.model, &server.optimizer);
            write_atomic(&round_file(&out.join("checkpoints"), done, "ckpt"), &ck.encode())?;
        }
        if done % probe_every == 0 {
            log::info!("{} round {done}/{total}: loss {:.4}", config.name, trace.loss);
        }
    }
    if start == total {
        last_loss = read_metrics(&metrics_path)?.last().map_or(f64::NAN, |m| m.loss);
    }
    write_atomic(&out.join("model.params"), &codec::encode_params(&server.model))?;

    let mut final_probes = Vec::new();
    for &protocol in &config.final_probes {
        let pc = config.probe_config(protocol);
        final_probes.push(probe::evaluate(&server.model, &config.encoder, &prepared.labeled, &prepared.test, &pc)?);
    }
    let mut candidates = periodic.clone();
    if let Some(r) = final_probes.iter().find(|r| r.protocol == Protocol::Linear) {
        candidates.push(PeriodicProbe {
            round: total,
            accuracy: r.accuracy,
        });
    }
    let best_linear = candidates.into_iter().fold(None::<PeriodicProbe>, |best, p| match best {
        Some(b) if b.accuracy >= p.accuracy => Some(b),
        _ => Some(p),
    });
    let report = ExperimentReport {
        name: config.name.clone(),
        method: config.method,
        rounds: config.rounds,
        seed: config.seed,
        final_loss: last_loss,
        partition_fallbacks: prepared.fallbacks,
        periodic_probes: periodic,
        best_linear,
        final_probes,
    };
    write_atomic(&out.join("report.json"), &to_json(&report)?)?;
    Ok(report)
}

/// Loads the final parameters written by [`run_experiment`].
pub fn load_model(path: &Path) -> Result<ModelParams> {
    codec::decode_params(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    /// Ill-conditioned draws skipped before this one.
    pub redraws: usize,
    pub clients: usize,
    pub counts: Vec<usize>,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub projection_dims: Vec<usize>,
    pub groups: usize,
    pub weight_standardization: bool,
    pub lambda: f64,
    /// Smallest per-dimension variance of the pooled encodings.
    pub min_variance: f64,
    /// Largest parameter change of the centralized step.
    pub max_step: f64,
    pub max_abs_diff: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub seed: u64,
    pub tolerance: f64,
    pub max_abs_diff: f64,
    pub passed: bool,
    pub trials: Vec<TrialRecord>,
}

fn random_encoder(rng: &mut impl Rng, d: usize) -> EncoderConfig {
    let groups = if rng.gen_bool(0.5) { 1 } else { 2 };
    let input_dim = rng.gen_range(3..=8);
    let hidden_dims: Vec<usize> = (0..rng.gen_range(0..=2)).map(|_| groups * rng.gen_range(2..=4)).collect();
    let embed_dim = hidden_dims.last().copied().unwrap_or(input_dim);
    let mut projection_dims: Vec<usize> = (0..rng.gen_range(0..=1)).map(|_| groups * rng.gen_range(2..=4)).collect();
    projection_dims.push(d);
    EncoderConfig {
        input_dim,
        hidden_dims,
        embed_dim,
        projection_dims,
        groups,
        weight_standardization: rng.gen_bool(0.5),
        ..EncoderConfig::default()
    }
}

/// Draws whose pooled encodings have a dimension with smaller variance are
/// redrawn: near-collapsed dimensions make the step scale like
/// 1/sqrt(variance), so rounding differences in the raw moments blow up and
/// an absolute tolerance stops measuring the protocol.
pub const MIN_TRIAL_VARIANCE: f64 = 1e-2;
const MAX_REDRAWS: usize = 1000;

struct Trial {
    encoder: EncoderConfig,
    clients: Vec<ClientDataset>,
    round: RoundConfig,
    model: ModelParams,
    pooled: Views,
    min_variance: f64,
}

fn draw_trial(rng: &mut impl Rng) -> Result<Trial> {
    let k = [2, 4, 8][rng.gen_range(0..3)];
    let d = [2, 4, 8][rng.gen_range(0..3)];
    let encoder = random_encoder(rng, d);
    let mut next = 0;
    let mut clients = Vec::with_capacity(k);
    for id in 0..k {
        let n = rng.gen_range(1..=5);
        let data = (0..n * encoder.input_dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        clients.push(ClientDataset {
            client_id: id,
            indices: (next..next + n).collect(),
            features: Tensor::matrix(n, encoder.input_dim, data)?,
            labels: vec![0; n],
        });
        next += n;
    }
    let round = RoundConfig {
        clients_per_round: k,
        local_lr: 1.0,
        lambda: rng.gen_range(0.1..5.0),
        seed: rng.gen(),
        ..RoundConfig::default()
    };
    let model = init_params(&encoder, rng.gen())?;
    let views: Vec<Views> = clients
        .iter()
        .map(|c| client_views(c, &round.augment, round.seed, 0))
        .collect::<Result<_>>()?;
    let pooled = Views::concat(&views.iter().collect::<Vec<_>>())?;
    let f = encode_value(&model, &encoder, &pooled.a)?;
    let g = encode_value(&model, &encoder, &pooled.b)?;
    let min_variance = column_variances(&f).into_iter().chain(column_variances(&g)).fold(f64::INFINITY, f64::min);
    Ok(Trial {
        encoder,
        clients,
        round,
        model,
        pooled,
        min_variance,
    })
}

fn column_variances(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.rows(), x.cols());
    (0..d)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| x.data()[i * d + j]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64
        })
        .collect()
}

/// Compares one DCCO round (local GD at lr 1.0, SGD server at lr 1.0)
/// against one centralized step on the pooled batch, over random clients,
/// sample counts, output widths and encoders.
pub fn verify_equivalence(trials: usize, seed: u64, tolerance: f64) -> Result<EquivalenceReport> {
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    if !(tolerance >= 0.0) {
        return Err(Error::InvalidConfig("tolerance must be non-negative".into()));
    }
    let mut records = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut redraws = 0;
        let t = loop {
            let t = draw_trial(&mut seed::stream(&[seed, trial as u64, redraws as u64, 0xe9]))?;
            if t.min_variance >= MIN_TRIAL_VARIANCE {
                break t;
            }
            redraws += 1;
            if redraws == MAX_REDRAWS {
                return Err(Error::InvalidConfig(format!("trial {trial}: no well-conditioned draw in {MAX_REDRAWS} attempts")));
            }
        };
        let exec = Exec::sequential();
        let fed = Federation {
            encoder: &t.encoder,
            config: &t.round,
            clients: &t.clients,
            exec: &exec,
        };
        let mut server = ServerState::new(t.model.clone(), OptimizerState::new(OptimizerConfig::sgd(1.0)));
        fed.run_dcco_round(&mut server, 1.0)?;
        let (central, _) = centralized_cco_step(&t.model, &t.encoder, &t.pooled, t.round.local_lr, t.round.lambda, t.round.variance_eps)?;
        let diff = server.model.max_abs_diff(&central)?;
        let step = central.max_abs_diff(&t.model)?;
        records.push(TrialRecord {
            trial,
            redraws,
            clients: t.clients.len(),
            counts: t.clients.iter().map(|c| c.len()).collect(),
            input_dim: t.encoder.input_dim,
            hidden_dims: t.encoder.hidden_dims.clone(),
            projection_dims: t.encoder.projection_dims.clone(),
            groups: t.encoder.groups,
            weight_standardization: t.encoder.weight_standardization,
            lambda: t.round.lambda,
            min_variance: t.min_variance,
            max_step: step,
            max_abs_diff: diff,
            passed: diff <= tolerance,
        });
    }
    let max_abs_diff = records.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max);
    Ok(EquivalenceReport {
        seed,
        tolerance,
        max_abs_diff,
        passed: records.iter().all(|r| r.passed),
        trials: records,
    })
}

pub const PLOT_HEADER: &str = "round,loss,lr,probe_accuracy";

/// Writes `round,loss,lr,probe_accuracy` rows (empty accuracy when no probe
/// ran that round). Returns the number of rows.
pub fn export_plot_data(metrics_path: &Path, out_path: &Path) -> Result<usize> {
    let records = read_metrics(metrics_path)?;
    let mut w = csv::Writer::from_writer(File::create(out_path)?);
    let io = |e: csv::Error| Error::parse(out_path.display().to_string(), e.to_string());
    w.write_record(PLOT_HEADER.split(',')).map_err(io)?;
    for r in &records {
        w.write_record([
            r.round.to_string(),
            format!("{:?}", r.loss),
            format!("{:?}", r.lr),
            r.probe_accuracy.map(|a| format!("{a:?}")).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(records.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client_id: usize,
    pub samples: usize,
    pub class_counts: Vec<usize>,
    pub tv_to_global: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub num_clients: usize,
    pub samples_per_client: usize,
    pub alpha: f64,
    pub fallbacks: usize,
    pub single_class_fraction: f64,
    pub mean_tv_to_global: f64,
    pub max_tv_to_global: f64,
    pub clients: Vec<ClientSummary>,
}

/// Per-client class make-up of the configured partition.
pub fn partition_inspect(config: &ExperimentConfig) -> Result<PartitionReport> {
    let (train, _) = config.data.load()?;
    let partition = dirichlet_partition(&train, &config.partition)?;
    let global = train.class_prior();
    let clients: Vec<ClientSummary> = partition
        .clients
        .iter()
        .map(|c| {
            let hist = class_histogram(&c.labels, train.num_classes);
            let mut counts = vec![0; train.num_classes];
            c.labels.iter().for_each(|&l| counts[l as usize] += 1);
            ClientSummary {
                client_id: c.client_id,
                samples: c.len(),
                class_counts: counts,
                tv_to_global: total_variation(&hist, &global),
            }
        })
        .collect();
    let n = clients.len() as f64;
    Ok(PartitionReport {
        num_clients: clients.len(),
        samples_per_client: config.partition.samples_per_client,
        alpha: config.partition.alpha,
        fallbacks: partition.fallbacks,
        single_class_fraction: clients.iter().filter(|c| c.class_counts.iter().filter(|&&k| k > 0).count() == 1).count() as f64 / n,
        mean_tv_to_global: clients.iter().map(|c| c.tv_to_global).sum::<f64>() / n,
        max_tv_to_global: clients.iter().map(|c| c.tv_to_global).fold(0.0, f64::max),
        clients,
    })
}
