//! Simulated federated rounds: DCCO, the two FedAvg baselines and a
//! centralized reference, with explicit messages between server and clients.
//!
//! A DCCO round is six phases:
//!
//! 1. sample `K` clients (ascending ids),
//! 2. broadcast the model (`MODEL_BROADCAST`),
//! 3. each client encodes two views of its data and uploads the five batch
//!    means and its count (`STATS_UPLOAD`),
//! 4. the server takes the count-weighted mean,
//! 5. the aggregate goes back to the participants (`AGG_STATS_BROADCAST`),
//! 6. each client takes a gradient step on the loss evaluated at
//!    `local + stop_gradient(aggregated - local)` and uploads its delta
//!    (`DELTA_UPLOAD`); the server averages deltas by count and feeds
//!    `-delta` to its optimizer as a pseudo-gradient.
//!
//! Clients only ever send statistics and deltas. Every message passes
//! through [`Wire`], which counts it and, when transcripts are on, encodes it
//! and hands the recipient the decoded copy.

use std::borrow::Cow;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::codec;
use crate::data::{make_batch_views, AugmentConfig, ClientDataset};
use crate::encoder::{encode, EncoderConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::optim::OptimizerState;
use crate::params::{ModelParams, ParamNodes};
use crate::reduce::weighted_mean;
use crate::seed;
use crate::stats::{
    aggregate_stats, cco_loss, combine_with_stop_gradient, correlation_matrix, local_stats, ntxent_loss, EncodingStats, StatsNodes,
};
use crate::tensor::Tensor;

const MAX_ATTEMPTS: u32 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dcco,
    #[serde(alias = "fedavg_cco")]
    FedavgCco,
    #[serde(alias = "fedavg_contrastive")]
    FedavgContrastive,
    /// Pools the sampled clients' views and takes one step on the pooled batch.
    #[serde(alias = "centralized_cco")]
    CentralizedCco,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dcco, Method::FedavgCco, Method::FedavgContrastive, Method::CentralizedCco];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dcco => "dcco",
            Method::FedavgCco => "fedavg-cco",
            Method::FedavgContrastive => "fedavg-contrastive",
            Method::CentralizedCco => "centralized-cco",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.replace('_', "-"))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }

    /// FedAvg computes batch statistics on a single client, which needs two
    /// samples for a non-degenerate variance.
    pub fn check_samples_per_client(self, spc: usize) -> Result<()> {
        match self {
            Method::FedavgCco | Method::FedavgContrastive if spc < 2 => Err(Error::InvalidConfig(format!(
                "{} needs at least 2 samples per client, got {spc}",
                self.name()
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum FrameKind {
    ModelBroadcast = 1,
    StatsUpload = 2,
    AggStatsBroadcast = 3,
    DeltaUpload = 4,
}

impl FrameKind {
    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(FrameKind::ModelBroadcast),
            2 => Some(FrameKind::StatsUpload),
            3 => Some(FrameKind::AggStatsBroadcast),
            4 => Some(FrameKind::DeltaUpload),
            _ => None,
        }
    }

    /// Whether the frame travels client -> server.
    pub fn is_upload(self) -> bool {
        matches!(self, FrameKind::StatsUpload | FrameKind::DeltaUpload)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub kind: FrameKind,
    pub round: u64,
    pub client_id: u64,
    pub payload: Vec<u8>,
}

pub const TRANSCRIPT_MAGIC: &[u8; 4] = b"DCTR";
pub const TRANSCRIPT_VERSION: u8 = 1;

/// Every frame of one or more rounds, in send order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript {
    pub frames: Vec<Frame>,
}

impl Transcript {
    /// Magic `DCTR`, version byte, frame count (u64), then per frame: kind
    /// (u8), round (u64), client id (u64), payload length (u64), payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = TRANSCRIPT_MAGIC.to_vec();
        out.push(TRANSCRIPT_VERSION);
        out.extend_from_slice(&(self.frames.len() as u64).to_le_bytes());
        for f in &self.frames {
            out.push(f.kind as u8);
            out.extend_from_slice(&f.round.to_le_bytes());
            out.extend_from_slice(&f.client_id.to_le_bytes());
            out.extend_from_slice(&(f.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&f.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = codec::Reader::new(bytes, "transcript");
        r.magic(TRANSCRIPT_MAGIC)?;
        r.version(TRANSCRIPT_VERSION)?;
        let n = r.u64()?;
        let mut frames = Vec::new();
        for _ in 0..n {
            let code = r.u8()?;
            let kind = FrameKind::from_code(code).ok_or_else(|| Error::parse("transcript", format!("unknown frame kind {code}")))?;
            let round = r.u64()?;
            let client_id = r.u64()?;
            let len = r.u64()? as usize;
            let payload = r.bytes(len)?.to_vec();
            frames.push(Frame {
                kind,
                round,
                client_id,
                payload,
            });
        }
        r.finish()?;
        Ok(Transcript { frames })
    }

    pub fn extend(&mut self, other: Transcript) {
        self.frames.extend(other.frames);
    }

    /// Indices of frames whose payload contains the exact little-endian
    /// bytes of `row`.
    pub fn frames_containing(&self, row: &[f64]) -> Vec<usize> {
        let needle: Vec<u8> = row.iter().flat_map(|v| v.to_le_bytes()).collect();
        if needle.is_empty() {
            return Vec::new();
        }
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.payload.windows(needle.len()).any(|w| w == needle.as_slice()))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageCounts {
    pub model_broadcast: u64,
    pub stats_upload: u64,
    pub agg_stats_broadcast: u64,
    pub delta_upload: u64,
}

impl MessageCounts {
    pub fn total(&self) -> u64 {
        self.model_broadcast + self.stats_upload + self.agg_stats_broadcast + self.delta_upload
    }

    fn bump(&mut self, kind: FrameKind) {
        match kind {
            FrameKind::ModelBroadcast => self.model_broadcast += 1,
            FrameKind::StatsUpload => self.stats_upload += 1,
            FrameKind::AggStatsBroadcast => self.agg_stats_broadcast += 1,
            FrameKind::DeltaUpload => self.delta_upload += 1,
        }
    }
}

/// Message accounting for one round.
#[derive(Debug, Default)]
pub struct Wire {
    pub counts: MessageCounts,
    pub transcript: Option<Transcript>,
}

impl Wire {
    pub fn new(record: bool) -> Self {
        Wire {
            counts: MessageCounts::default(),
            transcript: record.then(Transcript::default),
        }
    }

    fn record(&mut self, kind: FrameKind, round: u64, client_id: usize, payload: impl FnOnce() -> Vec<u8>) -> Option<&[u8]> {
        self.counts.bump(kind);
        let t = self.transcript.as_mut()?;
        t.frames.push(Frame {
            kind,
            round,
            client_id: client_id as u64,
            payload: payload(),
        });
        t.frames.last().map(|f| f.payload.as_slice())
    }

    pub fn send_model<'a>(&mut self, round: u64, client_id: usize, model: &'a ModelParams) -> Result<Cow<'a, ModelParams>> {
        match self.record(FrameKind::ModelBroadcast, round, client_id, || codec::encode_params(model)) {
            Some(bytes) => Ok(Cow::Owned(codec::decode_params(bytes)?)),
            None => Ok(Cow::Borrowed(model)),
        }
    }

    pub fn send_stats(&mut self, kind: FrameKind, round: u64, client_id: usize, stats: EncodingStats) -> Result<EncodingStats> {
        match self.record(kind, round, client_id, || codec::encode_stats(&stats)) {
            Some(bytes) => codec::decode_stats(bytes),
            None => Ok(stats),
        }
    }

    pub fn send_delta(&mut self, round: u64, client_id: usize, delta: ModelDelta) -> Result<ModelDelta> {
        match self.record(FrameKind::DeltaUpload, round, client_id, || codec::encode_delta(&delta.params, delta.weight)) {
            Some(bytes) => {
                let (params, weight) = codec::decode_delta(bytes)?;
                Ok(ModelDelta { params, weight })
            }
            None => Ok(delta),
        }
    }
}

/// A client's model change and the sample count that weights it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDelta {
    pub params: ModelParams,
    pub weight: u64,
}

/// Count-weighted mean of deltas, accumulated in slice order.
pub fn aggregate_deltas(deltas: &[ModelDelta]) -> Result<ModelDelta> {
    let first = deltas.first().ok_or(Error::EmptyList("aggregate_deltas"))?;
    for d in &deltas[1..] {
        first.params.check_aligned(&d.params)?;
    }
    let weights: Vec<u64> = deltas.iter().map(|d| d.weight).collect();
    let mut out = ModelParams::new();
    for (name, t) in first.params.iter() {
        let parts: Vec<&[f64]> = deltas
            .iter()
            .map(|d| d.params.get(name).map(|p| p.data()))
            .collect::<Result<_>>()?;
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), weighted_mean(&parts, &weights)?)?);
    }
    Ok(ModelDelta {
        params: out,
        weight: weights.iter().sum(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    pub clients_per_round: usize,
    pub local_lr: f64,
    pub local_steps: usize,
    /// Must be set for `local_steps > 1`; later steps reuse the stale
    /// aggregate, so the result is no longer a centralized step.
    pub allow_multi_step: bool,
    pub lambda: f64,
    pub variance_eps: f64,
    pub temperature: f64,
    pub augment: AugmentConfig,
    /// Chance that a sampled client drops after uploading statistics; any
    /// drop aborts the round, which is resampled.
    pub dropout_prob: f64,
    pub record_transcript: bool,
    /// Set by the experiment seed rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            clients_per_round: 32,
            local_lr: 1.0,
            local_steps: 1,
            allow_multi_step: false,
            lambda: 1.0,
            variance_eps: crate::stats::DEFAULT_VARIANCE_EPS,
            temperature: 0.1,
            augment: AugmentConfig::default(),
            dropout_prob: 0.0,
            record_transcript: false,
            seed: 0,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.clients_per_round == 0 {
            return bad("clients_per_round must be positive");
        }
        if self.local_steps == 0 {
            return bad("local_steps must be positive");
        }
        if self.local_steps > 1 && !self.allow_multi_step {
            return bad("local_steps > 1 requires allow_multi_step = true");
        }
        if !(self.local_lr >= 0.0 && self.local_lr.is_finite()) {
            return bad("local_lr must be a non-negative number");
        }
        if !(self.lambda >= 0.0) || !(self.variance_eps >= 0.0) || !(self.temperature > 0.0) {
            return bad("lambda and variance_eps must be >= 0, temperature > 0");
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return bad("dropout_prob must lie in [0, 1)");
        }
        self.augment.validate()
    }
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub model: ModelParams,
    pub optimizer: OptimizerState,
    /// Rounds completed.
    pub round: u64,
}

impl ServerState {
    pub fn new(model: ModelParams, optimizer: OptimizerState) -> Self {
        ServerState { model, optimizer, round: 0 }
    }

    /// Applies an aggregated delta: `-delta` is the optimizer's gradient.
    pub fn apply_delta(&mut self, delta: &ModelDelta, lr: f64) -> Result<()> {
        let mut pseudo = delta.params.clone();
        pseudo.iter_mut().for_each(|(_, t)| *t = t.scale(-1.0));
        self.optimizer.apply(&mut self.model, &pseudo, lr)?;
        if !self.model.all_finite() {
            return Err(Error::NonFinite("server update"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: u64,
    pub method: Method,
    pub attempts: u32,
    pub sampled: Vec<usize>,
    pub counts: Vec<u64>,
    /// Digest of the aggregated statistics (DCCO only).
    pub stats_digest: Option<String>,
    /// Count-weighted mean of the clients' losses at their first step.
    pub loss: f64,
    pub server_lr: f64,
    pub messages: MessageCounts,
    /// Excluded from comparisons and serialization: it is not reproducible.
    #[serde(skip)]
    pub wall_ms: f64,
}

#[derive(Debug)]
pub struct RoundOutput {
    pub trace: RoundTrace,
    pub transcript: Option<Transcript>,
}

/// Two augmented views of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Views {
    pub a: Tensor,
    pub b: Tensor,
}

impl Views {
    pub fn len(&self) -> usize {
        self.a.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn concat(parts: &[&Views]) -> Result<Views> {
        let a: Vec<&Tensor> = parts.iter().map(|v| &v.a).collect();
        let b: Vec<&Tensor> = parts.iter().map(|v| &v.b).collect();
        Ok(Views {
            a: Tensor::vstack(&a)?,
            b: Tensor::vstack(&b)?,
        })
    }
}

/// Views for `client` in `round`; a function of `(seed, round, client_id)`
/// only, so they do not depend on which other clients were sampled.
pub fn client_views(client: &ClientDataset, augment: &AugmentConfig, seed: u64, round: u64) -> Result<Views> {
    let mut rng = seed::client_rng(seed, round, client.client_id as u64);
    let (a, b) = make_batch_views(&client.features, augment, &mut rng)?;
    Ok(Views { a, b })
}

/// `k` distinct client ids in ascending order, uniform without replacement.
pub fn sample_clients(pool: usize, k: usize, seed: u64, round: u64, attempt: u32) -> Result<Vec<usize>> {
    if k > pool {
        return Err(Error::KTooLarge { k, pool });
    }
    if k == 0 {
        return Err(Error::EmptyRound);
    }
    let mut rng = seed::stream(&[seed, round, attempt as u64, 0x5a3f1e]);
    let mut ids = sample(&mut rng, pool, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// The per-client forward pass kept alive between the statistics upload
/// and the local step, so the encoder runs once per step.
struct Session {
    graph: Graph,
    nodes: ParamNodes,
    f: crate::autodiff::NodeId,
    g: crate::autodiff::NodeId,
    stats: Option<StatsNodes>,
}

impl Session {
    fn open(model: &ModelParams, encoder: &EncoderConfig, views: &Views, with_stats: bool) -> Result<Self> {
        let mut graph = Graph::new();
        let nodes = model.bind(&mut graph)?;
        // every layer acts row by row, so encoding the stacked views equals
        // encoding each separately while standardizing weights only once
        let n = views.len();
        let x = graph.constant(Tensor::vstack(&[&views.a, &views.b])?)?;
        let h = encode(&mut graph, &nodes, encoder, x)?;
        let f = graph.slice_rows(h, 0, n)?;
        let g = graph.slice_rows(h, n, n)?;
        let stats = if with_stats { Some(local_stats(&mut graph, f, g)?) } else { None };
        Ok(Session {
            graph,
            nodes,
            f,
            g,
            stats,
        })
    }

    fn local_stats(&self) -> EncodingStats {
        self.stats.expect("session opened with stats").values(&self.graph)
    }

    /// Gradient of the CCO loss at `aggregated` (or at the local statistics
    /// when `None`), plus the loss value.
    fn cco_gradient(mut self, aggregated: Option<&EncodingStats>, lambda: f64, eps: f64) -> Result<(ModelParams, f64)> {
        let local = self.stats.expect("session opened with stats");
        let combined = match aggregated {
            Some(agg) => combine_with_stop_gradient(&mut self.graph, &local, agg)?,
            None => local,
        };
        let c = correlation_matrix(&mut self.graph, &combined, eps)?;
        let loss = cco_loss(&mut self.graph, c, lambda)?;
        self.finish(loss)
    }

    fn ntxent_gradient(mut self, temperature: f64) -> Result<(ModelParams, f64)> {
        let loss = ntxent_loss(&mut self.graph, self.f, self.g, temperature)?;
        self.finish(loss)
    }

    fn finish(self, loss: crate::autodiff::NodeId) -> Result<(ModelParams, f64)> {
        let value = self.graph.value(loss).item();
        let mut grads = self.graph.backward(loss)?;
        Ok((self.nodes.gradients(&mut grads), value))
    }
}

#[derive(Clone, Copy, Debug)]
enum LocalLoss<'a> {
    /// CCO at the aggregate (DCCO) or at local statistics (FedAvg).
    Cco(Option<&'a EncodingStats>),
    NtXent,
}

fn local_training(
    model: &ModelParams,
    encoder: &EncoderConfig,
    views: &Views,
    loss: LocalLoss,
    config: &RoundConfig,
    first: Option<Session>,
) -> Result<(ModelDelta, f64)> {
    let mut current = Cow::Borrowed(model);
    let mut delta = model.zeros_like();
    let mut first_loss = f64::NAN;
    let mut first = first;
    for step in 0..config.local_steps {
        let session = match first.take() {
            Some(s) => s,
            None => Session::open(&current, encoder, views, matches!(loss, LocalLoss::Cco(_)))?,
        };
        let (grads, value) = match loss {
            LocalLoss::Cco(agg) => session.cco_gradient(agg, config.lambda, config.variance_eps)?,
            LocalLoss::NtXent => session.ntxent_gradient(config.temperature)?,
        };
        if step == 0 {
            first_loss = value;
        }
        delta.axpy(-config.local_lr, &grads)?;
        if step + 1 < config.local_steps {
            current.to_mut().axpy(-config.local_lr, &grads)?;
        }
    }
    Ok((
        ModelDelta {
            params: delta,
            weight: views.len() as u64,
        },
        first_loss,
    ))
}

/// One client's DCCO update given the aggregated statistics.
pub fn local_dcco_step(
    model: &ModelParams,
    encoder: &EncoderConfig,
    views: &Views,
    aggregated: &EncodingStats,
    config: &RoundConfig,
) -> Result<(ModelDelta, f64)> {
    local_training(model, encoder, views, LocalLoss::Cco(Some(aggregated)), config, None)
}

/// Statistics a client would upload for `views` under `model`.
pub fn client_stats(model: &ModelParams, encoder: &EncoderConfig, views: &Views) -> Result<EncodingStats> {
    Ok(Session::open(model, encoder, views, true)?.local_stats())
}

/// Plain gradient descent on the CCO loss of a pooled batch.
pub fn centralized_cco_step(model: &ModelParams, encoder: &EncoderConfig, views: &Views, lr: f64, lambda: f64, eps: f64) -> Result<(ModelParams, f64)> {
    let session = Session::open(model, encoder, views, true)?;
    let (grads, loss) = session.cco_gradient(None, lambda, eps)?;
    let mut out = model.clone();
    out.axpy(-lr, &grads)?;
    Ok((out, loss))
}

/// Everything a round needs besides the server state.
pub struct Federation<'a> {
    pub encoder: &'a EncoderConfig,
    pub config: &'a RoundConfig,
    pub clients: &'a [ClientDataset],
    pub exec: &'a Exec,
}

impl<'a> Federation<'a> {
    pub fn run_round(&self, method: Method, server: &mut ServerState, server_lr: f64) -> Result<RoundOutput> {
        let start = Instant::now();
        let mut out = match method {
            Method::Dcco => self.run_dcco_round(server, server_lr)?,
            Method::FedavgCco => self.run_fedavg_round(server, server_lr, false)?,
            Method::FedavgContrastive => self.run_fedavg_round(server, server_lr, true)?,
            Method::CentralizedCco => self.run_centralized_round(server, server_lr)?,
        };
        out.trace.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(out)
    }

    fn views(&self, ids: &[usize], round: u64) -> Result<Vec<Views>> {
        let cfg = self.config;
        self.exec
            .try_map(ids.to_vec(), |id| client_views(&self.clients[id], &cfg.augment, cfg.seed, round))
    }

    fn check_sample(&self, ids: &[usize], min: usize) -> Result<Vec<u64>> {
        let counts: Vec<u64> = ids.iter().map(|&i| self.clients[i].len() as u64).collect();
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::EmptyRound);
        }
        if let Some(&c) = counts.iter().find(|&&c| (c as usize) < min) {
            return Err(Error::BatchTooSmall(c as usize));
        }
        Ok(counts)
    }

    fn dropped(&self, round: u64, attempt: u32, id: usize) -> bool {
        let p = self.config.dropout_prob;
        p > 0.0 && seed::stream(&[self.config.seed, round, attempt as u64, id as u64, 0xd409]).gen::<f64>() < p
    }

    pub fn run_dcco_round(&self, server: &mut ServerState, server_lr: f64) -> Result<RoundOutput> {
        self.config.validate()?;
        let round = server.round;
        let k = self.config.clients_per_round;
        let mut wire = Wire::new(self.config.record_transcript);
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            if attempt > MAX_ATTEMPTS {
                return Err(Error::InvalidConfig(format!(
                    "round {round} aborted {MAX_ATTEMPTS} times by client dropout"
                )));
            }
            let ids = sample_clients(self.clients.len(), k, self.config.seed, round, attempt - 1)?;
            let counts = self.check_sample(&ids, 1)?;
            let views = self.views(&ids, round)?;

            let mut received = Vec::with_capacity(ids.len());
            for &id in &ids {
                received.push(wire.send_model(round, id, &server.model)?);
            }
            let jobs: Vec<_> = received.iter().zip(&views).collect();
            let sessions = self
                .exec
                .try_map(jobs, |(model, v)| Session::open(model, self.encoder, v, true))?;

            let mut uploads = Vec::with_capacity(ids.len());
            for (&id, s) in ids.iter().zip(&sessions) {
                uploads.push(wire.send_stats(FrameKind::StatsUpload, round, id, s.local_stats())?);
            }
            if ids.iter().any(|&id| self.dropped(round, attempt - 1, id)) {
                log::debug!("round {round}: client dropped after statistics upload; resampling");
                continue;
            }
            let aggregated = aggregate_stats(&uploads)?;
            let digest = aggregated.digest();
            let mut broadcasts = Vec::with_capacity(ids.len());
            for &id in &ids {
                broadcasts.push(wire.send_stats(FrameKind::AggStatsBroadcast, round, id, aggregated.clone())?);
            }

            let jobs: Vec<_> = sessions.into_iter().zip(received.iter()).zip(&views).zip(&broadcasts).collect();
            let results = self.exec.try_map(jobs, |(((s, model), v), agg)| {
                local_training(model, self.encoder, v, LocalLoss::Cco(Some(agg)), self.config, Some(s))
            })?;
            return self.finish_round(server, server_lr, Method::Dcco, wire, ids, counts, results, attempt, Some(digest));
        }
    }

    pub fn run_fedavg_round(&self, server: &mut ServerState, server_lr: f64, contrastive: bool) -> Result<RoundOutput> {
        self.config.validate()?;
        let round = server.round;
        let method = if contrastive { Method::FedavgContrastive } else { Method::FedavgCco };
        let mut wire = Wire::new(self.config.record_transcript);
        let ids = sample_clients(self.clients.len(), self.config.clients_per_round, self.config.seed, round, 0)?;
        let counts = self.check_sample(&ids, 2)?;
        let views = self.views(&ids, round)?;
        let mut received = Vec::with_capacity(ids.len());
        for &id in &ids {
            received.push(wire.send_model(round, id, &server.model)?);
        }
        let loss = if contrastive { LocalLoss::NtXent } else { LocalLoss::Cco(None) };
        let jobs: Vec<_> = received.iter().zip(&views).collect();
        let results = self
            .exec
            .try_map(jobs, |(model, v)| local_training(model, self.encoder, v, loss, self.config, None))?;
        self.finish_round(server, server_lr, method, wire, ids, counts, results, 1, None)
    }

    pub fn run_centralized_round(&self, server: &mut ServerState, server_lr: f64) -> Result<RoundOutput> {
        self.config.validate()?;
        let round = server.round;
        let ids = sample_clients(self.clients.len(), self.config.clients_per_round, self.config.seed, round, 0)?;
        let counts = self.check_sample(&ids, 1)?;
        let views = self.views(&ids, round)?;
        let pooled = Views::concat(&views.iter().collect::<Vec<_>>())?;
        if pooled.len() < 2 {
            return Err(Error::BatchTooSmall(pooled.len()));
        }
        let result = local_training(&server.model, self.encoder, &pooled, LocalLoss::Cco(None), self.config, None)?;
        let wire = Wire::new(false);
        let mut out = self.finish_round(server, server_lr, Method::CentralizedCco, wire, ids, counts, vec![result], 1, None)?;
        out.trace.counts = vec![pooled.len() as u64];
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_round(
        &self,
        server: &mut ServerState,
        server_lr: f64,
        method: Method,
        mut wire: Wire,
        ids: Vec<usize>,
        counts: Vec<u64>,
        results: Vec<(ModelDelta, f64)>,
        attempts: u32,
        stats_digest: Option<String>,
    ) -> Result<RoundOutput> {
        let round = server.round;
        let total: u64 = results.iter().map(|(d, _)| d.weight).sum();
        let loss = results.iter().map(|(d, l)| d.weight as f64 / total as f64 * l).sum::<f64>();
        if !loss.is_finite() {
            return Err(Error::NonFinite("round loss"));
        }
        let mut deltas = Vec::with_capacity(results.len());
        if method == Method::CentralizedCco {
            deltas.extend(results.into_iter().map(|(d, _)| d));
        } else {
            for (&id, (d, _)) in ids.iter().zip(results) {
                deltas.push(wire.send_delta(round, id, d)?);
            }
        }
        let delta = aggregate_deltas(&deltas)?;
        server.apply_delta(&delta, server_lr)?;
        server.round += 1;
        Ok(RoundOutput {
            trace: RoundTrace {
                round,
                method,
                attempts,
                sampled: ids,
                counts,
                stats_digest,
                loss,
                server_lr,
                messages: wire.counts,
                wall_ms: 0.0,
            },
            transcript: wire.transcript,
        })
    }
}
