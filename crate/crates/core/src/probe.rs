//! Downstream evaluation: linear probe on a frozen trunk, full finetuning,
//! and the same architecture trained from scratch on the labeled subset.
//!
//! The projection head is never part of the classifier's feature path.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::Dataset;
use crate::encoder::{init_params, represent, represent_value, EncoderConfig, TRUNK_PREFIX};
use crate::error::{Error, Result};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::params::{ModelParams, ParamNodes};
use crate::tensor::Tensor;

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Linear,
    Finetune,
    Scratch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub protocol: Protocol,
    pub labeled_fraction: f64,
    pub steps: usize,
    /// Minibatch size; 0 trains on the full labeled set every step.
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Set by the experiment seed rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let mut optimizer = OptimizerConfig::adam(1e-2);
        optimizer.cosine = false;
        ProbeConfig {
            protocol: Protocol::Linear,
            labeled_fraction: 0.05,
            steps: 300,
            batch_size: 0,
            optimizer,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "probe.labeled_fraction {} must lie in (0, 1]",
                self.labeled_fraction
            )));
        }
        self.optimizer.validate("probe.optimizer")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub accuracy: f64,
    pub labeled_samples: usize,
    pub test_samples: usize,
    pub feature_dim: usize,
    /// Training loss before each step, plus the final loss.
    pub loss_curve: Vec<f64>,
    pub seed: u64,
    pub config: ProbeConfig,
}

/// Fails if the labeled and test index sets share a row of the same pool.
pub fn check_disjoint(labeled: &[usize], test: &[usize]) -> Result<()> {
    let set: std::collections::BTreeSet<_> = labeled.iter().collect();
    match test.iter().find(|i| set.contains(i)) {
        Some(i) => Err(Error::InvalidConfig(format!("row {i} is in both the labeled and test splits"))),
        None => Ok(()),
    }
}

/// Mean softmax cross-entropy of `logits: [N, C]` against `labels`.
pub fn cross_entropy(graph: &mut Graph, logits: NodeId, labels: &[u32]) -> Result<NodeId> {
    let (n, c) = match graph.shape(logits) {
        [n, c] => (*n, *c),
        other => return Err(Error::shape("cross_entropy", other, &[labels.len(), 0])),
    };
    if labels.len() != n {
        return Err(Error::shape("cross_entropy", &[n, c], &[labels.len(), c]));
    }
    // subtracting the (constant) row max keeps exp in range without
    // changing the loss or its gradient
    let v = graph.value(logits);
    let mut shift = Tensor::zeros(&[n, c]);
    let mut onehot = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let m = v.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        shift.data_mut()[i * c..(i + 1) * c].fill(m);
        onehot.data_mut()[i * c + labels[i] as usize] = 1.0;
    }
    let shift = graph.constant(shift)?;
    let onehot = graph.constant(onehot)?;
    let z = graph.sub(logits, shift)?;
    let e = graph.exp(z)?;
    let s = graph.mean_axis(e, 1)?;
    let s = graph.scale(s, c as f64)?;
    let lse = graph.ln(s)?;
    let picked = graph.mul(z, onehot)?;
    let picked = graph.mean_axis(picked, 1)?;
    let picked = graph.scale(picked, c as f64)?;
    let per_row = graph.sub(lse, picked)?;
    let total = graph.sum(per_row)?;
    graph.scale(total, 1.0 / n as f64)
}

fn logits(graph: &mut Graph, nodes: &ParamNodes, features: NodeId) -> Result<NodeId> {
    let n = graph.shape(features)[0];
    let w = nodes.get(HEAD_WEIGHT)?;
    let b = nodes.get(HEAD_BIAS)?;
    let c = graph.shape(w)[1];
    let h = graph.matmul(features, w)?;
    let b = graph.broadcast(b, &[n, c])?;
    graph.add(h, b)
}

fn zero_head(dim: usize, classes: usize) -> ModelParams {
    let mut p = ModelParams::new();
    p.insert(HEAD_WEIGHT, Tensor::zeros(&[dim, classes]));
    p.insert(HEAD_BIAS, Tensor::zeros(&[1, classes]));
    p
}

fn check_inputs(labeled: &Dataset, test: &Dataset, encoder: &EncoderConfig) -> Result<usize> {
    if labeled.num_classes != test.num_classes {
        return Err(Error::InvalidConfig(format!(
            "labeled set has {} classes but test set has {}",
            labeled.num_classes, test.num_classes
        )));
    }
    for ds in [labeled, test] {
        if ds.dim() != encoder.input_dim {
            return Err(Error::DimensionMismatch {
                expected: encoder.input_dim,
                got: ds.dim(),
            });
        }
    }
    Ok(labeled.num_classes)
}

fn accuracy(logits: &Tensor, labels: &[u32]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| {
            let row = logits.row(*i);
            // first maximal index, so ties resolve deterministically
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            best.0 == l as usize
        })
        .count();
    hits as f64 / labels.len() as f64
}

fn batches(n: usize, config: &ProbeConfig) -> impl FnMut() -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9b_0be5);
    let size = config.batch_size;
    move || {
        if size == 0 || size >= n {
            (0..n).collect()
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.truncate(size);
            idx.sort_unstable();
            idx
        }
    }
}

/// Softmax classifier on frozen trunk features.
pub fn linear_eval(model: &ModelParams, encoder: &EncoderConfig, labeled: &Dataset, test: &Dataset, config: &ProbeConfig) -> Result<EvalReport> {
    config.validate()?;
    let classes = check_inputs(labeled, test, encoder)?;
    let trunk = model.filter_prefix(TRUNK_PREFIX);
    let train_feats = represent_value(&trunk, encoder, &labeled.features)?;
    let test_feats = represent_value(&trunk, encoder, &test.features)?;
    let dim = train_feats.cols();
    if dim != encoder.embed_dim {
        return Err(Error::DimensionMismatch {
            expected: encoder.embed_dim,
            got: dim,
        });
    }
    let mut head = zero_head(dim, classes);
    let mut opt = OptimizerState::new(config.optimizer.clone());
    let mut next = batches(labeled.len(), config);
    let mut curve = Vec::with_capacity(config.steps + 1);
    for step in 0..=config.steps {
        let idx = next();
        let labels: Vec<u32> = idx.iter().map(|&i| labeled.labels[i]).collect();
        let mut g = Graph::new();
        let nodes = head.bind(&mut g)?;
        let x = g.constant(train_feats.select_rows(&idx)?)?;
        let z = logits(&mut g, &nodes, x)?;
        let loss = cross_entropy(&mut g, z, &labels)?;
        curve.push(g.value(loss).item());
        if step == config.steps {
            break;
        }
        let mut grads = g.backward(loss)?;
        let lr = config.optimizer.lr_at(step, config.steps)?;
        opt.apply(&mut head, &nodes.gradients(&mut grads), lr)?;
    }
    let test_logits = {
        let mut g = Graph::new();
        let nodes = head.bind_frozen(&mut g)?;
        let x = g.constant(test_feats)?;
        let z = logits(&mut g, &nodes, x)?;
        g.value(z).clone()
    };
    Ok(EvalReport {
        protocol: Protocol::Linear,
        accuracy: accuracy(&test_logits, &test.labels),
        labeled_samples: labeled.len(),
        test_samples: test.len(),
        feature_dim: dim,
        loss_curve: curve,
        seed: config.seed,
        config: config.clone(),
    })
}

fn train_end_to_end(
    trunk: ModelParams,
    encoder: &EncoderConfig,
    labeled: &Dataset,
    test: &Dataset,
    config: &ProbeConfig,
    protocol: Protocol,
) -> Result<EvalReport> {
    config.validate()?;
    let classes = check_inputs(labeled, test, encoder)?;
    let dim = encoder.embed_dim;
    let mut params = trunk;
    params.extend(zero_head(dim, classes));
    let mut opt = OptimizerState::new(config.optimizer.clone());
    let mut next = batches(labeled.len(), config);
    let mut curve = Vec::with_capacity(config.steps + 1);
    for step in 0..=config.steps {
        let idx = next();
        let labels: Vec<u32> = idx.iter().map(|&i| labeled.labels[i]).collect();
        let mut g = Graph::new();
        let nodes = params.bind(&mut g)?;
        let x = g.constant(labeled.features.select_rows(&idx)?)?;
        let h = represent(&mut g, &nodes, encoder, x)?;
        let z = logits(&mut g, &nodes, h)?;
        let loss = cross_entropy(&mut g, z, &labels)?;
        curve.push(g.value(loss).item());
        if step == config.steps {
            break;
        }
        let mut grads = g.backward(loss)?;
        let lr = config.optimizer.lr_at(step, config.steps)?;
        opt.apply(&mut params, &nodes.gradients(&mut grads), lr)?;
    }
    let test_logits = {
        let mut g = Graph::new();
        let nodes = params.bind_frozen(&mut g)?;
        let x = g.constant(test.features.clone())?;
        let h = represent(&mut g, &nodes, encoder, x)?;
        let z = logits(&mut g, &nodes, h)?;
        g.value(z).clone()
    };
    Ok(EvalReport {
        protocol,
        accuracy: accuracy(&test_logits, &test.labels),
        labeled_samples: labeled.len(),
        test_samples: test.len(),
        feature_dim: dim,
        loss_curve: curve,
        seed: config.seed,
        config: config.clone(),
    })
}

/// Trains the trunk and a new classifier jointly, starting from `model`.
pub fn finetune(model: &ModelParams, encoder: &EncoderConfig, labeled: &Dataset, test: &Dataset, config: &ProbeConfig) -> Result<EvalReport> {
    train_end_to_end(model.filter_prefix(TRUNK_PREFIX), encoder, labeled, test, config, Protocol::Finetune)
}

/// The finetuning architecture trained from a fresh initialization.
pub fn scratch_baseline(encoder: &EncoderConfig, labeled: &Dataset, test: &Dataset, config: &ProbeConfig) -> Result<EvalReport> {
    let trunk = init_params(encoder, config.seed)?.filter_prefix(TRUNK_PREFIX);
    train_end_to_end(trunk, encoder, labeled, test, config, Protocol::Scratch)
}

/// Dispatches on `config.protocol`.
pub fn evaluate(model: &ModelParams, encoder: &EncoderConfig, labeled: &Dataset, test: &Dataset, config: &ProbeConfig) -> Result<EvalReport> {
    match config.protocol {
        Protocol::Linear => linear_eval(model, encoder, labeled, test, config),
        Protocol::Finetune => finetune(model, encoder, labeled, test, config),
        Protocol::Scratch => scratch_baseline(encoder, labeled, test, config),
    }
}
