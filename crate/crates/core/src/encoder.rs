//! Shared-weight MLP dual encoder with group normalization and optional
//! weight standardization.
//!
//! Layout: a trunk of `hidden_dims` fully-connected layers whose output is the
//! representation (width `embed_dim`), followed by a projection head. Every
//! layer except the final projection is `linear -> group norm -> relu`; the
//! final projection is a plain affine map. Weights are stored `[in, out]` and
//! applied as `x · W + b`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamNodes};
use crate::tensor::Tensor;

pub const TRUNK_PREFIX: &str = "enc.";
pub const PROJECTION_PREFIX: &str = "proj.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Representation width: the last hidden width, or `input_dim` when the
    /// trunk is empty.
    pub embed_dim: usize,
    /// Projection head widths; the last one is the loss-space dimension `d`.
    pub projection_dims: Vec<usize>,
    pub groups: usize,
    pub weight_standardization: bool,
    pub group_norm_eps: f64,
    pub weight_std_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 64,
            hidden_dims: vec![128, 128],
            embed_dim: 128,
            projection_dims: vec![128, 128, 128],
            groups: 8,
            weight_standardization: true,
            group_norm_eps: 1e-5,
            weight_std_eps: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub normalized: bool,
}

impl EncoderConfig {
    pub fn output_dim(&self) -> usize {
        self.projection_dims.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.input_dim == 0 {
            return bad("encoder.input_dim must be positive".into());
        }
        if self.projection_dims.is_empty() {
            return bad("encoder.projection_dims must not be empty".into());
        }
        if self.hidden_dims.iter().chain(&self.projection_dims).any(|&w| w == 0) {
            return bad("encoder widths must be positive".into());
        }
        let trunk_out = self.hidden_dims.last().copied().unwrap_or(self.input_dim);
        if self.embed_dim != trunk_out {
            return bad(format!(
                "encoder.embed_dim {} must equal the trunk output width {}",
                self.embed_dim, trunk_out
            ));
        }
        if self.groups == 0 {
            return bad("encoder.groups must be positive".into());
        }
        if self.group_norm_eps < 0.0 || self.weight_std_eps < 0.0 {
            return bad("encoder eps values must be non-negative".into());
        }
        for layer in self.layers() {
            if layer.normalized && layer.fan_out % self.groups != 0 {
                return bad(format!(
                    "encoder width {} of layer {} is not divisible by groups {}",
                    layer.fan_out, layer.name, self.groups
                ));
            }
        }
        Ok(())
    }

    /// Layer list in forward order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut width = self.input_dim;
        for (i, &h) in self.hidden_dims.iter().enumerate() {
            layers.push(LayerSpec {
                name: format!("{TRUNK_PREFIX}{i:02}"),
                fan_in: width,
                fan_out: h,
                normalized: true,
            });
            width = h;
        }
        let last = self.projection_dims.len() - 1;
        for (i, &p) in self.projection_dims.iter().enumerate() {
            layers.push(LayerSpec {
                name: format!("{PROJECTION_PREFIX}{i:02}"),
                fan_in: width,
                fan_out: p,
                normalized: i != last,
            });
            width = p;
        }
        layers
    }

    pub fn trunk_layers(&self) -> Vec<LayerSpec> {
        self.layers()
            .into_iter()
            .filter(|l| l.name.starts_with(TRUNK_PREFIX))
            .collect()
    }

    pub fn projection_layers(&self) -> Vec<LayerSpec> {
        self.layers()
            .into_iter()
            .filter(|l| l.name.starts_with(PROJECTION_PREFIX))
            .collect()
    }
}

/// Uniform bound `sqrt(6 / fan_in)` used for weight initialization.
pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Fan-in scaled uniform weights, zero biases, unit norm scale, zero shift.
pub fn init_layers(layers: &[LayerSpec], rng: &mut impl Rng) -> ModelParams {
    let mut params = ModelParams::new();
    for layer in layers {
        let bound = init_bound(layer.fan_in);
        let w: Vec<f64> = (0..layer.fan_in * layer.fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        params.insert(
            format!("{}.weight", layer.name),
            Tensor::matrix(layer.fan_in, layer.fan_out, w).expect("weight shape"),
        );
        params.insert(format!("{}.bias", layer.name), Tensor::zeros(&[1, layer.fan_out]));
        if layer.normalized {
            params.insert(format!("{}.gn_scale", layer.name), Tensor::ones(&[1, layer.fan_out]));
            params.insert(format!("{}.gn_shift", layer.name), Tensor::zeros(&[1, layer.fan_out]));
        }
    }
    params
}

pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(init_layers(&config.layers(), &mut rng))
}

/// `[w, w]` matrix whose product with a row replaces every entry by the mean
/// of its group.
fn group_mean_matrix(width: usize, groups: usize) -> Tensor {
    let size = width / groups;
    let inv = 1.0 / size as f64;
    let mut m = Tensor::zeros(&[width, width]);
    for a in 0..width {
        let g = a / size;
        for b in g * size..(g + 1) * size {
            m.data_mut()[a * width + b] = inv;
        }
    }
    m
}

/// Per-sample group normalization of `x: [N, w]` followed by a per-channel
/// affine map. `scale` and `shift` are `[1, w]` nodes.
pub fn group_norm_node(
    graph: &mut Graph,
    x: NodeId,
    groups: usize,
    scale: NodeId,
    shift: NodeId,
    eps: f64,
) -> Result<NodeId> {
    let shape = graph.shape(x).to_vec();
    let width = *shape.last().ok_or_else(|| Error::shape("group_norm", &shape, &[0, 0]))?;
    if groups == 0 || width % groups != 0 {
        return Err(Error::IndivisibleWidth { width, groups });
    }
    let avg = graph.constant(group_mean_matrix(width, groups))?;
    let mean = graph.matmul(x, avg)?;
    let centered = graph.sub(x, mean)?;
    let sq = graph.square(centered)?;
    let var = graph.matmul(sq, avg)?;
    let var = graph.add_scalar(var, eps)?;
    let std = graph.sqrt(var)?;
    let normed = graph.div(centered, std)?;
    let scale = graph.broadcast(scale, &shape)?;
    let shift = graph.broadcast(shift, &shape)?;
    let scaled = graph.mul(normed, scale)?;
    graph.add(scaled, shift)
}

/// Value-level group normalization.
pub fn group_norm(x: &Tensor, groups: usize, scale: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone())?;
    let s = g.constant(scale.clone())?;
    let b = g.constant(shift.clone())?;
    let out = group_norm_node(&mut g, xn, groups, s, b, eps)?;
    Ok(g.value(out).clone())
}

/// Standardizes each output unit's incoming weights (each column of a
/// `[in, out]` matrix) to zero mean and unit variance.
pub fn standardize_weights_node(graph: &mut Graph, w: NodeId, eps: f64) -> Result<NodeId> {
    let shape = graph.shape(w).to_vec();
    let mean = graph.mean_axis(w, 0)?;
    let mean = graph.broadcast(mean, &shape)?;
    let centered = graph.sub(w, mean)?;
    let sq = graph.square(centered)?;
    let var = graph.mean_axis(sq, 0)?;
    let var = graph.add_scalar(var, eps)?;
    let std = graph.sqrt(var)?;
    let std = graph.broadcast(std, &shape)?;
    graph.div(centered, std)
}

pub fn standardize_weights(w: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let wn = g.constant(w.clone())?;
    let out = standardize_weights_node(&mut g, wn, eps)?;
    Ok(g.value(out).clone())
}

/// One `linear [-> group norm -> relu]` layer.
pub fn apply_layer(
    graph: &mut Graph,
    params: &ParamNodes,
    layer: &LayerSpec,
    config: &EncoderConfig,
    x: NodeId,
) -> Result<NodeId> {
    let rows = graph.shape(x).first().copied().unwrap_or(0);
    let cols = graph.shape(x).get(1).copied().unwrap_or(0);
    if graph.shape(x).len() != 2 || cols != layer.fan_in {
        return Err(Error::shape("encode", graph.shape(x), &[rows, layer.fan_in]));
    }
    let mut w = params.get(&format!("{}.weight", layer.name))?;
    if layer.normalized && config.weight_standardization {
        w = standardize_weights_node(graph, w, config.weight_std_eps)?;
    }
    let b = params.get(&format!("{}.bias", layer.name))?;
    let h = graph.matmul(x, w)?;
    let b = graph.broadcast(b, &[rows, layer.fan_out])?;
    let h = graph.add(h, b)?;
    if !layer.normalized {
        return Ok(h);
    }
    let scale = params.get(&format!("{}.gn_scale", layer.name))?;
    let shift = params.get(&format!("{}.gn_shift", layer.name))?;
    let h = group_norm_node(graph, h, config.groups, scale, shift, config.group_norm_eps)?;
    graph.relu(h)
}

fn check_batch(graph: &Graph, x: NodeId, config: &EncoderConfig) -> Result<()> {
    match graph.shape(x) {
        [n, w] if *n >= 1 && *w == config.input_dim => Ok(()),
        other => Err(Error::shape("encode", other, &[1, config.input_dim])),
    }
}

/// Trunk output (the representation used by downstream probes).
pub fn represent(graph: &mut Graph, params: &ParamNodes, config: &EncoderConfig, batch: NodeId) -> Result<NodeId> {
    check_batch(graph, batch, config)?;
    let mut h = batch;
    for layer in config.trunk_layers() {
        h = apply_layer(graph, params, &layer, config, h)?;
    }
    Ok(h)
}

/// Projects a representation into the loss space.
pub fn project(graph: &mut Graph, params: &ParamNodes, config: &EncoderConfig, rep: NodeId) -> Result<NodeId> {
    let mut h = rep;
    for layer in config.projection_layers() {
        h = apply_layer(graph, params, &layer, config, h)?;
    }
    Ok(h)
}

/// Full encoder: `[N, input_dim] -> [N, d]`.
pub fn encode(graph: &mut Graph, params: &ParamNodes, config: &EncoderConfig, batch: NodeId) -> Result<NodeId> {
    let rep = represent(graph, params, config, batch)?;
    project(graph, params, config, rep)
}

/// Evaluates the encoder on a batch without keeping gradients.
pub fn encode_value(params: &ModelParams, config: &EncoderConfig, batch: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let nodes = params.bind_frozen(&mut g)?;
    let x = g.constant(batch.clone())?;
    let out = encode(&mut g, &nodes, config, x)?;
    Ok(g.value(out).clone())
}

/// Representation (trunk output) of a batch without keeping gradients.
pub fn represent_value(params: &ModelParams, config: &EncoderConfig, batch: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let nodes = params.bind_frozen(&mut g)?;
    let x = g.constant(batch.clone())?;
    let out = represent(&mut g, &nodes, config, x)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            input_dim: 6,
            hidden_dims: vec![8],
            embed_dim: 8,
            projection_dims: vec![4, 3],
            groups: 2,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        EncoderConfig::default().validate().unwrap();
        assert_eq!(EncoderConfig::default().output_dim(), 128);
    }

    #[test]
    fn rejects_indivisible_widths_and_bad_embed() {
        let mut c = small_config();
        c.groups = 3;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = small_config();
        c.embed_dim = 5;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.projection_dims.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let c = small_config();
        let a = init_params(&c, 7).unwrap();
        let b = init_params(&c, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&c, 8).unwrap());
        for (name, t) in a.iter() {
            if name.ends_with(".bias") || name.ends_with(".gn_shift") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
            if name.ends_with(".gn_scale") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
        }
        // last projection layer has no norm parameters
        assert!(a.get("proj.01.gn_scale").is_err());
        assert!(a.get("proj.00.gn_scale").is_ok());
    }

    #[test]
    fn init_bound_for_fan_in_100() {
        let c = EncoderConfig {
            input_dim: 100,
            hidden_dims: vec![16],
            embed_dim: 16,
            projection_dims: vec![4],
            groups: 4,
            ..EncoderConfig::default()
        };
        let p = init_params(&c, 0).unwrap();
        let bound = (6.0f64 / 100.0).sqrt();
        let w = p.get("enc.00.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() < bound));
        // the draw actually spans most of the interval
        let max = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max > 0.9 * bound);
    }

    #[test]
    fn group_norm_constant_row_gives_shift() {
        let x = Tensor::matrix(1, 4, vec![3.0; 4]).unwrap();
        let scale = Tensor::matrix(1, 4, vec![2.0; 4]).unwrap();
        let shift = Tensor::matrix(1, 4, vec![0.5, -1.0, 0.25, 7.0]).unwrap();
        let y = group_norm(&x, 2, &scale, &shift, 1e-5).unwrap();
        assert_eq!(y.data(), shift.data());
    }

    #[test]
    fn group_norm_one_group_standardizes_rows() {
        let x = Tensor::matrix(2, 5, vec![10.0, 40.0, -20.0, 5.0, 30.0, 100.0, 110.0, 90.0, 80.0, 120.0]).unwrap();
        let y = group_norm(&x, 1, &Tensor::ones(&[1, 5]), &Tensor::zeros(&[1, 5]), 1e-5).unwrap();
        for r in 0..2 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn group_norm_rejects_indivisible() {
        let x = Tensor::zeros(&[1, 5]);
        let r = group_norm(&x, 2, &Tensor::ones(&[1, 5]), &Tensor::zeros(&[1, 5]), 1e-5);
        assert!(matches!(r, Err(Error::IndivisibleWidth { width: 5, groups: 2 })));
    }

    #[test]
    fn group_norm_rows_are_independent() {
        let a = Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 5.0, 9.0, -1.0, 0.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 5.0, -40.0, 3.0, 3.0, 8.0]).unwrap();
        let (s, t) = (Tensor::ones(&[1, 4]), Tensor::zeros(&[1, 4]));
        let ya = group_norm(&a, 2, &s, &t, 1e-5).unwrap();
        let yb = group_norm(&b, 2, &s, &t, 1e-5).unwrap();
        assert_eq!(ya.row(0), yb.row(0));
    }

    #[test]
    fn standardize_weights_cases() {
        let constant = Tensor::matrix(3, 1, vec![2.0; 3]).unwrap();
        let z = standardize_weights(&constant, 1e-10).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let w = Tensor::matrix(8, 4, (0..32).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect()).unwrap();
        let s = standardize_weights(&w, 1e-10).unwrap();
        let again = standardize_weights(&s, 1e-10).unwrap();
        assert!(s.max_abs_diff(&again) < 1e-9);
    }

    #[test]
    fn zero_depth_identity_projection_returns_input_slice() {
        let c = EncoderConfig {
            input_dim: 4,
            hidden_dims: vec![],
            embed_dim: 4,
            projection_dims: vec![3],
            groups: 1,
            ..EncoderConfig::default()
        };
        let mut p = init_params(&c, 0).unwrap();
        let mut w = Tensor::zeros(&[4, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        *p.get_mut("proj.00.weight").unwrap() = w;
        let x = Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0]).unwrap();
        let y = encode_value(&p, &c, &x).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, -1.0, -2.0, -3.0]);
    }

    #[test]
    fn encode_single_sample_and_shape_errors() {
        let c = small_config();
        let p = init_params(&c, 1).unwrap();
        let x = Tensor::matrix(1, 6, vec![0.1, -0.2, 0.3, 0.0, 1.0, -1.0]).unwrap();
        let y = encode_value(&p, &c, &x).unwrap();
        assert_eq!(y.shape(), &[1, 3]);
        let bad = Tensor::zeros(&[2, 5]);
        assert!(matches!(encode_value(&p, &c, &bad), Err(Error::ShapeMismatch { .. })));
    }
}
