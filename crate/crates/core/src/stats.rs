//! Encoding statistics, their weighted aggregation, the stop-gradient
//! combination rule and the cross-correlation (CCO) loss.
//!
//! A batch of paired encodings `F, G: [N, d]` is summarized by five batch
//! means: `<F_i>`, `<F_i^2>`, `<G_j>`, `<G_j^2>` and `<F_i G_j>`. They are raw
//! moments, so statistics from disjoint batches combine by a count-weighted
//! mean, and the correlation matrix (hence the loss) is a function of them
//! alone.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::reduce::weighted_mean;
use crate::tensor::Tensor;

pub const DEFAULT_VARIANCE_EPS: f64 = 1e-8;

/// Plain-value statistics; the payload of the protocol's statistics messages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingStats {
    pub mean_f: Vec<f64>,
    pub mean_f2: Vec<f64>,
    pub mean_g: Vec<f64>,
    pub mean_g2: Vec<f64>,
    /// Row-major `d x d`: `cross[i * d + j] = <F_i G_j>`.
    pub cross: Vec<f64>,
    pub count: u64,
}

impl EncodingStats {
    pub fn dim(&self) -> usize {
        self.mean_f.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for len in [self.mean_f2.len(), self.mean_g.len(), self.mean_g2.len()] {
            if len != d {
                return Err(Error::DimensionMismatch { expected: d, got: len });
            }
        }
        if self.cross.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                got: self.cross.len(),
            });
        }
        if self.count == 0 {
            return Err(Error::InvalidConfig("statistics count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn cross_at(&self, i: usize, j: usize) -> f64 {
        self.cross[i * self.dim() + j]
    }

    /// Computes the statistics of a batch directly, without a graph.
    pub fn from_batch(f: &Tensor, g: &Tensor) -> Result<Self> {
        let mut graph = Graph::new();
        let fnode = graph.constant(f.clone())?;
        let gnode = graph.constant(g.clone())?;
        Ok(local_stats(&mut graph, fnode, gnode)?.values(&graph))
    }

    fn fields(&self) -> [&[f64]; 5] {
        [&self.mean_f, &self.mean_f2, &self.mean_g, &self.mean_g2, &self.cross]
    }

    /// Largest absolute difference over all five fields.
    pub fn max_abs_diff(&self, other: &EncodingStats) -> f64 {
        self.fields()
            .iter()
            .zip(other.fields())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// SHA-256 over the little-endian payload, for round traces.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.count.to_le_bytes());
        for field in self.fields() {
            for v in field {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Statistics held as graph nodes. Vectors are `[1, d]`, `cross` is `[d, d]`.
#[derive(Clone, Copy, Debug)]
pub struct StatsNodes {
    pub mean_f: NodeId,
    pub mean_f2: NodeId,
    pub mean_g: NodeId,
    pub mean_g2: NodeId,
    pub cross: NodeId,
    pub count: u64,
}

impl StatsNodes {
    pub fn dim(&self, graph: &Graph) -> usize {
        graph.shape(self.mean_f).last().copied().unwrap_or(0)
    }

    pub fn values(&self, graph: &Graph) -> EncodingStats {
        let data = |id: NodeId| graph.value(id).data().to_vec();
        EncodingStats {
            mean_f: data(self.mean_f),
            mean_f2: data(self.mean_f2),
            mean_g: data(self.mean_g),
            mean_g2: data(self.mean_g2),
            cross: data(self.cross),
            count: self.count,
        }
    }
}

/// Batch means of the encodings `f, g: [N, d]`, differentiable in both.
pub fn local_stats(graph: &mut Graph, f: NodeId, g: NodeId) -> Result<StatsNodes> {
    let (fs, gs) = (graph.shape(f).to_vec(), graph.shape(g).to_vec());
    if fs != gs || fs.len() != 2 || fs[0] == 0 {
        return Err(Error::shape("local_stats", &fs, &gs));
    }
    let n = fs[0];
    let mean_f = graph.mean_axis(f, 0)?;
    let f2 = graph.square(f)?;
    let mean_f2 = graph.mean_axis(f2, 0)?;
    let mean_g = graph.mean_axis(g, 0)?;
    let g2 = graph.square(g)?;
    let mean_g2 = graph.mean_axis(g2, 0)?;
    let ft = graph.transpose(f)?;
    let fg = graph.matmul(ft, g)?;
    let cross = graph.scale(fg, 1.0 / n as f64)?;
    Ok(StatsNodes {
        mean_f,
        mean_f2,
        mean_g,
        mean_g2,
        cross,
        count: n as u64,
    })
}

/// Count-weighted mean of client statistics, summed in slice order.
pub fn aggregate_stats(stats: &[EncodingStats]) -> Result<EncodingStats> {
    let first = stats.first().ok_or(Error::EmptyList("aggregate_stats"))?;
    let d = first.dim();
    for s in stats {
        s.validate()?;
        if s.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: s.dim() });
        }
    }
    let weights: Vec<u64> = stats.iter().map(|s| s.count).collect();
    let field = |pick: fn(&EncodingStats) -> &[f64]| -> Result<Vec<f64>> {
        let parts: Vec<&[f64]> = stats.iter().map(pick).collect();
        weighted_mean(&parts, &weights)
    };
    Ok(EncodingStats {
        mean_f: field(|s| &s.mean_f)?,
        mean_f2: field(|s| &s.mean_f2)?,
        mean_g: field(|s| &s.mean_g)?,
        mean_g2: field(|s| &s.mean_g2)?,
        cross: field(|s| &s.cross)?,
        count: weights.iter().sum(),
    })
}

/// Combined statistics `local + stop_gradient(aggregated - local)`.
///
/// Forward values are exactly the aggregated values; gradients flow only
/// into the local statistics. The count of the result is the aggregated
/// count.
pub fn combine_with_stop_gradient(graph: &mut Graph, local: &StatsNodes, aggregated: &EncodingStats) -> Result<StatsNodes> {
    let d = local.dim(graph);
    aggregated.validate()?;
    if aggregated.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: aggregated.dim(),
        });
    }
    let row = |v: &[f64]| Tensor::matrix(1, d, v.to_vec());
    Ok(StatsNodes {
        mean_f: graph.rebase(local.mean_f, row(&aggregated.mean_f)?)?,
        mean_f2: graph.rebase(local.mean_f2, row(&aggregated.mean_f2)?)?,
        mean_g: graph.rebase(local.mean_g, row(&aggregated.mean_g)?)?,
        mean_g2: graph.rebase(local.mean_g2, row(&aggregated.mean_g2)?)?,
        cross: graph.rebase(local.cross, Tensor::matrix(d, d, aggregated.cross.clone())?)?,
        count: aggregated.count,
    })
}

/// Pearson correlation matrix `C[i, j]` between `F_i` and `G_j`, with `eps`
/// added to each variance under the square root.
pub fn correlation_matrix(graph: &mut Graph, stats: &StatsNodes, eps: f64) -> Result<NodeId> {
    if eps < 0.0 {
        return Err(Error::InvalidConfig("variance eps must be non-negative".into()));
    }
    let d = stats.dim(graph);
    let std = |graph: &mut Graph, mean: NodeId, mean2: NodeId| -> Result<NodeId> {
        let m2 = graph.square(mean)?;
        let var = graph.sub(mean2, m2)?;
        if eps == 0.0 && graph.value(var).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::DegenerateVariance);
        }
        let var = graph.add_scalar(var, eps)?;
        graph.sqrt(var)
    };
    let sf = std(graph, stats.mean_f, stats.mean_f2)?;
    let sg = std(graph, stats.mean_g, stats.mean_g2)?;
    let sf_col = graph.transpose(sf)?;
    let denom = graph.matmul(sf_col, sg)?;
    let mf_col = graph.transpose(stats.mean_f)?;
    let outer = graph.matmul(mf_col, stats.mean_g)?;
    let cov = graph.sub(stats.cross, outer)?;
    debug_assert_eq!(graph.shape(cov), &[d, d]);
    graph.div(cov, denom)
}

/// `sum_i (1 - C_ii)^2 + lambda * sum_i 1/(d-1) * sum_{j != i} C_ij^2`.
pub fn cco_loss(graph: &mut Graph, c: NodeId, lambda: f64) -> Result<NodeId> {
    let shape = graph.shape(c).to_vec();
    let d = match shape.as_slice() {
        [r, c] if r == c => *r,
        _ => return Err(Error::shape("cco_loss", &shape, &[0, 0])),
    };
    if d < 2 {
        return Err(Error::DimensionTooSmall(d));
    }
    let eye = graph.constant(Tensor::eye(d))?;
    let mut off = Tensor::ones(&[d, d]);
    for i in 0..d {
        off.data_mut()[i * d + i] = 0.0;
    }
    let off = graph.constant(off)?;

    let gap = graph.sub(eye, c)?;
    let diag = graph.mul(gap, eye)?;
    let diag = graph.square(diag)?;
    let on_term = graph.sum(diag)?;

    let rest = graph.mul(c, off)?;
    let rest = graph.square(rest)?;
    let off_term = graph.sum(rest)?;
    let off_term = graph.scale(off_term, lambda / (d as f64 - 1.0))?;
    graph.add(on_term, off_term)
}

/// Loss of a given correlation matrix.
pub fn cco_loss_value(c: &Tensor, lambda: f64) -> Result<f64> {
    let mut g = Graph::new();
    let cn = g.constant(c.clone())?;
    let loss = cco_loss(&mut g, cn, lambda)?;
    Ok(g.value(loss).item())
}

/// Correlation matrix of plain statistics.
pub fn correlation_value(stats: &EncodingStats, eps: f64) -> Result<Tensor> {
    stats.validate()?;
    let d = stats.dim();
    let mut g = Graph::new();
    let row = |g: &mut Graph, v: &[f64]| g.constant(Tensor::matrix(1, d, v.to_vec())?);
    let nodes = StatsNodes {
        mean_f: row(&mut g, &stats.mean_f)?,
        mean_f2: row(&mut g, &stats.mean_f2)?,
        mean_g: row(&mut g, &stats.mean_g)?,
        mean_g2: row(&mut g, &stats.mean_g2)?,
        cross: g.constant(Tensor::matrix(d, d, stats.cross.clone())?)?,
        count: stats.count,
    };
    let c = correlation_matrix(&mut g, &nodes, eps)?;
    Ok(g.value(c).clone())
}

/// Per-sample gradients of the CCO loss on one client, in closed form.
///
/// The loss is evaluated at the aggregated statistics; the derivative of
/// each local statistic with respect to a client's own encoding is
/// `1/N_k`, `2 F_i^n / N_k` or `G_j^n / N_k`. Returns `(dL/dF, dL/dG)`,
/// both `[N_k, d]`.
pub fn analytic_client_gradient(
    f: &Tensor,
    g: &Tensor,
    local: &EncodingStats,
    aggregated: &EncodingStats,
    lambda: f64,
    eps: f64,
) -> Result<(Tensor, Tensor)> {
    if f.shape() != g.shape() || f.rank() != 2 {
        return Err(Error::shape("analytic_client_gradient", f.shape(), g.shape()));
    }
    let (n, d) = (f.shape()[0], f.shape()[1]);
    local.validate()?;
    aggregated.validate()?;
    if local.dim() != d || aggregated.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: aggregated.dim(),
        });
    }
    if local.count as usize != n {
        return Err(Error::shape("analytic_client_gradient", &[local.count as usize], &[n]));
    }
    if d < 2 {
        return Err(Error::DimensionTooSmall(d));
    }

    let a = aggregated;
    let sf: Vec<f64> = (0..d).map(|i| (a.mean_f2[i] - a.mean_f[i] * a.mean_f[i] + eps).sqrt()).collect();
    let sg: Vec<f64> = (0..d).map(|j| (a.mean_g2[j] - a.mean_g[j] * a.mean_g[j] + eps).sqrt()).collect();
    let off_scale = 2.0 * lambda / (d as f64 - 1.0);

    // dL/d(statistic), all evaluated at the aggregated values
    let mut d_cross = vec![0.0; d * d];
    let mut d_mf = vec![0.0; d];
    let mut d_mf2 = vec![0.0; d];
    let mut d_mg = vec![0.0; d];
    let mut d_mg2 = vec![0.0; d];
    for i in 0..d {
        for j in 0..d {
            let denom = sf[i] * sg[j];
            let c = (a.cross_at(i, j) - a.mean_f[i] * a.mean_g[j]) / denom;
            let dc = if i == j { -2.0 * (1.0 - c) } else { off_scale * c };
            d_cross[i * d + j] = dc / denom;
            d_mf[i] += dc * (-a.mean_g[j] / denom + c * a.mean_f[i] / (sf[i] * sf[i]));
            d_mf2[i] += dc * (-c / (2.0 * sf[i] * sf[i]));
            d_mg[j] += dc * (-a.mean_f[i] / denom + c * a.mean_g[j] / (sg[j] * sg[j]));
            d_mg2[j] += dc * (-c / (2.0 * sg[j] * sg[j]));
        }
    }

    let inv_n = 1.0 / n as f64;
    let mut df = vec![0.0; n * d];
    let mut dg = vec![0.0; n * d];
    for s in 0..n {
        let (fr, gr) = (f.row(s), g.row(s));
        for i in 0..d {
            let mut acc = d_mf[i] + 2.0 * d_mf2[i] * fr[i];
            for j in 0..d {
                acc += d_cross[i * d + j] * gr[j];
            }
            df[s * d + i] = acc * inv_n;
        }
        for j in 0..d {
            let mut acc = d_mg[j] + 2.0 * d_mg2[j] * gr[j];
            for i in 0..d {
                acc += d_cross[i * d + j] * fr[i];
            }
            dg[s * d + j] = acc * inv_n;
        }
    }
    Ok((Tensor::matrix(n, d, df)?, Tensor::matrix(n, d, dg)?))
}

/// NT-Xent (normalized temperature-scaled cross entropy) over the `2N`
/// L2-normalized embeddings: the positive of `F_n` is `G_n` and vice versa,
/// every other embedding in the batch is a negative.
pub fn ntxent_loss(graph: &mut Graph, f: NodeId, g: NodeId, temperature: f64) -> Result<NodeId> {
    let (fs, gs) = (graph.shape(f).to_vec(), graph.shape(g).to_vec());
    if fs != gs || fs.len() != 2 {
        return Err(Error::shape("ntxent_loss", &fs, &gs));
    }
    let (n, d) = (fs[0], fs[1]);
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let z = graph.concat(&[f, g], 0)?;
    let m = 2 * n;
    let sq = graph.square(z)?;
    let ms = graph.mean_axis(sq, 1)?;
    let ss = graph.scale(ms, d as f64)?;
    let norm = graph.sqrt(ss)?;
    let norm = graph.broadcast(norm, &[m, d])?;
    let zn = graph.div(z, norm)?;
    let znt = graph.transpose(zn)?;
    let sim = graph.matmul(zn, znt)?;
    let logits = graph.scale(sim, 1.0 / temperature)?;

    let mut not_self = Tensor::ones(&[m, m]);
    let mut positive = Tensor::zeros(&[m, m]);
    for i in 0..m {
        not_self.data_mut()[i * m + i] = 0.0;
        positive.data_mut()[i * m + (i + n) % m] = 1.0;
    }
    let not_self = graph.constant(not_self)?;
    let positive = graph.constant(positive)?;

    let e = graph.exp(logits)?;
    let e = graph.mul(e, not_self)?;
    let row = graph.mean_axis(e, 1)?;
    let row = graph.scale(row, m as f64)?;
    let log_norm = graph.ln(row)?;
    let pos = graph.mul(logits, positive)?;
    let pos = graph.mean_axis(pos, 1)?;
    let pos = graph.scale(pos, m as f64)?;
    let per_row = graph.sub(log_norm, pos)?;
    let total = graph.sum(per_row)?;
    graph.scale(total, 1.0 / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_of(f: &[Vec<f64>], g: &[Vec<f64>]) -> EncodingStats {
        EncodingStats::from_batch(&Tensor::from_rows(f).unwrap(), &Tensor::from_rows(g).unwrap()).unwrap()
    }

    #[test]
    fn single_sample_stats() {
        let s = stats_of(&[vec![2.0]], &[vec![3.0]]);
        assert_eq!(s.mean_f, vec![2.0]);
        assert_eq!(s.mean_f2, vec![4.0]);
        assert_eq!(s.mean_g, vec![3.0]);
        assert_eq!(s.mean_g2, vec![9.0]);
        assert_eq!(s.cross, vec![6.0]);
        assert_eq!(s.count, 1);
    }

    #[test]
    fn identity_batch_stats() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = stats_of(&rows, &rows);
        assert_eq!(s.mean_f, vec![0.5, 0.5]);
        assert_eq!(s.mean_f2, vec![0.5, 0.5]);
        assert_eq!(s.cross, vec![0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn local_stats_rejects_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(local_stats(&mut g, a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn aggregate_weighted_and_errors() {
        let mut a = stats_of(&[vec![1.0], vec![1.0]], &[vec![0.0], vec![0.0]]);
        let b = stats_of(&[vec![4.0]], &[vec![0.0]]);
        let agg = aggregate_stats(&[a.clone(), b]).unwrap();
        assert_eq!(agg.mean_f, vec![2.0]);
        assert_eq!(agg.count, 3);
        assert!(matches!(aggregate_stats(&[]), Err(Error::EmptyList(_))));
        let wide = stats_of(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]]);
        a.count = 2;
        assert!(matches!(aggregate_stats(&[a, wide]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn perfect_correlation_and_anticorrelation() {
        let s = stats_of(&[vec![1.0], vec![-1.0]], &[vec![1.0], vec![-1.0]]);
        // unit variance, so eps shifts the coefficient to exactly 1 / (1 + eps)
        let c = correlation_value(&s, 1e-8).unwrap();
        assert!((c.item() - 1.0 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((c.item() - 1.0).abs() <= 1e-8);
        let s = stats_of(&[vec![1.0], vec![-1.0]], &[vec![-1.0], vec![1.0]]);
        let c = correlation_value(&s, 1e-8).unwrap();
        assert!((c.item() + 1.0 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(correlation_value(&s, 0.0).unwrap().item(), -1.0);
    }

    #[test]
    fn zero_eps_with_zero_variance_is_degenerate() {
        let s = stats_of(&[vec![1.0], vec![1.0]], &[vec![1.0], vec![-1.0]]);
        assert!(matches!(correlation_value(&s, 0.0), Err(Error::DegenerateVariance)));
    }

    #[test]
    fn cco_loss_reference_values() {
        for d in 2..6 {
            for lambda in [0.0, 1.0, 20.0] {
                assert_eq!(cco_loss_value(&Tensor::eye(d), lambda).unwrap(), 0.0);
            }
        }
        assert_eq!(cco_loss_value(&Tensor::zeros(&[2, 2]), 20.0).unwrap(), 2.0);
        assert_eq!(cco_loss_value(&Tensor::ones(&[2, 2]), 20.0).unwrap(), 40.0);
        assert!(matches!(
            cco_loss_value(&Tensor::ones(&[1, 1]), 20.0),
            Err(Error::DimensionTooSmall(1))
        ));
    }

    #[test]
    fn ntxent_orthogonal_pair_matches_hand_value() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::eye(2)).unwrap();
        let gg = g.constant(Tensor::eye(2)).unwrap();
        let loss = ntxent_loss(&mut g, f, gg, 0.1).unwrap();
        // each row: -10 + ln(e^10 + 1 + 1)
        let expected = (1.0 + 2.0 * (-10.0f64).exp()).ln();
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn ntxent_needs_two_samples() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::ones(&[1, 3])).unwrap();
        assert!(matches!(ntxent_loss(&mut g, f, f, 0.1), Err(Error::BatchTooSmall(1))));
    }
}
