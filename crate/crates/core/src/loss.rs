//! Pairwise embedding losses over all distinct pairs in a batch: the
//! histogram loss and binomial deviance.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{dot, Graph, Tensor, Var};

/// Index pairs (i < j, lexicographic) of a batch and whether each pair shares
/// a person id.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLabels {
    pub pairs: Vec<(usize, usize)>,
    pub matching: Vec<bool>,
}

impl PairLabels {
    pub fn n_matching(&self) -> usize {
        self.matching.iter().filter(|&&m| m).count()
    }

    pub fn n_non_matching(&self) -> usize {
        self.matching.len() - self.n_matching()
    }

    /// A loss needs at least one pair of each class.
    pub fn is_degenerate(&self) -> bool {
        self.n_matching() == 0 || self.n_non_matching() == 0
    }
}

pub fn pair_labels<T: PartialEq>(ids: &[T]) -> Result<PairLabels> {
    if ids.len() < 2 {
        return Err(contract_err!("need at least 2 items to form pairs, got {}", ids.len()));
    }
    let n = ids.len();
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    let mut matching = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((i, j));
            matching.push(ids[i] == ids[j]);
        }
    }
    Ok(PairLabels { pairs, matching })
}

/// Similarities of labelled pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub sims: Vec<f64>,
    pub matching: Vec<bool>,
}

impl PairSet {
    pub fn new(sims: Vec<f64>, matching: Vec<bool>) -> Result<Self> {
        if sims.len() != matching.len() {
            return Err(dim_err!("{} similarities for {} labels", sims.len(), matching.len()));
        }
        Ok(PairSet { sims, matching })
    }

    fn class_sizes(&self) -> Result<(usize, usize)> {
        let pos = self.matching.iter().filter(|&&m| m).count();
        let neg = self.matching.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(contract_err!(
                "loss undefined: {} matching and {} non-matching pairs",
                pos,
                neg
            ));
        }
        Ok((pos, neg))
    }

    fn check_range(&self) -> Result<()> {
        if let Some(s) = self.sims.iter().find(|s| !(-1.0..=1.0).contains(*s)) {
            return Err(contract_err!("similarity {s} outside [-1, 1]"));
        }
        Ok(())
    }
}

/// Uniform histogram nodes on [−1, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub bins: usize,
}

impl HistogramSpec {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(contract_err!("histogram needs at least 2 nodes, got {bins}"));
        }
        Ok(HistogramSpec { bins })
    }

    pub fn step(&self) -> f64 {
        2.0 / (self.bins - 1) as f64
    }

    pub fn node(&self, r: usize) -> f64 {
        if r + 1 == self.bins {
            1.0
        } else {
            -1.0 + r as f64 * self.step()
        }
    }

    /// Lower node index and the weight on the upper node for a similarity.
    fn locate(&self, s: f64) -> (usize, f64) {
        let pos = (s + 1.0) / self.step();
        let r = (pos.floor().max(0.0) as usize).min(self.bins - 2);
        (r, pos - r as f64)
    }

    /// Triangular-kernel density estimate of one class.
    fn histogram(&self, pairs: &PairSet, class: bool, count: usize) -> Vec<f64> {
        let mut h = vec![0.0; self.bins];
        let w = 1.0 / count as f64;
        for (&s, _) in pairs.sims.iter().zip(&pairs.matching).filter(|(_, &m)| m == class) {
            let (r, frac) = self.locate(s);
            h[r] += (1.0 - frac) * w;
            h[r + 1] += frac * w;
        }
        h
    }
}

impl Default for HistogramSpec {
    fn default() -> Self {
        HistogramSpec { bins: 100 }
    }
}

/// Histogram loss and its gradient with respect to every similarity.
///
/// With `h⁺`, `h⁻` the soft histograms of matching and non-matching
/// similarities, the loss is `Σ_r h⁻_r · Σ_{q≤r} h⁺_q`: the estimated
/// probability that a random non-matching pair is at least as similar as a
/// random matching one.
pub fn histogram_loss_with_grad(pairs: &PairSet, spec: &HistogramSpec) -> Result<(f64, Vec<f64>)> {
    let (n_pos, n_neg) = pairs.class_sizes()?;
    pairs.check_range()?;
    let h_pos = spec.histogram(pairs, true, n_pos);
    let h_neg = spec.histogram(pairs, false, n_neg);
    let cdf_pos: Vec<f64> = h_pos
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect();
    let loss: f64 = h_neg.iter().zip(&cdf_pos).map(|(a, b)| a * b).sum();

    let delta = spec.step();
    let grads = pairs
        .sims
        .iter()
        .zip(&pairs.matching)
        .map(|(&s, &m)| {
            let (r, _) = spec.locate(s);
            if m {
                // ∂L/∂h⁺_q = Σ_{r'≥q} h⁻_{r'}; moving mass from node r to r+1 drops h⁻_r.
                -h_neg[r] / (delta * n_pos as f64)
            } else {
                // ∂L/∂h⁻_r = cdf⁺_r; moving mass up gains h⁺_{r+1}.
                h_pos[r + 1] / (delta * n_neg as f64)
            }
        })
        .collect();
    Ok((loss, grads))
}

pub fn histogram_loss(pairs: &PairSet, spec: &HistogramSpec) -> Result<f64> {
    histogram_loss_with_grad(pairs, spec).map(|(l, _)| l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinomialSpec {
    pub alpha: f64,
    pub beta: f64,
    pub neg_cost: f64,
}

impl Default for BinomialSpec {
    fn default() -> Self {
        BinomialSpec {
            alpha: 2.0,
            beta: 0.5,
            neg_cost: 10.0,
        }
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binomial deviance, averaged within each class and then across the two
/// classes; per pair `ln(1 + exp(−α·(s−β)·m·c))` with `m = ±1` for
/// matching / non-matching and `c` the non-matching cost.
pub fn binomial_deviance_with_grad(pairs: &PairSet, spec: &BinomialSpec) -> Result<(f64, Vec<f64>)> {
    let (n_pos, n_neg) = pairs.class_sizes()?;
    let mut sum_pos = 0.0;
    let mut sum_neg = 0.0;
    let mut grads = Vec::with_capacity(pairs.sims.len());
    for (&s, &m) in pairs.sims.iter().zip(&pairs.matching) {
        let (sign, cost, n) = if m {
            (1.0, 1.0, n_pos)
        } else {
            (-1.0, spec.neg_cost, n_neg)
        };
        let z = -spec.alpha * (s - spec.beta) * sign * cost;
        if m {
            sum_pos += softplus(z);
        } else {
            sum_neg += softplus(z);
        }
        grads.push(0.5 * sigmoid(z) * (-spec.alpha * sign * cost) / n as f64);
    }
    let loss = 0.5 * (sum_pos / n_pos as f64 + sum_neg / n_neg as f64);
    Ok((loss, grads))
}

pub fn binomial_deviance(pairs: &PairSet, spec: &BinomialSpec) -> Result<f64> {
    binomial_deviance_with_grad(pairs, spec).map(|(l, _)| l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossConfig {
    Histogram(HistogramSpec),
    Binomial(BinomialSpec),
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::Histogram(HistogramSpec::default())
    }
}

impl LossConfig {
    pub fn evaluate(&self, pairs: &PairSet) -> Result<(f64, Vec<f64>)> {
        match self {
            LossConfig::Histogram(h) => histogram_loss_with_grad(pairs, h),
            LossConfig::Binomial(b) => binomial_deviance_with_grad(pairs, b),
        }
    }
}

/// Cosine similarity of every row pair of an `[B×D]` matrix, clamped to
/// [−1, 1], in (i<j) lexicographic order, plus the row norms.
pub fn pairwise_cosine(e: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if e.rank() != 2 || e.shape()[0] < 2 {
        return Err(dim_err!("pairwise cosine needs [B×D] with B ≥ 2, got {:?}", e.shape()));
    }
    let (b, d) = (e.shape()[0], e.shape()[1]);
    let rows: Vec<&[f64]> = e.data().chunks(d).collect();
    let norms: Vec<f64> = rows.iter().map(|r| dot(r, r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(crate::Error::UndefinedSimilarity(format!("row {i} has zero norm")));
    }
    let mut sims = Vec::with_capacity(b * (b - 1) / 2);
    for i in 0..b {
        for j in i + 1..b {
            sims.push((dot(rows[i], rows[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0));
        }
    }
    Ok((sims, norms))
}

impl Graph {
    /// `[B×D]` embeddings → `[B(B−1)/2]` cosine similarities.
    pub fn pairwise_cosine(&mut self, e: Var) -> Result<Var> {
        let te = self.value(e).clone();
        let (sims, norms) = pairwise_cosine(&te)?;
        let (b, d) = (te.shape()[0], te.shape()[1]);
        let n = sims.len();
        let s2 = sims.clone();
        self.push(
            "pairwise_cosine",
            &[e],
            &[n],
            sims,
            Box::new(move |g, _| {
                let x = te.data();
                let mut out = vec![0.0; b * d];
                let mut k = 0;
                for i in 0..b {
                    for j in i + 1..b {
                        let (gk, c) = (g.data()[k], s2[k]);
                        k += 1;
                        if gk == 0.0 {
                            continue;
                        }
                        let inv = 1.0 / (norms[i] * norms[j]);
                        let (ci, cj) = (c / (norms[i] * norms[i]), c / (norms[j] * norms[j]));
                        for t in 0..d {
                            let (xi, xj) = (x[i * d + t], x[j * d + t]);
                            out[i * d + t] += gk * (xj * inv - ci * xi);
                            out[j * d + t] += gk * (xi * inv - cj * xj);
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(&[b, d], out)?)])
            }),
        )
    }

    /// Scalar loss node over a vector of pair similarities.
    pub fn pair_loss(&mut self, sims: Var, matching: &[bool], loss: &LossConfig) -> Result<Var> {
        let pairs = PairSet::new(self.value(sims).to_vec(), matching.to_vec())?;
        let (value, grads) = loss.evaluate(&pairs)?;
        let n = grads.len();
        let op = match loss {
            LossConfig::Histogram(_) => "histogram_loss",
            LossConfig::Binomial(_) => "binomial_deviance",
        };
        self.push(
            op,
            &[sims],
            &[],
            vec![value],
            Box::new(move |g, _| {
                let s = g.item()?;
                Ok(vec![Some(Tensor::new(&[n], grads.iter().map(|v| v * s).collect())?)])
            }),
        )
    }
}
