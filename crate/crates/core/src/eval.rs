//! Retrieval evaluation: identity splits, single-shot trials, cosine
//! ranking, Recall@K and mean average precision.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, SplitTag};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::net::Embedding;
use crate::rng::RngStream;
use crate::tensor::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "cuhk03-single-shot")]
    Cuhk03SingleShot,
    #[serde(rename = "market-single-query")]
    MarketSingleQuery,
    #[serde(rename = "generic")]
    Generic,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Cuhk03SingleShot => "cuhk03-single-shot",
            Protocol::MarketSingleQuery => "market-single-query",
            Protocol::Generic => "generic",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cuhk03" | "cuhk03-single-shot" | "cuhk01" => Ok(Protocol::Cuhk03SingleShot),
            "market" | "market-single-query" => Ok(Protocol::MarketSingleQuery),
            "generic" => Ok(Protocol::Generic),
            other => Err(contract_err!("unknown protocol {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub protocol: Protocol,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_trials: usize,
}

impl SplitSpec {
    /// 1160 training, 100 validation and 100 test identities, 5 trials.
    pub fn cuhk03() -> Self {
        SplitSpec {
            protocol: Protocol::Cuhk03SingleShot,
            n_train: 1160,
            n_val: 100,
            n_test: 100,
            n_trials: 5,
        }
    }

    pub fn generic(n_train: usize, n_val: usize, n_test: usize) -> Self {
        SplitSpec {
            protocol: Protocol::Generic,
            n_train,
            n_val,
            n_test,
            n_trials: 5,
        }
    }

    /// Train/query/gallery come from split tags; `n_val` training identities
    /// are held out for validation.
    pub fn market(n_val: usize) -> Self {
        SplitSpec {
            protocol: Protocol::MarketSingleQuery,
            n_train: 0,
            n_val,
            n_test: 0,
            n_trials: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdSplit {
    pub train: Vec<i64>,
    pub val: Vec<i64>,
    pub test: Vec<i64>,
}

impl IdSplit {
    pub fn is_disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .all(|id| seen.insert(*id))
    }
}

/// Query and gallery record indices into a test manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub queries: Vec<usize>,
    pub gallery: Vec<usize>,
    /// Drop gallery entries sharing both identity and camera with the query.
    pub exclude_same_camera: bool,
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub ids: IdSplit,
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
    /// Indices refer to `test`.
    pub trials: Vec<Trial>,
}

/// Identity-level partition plus query/gallery trials over the test part.
pub fn make_splits(manifest: &DatasetManifest, spec: &SplitSpec, stream: RngStream) -> Result<Splits> {
    let ids = match spec.protocol {
        Protocol::Cuhk03SingleShot | Protocol::Generic => partition_ids(manifest, spec, stream)?,
        Protocol::MarketSingleQuery => market_ids(manifest, spec, stream)?,
    };
    debug_assert!(ids.is_disjoint());
    let pick = |list: &[i64]| manifest.subset_by_ids(&list.iter().copied().collect());
    let (train, val) = (pick(&ids.train), pick(&ids.val));
    let test = match spec.protocol {
        Protocol::MarketSingleQuery => {
            manifest.select(|r| matches!(r.split, Some(SplitTag::Query) | Some(SplitTag::Gallery)))
        }
        _ => pick(&ids.test),
    };
    let trials = match spec.protocol {
        Protocol::MarketSingleQuery => vec![market_trial(&test)?],
        _ => single_shot_trials(&test, spec.n_trials, stream)?,
    };
    Ok(Splits {
        ids,
        train,
        val,
        test,
        trials,
    })
}

fn partition_ids(manifest: &DatasetManifest, spec: &SplitSpec, stream: RngStream) -> Result<IdSplit> {
    let mut all: Vec<i64> = manifest.identities().into_keys().collect();
    let need = spec.n_train + spec.n_val + spec.n_test;
    if all.len() < need {
        return Err(contract_err!(
            "{} protocol needs {} identities, manifest has {}",
            spec.protocol,
            need,
            all.len()
        ));
    }
    all.shuffle(&mut stream.named("split-ids").rng());
    let mut take = |n: usize| {
        let mut v: Vec<i64> = all.drain(..n).collect();
        v.sort_unstable();
        v
    };
    Ok(IdSplit {
        train: take(spec.n_train),
        val: take(spec.n_val),
        test: take(spec.n_test),
    })
}

fn market_ids(manifest: &DatasetManifest, spec: &SplitSpec, stream: RngStream) -> Result<IdSplit> {
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    for r in &manifest.records {
        match r.split {
            Some(SplitTag::Train) => {
                train.insert(r.person_id);
            }
            Some(SplitTag::Query) | Some(SplitTag::Gallery) => {
                test.insert(r.person_id);
            }
            Some(SplitTag::Val) | Some(SplitTag::Test) => {}
            None => {
                return Err(Error::Protocol(format!(
                    "market protocol needs split tags; {} has none",
                    r.path
                )))
            }
        }
    }
    if let Some(id) = train.intersection(&test).next() {
        return Err(Error::Protocol(format!("identity {id} is tagged both train and test")));
    }
    let mut train: Vec<i64> = train.into_iter().collect();
    if train.len() < spec.n_val {
        return Err(contract_err!(
            "{} validation identities requested from {} training identities",
            spec.n_val,
            train.len()
        ));
    }
    train.shuffle(&mut stream.named("split-ids").rng());
    let mut val: Vec<i64> = train.drain(..spec.n_val).collect();
    train.sort_unstable();
    val.sort_unstable();
    Ok(IdSplit {
        train,
        val,
        test: test.into_iter().collect(),
    })
}

fn market_trial(test: &DatasetManifest) -> Result<Trial> {
    let queries: Vec<usize> = (0..test.len())
        .filter(|&i| test.records[i].split == Some(SplitTag::Query))
        .collect();
    let gallery: Vec<usize> = (0..test.len())
        .filter(|&i| test.records[i].split == Some(SplitTag::Gallery))
        .collect();
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Protocol(
            "market protocol needs query and gallery records".into(),
        ));
    }
    Ok(Trial {
        queries,
        gallery,
        exclude_same_camera: true,
    })
}

/// Single-shot trials over every identity of `manifest`. Per trial and
/// identity, a camera is drawn uniformly among the identity's cameras and one
/// gallery image uniformly among that camera's images; the identity's images
/// from the other cameras are the queries. Identities seen by a single camera
/// contribute one random gallery image and use the rest as queries.
pub fn single_shot_trials(manifest: &DatasetManifest, n_trials: usize, stream: RngStream) -> Result<Vec<Trial>> {
    if n_trials == 0 {
        return Err(contract_err!("at least one trial is required"));
    }
    let ids = manifest.identities();
    if ids.len() < 2 {
        return Err(contract_err!(
            "single-shot evaluation needs ≥2 identities, got {}",
            ids.len()
        ));
    }
    (0..n_trials)
        .map(|t| {
            let mut rng = stream.named("trial").split(t as u64).rng();
            let mut trial = Trial {
                queries: Vec::new(),
                gallery: Vec::new(),
                exclude_same_camera: false,
            };
            for members in ids.values() {
                let mut by_cam: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
                for &i in members {
                    by_cam.entry(manifest.records[i].camera_id).or_default().push(i);
                }
                let cams: Vec<u32> = by_cam.keys().copied().collect();
                let cam = *cams.choose(&mut rng).unwrap();
                let g = *by_cam[&cam].choose(&mut rng).unwrap();
                trial.gallery.push(g);
                if cams.len() > 1 {
                    trial
                        .queries
                        .extend(members.iter().filter(|&&i| manifest.records[i].camera_id != cam));
                } else {
                    trial.queries.extend(members.iter().filter(|&&i| i != g));
                }
            }
            if trial.queries.is_empty() {
                return Err(Error::Protocol("no identity has more than one image".into()));
            }
            Ok(trial)
        })
        .collect()
}

/// Per-query gallery order plus relevance flags in ranked order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingResult {
    pub rankings: Vec<Vec<usize>>,
    pub relevance: Vec<Vec<bool>>,
}

impl RankingResult {
    pub fn n_queries(&self) -> usize {
        self.rankings.len()
    }

    /// Zero-based rank of each query's first relevant item.
    pub fn first_hits(&self) -> Result<Vec<usize>> {
        self.relevance
            .iter()
            .enumerate()
            .map(|(q, rel)| {
                rel.iter()
                    .position(|&r| r)
                    .ok_or_else(|| Error::Protocol(format!("query {q} has no relevant gallery item")))
            })
            .collect()
    }
}

fn norms(embs: &[&[f64]]) -> Result<Vec<f64>> {
    embs.iter()
        .map(|e| {
            let n = dot(e, e).sqrt();
            if n == 0.0 {
                Err(Error::UndefinedSimilarity("zero-norm embedding".into()))
            } else {
                Ok(n)
            }
        })
        .collect()
}

fn rank_by_similarity(
    q: &[f64],
    qn: f64,
    gallery: &[&[f64]],
    gnorms: &[f64],
    candidates: &[usize],
) -> Result<Vec<usize>> {
    let mut scored = Vec::with_capacity(candidates.len());
    for &g in candidates {
        if gallery[g].len() != q.len() {
            return Err(dim_err!("query dim {} vs gallery dim {}", q.len(), gallery[g].len()));
        }
        scored.push((dot(q, gallery[g]) / (qn * gnorms[g]), g));
    }
    // Stable sort keeps ascending gallery index among equal similarities.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(scored.into_iter().map(|(_, g)| g).collect())
}

/// Gallery indices by descending cosine similarity to `query`, ties broken
/// by ascending index.
pub fn rank_gallery(query: &Embedding, gallery: &[Embedding]) -> Result<Vec<usize>> {
    let q = query.as_slice();
    let qn = norms(&[q])?[0];
    let g: Vec<&[f64]> = gallery.iter().map(Embedding::as_slice).collect();
    let gn = norms(&g)?;
    let all: Vec<usize> = (0..g.len()).collect();
    rank_by_similarity(q, qn, &g, &gn, &all)
}

/// Ranks every query against the gallery. Relevance is identity equality;
/// with `cameras` given, same-identity same-camera gallery items are removed
/// from that query's ranking.
pub fn rank_queries(
    queries: &[Embedding],
    gallery: &[Embedding],
    query_ids: &[i64],
    gallery_ids: &[i64],
    cameras: Option<(&[u32], &[u32])>,
) -> Result<RankingResult> {
    if queries.len() != query_ids.len() || gallery.len() != gallery_ids.len() {
        return Err(contract_err!("embeddings and identity lists differ in length"));
    }
    if let Some((qc, gc)) = cameras {
        if qc.len() != queries.len() || gc.len() != gallery.len() {
            return Err(contract_err!("camera lists differ in length from embeddings"));
        }
    }
    let q: Vec<&[f64]> = queries.iter().map(Embedding::as_slice).collect();
    let g: Vec<&[f64]> = gallery.iter().map(Embedding::as_slice).collect();
    let qn = norms(&q)?;
    let gn = norms(&g)?;
    let rows: Vec<(Vec<usize>, Vec<bool>)> = (0..q.len())
        .into_par_iter()
        .map(|i| {
            let candidates: Vec<usize> = (0..g.len())
                .filter(|&j| match cameras {
                    Some((qc, gc)) => !(gallery_ids[j] == query_ids[i] && gc[j] == qc[i]),
                    None => true,
                })
                .collect();
            let order = rank_by_similarity(q[i], qn[i], &g, &gn, &candidates)?;
            let rel = order.iter().map(|&j| gallery_ids[j] == query_ids[i]).collect();
            Ok((order, rel))
        })
        .collect::<Result<_>>()?;
    let (rankings, relevance) = rows.into_iter().unzip();
    Ok(RankingResult { rankings, relevance })
}

/// Fraction of queries with a relevant item among the top k, for each k.
pub fn recall_at_k(results: &RankingResult, ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    if results.n_queries() == 0 {
        return Err(Error::Protocol("no queries".into()));
    }
    if ks.contains(&0) {
        return Err(contract_err!("recall@0 is undefined"));
    }
    let hits = results.first_hits()?;
    let n = hits.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| (k, hits.iter().filter(|&&h| h < k).count() as f64 / n))
        .collect())
}

/// Mean over queries of the average of precision@rank at relevant ranks.
pub fn mean_average_precision(results: &RankingResult) -> Result<f64> {
    if results.n_queries() == 0 {
        return Err(Error::Protocol("no queries".into()));
    }
    results.first_hits()?;
    let total: f64 = results
        .relevance
        .iter()
        .map(|rel| {
            let mut found = 0usize;
            let mut acc = 0.0;
            for (pos, &r) in rel.iter().enumerate() {
                if r {
                    found += 1;
                    acc += found as f64 / (pos + 1) as f64;
                }
            }
            acc / found as f64
        })
        .sum();
    Ok(total / results.n_queries() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    /// recall[k−1] = Recall@k for k = 1..=gallery size.
    pub recall: Vec<f64>,
    pub map: f64,
    pub n_queries: usize,
    pub gallery_size: usize,
}

impl TrialMetrics {
    pub fn recall_at(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        self.recall[(k - 1).min(self.recall.len() - 1)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub protocol: Protocol,
    pub seed: u64,
    pub trials: Vec<TrialMetrics>,
}

impl EvalSummary {
    pub fn mean_recall_at(&self, k: usize) -> f64 {
        self.trials.iter().map(|t| t.recall_at(k)).sum::<f64>() / self.trials.len() as f64
    }

    pub fn mean_map(&self) -> f64 {
        self.trials.iter().map(|t| t.map).sum::<f64>() / self.trials.len() as f64
    }

    /// Population standard deviation of Recall@1 across trials.
    pub fn recall1_std(&self) -> f64 {
        let m = self.mean_recall_at(1);
        let var = self.trials.iter().map(|t| (t.recall_at(1) - m).powi(2)).sum::<f64>() / self.trials.len() as f64;
        var.sqrt()
    }

    pub fn max_gallery(&self) -> usize {
        self.trials.iter().map(|t| t.gallery_size).max().unwrap_or(0)
    }

    pub fn mean_curve(&self) -> Vec<f64> {
        (1..=self.max_gallery()).map(|k| self.mean_recall_at(k)).collect()
    }
}

/// Metrics of one trial, given eval-mode embeddings aligned with `manifest`.
pub fn evaluate_trial(manifest: &DatasetManifest, embeddings: &[Embedding], trial: &Trial) -> Result<TrialMetrics> {
    if embeddings.len() != manifest.len() {
        return Err(contract_err!(
            "{} embeddings for {} records",
            embeddings.len(),
            manifest.len()
        ));
    }
    let rec = |i: usize| &manifest.records[i];
    let mut queries: Vec<usize> = trial.queries.clone();
    if trial.exclude_same_camera {
        let before = queries.len();
        queries.retain(|&q| {
            trial
                .gallery
                .iter()
                .any(|&g| rec(g).person_id == rec(q).person_id && rec(g).camera_id != rec(q).camera_id)
        });
        if queries.len() < before {
            warn!(
                "{} queries have no cross-camera match and are skipped",
                before - queries.len()
            );
        }
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| embeddings[i].clone()).collect::<Vec<_>>();
    let qids: Vec<i64> = queries.iter().map(|&i| rec(i).person_id).collect();
    let gids: Vec<i64> = trial.gallery.iter().map(|&i| rec(i).person_id).collect();
    let qcam: Vec<u32> = queries.iter().map(|&i| rec(i).camera_id).collect();
    let gcam: Vec<u32> = trial.gallery.iter().map(|&i| rec(i).camera_id).collect();
    let cams = trial.exclude_same_camera.then_some((qcam.as_slice(), gcam.as_slice()));
    let ranking = rank_queries(&pick(&queries), &pick(&trial.gallery), &qids, &gids, cams)?;
    let ks: Vec<usize> = (1..=trial.gallery.len()).collect();
    let recall = recall_at_k(&ranking, &ks)?.into_iter().map(|(_, r)| r).collect();
    Ok(TrialMetrics {
        recall,
        map: mean_average_precision(&ranking)?,
        n_queries: queries.len(),
        gallery_size: trial.gallery.len(),
    })
}

pub fn evaluate_trials(
    manifest: &DatasetManifest,
    embeddings: &[Embedding],
    trials: &[Trial],
    protocol: Protocol,
    seed: u64,
) -> Result<EvalSummary> {
    let trials = trials
        .iter()
        .map(|t| evaluate_trial(manifest, embeddings, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary { protocol, seed, trials })
}

/// Trials for evaluating a whole manifest as the test set.
pub fn protocol_trials(
    manifest: &DatasetManifest,
    protocol: Protocol,
    n_trials: usize,
    seed: u64,
) -> Result<Vec<Trial>> {
    match protocol {
        Protocol::MarketSingleQuery => Ok(vec![market_trial(manifest)?]),
        _ => single_shot_trials(manifest, n_trials, RngStream::new(seed)),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricsJson {
    protocol: String,
    seed: u64,
    trials: usize,
    #[serde(rename = "recall@1")]
    recall1: f64,
    #[serde(rename = "recall@5")]
    recall5: f64,
    #[serde(rename = "recall@10")]
    recall10: f64,
    #[serde(rename = "recall@20")]
    recall20: f64,
    #[serde(rename = "recall@1_std")]
    recall1_std: f64,
    #[serde(rename = "mAP")]
    map: f64,
}

fn curve_csv(curve: &[f64]) -> String {
    let mut s = String::from("k,recall\n");
    for (i, r) in curve.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, r));
    }
    s
}

/// Writes `recall_trial{i}.csv`, `recall_mean.csv` and `metrics.json`.
pub fn write_metrics(dir: &Path, summary: &EvalSummary) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    for (i, t) in summary.trials.iter().enumerate() {
        write(&format!("recall_trial{i}.csv"), curve_csv(&t.recall))?;
    }
    write("recall_mean.csv", curve_csv(&summary.mean_curve()))?;
    let json = MetricsJson {
        protocol: summary.protocol.to_string(),
        seed: summary.seed,
        trials: summary.trials.len(),
        recall1: summary.mean_recall_at(1),
        recall5: summary.mean_recall_at(5),
        recall10: summary.mean_recall_at(10),
        recall20: summary.mean_recall_at(20),
        recall1_std: summary.recall1_std(),
        map: summary.mean_map(),
    };
    write("metrics.json", serde_json::to_string_pretty(&json)? + "\n")
}
