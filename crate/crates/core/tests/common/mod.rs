//! Brute-force reference implementations and shared fixtures for the
//! integration tests. Each oracle is written from the definition with plain
//! loops and shares no code with the library kernels.

#![allow(dead_code, clippy::needless_range_loop)]

use std::path::Path;
use std::time::{Duration, Instant};

use mrbcnn::checkpoint::{Checkpoint, TrainState};
use mrbcnn::config::{LrPolicy, TrainConfig};
use mrbcnn::data::{synth_dataset, DatasetManifest, ImageSet, ManifestRecord, PixelNorm, SynthConfig};
use mrbcnn::eval::{make_splits, single_shot_trials, SplitSpec};
use mrbcnn::net::{Model, NetworkConfig, RegionLayout, Variant};
use mrbcnn::nn::init_params;
use mrbcnn::train::{evaluate_model, init_stream, Trainer};
use mrbcnn::RngStream;
use rand::Rng;

/// out[m·N+n][y][x] = a[m][y][x] · b[n][y][x]; inputs are nested vectors.
pub fn outer_oracle(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for am in a {
        for bn in b {
            let mut plane = Vec::new();
            for y in 0..am.len() {
                let mut row = Vec::new();
                for x in 0..am[y].len() {
                    row.push(am[y][x] * bn[y][x]);
                }
                plane.push(row);
            }
            out.push(plane);
        }
    }
    out
}

/// Region boundaries by ceil partition: band i covers [i·cell, min((i+1)·cell, extent)).
pub fn bands_oracle(extent: usize, cell: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    let mut start = 0;
    while start < extent {
        v.push((start, (start + cell).min(extent)));
        start += cell;
    }
    v
}

/// pooled[r][k] = Σ over locations of region r (row-major region order).
pub fn region_pool_oracle(map: &[Vec<Vec<f64>>], cell_h: usize, cell_w: usize) -> Vec<Vec<f64>> {
    let (h, w) = (map[0].len(), map[0][0].len());
    let mut out = Vec::new();
    for (r0, r1) in bands_oracle(h, cell_h) {
        for (c0, c1) in bands_oracle(w, cell_w) {
            let mut row = vec![0.0; map.len()];
            for (k, plane) in map.iter().enumerate() {
                for y in r0..r1 {
                    for x in c0..c1 {
                        row[k] += plane[y][x];
                    }
                }
            }
            out.push(row);
        }
    }
    out
}

/// Valid, stride-1 cross-correlation with bias.
pub fn conv_oracle(x: &[Vec<Vec<f64>>], w: &[Vec<Vec<Vec<f64>>>], b: &[f64]) -> Vec<Vec<Vec<f64>>> {
    let (h, wd) = (x[0].len(), x[0][0].len());
    let (kh, kw) = (w[0][0].len(), w[0][0][0].len());
    let mut out = Vec::new();
    for (o, filt) in w.iter().enumerate() {
        let mut plane = vec![vec![b[o]; wd - kw + 1]; h - kh + 1];
        for (y, row) in plane.iter_mut().enumerate() {
            for (xx, v) in row.iter_mut().enumerate() {
                for (c, ker) in filt.iter().enumerate() {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            *v += ker[dy][dx] * x[c][y + dy][xx + dx];
                        }
                    }
                }
            }
        }
        out.push(plane);
    }
    out
}

/// Histogram loss from its definition: triangular soft counts at every node,
/// then Σ_r h⁻_r · Σ_{q≤r} h⁺_q.
pub fn histogram_loss_oracle(sims: &[f64], matching: &[bool], bins: usize) -> f64 {
    let delta = 2.0 / (bins - 1) as f64;
    let hist = |class: bool| {
        let members: Vec<f64> = sims
            .iter()
            .zip(matching)
            .filter(|(_, &m)| m == class)
            .map(|(&s, _)| s)
            .collect();
        (0..bins)
            .map(|r| {
                let t = -1.0 + r as f64 * delta;
                members
                    .iter()
                    .map(|s| (1.0 - (s - t).abs() / delta).max(0.0))
                    .sum::<f64>()
                    / members.len() as f64
            })
            .collect::<Vec<f64>>()
    };
    let (pos, neg) = (hist(true), hist(false));
    let mut loss = 0.0;
    for r in 0..bins {
        let mut cdf = 0.0;
        for q in 0..=r {
            cdf += pos[q];
        }
        loss += neg[r] * cdf;
    }
    loss
}

pub fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Zero-based rank of gallery item j: items strictly more similar, plus
/// equally similar items with a smaller index.
pub fn rank_of(sims: &[f64], j: usize) -> usize {
    (0..sims.len())
        .filter(|&i| sims[i] > sims[j] || (sims[i] == sims[j] && i < j))
        .count()
}

/// Recall@k by scanning each query's similarities.
pub fn recall_oracle(sims: &[Vec<f64>], relevant: &[Vec<bool>], k: usize) -> f64 {
    let mut hits = 0;
    for (q, row) in sims.iter().enumerate() {
        let mut found = false;
        for j in 0..row.len() {
            if relevant[q][j] && rank_of(row, j) < k {
                found = true;
            }
        }
        if found {
            hits += 1;
        }
    }
    hits as f64 / sims.len() as f64
}

/// Mean average precision by a double loop over relevant items.
pub fn map_oracle(sims: &[Vec<f64>], relevant: &[Vec<bool>]) -> f64 {
    let mut total = 0.0;
    for (q, row) in sims.iter().enumerate() {
        let rel: Vec<usize> = (0..row.len()).filter(|&j| relevant[q][j]).collect();
        let mut ap = 0.0;
        for &j in &rel {
            let rj = rank_of(row, j);
            let at_or_above = rel.iter().filter(|&&i| rank_of(row, i) <= rj).count();
            ap += at_or_above as f64 / (rj + 1) as f64;
        }
        total += ap / rel.len() as f64;
    }
    total / sims.len() as f64
}

/// In-memory manifest: `per_id` records per identity, cameras alternating.
pub fn toy_manifest(n_ids: usize, per_id: usize) -> DatasetManifest {
    let records = (0..n_ids * per_id)
        .map(|i| ManifestRecord {
            path: format!("img{i:06}.ppm"),
            person_id: (i / per_id) as i64 + 1000,
            camera_id: (i % 2) as u32,
            split: None,
        })
        .collect();
    DatasetManifest::new(records, ".").unwrap()
}

/// Network used for desk-scale training runs: the down-scaled geometry with
/// a 32-d embedding.
pub fn desk_net(variant: Variant) -> NetworkConfig {
    NetworkConfig {
        embedding_dim: 32,
        regions: RegionLayout::Cell { h: 1, w: 1 },
        ..NetworkConfig::down_scaled().with_variant(variant)
    }
}

pub fn desk_train_config(net: NetworkConfig, seed: u64, max_iters: u64) -> TrainConfig {
    TrainConfig {
        net,
        seed,
        batch: 48,
        lr: 0.01,
        lr_policy: LrPolicy::Plateau {
            patience: 4,
            factor: 0.1,
        },
        max_iters,
        eval_every: 25,
        val_trials: 5,
        ..TrainConfig::default()
    }
}

pub struct DeskSplits {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

/// 90 synthetic identities × 8 images split 60 / 10 / 20 by identity.
pub fn desk_dataset(dir: &Path) -> DeskSplits {
    let rep = synth_dataset(dir, &SynthConfig::new(90, 8, 0.05), RngStream::new(1)).unwrap();
    let s = make_splits(&rep.manifest, &SplitSpec::generic(60, 10, 20), RngStream::new(2)).unwrap();
    DeskSplits {
        train: s.train,
        val: s.val,
        test: s.test,
    }
}

pub struct DeskRun {
    pub untrained_recall1: f64,
    pub trained_recall1: f64,
    pub best: Option<mrbcnn::checkpoint::BestRecord>,
    pub elapsed: Duration,
}

/// Trains on the desk split, selects by validation Recall@1, and reports
/// test Recall@1 (mean of 5 single-shot trials) before and after training.
pub fn desk_run(splits: &DeskSplits, variant: Variant, out_dir: &Path, max_iters: u64) -> DeskRun {
    let start = Instant::now();
    let net = desk_net(variant);
    let config = desk_train_config(net.clone(), 3, max_iters);
    let (h, w) = (net.input_h, net.input_w);
    let set = |m: &DatasetManifest| ImageSet::new(m.clone(), h, w, PixelNorm::default());
    let test = set(&splits.test);
    let trials = single_shot_trials(test.manifest(), 5, RngStream::new(9)).unwrap();
    let params = init_params(&net, init_stream(config.seed)).unwrap();
    let untrained = Model::new(net.clone(), params.clone()).unwrap();
    let untrained_recall1 = evaluate_model(&untrained, &test, &trials, 9).unwrap().mean_recall_at(1);

    let state = TrainState::fresh(&config);
    let mut trainer = Trainer::with_sets(config, params, state, set(&splits.train), Some(set(&splits.val))).unwrap();
    trainer.run(out_dir).unwrap();
    let best = Checkpoint::load(&out_dir.join("best.ckpt")).unwrap();
    let model = Model::new(net, best.params).unwrap();
    let trained_recall1 = evaluate_model(&model, &test, &trials, 9).unwrap().mean_recall_at(1);
    DeskRun {
        untrained_recall1,
        trained_recall1,
        best: best.state.best,
        elapsed: start.elapsed(),
    }
}

fn nested(t: &mrbcnn::Tensor) -> Vec<Vec<Vec<f64>>> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..c)
        .map(|k| {
            (0..h)
                .map(|y| (0..w).map(|x| t.data()[(k * h + y) * w + x]).collect())
                .collect()
        })
        .collect()
}

fn rand_tensor(shape: &[usize], rng: &mut impl rand::Rng) -> mrbcnn::Tensor {
    let n = shape.iter().product();
    mrbcnn::Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Max |optimized − oracle| of `bilinear_outer` over `n` random instances.
pub fn outer_trials(n: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed).named("outer").rng();
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (m, k, h, w) = (
            rng.random_range(1..5),
            rng.random_range(1..5),
            rng.random_range(1..6),
            rng.random_range(1..6),
        );
        let a = rand_tensor(&[m, h, w], &mut rng);
        let b = rand_tensor(&[k, h, w], &mut rng);
        let got = nested(&mrbcnn::bilinear::bilinear_outer(&a, &b).unwrap());
        let want = outer_oracle(&nested(&a), &nested(&b));
        assert_eq!(got.len(), want.len());
        for (p, q) in got.iter().flatten().flatten().zip(want.iter().flatten().flatten()) {
            worst = worst.max((p - q).abs());
        }
    }
    worst
}

/// Max |optimized − oracle| of `region_pool` over `n` random maps and cells.
pub fn region_pool_trials(n: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed).named("pool").rng();
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (k, h, w) = (rng.random_range(1..6), rng.random_range(1..9), rng.random_range(1..9));
        let (ch, cw) = (rng.random_range(1..=h), rng.random_range(1..=w));
        let map = rand_tensor(&[k, h, w], &mut rng);
        let grid = mrbcnn::bilinear::RegionGrid::new(h, w, ch, cw).unwrap();
        let got = mrbcnn::bilinear::region_pool(&map, &grid).unwrap();
        let want = region_pool_oracle(&nested(&map), ch, cw);
        assert_eq!(got.shape(), &[want.len(), k]);
        for (p, q) in got.data().iter().zip(want.iter().flatten()) {
            worst = worst.max((p - q).abs());
        }
    }
    worst
}

/// Max |optimized − oracle| of the histogram loss over `n` random pair sets.
pub fn histogram_trials(n: usize, seed: u64) -> f64 {
    use mrbcnn::loss::{histogram_loss, HistogramSpec, PairSet};
    let mut rng = RngStream::new(seed).named("hist").rng();
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let len = rng.random_range(2..40);
        let bins = rng.random_range(2..120);
        let mut matching: Vec<bool> = (0..len).map(|_| rng.random_bool(0.3)).collect();
        matching[0] = true;
        matching[1] = false;
        let sims: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let got = histogram_loss(
            &PairSet::new(sims.clone(), matching.clone()).unwrap(),
            &HistogramSpec::new(bins).unwrap(),
        )
        .unwrap();
        worst = worst.max((got - histogram_loss_oracle(&sims, &matching, bins)).abs());
    }
    worst
}

/// Random retrieval instance: similarities come from random embeddings,
/// relevance from random identities; every query has a relevant item.
pub struct RetrievalCase {
    pub queries: Vec<mrbcnn::Embedding>,
    pub gallery: Vec<mrbcnn::Embedding>,
    pub qids: Vec<i64>,
    pub gids: Vec<i64>,
}

impl RetrievalCase {
    pub fn random(rng: &mut impl rand::Rng, n_queries: usize) -> Self {
        let dim = rng.random_range(2..8);
        let n_ids = rng.random_range(2..7);
        let n_gallery = rng.random_range(n_ids..n_ids + 12);
        let emb = |rng: &mut dyn rand::RngCore| {
            mrbcnn::Embedding::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let gids: Vec<i64> = (0..n_gallery)
            .map(|j| {
                if j < n_ids {
                    j as i64
                } else {
                    rng.random_range(0..n_ids as i64)
                }
            })
            .collect();
        let qids = (0..n_queries).map(|_| rng.random_range(0..n_ids as i64)).collect();
        RetrievalCase {
            queries: (0..n_queries).map(|_| emb(rng)).collect(),
            gallery: (0..n_gallery).map(|_| emb(rng)).collect(),
            qids,
            gids,
        }
    }

    pub fn sims(&self) -> Vec<Vec<f64>> {
        self.queries
            .iter()
            .map(|q| {
                self.gallery
                    .iter()
                    .map(|g| cosine_oracle(q.as_slice(), g.as_slice()))
                    .collect()
            })
            .collect()
    }

    pub fn relevance(&self) -> Vec<Vec<bool>> {
        self.qids
            .iter()
            .map(|q| self.gids.iter().map(|g| g == q).collect())
            .collect()
    }
}

/// Max deviation of recall@k (every k up to the gallery size) and mAP from
/// the scan oracles over `n` random 20-query instances.
pub fn retrieval_trials(n: usize, seed: u64) -> (f64, f64) {
    use mrbcnn::eval::{mean_average_precision, rank_queries, recall_at_k};
    let mut rng = RngStream::new(seed).named("retrieval").rng();
    let (mut recall_worst, mut map_worst): (f64, f64) = (0.0, 0.0);
    for _ in 0..n {
        let case = RetrievalCase::random(&mut rng, 20);
        let res = rank_queries(&case.queries, &case.gallery, &case.qids, &case.gids, None).unwrap();
        let (sims, rel) = (case.sims(), case.relevance());
        let ks: Vec<usize> = (1..=case.gallery.len()).collect();
        for (k, r) in recall_at_k(&res, &ks).unwrap() {
            recall_worst = recall_worst.max((r - recall_oracle(&sims, &rel, k)).abs());
        }
        let map = mean_average_precision(&res).unwrap();
        map_worst = map_worst.max((map - map_oracle(&sims, &rel)).abs());
    }
    (recall_worst, map_worst)
}
