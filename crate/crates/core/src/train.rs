//! Siamese training: per-batch gradients, SGD with momentum and decoupled
//! weight decay, learning-rate policies, validation-driven model selection
//! and checkpointing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;

use crate::checkpoint::{BestRecord, Checkpoint, TrainState};
use crate::config::{LrPolicy, TrainConfig};
use crate::data::{load_manifest, make_epoch_batches, ImageSet, PixelNorm};
use crate::error::{contract_err, Error, Result};
use crate::eval::{evaluate_trials, single_shot_trials, EvalSummary, Protocol, Trial};
use crate::loss::{pair_labels, LossConfig};
use crate::net::{bind_params, embed_graph, Mode, Model, NetworkConfig};
use crate::nn::{init_params, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor};

pub const LOG_HEADER: &str = "iter,loss,lr,val_recall1";

/// Streams of a run, all derived from the configured seed.
pub fn init_stream(seed: u64) -> RngStream {
    RngStream::new(seed).named("init")
}

fn batch_stream(seed: u64) -> RngStream {
    RngStream::new(seed).named("batches")
}

fn dropout_stream(seed: u64, iteration: u64) -> RngStream {
    RngStream::new(seed).named("dropout").split(iteration)
}

fn val_stream(seed: u64) -> RngStream {
    RngStream::new(seed).named("val")
}

/// Loss over all pairs of a batch and its gradient with respect to every
/// parameter. Each image is embedded in train mode with dropout drawn from
/// `stream.split(i)`. Per-image parameter gradients are summed in image
/// order, so the result does not depend on the number of worker threads.
pub fn batch_gradients(
    params: &ParamStore,
    net: &NetworkConfig,
    loss: &LossConfig,
    images: &[Tensor],
    person_ids: &[i64],
    stream: RngStream,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if images.len() != person_ids.len() {
        return Err(contract_err!(
            "{} images for {} identities",
            images.len(),
            person_ids.len()
        ));
    }
    let labels = pair_labels(person_ids)?;
    if labels.is_degenerate() {
        return Err(contract_err!("batch has no matching or no non-matching pairs"));
    }
    let b = images.len();

    // Forward pass only, to get the embeddings the loss sees.
    let embeddings: Vec<Vec<f64>> = images
        .par_iter()
        .enumerate()
        .map(|(i, im)| {
            let mut g = Graph::new();
            let vars = bind_params(&mut g, params, false);
            let e = embed_graph(&mut g, im, &vars, net, Mode::Train, stream.split(i as u64))?;
            Ok(g.value(e).to_vec())
        })
        .collect::<Result<_>>()?;
    let d = embeddings[0].len();

    let mut g = Graph::new();
    let e = g.leaf(Tensor::new(&[b, d], embeddings.concat())?);
    let sims = g.pairwise_cosine(e)?;
    let l = g.pair_loss(sims, &labels.matching, loss)?;
    let value = g.value(l).item()?;
    let de = g.backward(l)?;
    let de = de
        .get(e)
        .ok_or_else(|| contract_err!("loss does not depend on embeddings"))?
        .clone();

    // Recompute each image's graph and push its embedding gradient through.
    let per_image = |i: usize| -> Result<Vec<(String, Tensor)>> {
        let mut g = Graph::new();
        let vars = bind_params(&mut g, params, true);
        let out = embed_graph(&mut g, &images[i], &vars, net, Mode::Train, stream.split(i as u64))?;
        let seed = Tensor::new(&[d], de.data()[i * d..(i + 1) * d].to_vec())?;
        let grads = g.backward_with_seed(out, &seed)?;
        vars.iter()
            .map(|(name, v)| {
                let t = grads.get(*v).ok_or_else(|| contract_err!("no gradient for {name}"))?;
                Ok((name.clone(), t.clone()))
            })
            .collect()
    };
    let chunk = rayon::current_num_threads().max(1);
    let mut acc: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for start in (0..b).step_by(chunk) {
        let end = (start + chunk).min(b);
        let grads: Vec<Vec<(String, Tensor)>> = (start..end).into_par_iter().map(per_image).collect::<Result<_>>()?;
        for image_grads in grads {
            for (name, t) in image_grads {
                match acc.get_mut(&name) {
                    Some((_, sum)) => sum.iter_mut().zip(t.data()).for_each(|(s, v)| *s += v),
                    None => {
                        acc.insert(name, (t.shape().to_vec(), t.to_vec()));
                    }
                }
            }
        }
    }
    let grads = acc
        .into_iter()
        .map(|(name, (shape, data))| Ok((name, Tensor::new(&shape, data)?)))
        .collect::<Result<_>>()?;
    Ok((value, grads))
}

/// `v ← μ·v + g`, `p ← p − lr·(v + wd·p)` for every parameter. On the first
/// step (v = 0) this is `p − lr·(g + wd·p)`.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let g = grads
            .get(&name)
            .ok_or_else(|| contract_err!("no gradient for parameter {name}"))?;
        let p = params.get(&name)?;
        let v = params.momentum(&name)?;
        if g.shape() != p.shape() {
            return Err(contract_err!("gradient for {name} has shape {:?}", g.shape()));
        }
        let v_new: Vec<f64> = v.data().iter().zip(g.data()).map(|(v, g)| momentum * v + g).collect();
        let p_new: Vec<f64> = p
            .data()
            .iter()
            .zip(&v_new)
            .map(|(p, v)| p - lr * (v + weight_decay * p))
            .collect();
        let shape = p.shape().to_vec();
        params.set(&name, Tensor::new(&shape, p_new)?)?;
        params.set_momentum(&name, Tensor::new(&shape, v_new)?)?;
    }
    Ok(())
}

/// Learning rate of the fixed-step policy at `iteration`.
pub fn fixed_step_lr(lr0: f64, every: u64, factor: f64, iteration: u64) -> f64 {
    lr0 * factor.powi((iteration / every) as i32)
}

/// Plateau bookkeeping after one validation. Returns whether `recall1` is a
/// new best. After `patience` consecutive non-improving evaluations the
/// learning rate is multiplied by `factor` and the count restarts.
pub fn plateau_update(state: &mut TrainState, recall1: f64, patience: usize, factor: f64) -> bool {
    let improved = state.best.is_none_or(|b| recall1 > b.recall1);
    if improved {
        state.best = Some(BestRecord {
            iteration: state.iteration,
            recall1,
        });
        state.stale_evals = 0;
    } else {
        state.stale_evals += 1;
        if state.stale_evals >= patience {
            state.lr *= factor;
            state.stale_evals = 0;
        }
    }
    improved
}

/// Eval-mode embeddings of every image in `set`.
pub fn embed_set(model: &Model, set: &ImageSet) -> Result<Vec<crate::net::Embedding>> {
    let images = (0..set.len()).map(|i| set.get(i)).collect::<Result<Vec<_>>>()?;
    model.embed_all(&images)
}

/// Single-shot evaluation of `model` over every identity of `set`.
pub fn evaluate_model(model: &Model, set: &ImageSet, trials: &[Trial], seed: u64) -> Result<EvalSummary> {
    let embs = embed_set(model, set)?;
    evaluate_trials(set.manifest(), &embs, trials, Protocol::Generic, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    pub val_recall1: Option<f64>,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let val = self.val_recall1.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.iteration, self.loss, self.lr, val)
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub state: TrainState,
    train: ImageSet,
    val: Option<(ImageSet, Vec<Trial>)>,
    epoch_batches: Option<(u64, Vec<Vec<usize>>)>,
    pub history: Vec<LogRow>,
}

impl Trainer {
    /// Fresh run: parameters initialized from the config seed.
    pub fn from_config(config: TrainConfig) -> Result<Self> {
        let params = init_params(&config.net, init_stream(config.seed))?;
        let state = TrainState::fresh(&config);
        Trainer::resume(config, params, state)
    }

    /// Loads the manifests named by `config` and continues from `state`.
    pub fn resume(config: TrainConfig, params: ParamStore, state: TrainState) -> Result<Self> {
        let train_path = config
            .train_manifest
            .clone()
            .ok_or_else(|| contract_err!("config lacks data.train_manifest"))?;
        let (h, w) = (config.net.input_h, config.net.input_w);
        let train = ImageSet::new(load_manifest(&train_path)?, h, w, PixelNorm::default());
        let val = match &config.val_manifest {
            Some(p) => Some(ImageSet::new(load_manifest(p)?, h, w, PixelNorm::default())),
            None => None,
        };
        Trainer::with_sets(config, params, state, train, val)
    }

    pub fn with_sets(
        config: TrainConfig,
        params: ParamStore,
        state: TrainState,
        train: ImageSet,
        val: Option<ImageSet>,
    ) -> Result<Self> {
        config.validate()?;
        crate::net::check_params(&params, &config.net)?;
        if train.len() < 2 {
            return Err(contract_err!("training manifest needs at least 2 records"));
        }
        let val = match val {
            Some(v) if !v.is_empty() => {
                let trials = single_shot_trials(v.manifest(), config.val_trials, val_stream(config.seed))?;
                Some((v, trials))
            }
            _ => {
                warn!("no validation set: the best checkpoint tracks the latest one");
                None
            }
        };
        Ok(Trainer {
            config,
            params,
            state,
            train,
            val,
            epoch_batches: None,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.config.net.clone(), self.params.clone())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            state: self.state.clone(),
            params: self.params.clone(),
        }
    }

    fn next_batch(&mut self) -> Result<Vec<usize>> {
        loop {
            let epoch = self.state.epoch;
            if self.epoch_batches.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let ids = self.train.manifest().person_ids();
                let batches = make_epoch_batches(&ids, self.config.batch, batch_stream(self.config.seed), epoch)?;
                if batches.is_empty() {
                    return Err(contract_err!("training data yields no usable batch"));
                }
                self.epoch_batches = Some((epoch, batches));
            }
            let batches = &self.epoch_batches.as_ref().unwrap().1;
            if self.state.batch_pos < batches.len() {
                let b = batches[self.state.batch_pos].clone();
                self.state.batch_pos += 1;
                return Ok(b);
            }
            self.state.epoch += 1;
            self.state.batch_pos = 0;
        }
    }

    /// One SGD iteration; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let indices = self.next_batch()?;
        let batch = self.train.batch(&indices)?;
        let it = self.state.iteration;
        if let LrPolicy::FixedStep { every, factor } = self.config.lr_policy {
            self.state.lr = fixed_step_lr(self.config.lr, every, factor, it);
        }
        let non_finite = |_detail: String| Error::NonFiniteLoss {
            iteration: it,
            person_ids: batch.person_ids.clone(),
        };
        let (loss, grads) = match batch_gradients(
            &self.params,
            &self.config.net,
            &self.config.loss,
            &batch.images,
            &batch.person_ids,
            dropout_stream(self.config.seed, it),
        ) {
            Err(Error::NonFinite(m)) => return Err(non_finite(m)),
            other => other?,
        };
        if !loss.is_finite() {
            return Err(non_finite(String::new()));
        }
        sgd_step(
            &mut self.params,
            &grads,
            self.state.lr,
            self.config.momentum,
            self.config.weight_decay,
        )
        .map_err(|e| match e {
            Error::NonFinite(m) => non_finite(m),
            e => e,
        })?;
        self.state.iteration += 1;
        Ok(loss)
    }

    /// Mean validation Recall@1, or None without a validation set.
    pub fn validate(&self) -> Result<Option<f64>> {
        match &self.val {
            None => Ok(None),
            Some((set, trials)) => {
                let s = evaluate_model(&self.model()?, set, trials, self.config.seed)?;
                Ok(Some(s.mean_recall_at(1)))
            }
        }
    }

    /// Trains until `max_iters`, writing `train_log.csv`, `latest.ckpt` and
    /// `best.ckpt` under `out_dir`.
    pub fn run(&mut self, out_dir: &Path) -> Result<TrainReport> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join("train_log.csv");
        let mut log = open_log(&log_path, self.state.iteration)?;
        let latest = out_dir.join("latest.ckpt");
        let best = out_dir.join("best.ckpt");
        while self.state.iteration < self.config.max_iters {
            let loss = match self.step() {
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    let dump = out_dir.join("nonfinite_batch.txt");
                    let _ = fs::write(&dump, format!("{e}\n"));
                    return Err(e);
                }
                other => other?,
            };
            let lr_used = self.state.lr;
            let it = self.state.iteration;
            let mut row = LogRow {
                iteration: it,
                loss,
                lr: lr_used,
                val_recall1: None,
            };
            let eval_now = it.is_multiple_of(self.config.eval_every) || it == self.config.max_iters;
            let mut new_best = false;
            if eval_now {
                match self.validate()? {
                    Some(r) => {
                        row.val_recall1 = Some(r);
                        new_best = match self.config.lr_policy {
                            LrPolicy::Plateau { patience, factor } => {
                                plateau_update(&mut self.state, r, patience, factor)
                            }
                            LrPolicy::FixedStep { .. } => {
                                let improved = self.state.best.is_none_or(|b| r > b.recall1);
                                if improved {
                                    self.state.best = Some(BestRecord {
                                        iteration: it,
                                        recall1: r,
                                    });
                                }
                                improved
                            }
                        };
                        info!("iter {it}: loss {loss:.5}, lr {lr_used:e}, val recall@1 {r:.4}");
                    }
                    None => {
                        new_best = true;
                        info!("iter {it}: loss {loss:.5}, lr {lr_used:e}");
                    }
                }
            }
            writeln!(log, "{}", row.to_csv()).map_err(|e| Error::io(&log_path, e))?;
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            self.history.push(row);
            if eval_now {
                let ck = self.checkpoint();
                if new_best {
                    ck.save(&best)?;
                }
                ck.save(&latest)?;
            }
        }
        Ok(TrainReport {
            out_dir: out_dir.to_path_buf(),
            best: self.state.best,
            iterations: self.state.iteration,
        })
    }
}

/// Opens the log for appending after `iteration`, dropping rows beyond it
/// (left over from an interrupted run), or starts a new one.
fn open_log(path: &Path, iteration: u64) -> Result<fs::File> {
    let mut text = format!("{LOG_HEADER}\n");
    if iteration > 0 {
        if let Ok(old) = fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                let it: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
                if it <= iteration {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
    }
    fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub out_dir: PathBuf,
    pub best: Option<BestRecord>,
    pub iterations: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_at, max_relative_error};

    #[test]
    fn one_parameter_weight_decay_step() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[1], vec![2.0]).unwrap()).unwrap();
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(&[1], vec![0.5]).unwrap());
        sgd_step(&mut p, &g, 0.1, 0.9, 0.0005).unwrap();
        let expect = 2.0 - 0.1 * (0.5 + 0.0005 * 2.0);
        assert_eq!(p.get("w").unwrap().data()[0], expect);
        // Second step carries momentum.
        sgd_step(&mut p, &g, 0.1, 0.9, 0.0005).unwrap();
        let v = 0.9 * 0.5 + 0.5;
        assert_eq!(p.get("w").unwrap().data()[0], expect - 0.1 * (v + 0.0005 * expect));
    }

    #[test]
    fn plateau_with_patience_two() {
        let config = TrainConfig::default();
        let mut s = TrainState::fresh(&config);
        assert!(plateau_update(&mut s, 0.5, 2, 0.1));
        let mut lrs = Vec::new();
        for _ in 0..3 {
            assert!(!plateau_update(&mut s, 0.4, 2, 0.1));
            lrs.push(s.lr);
        }
        assert_eq!(lrs[2], 1e-4 * 0.1);
        assert!((s.lr - 1e-5).abs() < 1e-20);
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn fixed_step_policy() {
        assert_eq!(fixed_step_lr(1e-4, 100, 0.1, 99), 1e-4);
        assert!((fixed_step_lr(1e-4, 100, 0.1, 100) - 1e-5).abs() < 1e-20);
        assert!((fixed_step_lr(1e-4, 100, 0.1, 250) - 1e-6).abs() < 1e-20);
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let mut net = NetworkConfig::down_scaled();
        net.dropout_p = 0.3;
        let params = init_params(&net, RngStream::new(5)).unwrap();
        let images: Vec<Tensor> = (0..4)
            .map(|i| crate::gradcheck::random_uniform(&[3, 40, 24], 0.0, 1.0, RngStream::new(100 + i)).unwrap())
            .collect();
        let ids = [1, 1, 2, 2];
        let loss = LossConfig::Binomial(Default::default());
        let stream = RngStream::new(77);
        let (_, grads) = batch_gradients(&params, &net, &loss, &images, &ids, stream).unwrap();
        for name in ["fc.weight", "part1.stream_b.conv2.weight", "part0.stream_a.conv1.bias"] {
            let x = params.get(name).unwrap();
            let coords: Vec<usize> = (0..x.len()).step_by((x.len() / 6).max(1)).collect();
            let f = |t: &Tensor| {
                let mut p = params.clone();
                p.set(name, t.clone())?;
                Ok(batch_gradients(&p, &net, &loss, &images, &ids, stream)?.0)
            };
            let numeric = finite_difference_at(f, x, 1e-6, &coords).unwrap();
            let analytic: Vec<f64> = coords.iter().map(|&i| grads[name].data()[i]).collect();
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn gradients_do_not_depend_on_thread_count() {
        let net = NetworkConfig::down_scaled();
        let params = init_params(&net, RngStream::new(1)).unwrap();
        let images: Vec<Tensor> = (0..5)
            .map(|i| crate::gradcheck::random_uniform(&[3, 40, 24], 0.0, 1.0, RngStream::new(i)).unwrap())
            .collect();
        let ids = [3, 3, 4, 4, 5];
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                batch_gradients(&params, &net, &LossConfig::default(), &images, &ids, RngStream::new(2)).unwrap()
            })
        };
        let (l1, g1) = run(1);
        let (l3, g3) = run(3);
        assert_eq!(l1.to_bits(), l3.to_bits());
        assert_eq!(g1, g3);
    }
}
