//! Central finite differences and the comparison harness used to validate
//! every backward rule in the crate.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::bilinear::RegionGrid;
use crate::error::{contract_err, Error, Result};
use crate::loss::{pair_labels, BinomialSpec, HistogramSpec, LossConfig};
use crate::net::{embed_graph, Mode, NetworkConfig, Variant};
use crate::nn::init_params;
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Coordinates whose gradient is below this fraction of the tensor's largest
/// gradient are compared against that fraction instead of their own size.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// gᵢ = (f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps) for every coordinate.
pub fn finite_difference_grad(f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, eps: f64) -> Result<Tensor> {
    let coords: Vec<usize> = (0..x.len()).collect();
    let partial = finite_difference_at(f, x, eps, &coords)?;
    Tensor::new(x.shape(), partial)
}

/// Central differences at a subset of flat coordinates.
pub fn finite_difference_at(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Oracle(format!("step must be positive, got {eps}")));
    }
    let mut buf = x.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= buf.len() {
            return Err(contract_err!("coordinate {} out of range {}", i, buf.len()));
        }
        let orig = buf[i];
        buf[i] = orig + eps;
        let plus = eval(&mut f, x.shape(), &buf)?;
        buf[i] = orig - eps;
        let minus = eval(&mut f, x.shape(), &buf)?;
        buf[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

fn eval(f: &mut impl FnMut(&Tensor) -> Result<f64>, shape: &[usize], buf: &[f64]) -> Result<f64> {
    let t = Tensor::new(shape, buf.to_vec())?;
    let v = f(&t).map_err(|e| Error::Oracle(format!("evaluation failed: {e}")))?;
    if !v.is_finite() {
        return Err(Error::Oracle(format!("non-finite evaluation {v}")));
    }
    Ok(v)
}

/// Largest per-coordinate relative error between analytic and numeric
/// gradients, with the denominator floored at `RELATIVE_FLOOR` times the
/// largest analytic magnitude.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (RELATIVE_FLOOR * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Builds a scalar-valued graph over `inputs` and compares its analytic
/// gradient against central differences, for every input whose tensor has
/// `requires_grad` set. `max_coords` caps how many coordinates per input are
/// probed (chosen from `stream`); `None` probes all of them.
pub fn check_gradients<F>(
    names: &[&str],
    inputs: &[Tensor],
    build: F,
    eps: f64,
    max_coords: Option<usize>,
    stream: RngStream,
) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if names.len() != inputs.len() {
        return Err(contract_err!("{} names for {} inputs", names.len(), inputs.len()));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut reports = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic = grads
            .get(vars[k])
            .ok_or_else(|| contract_err!("no gradient for input {}", names[k]))?;
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < input.len() => {
                let mut rng = stream.named(names[k]).rng();
                let mut c = sample(&mut rng, input.len(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        let f = |x: &Tensor| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    if j == k {
                        g.constant(x.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect();
            let root = build(&mut g, &vars)?;
            g.value(root).item()
        };
        let numeric = finite_difference_at(f, input, eps, &coords)?;
        let picked: Vec<f64> = coords.iter().map(|&i| analytic.data()[i]).collect();
        reports.push(GradCheck {
            name: names[k].to_string(),
            max_rel_err: max_relative_error(&picked, &numeric),
            checked: coords.len(),
        });
    }
    Ok(reports)
}

/// Reduces a tensor to a scalar with fixed random weights in [−1, 1], so that
/// every output coordinate contributes to the checked gradient.
pub fn random_projection(g: &mut Graph, v: Var, stream: RngStream) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let mut rng = stream.rng();
    let w = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0))?;
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    g.sum(p)
}

/// Uniform values in [−1, 1] kept at least `margin` away from zero, for ops
/// with a kink at the origin.
pub fn random_away_from_zero(shape: &[usize], margin: f64, stream: RngStream) -> Result<Tensor> {
    let mut rng = stream.rng();
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.random_range(-1.0..1.0);
        if v.abs() >= margin {
            break v;
        }
    })
}

pub fn random_uniform(shape: &[usize], lo: f64, hi: f64, stream: RngStream) -> Result<Tensor> {
    let mut rng = stream.rng();
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Finite-difference checks of every layer and both losses on the
/// down-scaled geometry, followed by an end-to-end check through every
/// parameter tensor of the network. Layer reports are named `layer/<op>`,
/// loss reports `loss/<kind>`, and parameter reports `param/<name>`.
pub fn gradient_suite(seed: u64, coords_per_param: usize) -> Result<Vec<GradCheck>> {
    let mut out = layer_suite(seed)?;
    let net = NetworkConfig::down_scaled().with_variant(Variant::MrBcnn);
    out.extend(network_suite(&net, seed, coords_per_param)?);
    Ok(out)
}

fn tag(mut reports: Vec<GradCheck>, prefix: &str) -> Vec<GradCheck> {
    for r in &mut reports {
        r.name = format!("{prefix}{}", r.name);
    }
    reports
}

/// Values spaced at least 1e-2 apart in random order, so that max pooling
/// has no near-ties for central differences to cross.
fn distinct_values(shape: &[usize], stream: RngStream) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
    v.shuffle(&mut stream.rng());
    Tensor::new(shape, v)
}

pub fn layer_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let net = NetworkConfig::down_scaled();
    let s = RngStream::new(seed).named("layer-suite");
    let u = |shape: &[usize], i: u64| random_uniform(shape, -1.0, 1.0, s.split(i)).map(|t| t.with_requires_grad(true));
    let proj = s.named("projection");
    let mut out = Vec::new();
    let (c1, c2) = (net.conv1_spec(), net.conv2_spec());
    let (k1, k2) = (net.kernel1, net.kernel2);

    // conv7 on a top part, conv5 on the pooled first-layer map.
    let (ph, pw) = (net.part_height, net.input_w);
    let r = check_gradients(
        &["x", "weight", "bias"],
        &[
            u(&[3, ph, pw], 0)?,
            u(&[c1.out_channels, 3, k1, k1], 1)?,
            u(&[c1.out_channels], 2)?,
        ],
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            random_projection(g, y, proj)
        },
        DEFAULT_EPS,
        None,
        s,
    )?;
    out.extend(tag(r, &format!("layer/conv{k1}.")));
    let (h1, w1) = c1.output_extent(ph, pw)?;
    let r = check_gradients(
        &["x", "weight", "bias"],
        &[
            u(&[c1.out_channels, h1 / 2, w1 / 2], 3)?,
            u(&[c2.out_channels, c1.out_channels, k2, k2], 4)?,
            u(&[c2.out_channels], 5)?,
        ],
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            random_projection(g, y, proj)
        },
        DEFAULT_EPS,
        None,
        s,
    )?;
    out.extend(tag(r, &format!("layer/conv{k2}.")));

    let x = random_away_from_zero(&[c1.out_channels, 6, 5], 1e-3, s.split(6))?.with_requires_grad(true);
    let r = check_gradients(
        &["x"],
        &[x],
        |g, v| {
            let y = g.relu(v[0])?;
            random_projection(g, y, proj)
        },
        DEFAULT_EPS,
        None,
        s,
    )?;
    out.extend(tag(r, "layer/relu."));

    let x = distinct_values(&[c1.out_channels, 7, 9], s.split(7))?.with_requires_grad(true);
    let r = check_gradients(
        &["x"],
        &[x],
        |g, v| {
            let y = g.maxpool2(v[0])?;
            random_projection(g, y, proj)
        },
        DEFAULT_EPS,
        None,
        s,
    )?;
    out.extend(tag(r, "layer/maxpool."));

    let fan_in = net.fc_fan_in()?;
    let r = check_gradients(
        &["x", "weight", "bias"],
        &[
            u(&[fan_in], 8)?,
            u(&[net.embedding_dim, fan_in], 9)?,
            u(&[net.embedding_dim], 10)?,
        ],
        |g, v| {
            let y = g.fc(v[0], v[1], v[2])?;
            random_projection(g, y, proj)
        },
        DEFAULT_EPS,
        None,
        s,
    )?;
    out.extend(tag(r, "layer/fc."));

    let r = check_gradients(
        &["x"],
        &[u(&[fan_in], 11)?],
        |g, v| {
            let y = g.dropout(v[0], net.dropout_p, s.named("dropout"), false)?;
            random_projection(g, y, proj)
        },
        DEFAULT_EPS,
        None,
        s,
    )?;
    out.extend(tag(r, "layer/dropout_eval."));
    let r = check_gradients(
        &["x"],
        &[u(&[fan_in], 12)?],
        |g, v| {
            let y = g.dropout(v[0], net.dropout_p, s.named("dropout"), true)?;
            random_projection(g, y, proj)
        },
        DEFAULT_EPS,
        None,
        s,
    )?;
    out.extend(tag(r, "layer/dropout_train."));

    let (fh, fw) = (3, 4);
    let r = check_gradients(
        &["fa", "fb"],
        &[u(&[c2.out_channels, fh, fw], 13)?, u(&[c2.out_channels, fh, fw], 14)?],
        |g, v| {
            let y = g.bilinear_outer(v[0], v[1])?;
            random_projection(g, y, proj)
        },
        DEFAULT_EPS,
        None,
        s,
    )?;
    out.extend(tag(r, "layer/bilinear_outer."));

    let k = c2.out_channels * c2.out_channels;
    let grid = RegionGrid::new(fh, fw, 2, 3)?;
    let r = check_gradients(
        &["bmap"],
        &[u(&[k, fh, fw], 15)?],
        |g, v| {
            let y = g.region_pool(v[0], &grid)?;
            random_projection(g, y, proj)
        },
        DEFAULT_EPS,
        None,
        s,
    )?;
    out.extend(tag(r, "layer/region_pool."));

    let rk = [grid.len(), k];
    let r = check_gradients(
        &["top", "middle", "bottom"],
        &[u(&rk, 16)?, u(&rk, 17)?, u(&rk, 18)?],
        |g, v| {
            let y = g.assemble_descriptor(v)?;
            random_projection(g, y, proj)
        },
        DEFAULT_EPS,
        None,
        s,
    )?;
    out.extend(tag(r, "layer/assemble."));

    let x = random_away_from_zero(&[3, 10], 0.05, s.split(19))?.with_requires_grad(true);
    let r = check_gradients(
        &["x"],
        &[x],
        |g, v| {
            let y = g.signed_sqrt_l2(v[0])?;
            random_projection(g, y, proj)
        },
        DEFAULT_EPS,
        None,
        s,
    )?;
    out.extend(tag(r, "layer/signed_sqrt_l2."));

    let ids = [0, 0, 1, 1, 1, 2, 2, 3];
    let labels = pair_labels(&ids)?;
    for (name, loss) in [
        ("histogram", LossConfig::Histogram(HistogramSpec::default())),
        ("binomial", LossConfig::Binomial(BinomialSpec::default())),
    ] {
        let e = u(&[ids.len(), net.embedding_dim], 20)?;
        let r = check_gradients(
            &["embeddings"],
            &[e],
            |g, v| {
                let sims = g.pairwise_cosine(v[0])?;
                g.pair_loss(sims, &labels.matching, &loss)
            },
            DEFAULT_EPS,
            None,
            s,
        )?;
        out.extend(tag(r, &format!("loss/{name}.")));
    }
    Ok(out)
}

/// Loss of a small batch through the whole network, differentiated with
/// respect to every parameter tensor (dropout active with a fixed mask).
pub fn network_suite(net: &NetworkConfig, seed: u64, coords_per_param: usize) -> Result<Vec<GradCheck>> {
    let s = RngStream::new(seed).named("network-suite");
    let params = init_params(net, s.named("init"))?;
    let ids = [0i64, 0, 1, 1];
    let labels = pair_labels(&ids)?;
    let images: Vec<Tensor> = (0..ids.len())
        .map(|i| {
            random_uniform(
                &[3, net.input_h, net.input_w],
                0.0,
                1.0,
                s.named("image").split(i as u64),
            )
        })
        .collect::<Result<_>>()?;
    let names: Vec<String> = params.names().map(String::from).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let inputs: Vec<Tensor> = names
        .iter()
        .map(|n| params.get(n).map(|t| t.clone().with_requires_grad(true)))
        .collect::<Result<_>>()?;
    let loss = LossConfig::Binomial(BinomialSpec::default());
    let build = |g: &mut Graph, v: &[Var]| {
        let vars: BTreeMap<String, Var> = names.iter().cloned().zip(v.iter().copied()).collect();
        let mut embs = Vec::with_capacity(images.len());
        for (i, im) in images.iter().enumerate() {
            embs.push(embed_graph(
                g,
                im,
                &vars,
                net,
                Mode::Train,
                s.named("dropout").split(i as u64),
            )?);
        }
        let flat = g.concat(&embs)?;
        let e = g.reshape(flat, &[images.len(), net.embedding_dim])?;
        let sims = g.pairwise_cosine(e)?;
        g.pair_loss(sims, &labels.matching, &loss)
    };
    let r = check_gradients(&name_refs, &inputs, build, DEFAULT_EPS, Some(coords_per_param), s)?;
    Ok(tag(r, "param/"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let x = Tensor::new(&[4], vec![0.3, -2.0, 5.0, 1e-3]).unwrap();
        let g = finite_difference_grad(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn half_squared_norm() {
        let x = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let g = finite_difference_grad(|t| Ok(0.5 * t.data().iter().map(|v| v * v).sum::<f64>()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-9);
        assert!((g.data()[1] + 2.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_step_and_nonfinite_function() {
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        assert!(matches!(
            finite_difference_grad(|_| Ok(0.0), &x, 0.0),
            Err(Error::Oracle(_))
        ));
        assert!(matches!(
            finite_difference_grad(|_| Ok(f64::NAN), &x, 1e-5),
            Err(Error::Oracle(_))
        ));
    }

    #[test]
    fn harness_detects_a_wrong_backward_rule() {
        let x = random_uniform(&[5], -1.0, 1.0, RngStream::new(3))
            .unwrap()
            .with_requires_grad(true);
        // y = x², but the backward claims dy/dx = x.
        let build = |g: &mut Graph, v: &[Var]| {
            let t = g.value(v[0]).clone();
            let data: Vec<f64> = t.data().iter().map(|a| a * a).collect();
            let shape = t.shape().to_vec();
            let y = g.push(
                "bad_square",
                &[v[0]],
                &shape,
                data,
                Box::new(move |grad, _| {
                    let d = grad.data().iter().zip(t.data()).map(|(g, a)| g * a).collect();
                    Ok(vec![Some(Tensor::new(t.shape(), d)?)])
                }),
            )?;
            g.sum(y)
        };
        let r = check_gradients(&["x"], &[x], build, DEFAULT_EPS, None, RngStream::new(0)).unwrap();
        assert!(!r[0].passed(DEFAULT_TOL), "{:?}", r);
    }

    #[test]
    fn suite_covers_every_parameter() {
        let reports = gradient_suite(1, 4).unwrap();
        for r in &reports {
            assert!(r.passed(DEFAULT_TOL), "{r:?}");
        }
        let params = init_params(&NetworkConfig::down_scaled(), RngStream::new(0)).unwrap();
        let checked: Vec<&str> = reports.iter().filter_map(|r| r.name.strip_prefix("param/")).collect();
        assert_eq!(checked, params.names().collect::<Vec<_>>());
    }

    #[test]
    fn matmul_composite_passes() {
        let s = RngStream::new(11);
        let a = random_uniform(&[3, 4], -1.0, 1.0, s.split(0))
            .unwrap()
            .with_requires_grad(true);
        let b = random_uniform(&[4, 2], -1.0, 1.0, s.split(1))
            .unwrap()
            .with_requires_grad(true);
        let build = |g: &mut Graph, v: &[Var]| {
            let c = g.matmul(v[0], v[1])?;
            let d = g.mul(c, c)?;
            random_projection(g, d, RngStream::new(5))
        };
        let r = check_gradients(&["a", "b"], &[a, b], build, DEFAULT_EPS, None, s).unwrap();
        for c in &r {
            assert!(c.passed(1e-6), "{:?}", c);
        }
    }
}
