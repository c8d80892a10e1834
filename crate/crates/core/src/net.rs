//! The embedding network: three overlapping horizontal parts, per-part
//! convolutional streams, (multi-region) bilinear pooling, and a final
//! fully-connected layer producing the descriptor.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilinear::RegionGrid;
use crate::error::{contract_err, dim_err, Error, Result};
use crate::nn::{ConvSpec, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{dot, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Plain three-part CNN: flattened conv features into the FC layer.
    #[serde(rename = "cnn")]
    Cnn,
    /// Bilinear pooling over the whole feature map of each part.
    #[serde(rename = "bcnn")]
    Bcnn,
    /// Bilinear pooling inside each cell of a region grid.
    #[serde(rename = "mr-bcnn")]
    MrBcnn,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Cnn => "cnn",
            Variant::Bcnn => "bcnn",
            Variant::MrBcnn => "mr-bcnn",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnn" => Ok(Variant::Cnn),
            "bcnn" | "b-cnn" => Ok(Variant::Bcnn),
            "mr-bcnn" | "mrbcnn" | "mr-b-cnn" => Ok(Variant::MrBcnn),
            other => Err(contract_err!("unknown variant {other:?}")),
        }
    }
}

/// How the feature map of each part is cut into pooling regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionLayout {
    /// Cells of a fixed size in feature-map locations.
    Cell { h: usize, w: usize },
    /// A requested number of region rows and columns.
    Count { rows: usize, cols: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub input_h: usize,
    pub input_w: usize,
    pub part_height: usize,
    pub part_stride: usize,
    pub channels1: usize,
    pub channels2: usize,
    pub kernel1: usize,
    pub kernel2: usize,
    pub regions: RegionLayout,
    pub embedding_dim: usize,
    pub dropout_p: f64,
    pub normalize: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            variant: Variant::MrBcnn,
            input_h: 160,
            input_w: 60,
            part_height: 72,
            part_stride: 44,
            channels1: 32,
            channels2: 32,
            kernel1: 7,
            kernel2: 5,
            regions: RegionLayout::Cell { h: 5, w: 5 },
            embedding_dim: 500,
            dropout_p: 0.5,
            normalize: false,
        }
    }
}

impl NetworkConfig {
    /// Small geometry used by gradient checks: 40×24 input, 8 channels.
    pub fn down_scaled() -> Self {
        NetworkConfig {
            input_h: 40,
            input_w: 24,
            part_height: 20,
            part_stride: 10,
            channels1: 8,
            channels2: 8,
            regions: RegionLayout::Cell { h: 1, w: 1 },
            embedding_dim: 16,
            ..NetworkConfig::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn conv1_spec(&self) -> ConvSpec {
        ConvSpec {
            in_channels: 3,
            out_channels: self.channels1,
            kernel: (self.kernel1, self.kernel1),
        }
    }

    pub fn conv2_spec(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.channels1,
            out_channels: self.channels2,
            kernel: (self.kernel2, self.kernel2),
        }
    }

    pub fn stream_names(&self) -> &'static [&'static str] {
        match self.variant {
            Variant::Cnn => &["stream_a"],
            _ => &["stream_a", "stream_b"],
        }
    }

    /// Rows [start, end) of each of the three parts.
    pub fn part_windows(&self) -> [(usize, usize); 3] {
        [0, 1, 2].map(|i| (i * self.part_stride, i * self.part_stride + self.part_height))
    }

    /// Spatial extent after conv → pool → conv → pool on one part.
    pub fn feature_extent(&self) -> Result<(usize, usize)> {
        let (h, w) = self.conv1_spec().output_extent(self.part_height, self.input_w)?;
        let (h, w) = (h / 2, w / 2);
        let (h, w) = self.conv2_spec().output_extent(h, w)?;
        let (h, w) = (h / 2, w / 2);
        if h == 0 || w == 0 {
            return Err(dim_err!(
                "part {}×{} pools down to nothing",
                self.part_height,
                self.input_w
            ));
        }
        Ok((h, w))
    }

    pub fn region_grid(&self) -> Result<RegionGrid> {
        let (h, w) = self.feature_extent()?;
        match (self.variant, self.regions) {
            (Variant::MrBcnn, RegionLayout::Cell { h: ch, w: cw }) => RegionGrid::new(h, w, ch, cw),
            (Variant::MrBcnn, RegionLayout::Count { rows, cols }) => RegionGrid::from_counts(h, w, rows, cols),
            _ => RegionGrid::full(h, w),
        }
    }

    /// Length of the vector entering the final FC layer.
    pub fn fc_fan_in(&self) -> Result<usize> {
        let (h, w) = self.feature_extent()?;
        Ok(match self.variant {
            Variant::Cnn => 3 * self.channels2 * h * w,
            _ => 3 * self.region_grid()?.len() * self.channels2 * self.channels2,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.input_h,
            self.input_w,
            self.part_height,
            self.channels1,
            self.channels2,
            self.kernel1,
            self.kernel2,
            self.embedding_dim,
        ];
        if positive.contains(&0) {
            return Err(contract_err!("network sizes must be positive: {:?}", self));
        }
        if self.part_height + 2 * self.part_stride != self.input_h {
            return Err(contract_err!(
                "three parts of height {} with stride {} do not span {} rows",
                self.part_height,
                self.part_stride,
                self.input_h
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(contract_err!("dropout probability {} not in [0, 1)", self.dropout_p));
        }
        self.feature_extent()?;
        self.region_grid()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Final descriptor of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Embedding(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }
}

/// ⟨a,b⟩ / (‖a‖·‖b‖), clamped to [−1, 1].
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    cosine_slices(a.as_slice(), b.as_slice())
}

pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(dim_err!("cosine of vectors of length {} and {}", a.len(), b.len()));
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity("zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cuts a `[3×input_h×input_w]` image into its top, middle and bottom parts.
pub fn split_parts(image: &Tensor, config: &NetworkConfig) -> Result<[Tensor; 3]> {
    let expect = [3, config.input_h, config.input_w];
    if image.shape() != expect {
        return Err(dim_err!("image shape {:?}, expected {:?}", image.shape(), expect));
    }
    let (h, w) = (config.input_h, config.input_w);
    let windows = config.part_windows();
    let mut parts = Vec::with_capacity(3);
    for (r0, r1) in windows {
        let mut data = Vec::with_capacity(3 * (r1 - r0) * w);
        for c in 0..3 {
            data.extend_from_slice(&image.data()[(c * h + r0) * w..(c * h + r1) * w]);
        }
        parts.push(Tensor::new(&[3, r1 - r0, w], data)?);
    }
    Ok(parts.try_into().expect("three windows"))
}

/// Checks that `params` holds exactly the tensors `config` needs.
pub fn check_params(params: &ParamStore, config: &NetworkConfig) -> Result<()> {
    let expected = expected_shapes(config)?;
    for (name, shape) in &expected {
        let t = params
            .get(name)
            .map_err(|_| contract_err!("parameters lack {name} required by the {} variant", config.variant))?;
        if t.shape() != shape.as_slice() {
            return Err(contract_err!(
                "parameter {name} has shape {:?}, config needs {:?}",
                t.shape(),
                shape
            ));
        }
    }
    if let Some(extra) = params.names().find(|n| !expected.contains_key(*n)) {
        return Err(contract_err!(
            "parameter {extra} is not part of the {} variant",
            config.variant
        ));
    }
    Ok(())
}

/// Name → shape of every parameter tensor of `config`.
pub fn expected_shapes(config: &NetworkConfig) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut m = BTreeMap::new();
    for part in 0..3 {
        for s in config.stream_names() {
            for (li, spec) in [config.conv1_spec(), config.conv2_spec()].iter().enumerate() {
                let prefix = format!("part{part}.{s}.conv{}", li + 1);
                m.insert(format!("{prefix}.weight"), spec.weight_shape().to_vec());
                m.insert(format!("{prefix}.bias"), vec![spec.out_channels]);
            }
        }
    }
    m.insert("fc.weight".into(), vec![config.embedding_dim, config.fc_fan_in()?]);
    m.insert("fc.bias".into(), vec![config.embedding_dim]);
    Ok(m)
}

/// Places every parameter in `g` as a leaf (trainable) or constant.
pub fn bind_params(g: &mut Graph, params: &ParamStore, trainable: bool) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(name, t)| {
            let v = if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            };
            (name.to_string(), v)
        })
        .collect()
}

fn param(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| contract_err!("parameter {name} is not bound"))
}

fn conv_stream(g: &mut Graph, x: Var, vars: &BTreeMap<String, Var>, prefix: &str) -> Result<Var> {
    let mut h = x;
    for layer in ["conv1", "conv2"] {
        let w = param(vars, &format!("{prefix}.{layer}.weight"))?;
        let b = param(vars, &format!("{prefix}.{layer}.bias"))?;
        h = g.conv2d(h, w, b)?;
        h = g.relu(h)?;
        h = g.maxpool2(h)?;
    }
    Ok(h)
}

/// Records the forward pass of one image in `g` and returns the embedding
/// node. `stream` drives dropout and is only consulted in train mode.
pub fn embed_graph(
    g: &mut Graph,
    image: &Tensor,
    vars: &BTreeMap<String, Var>,
    config: &NetworkConfig,
    mode: Mode,
    stream: RngStream,
) -> Result<Var> {
    let parts = split_parts(image, config)?;
    let mut pooled = Vec::with_capacity(3);
    match config.variant {
        Variant::Cnn => {
            for (p, part) in parts.into_iter().enumerate() {
                let x = g.constant(part);
                let fa = conv_stream(g, x, vars, &format!("part{p}.stream_a"))?;
                let n = g.value(fa).len();
                pooled.push(g.reshape(fa, &[n])?);
            }
        }
        Variant::Bcnn | Variant::MrBcnn => {
            let grid = config.region_grid()?;
            for (p, part) in parts.into_iter().enumerate() {
                let x = g.constant(part);
                let fa = conv_stream(g, x, vars, &format!("part{p}.stream_a"))?;
                let fb = conv_stream(g, x, vars, &format!("part{p}.stream_b"))?;
                let bmap = g.bilinear_outer(fa, fb)?;
                let mut r = g.region_pool(bmap, &grid)?;
                if config.normalize {
                    r = g.signed_sqrt_l2(r)?;
                }
                pooled.push(r);
            }
        }
    }
    let desc = match config.variant {
        Variant::Cnn => g.concat(&pooled)?,
        _ => g.assemble_descriptor(&pooled)?,
    };
    let fan_in = config.fc_fan_in()?;
    if g.value(desc).len() != fan_in {
        return Err(contract_err!(
            "descriptor length {} does not match FC fan-in {}",
            g.value(desc).len(),
            fan_in
        ));
    }
    let d = g.dropout(desc, config.dropout_p, stream, mode == Mode::Train)?;
    let w = param(vars, "fc.weight")?;
    let b = param(vars, "fc.bias")?;
    g.fc(d, w, b)
}

/// Network configuration plus trained parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: NetworkConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        check_params(&params, &config)?;
        Ok(Model { config, params })
    }

    /// Eval-mode embedding (dropout off).
    pub fn embed(&self, image: &Tensor) -> Result<Embedding> {
        self.embed_with(image, Mode::Eval, RngStream::new(0))
    }

    pub fn embed_with(&self, image: &Tensor, mode: Mode, stream: RngStream) -> Result<Embedding> {
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &self.params, false);
        let e = embed_graph(&mut g, image, &vars, &self.config, mode, stream)?;
        Embedding::new(g.value(e).to_vec())
    }

    /// Eval-mode embeddings of many images; output order follows input order.
    pub fn embed_all(&self, images: &[Tensor]) -> Result<Vec<Embedding>> {
        images.par_iter().map(|im| self.embed(im)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    #[test]
    fn default_shape_law() {
        let c = NetworkConfig::default();
        c.validate().unwrap();
        let (h, w) = c.conv1_spec().output_extent(72, 60).unwrap();
        assert_eq!((h, w), (66, 54));
        assert_eq!((h / 2, w / 2), (33, 27));
        let (h, w) = c.conv2_spec().output_extent(33, 27).unwrap();
        assert_eq!((h, w), (29, 23));
        assert_eq!(c.feature_extent().unwrap(), (14, 11));
        assert_eq!(c.region_grid().unwrap().len(), 9);
        assert_eq!(c.fc_fan_in().unwrap(), 27648);
        assert_eq!(c.clone().with_variant(Variant::Bcnn).fc_fan_in().unwrap(), 3 * 1024);
        assert_eq!(c.clone().with_variant(Variant::Cnn).fc_fan_in().unwrap(), 14784);
    }

    #[test]
    fn part_windows_default() {
        let c = NetworkConfig::default();
        assert_eq!(c.part_windows(), [(0, 72), (44, 116), (88, 160)]);
    }

    #[test]
    fn split_of_constant_image() {
        let c = NetworkConfig::default();
        let img = Tensor::full(&[3, 160, 60], 0.25).unwrap();
        let parts = split_parts(&img, &c).unwrap();
        for p in &parts {
            assert_eq!(p.shape(), &[3, 72, 60]);
            assert!(p.data().iter().all(|&v| v == 0.25));
        }
        assert!(split_parts(&Tensor::zeros(&[3, 159, 60]).unwrap(), &c).is_err());
    }

    #[test]
    fn invalid_geometry_rejected() {
        let c = NetworkConfig {
            part_stride: 40,
            ..NetworkConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Contract(_))));
    }

    #[test]
    fn variant_param_mismatch_is_contract_error() {
        let c = NetworkConfig::down_scaled();
        let p = init_params(&c.clone().with_variant(Variant::Cnn), RngStream::new(1)).unwrap();
        assert!(matches!(Model::new(c, p), Err(Error::Contract(_))));
    }

    #[test]
    fn cosine_cases() {
        let a = Embedding::new(vec![1.0, 2.0, -1.0]).unwrap();
        let a2 = Embedding::new(vec![2.0, 4.0, -2.0]).unwrap();
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&a, &a2).unwrap() - 1.0).abs() < 1e-15);
        let x = Embedding::new(vec![1.0, 0.0]).unwrap();
        let y = Embedding::new(vec![0.0, 3.0]).unwrap();
        assert_eq!(cosine_similarity(&x, &y).unwrap(), 0.0);
        let z = Embedding::new(vec![0.0, 0.0]).unwrap();
        assert!(matches!(cosine_similarity(&x, &z), Err(Error::UndefinedSimilarity(_))));
    }
}
