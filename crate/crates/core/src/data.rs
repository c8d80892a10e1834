//! Dataset manifests, image decoding and resizing, epoch batching, and a
//! synthetic identity dataset for desk-scale runs.
//!
//! Images are binary PPM (`P6`, maxval 255) or raw tensors (`MRTD` magic,
//! u32 LE rank, u32 LE dims, f64 LE payload). Both decode to channels-first
//! `[3×H×W]` tensors.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Gallery,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub person_id: i64,
    pub camera_id: u32,
    #[serde(default)]
    pub split: Option<SplitTag>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Relative record paths are resolved against this directory.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = DatasetManifest {
            records,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.path.as_str()) {
                return Err(Error::Validation(format!("duplicate path {}", r.path)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn person_ids(&self) -> Vec<i64> {
        self.records.iter().map(|r| r.person_id).collect()
    }

    /// Record indices per identity, identities in ascending order.
    pub fn identities(&self) -> BTreeMap<i64, Vec<usize>> {
        let mut m: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            m.entry(r.person_id).or_default().push(i);
        }
        m
    }

    /// Records whose identity is in `ids`, preserving order.
    pub fn subset_by_ids(&self, ids: &HashSet<i64>) -> DatasetManifest {
        self.select(|r| ids.contains(&r.person_id))
    }

    pub fn select(&self, keep: impl Fn(&ManifestRecord) -> bool) -> DatasetManifest {
        DatasetManifest {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    /// Writes the manifest CSV with paths resolved relative to `path`'s directory
    /// when possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let dir = std::path::absolute(&dir).unwrap_or(dir);
        let mut out = String::from("path,person_id,camera_id");
        let with_split = self.records.iter().any(|r| r.split.is_some());
        if with_split {
            out.push_str(",split");
        }
        out.push('\n');
        for r in &self.records {
            let abs = self.resolve(r);
            let abs = std::path::absolute(&abs).unwrap_or(abs);
            let rel = abs.strip_prefix(&dir).map(Path::to_path_buf).unwrap_or(abs.clone());
            let rel = rel.to_string_lossy();
            if rel.contains(',') {
                return Err(Error::Validation(format!("path {rel} contains a comma")));
            }
            out.push_str(&format!("{},{},{}", rel, r.person_id, r.camera_id));
            if with_split {
                let tag = r
                    .split
                    .map(|t| serde_json::to_value(t).map(|v| v.as_str().unwrap_or("").to_string()))
                    .transpose()?
                    .unwrap_or_default();
                out.push(',');
                out.push_str(&tag);
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Parses a manifest CSV (`path,person_id,camera_id[,split]`).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_slice());
    let headers = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 3
        || cols[..3] != ["path", "person_id", "camera_id"]
        || cols.len() > 4
        || (cols.len() == 4 && cols[3] != "split")
    {
        return Err(parse_err(
            path,
            1,
            format!(
                "expected header path,person_id,camera_id[,split], got {}",
                cols.join(",")
            ),
        ));
    }
    let mut records = Vec::new();
    for row in rdr.deserialize::<ManifestRecord>() {
        let rec = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        records.push(rec);
    }
    if records.is_empty() {
        warn!("manifest {} has no records", path.display());
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::new(records, base)
}

fn parse_err(path: &Path, line: u64, msg: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    }
}

// ---------------------------------------------------------------------------
// Image codecs.

const RAW_MAGIC: &[u8; 4] = b"MRTD";

pub fn encode_raw_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw_tensor(bytes: &[u8]) -> Result<Tensor> {
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(*pos..*pos + n)
            .ok_or_else(|| Error::Decode(format!("raw tensor truncated at byte {}", *pos)))?;
        *pos += n;
        Ok(s)
    };
    let mut pos = 0;
    if take(&mut pos, 4)? != RAW_MAGIC {
        return Err(Error::Decode("bad raw tensor magic".into()));
    }
    let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
    }
    let n: usize = shape.iter().product();
    let payload = take(&mut pos, 8 * n)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if pos != bytes.len() {
        return Err(Error::Decode(format!(
            "{} trailing bytes after raw tensor",
            bytes.len() - pos
        )));
    }
    Tensor::new(&shape, data).map_err(|e| Error::Decode(e.to_string()))
}

pub fn write_raw_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_raw_tensor(t)).map_err(|e| Error::io(path, e))
}

/// Encodes a `[3×H×W]` tensor with values in [0, 1] as binary PPM.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    if img.rank() != 3 || img.shape()[0] != 3 {
        return Err(dim_err!("PPM needs [3×H×W], got {:?}", img.shape()));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[(c * h + y) * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Decode("bad PPM magic (expected P6)".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Decode("PPM header truncated".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Decode("PPM header field is not a number".into()));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Decode("PPM header number out of range".into()))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Decode(format!("PPM maxval {maxval} unsupported (need 255)")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Decode("PPM with zero extent".into()));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Decode("PPM header not terminated".into()));
    }
    pos += 1;
    let need = 3 * w * h;
    let px = bytes.get(pos..pos + need).ok_or_else(|| {
        Error::Decode(format!(
            "PPM truncated: need {need} pixel bytes, have {}",
            bytes.len() - pos
        ))
    })?;
    let mut data = vec![0.0; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = f64::from(px[(y * w + x) * 3 + c]) / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Reads a PPM or raw-tensor image into a `[3×H×W]` tensor.
pub fn decode_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let t = if bytes.starts_with(RAW_MAGIC) {
        decode_raw_tensor(&bytes)?
    } else {
        decode_ppm(&bytes)?
    };
    if t.rank() != 3 || t.shape()[0] != 3 {
        return Err(Error::Decode(format!(
            "{}: expected a [3×H×W] image, got {:?}",
            path.display(),
            t.shape()
        )));
    }
    Ok(t)
}

/// Bilinear resampling with half-pixel centers (corners not aligned).
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if img.rank() != 3 || out_h == 0 || out_w == 0 {
        return Err(dim_err!("resize {:?} to {}×{}", img.shape(), out_h, out_w));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let d = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Per-channel affine pixel normalization applied after scaling to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for PixelNorm {
    fn default() -> Self {
        PixelNorm {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Decode → resize → range check → normalize.
pub fn load_image(path: &Path, h: usize, w: usize, norm: &PixelNorm) -> Result<Tensor> {
    let img = resize_bilinear(&decode_image(path)?, h, w)?;
    if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Decode(format!(
            "{}: pixel values outside [0, 1]",
            path.display()
        )));
    }
    if *norm == PixelNorm::default() {
        return Ok(img);
    }
    let plane = h * w;
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - norm.mean[i / plane]) / norm.std[i / plane])
        .collect();
    Tensor::new(&[3, h, w], data)
}

/// Lazily decoded, cached images of a manifest at a fixed size.
pub struct ImageSet {
    manifest: DatasetManifest,
    h: usize,
    w: usize,
    norm: PixelNorm,
    cache: Vec<OnceLock<Tensor>>,
}

impl ImageSet {
    pub fn new(manifest: DatasetManifest, h: usize, w: usize, norm: PixelNorm) -> Self {
        let cache = (0..manifest.len()).map(|_| OnceLock::new()).collect();
        ImageSet {
            manifest,
            h,
            w,
            norm,
            cache,
        }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<Tensor> {
        if let Some(t) = self.cache[i].get() {
            return Ok(t.clone());
        }
        let rec = &self.manifest.records[i];
        let t = load_image(&self.manifest.resolve(rec), self.h, self.w, &self.norm)?;
        Ok(self.cache[i].get_or_init(|| t).clone())
    }

    /// Decodes every image up front (in parallel).
    pub fn preload(&self) -> Result<()> {
        (0..self.len())
            .into_par_iter()
            .try_for_each(|i| self.get(i).map(|_| ()))
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let images = indices.iter().map(|&i| self.get(i)).collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            indices: indices.to_vec(),
            images,
            person_ids: indices.iter().map(|&i| self.manifest.records[i].person_id).collect(),
            camera_ids: indices.iter().map(|&i| self.manifest.records[i].camera_id).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Vec<Tensor>,
    pub person_ids: Vec<i64>,
    pub camera_ids: Vec<u32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn degenerate(ids: &[i64]) -> bool {
    let distinct: HashSet<i64> = ids.iter().copied().collect();
    distinct.len() == 1 || distinct.len() == ids.len()
}

/// Shuffles record indices for `epoch` and cuts them into consecutive
/// batches. A batch whose ids are all equal or all distinct is repaired by
/// swapping members with other positions of the permutation; batches that
/// cannot be repaired (or have fewer than two members) are dropped.
pub fn make_epoch_batches(person_ids: &[i64], batch: usize, stream: RngStream, epoch: u64) -> Result<Vec<Vec<usize>>> {
    let n = person_ids.len();
    if n < 2 {
        return Err(contract_err!("need at least 2 records to batch, got {n}"));
    }
    if batch < 2 {
        return Err(contract_err!("batch size must be at least 2, got {batch}"));
    }
    let s = stream.split(epoch);
    let mut rng = s.rng();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);

    let bounds: Vec<(usize, usize)> = (0..n.div_ceil(batch))
        .map(|b| (b * batch, ((b + 1) * batch).min(n)))
        .collect();
    let ids_of =
        |perm: &[usize], (a, b): (usize, usize)| -> Vec<i64> { perm[a..b].iter().map(|&i| person_ids[i]).collect() };
    let mut keep = vec![true; bounds.len()];
    for (bi, &(a, b)) in bounds.iter().enumerate() {
        if b - a < 2 {
            keep[bi] = false;
            continue;
        }
        let mut tries = 0;
        while degenerate(&ids_of(&perm, (a, b))) && tries < 256 {
            tries += 1;
            let inside = rng.random_range(a..b);
            let outside = rng.random_range(0..n - (b - a));
            let outside = if outside >= a { outside + (b - a) } else { outside };
            let other = bounds.iter().position(|&(x, y)| (x..y).contains(&outside)).unwrap();
            let other_was_ok = !degenerate(&ids_of(&perm, bounds[other]));
            perm.swap(inside, outside);
            if other_was_ok && degenerate(&ids_of(&perm, bounds[other])) {
                perm.swap(inside, outside);
            }
        }
        if degenerate(&ids_of(&perm, (a, b))) {
            warn!("epoch {epoch}: dropping batch {bi}, no usable pairs");
            keep[bi] = false;
        }
    }
    Ok(bounds
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(&(a, b), _)| perm[a..b].to_vec())
        .collect())
}

// ---------------------------------------------------------------------------
// Synthetic identities.

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_ids: usize,
    pub per_id: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Maximum horizontal shift in pixels.
    pub jitter: usize,
    /// Maximum absolute brightness offset.
    pub brightness: f64,
    /// Whether images get a random background color.
    pub clutter: bool,
    pub first_id: i64,
}

impl SynthConfig {
    pub fn new(n_ids: usize, per_id: usize, noise: f64) -> Self {
        SynthConfig {
            n_ids,
            per_id,
            noise,
            jitter: 4,
            brightness: 0.15,
            clutter: true,
            first_id: 0,
        }
    }

    /// All view variation switched off.
    pub fn canonical(n_ids: usize, per_id: usize) -> Self {
        SynthConfig {
            noise: 0.0,
            jitter: 0,
            brightness: 0.0,
            clutter: false,
            ..SynthConfig::new(n_ids, per_id, 0.0)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthReport {
    pub manifest_path: PathBuf,
    pub manifest: DatasetManifest,
    /// Mean RMS pixel distance between images of the same identity (first 16
    /// identities).
    pub within_distance: f64,
    /// Mean RMS pixel distance between images of different identities.
    pub between_distance: f64,
}

pub const SYNTH_H: usize = 160;
pub const SYNTH_W: usize = 60;

const PALETTE: [[f64; 3]; 10] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.65, 0.20],
    [0.15, 0.25, 0.80],
    [0.90, 0.80, 0.15],
    [0.95, 0.95, 0.95],
    [0.10, 0.10, 0.10],
    [0.55, 0.25, 0.65],
    [0.95, 0.55, 0.10],
    [0.45, 0.30, 0.15],
    [0.50, 0.50, 0.55],
];

/// Identity appearance: colors and patterns of head, torso and legs.
#[derive(Debug, Clone)]
struct Person {
    hair: [f64; 3],
    shirt: [f64; 3],
    stripe: [f64; 3],
    stripe_period: usize,
    pants: [f64; 3],
    badge: [f64; 3],
    badge_row: usize,
    badge_left: bool,
    shoes: [f64; 3],
    width: usize,
}

impl Person {
    fn sample(rng: &mut impl Rng) -> Self {
        let mut pick = || PALETTE[rng.random_range(0..PALETTE.len())];
        let (hair, shirt, stripe, pants, badge, shoes) = (pick(), pick(), pick(), pick(), pick(), pick());
        Person {
            hair,
            shirt,
            stripe,
            stripe_period: [0, 6, 10, 14][rng.random_range(0..4)],
            pants,
            badge,
            badge_row: rng.random_range(40..80),
            badge_left: rng.random_bool(0.5),
            shoes,
            width: rng.random_range(22..32),
        }
    }

    /// Pixel color at (row, col) relative to a body centered at `cx`, or None
    /// for background.
    fn color(&self, y: usize, x: isize, cx: isize) -> Option<[f64; 3]> {
        let dx = x - cx;
        let half = self.width as isize / 2;
        match y {
            6..=13 if dx.abs() <= 6 => Some(self.hair),
            14..=29 if dx.abs() <= 6 => Some([0.90, 0.72, 0.60]),
            30..=89 if dx.abs() <= half => {
                let badge_x = if self.badge_left { -half / 2 } else { half / 2 };
                if (y as isize - self.badge_row as isize).abs() <= 4 && (dx - badge_x).abs() <= 3 {
                    Some(self.badge)
                } else if self.stripe_period > 0 && (y / (self.stripe_period / 2)) % 2 == 1 {
                    Some(self.stripe)
                } else {
                    Some(self.shirt)
                }
            }
            90..=149 if dx.abs() <= half - 2 && dx.abs() >= 2 => Some(self.pants),
            150..=157 if dx.abs() < half && dx.abs() >= 2 => Some(self.shoes),
            _ => None,
        }
    }
}

/// Writes `n_ids × per_id` PPM images plus `manifest.csv` under `out_dir`.
/// Cameras alternate 0/1 within each identity; camera 1 adds a color cast.
pub fn synth_dataset(out_dir: &Path, cfg: &SynthConfig, stream: RngStream) -> Result<SynthReport> {
    if cfg.n_ids < 2 || cfg.per_id < 2 {
        return Err(contract_err!(
            "synthetic dataset needs ≥2 identities and ≥2 images each, got {}×{}",
            cfg.n_ids,
            cfg.per_id
        ));
    }
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| contract_err!("noise: {e}"))?;

    let mut records = Vec::new();
    let mut images: Vec<(i64, Vec<f64>)> = Vec::new();
    for k in 0..cfg.n_ids {
        let pid = cfg.first_id + k as i64;
        let id_stream = stream.named("identity").split(pid as u64);
        let person = Person::sample(&mut id_stream.rng());
        for v in 0..cfg.per_id {
            let camera = (v % 2) as u32;
            let mut rng = id_stream.split(1 + v as u64).rng();
            let shift = if cfg.jitter > 0 {
                rng.random_range(-(cfg.jitter as i64)..=cfg.jitter as i64) as isize
            } else {
                0
            };
            let bright = if cfg.brightness > 0.0 {
                rng.random_range(-cfg.brightness..=cfg.brightness)
            } else {
                0.0
            };
            let background = if cfg.clutter {
                [0, 1, 2].map(|_| rng.random_range(0.2..0.8))
            } else {
                [0.5; 3]
            };
            let cast = if camera == 1 { [1.0, 0.92, 1.08] } else { [1.0; 3] };
            let cx = (SYNTH_W / 2) as isize + shift;
            let mut data = vec![0.0; 3 * SYNTH_H * SYNTH_W];
            for y in 0..SYNTH_H {
                for x in 0..SYNTH_W {
                    let base = person.color(y, x as isize, cx).unwrap_or(background);
                    for c in 0..3 {
                        let n = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        let v = (base[c] * cast[c] + bright + n).clamp(0.0, 1.0);
                        data[(c * SYNTH_H + y) * SYNTH_W + x] = v;
                    }
                }
            }
            let img = Tensor::new(&[3, SYNTH_H, SYNTH_W], data)?;
            let bytes = encode_ppm(&img)?;
            let name = format!("id{pid:05}_{v:03}.ppm");
            let path = img_dir.join(&name);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
            // Distances are measured on the quantized pixels actually written.
            let q = decode_ppm(&bytes)?;
            images.push((pid, q.to_vec()));
            records.push(ManifestRecord {
                path: format!("images/{name}"),
                person_id: pid,
                camera_id: camera,
                split: None,
            });
        }
    }

    // Distances are averaged over the first few identities only; all pairs
    // of a large set would cost far more than generating it.
    images.truncate(16 * cfg.per_id);
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            let d = rms_distance(&images[i].1, &images[j].1);
            if images[i].0 == images[j].0 {
                within += d;
                nw += 1;
            } else {
                between += d;
                nb += 1;
            }
        }
    }
    let manifest = DatasetManifest::new(records, out_dir)?;
    let manifest_path = out_dir.join("manifest.csv");
    manifest.save(&manifest_path)?;
    Ok(SynthReport {
        manifest_path,
        manifest,
        within_distance: within / nw as f64,
        between_distance: between / nb as f64,
    })
}

fn rms_distance(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}
