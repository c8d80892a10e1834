//! Micro-benchmarks of the hot kernels. Every case first checks the
//! optimized kernel against a direct-loop reference; timings are only
//! reported for cases that pass.

use std::time::Instant;

use serde::Serialize;

use crate::bilinear::{bilinear_outer, region_pool, RegionGrid};
use crate::error::Result;
use crate::gradcheck::random_uniform;
use crate::nn::conv2d_forward;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const GATE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        h: usize,
        w: usize,
        k: usize,
    },
    BilinearOuter {
        m: usize,
        n: usize,
        h: usize,
        w: usize,
    },
    RegionPool {
        k: usize,
        h: usize,
        w: usize,
        cell: usize,
    },
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Conv2d { .. } => "conv2d",
            Kernel::BilinearOuter { .. } => "bilinear_outer",
            Kernel::RegionPool { .. } => "region_pool",
        }
    }

    pub fn shape(&self) -> String {
        match self {
            Kernel::Conv2d {
                in_channels,
                out_channels,
                h,
                w,
                k,
            } => format!("{in_channels}x{h}x{w}/k{k}/o{out_channels}"),
            Kernel::BilinearOuter { m, n, h, w } => format!("{m}x{n}x{h}x{w}"),
            Kernel::RegionPool { k, h, w, cell } => format!("{k}x{h}x{w}/cell{cell}"),
        }
    }

    /// Scalar multiplications per call.
    pub fn multiplies(&self) -> u64 {
        let u = |v: usize| v as u64;
        match *self {
            Kernel::Conv2d {
                in_channels,
                out_channels,
                h,
                w,
                k,
            } => u(out_channels) * u(in_channels) * u(k * k) * u(h + 1 - k) * u(w + 1 - k),
            Kernel::BilinearOuter { m, n, h, w } => u(m * n * h * w),
            Kernel::RegionPool { .. } => 0,
        }
    }
}

/// Kernels at the default network geometry.
pub fn default_suite() -> Vec<Kernel> {
    vec![
        Kernel::Conv2d {
            in_channels: 3,
            out_channels: 32,
            h: 72,
            w: 60,
            k: 7,
        },
        Kernel::Conv2d {
            in_channels: 32,
            out_channels: 32,
            h: 33,
            w: 27,
            k: 5,
        },
        Kernel::BilinearOuter {
            m: 32,
            n: 32,
            h: 14,
            w: 11,
        },
        Kernel::RegionPool {
            k: 1024,
            h: 14,
            w: 11,
            cell: 5,
        },
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub kernel: String,
    pub shape: String,
    pub reps: usize,
    pub multiplies: u64,
    pub max_abs_diff: f64,
    /// None when the correctness gate failed.
    pub timing: Option<(f64, f64)>,
    pub checksum: f64,
    pub error: Option<String>,
}

impl BenchResult {
    pub fn passed(&self) -> bool {
        self.error.is_none()
    }
}

pub fn naive_conv2d(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (h + 1 - kh, wd + 1 - kw);
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for y in 0..oh {
            for xo in 0..ow {
                let mut s = b.data()[oc];
                for ic in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            s += w.data()[((oc * c + ic) * kh + dy) * kw + dx]
                                * x.data()[(ic * h + y + dy) * wd + xo + dx];
                        }
                    }
                }
                out[(oc * oh + y) * ow + xo] = s;
            }
        }
    }
    Tensor::new(&[o, oh, ow], out).expect("finite")
}

pub fn naive_bilinear_outer(fa: &Tensor, fb: &Tensor) -> Tensor {
    let (m, h, w) = (fa.shape()[0], fa.shape()[1], fa.shape()[2]);
    let n = fb.shape()[0];
    let mut out = vec![0.0; m * n * h * w];
    for i in 0..m {
        for j in 0..n {
            for p in 0..h * w {
                out[(i * n + j) * h * w + p] = fa.data()[i * h * w + p] * fb.data()[j * h * w + p];
            }
        }
    }
    Tensor::new(&[m * n, h, w], out).expect("finite")
}

pub fn naive_region_pool(bmap: &Tensor, grid: &RegionGrid) -> Tensor {
    let (k, h, w) = (bmap.shape()[0], bmap.shape()[1], bmap.shape()[2]);
    let mut out = Vec::with_capacity(grid.len() * k);
    for region in grid.regions() {
        for c in 0..k {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    if region.contains(y, x) {
                        s += bmap.data()[(c * h + y) * w + x];
                    }
                }
            }
            out.push(s);
        }
    }
    Tensor::new(&[grid.len(), k], out).expect("finite")
}

type Runner = Box<dyn Fn() -> Result<Tensor>>;

fn prepare(kernel: &Kernel, stream: RngStream) -> Result<(Runner, Tensor)> {
    let rand = |shape: &[usize], i: u64| random_uniform(shape, -1.0, 1.0, stream.split(i));
    Ok(match *kernel {
        Kernel::Conv2d {
            in_channels,
            out_channels,
            h,
            w,
            k,
        } => {
            let x = rand(&[in_channels, h, w], 0)?;
            let wt = rand(&[out_channels, in_channels, k, k], 1)?;
            let b = rand(&[out_channels], 2)?;
            let reference = naive_conv2d(&x, &wt, &b);
            (Box::new(move || conv2d_forward(&x, &wt, &b)), reference)
        }
        Kernel::BilinearOuter { m, n, h, w } => {
            let fa = rand(&[m, h, w], 0)?;
            let fb = rand(&[n, h, w], 1)?;
            let reference = naive_bilinear_outer(&fa, &fb);
            (Box::new(move || bilinear_outer(&fa, &fb)), reference)
        }
        Kernel::RegionPool { k, h, w, cell } => {
            let bmap = rand(&[k, h, w], 0)?;
            let grid = RegionGrid::new(h, w, cell, cell)?;
            let reference = naive_region_pool(&bmap, &grid);
            (Box::new(move || region_pool(&bmap, &grid)), reference)
        }
    })
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Correctness gate, then `warmup` untimed and `reps` timed calls.
pub fn run_case(kernel: &Kernel, reps: usize, warmup: usize, stream: RngStream) -> Result<BenchResult> {
    let (run, reference) = prepare(kernel, stream)?;
    let out = run()?;
    let diff = if out.shape() == reference.shape() {
        out.max_abs_diff(&reference)?
    } else {
        f64::INFINITY
    };
    let mut result = BenchResult {
        kernel: kernel.name().into(),
        shape: kernel.shape(),
        reps,
        multiplies: kernel.multiplies(),
        max_abs_diff: diff,
        timing: None,
        checksum: out.data().iter().sum(),
        error: None,
    };
    if diff.is_nan() || diff > GATE {
        result.error = Some(format!("optimized output differs from reference by {diff:e}"));
        return Ok(result);
    }
    for _ in 0..warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        std::hint::black_box(run()?);
        times.push(t.elapsed().as_secs_f64() * 1e6);
    }
    times.sort_by(f64::total_cmp);
    result.timing = Some((percentile(&times, 0.5), percentile(&times, 0.9)));
    Ok(result)
}

pub fn run_bench(suite: &[Kernel], reps: usize, warmup: usize, seed: u64) -> Result<Vec<BenchResult>> {
    let stream = RngStream::new(seed).named("bench");
    suite
        .iter()
        .enumerate()
        .map(|(i, k)| run_case(k, reps, warmup, stream.split(i as u64)))
        .collect()
}

pub fn machine_info() -> String {
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!(
        "os={} arch={} cpus={} threads={}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        cpus,
        rayon::current_num_threads()
    )
}

/// CSV report: `kernel,shape,reps,median_us,p90_us,checksum`, preceded by a
/// `#` header line with machine info. Failed cases carry empty timings.
pub fn report_csv(results: &[BenchResult]) -> String {
    let mut s = format!("# {}\nkernel,shape,reps,median_us,p90_us,checksum\n", machine_info());
    for r in results {
        let (med, p90) = match r.timing {
            Some((m, p)) => (format!("{m:.3}"), format!("{p:.3}")),
            None => (String::new(), String::new()),
        };
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.kernel, r.shape, r.reps, med, p90, r.checksum
        ));
    }
    s
}
