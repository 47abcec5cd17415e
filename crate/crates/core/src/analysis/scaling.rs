use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::flops::{flops_cnn, flops_mamba, flops_transformer, FlopParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pointcloud::morton_encode;
use crate::sparseconv::{build_kernel_map, KernelMap};
use crate::ssm::{scan_forward, ScanOperands};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalingArch {
    Mamba,
    Attention,
    SparseConv,
}

impl ScalingArch {
    pub fn name(self) -> &'static str {
        match self {
            ScalingArch::Mamba => "mamba",
            ScalingArch::Attention => "attention",
            ScalingArch::SparseConv => "sparse_conv",
        }
    }

    /// Exponent of `L` in the analytic cost model.
    pub fn analytic_exponent(self) -> f64 {
        match self {
            ScalingArch::Attention => 2.0,
            _ => 1.0,
        }
    }
}

impl fmt::Display for ScalingArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScalingArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mamba" | "scan" => Ok(ScalingArch::Mamba),
            "attention" | "transformer" => Ok(ScalingArch::Attention),
            "sparse_conv" | "cnn" | "conv" => Ok(ScalingArch::SparseConv),
            _ => Err(Error::Config(format!("unknown architecture `{s}` (mamba|attention|sparse_conv)"))),
        }
    }
}

/// Fixed widths of the synthetic kernels.
#[derive(Clone, Copy, Debug)]
pub struct BenchWidths {
    /// Scan channels and state size.
    pub scan_channels: usize,
    pub scan_state: usize,
    /// Attention head width.
    pub attention_width: usize,
    /// Sparse conv in/out width.
    pub conv_width: usize,
}

impl Default for BenchWidths {
    fn default() -> Self {
        BenchWidths {
            scan_channels: 16,
            scan_state: 16,
            attention_width: 4,
            conv_width: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingPoint {
    pub l: usize,
    pub analytic_ops: u128,
    pub median_seconds: f64,
    pub reps: usize,
}

#[derive(Clone, Debug)]
pub struct ScalingReport {
    pub arch: ScalingArch,
    pub points: Vec<ScalingPoint>,
    pub slope: f64,
    pub warnings: Vec<String>,
}

impl ScalingReport {
    /// `L,analytic_ops,median_seconds,slope` with the fitted slope repeated
    /// on every row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("L,analytic_ops,median_seconds,slope\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{:.9},{:.4}", p.l, p.analytic_ops, p.median_seconds, self.slope);
        }
        out
    }

    /// Whitespace-separated columns with `#` headers, one block per series.
    pub fn to_plot_data(&self) -> String {
        let mut out = format!(
            "# arch {}\n# slope {:.4}\n# analytic_exponent {}\n# columns: L median_seconds analytic_ops\n",
            self.arch,
            self.slope,
            self.arch.analytic_exponent()
        );
        for p in &self.points {
            let _ = writeln!(out, "{} {:.9e} {}", p.l, p.median_seconds, p.analytic_ops);
        }
        out
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Parameter("slope fit needs at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::Numeric("slope fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Parameter("slope fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// Single-head softmax attention that keeps one row of scores at a time.
pub fn streaming_attention(q: &[f32], k: &[f32], v: &[f32], l: usize, c: usize) -> Vec<f32> {
    let scale = 1.0 / (c as f32).sqrt();
    let mut out = vec![0.0f32; l * c];
    let mut scores = vec![0.0f32; l];
    for i in 0..l {
        let qi = &q[i * c..(i + 1) * c];
        let mut m = f32::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &k[j * c..(j + 1) * c];
            *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
            m = m.max(*s);
        }
        let mut total = 0.0f32;
        let oi = &mut out[i * c..(i + 1) * c];
        for (j, &s) in scores.iter().enumerate() {
            let w = (s - m).exp();
            total += w;
            for (o, &vv) in oi.iter_mut().zip(&v[j * c..(j + 1) * c]) {
                *o += w * vv;
            }
        }
        oi.iter_mut().for_each(|o| *o /= total);
    }
    out
}

/// `L` voxels filling a square sheet row by row.
pub fn sheet_voxels(l: usize) -> (Vec<[u32; 3]>, Vec<u64>) {
    let side = (l as f64).sqrt().ceil().max(1.0) as usize;
    let coords: Vec<[u32; 3]> = (0..l).map(|i| [(i % side) as u32, (i / side) as u32, 0]).collect();
    let keys = coords.iter().map(|c| morton_encode(c[0], c[1], c[2]).expect("in range")).collect();
    (coords, keys)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// One benchmark instance; `run` executes the kernel once.
enum Workload {
    Scan {
        u: Vec<f32>,
        delta: Vec<f32>,
        a: Vec<f32>,
        b: Vec<f32>,
        c: Vec<f32>,
        l: usize,
        d: usize,
        n: usize,
    },
    Attention {
        q: Vec<f32>,
        k: Vec<f32>,
        v: Vec<f32>,
        l: usize,
        c: usize,
    },
    Conv {
        coords: Vec<[u32; 3]>,
        keys: Vec<u64>,
        x: Tensor<f32>,
        w: Tensor<f32>,
        b: Tensor<f32>,
    },
}

impl Workload {
    fn new(arch: ScalingArch, l: usize, widths: &BenchWidths, rng: &mut ChaCha8Rng) -> Self {
        match arch {
            ScalingArch::Mamba => {
                let (d, n) = (widths.scan_channels, widths.scan_state);
                Workload::Scan {
                    u: random_vec(rng, l * d, -1.0, 1.0),
                    delta: random_vec(rng, l * d, 1e-3, 1e-1),
                    a: (0..d * n).map(|i| -(((i % n) + 1) as f32)).collect(),
                    b: random_vec(rng, l * n, -1.0, 1.0),
                    c: random_vec(rng, l * n, -1.0, 1.0),
                    l,
                    d,
                    n,
                }
            }
            ScalingArch::Attention => {
                let c = widths.attention_width;
                Workload::Attention {
                    q: random_vec(rng, l * c, -1.0, 1.0),
                    k: random_vec(rng, l * c, -1.0, 1.0),
                    v: random_vec(rng, l * c, -1.0, 1.0),
                    l,
                    c,
                }
            }
            ScalingArch::SparseConv => {
                let c = widths.conv_width;
                let (coords, keys) = sheet_voxels(l);
                let data = |rng: &mut ChaCha8Rng, n| random_vec(rng, n, -1.0, 1.0);
                Workload::Conv {
                    coords,
                    keys,
                    x: Tensor::matrix(l, c, data(rng, l * c)).expect("shape"),
                    w: Tensor::matrix(27 * c, c, data(rng, 27 * c * c)).expect("shape"),
                    b: Tensor::vector(data(rng, c)).expect("shape"),
                }
            }
        }
    }

    fn run(&self) -> Result<f32> {
        Ok(match self {
            Workload::Scan { u, delta, a, b, c, l, d, n } => {
                let y = scan_forward(
                    &ScanOperands {
                        u,
                        delta,
                        a,
                        b,
                        c,
                        d_skip: None,
                        l: *l,
                        d: *d,
                        n: *n,
                        reverse: false,
                    },
                    None,
                )?;
                y[y.len() - 1]
            }
            Workload::Attention { q, k, v, l, c } => streaming_attention(q, k, v, *l, *c)[0],
            Workload::Conv { coords, keys, x, w, b } => {
                let map: KernelMap = build_kernel_map(coords, keys, 3)?;
                crate::sparseconv::conv_forward(x, w, Some(b), &map)?.data()[0]
            }
        })
    }
}

fn analytic_ops(arch: ScalingArch, l: usize, widths: &BenchWidths) -> Result<u128> {
    let l = l as u64;
    match arch {
        ScalingArch::Mamba => flops_mamba(&FlopParams {
            n: widths.scan_state as u64,
            ..FlopParams::new(l, widths.scan_channels as u64)
        }),
        ScalingArch::Attention => flops_transformer(&FlopParams::new(l, widths.attention_width as u64)),
        ScalingArch::SparseConv => flops_cnn(&FlopParams::new(l, widths.conv_width as u64)),
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times `arch` at each length: median over `reps` runs after one warm-up.
/// When the spread of a point exceeds half its median, a warning is
/// recorded and the repetitions are doubled, up to four times `reps`.
pub fn scaling_bench(
    arch: ScalingArch,
    lengths: &[usize],
    reps: usize,
    widths: &BenchWidths,
    seed: u64,
) -> Result<ScalingReport> {
    if lengths.len() < 3 {
        return Err(Error::Parameter("scaling_bench needs at least three lengths".into()));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] == 0 {
        return Err(Error::Parameter("lengths must be positive and strictly increasing".into()));
    }
    let reps = reps.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut warnings = Vec::new();
    for &l in lengths {
        let work = Workload::new(arch, l, widths, &mut rng);
        let mut sink = work.run()?;
        let mut times = Vec::new();
        let mut target = reps;
        loop {
            while times.len() < target {
                let start = Instant::now();
                sink += work.run()?;
                times.push(start.elapsed().as_secs_f64());
            }
            let mut sorted = times.clone();
            let med = median(&mut sorted);
            let spread = sorted[sorted.len() - 1] - sorted[0];
            if spread <= 0.5 * med || target >= 4 * reps {
                if spread > 0.5 * med {
                    warnings.push(format!(
                        "L={l}: spread {spread:.3e}s still exceeds half the median {med:.3e}s after {target} runs"
                    ));
                }
                break;
            }
            warnings.push(format!(
                "L={l}: spread {spread:.3e}s exceeds half the median {med:.3e}s; raising runs to {}",
                target * 2
            ));
            target *= 2;
        }
        std::hint::black_box(sink);
        points.push(ScalingPoint {
            l,
            analytic_ops: analytic_ops(arch, l, widths)?,
            median_seconds: median(&mut times),
            reps: times.len(),
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.l as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.median_seconds.max(1e-12)).collect();
    let slope = fit_loglog_slope(&xs, &ys)?;
    Ok(ScalingReport {
        arch,
        points,
        slope,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_laws() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let quad: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        assert!((fit_loglog_slope(&xs, &quad).unwrap() - 2.0).abs() < 1e-12);
        let lin: Vec<f64> = xs.iter().map(|x| 0.5 * x).collect();
        assert!((fit_loglog_slope(&xs, &lin).unwrap() - 1.0).abs() < 1e-12);
        assert!(fit_loglog_slope(&[1.0], &[1.0]).is_err());
        assert!(fit_loglog_slope(&[1.0, 2.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn streaming_attention_matches_dense_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (l, c) = (7, 3);
        let q = random_vec(&mut rng, l * c, -1.0, 1.0);
        let k = random_vec(&mut rng, l * c, -1.0, 1.0);
        let v = random_vec(&mut rng, l * c, -1.0, 1.0);
        let out = streaming_attention(&q, &k, &v, l, c);
        for i in 0..l {
            let s: Vec<f64> = (0..l)
                .map(|j| (0..c).map(|x| (q[i * c + x] * k[j * c + x]) as f64).sum::<f64>() / (c as f64).sqrt())
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for x in 0..c {
                let want: f64 = (0..l).map(|j| s[j].exp() / z * v[j * c + x] as f64).sum();
                assert!((out[i * c + x] as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sheet_has_requested_size() {
        let (coords, keys) = sheet_voxels(10);
        assert_eq!(coords.len(), 10);
        let mut k = keys.clone();
        k.sort();
        k.dedup();
        assert_eq!(k.len(), 10);
    }

    #[test]
    fn report_columns_match_analytic_counts() {
        let widths = BenchWidths::default();
        for arch in [ScalingArch::Mamba, ScalingArch::Attention, ScalingArch::SparseConv] {
            let report = scaling_bench(arch, &[16, 32, 64], 2, &widths, 1).unwrap();
            for p in &report.points {
                assert_eq!(p.analytic_ops, analytic_ops(arch, p.l, &widths).unwrap());
            }
            assert!(report.slope.is_finite());
            let csv = report.to_csv();
            assert!(csv.starts_with("L,analytic_ops,median_seconds,slope\n"));
            assert_eq!(csv.lines().count(), 4);
            assert!(report.to_plot_data().contains(&format!("# arch {arch}")));
        }
        assert!(scaling_bench(ScalingArch::Mamba, &[16, 8, 32], 1, &widths, 1).is_err());
        assert!(scaling_bench(ScalingArch::Mamba, &[16, 32], 1, &widths, 1).is_err());
    }
}
