//! Multiply-accumulate counting and wall-clock sweeps comparing prototyping
//! attention with vanilla self-attention as the token count grows.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::LinearMap;
use crate::proto::{cross_attention_prototyping, layer_macs, ProtoProjections, TokenGrid};
use crate::tensor::{macs, Tensor};

/// Token count of the first stage for a 960 x 432 image with patch 4.
pub const ANCHOR_TOKENS: usize = 240 * 108;

/// Rows of the score matrix materialised at once by [`SelfAttention`].
pub const SELF_ATTENTION_BLOCK: usize = 256;

/// Closed-form MAC counts for one attention layer over `T` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MacCount {
    /// E and M matmuls over all iterations: `2 N K T D`.
    pub proto_iterative: u64,
    /// Key/value projections once plus the query projection per iteration.
    pub proto_projection: u64,
    /// `Q K^T` and `A V`: `2 T^2 D`.
    pub self_scores: u64,
    /// Query, key and value projections: `3 T D^2`.
    pub self_projection: u64,
}

impl MacCount {
    pub fn proto_total(&self) -> u64 {
        self.proto_iterative + self.proto_projection
    }

    pub fn self_total(&self) -> u64 {
        self.self_scores + self.self_projection
    }
}

pub fn count_macs(t: usize, k: usize, n: usize, d: usize) -> MacCount {
    let (t, k, n, d) = (t as u64, k as u64, n as u64, d as u64);
    let (proto_iterative, proto_projection) = layer_macs(t, k, n, d);
    MacCount {
        proto_iterative,
        proto_projection,
        self_scores: 2 * t * t * d,
        self_projection: 3 * t * d * d,
    }
}

/// Single-head scaled dot-product self-attention over `T x D` tokens,
/// computed in row blocks so the `T x T` score matrix is never held whole.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub query: LinearMap,
    pub key: LinearMap,
    pub value: LinearMap,
}

impl SelfAttention {
    pub fn random(d: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: LinearMap::random(d, d, rng),
            key: LinearMap::random(d, d, rng),
            value: LinearMap::random(d, d, rng),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (t, d) = x.dims2()?;
        let q = self.query.apply(x)?;
        let kt = self.key.apply(x)?.transpose()?;
        let v = self.value.apply(x)?;
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Vec::with_capacity(t * d);
        for start in (0..t).step_by(SELF_ATTENTION_BLOCK) {
            let rows = SELF_ATTENTION_BLOCK.min(t - start);
            let qb = Tensor::new(&[rows, d], q.data()[start * d..(start + rows) * d].to_vec())?;
            let scores = qb.matmul(&kt)?.map("scale", |s| s * scale)?.softmax_axis(1)?;
            out.extend_from_slice(scores.matmul(&v)?.data());
        }
        Tensor::new(&[t, d], out)
    }
}

/// One sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchPoint {
    pub t: usize,
    pub k: usize,
    pub n: usize,
    pub d: usize,
    pub proto_macs: u64,
    pub self_macs: u64,
    /// Median wall time, nanoseconds.
    pub proto_ns: u64,
    pub self_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub tokens: Vec<usize>,
    pub k: usize,
    pub n: usize,
    pub d: usize,
    pub reps: usize,
    pub seed: u64,
    /// Skip timing the self-attention path above this many tokens.
    pub self_attention_limit: Option<usize>,
}

impl SweepConfig {
    /// `T` from 256 to 16384 plus the 240 x 108 anchor grid.
    pub fn default_grid() -> Self {
        Self {
            tokens: vec![256, 1024, 4096, 16384, ANCHOR_TOKENS],
            k: 20,
            n: 3,
            d: 16,
            reps: 5,
            seed: 0,
            self_attention_limit: None,
        }
    }

    /// Small grid for smoke runs; the anchor row is counted but not timed
    /// on the self-attention path.
    pub fn quick() -> Self {
        Self {
            tokens: vec![64, 256, 1024, ANCHOR_TOKENS],
            reps: 5,
            self_attention_limit: Some(1024),
            ..Self::default_grid()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub points: Vec<BenchPoint>,
    pub warnings: Vec<String>,
}

impl Sweep {
    /// Least-squares slope of `ln ns` against `ln T` over points with
    /// `lo <= T <= hi` and a nonzero time.
    pub fn slopes(&self, lo: usize, hi: usize) -> Result<(f64, f64)> {
        let pick = |f: fn(&BenchPoint) -> u64| -> Vec<(f64, f64)> {
            self.points
                .iter()
                .filter(|p| (lo..=hi).contains(&p.t) && f(p) > 0)
                .map(|p| ((p.t as f64).ln(), (f(p) as f64).ln()))
                .collect()
        };
        Ok((loglog_slope(&pick(|p| p.proto_ns))?, loglog_slope(&pick(|p| p.self_ns))?))
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "T,K,N,D,proto_macs,self_macs,proto_ns,self_ns")?;
        for p in &self.points {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                p.t, p.k, p.n, p.d, p.proto_macs, p.self_macs, p.proto_ns, p.self_ns
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// Least-squares slope through `(x, y)` pairs.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Param("a slope needs at least two points".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Param("all points share one abscissa".into()));
    }
    Ok(sxy / sxx)
}

/// Median wall time of `reps` runs of `f`, in nanoseconds.
fn time_median(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<u64> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_nanos() as u64);
    }
    times.sort_unstable();
    Ok(times[times.len() / 2])
}

/// Random `T x D` tokens on a near-square grid.
fn random_tokens(t: usize, d: usize, rng: &mut impl Rng) -> Result<TokenGrid> {
    let data = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let h = (1..=t).take_while(|h| h * h <= t).filter(|h| t % h == 0).last().unwrap_or(1);
    TokenGrid::new(Tensor::new(&[t, d], data)?, h, t / h)
}

/// Measures both paths at one token count on the calling thread.
///
/// The MAC columns are counted by running the instrumented kernels once;
/// an error is returned if either disagrees with [`count_macs`].
/// Self-attention is timed only when `time_self` is set, otherwise its
/// time is reported as 0.
pub fn bench_point(
    t: usize,
    k: usize,
    n: usize,
    d: usize,
    reps: usize,
    seed: u64,
    time_self: bool,
) -> Result<BenchPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = random_tokens(t, d, &mut rng)?;
    let proj = ProtoProjections::random(d, &mut rng);
    let attn = SelfAttention::random(d, &mut rng);
    let expected = count_macs(t, k, n, d);

    let (out, proto_macs) = macs::measure(|| cross_attention_prototyping(&tokens, k, n, &proj));
    out?;
    if proto_macs != expected.proto_total() {
        return Err(Error::Param(format!(
            "prototyping counted {proto_macs} MACs, closed form {}",
            expected.proto_total()
        )));
    }
    let proto_ns = time_median(reps, || cross_attention_prototyping(&tokens, k, n, &proj).map(drop))?;

    let (self_macs, self_ns) = if time_self {
        let (out, counted) = macs::measure(|| attn.apply(&tokens.features));
        out?;
        if counted != expected.self_total() {
            return Err(Error::Param(format!(
                "self-attention counted {counted} MACs, closed form {}",
                expected.self_total()
            )));
        }
        (counted, time_median(reps, || attn.apply(&tokens.features).map(drop))?)
    } else {
        (expected.self_total(), 0)
    };
    Ok(BenchPoint {
        t,
        k,
        n,
        d,
        proto_macs,
        self_macs,
        proto_ns,
        self_ns,
    })
}

/// Runs every grid point in order on the calling thread.
pub fn run_sweep(config: &SweepConfig) -> Result<Sweep> {
    if config.tokens.is_empty() {
        return Err(Error::Param("sweep grid is empty".into()));
    }
    let mut points = Vec::with_capacity(config.tokens.len());
    let mut warnings = Vec::new();
    for &t in &config.tokens {
        let time_self = config.self_attention_limit.is_none_or(|limit| t <= limit);
        let p = bench_point(t, config.k, config.n, config.d, config.reps, config.seed, time_self)?;
        for (name, ns, timed) in [("prototyping", p.proto_ns, true), ("self-attention", p.self_ns, time_self)] {
            if timed && ns < 1_000 {
                warnings.push(format!("T={t}: {name} median {ns} ns is below timer resolution"));
            }
        }
        points.push(p);
    }
    Ok(Sweep { points, warnings })
}
