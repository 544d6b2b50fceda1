//! Wall-time and analytic-FLOP comparison of a selective scan against a
//! causal self-attention layer of the same width.
//!
//! Both kernels run in `f32` on one thread. FLOP counts are closed form
//! (exp, division and comparison each count as one operation):
//!
//! * scan: `SCAN_FLOPS_PER_STATE * L * n * d`. Per time step, channel and
//!   state: one exp, the input gain (sub, div), `a_bar h` (mul), `gain b x`
//!   (two mul), the update add, and the `c h` multiply-accumulate (two).
//! * attention: `ATTN_QUADRATIC * L^2 * d + ATTN_PROJECTION * L * d^2`. The
//!   causal score and value products touch `L^2 / 2` pairs at `2d` each; the
//!   q, k, v and output projections cost `2 d^2` per row each.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCAN_FLOPS_PER_STATE: u64 = 9;
pub const ATTN_QUADRATIC: u64 = 2;
pub const ATTN_PROJECTION: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Scan,
    Attention,
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelKind::Scan => "scan",
            KernelKind::Attention => "attention",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    /// Channel width shared by both kernels.
    pub width: usize,
    pub d_state: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![1024, 2048, 4096, 8192],
            repeats: 3,
            warmup: 3,
            width: 64,
            d_state: 16,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return Err(Error::invalid(
                "bench lengths must be non-empty and positive",
            ));
        }
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("bench lengths must be strictly ascending"));
        }
        if self.repeats < 3 {
            return Err(Error::invalid("bench needs at least 3 repeats"));
        }
        if self.width == 0 || self.d_state == 0 {
            return Err(Error::invalid("bench width and d_state must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub kind: KernelKind,
    pub len: usize,
    /// Median wall time of one forward pass.
    pub seconds: f64,
    pub flops: u64,
    /// Estimate of the live buffers during one pass.
    pub peak_bytes: u64,
}

pub fn scan_flops(len: usize, d_state: usize, width: usize) -> u64 {
    SCAN_FLOPS_PER_STATE * (len * d_state * width) as u64
}

pub fn attention_flops(len: usize, width: usize) -> u64 {
    let (l, d) = (len as u64, width as u64);
    ATTN_QUADRATIC * l * l * d + ATTN_PROJECTION * l * d * d
}

const F32: u64 = std::mem::size_of::<f32>() as u64;

pub fn scan_peak_bytes(len: usize, d_state: usize, width: usize) -> u64 {
    let (l, n, d) = (len as u64, d_state as u64, width as u64);
    // x, delta, y; B and C; A and the running state
    F32 * (3 * l * d + 2 * l * n + 2 * d * n)
}

pub fn attention_peak_bytes(len: usize, width: usize) -> u64 {
    let (l, d) = (len as u64, width as u64);
    // x, q, k, v, context, output; one score row; four weight matrices
    F32 * (6 * l * d + l + 4 * d * d)
}

/// Inputs for the selective scan: `x, delta: L x d`, `a: d x n`, `b, c: L x n`.
pub struct ScanInputs {
    pub len: usize,
    pub width: usize,
    pub d_state: usize,
    x: Vec<f32>,
    delta: Vec<f32>,
    a: Vec<f32>,
    b: Vec<f32>,
    c: Vec<f32>,
}

impl ScanInputs {
    pub fn random(len: usize, width: usize, d_state: usize, rng: &mut impl Rng) -> Self {
        let mut v = |k: usize, lo: f32, hi: f32| {
            (0..k).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>()
        };
        Self {
            len,
            width,
            d_state,
            x: v(len * width, -1.0, 1.0),
            delta: v(len * width, 1e-3, 0.1),
            a: v(width * d_state, -4.0, -0.5),
            b: v(len * d_state, -1.0, 1.0),
            c: v(len * d_state, -1.0, 1.0),
        }
    }

    /// Selective scan with ZOH steps; returns `y: L x d`.
    pub fn run(&self) -> Vec<f32> {
        let (d, n) = (self.width, self.d_state);
        let mut h = vec![0.0f32; d * n];
        let mut y = vec![0.0f32; self.len * d];
        for t in 0..self.len {
            let bt = &self.b[t * n..(t + 1) * n];
            let ct = &self.c[t * n..(t + 1) * n];
            for ch in 0..d {
                let dt = self.delta[t * d + ch];
                let xt = self.x[t * d + ch];
                let ad = &self.a[ch * n..(ch + 1) * n];
                let hd = &mut h[ch * n..(ch + 1) * n];
                let mut acc = 0.0f32;
                for s in 0..n {
                    let ab = (dt * ad[s]).exp();
                    let gain = (ab - 1.0) / ad[s];
                    let hv = ab * hd[s] + gain * bt[s] * xt;
                    hd[s] = hv;
                    acc += ct[s] * hv;
                }
                y[t * d + ch] = acc;
            }
        }
        y
    }
}

/// Single-head causal self-attention with q/k/v/output projections,
/// streaming one score row at a time.
pub struct AttentionInputs {
    pub len: usize,
    pub width: usize,
    x: Vec<f32>,
    /// `wq, wk, wv, wo`, each `d x d`.
    weights: [Vec<f32>; 4],
}

fn project(x: &[f32], w: &[f32], d: usize) -> Vec<f32> {
    let rows = x.len() / d;
    let mut out = vec![0.0f32; rows * d];
    for r in 0..rows {
        let o = &mut out[r * d..(r + 1) * d];
        for (i, &xi) in x[r * d..(r + 1) * d].iter().enumerate() {
            for (ov, &wv) in o.iter_mut().zip(&w[i * d..(i + 1) * d]) {
                *ov += xi * wv;
            }
        }
    }
    out
}

impl AttentionInputs {
    pub fn random(len: usize, width: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (width as f32).sqrt();
        let mut m = |k: usize, s: f32| {
            (0..k)
                .map(|_| rng.random_range(-s..s))
                .collect::<Vec<f32>>()
        };
        let x = m(len * width, 1.0);
        let weights = [
            m(width * width, std),
            m(width * width, std),
            m(width * width, std),
            m(width * width, std),
        ];
        Self {
            len,
            width,
            x,
            weights,
        }
    }

    pub fn run(&self) -> Vec<f32> {
        let d = self.width;
        let q = project(&self.x, &self.weights[0], d);
        let k = project(&self.x, &self.weights[1], d);
        let v = project(&self.x, &self.weights[2], d);
        let scale = 1.0 / (d as f32).sqrt();
        let mut ctx = vec![0.0f32; self.len * d];
        let mut scores = vec![0.0f32; self.len];
        for i in 0..self.len {
            let qi = &q[i * d..(i + 1) * d];
            let mut max = f32::NEG_INFINITY;
            for j in 0..=i {
                let s = qi
                    .iter()
                    .zip(&k[j * d..(j + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum::<f32>()
                    * scale;
                scores[j] = s;
                max = max.max(s);
            }
            let mut total = 0.0f32;
            for s in &mut scores[..=i] {
                *s = (*s - max).exp();
                total += *s;
            }
            let out = &mut ctx[i * d..(i + 1) * d];
            for j in 0..=i {
                let p = scores[j] / total;
                for (o, &vv) in out.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                    *o += p * vv;
                }
            }
        }
        project(&ctx, &self.weights[3], d)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

fn time_median(warmup: usize, repeats: usize, mut f: impl FnMut() -> Vec<f32>) -> f64 {
    for _ in 0..warmup {
        std::hint::black_box(f());
    }
    let times = (0..repeats)
        .map(|_| {
            let t0 = Instant::now();
            std::hint::black_box(f());
            t0.elapsed().as_secs_f64().max(f64::MIN_POSITIVE)
        })
        .collect();
    median(times)
}

/// One record per kernel and length, scan first, in ascending length order.
pub fn bench_scan_vs_attention(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(2 * cfg.lengths.len());
    for &len in &cfg.lengths {
        let scan = ScanInputs::random(len, cfg.width, cfg.d_state, &mut rng);
        records.push(BenchRecord {
            kind: KernelKind::Scan,
            len,
            seconds: time_median(cfg.warmup, cfg.repeats, || scan.run()),
            flops: scan_flops(len, cfg.d_state, cfg.width),
            peak_bytes: scan_peak_bytes(len, cfg.d_state, cfg.width),
        });
        let attn = AttentionInputs::random(len, cfg.width, &mut rng);
        records.push(BenchRecord {
            kind: KernelKind::Attention,
            len,
            seconds: time_median(cfg.warmup, cfg.repeats, || attn.run()),
            flops: attention_flops(len, cfg.width),
            peak_bytes: attention_peak_bytes(len, cfg.width),
        });
    }
    Ok(records)
}

/// Ratio `t(L_{i+1}) / t(L_i)` for consecutive lengths of one kernel.
pub fn doubling_ratios(records: &[BenchRecord], kind: KernelKind) -> Vec<(usize, f64)> {
    let rows: Vec<&BenchRecord> = records.iter().filter(|r| r.kind == kind).collect();
    rows.windows(2)
        .map(|w| (w[1].len, w[1].seconds / w[0].seconds))
        .collect()
}

pub fn summary_table(records: &[BenchRecord]) -> String {
    let mut out = format!(
        "{:<10} {:>7} {:>12} {:>8} {:>16} {:>12}\n",
        "kernel", "L", "seconds", "ratio", "flops", "peak_bytes"
    );
    for kind in [KernelKind::Scan, KernelKind::Attention] {
        let mut prev: Option<f64> = None;
        for r in records.iter().filter(|r| r.kind == kind) {
            let ratio = prev.map_or("-".to_string(), |p| format!("{:.2}", r.seconds / p));
            let _ = writeln!(
                out,
                "{:<10} {:>7} {:>12.6} {:>8} {:>16} {:>12}",
                r.kind.to_string(),
                r.len,
                r.seconds,
                ratio,
                r.flops,
                r.peak_bytes
            );
            prev = Some(r.seconds);
        }
    }
    out
}

pub fn save_records(records: &[BenchRecord], path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(records)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}
