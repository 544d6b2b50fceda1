//! Oracles and helpers shared by the integration tests.
#![allow(dead_code)]

use ctxreport_core::autograd::Var;
use ctxreport_core::params::{Ctx, GradStore, ParamStore};
use ctxreport_core::ssm::{gradient_check, GradCheckReport};
use ctxreport_core::Result;

/// Dense `n x n` times `n x m`, plain loops.
pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = b[0].len();
    a.iter()
        .map(|row| {
            (0..m)
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

/// ZOH by truncated power series:
/// `A_bar = sum_k (dA)^k / k!`, `B_bar = sum_k d^(k+1) A^k / (k+1)! B`.
pub fn zoh_series(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    delta: f64,
    terms: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = a.len();
    let ident: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    let mut a_bar = ident.clone();
    let mut gain = ident
        .iter()
        .map(|r| r.iter().map(|v| v * delta).collect())
        .collect::<Vec<Vec<f64>>>();
    // power = A^k, coeff tracks delta^k / k!
    let mut power = ident;
    let mut fact = 1.0;
    for k in 1..terms {
        power = matmul(&power, a);
        fact *= k as f64;
        let c_a = delta.powi(k as i32) / fact;
        let c_g = delta.powi(k as i32 + 1) / (fact * (k + 1) as f64);
        for i in 0..n {
            for j in 0..n {
                a_bar[i][j] += c_a * power[i][j];
                gain[i][j] += c_g * power[i][j];
            }
        }
    }
    (a_bar, matmul(&gain, b))
}

/// `max |x - y| / max(max |y|, 1e-30)`, the normwise relative error of `x` against `y`.
pub fn rel_err(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Gradient check of `build` wrt every parameter under `prefix` in `store`.
pub fn check_store(
    store: &ParamStore,
    prefix: &str,
    build: impl Fn(&mut Ctx) -> Result<Var>,
    epsilon: f64,
) -> GradCheckReport {
    let point = store.flatten(prefix);
    let f = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut s = store.clone();
        s.unflatten(prefix, p)?;
        let mut ctx = Ctx::new(&s);
        let loss = build(&mut ctx)?;
        let grads = ctx.g.backward(loss)?;
        let mut gs = GradStore::new();
        ctx.collect_grads(&grads, &mut gs);
        let value = ctx.g.value(loss).data()[0];
        Ok((value, gs.flatten_like(&s, prefix)))
    };
    gradient_check(f, &point, epsilon).expect("gradient check runs")
}
