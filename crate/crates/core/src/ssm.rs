//! Continuous and discrete state-space machinery.
//!
//! The continuous system `h' = A h + B x, y = C h` is discretized with a
//! zero-order hold and evaluated either strictly left-to-right or with a
//! work-efficient prefix scan over affine maps. The selective variant makes
//! `delta`, `B` and `C` functions of the current input and restricts `A` to
//! a diagonal, which is what the vision backbone and decoder use.

use num_traits::Float;

use crate::error::{Error, Result};

/// Below this norm of `delta * A` the input gain is evaluated by its power
/// series instead of `A^{-1}(exp(delta A) - I)`.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-4;

/// Row-major dense matrix used by the reference SSM path.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Float> Mat<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_diagonal(diag: &[T]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn mul(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.rows, "matrix product shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..other.cols {
                    out.data[i * other.cols + j] =
                        out.data[i * other.cols + j] + a * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        (0..self.rows)
            .map(|i| {
                self.data[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .zip(v)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect()
    }

    pub fn scaled(&self, s: T) -> Mat<T> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    fn add(&self, other: &Mat<T>) -> Mat<T> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        }
    }

    /// Max absolute row sum.
    pub fn norm_inf(&self) -> T {
        (0..self.rows)
            .map(|i| {
                self.data[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .fold(T::zero(), |acc, v| acc + v.abs())
            })
            .fold(T::zero(), T::max)
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// State matrix of a continuous SSM.
#[derive(Clone, Debug, PartialEq)]
pub enum StateMatrix<T> {
    /// Diagonal entries only; off-diagonals are zero by construction.
    Diagonal(Vec<T>),
    Dense(Mat<T>),
}

impl<T: Float> StateMatrix<T> {
    pub fn dim(&self) -> usize {
        match self {
            StateMatrix::Diagonal(d) => d.len(),
            StateMatrix::Dense(m) => m.rows,
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self, StateMatrix::Diagonal(_))
    }

    pub fn to_dense(&self) -> Mat<T> {
        match self {
            StateMatrix::Diagonal(d) => Mat::from_diagonal(d),
            StateMatrix::Dense(m) => m.clone(),
        }
    }

    fn apply(&self, h: &[T]) -> Vec<T> {
        match self {
            StateMatrix::Diagonal(d) => d.iter().zip(h).map(|(&a, &x)| a * x).collect(),
            StateMatrix::Dense(m) => m.mul_vec(h),
        }
    }

    fn all_finite(&self) -> bool {
        match self {
            StateMatrix::Diagonal(d) => d.iter().all(|v| v.is_finite()),
            StateMatrix::Dense(m) => m.all_finite(),
        }
    }
}

/// The continuous-time bundle `(A, B, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousSsm<T> {
    a: StateMatrix<T>,
    b: Mat<T>,
    c: Mat<T>,
}

impl<T: Float> ContinuousSsm<T> {
    pub fn new(a: StateMatrix<T>, b: Mat<T>, c: Mat<T>) -> Result<Self> {
        let n = a.dim();
        if let StateMatrix::Dense(m) = &a {
            if m.rows != m.cols {
                return Err(Error::invalid("state matrix must be square"));
            }
        }
        if b.rows != n {
            return Err(Error::invalid(format!(
                "B has {} rows, state dim is {n}",
                b.rows
            )));
        }
        if c.cols != n {
            return Err(Error::invalid(format!(
                "C has {} cols, state dim is {n}",
                c.cols
            )));
        }
        if !(a.all_finite() && b.all_finite() && c.all_finite()) {
            return Err(Error::invalid("SSM parameters must be finite"));
        }
        Ok(Self { a, b, c })
    }

    pub fn a(&self) -> &StateMatrix<T> {
        &self.a
    }
    pub fn b(&self) -> &Mat<T> {
        &self.b
    }
    pub fn c(&self) -> &Mat<T> {
        &self.c
    }
    pub fn state_dim(&self) -> usize {
        self.a.dim()
    }
    pub fn input_dim(&self) -> usize {
        self.b.cols
    }
    pub fn output_dim(&self) -> usize {
        self.c.rows
    }
}

/// One discretized step `(A_bar, B_bar)` with the step size that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteStep<T> {
    pub a_bar: StateMatrix<T>,
    /// `n x p`.
    pub b_bar: Mat<T>,
    pub delta: T,
}

impl<T: Float> DiscreteStep<T> {
    pub fn state_dim(&self) -> usize {
        self.a_bar.dim()
    }

    pub fn input_dim(&self) -> usize {
        self.b_bar.cols
    }

    /// Affine map `h -> A_bar h + B_bar x`.
    pub fn apply(&self, h: &[T], x: &[T]) -> Vec<T> {
        let bx = self.b_bar.mul_vec(x);
        self.a_bar
            .apply(h)
            .into_iter()
            .zip(bx)
            .map(|(a, b)| a + b)
            .collect()
    }
}

fn cast<T: Float>(v: f64) -> T {
    T::from(v).expect("representable constant")
}

/// `(exp(z) - 1) / z`, the ZOH input gain divided by delta.
fn phi1_scalar<T: Float>(z: T) -> T {
    if z.abs() < cast(ZOH_SERIES_THRESHOLD) {
        // 1 + z/2 + z^2/6 + z^3/24
        T::one() + z * (cast::<T>(0.5) + z * (cast::<T>(1.0 / 6.0) + z * cast::<T>(1.0 / 24.0)))
    } else {
        z.exp_m1() / z
    }
}

/// Matrix exponential by scaling and squaring with a Taylor core.
pub fn expm<T: Float>(m: &Mat<T>) -> Mat<T> {
    let n = m.rows;
    let norm = m.norm_inf();
    let mut squarings = 0i32;
    let half = cast::<T>(0.5);
    let mut scaled = m.clone();
    if norm > half {
        squarings = (norm / half).log2().ceil().to_i32().unwrap_or(0).max(0);
        scaled = m.scaled(cast::<T>(2f64.powi(-squarings)));
    }
    let mut result = Mat::identity(n);
    let mut term = Mat::identity(n);
    for k in 1..=24 {
        term = term.mul(&scaled).scaled(T::one() / cast(k as f64));
        result = result.add(&term);
    }
    for _ in 0..squarings {
        result = result.mul(&result);
    }
    result
}

/// Zero-order-hold discretization: `A_bar = exp(dA)`,
/// `B_bar = (dA)^{-1}(exp(dA) - I) dB`.
///
/// The diagonal path evaluates the gain elementwise, switching to the
/// power series when `|d a_i|` is tiny. The dense path uses the identity
/// `exp([[M, I], [0, 0]]) = [[exp(M), phi1(M)], [0, I]]`, which never
/// inverts `dA` and is therefore valid for singular `A`.
pub fn discretize_zoh<T: Float>(ssm: &ContinuousSsm<T>, delta: T) -> Result<DiscreteStep<T>> {
    if !delta.is_finite() || delta <= T::zero() {
        return Err(Error::invalid("delta must be finite and positive"));
    }
    let n = ssm.state_dim();
    let p = ssm.input_dim();
    match &ssm.a {
        StateMatrix::Diagonal(diag) => {
            let mut a_bar = Vec::with_capacity(n);
            let mut b_bar = Mat::zeros(n, p);
            for (i, &a) in diag.iter().enumerate() {
                let z = delta * a;
                a_bar.push(z.exp());
                let gain = delta * phi1_scalar(z);
                for j in 0..p {
                    b_bar.data[i * p + j] = gain * ssm.b.get(i, j);
                }
            }
            Ok(DiscreteStep {
                a_bar: StateMatrix::Diagonal(a_bar),
                b_bar,
                delta,
            })
        }
        StateMatrix::Dense(a) => {
            let da = a.scaled(delta);
            let phi = if da.norm_inf() < cast(ZOH_SERIES_THRESHOLD) {
                // I + dA/2 + (dA)^2/6
                let sq = da.mul(&da);
                Mat::identity(n)
                    .add(&da.scaled(cast(0.5)))
                    .add(&sq.scaled(cast(1.0 / 6.0)))
            } else {
                let mut aug = Mat::zeros(2 * n, 2 * n);
                for i in 0..n {
                    for j in 0..n {
                        aug.data[i * 2 * n + j] = da.get(i, j);
                    }
                    aug.data[i * 2 * n + n + i] = T::one();
                }
                let e = expm(&aug);
                let mut phi = Mat::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        phi.data[i * n + j] = e.get(i, n + j);
                    }
                }
                phi
            };
            let a_bar = expm(&da);
            let b_bar = phi.mul(&ssm.b.scaled(delta));
            Ok(DiscreteStep {
                a_bar: StateMatrix::Dense(a_bar),
                b_bar,
                delta,
            })
        }
    }
}

fn validate_scan<T: Float>(
    steps: &[DiscreteStep<T>],
    c: &Mat<T>,
    x: &[Vec<T>],
    h0: &[T],
) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::invalid("scan needs at least one input"));
    }
    if steps.is_empty() || (steps.len() != 1 && steps.len() != x.len()) {
        return Err(Error::invalid(format!(
            "expected 1 or {} steps, got {}",
            x.len(),
            steps.len()
        )));
    }
    let n = steps[0].state_dim();
    let p = steps[0].input_dim();
    for (t, s) in steps.iter().enumerate() {
        if s.state_dim() != n || s.input_dim() != p {
            return Err(Error::invalid(format!(
                "step {t} has mismatched dimensions"
            )));
        }
    }
    if let Some(t) = x.iter().position(|xt| xt.len() != p) {
        return Err(Error::invalid(format!(
            "input {t} has length {}, expected {p}",
            x[t].len()
        )));
    }
    if c.cols != n {
        return Err(Error::invalid(format!(
            "C has {} cols, state dim is {n}",
            c.cols
        )));
    }
    if h0.len() != n {
        return Err(Error::invalid(format!(
            "h0 has length {}, expected {n}",
            h0.len()
        )));
    }
    Ok(n)
}

#[inline]
fn step_at<T>(steps: &[DiscreteStep<T>], t: usize) -> &DiscreteStep<T> {
    if steps.len() == 1 {
        &steps[0]
    } else {
        &steps[t]
    }
}

/// `h_t = A_bar_t h_{t-1} + B_bar_t x_t`, `y_t = C h_t`, strictly in order.
///
/// `steps` holds either one step per input or a single time-invariant step.
pub fn scan_sequential<T: Float>(
    steps: &[DiscreteStep<T>],
    c: &Mat<T>,
    x: &[Vec<T>],
    h0: &[T],
) -> Result<Vec<Vec<T>>> {
    validate_scan(steps, c, x, h0)?;
    let mut h = h0.to_vec();
    let mut ys = Vec::with_capacity(x.len());
    for (t, xt) in x.iter().enumerate() {
        h = step_at(steps, t).apply(&h, xt);
        ys.push(c.mul_vec(&h));
    }
    Ok(ys)
}

/// Elementwise affine map `h -> a * h + b` for a diagonal recurrence.
#[derive(Clone, Debug, PartialEq)]
struct Affine<T> {
    a: Vec<T>,
    b: Vec<T>,
}

impl<T: Float> Affine<T> {
    fn identity(n: usize) -> Self {
        Self {
            a: vec![T::one(); n],
            b: vec![T::zero(); n],
        }
    }

    /// Apply `self` first, then `then`: `(a2 a1, a2 b1 + b2)`.
    fn then(&self, then: &Affine<T>) -> Affine<T> {
        Affine {
            a: self
                .a
                .iter()
                .zip(&then.a)
                .map(|(&a1, &a2)| a2 * a1)
                .collect(),
            b: self
                .b
                .iter()
                .zip(&then.a)
                .zip(&then.b)
                .map(|((&b1, &a2), &b2)| a2 * b1 + b2)
                .collect(),
        }
    }
}

/// Exclusive Blelloch scan (up-sweep then down-sweep) in place.
/// `items.len()` must be a power of two.
fn blelloch_exclusive<T: Float>(items: &mut [Affine<T>], n: usize) {
    let len = items.len();
    debug_assert!(len.is_power_of_two());
    let mut stride = 1;
    while stride < len {
        let mut i = 2 * stride - 1;
        while i < len {
            items[i] = items[i - stride].then(&items[i]);
            i += 2 * stride;
        }
        stride *= 2;
    }
    items[len - 1] = Affine::identity(n);
    let mut stride = len / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < len {
            let left = items[i - stride].clone();
            let prefix = items[i].clone();
            items[i - stride] = prefix.clone();
            items[i] = prefix.then(&left);
            i += 2 * stride;
        }
        stride /= 2;
    }
}

/// Same recurrence as [`scan_sequential`], evaluated as a work-efficient
/// prefix scan over the per-step affine maps. Requires diagonal `A_bar`.
pub fn scan_parallel<T: Float>(
    steps: &[DiscreteStep<T>],
    c: &Mat<T>,
    x: &[Vec<T>],
    h0: &[T],
) -> Result<Vec<Vec<T>>> {
    let n = validate_scan(steps, c, x, h0)?;
    let len = x.len();
    let padded = len.next_power_of_two();
    let mut items = Vec::with_capacity(padded);
    for (t, xt) in x.iter().enumerate() {
        let step = step_at(steps, t);
        let a = match &step.a_bar {
            StateMatrix::Diagonal(d) => d.clone(),
            StateMatrix::Dense(_) => {
                return Err(Error::invalid(
                    "parallel scan requires a diagonal state matrix",
                ))
            }
        };
        items.push(Affine {
            a,
            b: step.b_bar.mul_vec(xt),
        });
    }
    let elements = items.clone();
    items.resize(padded, Affine::identity(n));
    blelloch_exclusive(&mut items, n);

    Ok(items
        .iter()
        .zip(&elements)
        .map(|(prefix, elem)| {
            let inclusive = prefix.then(elem);
            let h: Vec<T> = inclusive
                .a
                .iter()
                .zip(&inclusive.b)
                .zip(h0)
                .map(|((&a, &b), &h)| a * h + b)
                .collect();
            c.mul_vec(&h)
        })
        .collect())
}

/// Projections that make `(delta, B, C)` functions of the current input.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionWeights<T> {
    /// `d x p`
    pub delta_w: Mat<T>,
    pub delta_b: Vec<T>,
    /// `n x p`
    pub b_w: Mat<T>,
    pub b_b: Vec<T>,
    /// `n x p`
    pub c_w: Mat<T>,
    pub c_b: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveParams<T> {
    pub delta: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
}

/// Numerically stable `ln(1 + e^x)`, floored at the smallest positive value.
pub fn softplus<T: Float>(x: T) -> T {
    let y = if x > cast(20.0) { x } else { x.exp().ln_1p() };
    y.max(T::min_positive_value())
}

/// `delta_t = softplus(W_d x_t + b_d)`, `B_t = W_B x_t + b_B`, `C_t = W_C x_t + b_C`.
pub fn selective_parameters<T: Float>(
    x_t: &[T],
    weights: &SelectionWeights<T>,
) -> Result<SelectiveParams<T>> {
    let w = weights;
    for (name, m, bias) in [
        ("delta", &w.delta_w, &w.delta_b),
        ("B", &w.b_w, &w.b_b),
        ("C", &w.c_w, &w.c_b),
    ] {
        if m.cols != x_t.len() || m.rows != bias.len() {
            return Err(Error::invalid(format!(
                "{name} selection weights have mismatched shape"
            )));
        }
        if !m.all_finite() || !bias.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "{name} selection weights are not finite"
            )));
        }
    }
    let affine = |m: &Mat<T>, bias: &[T]| -> Vec<T> {
        m.mul_vec(x_t)
            .into_iter()
            .zip(bias)
            .map(|(v, &b)| v + b)
            .collect()
    };
    Ok(SelectiveParams {
        delta: affine(&w.delta_w, &w.delta_b)
            .into_iter()
            .map(softplus)
            .collect(),
        b: affine(&w.b_w, &w.b_b),
        c: affine(&w.c_w, &w.c_b),
    })
}

/// Denominator floor for the relative error in [`gradient_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compare an analytic gradient against central finite differences.
///
/// `f` returns the loss and its analytic gradient at a point. The relative
/// error of each coordinate is `|g_a - g_n| / max(|g_a|, |g_n|, GRAD_CHECK_FLOOR)`.
pub fn gradient_check<F>(mut f: F, point: &[f64], epsilon: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::Precondition(format!(
            "epsilon {epsilon} outside [1e-6, 1e-3]"
        )));
    }
    let (loss, analytic) = f(point)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!(
            "loss {loss} at the base point"
        )));
    }
    if analytic.len() != point.len() {
        return Err(Error::invalid(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            point.len()
        )));
    }
    let mut probe = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let (plus, _) = f(&probe)?;
        probe[i] = orig - epsilon;
        let (minus, _) = f(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "loss not finite when perturbing parameter {i}"
            )));
        }
        numeric.push((plus - minus) / (2.0 * epsilon));
    }
    let mut max_relative_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR);
        let rel = (a - n).abs() / denom;
        if rel > max_relative_error {
            max_relative_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_relative_error,
        worst_index,
        analytic,
        numeric,
    })
}

// ---------------------------------------------------------------------------
// Selective scan kernel (diagonal A, shared B/C across channels), f64.
// ---------------------------------------------------------------------------

/// Dimensions of a selective scan: `len` timesteps, `channels` independent
/// single-input SSMs, each with `state` hidden units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

/// Below this `|dt a|` the kernel gain uses its Taylor series.
const KERNEL_SERIES_THRESHOLD: f64 = 1e-2;

/// `(e^z - 1) / z` and `sum_{k>=1} k z^(k-1) / (k+1)!`, truncated where the
/// next term is below double precision for `|z| < 1e-2`.
#[inline]
fn kernel_series(z: f64) -> (f64, f64) {
    let f = 1.0
        + z * (1.0 / 2.0
            + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z * (1.0 / 120.0 + z * (1.0 / 720.0)))));
    let g = 1.0 / 2.0 + z * (2.0 / 6.0 + z * (3.0 / 24.0 + z * (4.0 / 120.0 + z * (5.0 / 720.0))));
    (f, g)
}

/// Input gain `(exp(dt a) - 1) / a` given `ez = exp(dt a)`.
#[inline]
fn gain_from_exp(dt: f64, a: f64, ez: f64) -> f64 {
    let z = dt * a;
    if z.abs() < KERNEL_SERIES_THRESHOLD {
        dt * kernel_series(z).0
    } else {
        (ez - 1.0) / a
    }
}

/// Input gain `(exp(dt a) - 1) / a` with its partials wrt `dt` and `a`.
#[inline]
pub fn zoh_gain_with_grads(dt: f64, a: f64) -> (f64, f64, f64) {
    gain_grads_from_exp(dt, a, (dt * a).exp())
}

#[inline]
fn gain_grads_from_exp(dt: f64, a: f64, ez: f64) -> (f64, f64, f64) {
    let z = dt * a;
    if z.abs() < KERNEL_SERIES_THRESHOLD {
        let (f, g) = kernel_series(z);
        (dt * f, ez, dt * dt * g)
    } else {
        let em1 = ez - 1.0;
        (em1 / a, ez, (z * ez - em1) / (a * a))
    }
}

#[inline]
pub fn zoh_gain(dt: f64, a: f64) -> f64 {
    gain_from_exp(dt, a, (dt * a).exp())
}

/// Forward selective scan. Inputs are row-major: `x, delta: len x channels`,
/// `a: channels x state`, `b, c: len x state`. Returns `y (len x channels)`
/// and the hidden states `(len x channels x state)` for the backward pass.
pub fn selective_scan_forward(
    dims: ScanDims,
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let ScanDims {
        len,
        channels,
        state,
    } = dims;
    let mut y = vec![0.0; len * channels];
    let mut states = vec![0.0; len * channels * state];
    let mut h = vec![0.0; channels * state];
    for t in 0..len {
        let b_t = &b[t * state..(t + 1) * state];
        let c_t = &c[t * state..(t + 1) * state];
        for d in 0..channels {
            let dt = delta[t * channels + d];
            let xt = x[t * channels + d];
            let a_d = &a[d * state..(d + 1) * state];
            let h_d = &mut h[d * state..(d + 1) * state];
            let mut acc = 0.0;
            for s in 0..state {
                let ab = (dt * a_d[s]).exp();
                let hv = ab * h_d[s] + gain_from_exp(dt, a_d[s], ab) * b_t[s] * xt;
                h_d[s] = hv;
                acc += c_t[s] * hv;
            }
            y[t * channels + d] = acc;
            states[(t * channels + d) * state..(t * channels + d + 1) * state].copy_from_slice(h_d);
        }
    }
    (y, states)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveScanGrads {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Reverse-mode adjoint of [`selective_scan_forward`].
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_backward(
    dims: ScanDims,
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    states: &[f64],
    grad_y: &[f64],
) -> SelectiveScanGrads {
    let ScanDims {
        len,
        channels,
        state,
    } = dims;
    let mut g = SelectiveScanGrads {
        x: vec![0.0; len * channels],
        delta: vec![0.0; len * channels],
        a: vec![0.0; channels * state],
        b: vec![0.0; len * state],
        c: vec![0.0; len * state],
    };
    // Adjoint of h_t carried backwards in time.
    let mut carry = vec![0.0; channels * state];
    for t in (0..len).rev() {
        for d in 0..channels {
            let gy = grad_y[t * channels + d];
            let dt = delta[t * channels + d];
            let xt = x[t * channels + d];
            let base = (t * channels + d) * state;
            let mut g_dt = 0.0;
            let mut g_x = 0.0;
            for s in 0..state {
                let av = a[d * state + s];
                let h_t = states[base + s];
                let h_prev = if t > 0 {
                    states[((t - 1) * channels + d) * state + s]
                } else {
                    0.0
                };
                let c_ts = c[t * state + s];
                let b_ts = b[t * state + s];
                g.c[t * state + s] += gy * h_t;
                let gh = carry[d * state + s] + gy * c_ts;
                let ab = (dt * av).exp();
                let (gain, dgain_ddt, dgain_da) = gain_grads_from_exp(dt, av, ab);
                let g_ab = gh * h_prev;
                let g_gain = gh * b_ts * xt;
                g_x += gh * gain * b_ts;
                g.b[t * state + s] += gh * gain * xt;
                g_dt += g_ab * ab * av + g_gain * dgain_ddt;
                g.a[d * state + s] += g_ab * ab * dt + g_gain * dgain_da;
                carry[d * state + s] = gh * ab;
            }
            g.delta[t * channels + d] = g_dt;
            g.x[t * channels + d] = g_x;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_ssm(a: f64, b: f64) -> ContinuousSsm<f64> {
        ContinuousSsm::new(
            StateMatrix::Diagonal(vec![a]),
            Mat::new(1, 1, vec![b]).unwrap(),
            Mat::new(1, 1, vec![1.0]).unwrap(),
        )
        .unwrap()
    }

    fn diag_of(m: &StateMatrix<f64>) -> Vec<f64> {
        match m {
            StateMatrix::Diagonal(d) => d.clone(),
            StateMatrix::Dense(_) => panic!("expected diagonal"),
        }
    }

    #[test]
    fn zoh_scalar_ln2() {
        let step = discretize_zoh(&scalar_ssm(-1.0, 1.0), std::f64::consts::LN_2).unwrap();
        assert!((diag_of(&step.a_bar)[0] - 0.5).abs() < 1e-12);
        assert!((step.b_bar.data[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zoh_tiny_delta_is_identity_and_zero() {
        let ssm = ContinuousSsm::new(
            StateMatrix::Diagonal(vec![-1.0, -3.0, -0.2]),
            Mat::new(3, 1, vec![1.0, 2.0, -1.0]).unwrap(),
            Mat::new(1, 3, vec![1.0, 1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let step = discretize_zoh(&ssm, 1e-8).unwrap();
        for a in diag_of(&step.a_bar) {
            assert!((a - 1.0).abs() < 1e-6);
        }
        assert!(step.b_bar.data.iter().all(|b| b.abs() < 1e-6));
    }

    #[test]
    fn zoh_singular_a_dense_and_diagonal() {
        // A = 0: A_bar = I, B_bar = delta B.
        let b = Mat::new(2, 1, vec![1.0, -2.0]).unwrap();
        let c = Mat::new(1, 2, vec![1.0, 1.0]).unwrap();
        let dense =
            ContinuousSsm::new(StateMatrix::Dense(Mat::zeros(2, 2)), b.clone(), c.clone()).unwrap();
        let diag = ContinuousSsm::new(StateMatrix::Diagonal(vec![0.0, 0.0]), b, c).unwrap();
        for ssm in [dense, diag] {
            let step = discretize_zoh(&ssm, 0.3).unwrap();
            let a = step.a_bar.to_dense();
            assert_eq!(a, Mat::identity(2));
            assert!((step.b_bar.data[0] - 0.3).abs() < 1e-15);
            assert!((step.b_bar.data[1] + 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn zoh_dense_matches_diagonal() {
        let diag = vec![-0.7, -1.9, 0.4];
        let b = Mat::new(3, 2, vec![0.3, -1.0, 2.0, 0.5, 1.1, 0.0]).unwrap();
        let c = Mat::new(1, 3, vec![1.0, 0.0, -1.0]).unwrap();
        let d =
            ContinuousSsm::new(StateMatrix::Diagonal(diag.clone()), b.clone(), c.clone()).unwrap();
        let m = ContinuousSsm::new(StateMatrix::Dense(Mat::from_diagonal(&diag)), b, c).unwrap();
        let sd = discretize_zoh(&d, 0.8).unwrap();
        let sm = discretize_zoh(&m, 0.8).unwrap();
        let ad = sd.a_bar.to_dense();
        let am = sm.a_bar.to_dense();
        for (x, y) in ad.data.iter().zip(&am.data) {
            assert!((x - y).abs() < 1e-13);
        }
        for (x, y) in sd.b_bar.data.iter().zip(&sm.b_bar.data) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn zoh_rejects_bad_delta() {
        let ssm = scalar_ssm(-1.0, 1.0);
        assert!(discretize_zoh(&ssm, 0.0).is_err());
        assert!(discretize_zoh(&ssm, -1.0).is_err());
        assert!(discretize_zoh(&ssm, f64::NAN).is_err());
        assert!(ContinuousSsm::new(
            StateMatrix::Diagonal(vec![f64::INFINITY]),
            Mat::new(1, 1, vec![1.0]).unwrap(),
            Mat::new(1, 1, vec![1.0]).unwrap()
        )
        .is_err());
    }

    fn const_step(a: f64, b: f64) -> DiscreteStep<f64> {
        DiscreteStep {
            a_bar: StateMatrix::Diagonal(vec![a]),
            b_bar: Mat::new(1, 1, vec![b]).unwrap(),
            delta: 1.0,
        }
    }

    #[test]
    fn scan_hand_recurrence() {
        let c = Mat::new(1, 1, vec![1.0]).unwrap();
        let x = vec![vec![1.0], vec![0.0], vec![0.0]];
        let steps = vec![const_step(0.5, 0.5)];
        let y = scan_sequential(&steps, &c, &x, &[0.0]).unwrap();
        assert_eq!(y, vec![vec![0.5], vec![0.25], vec![0.125]]);
        let yp = scan_parallel(&steps, &c, &x, &[0.0]).unwrap();
        assert_eq!(yp, y);
    }

    #[test]
    fn scan_zero_input_and_memoryless() {
        let c = Mat::new(1, 1, vec![2.0]).unwrap();
        let zeros = vec![vec![0.0]; 5];
        let y = scan_sequential(&[const_step(0.9, 0.3)], &c, &zeros, &[0.0]).unwrap();
        assert!(y.iter().all(|v| v[0] == 0.0));

        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 - 2.5]).collect();
        let y = scan_sequential(&[const_step(0.0, 0.3)], &c, &x, &[7.0]).unwrap();
        for (yt, xt) in y.iter().zip(&x) {
            assert!((yt[0] - 2.0 * 0.3 * xt[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn scan_single_element_is_exact() {
        let c = Mat::new(1, 2, vec![0.3, -0.7]).unwrap();
        let step = DiscreteStep {
            a_bar: StateMatrix::Diagonal(vec![0.37, 0.81]),
            b_bar: Mat::new(2, 1, vec![0.11, -0.4]).unwrap(),
            delta: 0.5,
        };
        let x = vec![vec![1.7]];
        let h0 = [0.2, -1.3];
        assert_eq!(
            scan_sequential(std::slice::from_ref(&step), &c, &x, &h0).unwrap(),
            scan_parallel(&[step], &c, &x, &h0).unwrap()
        );
    }

    #[test]
    fn scan_two_step_composition() {
        // Two elements: h2 = a2 (a1 h0 + b1 x1) + b2 x2 enumerated by hand.
        let (a1, b1, a2, b2) = (0.3, 0.7, -0.4, 1.1);
        let (x1, x2, h0) = (2.0, -3.0, 0.5);
        let steps = vec![const_step(a1, b1), const_step(a2, b2)];
        let c = Mat::new(1, 1, vec![1.0]).unwrap();
        let y = scan_parallel(&steps, &c, &[vec![x1], vec![x2]], &[h0]).unwrap();
        let h1 = a1 * h0 + b1 * x1;
        let h2 = a2 * h1 + b2 * x2;
        assert!((y[0][0] - h1).abs() < 1e-15);
        assert!((y[1][0] - h2).abs() < 1e-15);
    }

    #[test]
    fn scan_dimension_errors() {
        let c = Mat::new(1, 1, vec![1.0]).unwrap();
        let steps = vec![const_step(0.5, 0.5); 2];
        let x = vec![vec![1.0]; 3];
        assert!(scan_sequential(&steps, &c, &x, &[0.0]).is_err());
        assert!(scan_sequential(&steps[..1], &c, &[vec![1.0, 2.0]], &[0.0]).is_err());
        assert!(scan_sequential(&steps[..1], &c, &x, &[0.0, 1.0]).is_err());
        assert!(scan_sequential(&steps[..1], &c, &[], &[0.0]).is_err());
        let dense = DiscreteStep {
            a_bar: StateMatrix::Dense(Mat::identity(1)),
            b_bar: Mat::new(1, 1, vec![1.0]).unwrap(),
            delta: 1.0,
        };
        assert!(scan_sequential(std::slice::from_ref(&dense), &c, &x, &[0.0]).is_ok());
        assert!(scan_parallel(&[dense], &c, &x, &[0.0]).is_err());
    }

    #[test]
    fn softplus_properties() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(-1000.0f64) > 0.0);
        assert_eq!(softplus(50.0f64), 50.0);
    }

    fn random_weights(
        rng: &mut ChaCha8Rng,
        d: usize,
        n: usize,
        p: usize,
        zero_delta_w: bool,
    ) -> SelectionWeights<f64> {
        let mut m = |r, c| {
            Mat::new(
                r,
                c,
                (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let mut w = SelectionWeights {
            delta_w: m(d, p),
            delta_b: vec![0.0; d],
            b_w: m(n, p),
            b_b: vec![0.1; n],
            c_w: m(n, p),
            c_b: vec![-0.1; n],
        };
        if zero_delta_w {
            w.delta_w = Mat::zeros(d, p);
            w.delta_b = vec![0.3; d];
        }
        w
    }

    #[test]
    fn selection_zero_input_gives_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_weights(&mut rng, 4, 3, 5, false);
        let p = selective_parameters(&[0.0; 5], &w).unwrap();
        for d in p.delta {
            assert!((d - std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert_eq!(p.b, vec![0.1; 3]);
        assert_eq!(p.c, vec![-0.1; 3]);
    }

    #[test]
    fn selection_zero_delta_weights_time_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_weights(&mut rng, 4, 3, 5, true);
        let first = selective_parameters(&[1.0, -2.0, 0.5, 3.0, 0.0], &w)
            .unwrap()
            .delta;
        for _ in 0..10 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-10.0..10.0)).collect();
            assert_eq!(selective_parameters(&x, &w).unwrap().delta, first);
        }
    }

    #[test]
    fn selection_shape_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_weights(&mut rng, 4, 3, 5, false);
        assert!(selective_parameters(&[0.0; 4], &w).is_err());
    }

    #[test]
    fn gradient_check_quadratic_on_b_bar() {
        // loss = 0.5 * ||B_bar - target||^2 with B_bar as the parameter.
        let target = [0.3, -1.2, 2.0];
        let f = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            let loss = p
                .iter()
                .zip(&target)
                .map(|(a, b)| 0.5 * (a - b).powi(2))
                .sum();
            Ok((loss, p.iter().zip(&target).map(|(a, b)| a - b).collect()))
        };
        let report = gradient_check(f, &[1.0, 0.5, -0.25], 1e-4).unwrap();
        for (a, n) in report.analytic.iter().zip(&report.numeric) {
            assert!((a - n).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_check_guards() {
        let f = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((0.0, vec![0.0])) };
        assert!(matches!(
            gradient_check(f, &[0.0], 1e-2),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            gradient_check(f, &[0.0], 1e-7),
            Err(Error::Precondition(_))
        ));
        let nan = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((f64::NAN, vec![0.0])) };
        assert!(matches!(
            gradient_check(nan, &[0.0], 1e-4),
            Err(Error::NonFiniteLoss(_))
        ));
    }

    #[test]
    fn zoh_gain_grads_match_finite_differences() {
        for &(dt, a) in &[
            (0.1, -1.0),
            (1e-3, -0.01),
            (0.7, -3.0),
            (0.2, 1e-7),
            (2.0, -0.3),
        ] {
            let (f, ddt, da) = zoh_gain_with_grads(dt, a);
            assert!((f - zoh_gain(dt, a)).abs() < 1e-14 * f.abs().max(1.0));
            let h = 1e-6;
            let nd = (zoh_gain(dt + h, a) - zoh_gain(dt - h, a)) / (2.0 * h);
            let na = (zoh_gain(dt, a + h) - zoh_gain(dt, a - h)) / (2.0 * h);
            assert!((ddt - nd).abs() < 1e-7, "ddt {ddt} vs {nd}");
            assert!((da - na).abs() < 1e-7, "da {da} vs {na}");
        }
    }

    #[test]
    fn selective_kernel_matches_reference_scan() {
        let dims = ScanDims {
            len: 7,
            channels: 2,
            state: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut r = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(lo..hi)).collect()
        };
        let x = r(14, -1.0, 1.0);
        let delta = r(14, 0.05, 0.8);
        let a = r(6, -2.0, -0.1);
        let b = r(21, -1.0, 1.0);
        let c = r(21, -1.0, 1.0);
        let (y, _) = selective_scan_forward(dims, &x, &delta, &a, &b, &c);
        for ch in 0..2 {
            let mut steps = Vec::new();
            let mut xs = Vec::new();
            for t in 0..7 {
                let ssm = ContinuousSsm::new(
                    StateMatrix::Diagonal(a[ch * 3..ch * 3 + 3].to_vec()),
                    Mat::new(3, 1, b[t * 3..t * 3 + 3].to_vec()).unwrap(),
                    Mat::new(1, 3, vec![0.0; 3]).unwrap(),
                )
                .unwrap();
                steps.push(discretize_zoh(&ssm, delta[t * 2 + ch]).unwrap());
                xs.push(vec![x[t * 2 + ch]]);
            }
            // C varies per step, so apply it manually on the states.
            let mut h = vec![0.0; 3];
            for t in 0..7 {
                h = steps[t].apply(&h, &xs[t]);
                let yt: f64 = h.iter().zip(&c[t * 3..t * 3 + 3]).map(|(a, b)| a * b).sum();
                assert!((yt - y[t * 2 + ch]).abs() < 1e-12);
            }
        }
    }
}
