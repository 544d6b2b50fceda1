//! VMamba-style vision backbone.
//!
//! An image is cut into non-overlapping patches, projected to channel
//! vectors, and refined by stages of blocks whose token mixer is a
//! four-direction selective scan over the 2-D grid (SS2D). Between stages a
//! 2x2 patch merge halves the resolution and doubles the width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub patch: usize,
    /// Channel width of each stage.
    pub dims: Vec<usize>,
    /// Number of blocks in each stage.
    pub depths: Vec<usize>,
    pub d_state: usize,
    /// Inner width of a block is `expand * dim`.
    pub expand: usize,
    pub conv_kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::miniature()
    }
}

impl BackboneConfig {
    /// Two stages of two blocks each, sized for 32x32 single-channel input.
    pub fn miniature() -> Self {
        Self {
            in_channels: 1,
            image_size: 32,
            patch: 4,
            dims: vec![16, 32],
            depths: vec![2, 2],
            d_state: 8,
            expand: 2,
            conv_kernel: 3,
        }
    }

    /// Reference-scale presets at 224x224. Usable, but far beyond desk budgets.
    pub fn tiny() -> Self {
        Self {
            in_channels: 3,
            image_size: 224,
            patch: 4,
            dims: vec![96, 192, 384, 768],
            depths: vec![2, 2, 9, 2],
            d_state: 16,
            expand: 2,
            conv_kernel: 3,
        }
    }

    pub fn small() -> Self {
        Self {
            depths: vec![2, 2, 27, 2],
            ..Self::tiny()
        }
    }

    pub fn base() -> Self {
        Self {
            dims: vec![128, 256, 512, 1024],
            depths: vec![2, 2, 27, 2],
            ..Self::tiny()
        }
    }

    pub fn out_channels(&self) -> usize {
        *self.dims.last().expect("at least one stage")
    }

    /// Spatial side of the final feature map.
    pub fn out_side(&self) -> usize {
        (self.image_size / self.patch) >> (self.dims.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.len() != self.depths.len() {
            return Err(Error::Config(
                "backbone dims/depths must be nonempty and equal length".into(),
            ));
        }
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(
                "image size must be divisible by the patch size".into(),
            ));
        }
        let side = self.image_size / self.patch;
        if !side.is_multiple_of(1 << (self.dims.len() - 1)) {
            return Err(Error::Config(
                "patch grid too small for the number of stages".into(),
            ));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config("conv kernel must be odd".into()));
        }
        Ok(())
    }
}

/// `H x W x C` grid, stored as `(H*W) x C` in row-major spatial order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    /// `(height * width) x channels`.
    pub grid: Tensor,
    pub patch: usize,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        grid: Tensor,
        patch: usize,
        stride: usize,
    ) -> Result<Self> {
        if height == 0
            || width == 0
            || grid.shape().len() != 2
            || grid.rows() != height * width
            || grid.cols() == 0
        {
            return Err(Error::invalid(
                "feature map must be nonempty with rows = height * width",
            ));
        }
        if !grid.is_finite() {
            return Err(Error::invalid("feature map has non-finite entries"));
        }
        Ok(Self {
            height,
            width,
            grid,
            patch,
            stride,
        })
    }

    pub fn channels(&self) -> usize {
        self.grid.cols()
    }

    pub fn at(&self, h: usize, w: usize) -> &[f64] {
        self.grid.row(h * self.width + w)
    }
}

/// Whether a global feature still lives in vision space or has been mapped
/// into the decoder's embedding space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureStage {
    Raw,
    Projected,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeature {
    pub vector: Vec<f64>,
    pub stage: FeatureStage,
}

/// `L x E` token matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub stage: FeatureStage,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }
    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// A grid-shaped node in a graph.
#[derive(Clone, Copy, Debug)]
pub struct GridVar {
    pub var: Var,
    pub height: usize,
    pub width: usize,
}

/// The four corner-started traversal orders of a row-major `h x w` grid:
/// row-major, reversed row-major, column-major, reversed column-major.
pub fn traversal_orders(h: usize, w: usize) -> [Vec<usize>; 4] {
    let row_major: Vec<usize> = (0..h * w).collect();
    let col_major: Vec<usize> = (0..w)
        .flat_map(|j| (0..h).map(move |i| i * w + j))
        .collect();
    let mut row_rev = row_major.clone();
    row_rev.reverse();
    let mut col_rev = col_major.clone();
    col_rev.reverse();
    [row_major, row_rev, col_major, col_rev]
}

pub fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (pos, &src) in order.iter().enumerate() {
        inv[src] = pos;
    }
    inv
}

/// Flat gather indices that cut a `C x H x W` image into `patch x patch`
/// tiles; each output row is one tile flattened channel-major.
pub fn patch_indices(
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Vec<usize>> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::invalid(format!(
            "{height}x{width} image is not divisible into {patch}x{patch} patches"
        )));
    }
    let (hp, wp) = (height / patch, width / patch);
    let mut idx = Vec::with_capacity(channels * height * width);
    for pi in 0..hp {
        for pj in 0..wp {
            for c in 0..channels {
                for u in 0..patch {
                    for v in 0..patch {
                        idx.push(c * height * width + (pi * patch + u) * width + pj * patch + v);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Gather indices for a 2x2 patch merge of an `h x w x c` grid.
fn merge_indices(h: usize, w: usize, c: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w * c);
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let src = (2 * i + di) * w + 2 * j + dj;
                idx.extend(src * c..(src + 1) * c);
            }
        }
    }
    idx
}

/// Graph-level building blocks. All parameter names are relative to a
/// caller-supplied prefix.
pub mod graph {
    use super::*;

    /// Patches of `image` (a `C x H x W` tensor node) projected by `{prefix}.w/.b`.
    pub fn patch_embed(ctx: &mut Ctx, image: Var, patch: usize, prefix: &str) -> Result<GridVar> {
        let shape = ctx.g.value(image).shape().to_vec();
        let [c, h, w] = shape[..] else {
            return Err(Error::invalid("image must be C x H x W"));
        };
        let idx = patch_indices(c, h, w, patch)?;
        let (hp, wp) = (h / patch, w / patch);
        let patches = ctx.g.gather(image, idx, hp * wp, c * patch * patch)?;
        let var = ctx.linear(patches, prefix)?;
        Ok(GridVar {
            var,
            height: hp,
            width: wp,
        })
    }

    /// Four directional selective scans over `u`, each mapped back to grid
    /// positions, merged by elementwise mean.
    ///
    /// Per direction `k` the parameters are `{prefix}.dir{k}.{dt,b,c}` (linear
    /// maps), `{prefix}.dir{k}.a_log` (`A = -exp(a_log)`) and `{prefix}.dir{k}.d`
    /// (skip gain).
    pub fn ss2d(ctx: &mut Ctx, u: GridVar, prefix: &str) -> Result<Var> {
        let orders = traversal_orders(u.height, u.width);
        let mut merged: Option<Var> = None;
        for (k, order) in orders.iter().enumerate() {
            let p = format!("{prefix}.dir{k}");
            let seq = ctx.g.gather_rows(u.var, order)?;
            let y = selective_scan_1d(ctx, seq, &p)?;
            let back = ctx.g.gather_rows(y, &inverse_permutation(order))?;
            merged = Some(match merged {
                None => back,
                Some(acc) => ctx.g.add(acc, back)?,
            });
        }
        Ok(ctx.g.scale(merged.expect("four directions"), 0.25))
    }

    /// One selective SSM over the rows of `seq` (`L x D`), with input-dependent
    /// `delta, B, C` and a `D` skip term.
    pub fn selective_scan_1d(ctx: &mut Ctx, seq: Var, prefix: &str) -> Result<Var> {
        let dt_pre = ctx.linear(seq, &format!("{prefix}.dt"))?;
        let dt = ctx.g.softplus(dt_pre);
        let b = ctx.linear(seq, &format!("{prefix}.b"))?;
        let c = ctx.linear(seq, &format!("{prefix}.c"))?;
        let a_log = ctx.param(&format!("{prefix}.a_log"))?;
        let a_exp = ctx.g.exp(a_log);
        let a = ctx.g.scale(a_exp, -1.0);
        let y = ctx.g.selective_scan(seq, dt, a, b, c)?;
        let d = ctx.param(&format!("{prefix}.d"))?;
        let skip = ctx.g.mul_row(seq, d)?;
        ctx.g.add(y, skip)
    }

    /// `x + Out(Norm(SS2D(SiLU(DWConv(InX(LN(x)))))) * SiLU(InZ(LN(x))))`.
    pub fn vmamba_block(ctx: &mut Ctx, x: GridVar, kernel: usize, prefix: &str) -> Result<GridVar> {
        let h = ctx.layer_norm(x.var, &format!("{prefix}.ln"))?;
        let u = ctx.linear(h, &format!("{prefix}.in_x"))?;
        let z = ctx.linear(h, &format!("{prefix}.in_z"))?;
        let cw = ctx.param(&format!("{prefix}.conv.w"))?;
        let cb = ctx.param(&format!("{prefix}.conv.b"))?;
        let u = ctx.g.dw_conv2d(u, cw, cb, x.height, x.width, kernel)?;
        let u = ctx.g.silu(u);
        let y = ss2d(
            ctx,
            GridVar {
                var: u,
                height: x.height,
                width: x.width,
            },
            &format!("{prefix}.ss2d"),
        )?;
        let y = ctx.layer_norm(y, &format!("{prefix}.out_norm"))?;
        let gate = ctx.g.silu(z);
        let y = ctx.g.mul(y, gate)?;
        let out = ctx.linear(y, &format!("{prefix}.out"))?;
        let var = ctx.g.add(x.var, out)?;
        Ok(GridVar { var, ..x })
    }

    /// 2x2 neighbourhood concat, layer norm, then a width-doubling linear map.
    pub fn patch_merge(ctx: &mut Ctx, x: GridVar, prefix: &str) -> Result<GridVar> {
        if !x.height.is_multiple_of(2) || !x.width.is_multiple_of(2) {
            return Err(Error::invalid("patch merge needs even grid sides"));
        }
        let c = ctx.g.value(x.var).cols();
        let idx = merge_indices(x.height, x.width, c);
        let (h2, w2) = (x.height / 2, x.width / 2);
        let cat = ctx.g.gather(x.var, idx, h2 * w2, 4 * c)?;
        let n = ctx.layer_norm(cat, &format!("{prefix}.ln"))?;
        let var = ctx.linear(n, &format!("{prefix}.proj"))?;
        Ok(GridVar {
            var,
            height: h2,
            width: w2,
        })
    }

    /// Full backbone from a `C x H x W` image node to the final feature grid.
    pub fn backbone(
        ctx: &mut Ctx,
        cfg: &BackboneConfig,
        image: Var,
        prefix: &str,
    ) -> Result<GridVar> {
        let mut x = patch_embed(ctx, image, cfg.patch, &format!("{prefix}.patch"))?;
        x.var = ctx.layer_norm(x.var, &format!("{prefix}.patch_norm"))?;
        for (s, &depth) in cfg.depths.iter().enumerate() {
            if s > 0 {
                x = patch_merge(ctx, x, &format!("{prefix}.merge{s}"))?;
            }
            for b in 0..depth {
                x = vmamba_block(
                    ctx,
                    x,
                    cfg.conv_kernel,
                    &format!("{prefix}.stage{s}.block{b}"),
                )?;
            }
        }
        x.var = ctx.layer_norm(x.var, &format!("{prefix}.norm"))?;
        Ok(x)
    }
}

fn linear_init(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    rng: &mut impl Rng,
) {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.insert(
        format!("{name}.w"),
        Tensor::randn(&[fan_in, fan_out], std, rng),
    );
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
    }
}

pub(crate) fn norm_init(store: &mut ParamStore, name: &str, width: usize) {
    store.insert(format!("{name}.g"), Tensor::full(&[1, width], 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(&[1, width]));
}

/// Parameters of one selective SSM over `d` channels with `n` states.
pub(crate) fn init_selective_scan(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    n: usize,
    rng: &mut impl Rng,
) {
    linear_init(store, &format!("{prefix}.dt"), d, d, false, rng);
    store
        .get_mut(&format!("{prefix}.dt.w"))
        .expect("just inserted")
        .scale(0.1);
    // Bias so that softplus(bias) spans step sizes in [1e-3, 1e-1].
    let dt_bias: Vec<f64> = (0..d)
        .map(|_| {
            let dt = (rng.random_range(0.001f64.ln()..0.1f64.ln())).exp();
            dt + (-(-dt).exp_m1()).ln()
        })
        .collect();
    store.insert(format!("{prefix}.dt.b"), Tensor::row_vector(dt_bias));
    linear_init(store, &format!("{prefix}.b"), d, n, false, rng);
    linear_init(store, &format!("{prefix}.c"), d, n, false, rng);
    let a_log: Vec<f64> = (0..d)
        .flat_map(|_| (1..=n).map(|i| (i as f64).ln()))
        .collect();
    store.insert(
        format!("{prefix}.a_log"),
        Tensor::matrix(d, n, a_log).expect("shape"),
    );
    store.insert(format!("{prefix}.d"), Tensor::full(&[1, d], 1.0));
}

fn init_block(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    cfg: &BackboneConfig,
    rng: &mut impl Rng,
) {
    let inner = cfg.expand * dim;
    norm_init(store, &format!("{prefix}.ln"), dim);
    linear_init(store, &format!("{prefix}.in_x"), dim, inner, true, rng);
    linear_init(store, &format!("{prefix}.in_z"), dim, inner, true, rng);
    let k2 = cfg.conv_kernel * cfg.conv_kernel;
    store.insert(
        format!("{prefix}.conv.w"),
        Tensor::randn(&[k2, inner], 1.0 / (k2 as f64).sqrt(), rng),
    );
    store.insert(format!("{prefix}.conv.b"), Tensor::zeros(&[1, inner]));
    for k in 0..4 {
        init_selective_scan(
            store,
            &format!("{prefix}.ss2d.dir{k}"),
            inner,
            cfg.d_state,
            rng,
        );
    }
    norm_init(store, &format!("{prefix}.out_norm"), inner);
    linear_init(store, &format!("{prefix}.out"), inner, dim, true, rng);
    store
        .get_mut(&format!("{prefix}.out.w"))
        .expect("just inserted")
        .scale(0.5);
}

/// Random initial parameters for a backbone under `prefix`.
pub fn init_backbone(
    store: &mut ParamStore,
    cfg: &BackboneConfig,
    prefix: &str,
    rng: &mut impl Rng,
) {
    let patch_in = cfg.in_channels * cfg.patch * cfg.patch;
    linear_init(
        store,
        &format!("{prefix}.patch"),
        patch_in,
        cfg.dims[0],
        true,
        rng,
    );
    norm_init(store, &format!("{prefix}.patch_norm"), cfg.dims[0]);
    for (s, (&dim, &depth)) in cfg.dims.iter().zip(&cfg.depths).enumerate() {
        if s > 0 {
            let prev = cfg.dims[s - 1];
            norm_init(store, &format!("{prefix}.merge{s}.ln"), 4 * prev);
            linear_init(
                store,
                &format!("{prefix}.merge{s}.proj"),
                4 * prev,
                dim,
                false,
                rng,
            );
        }
        for b in 0..depth {
            init_block(store, &format!("{prefix}.stage{s}.block{b}"), dim, cfg, rng);
        }
    }
    norm_init(store, &format!("{prefix}.norm"), cfg.out_channels());
}

/// Random parameters for a standalone block (tests, benches).
pub fn init_vmamba_block(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    cfg: &BackboneConfig,
    rng: &mut impl Rng,
) {
    init_block(store, prefix, dim, cfg, rng);
}

fn grid_of(ctx: &mut Ctx, fm: &FeatureMap) -> GridVar {
    GridVar {
        var: ctx.g.constant(fm.grid.clone()),
        height: fm.height,
        width: fm.width,
    }
}

fn feature_map(ctx: &Ctx, x: GridVar, patch: usize, stride: usize) -> Result<FeatureMap> {
    FeatureMap::new(x.height, x.width, ctx.g.value(x.var).clone(), patch, stride)
}

/// Cut a `C x H x W` image into patches and project each with `{prefix}.w/.b`.
pub fn patch_embed(
    image: &Tensor,
    patch: usize,
    store: &ParamStore,
    prefix: &str,
) -> Result<FeatureMap> {
    let mut ctx = Ctx::new(store);
    let img = ctx.g.constant(image.clone());
    let x = graph::patch_embed(&mut ctx, img, patch, prefix)?;
    feature_map(&ctx, x, patch, patch)
}

/// Four-direction selective scan over a feature map (see [`graph::ss2d`]).
pub fn ss2d_cross_scan(fm: &FeatureMap, store: &ParamStore, prefix: &str) -> Result<FeatureMap> {
    let mut ctx = Ctx::new(store);
    let x = grid_of(&mut ctx, fm);
    let var = graph::ss2d(&mut ctx, x, prefix)?;
    feature_map(&ctx, GridVar { var, ..x }, fm.patch, fm.stride)
}

/// One residual block (see [`graph::vmamba_block`]).
pub fn vmamba_block(
    fm: &FeatureMap,
    store: &ParamStore,
    prefix: &str,
    kernel: usize,
) -> Result<FeatureMap> {
    let ln_g = store
        .get(&format!("{prefix}.ln.g"))
        .ok_or_else(|| Error::invalid(format!("missing block parameters under `{prefix}`")))?;
    if ln_g.cols() != fm.channels() {
        return Err(Error::invalid(format!(
            "block expects {} channels, feature map has {}",
            ln_g.cols(),
            fm.channels()
        )));
    }
    let mut ctx = Ctx::new(store);
    let x = grid_of(&mut ctx, fm);
    let y = graph::vmamba_block(&mut ctx, x, kernel, prefix)?;
    feature_map(&ctx, y, fm.patch, fm.stride)
}

/// Spatial mean of every channel.
pub fn global_pool(fm: &FeatureMap) -> GlobalFeature {
    let c = fm.channels();
    let mut v = vec![0.0; c];
    for row in fm.grid.data().chunks(c) {
        for (o, x) in v.iter_mut().zip(row) {
            *o += x;
        }
    }
    let n = (fm.height * fm.width) as f64;
    v.iter_mut().for_each(|x| *x /= n);
    GlobalFeature {
        vector: v,
        stage: FeatureStage::Raw,
    }
}

/// Row-major flatten, per-row projection `{proj}`, then layer norm `{norm}`.
pub fn sequential_tokens(
    fm: &FeatureMap,
    store: &ParamStore,
    proj: &str,
    norm: &str,
) -> Result<TokenSequence> {
    let mut ctx = Ctx::new(store);
    let x = ctx.g.constant(fm.grid.clone());
    let p = ctx.linear(x, proj)?;
    let n = ctx.layer_norm(p, norm)?;
    Ok(TokenSequence {
        tokens: ctx.g.value(n).clone(),
        stage: FeatureStage::Projected,
    })
}
