//! Velocity transformer: forward pass with activation cache and a hand-written
//! backward pass.
//!
//! Per frame, `x_t`, `x_ctx`, the note class and the voicing flag are embedded,
//! concatenated channel-wise and projected to the hidden width. The flow time
//! drives adaLN-Zero modulation in every block. Attention uses rotary
//! positions on queries and keys.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::linalg::{
    gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward, silu, silu_grad, softmax_rows,
    Real, View, ViewMut,
};
use super::params::{BlockOffsets, ModelConfig, Parameters};
use crate::{Error, Result};

/// Which conditions are replaced by their learned null embeddings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DropFlags {
    pub drop_y: bool,
    pub drop_ctx: bool,
    pub drop_u: bool,
}

impl DropFlags {
    pub const NONE: Self = Self {
        drop_y: false,
        drop_ctx: false,
        drop_u: false,
    };
    pub const ALL: Self = Self {
        drop_y: true,
        drop_ctx: true,
        drop_u: true,
    };
}

/// One forward call. `y` may hold `cfg.null_note()` as an explicit "no note" sentinel.
#[derive(Debug, Clone, Copy)]
pub struct NetInput<'a, T> {
    pub x_t: &'a [T],
    pub t: T,
    pub y: &'a [u8],
    pub x_ctx: &'a [T],
    /// `true` = unvoiced.
    pub u: &'a [bool],
    pub drop: DropFlags,
}

impl<T: Real> NetInput<'_, T> {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<usize> {
        let n = self.x_t.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty input sequence".into()));
        }
        for (name, len) in [("y", self.y.len()), ("x_ctx", self.x_ctx.len()), ("u", self.u.len())] {
            if len != n {
                return Err(Error::LengthMismatch(format!("{name} has {len} frames, x_t has {n}")));
            }
        }
        if n > cfg.max_len {
            return Err(Error::OutOfRange(format!(
                "sequence of {n} frames exceeds the model's max_len {}",
                cfg.max_len
            )));
        }
        if let Some(i) = self.y.iter().position(|&c| usize::from(c) > cfg.null_note()) {
            return Err(Error::OutOfRange(format!("y[{i}] = {} is not a note class", self.y[i])));
        }
        if !self.t.is_finite() {
            return Err(Error::Numeric("flow time is not finite".into()));
        }
        if self.x_t.iter().chain(self.x_ctx).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite pitch input".into()));
        }
        Ok(n)
    }
}

struct BlockCache<T> {
    modv: Vec<T>,
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    ao: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    b: Vec<T>,
    f1: Vec<T>,
    g: Vec<T>,
    f2: Vec<T>,
}

/// Activations kept for the backward pass.
pub struct Cache<T> {
    n: usize,
    z0: Vec<T>,
    tfeat: Vec<T>,
    c1: Vec<T>,
    a1: Vec<T>,
    c: Vec<T>,
    sc: Vec<T>,
    rope_cos: Vec<T>,
    rope_sin: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    fmod: Vec<T>,
    xf: Vec<T>,
    rstdf: Vec<T>,
    o: Vec<T>,
}

/// Sinusoidal encoding of the flow time, scaled by 1000 as for diffusion steps.
pub fn time_features<T: Real>(t: T, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let tt = t.f64() * 1000.0;
    (0..dim)
        .map(|j| {
            let i = j % half;
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            T::lit(if j < half { (tt * freq).cos() } else { (tt * freq).sin() })
        })
        .collect()
}

fn rope_tables<T: Real>(n: usize, head_dim: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let pairs = head_dim / 2;
    let mut cos = Vec::with_capacity(n * pairs);
    let mut sin = Vec::with_capacity(n * pairs);
    for pos in 0..n {
        for i in 0..pairs {
            let theta = base.powf(-2.0 * i as f64 / head_dim as f64);
            let ang = pos as f64 * theta;
            cos.push(T::lit(ang.cos()));
            sin.push(T::lit(ang.sin()));
        }
    }
    (cos, sin)
}

/// Rotates consecutive channel pairs of every head. `inverse` applies the
/// transpose rotation, which is also the backward map.
fn apply_rope<T: Real>(buf: &mut [T], width: usize, head_dim: usize, cos: &[T], sin: &[T], inverse: bool) {
    let pairs = head_dim / 2;
    for (pos, row) in buf.chunks_exact_mut(width).enumerate() {
        let (c, s) = (&cos[pos * pairs..][..pairs], &sin[pos * pairs..][..pairs]);
        for head in row.chunks_exact_mut(head_dim) {
            for i in 0..pairs {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                let sn = if inverse { -s[i] } else { s[i] };
                head[2 * i] = a * c[i] - b * sn;
                head[2 * i + 1] = a * sn + b * c[i];
            }
        }
    }
}

fn modulate<T: Real>(xhat: &[T], shift: &[T], scale: &[T]) -> Vec<T> {
    let width = shift.len();
    let mut out = Vec::with_capacity(xhat.len());
    for row in xhat.chunks_exact(width) {
        for j in 0..width {
            out.push(row[j] * (T::one() + scale[j]) + shift[j]);
        }
    }
    out
}

/// Backward of [`modulate`]: returns `dxhat` and accumulates `dshift`, `dscale`.
fn modulate_backward<T: Real>(dy: &[T], xhat: &[T], scale: &[T], dshift: &mut [T], dscale: &mut [T]) -> Vec<T> {
    let width = scale.len();
    let mut dx = Vec::with_capacity(dy.len());
    for (g, x) in dy.chunks_exact(width).zip(xhat.chunks_exact(width)) {
        for j in 0..width {
            dshift[j] += g[j];
            dscale[j] += g[j] * x[j];
            dx.push(g[j] * (T::one() + scale[j]));
        }
    }
    dx
}

/// `h += gate ⊙ branch` (gate broadcast over rows).
fn gated_add<T: Real>(h: &mut [T], gate: &[T], branch: &[T]) {
    let width = gate.len();
    for (hr, br) in h.chunks_exact_mut(width).zip(branch.chunks_exact(width)) {
        for j in 0..width {
            hr[j] += gate[j] * br[j];
        }
    }
}

/// Disjoint mutable views of two parameter ranges.
fn pair_mut<'a, T>(buf: &'a mut [T], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    assert!(a.end <= b.start || b.end <= a.start, "overlapping ranges");
    if a.start < b.start {
        let (lo, hi) = buf.split_at_mut(b.start);
        (&mut lo[a.clone()], &mut hi[..b.len()])
    } else {
        let (lo, hi) = buf.split_at_mut(a.start);
        (&mut hi[..a.len()], &mut lo[b.clone()])
    }
}

fn linear_back<T: Real>(
    x: &[T],
    rows: usize,
    k: usize,
    w: &[T],
    dy: &[T],
    grads: &mut [T],
    wr: &Range<usize>,
    br: &Range<usize>,
    want_dx: bool,
) -> Vec<T> {
    let (dw, db) = pair_mut(grads, wr, br);
    linear_backward(x, rows, k, w, dy, dw, db, want_dx)
}

fn scale_slice<T: Real>(s: &mut [T], k: T) {
    for v in s {
        *v *= k;
    }
}

/// Velocity per frame.
pub fn forward<T: Real>(params: &Parameters<T>, input: &NetInput<'_, T>) -> Result<Vec<T>> {
    forward_with_cache(params, input).map(|(out, _)| out)
}

pub fn forward_with_cache<T: Real>(params: &Parameters<T>, input: &NetInput<'_, T>) -> Result<(Vec<T>, Cache<T>)> {
    let cfg = &params.config;
    let n = input.validate(cfg)?;
    let off = &params.layout.off;
    let w = &params.data[..];
    let (h1, h2, hu, h) = (cfg.pitch_embed, cfg.note_embed, cfg.unvoiced_embed, cfg.hidden);
    let din = cfg.input_width();

    let mut z0 = vec![T::zero(); n * din];
    for (i, row) in z0.chunks_exact_mut(din).enumerate() {
        let (e_xt, rest) = row.split_at_mut(h1);
        let (e_ctx, rest) = rest.split_at_mut(h1);
        let (e_y, e_u) = rest.split_at_mut(h2);
        for j in 0..h1 {
            e_xt[j] = input.x_t[i] * w[off.xt_w.start + j] + w[off.xt_b.start + j];
        }
        if input.drop.drop_ctx {
            e_ctx.copy_from_slice(&w[off.ctx_null.clone()]);
        } else {
            for j in 0..h1 {
                e_ctx[j] = input.x_ctx[i] * w[off.ctx_w.start + j] + w[off.ctx_b.start + j];
            }
        }
        let yi = if input.drop.drop_y { cfg.null_note() } else { usize::from(input.y[i]) };
        e_y.copy_from_slice(&w[off.note_table.start + yi * h2..][..h2]);
        let ui = if input.drop.drop_u { 2 } else { usize::from(input.u[i]) };
        e_u.copy_from_slice(&w[off.unvoiced_table.start + ui * hu..][..hu]);
    }
    let mut hs = vec![T::zero(); n * h];
    linear(&z0, n, din, &w[off.proj_w.clone()], &w[off.proj_b.clone()], &mut hs);

    let tfeat = time_features(input.t, cfg.time_freq_dim);
    let mut c1 = vec![T::zero(); h];
    linear(&tfeat, 1, cfg.time_freq_dim, &w[off.time1_w.clone()], &w[off.time1_b.clone()], &mut c1);
    let a1: Vec<T> = c1.iter().map(|&v| silu(v)).collect();
    let mut c = vec![T::zero(); h];
    linear(&a1, 1, h, &w[off.time2_w.clone()], &w[off.time2_b.clone()], &mut c);
    let sc: Vec<T> = c.iter().map(|&v| silu(v)).collect();

    let (rope_cos, rope_sin) = rope_tables::<T>(n, cfg.head_dim(), cfg.rope_base);
    let blocks = off
        .blocks
        .iter()
        .map(|bo| block_forward(cfg, w, bo, &sc, &rope_cos, &rope_sin, &mut hs, n))
        .collect();

    let mut fmod = vec![T::zero(); 2 * h];
    linear(&sc, 1, h, &w[off.final_ada_w.clone()], &w[off.final_ada_b.clone()], &mut fmod);
    let (xf, rstdf) = layer_norm(&hs, h);
    let o = modulate(&xf, &fmod[..h], &fmod[h..]);
    let mut out = vec![T::zero(); n];
    linear(&o, n, h, &w[off.head_w.clone()], &w[off.head_b.clone()], &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("network produced a non-finite velocity".into()));
    }
    let cache = Cache {
        n,
        z0,
        tfeat,
        c1,
        a1,
        c,
        sc,
        rope_cos,
        rope_sin,
        blocks,
        fmod,
        xf,
        rstdf,
        o,
    };
    Ok((out, cache))
}

#[allow(clippy::too_many_arguments)]
fn block_forward<T: Real>(
    cfg: &ModelConfig,
    w: &[T],
    bo: &BlockOffsets,
    sc: &[T],
    rope_cos: &[T],
    rope_sin: &[T],
    hs: &mut [T],
    n: usize,
) -> BlockCache<T> {
    let h = cfg.hidden;
    let d = cfg.head_dim();
    let r = cfg.mlp_hidden();
    let mut modv = vec![T::zero(); 6 * h];
    linear(sc, 1, h, &w[bo.ada_w.clone()], &w[bo.ada_b.clone()], &mut modv);
    let m = |k: usize| &modv[k * h..(k + 1) * h];

    let (xhat1, rstd1) = layer_norm(hs, h);
    let a = modulate(&xhat1, m(0), m(1));
    let mut qkv = vec![T::zero(); n * 3 * h];
    linear(&a, n, h, &w[bo.qkv_w.clone()], &w[bo.qkv_b.clone()], &mut qkv);
    let mut q = Vec::with_capacity(n * h);
    let mut k = Vec::with_capacity(n * h);
    let mut v = Vec::with_capacity(n * h);
    for row in qkv.chunks_exact(3 * h) {
        q.extend_from_slice(&row[..h]);
        k.extend_from_slice(&row[h..2 * h]);
        v.extend_from_slice(&row[2 * h..]);
    }
    apply_rope(&mut q, h, d, rope_cos, rope_sin, false);
    apply_rope(&mut k, h, d, rope_cos, rope_sin, false);

    let inv_sqrt_d = T::one() / T::from_usize(d).expect("head dim").sqrt();
    let mut probs = vec![T::zero(); cfg.n_heads * n * n];
    let mut att = vec![T::zero(); n * h];
    for (head, p) in probs.chunks_exact_mut(n * n).enumerate() {
        let col = head * d;
        gemm(
            View::cols_of(&q, n, h, col, d),
            View::cols_of(&k, n, h, col, d).t(),
            T::zero(),
            ViewMut::rm(p, n, n),
        );
        scale_slice(p, inv_sqrt_d);
        softmax_rows(p, n);
        gemm(
            View::rm(p, n, n),
            View::cols_of(&v, n, h, col, d),
            T::zero(),
            ViewMut::cols_of(&mut att, n, h, col, d),
        );
    }
    let mut ao = vec![T::zero(); n * h];
    linear(&att, n, h, &w[bo.out_w.clone()], &w[bo.out_b.clone()], &mut ao);
    gated_add(hs, m(2), &ao);

    let (xhat2, rstd2) = layer_norm(hs, h);
    let b = modulate(&xhat2, m(3), m(4));
    let mut f1 = vec![T::zero(); n * r];
    linear(&b, n, h, &w[bo.fc1_w.clone()], &w[bo.fc1_b.clone()], &mut f1);
    let g: Vec<T> = f1.iter().map(|&v| gelu(v)).collect();
    let mut f2 = vec![T::zero(); n * h];
    linear(&g, n, r, &w[bo.fc2_w.clone()], &w[bo.fc2_b.clone()], &mut f2);
    gated_add(hs, m(5), &f2);

    BlockCache {
        modv,
        xhat1,
        rstd1,
        a,
        q,
        k,
        v,
        probs,
        att,
        ao,
        xhat2,
        rstd2,
        b,
        f1,
        g,
        f2,
    }
}

/// Backpropagates `d_out` (one value per frame). Parameter gradients are
/// accumulated into `grads` (same layout as `params.data`); the gradient with
/// respect to `x_t` is returned.
pub fn backward<T: Real>(
    params: &Parameters<T>,
    input: &NetInput<'_, T>,
    cache: &Cache<T>,
    d_out: &[T],
    grads: &mut [T],
) -> Vec<T> {
    let cfg = &params.config;
    let off = &params.layout.off;
    let w = &params.data[..];
    let n = cache.n;
    assert_eq!(d_out.len(), n, "output gradient length");
    assert_eq!(grads.len(), w.len(), "gradient buffer length");
    let (h1, h2, hu, h) = (cfg.pitch_embed, cfg.note_embed, cfg.unvoiced_embed, cfg.hidden);
    let din = cfg.input_width();
    let mut dsc = vec![T::zero(); h];

    // Head and final modulation.
    let d_o = linear_back(&cache.o, n, h, &w[off.head_w.clone()], d_out, grads, &off.head_w, &off.head_b, true);
    let mut dfmod = vec![T::zero(); 2 * h];
    let dxf = {
        let (dshift, dscale) = dfmod.split_at_mut(h);
        modulate_backward(&d_o, &cache.xf, &cache.fmod[h..], dshift, dscale)
    };
    let mut dh = vec![T::zero(); n * h];
    layer_norm_backward(&dxf, &cache.xf, &cache.rstdf, h, &mut dh);
    let dsc_f = linear_back(
        &cache.sc,
        1,
        h,
        &w[off.final_ada_w.clone()],
        &dfmod,
        grads,
        &off.final_ada_w,
        &off.final_ada_b,
        true,
    );
    add_into(&mut dsc, &dsc_f);

    for (bo, bc) in off.blocks.iter().zip(&cache.blocks).rev() {
        let dsc_b = block_backward(cfg, w, bo, bc, &cache.sc, &cache.rope_cos, &cache.rope_sin, &mut dh, grads, n);
        add_into(&mut dsc, &dsc_b);
    }

    // Time embedding MLP.
    let dc: Vec<T> = dsc.iter().zip(&cache.c).map(|(&g, &x)| g * silu_grad(x)).collect();
    let da1 = linear_back(&cache.a1, 1, h, &w[off.time2_w.clone()], &dc, grads, &off.time2_w, &off.time2_b, true);
    let dc1: Vec<T> = da1.iter().zip(&cache.c1).map(|(&g, &x)| g * silu_grad(x)).collect();
    linear_back(
        &cache.tfeat,
        1,
        cfg.time_freq_dim,
        &w[off.time1_w.clone()],
        &dc1,
        grads,
        &off.time1_w,
        &off.time1_b,
        false,
    );

    // Input embeddings.
    let dz0 = linear_back(&cache.z0, n, din, &w[off.proj_w.clone()], &dh, grads, &off.proj_w, &off.proj_b, true);
    let mut dx_t = vec![T::zero(); n];
    for (i, row) in dz0.chunks_exact(din).enumerate() {
        let (d_xt, rest) = row.split_at(h1);
        let (d_ctx, rest) = rest.split_at(h1);
        let (d_y, d_u) = rest.split_at(h2);
        let mut acc = T::zero();
        for j in 0..h1 {
            grads[off.xt_w.start + j] += input.x_t[i] * d_xt[j];
            grads[off.xt_b.start + j] += d_xt[j];
            acc += d_xt[j] * w[off.xt_w.start + j];
        }
        dx_t[i] = acc;
        if input.drop.drop_ctx {
            add_into(&mut grads[off.ctx_null.clone()], d_ctx);
        } else {
            for j in 0..h1 {
                grads[off.ctx_w.start + j] += input.x_ctx[i] * d_ctx[j];
                grads[off.ctx_b.start + j] += d_ctx[j];
            }
        }
        let yi = if input.drop.drop_y { cfg.null_note() } else { usize::from(input.y[i]) };
        add_into(&mut grads[off.note_table.start + yi * h2..][..h2], d_y);
        let ui = if input.drop.drop_u { 2 } else { usize::from(input.u[i]) };
        add_into(&mut grads[off.unvoiced_table.start + ui * hu..][..hu], d_u);
    }
    dx_t
}

fn add_into<T: Real>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Column sums of `a ⊙ b` accumulated into `out`.
fn col_dot<T: Real>(a: &[T], b: &[T], out: &mut [T]) {
    let width = out.len();
    for (ar, br) in a.chunks_exact(width).zip(b.chunks_exact(width)) {
        for j in 0..width {
            out[j] += ar[j] * br[j];
        }
    }
}

fn scale_cols<T: Real>(x: &[T], s: &[T]) -> Vec<T> {
    let width = s.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(width) {
        out.extend(row.iter().zip(s).map(|(&a, &b)| a * b));
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn block_backward<T: Real>(
    cfg: &ModelConfig,
    w: &[T],
    bo: &BlockOffsets,
    bc: &BlockCache<T>,
    sc: &[T],
    rope_cos: &[T],
    rope_sin: &[T],
    dh: &mut [T],
    grads: &mut [T],
    n: usize,
) -> Vec<T> {
    let h = cfg.hidden;
    let d = cfg.head_dim();
    let r = cfg.mlp_hidden();
    let m = |k: usize| &bc.modv[k * h..(k + 1) * h];
    let mut dmod = vec![T::zero(); 6 * h];

    // MLP branch.
    col_dot(dh, &bc.f2, &mut dmod[5 * h..6 * h]);
    let df2 = scale_cols(dh, m(5));
    let dg = linear_back(&bc.g, n, r, &w[bo.fc2_w.clone()], &df2, grads, &bo.fc2_w, &bo.fc2_b, true);
    let df1: Vec<T> = dg.iter().zip(&bc.f1).map(|(&g, &x)| g * gelu_grad(x)).collect();
    let db = linear_back(&bc.b, n, h, &w[bo.fc1_w.clone()], &df1, grads, &bo.fc1_w, &bo.fc1_b, true);
    let dxhat2 = {
        let (lo, hi) = dmod.split_at_mut(4 * h);
        modulate_backward(&db, &bc.xhat2, m(4), &mut lo[3 * h..], &mut hi[..h])
    };
    layer_norm_backward(&dxhat2, &bc.xhat2, &bc.rstd2, h, dh);

    // Attention branch.
    col_dot(dh, &bc.ao, &mut dmod[2 * h..3 * h]);
    let dao = scale_cols(dh, m(2));
    let datt = linear_back(&bc.att, n, h, &w[bo.out_w.clone()], &dao, grads, &bo.out_w, &bo.out_b, true);
    let inv_sqrt_d = T::one() / T::from_usize(d).expect("head dim").sqrt();
    let mut dq = vec![T::zero(); n * h];
    let mut dk = vec![T::zero(); n * h];
    let mut dv = vec![T::zero(); n * h];
    let mut ds = vec![T::zero(); n * n];
    for (head, p) in bc.probs.chunks_exact(n * n).enumerate() {
        let col = head * d;
        gemm(
            View::rm(p, n, n).t(),
            View::cols_of(&datt, n, h, col, d),
            T::zero(),
            ViewMut::cols_of(&mut dv, n, h, col, d),
        );
        gemm(
            View::cols_of(&datt, n, h, col, d),
            View::cols_of(&bc.v, n, h, col, d).t(),
            T::zero(),
            ViewMut::rm(&mut ds, n, n),
        );
        for (dsr, pr) in ds.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
            let dot: T = dsr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
            for (g, &pv) in dsr.iter_mut().zip(pr) {
                *g = pv * (*g - dot) * inv_sqrt_d;
            }
        }
        gemm(
            View::rm(&ds, n, n),
            View::cols_of(&bc.k, n, h, col, d),
            T::zero(),
            ViewMut::cols_of(&mut dq, n, h, col, d),
        );
        gemm(
            View::rm(&ds, n, n).t(),
            View::cols_of(&bc.q, n, h, col, d),
            T::zero(),
            ViewMut::cols_of(&mut dk, n, h, col, d),
        );
    }
    apply_rope(&mut dq, h, d, rope_cos, rope_sin, true);
    apply_rope(&mut dk, h, d, rope_cos, rope_sin, true);
    let mut dqkv = Vec::with_capacity(n * 3 * h);
    for i in 0..n {
        let row = i * h..(i + 1) * h;
        dqkv.extend_from_slice(&dq[row.clone()]);
        dqkv.extend_from_slice(&dk[row.clone()]);
        dqkv.extend_from_slice(&dv[row]);
    }
    let da = linear_back(&bc.a, n, h, &w[bo.qkv_w.clone()], &dqkv, grads, &bo.qkv_w, &bo.qkv_b, true);
    let dxhat1 = {
        let (lo, hi) = dmod.split_at_mut(h);
        modulate_backward(&da, &bc.xhat1, m(1), lo, &mut hi[..h])
    };
    layer_norm_backward(&dxhat1, &bc.xhat1, &bc.rstd1, h, dh);

    linear_back(sc, 1, h, &w[bo.ada_w.clone()], &dmod, grads, &bo.ada_w, &bo.ada_b, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng as _;

    struct Case {
        x_t: Vec<f64>,
        x_ctx: Vec<f64>,
        y: Vec<u8>,
        u: Vec<bool>,
        t: f64,
    }

    fn case(n: usize, seed: u64) -> Case {
        let mut rng = rng_from(seed, &[99]);
        Case {
            x_t: (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            x_ctx: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            y: (0..n).map(|_| rng.gen_range(0..=72)).collect(),
            u: (0..n).map(|_| rng.gen_bool(0.3)).collect(),
            t: rng.gen_range(0.0..1.0),
        }
    }

    impl Case {
        fn input(&self, drop: DropFlags) -> NetInput<'_, f64> {
            NetInput {
                x_t: &self.x_t,
                t: self.t,
                y: &self.y,
                x_ctx: &self.x_ctx,
                u: &self.u,
                drop,
            }
        }
    }

    /// Tiny parameters with the zero-initialized modulation layers perturbed,
    /// so every branch carries gradient.
    fn tiny_params(seed: u64) -> Parameters<f64> {
        let mut p = Parameters::<f64>::init(ModelConfig::tiny(), &mut rng_from(seed, &[])).unwrap();
        let mut rng = rng_from(seed, &[1]);
        for v in &mut p.data {
            *v += rng.gen_range(-0.05..0.05);
        }
        p
    }

    #[test]
    fn output_length_matches_input() {
        let p = tiny_params(3);
        for n in [1, 7, 64] {
            let c = case(n, n as u64);
            assert_eq!(forward(&p, &c.input(DropFlags::NONE)).unwrap().len(), n);
        }
        let c = case(65, 0);
        assert!(forward(&p, &c.input(DropFlags::NONE)).is_err());
    }

    #[test]
    fn dropping_y_equals_null_sentinel() {
        let p = tiny_params(4);
        let c = case(20, 1);
        let dropped = forward(&p, &c.input(DropFlags { drop_y: true, ..DropFlags::NONE })).unwrap();
        let sentinel = Case {
            y: vec![73; 20],
            ..case(20, 1)
        };
        assert_eq!(dropped, forward(&p, &sentinel.input(DropFlags::NONE)).unwrap());
    }

    #[test]
    fn dropping_ctx_and_u_equals_null_embedding_substitution() {
        let p = tiny_params(5);
        let c = case(16, 2);
        let off = p.layout.off.clone();
        let mut sub = p.clone();
        for j in 0..sub.config.pitch_embed {
            sub.data[off.ctx_w.start + j] = 0.0;
            sub.data[off.ctx_b.start + j] = p.data[off.ctx_null.start + j];
        }
        let hu = sub.config.unvoiced_embed;
        for row in 0..2 {
            for j in 0..hu {
                sub.data[off.unvoiced_table.start + row * hu + j] = p.data[off.unvoiced_table.start + 2 * hu + j];
            }
        }
        let dropped = forward(&p, &c.input(DropFlags { drop_ctx: true, drop_u: true, drop_y: false })).unwrap();
        assert_eq!(dropped, forward(&sub, &c.input(DropFlags::NONE)).unwrap());
    }

    #[test]
    fn positions_matter() {
        let p = tiny_params(6);
        let c = case(24, 3);
        let a = forward(&p, &c.input(DropFlags::NONE)).unwrap();
        let shifted = Case {
            x_t: c.x_t[1..].iter().chain(&c.x_t[..1]).copied().collect(),
            x_ctx: c.x_ctx[1..].iter().chain(&c.x_ctx[..1]).copied().collect(),
            y: c.y[1..].iter().chain(&c.y[..1]).copied().collect(),
            u: c.u[1..].iter().chain(&c.u[..1]).copied().collect(),
            t: c.t,
        };
        let b = forward(&p, &shifted.input(DropFlags::NONE)).unwrap();
        let rotated: Vec<f64> = a[1..].iter().chain(&a[..1]).copied().collect();
        assert!(rotated.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    fn weighted_output(p: &Parameters<f64>, inp: &NetInput<'_, f64>, wts: &[f64]) -> f64 {
        forward(p, inp).unwrap().iter().zip(wts).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let p = tiny_params(7);
        let c = case(64, 4);
        let wts: Vec<f64> = (0..64).map(|i| ((i as f64) * 0.7).sin()).collect();
        let inp = c.input(DropFlags::NONE);
        let (_, cache) = forward_with_cache(&p, &inp).unwrap();
        let mut grads = vec![0.0; p.data.len()];
        let dx = backward(&p, &inp, &cache, &wts, &mut grads);
        let eps = 1e-5;
        for i in 0..64 {
            let mut hi = case(64, 4);
            hi.x_t[i] += eps;
            let mut lo = case(64, 4);
            lo.x_t[i] -= eps;
            let fd = (weighted_output(&p, &hi.input(DropFlags::NONE), &wts)
                - weighted_output(&p, &lo.input(DropFlags::NONE), &wts))
                / (2.0 * eps);
            let rel = (fd - dx[i]).abs() / fd.abs().max(dx[i].abs()).max(1e-7);
            assert!(rel < 1e-3, "frame {i}: analytic {} vs fd {fd}", dx[i]);
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut p = tiny_params(8);
        let c = case(12, 5);
        let wts: Vec<f64> = (0..12).map(|i| ((i as f64) * 1.3).cos()).collect();
        for drop in [DropFlags::NONE, DropFlags::ALL] {
            let inp = c.input(drop);
            let (_, cache) = forward_with_cache(&p, &inp).unwrap();
            let mut grads = vec![0.0; p.data.len()];
            backward(&p, &inp, &cache, &wts, &mut grads);
            let mut rng = rng_from(9, &[]);
            let tensors = p.layout.tensors.clone();
            for t in &tensors {
                for _ in 0..6 {
                    let idx = t.offset + rng.gen_range(0..t.len);
                    let orig = p.data[idx];
                    let eps = 1e-5;
                    p.data[idx] = orig + eps;
                    let fp = weighted_output(&p, &inp, &wts);
                    p.data[idx] = orig - eps;
                    let fm = weighted_output(&p, &inp, &wts);
                    p.data[idx] = orig;
                    let fd = (fp - fm) / (2.0 * eps);
                    let g = grads[idx];
                    let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-7);
                    assert!(rel < 1e-3, "{} [{idx}]: analytic {g} vs fd {fd}", t.name);
                }
            }
        }
    }
}
