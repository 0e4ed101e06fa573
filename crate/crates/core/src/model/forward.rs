//! Forward pass, next-token loss, and hand-derived backward pass.
//!
//! Everything is per sequence: a batch is a list of independent sequences, so
//! per-example gradients fall out directly and the batch dimension can be
//! spread across threads.

use rayon::prelude::*;

use super::{
    AttnMat, Block, FfnMat, Factor, GradLayout, LayerAdapter, LnSlot, LoraPair, Model, ParamId,
    ParamSubset, LN_EPS,
};
use crate::corpus::TokenBlock;
use crate::error::{Error, Result};
use crate::tensor::{Float, Mat};

/// `out(m×n) += scale · aᵀ(m×k) · b(k×n)` where `a` is `k×m`.
fn acc_tn<T: Float>(a: &Mat<T>, b: &Mat<T>, scale: T, out: &mut [T]) {
    debug_assert_eq!(a.rows(), b.rows());
    debug_assert_eq!(out.len(), a.cols() * b.cols());
    T::gemm(
        a.cols(),
        a.rows(),
        b.cols(),
        scale,
        a.as_slice(),
        1,
        a.cols() as isize,
        b.as_slice(),
        b.cols() as isize,
        1,
        T::one(),
        out,
        b.cols() as isize,
        1,
    );
}

/// `out = beta·out + scale · a · bᵀ`
fn nt_into<T: Float>(a: &Mat<T>, b: &Mat<T>, scale: T, beta: T, out: &mut Mat<T>) {
    debug_assert_eq!(a.cols(), b.cols());
    let (m, n) = (a.rows(), b.rows());
    debug_assert_eq!(out.shape(), (m, n));
    T::gemm(
        m,
        a.cols(),
        n,
        scale,
        a.as_slice(),
        a.cols() as isize,
        1,
        b.as_slice(),
        1,
        b.cols() as isize,
        beta,
        out.as_mut_slice(),
        n as isize,
        1,
    );
}

/// `out = beta·out + scale · a · b`
fn nn_into<T: Float>(a: &Mat<T>, b: &Mat<T>, scale: T, beta: T, out: &mut Mat<T>) {
    debug_assert_eq!(a.cols(), b.rows());
    let (m, n) = (a.rows(), b.cols());
    debug_assert_eq!(out.shape(), (m, n));
    T::gemm(
        m,
        a.cols(),
        n,
        scale,
        a.as_slice(),
        a.cols() as isize,
        1,
        b.as_slice(),
        n as isize,
        1,
        beta,
        out.as_mut_slice(),
        n as isize,
        1,
    );
}

struct LnCache<T> {
    xhat: Mat<T>,
    rstd: Vec<T>,
}

fn ln_forward<T: Float>(x: &Mat<T>, gain: &Mat<T>, bias: &Mat<T>) -> (Mat<T>, LnCache<T>) {
    let (s, d) = x.shape();
    let inv_d = T::one() / T::from_usize(d).expect("dim fits");
    let eps = T::from_f64_lossy(LN_EPS);
    let mut y = Mat::zeros(s, d);
    let mut xhat = Mat::zeros(s, d);
    let mut rstd = Vec::with_capacity(s);
    for i in 0..s {
        let row = x.row(i);
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            * inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for j in 0..d {
            xh[j] = (row[j] - mean) * r;
        }
        let yr = y.row_mut(i);
        let (g, b) = (gain.as_slice(), bias.as_slice());
        for j in 0..d {
            yr[j] = xhat.get(i, j) * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Adds the input gradient into `dx`; accumulates gain/bias grads when given.
fn ln_backward<T: Float>(
    dy: &Mat<T>,
    cache: &LnCache<T>,
    gain: &Mat<T>,
    dx: &mut Mat<T>,
    mut dgain: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let (s, d) = dy.shape();
    let inv_d = T::one() / T::from_usize(d).expect("dim fits");
    let g = gain.as_slice();
    let mut dxhat = vec![T::zero(); d];
    for i in 0..s {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..d {
            dxhat[j] = dyr[j] * g[j];
            m1 = m1 + dxhat[j];
            m2 = m2 + dxhat[j] * xh[j];
        }
        m1 = m1 * inv_d;
        m2 = m2 * inv_d;
        let r = cache.rstd[i];
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = out[j] + r * (dxhat[j] - m1 - xh[j] * m2);
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for j in 0..d {
                dg[j] = dg[j] + dyr[j] * xh[j];
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for j in 0..d {
                db[j] = db[j] + dyr[j];
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<T: Float>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let k = T::from_f64_lossy(GELU_K);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let k = T::from_f64_lossy(GELU_K);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// Adapters active for one layer under the current route.
struct Active<'a, T> {
    expert: Option<&'a LayerAdapter<T>>,
    common: Option<&'a LayerAdapter<T>>,
}

struct LoraCache<T> {
    expert: Option<Mat<T>>,
    common: Option<Mat<T>>,
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    a1: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    probs: Vec<Mat<T>>,
    o: Mat<T>,
    ln2: LnCache<T>,
    a2: Mat<T>,
    u_in: LoraCache<T>,
    h_pre: Mat<T>,
    g: Mat<T>,
    u_out: LoraCache<T>,
}

struct Trace<T> {
    n_prompt: usize,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    xf: Mat<T>,
}

/// `y = x·W + α·(x·B)·A` for the active pairs; returns the `x·B` products.
fn lora_forward<T: Float>(
    x: &Mat<T>,
    w: &Mat<T>,
    active: &Active<'_, T>,
    which: FfnMat,
    alpha: T,
) -> (Mat<T>, LoraCache<T>) {
    let mut y = x.matmul(w);
    let mut apply = |adapter: Option<&LayerAdapter<T>>| {
        adapter.map(|a| {
            let pair = a.pair(which);
            let u = x.matmul(&pair.b);
            nn_into(&u, &pair.a, alpha, T::one(), &mut y);
            u
        })
    };
    let expert = apply(active.expert);
    let common = apply(active.common);
    (y, LoraCache { expert, common })
}

impl<T: Float> Model<T> {
    fn active(&self, layer: usize, route: usize) -> Result<Active<'_, T>> {
        let Some(e) = &self.experts else {
            return Ok(Active {
                expert: None,
                common: None,
            });
        };
        let expert = if e.has_experts() {
            let d = e.domains.get(route).ok_or(Error::Domain {
                domain: route,
                k: e.domains.len(),
            })?;
            Some(&d[layer])
        } else {
            None
        };
        Ok(Active {
            expert,
            common: e.common.as_ref().map(|c| &c[layer]),
        })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let cfg = &self.config;
        if tokens.is_empty() || tokens.len() > cfg.context_length {
            return Err(Error::invalid(
                "block",
                format!("{} tokens, context length is {}", tokens.len(), cfg.context_length),
            ));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::invalid("block", format!("token {t} >= V")));
        }
        if let Some(p) = &self.prompts {
            if p.shape() != (cfg.n_pt, cfg.d_model) {
                return Err(Error::Shape {
                    what: "prompts".into(),
                    expected: (cfg.n_pt, cfg.d_model),
                    got: p.shape(),
                });
            }
        }
        Ok(())
    }

    fn run(&self, tokens: &[u32], route: usize) -> Result<(Mat<T>, Trace<T>)> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let bb = &self.backbone;
        let d = cfg.d_model;
        let np = self.n_prompt_rows();
        let n = tokens.len();
        let s = np + n;
        let alpha = T::from_f64_lossy(self.experts.as_ref().map_or(0.0, |e| e.alpha));

        let mut x = Mat::zeros(s, d);
        if let Some(p) = &self.prompts {
            for i in 0..np {
                let (pr, pos) = (p.row(i), bb.pos_emb.row(i));
                let xr = x.row_mut(i);
                for j in 0..d {
                    xr[j] = pr[j] + pos[j];
                }
            }
        }
        for (i, &t) in tokens.iter().enumerate() {
            let (e, pos) = (bb.tok_emb.row(t as usize), bb.pos_emb.row(cfg.n_pt + i));
            let xr = x.row_mut(np + i);
            for j in 0..d {
                xr[j] = e[j] + pos[j];
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (l, blk) in bb.layers.iter().enumerate() {
            let active = self.active(l, route)?;
            let (x_next, cache) = layer_forward(cfg.n_heads, blk, &active, alpha, x);
            x = x_next;
            layers.push(cache);
        }
        let (xf, lnf) = ln_forward(&x, &bb.ln_f.gain, &bb.ln_f.bias);
        let real = xf.slice_rows(np, s);
        let logits = real.matmul(&bb.lm_head);
        Ok((
            logits,
            Trace {
                n_prompt: np,
                layers,
                lnf,
                xf,
            },
        ))
    }

    /// Logits for the real tokens of `tokens` (`len × V`).
    pub fn logits(&self, route: usize, tokens: &[u32]) -> Result<Mat<T>> {
        Ok(self.run(tokens, route)?.0)
    }

    /// `L × V` logits for a block. Rows at pad positions are zero: under
    /// causal attention they cannot influence any real position.
    pub fn forward(&self, route: usize, block: &TokenBlock) -> Result<Mat<T>> {
        if block.len() != self.config.context_length {
            return Err(Error::invalid(
                "block",
                format!(
                    "length {} != context length {}",
                    block.len(),
                    self.config.context_length
                ),
            ));
        }
        let real = block.real_len();
        if real == 0 {
            return Err(Error::TooShort { got: 0 });
        }
        let logits = self.logits(route, &block.tokens[..real])?;
        let mut out = Mat::zeros(block.len(), self.config.vocab_size);
        out.as_mut_slice()[..logits.len()].copy_from_slice(logits.as_slice());
        Ok(out)
    }

    /// Teacher-forced average next-token log-likelihood (natural log).
    pub fn sequence_log_likelihood(&self, route: usize, tokens: &[u32]) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::TooShort { got: tokens.len() });
        }
        let logits = self.logits(route, tokens)?;
        Ok(-cross_entropy(&logits, tokens).0)
    }

    /// Argmax prediction for each of positions `2..=len` (length `len − 1`).
    pub fn predictions(&self, route: usize, tokens: &[u32]) -> Result<Vec<u32>> {
        if tokens.len() < 2 {
            return Err(Error::TooShort { got: tokens.len() });
        }
        let logits = self.logits(route, tokens)?;
        Ok((0..tokens.len() - 1)
            .map(|i| argmax(logits.row(i)) as u32)
            .collect())
    }

    /// Loss and flat gradient for one example under `layout`.
    fn example_grad(&self, layout: &GradLayout, block: &TokenBlock) -> Result<(f64, Vec<T>)> {
        let tokens = block.real_tokens();
        if tokens.len() < 2 {
            return Err(Error::TooShort { got: tokens.len() });
        }
        let route = block.domain;
        let (logits, trace) = self.run(tokens, route)?;
        let (loss, dlogits) = cross_entropy(&logits, tokens);
        let grad = self.backward(layout, tokens, route, &trace, &dlogits.expect("n >= 2"))?;
        Ok((loss, grad))
    }

    fn backward(
        &self,
        layout: &GradLayout,
        tokens: &[u32],
        route: usize,
        trace: &Trace<T>,
        dlogits: &Mat<T>,
    ) -> Result<Vec<T>> {
        let cfg = &self.config;
        let bb = &self.backbone;
        let d = cfg.d_model;
        let np = trace.n_prompt;
        let n = tokens.len();
        let s = np + n;
        let alpha = T::from_f64_lossy(self.experts.as_ref().map_or(0.0, |e| e.alpha));
        let mut grad = vec![T::zero(); layout.total()];

        if let Some(slot) = layout.slot(ParamId::LmHead) {
            let real = trace.xf.slice_rows(np, s);
            acc_tn(&real, dlogits, T::one(), &mut grad[slot.range()]);
        }
        let mut dxf = Mat::zeros(s, d);
        {
            let mut tail = Mat::zeros(n, d);
            nt_into(dlogits, &bb.lm_head, T::one(), T::zero(), &mut tail);
            dxf.as_mut_slice()[np * d..].copy_from_slice(tail.as_slice());
        }
        let mut dx = Mat::zeros(s, d);
        {
            let (g, b) = split_two(&mut grad, layout, ParamId::FinalLnGain, ParamId::FinalLnBias);
            ln_backward(&dxf, &trace.lnf, &bb.ln_f.gain, &mut dx, g, b);
        }

        for l in (0..cfg.n_layers).rev() {
            let active = self.active(l, route)?;
            dx = layer_backward(
                l,
                cfg.n_heads,
                &bb.layers[l],
                &active,
                route,
                alpha,
                &trace.layers[l],
                dx,
                layout,
                &mut grad,
            );
        }

        if let Some(slot) = layout.slot(ParamId::Prompts) {
            grad[slot.range()].copy_from_slice(&dx.as_slice()[..np * d]);
        }
        if let Some(slot) = layout.slot(ParamId::PosEmb) {
            let g = &mut grad[slot.range()];
            for i in 0..np {
                add_row(&mut g[i * d..(i + 1) * d], dx.row(i));
            }
            for i in 0..n {
                let r = cfg.n_pt + i;
                add_row(&mut g[r * d..(r + 1) * d], dx.row(np + i));
            }
        }
        if let Some(slot) = layout.slot(ParamId::TokEmb) {
            let g = &mut grad[slot.range()];
            for (i, &t) in tokens.iter().enumerate() {
                let r = t as usize;
                add_row(&mut g[r * d..(r + 1) * d], dx.row(np + i));
            }
        }
        Ok(grad)
    }

    /// Per-example losses and gradients of exactly the parameters in `subset`.
    /// Each example is routed to the expert of its own domain label.
    pub fn per_sample_grads(
        &self,
        subset: &ParamSubset,
        blocks: &[TokenBlock],
    ) -> Result<PerSampleGrads<T>> {
        let layout = self.layout(subset)?;
        let results: Vec<Result<(f64, Vec<T>)>> = blocks
            .par_iter()
            .map(|b| self.example_grad(&layout, b))
            .collect();
        let mut losses = Vec::with_capacity(blocks.len());
        let mut grads = Vec::with_capacity(blocks.len());
        for r in results {
            let (l, g) = r?;
            losses.push(l);
            grads.push(g);
        }
        Ok(PerSampleGrads {
            layout,
            losses,
            grads,
        })
    }
}

/// Output of [`Model::per_sample_grads`].
#[derive(Clone, Debug)]
pub struct PerSampleGrads<T> {
    pub layout: GradLayout,
    pub losses: Vec<f64>,
    pub grads: Vec<Vec<T>>,
}

impl<T: Float> PerSampleGrads<T> {
    /// Mean gradient over the batch, summed in example order.
    pub fn mean(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.layout.total()];
        for g in &self.grads {
            for (o, v) in out.iter_mut().zip(g) {
                *o = *o + *v;
            }
        }
        let inv = T::one() / T::from_usize(self.grads.len().max(1)).expect("fits");
        out.iter_mut().for_each(|v| *v = *v * inv);
        out
    }

    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len().max(1) as f64
    }
}

fn add_row<T: Float>(dst: &mut [T], src: &[T]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a = *a + *b;
    }
}

fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean next-token cross-entropy of `logits` (`len × V`, row `i` predicting
/// `tokens[i + 1]`) and its gradient. Returns `None` for the gradient when
/// fewer than two tokens are given.
fn cross_entropy<T: Float>(logits: &Mat<T>, tokens: &[u32]) -> (f64, Option<Mat<T>>) {
    let n = tokens.len();
    if n < 2 {
        return (f64::NAN, None);
    }
    let targets = n - 1;
    let v = logits.cols();
    let inv = T::one() / T::from_usize(targets).expect("fits");
    let mut grad = Mat::zeros(n, v);
    let mut total = 0.0f64;
    for i in 0..targets {
        let row = logits.row(i);
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let sum = row.iter().fold(T::zero(), |a, &b| a + (b - m).exp());
        let lse = m + sum.ln();
        let t = tokens[i + 1] as usize;
        total += (lse - row[t]).to_f64_lossy();
        let g = grad.row_mut(i);
        for j in 0..v {
            g[j] = (row[j] - lse).exp() * inv;
        }
        g[t] = g[t] - inv;
    }
    (total / targets as f64, Some(grad))
}

/// Mean next-token cross-entropy over positions whose target is a real token.
pub fn loss_from_logits<T: Float>(logits: &Mat<T>, block: &TokenBlock) -> Result<f64> {
    if logits.shape() != (block.len(), logits.cols()) || logits.rows() != block.len() {
        return Err(Error::Shape {
            what: "logits".into(),
            expected: (block.len(), logits.cols()),
            got: logits.shape(),
        });
    }
    let real = block.real_len();
    if real < 2 {
        return Err(Error::TooShort { got: real });
    }
    Ok(cross_entropy(&logits.slice_rows(0, real), &block.tokens[..real]).0)
}

fn layer_forward<T: Float>(
    n_heads: usize,
    blk: &Block<T>,
    active: &Active<'_, T>,
    alpha: T,
    x: Mat<T>,
) -> (Mat<T>, LayerCache<T>) {
    let (s, d) = x.shape();
    let dh = d / n_heads;
    let scale = T::one() / T::from_usize(dh).expect("fits").sqrt();

    let (a1, ln1) = ln_forward(&x, &blk.ln1.gain, &blk.ln1.bias);
    let q = a1.matmul(&blk.wq);
    let k = a1.matmul(&blk.wk);
    let v = a1.matmul(&blk.wv);
    let mut o = Mat::zeros(s, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let off = h * dh;
        let mut p = Mat::zeros(s, s);
        T::gemm(
            s,
            dh,
            s,
            scale,
            &q.as_slice()[off..],
            d as isize,
            1,
            &k.as_slice()[off..],
            1,
            d as isize,
            T::zero(),
            p.as_mut_slice(),
            s as isize,
            1,
        );
        for i in 0..s {
            let row = p.row_mut(i);
            let m = row[..=i].iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut sum = T::zero();
            for v in row[..=i].iter_mut() {
                *v = (*v - m).exp();
                sum = sum + *v;
            }
            for v in row[..=i].iter_mut() {
                *v = *v / sum;
            }
            for v in row[i + 1..].iter_mut() {
                *v = T::zero();
            }
        }
        T::gemm(
            s,
            s,
            dh,
            T::one(),
            p.as_slice(),
            s as isize,
            1,
            &v.as_slice()[off..],
            d as isize,
            1,
            T::zero(),
            &mut o.as_mut_slice()[off..],
            d as isize,
            1,
        );
        probs.push(p);
    }
    let mut x1 = o.matmul(&blk.wo);
    x1.add_assign(&x);

    let (a2, ln2) = ln_forward(&x1, &blk.ln2.gain, &blk.ln2.bias);
    let (h_pre, u_in) = lora_forward(&a2, &blk.w_in, active, FfnMat::Wi, alpha);
    let mut g = h_pre.clone();
    g.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
    let (f, u_out) = lora_forward(&g, &blk.w_out, active, FfnMat::Wo, alpha);
    let mut x2 = f;
    x2.add_assign(&x1);

    (
        x2,
        LayerCache {
            ln1,
            a1,
            q,
            k,
            v,
            probs,
            o,
            ln2,
            a2,
            u_in,
            h_pre,
            g,
            u_out,
        },
    )
}

/// Disjoint mutable views of two gradient slots (either may be absent).
fn split_two<'a, T>(
    grad: &'a mut [T],
    layout: &GradLayout,
    a: ParamId,
    b: ParamId,
) -> (Option<&'a mut [T]>, Option<&'a mut [T]>) {
    let ra = layout.slot(a).map(|s| s.range());
    let rb = layout.slot(b).map(|s| s.range());
    match (ra, rb) {
        (None, None) => (None, None),
        (Some(r), None) => (Some(&mut grad[r]), None),
        (None, Some(r)) => (None, Some(&mut grad[r])),
        (Some(ra), Some(rb)) => {
            if ra.start < rb.start {
                let (lo, hi) = grad.split_at_mut(rb.start);
                (Some(&mut lo[ra]), Some(&mut hi[..rb.end - rb.start]))
            } else {
                let (lo, hi) = grad.split_at_mut(ra.start);
                (Some(&mut hi[..ra.end - ra.start]), Some(&mut lo[rb]))
            }
        }
    }
}

/// Backward through `y = x·W + α·(x·B)·A` (+ common pair). Returns `dx`.
#[allow(clippy::too_many_arguments)]
fn lora_backward<T: Float>(
    dy: &Mat<T>,
    x: &Mat<T>,
    w: &Mat<T>,
    cache: &LoraCache<T>,
    active: &Active<'_, T>,
    which: FfnMat,
    alpha: T,
    layer: usize,
    route: usize,
    layout: &GradLayout,
    grad: &mut [T],
) -> Mat<T> {
    let mut dx = Mat::zeros(x.rows(), x.cols());
    nt_into(dy, w, T::one(), T::zero(), &mut dx);
    if let Some(slot) = layout.slot(ParamId::Ffn(layer, which)) {
        acc_tn(x, dy, T::one(), &mut grad[slot.range()]);
    }
    let mut pair_back = |pair: &LoraPair<T>, u: &Mat<T>, id_a: ParamId, id_b: ParamId| {
        // t = dy·Aᵀ
        let mut t = Mat::zeros(dy.rows(), pair.a.rows());
        nt_into(dy, &pair.a, T::one(), T::zero(), &mut t);
        nt_into(&t, &pair.b, alpha, T::one(), &mut dx);
        if let Some(slot) = layout.slot(id_a) {
            acc_tn(u, dy, alpha, &mut grad[slot.range()]);
        }
        if let Some(slot) = layout.slot(id_b) {
            acc_tn(x, &t, alpha, &mut grad[slot.range()]);
        }
    };
    if let (Some(a), Some(u)) = (active.expert, cache.expert.as_ref()) {
        let id = |factor| ParamId::Expert {
            domain: route,
            layer,
            mat: which,
            factor,
        };
        pair_back(a.pair(which), u, id(Factor::A), id(Factor::B));
    }
    if let (Some(a), Some(u)) = (active.common, cache.common.as_ref()) {
        let id = |factor| ParamId::Common {
            layer,
            mat: which,
            factor,
        };
        pair_back(a.pair(which), u, id(Factor::A), id(Factor::B));
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn layer_backward<T: Float>(
    l: usize,
    n_heads: usize,
    blk: &Block<T>,
    active: &Active<'_, T>,
    route: usize,
    alpha: T,
    c: &LayerCache<T>,
    dx2: Mat<T>,
    layout: &GradLayout,
    grad: &mut [T],
) -> Mat<T> {
    let (s, d) = dx2.shape();
    let dh = d / n_heads;
    let scale = T::one() / T::from_usize(dh).expect("fits").sqrt();

    // FFN branch: x2 = x1 + F(LN2(x1))
    let dg = lora_backward(
        &dx2, &c.g, &blk.w_out, &c.u_out, active, FfnMat::Wo, alpha, l, route, layout, grad,
    );
    let mut dh_pre = dg;
    for (v, &h) in dh_pre.as_mut_slice().iter_mut().zip(c.h_pre.as_slice()) {
        *v = *v * gelu_grad(h);
    }
    let da2 = lora_backward(
        &dh_pre, &c.a2, &blk.w_in, &c.u_in, active, FfnMat::Wi, alpha, l, route, layout, grad,
    );
    let mut dx1 = dx2;
    {
        let (g, b) = split_two(grad, layout, ParamId::LnGain(l, LnSlot::Ln2), ParamId::LnBias(l, LnSlot::Ln2));
        ln_backward(&da2, &c.ln2, &blk.ln2.gain, &mut dx1, g, b);
    }

    // Attention branch: x1 = x + Attn(LN1(x))
    if let Some(slot) = layout.slot(ParamId::Attn(l, AttnMat::O)) {
        acc_tn(&c.o, &dx1, T::one(), &mut grad[slot.range()]);
    }
    let mut d_o = Mat::zeros(s, d);
    nt_into(&dx1, &blk.wo, T::one(), T::zero(), &mut d_o);
    let mut dq = Mat::zeros(s, d);
    let mut dk = Mat::zeros(s, d);
    let mut dv = Mat::zeros(s, d);
    let mut dp = Mat::zeros(s, s);
    for h in 0..n_heads {
        let off = h * dh;
        let p = &c.probs[h];
        // dP = dO_h · V_hᵀ
        T::gemm(
            s,
            dh,
            s,
            T::one(),
            &d_o.as_slice()[off..],
            d as isize,
            1,
            &c.v.as_slice()[off..],
            1,
            d as isize,
            T::zero(),
            dp.as_mut_slice(),
            s as isize,
            1,
        );
        // dV_h = Pᵀ · dO_h
        T::gemm(
            s,
            s,
            dh,
            T::one(),
            p.as_slice(),
            1,
            s as isize,
            &d_o.as_slice()[off..],
            d as isize,
            1,
            T::zero(),
            &mut dv.as_mut_slice()[off..],
            d as isize,
            1,
        );
        // softmax backward, then the 1/sqrt(dh) scale
        for i in 0..s {
            let pr = p.row(i);
            let dr = dp.row_mut(i);
            let dot = (0..=i).fold(T::zero(), |a, j| a + pr[j] * dr[j]);
            for j in 0..=i {
                dr[j] = pr[j] * (dr[j] - dot) * scale;
            }
            for v in dr[i + 1..].iter_mut() {
                *v = T::zero();
            }
        }
        // dQ_h = dS · K_h ; dK_h = dSᵀ · Q_h
        T::gemm(
            s,
            s,
            dh,
            T::one(),
            dp.as_slice(),
            s as isize,
            1,
            &c.k.as_slice()[off..],
            d as isize,
            1,
            T::zero(),
            &mut dq.as_mut_slice()[off..],
            d as isize,
            1,
        );
        T::gemm(
            s,
            s,
            dh,
            T::one(),
            dp.as_slice(),
            1,
            s as isize,
            &c.q.as_slice()[off..],
            d as isize,
            1,
            T::zero(),
            &mut dk.as_mut_slice()[off..],
            d as isize,
            1,
        );
    }
    for (m, dm) in [(AttnMat::Q, &dq), (AttnMat::K, &dk), (AttnMat::V, &dv)] {
        if let Some(slot) = layout.slot(ParamId::Attn(l, m)) {
            acc_tn(&c.a1, dm, T::one(), &mut grad[slot.range()]);
        }
    }
    let mut da1 = Mat::zeros(s, d);
    nt_into(&dq, &blk.wq, T::one(), T::zero(), &mut da1);
    nt_into(&dk, &blk.wk, T::one(), T::one(), &mut da1);
    nt_into(&dv, &blk.wv, T::one(), T::one(), &mut da1);
    let mut dx = dx1;
    {
        let (g, b) = split_two(grad, layout, ParamId::LnGain(l, LnSlot::Ln1), ParamId::LnBias(l, LnSlot::Ln1));
        ln_backward(&da1, &c.ln1, &blk.ln1.gain, &mut dx, g, b);
    }
    dx
}
