//! Forward pass, reverse-mode gradient and Hessian-vector products.
//!
//! Activations are NHWC, flattened per sample. A [`GradTape`] records
//! everything the backward pass touched so that a Hessian-vector product
//! only needs a tangent forward pass and a tangent backward pass.

use super::loss::{angular_loss_grad, grad_tangent};
use super::spec::{LayerSpec, NetworkSpec, PlannedLayer, Shape};
use super::Real;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

fn spatial(s: Shape) -> (usize, usize, usize) {
    match s {
        Shape::Spatial { h, w, c } => (h, w, c),
        Shape::Flat(f) => (1, 1, f),
    }
}

/// Rows `(n, y, x)`, columns `(ky, kx, c)` of the zero-padded 3×3
/// neighbourhood.
fn im2col<T: Real>(x: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let k = 9 * c;
    let mut cols = vec![T::ZERO; n * h * w * k];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * k;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((b * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<T: Real>(cols: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let k = 9 * c;
    let mut x = vec![T::ZERO; n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * k;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for (d, &s) in x[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}

fn add_bias<T: Real>(y: &mut [T], b: &[T]) {
    for row in y.chunks_exact_mut(b.len()) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn col_sums<T: Real>(a: &[T], cols: usize, out: &mut [T]) {
    let mut acc = vec![0.0f64; cols];
    for row in a.chunks_exact(cols) {
        for (s, &v) in acc.iter_mut().zip(row) {
            *s += v.to_f64();
        }
    }
    for (o, s) in out.iter_mut().zip(acc) {
        *o += T::from_f64(s);
    }
}

fn mean64<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|x| x.to_f64()).sum::<f64>() / v.len() as f64
}

fn mean_prod<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.to_f64() * y.to_f64()).sum::<f64>() / a.len() as f64
}

/// `v - mean(v) - xhat * mean(v * xhat)` per sample.
fn ln_project<T: Real>(v: &[T], xhat: &[T]) -> Vec<T> {
    let m = mean64(v);
    let mx = mean_prod(v, xhat);
    v.iter()
        .zip(xhat)
        .map(|(&a, &xh)| T::from_f64(a.to_f64() - m - xh.to_f64() * mx))
        .collect()
}

#[derive(Debug, Clone, Default)]
struct LayerCache<T> {
    /// im2col of the conv input.
    cols: Vec<T>,
    /// Layer-norm normalised input and per-sample 1/σ.
    xhat: Vec<T>,
    inv: Vec<f64>,
}

/// Recorded forward pass, loss and backward pass at one parameter point.
#[derive(Debug, Clone)]
pub struct GradTape<T> {
    n: usize,
    /// `acts[i]` is the input of layer i; the last entry holds predictions.
    acts: Vec<Vec<T>>,
    caches: Vec<LayerCache<T>>,
    /// Cotangent of each layer's output.
    cots: Vec<Vec<T>>,
    gts: Vec<[f64; 3]>,
    /// Gradient of the mean loss w.r.t. θ.
    pub grad: Vec<T>,
    /// Mean loss over the batch, radians.
    pub loss: f64,
    pub per_sample: Vec<f64>,
    /// Number of degenerate (near-zero) predictions.
    pub degenerate: usize,
}

impl<T: Real> GradTape<T> {
    pub fn predictions(&self) -> &[T] {
        self.acts.last().expect("at least one activation")
    }

    pub fn batch_size(&self) -> usize {
        self.n
    }
}

fn check(spec: &NetworkSpec, theta_len: usize, x_len: usize, n: usize) -> Result<()> {
    if theta_len != spec.param_count() {
        return Err(Error::Shape {
            expected: format!("{} parameters", spec.param_count()),
            actual: theta_len.to_string(),
        });
    }
    if n == 0 || x_len != n * spec.input_size() {
        return Err(Error::Shape {
            expected: format!("{n} inputs of {} values", spec.input_size()),
            actual: format!("{x_len} values"),
        });
    }
    Ok(())
}

fn forward_layer<T: Real>(l: &PlannedLayer, theta: &[T], x: &[T], n: usize, cache: &mut LayerCache<T>) -> Vec<T> {
    let block = &theta[l.offset..l.offset + l.param_len()];
    let (wts, bias) = block.split_at(l.weights);
    match l.kind {
        LayerSpec::Conv3x3 { out } => {
            let (h, w, c) = spatial(l.input);
            cache.cols = im2col(x, n, h, w, c);
            let mut y = vec![T::ZERO; n * h * w * out];
            T::gemm(n * h * w, 9 * c, out, &cache.cols, false, wts, false, &mut y, false);
            add_bias(&mut y, bias);
            y
        }
        LayerSpec::Dense { out } => {
            let f = l.input.size();
            let mut y = vec![T::ZERO; n * out];
            T::gemm(n, f, out, x, false, wts, false, &mut y, false);
            add_bias(&mut y, bias);
            y
        }
        LayerSpec::LayerNorm => {
            let d = l.input.size();
            let c = l.input.channels();
            let mut y = vec![T::ZERO; n * d];
            cache.xhat = vec![T::ZERO; n * d];
            cache.inv = vec![0.0; n];
            for b in 0..n {
                let xs = &x[b * d..(b + 1) * d];
                let mu = mean64(xs);
                let var = xs.iter().map(|v| (v.to_f64() - mu).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                cache.inv[b] = inv;
                for j in 0..d {
                    let xh = T::from_f64((xs[j].to_f64() - mu) * inv);
                    cache.xhat[b * d + j] = xh;
                    y[b * d + j] = xh * wts[j % c] + bias[j % c];
                }
            }
            y
        }
        LayerSpec::Relu => x.iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect(),
        LayerSpec::AvgPool => {
            let (h, w, c) = spatial(l.input);
            let mut y = vec![T::ZERO; n * c];
            for b in 0..n {
                let mut acc = vec![0.0f64; c];
                for px in x[b * h * w * c..(b + 1) * h * w * c].chunks_exact(c) {
                    for (a, v) in acc.iter_mut().zip(px) {
                        *a += v.to_f64();
                    }
                }
                for (j, a) in acc.into_iter().enumerate() {
                    y[b * c + j] = T::from_f64(a / (h * w) as f64);
                }
            }
            y
        }
    }
}

fn run_forward<T: Real>(spec: &NetworkSpec, theta: &[T], x: &[T], n: usize) -> (Vec<Vec<T>>, Vec<LayerCache<T>>) {
    let layers = spec.layers();
    let mut acts = Vec::with_capacity(layers.len() + 1);
    let mut caches = vec![LayerCache::default(); layers.len()];
    acts.push(x.to_vec());
    for (i, l) in layers.iter().enumerate() {
        let y = forward_layer(l, theta, &acts[i], n, &mut caches[i]);
        debug_assert!(y.iter().all(|v| v.is_finite()), "non-finite activation after layer {i}");
        acts.push(y);
    }
    (acts, caches)
}

/// Predictions for `n` inputs, row-major N×3.
pub fn forward<T: Real>(spec: &NetworkSpec, theta: &[T], x: &[T], n: usize) -> Result<Vec<T>> {
    check(spec, theta.len(), x.len(), n)?;
    let (mut acts, _) = run_forward(spec, theta, x, n);
    Ok(acts.pop().expect("output"))
}

/// Gradient of one layer's parameters (accumulated into `grad`) and of its
/// input, given the cotangent of its output.
fn backward_layer<T: Real>(l: &PlannedLayer, theta: &[T], x: &[T], y: &[T], gy: &[T], cache: &LayerCache<T>, n: usize, grad: &mut [T], need_gx: bool) -> Vec<T> {
    let block = &theta[l.offset..l.offset + l.param_len()];
    let (wts, _) = block.split_at(l.weights);
    let (gw, gb) = grad[l.offset..l.offset + l.param_len()].split_at_mut(l.weights);
    match l.kind {
        LayerSpec::Conv3x3 { out } => {
            let (h, w, c) = spatial(l.input);
            let m = n * h * w;
            T::gemm(9 * c, m, out, &cache.cols, true, gy, false, gw, true);
            col_sums(gy, out, gb);
            if !need_gx {
                return Vec::new();
            }
            let mut gcols = vec![T::ZERO; m * 9 * c];
            T::gemm(m, out, 9 * c, gy, false, wts, true, &mut gcols, false);
            col2im(&gcols, n, h, w, c)
        }
        LayerSpec::Dense { out } => {
            let f = l.input.size();
            T::gemm(f, n, out, x, true, gy, false, gw, true);
            col_sums(gy, out, gb);
            if !need_gx {
                return Vec::new();
            }
            let mut gx = vec![T::ZERO; n * f];
            T::gemm(n, out, f, gy, false, wts, true, &mut gx, false);
            gx
        }
        LayerSpec::LayerNorm => {
            let d = l.input.size();
            let c = l.input.channels();
            let mut ggam = vec![0.0f64; c];
            let mut gbet = vec![0.0f64; c];
            let mut gx = vec![T::ZERO; if need_gx { n * d } else { 0 }];
            for b in 0..n {
                let r = b * d..(b + 1) * d;
                let (g, xh) = (&gy[r.clone()], &cache.xhat[r.clone()]);
                for j in 0..d {
                    ggam[j % c] += g[j].to_f64() * xh[j].to_f64();
                    gbet[j % c] += g[j].to_f64();
                }
                if need_gx {
                    let gxh: Vec<T> = (0..d).map(|j| g[j] * wts[j % c]).collect();
                    let p = ln_project(&gxh, xh);
                    let inv = T::from_f64(cache.inv[b]);
                    for (o, v) in gx[r].iter_mut().zip(p) {
                        *o = v * inv;
                    }
                }
            }
            for j in 0..c {
                gw[j] += T::from_f64(ggam[j]);
                gb[j] += T::from_f64(gbet[j]);
            }
            gx
        }
        LayerSpec::Relu => gy
            .iter()
            .zip(y)
            .map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO })
            .collect(),
        LayerSpec::AvgPool => {
            let (h, w, c) = spatial(l.input);
            let scale = T::from_f64(1.0 / (h * w) as f64);
            let mut gx = vec![T::ZERO; n * h * w * c];
            for b in 0..n {
                for px in gx[b * h * w * c..(b + 1) * h * w * c].chunks_exact_mut(c) {
                    for (o, &g) in px.iter_mut().zip(&gy[b * c..(b + 1) * c]) {
                        *o = g * scale;
                    }
                }
            }
            gx
        }
    }
}

/// Forward pass, mean angular loss against `gts`, and its exact gradient.
pub fn backward<T: Real>(spec: &NetworkSpec, theta: &[T], x: &[T], gts: &[[f64; 3]]) -> Result<GradTape<T>> {
    let n = gts.len();
    check(spec, theta.len(), x.len(), n)?;
    let (acts, caches) = run_forward(spec, theta, x, n);
    let pred = acts.last().expect("output");
    let mut gout = vec![T::ZERO; n * 3];
    let mut per_sample = Vec::with_capacity(n);
    let mut degenerate = 0;
    for b in 0..n {
        let p = [0, 1, 2].map(|k| pred[b * 3 + k].to_f64());
        let lv = angular_loss_grad(p, gts[b]);
        per_sample.push(lv.loss);
        degenerate += lv.degenerate as usize;
        for k in 0..3 {
            gout[b * 3 + k] = T::from_f64(lv.grad[k] / n as f64);
        }
    }
    let layers = spec.layers();
    let mut grad = vec![T::ZERO; theta.len()];
    let mut cots = vec![Vec::new(); layers.len()];
    cots[layers.len() - 1] = gout;
    for i in (0..layers.len()).rev() {
        let gx = backward_layer(&layers[i], theta, &acts[i], &acts[i + 1], &cots[i], &caches[i], n, &mut grad, i > 0);
        if i > 0 {
            cots[i - 1] = gx;
        }
    }
    Ok(GradTape {
        n,
        loss: per_sample.iter().sum::<f64>() / n as f64,
        per_sample,
        degenerate,
        acts,
        caches,
        cots,
        gts: gts.to_vec(),
        grad,
    })
}

#[derive(Default)]
struct TangentCache<T> {
    /// im2col of the conv input tangent.
    dcols: Vec<T>,
    /// Layer-norm xhat tangent and per-sample d(σ)/σ.
    dxhat: Vec<T>,
    ds: Vec<f64>,
}

/// Hessian of the tape's mean loss, at the tape's parameters `theta`,
/// applied to `v`.
pub fn hvp<T: Real>(spec: &NetworkSpec, theta: &[T], tape: &GradTape<T>, v: &[T]) -> Vec<T> {
    assert_eq!(v.len(), theta.len(), "direction length");
    let layers = spec.layers();
    let n = tape.n;
    // tangent forward
    let mut dacts: Vec<Vec<T>> = Vec::with_capacity(layers.len() + 1);
    let mut tcaches: Vec<TangentCache<T>> = (0..layers.len()).map(|_| TangentCache::default()).collect();
    dacts.push(vec![T::ZERO; tape.acts[0].len()]);
    for (i, l) in layers.iter().enumerate() {
        let x = &tape.acts[i];
        let dx = &dacts[i];
        let first = i == 0;
        let block = &theta[l.offset..l.offset + l.param_len()];
        let (wts, _) = block.split_at(l.weights);
        let (dw, db) = v[l.offset..l.offset + l.param_len()].split_at(l.weights);
        let cache = &tape.caches[i];
        let tc = &mut tcaches[i];
        let dy = match l.kind {
            LayerSpec::Conv3x3 { out } => {
                let (h, w, c) = spatial(l.input);
                let m = n * h * w;
                let mut dy = vec![T::ZERO; m * out];
                T::gemm(m, 9 * c, out, &cache.cols, false, dw, false, &mut dy, false);
                if !first {
                    tc.dcols = im2col(dx, n, h, w, c);
                    T::gemm(m, 9 * c, out, &tc.dcols, false, wts, false, &mut dy, true);
                }
                add_bias(&mut dy, db);
                dy
            }
            LayerSpec::Dense { out } => {
                let f = l.input.size();
                let mut dy = vec![T::ZERO; n * out];
                T::gemm(n, f, out, x, false, dw, false, &mut dy, false);
                if !first {
                    T::gemm(n, f, out, dx, false, wts, false, &mut dy, true);
                }
                add_bias(&mut dy, db);
                dy
            }
            LayerSpec::LayerNorm => {
                let d = l.input.size();
                let c = l.input.channels();
                let mut dy = vec![T::ZERO; n * d];
                tc.dxhat = vec![T::ZERO; n * d];
                tc.ds = vec![0.0; n];
                for b in 0..n {
                    let r = b * d..(b + 1) * d;
                    let xh = &cache.xhat[r.clone()];
                    let inv = cache.inv[b];
                    if !first {
                        let dxs = &dx[r.clone()];
                        tc.ds[b] = mean_prod(xh, dxs) * inv;
                        let p = ln_project(dxs, xh);
                        for (o, pv) in tc.dxhat[r.clone()].iter_mut().zip(p) {
                            *o = pv * T::from_f64(inv);
                        }
                    }
                    for j in 0..d {
                        dy[b * d + j] = tc.dxhat[b * d + j] * wts[j % c] + xh[j] * dw[j % c] + db[j % c];
                    }
                }
                dy
            }
            LayerSpec::Relu => dx
                .iter()
                .zip(&tape.acts[i + 1])
                .map(|(&d, &y)| if y > T::ZERO { d } else { T::ZERO })
                .collect(),
            LayerSpec::AvgPool => {
                let (h, w, c) = spatial(l.input);
                let mut dy = vec![T::ZERO; n * c];
                for b in 0..n {
                    let mut acc = vec![0.0f64; c];
                    for px in dx[b * h * w * c..(b + 1) * h * w * c].chunks_exact(c) {
                        for (a, v) in acc.iter_mut().zip(px) {
                            *a += v.to_f64();
                        }
                    }
                    for (j, a) in acc.into_iter().enumerate() {
                        dy[b * c + j] = T::from_f64(a / (h * w) as f64);
                    }
                }
                dy
            }
        };
        dacts.push(dy);
    }

    // tangent of the loss cotangent
    let pred = tape.predictions();
    let dpred = &dacts[layers.len()];
    let mut dg = vec![T::ZERO; n * 3];
    for b in 0..n {
        let p = [0, 1, 2].map(|k| pred[b * 3 + k].to_f64());
        let dp = [0, 1, 2].map(|k| dpred[b * 3 + k].to_f64());
        let t = grad_tangent(p, dp, tape.gts[b]);
        for k in 0..3 {
            dg[b * 3 + k] = T::from_f64(t[k] / n as f64);
        }
    }

    // tangent backward
    let mut out = vec![T::ZERO; theta.len()];
    for i in (0..layers.len()).rev() {
        let l = &layers[i];
        let need_gx = i > 0;
        let x = &tape.acts[i];
        let dx = &dacts[i];
        let gy = &tape.cots[i];
        let block = &theta[l.offset..l.offset + l.param_len()];
        let (wts, _) = block.split_at(l.weights);
        let (dw, _) = v[l.offset..l.offset + l.param_len()].split_at(l.weights);
        let (ogw, ogb) = out[l.offset..l.offset + l.param_len()].split_at_mut(l.weights);
        let cache = &tape.caches[i];
        let tc = &tcaches[i];
        let dgx = match l.kind {
            LayerSpec::Conv3x3 { out: co } => {
                let (h, w, c) = spatial(l.input);
                let m = n * h * w;
                T::gemm(9 * c, m, co, &cache.cols, true, &dg, false, ogw, true);
                if i > 0 {
                    T::gemm(9 * c, m, co, &tc.dcols, true, gy, false, ogw, true);
                }
                col_sums(&dg, co, ogb);
                if need_gx {
                    let mut gcols = vec![T::ZERO; m * 9 * c];
                    T::gemm(m, co, 9 * c, &dg, false, wts, true, &mut gcols, false);
                    T::gemm(m, co, 9 * c, gy, false, dw, true, &mut gcols, true);
                    col2im(&gcols, n, h, w, c)
                } else {
                    Vec::new()
                }
            }
            LayerSpec::Dense { out: co } => {
                let f = l.input.size();
                T::gemm(f, n, co, x, true, &dg, false, ogw, true);
                if i > 0 {
                    T::gemm(f, n, co, dx, true, gy, false, ogw, true);
                }
                col_sums(&dg, co, ogb);
                if need_gx {
                    let mut gx = vec![T::ZERO; n * f];
                    T::gemm(n, co, f, &dg, false, wts, true, &mut gx, false);
                    T::gemm(n, co, f, gy, false, dw, true, &mut gx, true);
                    gx
                } else {
                    Vec::new()
                }
            }
            LayerSpec::LayerNorm => {
                let d = l.input.size();
                let c = l.input.channels();
                let mut ggam = vec![0.0f64; c];
                let mut gbet = vec![0.0f64; c];
                let mut dgx = vec![T::ZERO; if need_gx { n * d } else { 0 }];
                // primal cotangent of this layer's input, for the σ term
                let gx_primal: &[T] = if need_gx { &tape.cots[i - 1] } else { &[] };
                for b in 0..n {
                    let r = b * d..(b + 1) * d;
                    let (g, dgb, xh, dxh) = (&gy[r.clone()], &dg[r.clone()], &cache.xhat[r.clone()], &tc.dxhat[r.clone()]);
                    for j in 0..d {
                        ggam[j % c] += dgb[j].to_f64() * xh[j].to_f64() + g[j].to_f64() * dxh[j].to_f64();
                        gbet[j % c] += dgb[j].to_f64();
                    }
                    if need_gx {
                        let gxh: Vec<T> = (0..d).map(|j| g[j] * wts[j % c]).collect();
                        let dgxh: Vec<T> = (0..d).map(|j| dgb[j] * wts[j % c] + g[j] * dw[j % c]).collect();
                        let inv = cache.inv[b];
                        let p = ln_project(&dgxh, xh);
                        let m1 = mean_prod(&gxh, xh);
                        let m2 = mean_prod(&gxh, dxh);
                        let ds = tc.ds[b];
                        for j in 0..d {
                            let val = -ds * gx_primal[b * d + j].to_f64()
                                + inv * (p[j].to_f64() - dxh[j].to_f64() * m1 - xh[j].to_f64() * m2);
                            dgx[b * d + j] = T::from_f64(val);
                        }
                    }
                }
                for j in 0..c {
                    ogw[j] += T::from_f64(ggam[j]);
                    ogb[j] += T::from_f64(gbet[j]);
                }
                dgx
            }
            LayerSpec::Relu => dg
                .iter()
                .zip(&tape.acts[i + 1])
                .map(|(&g, &y)| if y > T::ZERO { g } else { T::ZERO })
                .collect(),
            LayerSpec::AvgPool => {
                let (h, w, c) = spatial(l.input);
                let scale = T::from_f64(1.0 / (h * w) as f64);
                let mut gx = vec![T::ZERO; n * h * w * c];
                for b in 0..n {
                    for px in gx[b * h * w * c..(b + 1) * h * w * c].chunks_exact_mut(c) {
                        for (o, &g) in px.iter_mut().zip(&dg[b * c..(b + 1) * c]) {
                            *o = g * scale;
                        }
                    }
                }
                gx
            }
        };
        dg = dgx;
    }
    out
}
