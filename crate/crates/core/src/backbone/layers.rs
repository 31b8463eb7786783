//! Differentiable building blocks of the toy denoiser. Every layer keeps its
//! weights in a [`ParamStore`] and exposes an explicit backward pass.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{axpy, dot, gemm_nn, gemm_nt, gemm_tn, Matrix, Tensor3};
use crate::Scalar;

use super::BackboneError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    pub params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<S>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::of(z * std)
            })
            .collect();
        self.add(name, shape, data)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: Vec<usize>, value: f64) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![S::of(value); n])
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[S] {
        &self.params[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Vec<S> {
        &mut self.params[id.0].data
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads<S> {
        Grads {
            grads: self
                .params
                .iter()
                .map(|p| vec![S::zero(); p.data.len()])
                .collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| T::of(v.f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<S> {
    pub grads: Vec<Vec<S>>,
}

impl<S: Scalar> Grads<S> {
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.grads[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[S] {
        &self.grads[id.0]
    }

    pub fn scale(&mut self, factor: S) {
        for g in &mut self.grads {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(z: S) -> S {
    S::one() / (S::one() + (-z).exp())
}

#[inline]
pub fn silu<S: Scalar>(z: S) -> S {
    z * sigmoid(z)
}

#[inline]
pub fn silu_grad<S: Scalar>(z: S) -> S {
    let s = sigmoid(z);
    s * (S::one() + z * (S::one() - s))
}

/// Same-padded square convolution with zero padding; weights laid out as
/// `[ky][kx][cin][cout]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (kernel * kernel * cin) as f64;
        let weight = store.add_normal(
            format!("{name}.weight"),
            vec![kernel, kernel, cin, cout],
            gain / fan_in.sqrt(),
            rng,
        );
        let bias = store.add_const(format!("{name}.bias"), vec![cout], 0.0);
        Self {
            weight,
            bias,
            kernel,
            cin,
            cout,
        }
    }

    fn check<S: Scalar>(&self, x: &Tensor3<S>) -> Result<(), BackboneError> {
        if x.channels != self.cin {
            return Err(BackboneError::ChannelMismatch {
                expected: self.cin,
                got: x.channels,
            });
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(&self, p: &ParamStore<S>, x: &Tensor3<S>) -> Result<Tensor3<S>, BackboneError> {
        self.check(x)?;
        let (h, w) = (x.height, x.width);
        let (k, cin, cout) = (self.kernel, self.cin, self.cout);
        let pad = k / 2;
        let weight = p.get(self.weight);
        let bias = p.get(self.bias);
        let mut out = Tensor3::zeros(h, w, cout);
        for oy in 0..h {
            for ox in 0..w {
                let o = (oy * w + ox) * cout;
                let out_px = &mut out.data[o..o + cout];
                out_px.copy_from_slice(bias);
                for ky in 0..k {
                    let Some(iy) = (oy + ky).checked_sub(pad).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = (ox + kx).checked_sub(pad).filter(|&v| v < w) else {
                            continue;
                        };
                        let tap = (ky * k + kx) * cin * cout;
                        gemm_nn(x.pixel(iy, ix), &weight[tap..tap + cin * cout], out_px, 1, cin, cout);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates weight and bias gradients and returns the input gradient.
    pub fn backward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        x: &Tensor3<S>,
        dy: &Tensor3<S>,
        grads: &mut Grads<S>,
    ) -> Tensor3<S> {
        let (h, w) = (x.height, x.width);
        let (k, cin, cout) = (self.kernel, self.cin, self.cout);
        let pad = k / 2;
        let weight = p.get(self.weight);
        let mut dx = Tensor3::zeros(h, w, cin);
        {
            let db = grads.get_mut(self.bias);
            for px in dy.data.chunks_exact(cout) {
                for (b, &g) in db.iter_mut().zip(px) {
                    *b += g;
                }
            }
        }
        let dw = grads.get_mut(self.weight);
        for oy in 0..h {
            for ox in 0..w {
                let dy_px = dy.pixel(oy, ox);
                for ky in 0..k {
                    let Some(iy) = (oy + ky).checked_sub(pad).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = (ox + kx).checked_sub(pad).filter(|&v| v < w) else {
                            continue;
                        };
                        let tap = (ky * k + kx) * cin * cout;
                        let xo = x.offset(iy, ix, 0);
                        gemm_nt(dy_px, &weight[tap..tap + cin * cout], &mut dx.data[xo..xo + cin], 1, cout, cin);
                        gemm_tn(&x.data[xo..xo + cin], dy_px, &mut dw[tap..tap + cin * cout], 1, cin, cout);
                    }
                }
            }
        }
        dx
    }
}

/// Dense layer `y = x W + b` with `W` stored `[in][out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_normal(
            format!("{name}.weight"),
            vec![input, output],
            gain / (input as f64).sqrt(),
            rng,
        );
        let bias = bias.then(|| store.add_const(format!("{name}.bias"), vec![output], 0.0));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    /// Rows of `x` are independent inputs.
    pub fn forward<S: Scalar>(&self, p: &ParamStore<S>, x: &[S], rows: usize) -> Vec<S> {
        debug_assert_eq!(x.len(), rows * self.input);
        let mut out = vec![S::zero(); rows * self.output];
        if let Some(b) = self.bias {
            for r in out.chunks_exact_mut(self.output) {
                r.copy_from_slice(p.get(b));
            }
        }
        gemm_nn(x, p.get(self.weight), &mut out, rows, self.input, self.output);
        out
    }

    pub fn backward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        x: &[S],
        dy: &[S],
        rows: usize,
        grads: &mut Grads<S>,
        need_dx: bool,
    ) -> Option<Vec<S>> {
        if let Some(b) = self.bias {
            let db = grads.get_mut(b);
            for r in dy.chunks_exact(self.output) {
                for (a, &g) in db.iter_mut().zip(r) {
                    *a += g;
                }
            }
        }
        gemm_tn(x, dy, grads.get_mut(self.weight), rows, self.input, self.output);
        need_dx.then(|| {
            let mut dx = vec![S::zero(); rows * self.input];
            gemm_nt(dy, p.get(self.weight), &mut dx, rows, self.output, self.input);
            dx
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache<S> {
    pub xhat: Tensor3<S>,
    pub inv_std: Vec<S>,
}

impl GroupNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = store.add_const(format!("{name}.gamma"), vec![channels], 1.0);
        let beta = store.add_const(format!("{name}.beta"), vec![channels], 0.0);
        Self {
            gamma,
            beta,
            channels,
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        x: &Tensor3<S>,
    ) -> Result<(Tensor3<S>, GroupNormCache<S>), BackboneError> {
        if x.channels != self.channels {
            return Err(BackboneError::ChannelMismatch {
                expected: self.channels,
                got: x.channels,
            });
        }
        let c = self.channels;
        let gs = c / self.groups;
        let n = S::of_usize(x.tokens() * gs);
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let range = g * gs..(g + 1) * gs;
            let mut mean = S::zero();
            for px in x.data.chunks_exact(c) {
                mean += px[range.clone()].iter().copied().sum::<S>();
            }
            mean /= n;
            let mut var = S::zero();
            for px in x.data.chunks_exact(c) {
                for &v in &px[range.clone()] {
                    var += (v - mean) * (v - mean);
                }
            }
            var /= n;
            let inv = S::one() / (var + S::of(self.eps)).sqrt();
            for px in xhat.data.chunks_exact_mut(c) {
                for v in &mut px[range.clone()] {
                    *v = (*v - mean) * inv;
                }
            }
            inv_std.push(inv);
        }
        let gamma = p.get(self.gamma);
        let beta = p.get(self.beta);
        let mut y = xhat.clone();
        for px in y.data.chunks_exact_mut(c) {
            for ((v, &g), &b) in px.iter_mut().zip(gamma).zip(beta) {
                *v = *v * g + b;
            }
        }
        Ok((y, GroupNormCache { xhat, inv_std }))
    }

    pub fn backward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        cache: &GroupNormCache<S>,
        dy: &Tensor3<S>,
        grads: &mut Grads<S>,
    ) -> Tensor3<S> {
        let c = self.channels;
        let gs = c / self.groups;
        let gamma = p.get(self.gamma);
        {
            let dgamma = grads.get_mut(self.gamma);
            for (px, xh) in dy.data.chunks_exact(c).zip(cache.xhat.data.chunks_exact(c)) {
                for ((d, &g), &h) in dgamma.iter_mut().zip(px).zip(xh) {
                    *d += g * h;
                }
            }
        }
        {
            let dbeta = grads.get_mut(self.beta);
            for px in dy.data.chunks_exact(c) {
                for (d, &g) in dbeta.iter_mut().zip(px) {
                    *d += g;
                }
            }
        }
        let mut dx = Tensor3::zeros(dy.height, dy.width, c);
        let n = S::of_usize(dy.tokens() * gs);
        for g in 0..self.groups {
            let range = g * gs..(g + 1) * gs;
            let (mut mean_d, mut mean_dx) = (S::zero(), S::zero());
            for (px, xh) in dy.data.chunks_exact(c).zip(cache.xhat.data.chunks_exact(c)) {
                for ch in range.clone() {
                    let dxhat = px[ch] * gamma[ch];
                    mean_d += dxhat;
                    mean_dx += dxhat * xh[ch];
                }
            }
            mean_d /= n;
            mean_dx /= n;
            let inv = cache.inv_std[g];
            for ((out, px), xh) in dx
                .data
                .chunks_exact_mut(c)
                .zip(dy.data.chunks_exact(c))
                .zip(cache.xhat.data.chunks_exact(c))
            {
                for ch in range.clone() {
                    let dxhat = px[ch] * gamma[ch];
                    out[ch] = inv * (dxhat - mean_d - xh[ch] * mean_dx);
                }
            }
        }
        dx
    }
}

/// Knobs the caller of an attention layer may set per invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttentionOptions {
    /// Evaluate softmax over keys in streaming chunks of this many keys.
    pub key_chunk: Option<usize>,
}

/// Multi-head scaled dot-product attention with input and output projections
/// and no positional encoding.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub channels: usize,
    pub source_channels: usize,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<S> {
    pub x: Matrix<S>,
    pub source: Option<Matrix<S>>,
    pub q: Matrix<S>,
    pub k: Matrix<S>,
    pub v: Matrix<S>,
    /// One `(queries, keys)` probability matrix per head.
    pub probs: Vec<Matrix<S>>,
    pub o: Matrix<S>,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        source_channels: usize,
        heads: usize,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        let c = channels as f64;
        let s = source_channels as f64;
        let wq = store.add_normal(format!("{name}.wq"), vec![channels, channels], 1.0 / c.sqrt(), rng);
        let wk = store.add_normal(format!("{name}.wk"), vec![source_channels, channels], 1.0 / s.sqrt(), rng);
        let wv = store.add_normal(format!("{name}.wv"), vec![source_channels, channels], 1.0 / s.sqrt(), rng);
        let wo = store.add_normal(format!("{name}.wo"), vec![channels, channels], out_gain / c.sqrt(), rng);
        let bo = store.add_const(format!("{name}.bo"), vec![channels], 0.0);
        Self {
            wq,
            wk,
            wv,
            wo,
            bo,
            channels,
            source_channels,
            heads,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Number of floating point operations spent in the score and mixing
    /// products for `queries` against `keys`.
    pub fn core_flops(&self, queries: usize, keys: usize) -> u64 {
        // QK^T and PV: 2 multiply-adds per (query, key, channel).
        4 * queries as u64 * keys as u64 * self.channels as u64
    }

    /// `source = None` means self-attention over `x`.
    pub fn forward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        x: &Matrix<S>,
        source: Option<&Matrix<S>>,
        options: &AttentionOptions,
    ) -> Result<Matrix<S>, BackboneError> {
        self.forward_impl(p, x, source, options, false).map(|(out, _)| out)
    }

    pub fn forward_cached<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        x: &Matrix<S>,
        source: Option<&Matrix<S>>,
    ) -> Result<(Matrix<S>, AttentionCache<S>), BackboneError> {
        let (out, cache) = self.forward_impl(p, x, source, &AttentionOptions::default(), true)?;
        Ok((out, cache.expect("cache requested")))
    }

    fn forward_impl<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        x: &Matrix<S>,
        source: Option<&Matrix<S>>,
        options: &AttentionOptions,
        keep: bool,
    ) -> Result<(Matrix<S>, Option<AttentionCache<S>>), BackboneError> {
        if x.cols != self.channels {
            return Err(BackboneError::ChannelMismatch {
                expected: self.channels,
                got: x.cols,
            });
        }
        let src = source.unwrap_or(x);
        if src.cols != self.source_channels {
            return Err(BackboneError::ChannelMismatch {
                expected: self.source_channels,
                got: src.cols,
            });
        }
        if !x.all_finite() || !src.all_finite() {
            return Err(BackboneError::NonFinite("attention input"));
        }
        let (n, m, c) = (x.rows, src.rows, self.channels);
        let mut q = Matrix::zeros(n, c);
        gemm_nn(&x.data, p.get(self.wq), &mut q.data, n, c, c);
        let mut k = Matrix::zeros(m, c);
        gemm_nn(&src.data, p.get(self.wk), &mut k.data, m, src.cols, c);
        let mut v = Matrix::zeros(m, c);
        gemm_nn(&src.data, p.get(self.wv), &mut v.data, m, src.cols, c);
        let (o, probs) = match options.key_chunk.filter(|&ch| !keep && ch < m) {
            Some(chunk) => (streaming_attention(&q, &k, &v, self.heads, chunk.max(1)), Vec::new()),
            None => dense_attention(&q, &k, &v, self.heads, keep),
        };
        let mut out = Matrix::zeros(n, c);
        for r in out.data.chunks_exact_mut(c) {
            r.copy_from_slice(p.get(self.bo));
        }
        gemm_nn(&o.data, p.get(self.wo), &mut out.data, n, c, c);
        let cache = keep.then(|| AttentionCache {
            x: x.clone(),
            source: source.cloned(),
            q,
            k,
            v,
            probs,
            o,
        });
        Ok((out, cache))
    }

    /// Returns the gradient with respect to `x`. Gradients reaching a
    /// cross-attention source are dropped; the prompt is not trained.
    pub fn backward<S: Scalar>(
        &self,
        p: &ParamStore<S>,
        cache: &AttentionCache<S>,
        dout: &Matrix<S>,
        grads: &mut Grads<S>,
    ) -> Matrix<S> {
        let c = self.channels;
        let n = cache.x.rows;
        let src = cache.source.as_ref().unwrap_or(&cache.x);
        let m = src.rows;
        {
            let dbo = grads.get_mut(self.bo);
            for r in dout.data.chunks_exact(c) {
                for (a, &g) in dbo.iter_mut().zip(r) {
                    *a += g;
                }
            }
        }
        gemm_tn(&cache.o.data, &dout.data, grads.get_mut(self.wo), n, c, c);
        let mut d_o = Matrix::zeros(n, c);
        gemm_nt(&dout.data, p.get(self.wo), &mut d_o.data, n, c, c);

        let dh = self.head_dim();
        let scale = S::one() / S::of_usize(dh).sqrt();
        let mut dq = Matrix::zeros(n, c);
        let mut dk = Matrix::zeros(m, c);
        let mut dv = Matrix::zeros(m, c);
        let mut dp = vec![S::zero(); m];
        for (h, probs) in cache.probs.iter().enumerate() {
            let hs = h * dh..(h + 1) * dh;
            for i in 0..n {
                let doi = &d_o.row(i)[hs.clone()];
                let pi = probs.row(i);
                let mut weighted = S::zero();
                for j in 0..m {
                    dp[j] = dot(doi, &cache.v.row(j)[hs.clone()]);
                    weighted += dp[j] * pi[j];
                    axpy(pi[j], doi, &mut dv.row_mut(j)[hs.clone()]);
                }
                let qi = cache.q.row(i)[hs.clone()].to_vec();
                for j in 0..m {
                    let ds = pi[j] * (dp[j] - weighted) * scale;
                    if ds == S::zero() {
                        continue;
                    }
                    axpy(ds, &cache.k.row(j)[hs.clone()], &mut dq.row_mut(i)[hs.clone()]);
                    axpy(ds, &qi, &mut dk.row_mut(j)[hs.clone()]);
                }
            }
        }
        gemm_tn(&cache.x.data, &dq.data, grads.get_mut(self.wq), n, c, c);
        gemm_tn(&src.data, &dk.data, grads.get_mut(self.wk), m, src.cols, c);
        gemm_tn(&src.data, &dv.data, grads.get_mut(self.wv), m, src.cols, c);
        let mut dx = Matrix::zeros(n, c);
        gemm_nt(&dq.data, p.get(self.wq), &mut dx.data, n, c, c);
        if cache.source.is_none() {
            gemm_nt(&dk.data, p.get(self.wk), &mut dx.data, n, c, c);
            gemm_nt(&dv.data, p.get(self.wv), &mut dx.data, n, c, c);
        }
        dx
    }
}

/// `softmax(q k^T / sqrt(d)) v` per head, materializing the score rows.
pub fn dense_attention<S: Scalar>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    v: &Matrix<S>,
    heads: usize,
    keep_probs: bool,
) -> (Matrix<S>, Vec<Matrix<S>>) {
    let (n, m, c) = (q.rows, k.rows, q.cols);
    let dh = c / heads;
    let scale = S::one() / S::of_usize(dh).sqrt();
    let mut out = Matrix::zeros(n, c);
    let mut probs_all = Vec::new();
    let mut row = vec![S::zero(); m];
    for h in 0..heads {
        let hs = h * dh..(h + 1) * dh;
        let mut probs = if keep_probs { Matrix::zeros(n, m) } else { Matrix::zeros(0, m) };
        for i in 0..n {
            let qi = &q.row(i)[hs.clone()];
            let mut max = S::neg_infinity();
            for (j, r) in row.iter_mut().enumerate() {
                *r = dot(qi, &k.row(j)[hs.clone()]) * scale;
                max = max.max(*r);
            }
            let mut sum = S::zero();
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                sum += *r;
            }
            let inv = S::one() / sum;
            let oi = &mut out.row_mut(i)[hs.clone()];
            for (j, r) in row.iter_mut().enumerate() {
                *r *= inv;
                axpy(*r, &v.row(j)[hs.clone()], oi);
            }
            if keep_probs {
                probs.row_mut(i).copy_from_slice(&row);
            }
        }
        if keep_probs {
            probs_all.push(probs);
        }
    }
    (out, probs_all)
}

/// Key-chunked attention with an online softmax; memory is `O(chunk)` per
/// query instead of `O(keys)`.
pub fn streaming_attention<S: Scalar>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    v: &Matrix<S>,
    heads: usize,
    chunk: usize,
) -> Matrix<S> {
    let (n, m, c) = (q.rows, k.rows, q.cols);
    let dh = c / heads;
    let scale = S::one() / S::of_usize(dh).sqrt();
    let mut out = Matrix::zeros(n, c);
    let mut scores = vec![S::zero(); chunk];
    let mut acc = vec![S::zero(); dh];
    for h in 0..heads {
        let hs = h * dh..(h + 1) * dh;
        for i in 0..n {
            let qi = &q.row(i)[hs.clone()];
            let mut running_max = S::neg_infinity();
            let mut running_sum = S::zero();
            acc.iter_mut().for_each(|a| *a = S::zero());
            for start in (0..m).step_by(chunk) {
                let end = (start + chunk).min(m);
                let mut chunk_max = S::neg_infinity();
                for j in start..end {
                    let s = dot(qi, &k.row(j)[hs.clone()]) * scale;
                    scores[j - start] = s;
                    chunk_max = chunk_max.max(s);
                }
                let new_max = running_max.max(chunk_max);
                let rescale = (running_max - new_max).exp();
                running_sum *= rescale;
                acc.iter_mut().for_each(|a| *a *= rescale);
                for j in start..end {
                    let e = (scores[j - start] - new_max).exp();
                    running_sum += e;
                    axpy(e, &v.row(j)[hs.clone()], &mut acc);
                }
                running_max = new_max;
            }
            let inv = S::one() / running_sum;
            for (o, &a) in out.row_mut(i)[hs.clone()].iter_mut().zip(&acc) {
                *o = a * inv;
            }
        }
    }
    out
}

/// 2x2 average pooling.
pub fn avg_pool2<S: Scalar>(x: &Tensor3<S>) -> Tensor3<S> {
    let (h, w, c) = (x.height / 2, x.width / 2, x.channels);
    let quarter = S::of(0.25);
    let mut out = Tensor3::zeros(h, w, c);
    for y in 0..h {
        for xx in 0..w {
            let o = out.offset(y, xx, 0);
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                axpy(quarter, x.pixel(2 * y + dy, 2 * xx + dx), &mut out.data[o..o + c]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward<S: Scalar>(dy: &Tensor3<S>) -> Tensor3<S> {
    let c = dy.channels;
    let quarter = S::of(0.25);
    let mut dx = Tensor3::zeros(dy.height * 2, dy.width * 2, c);
    for y in 0..dy.height {
        for x in 0..dy.width {
            for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let o = dx.offset(2 * y + oy, 2 * x + ox, 0);
                axpy(quarter, dy.pixel(y, x), &mut dx.data[o..o + c]);
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<S: Scalar>(x: &Tensor3<S>) -> Tensor3<S> {
    Tensor3::from_fn(x.height * 2, x.width * 2, x.channels, |y, xx, c| x.get(y / 2, xx / 2, c))
}

pub fn upsample2_backward<S: Scalar>(dy: &Tensor3<S>) -> Tensor3<S> {
    let mut dx = Tensor3::zeros(dy.height / 2, dy.width / 2, dy.channels);
    for y in 0..dy.height {
        for x in 0..dy.width {
            let o = dx.offset(y / 2, x / 2, 0);
            let c = dy.channels;
            for (d, &g) in dx.data[o..o + c].iter_mut().zip(dy.pixel(y, x)) {
                *d += g;
            }
        }
    }
    dx
}

/// Sinusoidal timestep features, cosine half first.
pub fn timestep_features<S: Scalar>(t: f64, dim: usize) -> Vec<S> {
    let half = dim / 2;
    let mut out = vec![S::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = S::of((t * freq).cos());
        out[half + i] = S::of((t * freq).sin());
    }
    out
}
