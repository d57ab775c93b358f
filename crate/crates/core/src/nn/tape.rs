//! Reverse-mode differentiation over a linear tape.
//!
//! Each operator appends its output to the tape and records which earlier
//! entries it read. [`Tape::backward`] walks the tape in reverse, pushing
//! vector-Jacobian products into the inputs' gradient slots. Entries are
//! created in topological order by construction, so no sort is needed.

use super::tensor::{Real, Tensor};

/// Handle to a tape entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<R> {
    Leaf,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Var, k: usize },
    Linear { x: Var, w: Var, b: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<R>, rstd: Vec<R> },
    Silu { x: Var },
    ScaleShift { x: Var, ss: Var },
    AvgPool2 { x: Var },
    Upsample2 { x: Var },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Reshape { x: Var },
    Mse { pred: Var, target: Var },
}

struct Entry<R> {
    value: Tensor<R>,
    op: Op<R>,
}

#[derive(Default)]
pub struct Tape<R> {
    entries: Vec<Entry<R>>,
}

/// Gradients indexed by tape entry, plus the parameter-index mapping needed
/// to hand them back to the optimizer.
pub struct Grads<R> {
    slots: Vec<Option<Tensor<R>>>,
    params: Vec<(usize, Var)>,
}

impl<R: Real> Grads<R> {
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.slots[v.0].as_ref()
    }

    /// Gradient for each of `n` parameters; parameters the loss never touched
    /// get zeros of the given shapes.
    pub fn param_grads(mut self, shapes: &[Vec<usize>]) -> Vec<Tensor<R>> {
        let mut out: Vec<Option<Tensor<R>>> = vec![None; shapes.len()];
        for (idx, var) in std::mem::take(&mut self.params) {
            if let Some(g) = self.slots[var.0].take() {
                match &mut out[idx] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        out.into_iter().zip(shapes).map(|(g, s)| g.unwrap_or_else(|| Tensor::zeros(s.clone()))).collect()
    }
}

fn accumulate<R: Real>(slots: &mut [Option<Tensor<R>>], v: Var, g: Tensor<R>) {
    match &mut slots[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Gradient slot for `v`, created zeroed on first use.
fn slot_mut<'a, R: Real>(slots: &'a mut [Option<Tensor<R>>], v: Var, shape: &[usize]) -> &'a mut Tensor<R> {
    slots[v.0].get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
}

/// Unrolls one image `[C, H, W]` into `[C*k*k, H*W]` columns with zero padding `k/2`.
fn im2col<R: Real>(x: &[R], c: usize, h: usize, w: usize, k: usize, cols: &mut [R]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(R::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(R::zero());
                    out[x_hi..].fill(R::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image, accumulating.
fn col2im<R: Real>(cols: &[R], c: usize, h: usize, w: usize, k: usize, x: &mut [R]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let s0 = (x_lo as isize + dx) as usize;
                    for (d, &v) in dst[s0..s0 + (x_hi - x_lo)].iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>) -> Var {
        self.entries.push(Entry { value, op });
        Var(self.entries.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.entries[v.0].value
    }

    /// Input that receives no parameter mapping; its gradient is still computed.
    pub fn leaf(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable parameter number `index`.
    pub fn param(&mut self, index: usize, value: Tensor<R>) -> Var {
        self.push(value, Op::Param(index))
    }

    /// Same-padded stride-1 convolution; `w` is `[Cout, Cin, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, cin, h, wd) = self.value(x).nchw();
        let wv = self.value(w);
        let (cout, k) = (wv.shape()[0], wv.shape()[2]);
        assert_eq!(wv.shape(), &[cout, cin, k, k], "conv2d weight shape");
        assert!(k % 2 == 1, "conv2d kernel must be odd");
        assert_eq!(self.value(b).shape(), &[cout], "conv2d bias shape");
        let hw = h * wd;
        let kk = cin * k * k;
        let mut out = vec![R::zero(); n * cout * hw];
        let mut cols = if k == 1 { Vec::new() } else { vec![R::zero(); kk * hw] };
        {
            let xv = self.value(x).data();
            let wdata = self.value(w).data();
            let bias = self.value(b).data();
            for s in 0..n {
                let xs = &xv[s * cin * hw..(s + 1) * cin * hw];
                let rhs: &[R] = if k == 1 {
                    xs
                } else {
                    im2col(xs, cin, h, wd, k, &mut cols);
                    &cols
                };
                let ys = &mut out[s * cout * hw..(s + 1) * cout * hw];
                R::gemm(
                    cout,
                    kk,
                    hw,
                    R::one(),
                    wdata,
                    kk as isize,
                    1,
                    rhs,
                    hw as isize,
                    1,
                    R::zero(),
                    ys,
                    hw as isize,
                    1,
                );
                for (co, row) in ys.chunks_mut(hw).enumerate() {
                    let bv = bias[co];
                    for v in row {
                        *v += bv;
                    }
                }
            }
        }
        self.push(Tensor::new(vec![n, cout, h, wd], out), Op::Conv2d { x, w, b, k })
    }

    /// `y = x W^T + b` over the leading (batch) dimension; `w` is `[Dout, Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, din) = self.value(x).batch_split();
        let wv = self.value(w);
        let dout = wv.shape()[0];
        assert_eq!(wv.shape(), &[dout, din], "linear weight shape");
        assert_eq!(self.value(b).shape(), &[dout], "linear bias shape");
        let mut out = vec![R::zero(); n * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(self.value(b).data());
        }
        R::gemm(
            n,
            din,
            dout,
            R::one(),
            self.value(x).data(),
            din as isize,
            1,
            self.value(w).data(),
            1,
            din as isize,
            R::one(),
            &mut out,
            dout as isize,
            1,
        );
        self.push(Tensor::new(vec![n, dout], out), Op::Linear { x, w, b })
    }

    /// Group normalization over `(C / groups, H, W)` per sample, with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (n, c, h, w) = self.value(x).nchw();
        assert!(groups > 0 && c % groups == 0, "groups must divide channels");
        let cg = c / groups;
        let m = cg * h * w;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let mut out = vec![R::zero(); xv.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        let inv_m = 1.0 / m as f64;
        for s in 0..n {
            for g in 0..groups {
                let base = (s * c + g * cg) * h * w;
                let seg = &xv[base..base + m];
                let mean = seg.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() * inv_m;
                let var = seg.iter().map(|v| (v.to_f64().unwrap() - mean).powi(2)).sum::<f64>() * inv_m;
                let rstd = 1.0 / (var + NORM_EPS).sqrt();
                let (mean_r, rstd_r) = (R::lit(mean), R::lit(rstd));
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let (ga, be) = (gv[ch], bv[ch]);
                    let off = base + ci * h * w;
                    for (o, &v) in out[off..off + h * w].iter_mut().zip(&xv[off..off + h * w]) {
                        *o = (v - mean_r) * rstd_r * ga + be;
                    }
                }
                means.push(mean_r);
                rstds.push(rstd_r);
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out), Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds })
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * sigmoid(v)).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Silu { x })
    }

    /// Per-sample, per-channel modulation `x * (1 + scale) + shift`; `ss` is
    /// `[N, 2C]` holding scales then shifts.
    pub fn scale_shift(&mut self, x: Var, ss: Var) -> Var {
        let (n, c, h, w) = self.value(x).nchw();
        assert_eq!(self.value(ss).shape(), &[n, 2 * c], "scale_shift modulation shape");
        let hw = h * w;
        let xv = self.value(x).data();
        let sv = self.value(ss).data();
        let mut out = vec![R::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let scale = R::one() + sv[s * 2 * c + ch];
                let shift = sv[s * 2 * c + c + ch];
                let off = (s * c + ch) * hw;
                for (o, &v) in out[off..off + hw].iter_mut().zip(&xv[off..off + hw]) {
                    *o = v * scale + shift;
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(shape, out), Op::ScaleShift { x, ss })
    }

    /// 2x2 average pooling; spatial dimensions must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).nchw();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = R::lit(0.25);
        let mut out = vec![R::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        self.push(Tensor::new(vec![n, c, oh, ow], out), Op::AvgPool2 { x })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).nchw();
        let (oh, ow) = (h * 2, w * 2);
        let xv = self.value(x).data();
        let mut out = vec![R::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Tensor::new(vec![n, c, oh, ow], out), Op::Upsample2 { x })
    }

    /// Concatenation along axis 1; trailing dimensions must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa.len(), sb.len(), "concat rank mismatch");
        assert_eq!(sa[0], sb[0], "concat batch mismatch");
        assert_eq!(sa[2..], sb[2..], "concat trailing dims mismatch");
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let n = sa[0];
        let mut out = Vec::with_capacity(n * (ca + cb));
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for s in 0..n {
            out.extend_from_slice(&av[s * ca..(s + 1) * ca]);
            out.extend_from_slice(&bv[s * cb..(s + 1) * cb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        self.push(Tensor::new(shape, out), Op::Concat { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p + q).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Add { a, b })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let v = self.value(x).clone().reshaped(shape);
        self.push(v, Op::Reshape { x })
    }

    /// Mean squared error, a one-element tensor.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let (pv, tv) = (self.value(pred), self.value(target));
        assert_eq!(pv.len(), tv.len(), "mse length mismatch");
        let sum: f64 = pv.data().iter().zip(tv.data()).map(|(&p, &t)| (p - t).to_f64().unwrap().powi(2)).sum();
        let v = R::lit(sum / pv.len() as f64);
        self.push(Tensor::scalar(v), Op::Mse { pred, target })
    }

    /// Gradients of the one-element `output` seeded with 1.
    pub fn backward(&self, output: Var) -> Grads<R> {
        self.backward_seeded(output, R::one())
    }

    /// Gradients of `seed * output`.
    pub fn backward_seeded(&self, output: Var, seed: R) -> Grads<R> {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut slots: Vec<Option<Tensor<R>>> = (0..self.entries.len()).map(|_| None).collect();
        slots[output.0] = Some(Tensor::new(self.value(output).shape().to_vec(), vec![seed]));
        let mut params = Vec::new();
        for idx in (0..=output.0).rev() {
            let Some(gy) = slots[idx].take() else { continue };
            match &self.entries[idx].op {
                Op::Leaf => slots[idx] = Some(gy),
                Op::Param(p) => {
                    params.push((*p, Var(idx)));
                    slots[idx] = Some(gy);
                }
                op => self.vjp(op, idx, &gy, &mut slots),
            }
        }
        Grads { slots, params }
    }

    fn vjp(&self, op: &Op<R>, out_idx: usize, gy: &Tensor<R>, slots: &mut [Option<Tensor<R>>]) {
        match *op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Conv2d { x, w, b, k } => {
                let (n, cin, h, wd) = self.value(x).nchw();
                let wv = self.value(w);
                let cout = wv.shape()[0];
                let hw = h * wd;
                let kk = cin * k * k;
                let xv = self.value(x).data();
                let gyd = gy.data();
                let mut gw = vec![R::zero(); cout * kk];
                let mut gb = vec![R::zero(); cout];
                let mut gx = vec![R::zero(); xv.len()];
                let mut cols = if k == 1 { Vec::new() } else { vec![R::zero(); kk * hw] };
                let mut dcols = if k == 1 { Vec::new() } else { vec![R::zero(); kk * hw] };
                for s in 0..n {
                    let xs = &xv[s * cin * hw..(s + 1) * cin * hw];
                    let gys = &gyd[s * cout * hw..(s + 1) * cout * hw];
                    for (co, row) in gys.chunks(hw).enumerate() {
                        gb[co] += row.iter().copied().sum::<R>();
                    }
                    let rhs: &[R] = if k == 1 {
                        xs
                    } else {
                        im2col(xs, cin, h, wd, k, &mut cols);
                        &cols
                    };
                    // dW += dY cols^T
                    R::gemm(
                        cout,
                        hw,
                        kk,
                        R::one(),
                        gys,
                        hw as isize,
                        1,
                        rhs,
                        1,
                        hw as isize,
                        R::one(),
                        &mut gw,
                        kk as isize,
                        1,
                    );
                    let gxs = &mut gx[s * cin * hw..(s + 1) * cin * hw];
                    if k == 1 {
                        R::gemm(
                            kk,
                            cout,
                            hw,
                            R::one(),
                            wv.data(),
                            1,
                            kk as isize,
                            gys,
                            hw as isize,
                            1,
                            R::one(),
                            gxs,
                            hw as isize,
                            1,
                        );
                    } else {
                        R::gemm(
                            kk,
                            cout,
                            hw,
                            R::one(),
                            wv.data(),
                            1,
                            kk as isize,
                            gys,
                            hw as isize,
                            1,
                            R::zero(),
                            &mut dcols,
                            hw as isize,
                            1,
                        );
                        col2im(&dcols, cin, h, wd, k, gxs);
                    }
                }
                accumulate(slots, x, Tensor::new(self.value(x).shape().to_vec(), gx));
                accumulate(slots, w, Tensor::new(wv.shape().to_vec(), gw));
                accumulate(slots, b, Tensor::new(vec![cout], gb));
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(x).batch_split();
                let wv = self.value(w);
                let dout = wv.shape()[0];
                let gyd = gy.data();
                let mut gx = vec![R::zero(); n * din];
                R::gemm(
                    n,
                    dout,
                    din,
                    R::one(),
                    gyd,
                    dout as isize,
                    1,
                    wv.data(),
                    din as isize,
                    1,
                    R::zero(),
                    &mut gx,
                    din as isize,
                    1,
                );
                let mut gw = vec![R::zero(); dout * din];
                R::gemm(
                    dout,
                    n,
                    din,
                    R::one(),
                    gyd,
                    1,
                    dout as isize,
                    self.value(x).data(),
                    din as isize,
                    1,
                    R::zero(),
                    &mut gw,
                    din as isize,
                    1,
                );
                let mut gb = vec![R::zero(); dout];
                for row in gyd.chunks(dout) {
                    for (g, &v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
                accumulate(slots, x, Tensor::new(self.value(x).shape().to_vec(), gx));
                accumulate(slots, w, Tensor::new(wv.shape().to_vec(), gw));
                accumulate(slots, b, Tensor::new(vec![dout], gb));
            }
            Op::GroupNorm { x, gamma, beta, groups, ref mean, ref rstd } => {
                let (n, c, h, w) = self.value(x).nchw();
                let cg = c / groups;
                let hw = h * w;
                let m = R::lit((cg * hw) as f64);
                let xv = self.value(x).data();
                let gv = self.value(gamma).data();
                let gyd = gy.data();
                let mut gx = vec![R::zero(); xv.len()];
                let mut ggamma = vec![R::zero(); c];
                let mut gbeta = vec![R::zero(); c];
                for s in 0..n {
                    for g in 0..groups {
                        let (mu, rs) = (mean[s * groups + g], rstd[s * groups + g]);
                        let base = (s * c + g * cg) * hw;
                        let mut sum_d = R::zero();
                        let mut sum_dx = R::zero();
                        for ci in 0..cg {
                            let ch = g * cg + ci;
                            let off = base + ci * hw;
                            let mut gsum = R::zero();
                            let mut bsum = R::zero();
                            for i in off..off + hw {
                                let xhat = (xv[i] - mu) * rs;
                                let d = gyd[i] * gv[ch];
                                sum_d += d;
                                sum_dx += d * xhat;
                                gsum += gyd[i] * xhat;
                                bsum += gyd[i];
                            }
                            ggamma[ch] += gsum;
                            gbeta[ch] += bsum;
                        }
                        let (md, mdx) = (sum_d / m, sum_dx / m);
                        for ci in 0..cg {
                            let ch = g * cg + ci;
                            let off = base + ci * hw;
                            for i in off..off + hw {
                                let xhat = (xv[i] - mu) * rs;
                                gx[i] = rs * (gyd[i] * gv[ch] - md - xhat * mdx);
                            }
                        }
                    }
                }
                accumulate(slots, x, Tensor::new(self.value(x).shape().to_vec(), gx));
                accumulate(slots, gamma, Tensor::new(vec![c], ggamma));
                accumulate(slots, beta, Tensor::new(vec![c], gbeta));
            }
            Op::Silu { x } => {
                let xv = self.value(x);
                let data = xv
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| {
                        let s = sigmoid(v);
                        g * s * (R::one() + v * (R::one() - s))
                    })
                    .collect();
                accumulate(slots, x, Tensor::new(xv.shape().to_vec(), data));
            }
            Op::ScaleShift { x, ss } => {
                let (n, c, h, w) = self.value(x).nchw();
                let hw = h * w;
                let xv = self.value(x).data();
                let sv = self.value(ss).data();
                let gyd = gy.data();
                let mut gx = vec![R::zero(); xv.len()];
                let mut gss = vec![R::zero(); n * 2 * c];
                for s in 0..n {
                    for ch in 0..c {
                        let scale = R::one() + sv[s * 2 * c + ch];
                        let off = (s * c + ch) * hw;
                        let mut gs = R::zero();
                        let mut gsh = R::zero();
                        for i in off..off + hw {
                            gx[i] = gyd[i] * scale;
                            gs += gyd[i] * xv[i];
                            gsh += gyd[i];
                        }
                        gss[s * 2 * c + ch] = gs;
                        gss[s * 2 * c + c + ch] = gsh;
                    }
                }
                accumulate(slots, x, Tensor::new(self.value(x).shape().to_vec(), gx));
                accumulate(slots, ss, Tensor::new(vec![n, 2 * c], gss));
            }
            Op::AvgPool2 { x } => {
                let (n, c, h, w) = self.value(x).nchw();
                let (oh, ow) = (h / 2, w / 2);
                let quarter = R::lit(0.25);
                let gyd = gy.data();
                let shape = self.value(x).shape().to_vec();
                let gx = slot_mut(slots, x, &shape).data_mut();
                for p in 0..n * c {
                    let src = &gyd[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            let g = src[y * ow + xx] * quarter;
                            let i = 2 * y * w + 2 * xx;
                            dst[i] += g;
                            dst[i + 1] += g;
                            dst[i + w] += g;
                            dst[i + w + 1] += g;
                        }
                    }
                }
            }
            Op::Upsample2 { x } => {
                let (n, c, h, w) = self.value(x).nchw();
                let (oh, ow) = (h * 2, w * 2);
                let gyd = gy.data();
                let shape = self.value(x).shape().to_vec();
                let gx = slot_mut(slots, x, &shape).data_mut();
                for p in 0..n * c {
                    let src = &gyd[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                let inner: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                let n = sa[0];
                let gyd = gy.data();
                let mut ga = Vec::with_capacity(n * ca);
                let mut gb = Vec::with_capacity(n * cb);
                for s in 0..n {
                    let row = &gyd[s * (ca + cb)..(s + 1) * (ca + cb)];
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                accumulate(slots, a, Tensor::new(sa, ga));
                accumulate(slots, b, Tensor::new(sb, gb));
            }
            Op::Add { a, b } => {
                accumulate(slots, a, gy.clone());
                accumulate(slots, b, gy.clone());
            }
            Op::Reshape { x } => {
                let shape = self.value(x).shape().to_vec();
                accumulate(slots, x, gy.clone().reshaped(shape));
            }
            Op::Mse { pred, target } => {
                let (pv, tv) = (self.value(pred), self.value(target));
                let k = gy.data()[0] * R::lit(2.0 / pv.len() as f64);
                let gp: Vec<R> = pv.data().iter().zip(tv.data()).map(|(&p, &t)| (p - t) * k).collect();
                let gt: Vec<R> = gp.iter().map(|&g| -g).collect();
                accumulate(slots, pred, Tensor::new(pv.shape().to_vec(), gp));
                accumulate(slots, target, Tensor::new(tv.shape().to_vec(), gt));
            }
        }
        debug_assert!(out_idx < slots.len());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(sum(w * f(inputs)))/d(inputs) for a
    /// single-operator graph built by `build`.
    fn check_op(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let eval = |vals: &[Tensor<f64>], probe: Option<&Tensor<f64>>| -> (f64, Option<Grads<f64>>, Vec<Var>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
            let y = build(&mut tape, &vars);
            let target = tape.leaf(probe.unwrap().clone());
            let loss = tape.mse(y, target);
            let l = tape.value(loss).data()[0];
            let g = tape.backward(loss);
            (l, Some(g), vars)
        };
        // probe shape from a dry run
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let y = build(&mut tape, &vars);
        let probe = rand_tensor(tape.value(y).shape().to_vec(), &mut rng);

        let (_, grads, vars) = eval(&inputs, Some(&probe));
        let grads = grads.unwrap();
        let h = 1e-5;
        for (i, inp) in inputs.iter().enumerate() {
            let g = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(inp.shape().to_vec()));
            for j in 0..inp.len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let fd = (eval(&plus, Some(&probe)).0 - eval(&minus, Some(&probe)).0) / (2.0 * h);
                let an = g.data()[j];
                assert!(
                    (fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1e-3),
                    "input {i} elem {j}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn conv2d_3x3_and_1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(vec![2, 3, 5, 4], &mut rng);
        let w = rand_tensor(vec![2, 3, 3, 3], &mut rng);
        let b = rand_tensor(vec![2], &mut rng);
        check_op(vec![x.clone(), w, b.clone()], |t, v| t.conv2d(v[0], v[1], v[2]));
        let w1 = rand_tensor(vec![2, 3, 1, 1], &mut rng);
        check_op(vec![x, w1, b], |t, v| t.conv2d(v[0], v[1], v[2]));
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, cin, cout, h, w) = (2, 2, 3, 4, 5);
        let x = rand_tensor(vec![n, cin, h, w], &mut rng);
        let wt = rand_tensor(vec![cout, cin, 3, 3], &mut rng);
        let b = rand_tensor(vec![cout], &mut rng);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(wt.clone()), tape.leaf(b.clone()));
        let y = tape.conv2d(xv, wv, bv);
        let got = tape.value(y).data();
        for s in 0..n {
            for co in 0..cout {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (yy as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += wt.data()[((co * cin + ci) * 3 + ky) * 3 + kx]
                                        * x.data()[((s * cin + ci) * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                        let g = got[((s * cout + co) * h + yy) * w + xx];
                        assert!((g - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn linear_group_norm_silu_scale_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check_op(
            vec![rand_tensor(vec![3, 4], &mut rng), rand_tensor(vec![5, 4], &mut rng), rand_tensor(vec![5], &mut rng)],
            |t, v| t.linear(v[0], v[1], v[2]),
        );
        check_op(
            vec![
                rand_tensor(vec![2, 4, 3, 3], &mut rng),
                rand_tensor(vec![4], &mut rng),
                rand_tensor(vec![4], &mut rng),
            ],
            |t, v| t.group_norm(v[0], v[1], v[2], 2),
        );
        check_op(vec![rand_tensor(vec![2, 3, 2, 2], &mut rng)], |t, v| t.silu(v[0]));
        check_op(vec![rand_tensor(vec![2, 3, 2, 2], &mut rng), rand_tensor(vec![2, 6], &mut rng)], |t, v| {
            t.scale_shift(v[0], v[1])
        });
    }

    #[test]
    fn resampling_concat_add_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check_op(vec![rand_tensor(vec![2, 2, 4, 6], &mut rng)], |t, v| t.avg_pool2(v[0]));
        check_op(vec![rand_tensor(vec![2, 2, 3, 2], &mut rng)], |t, v| t.upsample2(v[0]));
        check_op(vec![rand_tensor(vec![2, 2, 3, 3], &mut rng), rand_tensor(vec![2, 1, 3, 3], &mut rng)], |t, v| {
            t.concat(v[0], v[1])
        });
        check_op(vec![rand_tensor(vec![2, 5], &mut rng), rand_tensor(vec![2, 5], &mut rng)], |t, v| {
            let s = t.add(v[0], v[1]);
            t.reshape(s, vec![2, 1, 5, 1])
        });
        // a var consumed twice accumulates both contributions
        check_op(vec![rand_tensor(vec![2, 3], &mut rng)], |t, v| t.add(v[0], v[0]));
    }

    #[test]
    fn seeded_backward_scales_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(vec![2, 3], &mut rng));
        let y = tape.leaf(rand_tensor(vec![2, 3], &mut rng));
        let l = tape.mse(x, y);
        let g1 = tape.backward(l).get(x).unwrap().clone();
        let g3 = tape.backward_seeded(l, 3.0).get(x).unwrap().clone();
        for (a, b) in g1.data().iter().zip(g3.data()) {
            assert!((3.0 * a - b).abs() < 1e-15);
        }
    }
}
