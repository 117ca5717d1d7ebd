//! Convolution, dense, pooling and resampling operations.

use crate::graph::{Graph, Op, Var};
use crate::kernels::{col2im, im2col, swap_leading, ConvGeom};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

impl<T: Scalar> Graph<T> {
    /// `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]`, optional bias `[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Co, Ci, k, k]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?} weight {ws:?}");
        assert_eq!(ws[2], ws[3], "conv2d kernels must be square");
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let batch = xs[0];
        let co = ws[0];
        let p = geom.out_pixels();
        let cols = batch * p;
        let mut col = vec![T::zero(); geom.col_rows() * cols];
        im2col(self.value(x).data(), batch, &geom, &mut col);
        let mut tmp = vec![T::zero(); co * cols];
        T::gemm(
            co,
            cols,
            geom.col_rows(),
            T::one(),
            self.value(w).data(),
            false,
            &col,
            false,
            T::zero(),
            &mut tmp,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (o, row) in tmp.chunks_mut(cols).enumerate() {
                let bv = bias[o];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        let out = swap_leading(&tmp, co, batch, p);
        let value = Tensor::new([batch, co, geom.out_height(), geom.out_width()], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_op(value, Op::Conv2d { x, w, b, geom, batch }, &parents)
    }

    /// `x: [N, Ci, H, W]`, `w: [Ci, Co, k, k]`. Output side is
    /// `(H - 1) * stride - 2 * pad + k + out_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv_transpose2d input must be NCHW");
        assert_eq!(xs[1], ws[0], "conv_transpose2d channel mismatch: {xs:?} vs {ws:?}");
        let (ci, co, k) = (ws[0], ws[1], ws[2]);
        let batch = xs[0];
        let ho = (xs[2] - 1) * stride + k + out_pad - 2 * pad;
        let wo = (xs[3] - 1) * stride + k + out_pad - 2 * pad;
        let geom = ConvGeom {
            channels: co,
            height: ho,
            width: wo,
            kernel: k,
            stride,
            pad,
        };
        debug_assert_eq!(geom.out_height(), xs[2]);
        let hw = xs[2] * xs[3];
        let xp = swap_leading(self.value(x).data(), batch, ci, hw);
        let cols = batch * hw;
        let mut col = vec![T::zero(); geom.col_rows() * cols];
        T::gemm(
            geom.col_rows(),
            cols,
            ci,
            T::one(),
            self.value(w).data(),
            true,
            &xp,
            false,
            T::zero(),
            &mut col,
        );
        let mut out = vec![T::zero(); batch * co * ho * wo];
        col2im(&col, batch, &geom, &mut out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (idx, chunk) in out.chunks_mut(ho * wo).enumerate() {
                let bv = bias[idx % co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::new([batch, co, ho, wo], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_op(value, Op::ConvTranspose2d { x, w, b, geom, batch }, &parents)
    }

    /// Convolution of a spatially constant map built from `cond: [N, K]`
    /// (replicated over an `height x width` grid, zero padded) with `w: [Co, K, k, k]`.
    /// Equals `conv2d(tile(cond), w)` without materialising the tiled input.
    pub fn broadcast_conv(&mut self, cond: Var, w: Var, height: usize, width: usize, stride: usize, pad: usize) -> Var {
        let cs = self.shape(cond).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(cs.len(), 2, "broadcast_conv condition must be [N, K]");
        assert_eq!(cs[1], ws[1], "broadcast_conv width mismatch: {cs:?} vs {ws:?}");
        let geom = ConvGeom {
            channels: ws[1],
            height,
            width,
            kernel: ws[2],
            stride,
            pad,
        };
        let (n, kdim, co, kk) = (cs[0], cs[1], ws[0], ws[2] * ws[2]);
        // m[kdim, co*kk] = w permuted to put the condition axis first
        let m = swap_leading(self.value(w).data(), co, kdim, kk);
        let mut v = vec![T::zero(); n * co * kk];
        T::gemm(
            n,
            co * kk,
            kdim,
            T::one(),
            self.value(cond).data(),
            false,
            &m,
            false,
            T::zero(),
            &mut v,
        );
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let taps = valid_taps(&geom);
        let mut out = vec![T::zero(); n * co * ho * wo];
        for s in 0..n {
            for o in 0..co {
                let vt = &v[(s * co + o) * kk..(s * co + o + 1) * kk];
                let dst = &mut out[(s * co + o) * ho * wo..(s * co + o + 1) * ho * wo];
                for (pix, d) in dst.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for &t in &taps[pix] {
                        acc += vt[t];
                    }
                    *d = acc;
                }
            }
        }
        let value = Tensor::new([n, co, ho, wo], out);
        self.push_op(value, Op::BroadcastConv { cond, w, geom }, &[cond, w])
    }

    /// `x: [N, F]`, `w: [O, F]`, optional bias `[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear input must be [N, F], got {xs:?}");
        assert_eq!(xs[1], ws[1], "linear width mismatch: {xs:?} vs {ws:?}");
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        T::gemm(
            n,
            o,
            f,
            T::one(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (v, &bv) in row.iter_mut().zip(bias) {
                    *v += bv;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_op(Tensor::new([n, o], out), Op::Linear { x, w, b }, &parents)
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(nc * ho * wo);
        let mut argmax = Vec::with_capacity(nc * ho * wo);
        for c in 0..nc {
            let base = c * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new([s[0], s[1], ho, wo], out);
        self.push_op(value, Op::MaxPool2 { x, argmax }, &[x])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let q: T = lit(0.25);
        let mut out = Vec::with_capacity(nc * ho * wo);
        for c in 0..nc {
            let base = c * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let a = base + 2 * i * w + 2 * j;
                    out.push((src[a] + src[a + 1] + src[a + w] + src[a + w + 1]) * q);
                }
            }
        }
        let value = Tensor::new([s[0], s[1], ho, wo], out);
        self.push_op(value, Op::AvgPool2(x), &[x])
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); nc * 4 * h * w];
        for c in 0..nc {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(c * 2 * h + i) * 2 * w + j] = src[(c * h + i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor::new([s[0], s[1], 2 * h, 2 * w], out);
        self.push_op(value, Op::Upsample2(x), &[x])
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let hw = s[2] * s[3];
        let src = self.value(x).data();
        let out = src
            .chunks(hw)
            .map(|c| lit::<T>(c.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64))
            .collect();
        self.push_op(Tensor::new([s[0], s[1]], out), Op::GlobalAvgPool(x), &[x])
    }

    pub(crate) fn backward_spatial(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[i].op {
            Op::Conv2d { x, w, b, geom, batch } => {
                let co = self.shape(*w)[0];
                let p = geom.out_pixels();
                let cols = batch * p;
                let gp = swap_leading(g.data(), *batch, co, p);
                if let Some(b) = b {
                    if self.needs_grad(*b) {
                        let db = gp.chunks(cols).map(|r| r.iter().copied().sum()).collect();
                        self.acc(grads, *b, Tensor::new([co], db));
                    }
                }
                if self.needs_grad(*w) {
                    let mut col = vec![T::zero(); geom.col_rows() * cols];
                    im2col(self.value(*x).data(), *batch, geom, &mut col);
                    let mut dw = vec![T::zero(); co * geom.col_rows()];
                    T::gemm(
                        co,
                        geom.col_rows(),
                        cols,
                        T::one(),
                        &gp,
                        false,
                        &col,
                        true,
                        T::zero(),
                        &mut dw,
                    );
                    self.acc(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw));
                }
                if self.needs_grad(*x) {
                    let mut dcol = vec![T::zero(); geom.col_rows() * cols];
                    T::gemm(
                        geom.col_rows(),
                        cols,
                        co,
                        T::one(),
                        self.value(*w).data(),
                        true,
                        &gp,
                        false,
                        T::zero(),
                        &mut dcol,
                    );
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    col2im(&dcol, *batch, geom, &mut dx);
                    self.acc(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, batch } => {
                let ci = self.shape(*w)[0];
                let co = geom.channels;
                let hw = geom.out_pixels();
                let cols = batch * hw;
                if let Some(b) = b {
                    if self.needs_grad(*b) {
                        let plane = geom.height * geom.width;
                        let mut db = vec![T::zero(); co];
                        for (idx, chunk) in g.data().chunks(plane).enumerate() {
                            db[idx % co] += chunk.iter().copied().sum();
                        }
                        self.acc(grads, *b, Tensor::new([co], db));
                    }
                }
                let need_w = self.needs_grad(*w);
                let need_x = self.needs_grad(*x);
                if need_w || need_x {
                    let mut colg = vec![T::zero(); geom.col_rows() * cols];
                    im2col(g.data(), *batch, geom, &mut colg);
                    if need_w {
                        let xp = swap_leading(self.value(*x).data(), *batch, ci, hw);
                        let mut dw = vec![T::zero(); ci * geom.col_rows()];
                        T::gemm(
                            ci,
                            geom.col_rows(),
                            cols,
                            T::one(),
                            &xp,
                            false,
                            &colg,
                            true,
                            T::zero(),
                            &mut dw,
                        );
                        self.acc(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw));
                    }
                    if need_x {
                        let mut dxp = vec![T::zero(); ci * cols];
                        T::gemm(
                            ci,
                            cols,
                            geom.col_rows(),
                            T::one(),
                            self.value(*w).data(),
                            false,
                            &colg,
                            false,
                            T::zero(),
                            &mut dxp,
                        );
                        let dx = swap_leading(&dxp, ci, *batch, hw);
                        self.acc(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx));
                    }
                }
            }
            Op::BroadcastConv { cond, w, geom } => {
                let cs = self.shape(*cond).to_vec();
                let ws = self.shape(*w).to_vec();
                let (n, kdim, co, kk) = (cs[0], cs[1], ws[0], ws[2] * ws[2]);
                let (ho, wo) = (geom.out_height(), geom.out_width());
                let taps = valid_taps(geom);
                let mut dv = vec![T::zero(); n * co * kk];
                for s in 0..n {
                    for o in 0..co {
                        let src = &g.data()[(s * co + o) * ho * wo..(s * co + o + 1) * ho * wo];
                        let dst = &mut dv[(s * co + o) * kk..(s * co + o + 1) * kk];
                        for (pix, &gv) in src.iter().enumerate() {
                            for &t in &taps[pix] {
                                dst[t] += gv;
                            }
                        }
                    }
                }
                if self.needs_grad(*w) {
                    let mut dm = vec![T::zero(); kdim * co * kk];
                    T::gemm(
                        kdim,
                        co * kk,
                        n,
                        T::one(),
                        self.value(*cond).data(),
                        true,
                        &dv,
                        false,
                        T::zero(),
                        &mut dm,
                    );
                    let dw = swap_leading(&dm, kdim, co, kk);
                    self.acc(grads, *w, Tensor::new(ws.clone(), dw));
                }
                if self.needs_grad(*cond) {
                    let m = swap_leading(self.value(*w).data(), co, kdim, kk);
                    let mut dc = vec![T::zero(); n * kdim];
                    T::gemm(n, kdim, co * kk, T::one(), &dv, false, &m, true, T::zero(), &mut dc);
                    self.acc(grads, *cond, Tensor::new(cs, dc));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let (n, f) = (xs[0], xs[1]);
                let o = self.shape(*w)[0];
                if let Some(b) = b {
                    if self.needs_grad(*b) {
                        let mut db = vec![T::zero(); o];
                        for row in g.data().chunks(o) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.acc(grads, *b, Tensor::new([o], db));
                    }
                }
                if self.needs_grad(*w) {
                    let mut dw = vec![T::zero(); o * f];
                    T::gemm(
                        o,
                        f,
                        n,
                        T::one(),
                        g.data(),
                        true,
                        self.value(*x).data(),
                        false,
                        T::zero(),
                        &mut dw,
                    );
                    self.acc(grads, *w, Tensor::new([o, f], dw));
                }
                if self.needs_grad(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    T::gemm(
                        n,
                        f,
                        o,
                        T::one(),
                        g.data(),
                        false,
                        self.value(*w).data(),
                        false,
                        T::zero(),
                        &mut dx,
                    );
                    self.acc(grads, *x, Tensor::new(xs, dx));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    dx[idx] += gv;
                }
                self.acc(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx));
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x).to_vec();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let q: T = lit(0.25);
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for c in 0..nc {
                    for i2 in 0..ho {
                        for j in 0..wo {
                            let gv = g.data()[(c * ho + i2) * wo + j] * q;
                            let a = c * h * w + 2 * i2 * w + 2 * j;
                            dx[a] += gv;
                            dx[a + 1] += gv;
                            dx[a + w] += gv;
                            dx[a + w + 1] += gv;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(s, dx));
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x).to_vec();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for c in 0..nc {
                    for i2 in 0..2 * h {
                        for j in 0..2 * w {
                            dx[(c * h + i2 / 2) * w + j / 2] += g.data()[(c * 2 * h + i2) * 2 * w + j];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(s, dx));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x).to_vec();
                let hw = s[2] * s[3];
                let inv: T = lit(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                self.acc(grads, *x, Tensor::new(s, dx));
            }
            _ => unreachable!("backward_spatial called for a non-spatial op"),
        }
    }
}

/// For each output pixel, the kernel taps that land inside the (unpadded) input.
fn valid_taps(g: &ConvGeom) -> Vec<Vec<usize>> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut out = Vec::with_capacity(ho * wo);
    for i in 0..ho {
        for j in 0..wo {
            let mut taps = Vec::new();
            for a in 0..g.kernel {
                let ih = (i * g.stride + a) as isize - g.pad as isize;
                if ih < 0 || ih >= g.height as isize {
                    continue;
                }
                for b in 0..g.kernel {
                    let iw = (j * g.stride + b) as isize - g.pad as isize;
                    if iw >= 0 && iw < g.width as isize {
                        taps.push(a * g.kernel + b);
                    }
                }
            }
            out.push(taps);
        }
    }
    out
}
