use super::{Graph, Var};
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution. Kernels are laid out `(c_out, c_in / groups, kh, kw)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const POINTWISE: ConvSpec = ConvSpec {
        stride: 1,
        padding: 0,
        dilation: 1,
        groups: 1,
    };

    /// Size-preserving stride-1 convolution for an odd kernel.
    pub fn same(kernel: usize, dilation: usize, groups: usize) -> Self {
        ConvSpec {
            stride: 1,
            padding: (kernel - 1) * dilation / 2,
            dilation,
            groups,
        }
    }

    pub fn strided(kernel: usize, stride: usize) -> Self {
        ConvSpec {
            stride,
            padding: (kernel - 1) / 2,
            dilation: 1,
            groups: 1,
        }
    }
}

#[derive(Clone, Copy)]
struct Geom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
    spec: ConvSpec,
}

impl Geom {
    fn new(x: &Tensor, k: &Tensor, spec: ConvSpec) -> Geom {
        let (b, cin, h, w) = x.dims4();
        let (cout, cin_g, kh, kw) = k.dims4();
        assert!(spec.groups >= 1 && cin % spec.groups == 0 && cout % spec.groups == 0);
        assert_eq!(cin / spec.groups, cin_g, "kernel input channels do not match groups");
        let eff_h = spec.dilation * (kh - 1) + 1;
        let eff_w = spec.dilation * (kw - 1) + 1;
        assert!(h + 2 * spec.padding >= eff_h && w + 2 * spec.padding >= eff_w, "kernel larger than padded input");
        let oh = (h + 2 * spec.padding - eff_h) / spec.stride + 1;
        let ow = (w + 2 * spec.padding - eff_w) / spec.stride + 1;
        Geom {
            b,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            cin_g,
            cout_g: cout / spec.groups,
            spec,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0 && self.spec.groups == 1
    }

    /// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
    fn range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.spec.stride as isize;
        let off = (k * self.spec.dilation) as isize - self.spec.padding as isize;
        // need 0 <= o*s + off < in_len
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((in_len as isize - 1 - off).div_euclid(s) + 1).clamp(0, out_len as isize);
        let lo = lo.min(out_len as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    fn offset(&self, k: usize) -> isize {
        (k * self.spec.dilation) as isize - self.spec.padding as isize
    }
}

/// Visits every (input plane, output plane, weight) triple together with the
/// per-tap index ranges; the closure performs the actual arithmetic.
fn for_each_tap(
    g: &Geom,
    mut f: impl FnMut(usize, usize, usize, usize, usize, (usize, usize), (usize, usize)),
) {
    let ry: Vec<(usize, usize)> = (0..g.kh).map(|k| g.range(k, g.h, g.oh)).collect();
    let rx: Vec<(usize, usize)> = (0..g.kw).map(|k| g.range(k, g.w, g.ow)).collect();
    for bi in 0..g.b {
        for oc in 0..g.cout {
            let grp = oc / g.cout_g;
            for icg in 0..g.cin_g {
                let ic = grp * g.cin_g + icg;
                for ky in 0..g.kh {
                    if ry[ky].0 >= ry[ky].1 {
                        continue;
                    }
                    for kx in 0..g.kw {
                        if rx[kx].0 >= rx[kx].1 {
                            continue;
                        }
                        let widx = ((oc * g.cin_g + icg) * g.kh + ky) * g.kw + kx;
                        f(bi, oc, ic, widx, ky * g.kw + kx, ry[ky], rx[kx]);
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &Tensor, k: &Tensor, g: &Geom) -> Tensor {
    let mut out = vec![0.0; g.b * g.cout * g.oh * g.ow];
    let xd = x.data();
    let kd = k.data();
    if g.is_pointwise() {
        let plane = g.h * g.w;
        for bi in 0..g.b {
            for oc in 0..g.cout {
                let dst = &mut out[(bi * g.cout + oc) * plane..(bi * g.cout + oc + 1) * plane];
                for ic in 0..g.cin {
                    let wv = kd[oc * g.cin + ic];
                    let src = &xd[(bi * g.cin + ic) * plane..(bi * g.cin + ic + 1) * plane];
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += wv * s;
                    }
                }
            }
        }
        return Tensor::new(&[g.b, g.cout, g.oh, g.ow], out).expect("shape");
    }
    let s = g.spec.stride;
    for_each_tap(g, |bi, oc, ic, widx, tap, (ylo, yhi), (xlo, xhi)| {
        let wv = kd[widx];
        let (ky, kx) = (tap / g.kw, tap % g.kw);
        let (oy_off, ox_off) = (g.offset(ky), g.offset(kx));
        let src = &xd[(bi * g.cin + ic) * g.h * g.w..];
        let dst = &mut out[(bi * g.cout + oc) * g.oh * g.ow..];
        for oy in ylo..yhi {
            let iy = (oy * s) as isize + oy_off;
            let srow = &src[iy as usize * g.w..];
            let drow = &mut dst[oy * g.ow..];
            if s == 1 {
                let base = (xlo as isize + ox_off) as usize;
                for (o, sv) in drow[xlo..xhi].iter_mut().zip(&srow[base..base + (xhi - xlo)]) {
                    *o += wv * sv;
                }
            } else {
                for ox in xlo..xhi {
                    let ix = ((ox * s) as isize + ox_off) as usize;
                    drow[ox] += wv * srow[ix];
                }
            }
        }
    });
    Tensor::new(&[g.b, g.cout, g.oh, g.ow], out).expect("shape")
}

fn conv_backward_input(gout: &Tensor, k: &Tensor, g: &Geom) -> Tensor {
    let mut gx = vec![0.0; g.b * g.cin * g.h * g.w];
    let gd = gout.data();
    let kd = k.data();
    if g.is_pointwise() {
        let plane = g.h * g.w;
        for bi in 0..g.b {
            for oc in 0..g.cout {
                let src = &gd[(bi * g.cout + oc) * plane..(bi * g.cout + oc + 1) * plane];
                for ic in 0..g.cin {
                    let wv = kd[oc * g.cin + ic];
                    let dst = &mut gx[(bi * g.cin + ic) * plane..(bi * g.cin + ic + 1) * plane];
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += wv * s;
                    }
                }
            }
        }
        return Tensor::new(&[g.b, g.cin, g.h, g.w], gx).expect("shape");
    }
    let s = g.spec.stride;
    for_each_tap(g, |bi, oc, ic, widx, tap, (ylo, yhi), (xlo, xhi)| {
        let wv = kd[widx];
        let (ky, kx) = (tap / g.kw, tap % g.kw);
        let (oy_off, ox_off) = (g.offset(ky), g.offset(kx));
        let src = &gd[(bi * g.cout + oc) * g.oh * g.ow..];
        let dst = &mut gx[(bi * g.cin + ic) * g.h * g.w..];
        for oy in ylo..yhi {
            let iy = (oy * s) as isize + oy_off;
            let srow = &src[oy * g.ow..];
            let drow = &mut dst[iy as usize * g.w..];
            if s == 1 {
                let base = (xlo as isize + ox_off) as usize;
                for (o, sv) in drow[base..base + (xhi - xlo)].iter_mut().zip(&srow[xlo..xhi]) {
                    *o += wv * sv;
                }
            } else {
                for ox in xlo..xhi {
                    let ix = ((ox * s) as isize + ox_off) as usize;
                    drow[ix] += wv * srow[ox];
                }
            }
        }
    });
    Tensor::new(&[g.b, g.cin, g.h, g.w], gx).expect("shape")
}

fn conv_backward_kernel(gout: &Tensor, x: &Tensor, k: &Tensor, g: &Geom) -> Tensor {
    let mut gk = vec![0.0; k.numel()];
    let gd = gout.data();
    let xd = x.data();
    if g.is_pointwise() {
        let plane = g.h * g.w;
        for bi in 0..g.b {
            for oc in 0..g.cout {
                let go = &gd[(bi * g.cout + oc) * plane..(bi * g.cout + oc + 1) * plane];
                for ic in 0..g.cin {
                    let xs = &xd[(bi * g.cin + ic) * plane..(bi * g.cin + ic + 1) * plane];
                    gk[oc * g.cin + ic] += go.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        return Tensor::new(k.shape(), gk).expect("shape");
    }
    let s = g.spec.stride;
    for_each_tap(g, |bi, oc, ic, widx, tap, (ylo, yhi), (xlo, xhi)| {
        let (ky, kx) = (tap / g.kw, tap % g.kw);
        let (oy_off, ox_off) = (g.offset(ky), g.offset(kx));
        let go = &gd[(bi * g.cout + oc) * g.oh * g.ow..];
        let xs = &xd[(bi * g.cin + ic) * g.h * g.w..];
        let mut acc = 0.0;
        for oy in ylo..yhi {
            let iy = (oy * s) as isize + oy_off;
            let grow = &go[oy * g.ow..];
            let xrow = &xs[iy as usize * g.w..];
            if s == 1 {
                let base = (xlo as isize + ox_off) as usize;
                acc += grow[xlo..xhi]
                    .iter()
                    .zip(&xrow[base..base + (xhi - xlo)])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            } else {
                for ox in xlo..xhi {
                    let ix = ((ox * s) as isize + ox_off) as usize;
                    acc += grow[ox] * xrow[ix];
                }
            }
        }
        gk[widx] += acc;
    });
    Tensor::new(k.shape(), gk).expect("shape")
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum PoolKind {
    Avg,
    Max,
}

impl Graph {
    /// Bias-free 2-D convolution.
    pub fn conv2d(&mut self, x: Var, kernel: Var, spec: ConvSpec) -> Var {
        let geom = Geom::new(self.value(x), self.value(kernel), spec);
        let out = conv_forward(self.value(x), self.value(kernel), &geom);
        self.custom(
            out,
            &[x, kernel],
            Box::new(move |ctx| {
                vec![
                    ctx.needs[0].then(|| conv_backward_input(ctx.grad, ctx.inputs[1], &geom)),
                    ctx.needs[1].then(|| conv_backward_kernel(ctx.grad, ctx.inputs[0], ctx.inputs[1], &geom)),
                ]
            }),
        )
    }

    /// 3x3, stride 1, padding 1 average pooling; padded cells are excluded from the mean.
    pub fn avg_pool3(&mut self, x: Var) -> Var {
        self.pool3(x, PoolKind::Avg)
    }

    /// 3x3, stride 1, padding 1 max pooling; padded cells never win.
    pub fn max_pool3(&mut self, x: Var) -> Var {
        self.pool3(x, PoolKind::Max)
    }

    fn pool3(&mut self, x: Var, kind: PoolKind) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        // for max: flat source index of the winner per output cell
        let mut arg = if kind == PoolKind::Max { vec![0usize; xd.len()] } else { Vec::new() };
        for p in 0..b * c {
            let base = p * h * w;
            for y in 0..h {
                let (y0, y1) = (y.saturating_sub(1), (y + 2).min(h));
                for xx in 0..w {
                    let (x0, x1) = (xx.saturating_sub(1), (xx + 2).min(w));
                    let o = base + y * w + xx;
                    match kind {
                        PoolKind::Avg => {
                            let mut s = 0.0;
                            for yy in y0..y1 {
                                for xi in x0..x1 {
                                    s += xd[base + yy * w + xi];
                                }
                            }
                            out[o] = s / ((y1 - y0) * (x1 - x0)) as f64;
                        }
                        PoolKind::Max => {
                            let mut best = f64::NEG_INFINITY;
                            let mut bi = 0;
                            for yy in y0..y1 {
                                for xi in x0..x1 {
                                    let v = xd[base + yy * w + xi];
                                    if v > best {
                                        best = v;
                                        bi = base + yy * w + xi;
                                    }
                                }
                            }
                            out[o] = best;
                            arg[o] = bi;
                        }
                    }
                }
            }
        }
        self.custom(
            Tensor::new(&[b, c, h, w], out).expect("shape"),
            &[x],
            Box::new(move |ctx| {
                let gd = ctx.grad.data();
                let mut gx = vec![0.0; gd.len()];
                match kind {
                    PoolKind::Max => {
                        for (o, &src) in arg.iter().enumerate() {
                            gx[src] += gd[o];
                        }
                    }
                    PoolKind::Avg => {
                        for p in 0..b * c {
                            let base = p * h * w;
                            for y in 0..h {
                                let (y0, y1) = (y.saturating_sub(1), (y + 2).min(h));
                                for xx in 0..w {
                                    let (x0, x1) = (xx.saturating_sub(1), (xx + 2).min(w));
                                    let share = gd[base + y * w + xx] / ((y1 - y0) * (x1 - x0)) as f64;
                                    for yy in y0..y1 {
                                        for xi in x0..x1 {
                                            gx[base + yy * w + xi] += share;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, c, h, w], gx).expect("shape"))]
            }),
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h * factor, w * factor);
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = xd[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        self.custom(
            Tensor::new(&[b, c, oh, ow], out).expect("shape"),
            &[x],
            Box::new(move |ctx| {
                let gd = ctx.grad.data();
                let mut gx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[(p * h + y / factor) * w + xx / factor] += gd[(p * oh + y) * ow + xx];
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, c, h, w], gx).expect("shape"))]
            }),
        )
    }

    /// Bilinear upsampling by an integer factor with half-pixel centres
    /// (the `align_corners = false` convention).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h * factor, w * factor);
        let ty = bilinear_taps(h, factor);
        let tx = bilinear_taps(w, factor);
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (xx, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                    out[(p * oh + y) * ow + xx] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        self.custom(
            Tensor::new(&[b, c, oh, ow], out).expect("shape"),
            &[x],
            Box::new(move |ctx| {
                let gd = ctx.grad.data();
                let mut gx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (xx, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let g = gd[(p * oh + y) * ow + xx];
                            dst[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                            dst[y0 * w + x1] += g * (1.0 - ly) * lx;
                            dst[y1 * w + x0] += g * ly * (1.0 - lx);
                            dst[y1 * w + x1] += g * ly * lx;
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, c, h, w], gx).expect("shape"))]
            }),
        )
    }
}

fn bilinear_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    /// Direct six-loop convolution used as an independent oracle.
    fn naive_conv(x: &Tensor, k: &Tensor, spec: ConvSpec) -> Tensor {
        let (b, cin, h, w) = x.dims4();
        let (cout, cin_g, kh, kw) = k.dims4();
        let oh = (h + 2 * spec.padding - spec.dilation * (kh - 1) - 1) / spec.stride + 1;
        let ow = (w + 2 * spec.padding - spec.dilation * (kw - 1) - 1) / spec.stride + 1;
        let cout_g = cout / spec.groups;
        let mut out = Tensor::zeros(&[b, cout, oh, ow]);
        for bi in 0..b {
            for oc in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for icg in 0..cin_g {
                            let ic = (oc / cout_g) * cin_g + icg;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    s += k.data()[((oc * cin_g + icg) * kh + ky) * kw + kx]
                                        * x.data()[((bi * cin + ic) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((bi * cout + oc) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn specs() -> Vec<(Vec<usize>, Vec<usize>, ConvSpec)> {
        vec![
            (vec![2, 3, 5, 6], vec![4, 3, 3, 3], ConvSpec::same(3, 1, 1)),
            (vec![1, 4, 7, 7], vec![4, 1, 5, 5], ConvSpec::same(5, 2, 4)),
            (vec![2, 2, 8, 8], vec![3, 2, 3, 3], ConvSpec::strided(3, 2)),
            (vec![1, 3, 4, 4], vec![5, 3, 1, 1], ConvSpec::POINTWISE),
            (vec![1, 4, 6, 5], vec![2, 2, 3, 3], ConvSpec { stride: 1, padding: 2, dilation: 2, groups: 2 }),
            // taps that never land inside a tiny map
            (vec![1, 2, 2, 3], vec![2, 1, 5, 5], ConvSpec::same(5, 2, 2)),
        ]
    }

    #[test]
    fn conv_matches_naive_loops() {
        for (i, (xs, ks, spec)) in specs().into_iter().enumerate() {
            let x = rand_tensor(&xs, i as u64);
            let k = rand_tensor(&ks, 100 + i as u64);
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let kv = g.constant(k.clone());
            let y = g.conv2d(xv, kv, spec);
            let expect = naive_conv(&x, &k, spec);
            assert_eq!(g.value(y).shape(), expect.shape());
            assert!(g.value(y).max_abs_diff(&expect) < 1e-12, "case {i}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for (i, (xs, ks, spec)) in specs().into_iter().enumerate() {
            let x = rand_tensor(&xs, 10 + i as u64);
            let k = rand_tensor(&ks, 200 + i as u64);
            let w = rand_tensor(&xs, 300 + i as u64);
            let loss = |x: &Tensor, k: &Tensor| {
                let y = naive_conv(x, k, spec);
                y.data().iter().map(|v| v * v).sum::<f64>()
            };
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), true);
            let kv = g.leaf(k.clone(), true);
            let y = g.conv2d(xv, kv, spec);
            let sq = g.mul(y, y);
            let s = g.sum(sq);
            let grads = g.backward(s);
            let nx = numeric_grad(&x, 1e-6, |x| loss(x, &k));
            let nk = numeric_grad(&k, 1e-6, |k| loss(&x, k));
            assert_grad_close(grads.get(xv).unwrap(), &nx, 1e-6);
            assert_grad_close(grads.get(kv).unwrap(), &nk, 1e-6);
            let _ = w;
        }
    }

    #[test]
    fn pooling_and_upsampling_gradients() {
        let x = rand_tensor(&[1, 2, 4, 5], 5);
        let w = rand_tensor(&[1, 2, 8, 10], 6);
        for which in 0..4 {
            let f = |x: &Tensor| {
                let mut g = Graph::new();
                let xv = g.leaf(x.clone(), true);
                let y = match which {
                    0 => g.avg_pool3(xv),
                    1 => g.max_pool3(xv),
                    2 => g.upsample_nearest(xv, 2),
                    _ => g.upsample_bilinear(xv, 2),
                };
                let y = if which >= 2 {
                    let wv = g.constant(w.clone());
                    g.mul(y, wv)
                } else {
                    g.mul(y, y)
                };
                let s = g.sum(y);
                let grad = g.backward(s).get(xv).unwrap().clone();
                (g.value(s).item(), grad)
            };
            let (_, an) = f(&x);
            let num = numeric_grad(&x, 1e-6, |x| f(x).0);
            assert_grad_close(&an, &num, 1e-6);
        }
    }

    #[test]
    fn bilinear_preserves_constants_and_pools_preserve_zero() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[1, 1, 2, 2], 3.5));
        let up = g.upsample_bilinear(c, 4);
        assert!(g.value(up).data().iter().all(|&v| (v - 3.5).abs() < 1e-15));
        let z = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let a = g.avg_pool3(z);
        let m = g.max_pool3(z);
        assert!(g.value(a).data().iter().chain(g.value(m).data()).all(|&v| v == 0.0));
    }
}
