//! 2-D cross-correlation with stride, zero padding and channel groups.
//!
//! Three kernel paths share one contract: depthwise (one input and one output
//! channel per group) runs a direct loop, 1×1/stride-1/unpadded runs a plain
//! GEMM, and everything else lowers to im2col + GEMM.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::same_dtype;
use crate::error::{Error, Result};
use crate::profile::{self, OpKind};
use crate::tensor::{dispatch, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dParams {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self {
            stride: 1,
            pad: 0,
            groups: 1,
        }
    }
}

impl Conv2dParams {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Self { stride, pad, groups }
    }

    /// Output extent for one spatial axis (floor semantics).
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

impl Tensor {
    /// `x: [N, Cin, H, W]`, `w: [Cout, Cin/groups, kh, kw]`, `b: [Cout]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, params: Conv2dParams) -> Result<Tensor> {
        let _p = profile::enter(OpKind::Conv2d);
        same_dtype("conv2d", self, weight)?;
        let (n, cin, h, w) = self.dims4()?;
        let (cout, cin_g, kh, kw) = weight.dims4()?;
        let g = params.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("groups {g} must divide Cin {cin} and Cout {cout}"),
            ));
        }
        if cin_g != cin / g {
            return Err(Error::shape(
                "conv2d",
                format!("weight {:?} does not match input {:?} with groups {g}", weight.shape(), self.shape()),
            ));
        }
        if let Some(b) = bias {
            same_dtype("conv2d", self, b)?;
            if b.shape() != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?}, Cout {cout}", b.shape())));
            }
        }
        let (Some(ho), Some(wo)) = (params.out_extent(h, kh), params.out_extent(w, kw)) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} with stride {} pad {} gives no output for {h}x{w}", params.stride, params.pad),
            ));
        };
        let geom = Geom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            stride: params.stride,
            pad: params.pad,
            groups: g,
        };
        dispatch!(self.dtype(), conv_impl(self, weight, bias, geom))
    }
}

fn im2col<T: Element>(g: &Geom, x: &[T], cols: &mut [T]) {
    let (h, w, ho, wo) = (g.h, g.w, g.ho, g.wo);
    let plane = g.out_plane();
    for ci in 0..g.cin_g() {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            xc[iy as usize * w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &Geom, cols: &[T], dx: &mut [T]) {
    let (h, w, ho, wo) = (g.h, g.w, g.ho, g.wo);
    let plane = g.out_plane();
    for ci in 0..g.cin_g() {
        let dc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dc[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// One depthwise channel: `out[oy, ox] = Σ k[ky, kx] · x[oy·s+ky−p, ox·s+kx−p]`.
fn dw_forward<T: Element>(g: &Geom, x: &[T], k: &[T], out: &mut [T]) {
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let mut acc = T::zero();
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy as usize >= g.h {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix >= 0 && (ix as usize) < g.w {
                        acc += k[ky * g.kw + kx] * x[iy as usize * g.w + ix as usize];
                    }
                }
            }
            out[oy * g.wo + ox] = acc;
        }
    }
}

fn dw_backward<T: Element>(g: &Geom, x: &[T], k: &[T], dy: &[T], dx: &mut [T], dk: &mut [T]) {
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let go = dy[oy * g.wo + ox];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy as usize >= g.h {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix >= 0 && (ix as usize) < g.w {
                        let xi = iy as usize * g.w + ix as usize;
                        dk[ky * g.kw + kx] += go * x[xi];
                        dx[xi] += go * k[ky * g.kw + kx];
                    }
                }
            }
        }
    }
}

/// Forward for one batch item; `out` is `[Cout, Ho, Wo]`.
fn forward_item<T: Element>(g: &Geom, x: &[T], wt: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let in_plane = g.h * g.w;
    let plane = g.out_plane();
    let wg = cout_g * g.col_rows();
    let mut cols = if g.depthwise() || g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * plane]
    };
    for grp in 0..g.groups {
        let xg = &x[grp * cin_g * in_plane..(grp + 1) * cin_g * in_plane];
        let wgs = &wt[grp * wg..(grp + 1) * wg];
        let og = &mut out[grp * cout_g * plane..(grp + 1) * cout_g * plane];
        if g.depthwise() {
            dw_forward(g, xg, wgs, og);
        } else if g.pointwise() {
            gemm_nn(cout_g, cin_g, plane, wgs, xg, og, false);
        } else {
            im2col(g, xg, &mut cols);
            gemm_nn(cout_g, g.col_rows(), plane, wgs, &cols, og, false);
        }
    }
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(plane).enumerate() {
            for v in chunk {
                *v += b[co];
            }
        }
    }
}

fn conv_impl<T: Element>(x: &Tensor, wt: &Tensor, bias: Option<&Tensor>, g: Geom) -> Result<Tensor> {
    let xv = x.values::<T>();
    let wv = wt.values::<T>();
    let bv = bias.map(|b| b.values::<T>());
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * g.out_plane();
    let mut out = vec![T::zero(); g.n * out_item];
    out.par_chunks_mut(out_item)
        .enumerate()
        .for_each(|(b, o)| forward_item(&g, &xv[b * in_item..(b + 1) * in_item], wv, bv, o));

    let mut parents = vec![x, wt];
    if let Some(b) = bias {
        parents.push(b);
    }
    let has_bias = bias.is_some();
    Tensor::from_op("conv2d", vec![g.n, g.cout, g.ho, g.wo], T::wrap(out), &parents, || {
        let (x, wt) = (x.clone(), wt.clone());
        Box::new(move |dy| {
            let dy = T::view(dy);
            let (dx, dw) = conv_backward(&g, x.values::<T>(), wt.values::<T>(), dy);
            let mut grads = vec![Some(T::wrap(dx)), Some(T::wrap(dw))];
            if has_bias {
                let plane = g.out_plane();
                let mut db = vec![T::zero(); g.cout];
                for b in 0..g.n {
                    for (co, d) in db.iter_mut().enumerate() {
                        let off = (b * g.cout + co) * plane;
                        for &v in &dy[off..off + plane] {
                            *d += v;
                        }
                    }
                }
                grads.push(Some(T::wrap(db)));
            }
            Ok(grads)
        })
    })
}

fn conv_backward<T: Element>(g: &Geom, x: &[T], wt: &[T], dy: &[T]) -> (Vec<T>, Vec<T>) {
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let in_plane = g.h * g.w;
    let plane = g.out_plane();
    let in_item = g.cin * in_plane;
    let out_item = g.cout * plane;
    let wg = cout_g * g.col_rows();

    // Per-item weight-gradient partials are reduced in ascending batch order.
    let per_item: Vec<(Vec<T>, Vec<T>)> = (0..g.n)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * in_item..(b + 1) * in_item];
            let dyb = &dy[b * out_item..(b + 1) * out_item];
            let mut dxb = vec![T::zero(); in_item];
            let mut dwb = vec![T::zero(); wt.len()];
            let mut cols = vec![T::zero(); if g.depthwise() { 0 } else { g.col_rows() * plane }];
            for grp in 0..g.groups {
                let xg = &xb[grp * cin_g * in_plane..(grp + 1) * cin_g * in_plane];
                let dyg = &dyb[grp * cout_g * plane..(grp + 1) * cout_g * plane];
                let wgs = &wt[grp * wg..(grp + 1) * wg];
                let dwg = &mut dwb[grp * wg..(grp + 1) * wg];
                let dxg = &mut dxb[grp * cin_g * in_plane..(grp + 1) * cin_g * in_plane];
                if g.depthwise() {
                    dw_backward(g, xg, wgs, dyg, dxg, dwg);
                    continue;
                }
                if g.pointwise() {
                    gemm_nt(cout_g, plane, cin_g, dyg, xg, dwg, false);
                    gemm_tn(cin_g, cout_g, plane, wgs, dyg, dxg, false);
                } else {
                    im2col(g, xg, &mut cols);
                    gemm_nt(cout_g, plane, g.col_rows(), dyg, &cols, dwg, false);
                    gemm_tn(g.col_rows(), cout_g, plane, wgs, dyg, &mut cols, false);
                    col2im(g, &cols, dxg);
                }
            }
            (dxb, dwb)
        })
        .collect();

    let mut dx = Vec::with_capacity(g.n * in_item);
    let mut dw = vec![T::zero(); wt.len()];
    for (dxb, dwb) in per_item {
        dx.extend_from_slice(&dxb);
        for (a, b) in dw.iter_mut().zip(&dwb) {
            *a += *b;
        }
    }
    (dx, dw)
}
