//! Straight-line f64 reference implementations used as oracles.
//!
//! Everything here is written with explicit index loops over plain vectors
//! and reads layer weights only, never calling the library's tensor ops.

#![allow(dead_code)]

use shvit::model::{Block, Downsample, Mixer, Model};
use shvit::nn::{BatchNorm, BnLinear, ConvBn, Ffn, Mhsa, Module, Shsa, Slot};
use shvit::rng::Rng;
use shvit::Tensor;

/// Dense NCHW activation.
#[derive(Clone, Debug)]
pub struct A {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl A {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, d: vec![0.0; n * c * h * w] }
    }

    pub fn from(t: &Tensor) -> Self {
        let (n, c, h, w) = t.dims4().unwrap();
        Self { n, c, h, w, d: t.to_vec_f64() }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.d[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn idx(&self, n: usize, c: usize, t: usize) -> usize {
        (n * self.c + c) * self.h * self.w + t
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn conv(x: &A, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize, groups: usize) -> A {
    let s = weight.shape();
    let (cout, cin_g, k) = (s[0], s[1], s[2]);
    let wv = weight.to_vec_f64();
    let bv = bias.map(|b| b.to_vec_f64());
    let ho = (x.h + 2 * pad - k) / stride + 1;
    let wo = (x.w + 2 * pad - k) / stride + 1;
    let cout_g = cout / groups;
    let mut y = A::zeros(x.n, cout, ho, wo);
    for n in 0..x.n {
        for o in 0..cout {
            let g = o / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bv.as_ref().map_or(0.0, |b| b[o]);
                    for i in 0..cin_g {
                        let ci = g * cin_g + i;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                acc += wv[((o * cin_g + i) * k + ky) * k + kx] * x.at(n, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    y.d[((n * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    y
}

fn bn_coeffs(bn: &BatchNorm) -> (Vec<f64>, Vec<f64>) {
    let g = bn.gamma.to_vec_f64();
    let b = bn.beta.to_vec_f64();
    let m = bn.running_mean().to_vec_f64();
    let v = bn.running_var().to_vec_f64();
    let scale: Vec<f64> = (0..g.len()).map(|c| g[c] / (v[c] + bn.eps).sqrt()).collect();
    let shift = (0..g.len()).map(|c| b[c] - m[c] * scale[c]).collect();
    (scale, shift)
}

pub fn bn_eval(x: &A, bn: &BatchNorm) -> A {
    let (s, t) = bn_coeffs(bn);
    let mut y = x.clone();
    for n in 0..x.n {
        for c in 0..x.c {
            for p in 0..x.tokens() {
                let i = x.idx(n, c, p);
                y.d[i] = x.d[i] * s[c] + t[c];
            }
        }
    }
    y
}

pub fn conv_bn(x: &A, cb: &ConvBn) -> A {
    let p = cb.conv.params;
    let y = conv(x, &cb.conv.weight, cb.conv.bias.as_ref(), p.stride, p.pad, p.groups);
    match &cb.bn {
        Some(bn) => bn_eval(&y, bn),
        None => y,
    }
}

pub fn relu(mut x: A) -> A {
    for v in &mut x.d {
        *v = v.max(0.0);
    }
    x
}

pub fn add(a: &A, b: &A) -> A {
    let mut y = a.clone();
    for (v, w) in y.d.iter_mut().zip(&b.d) {
        *v += w;
    }
    y
}

/// Layer norm over the given channels at each spatial position of sample `n`.
fn ln_token(vals: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let k = vals.len() as f64;
    let mu = vals.iter().sum::<f64>() / k;
    let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / k;
    vals.iter()
        .enumerate()
        .map(|(i, v)| (v - mu) / (var + eps).sqrt() * gamma[i] + beta[i])
        .collect()
}

fn mat(w: &Tensor) -> (usize, usize, Vec<f64>) {
    let s = w.shape();
    (s[0], s[1], w.to_vec_f64())
}

fn softmax(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Single-head attention over the first `cp` channels, then the full-width
/// output projection.
pub fn shsa(x: &A, s: &Shsa) -> A {
    let (t, cp, dq) = (x.tokens(), s.cp, s.d_qk);
    let g = s.norm.gamma.to_vec_f64();
    let b = s.norm.beta.to_vec_f64();
    let (_, _, wq) = mat(&s.wq.weight);
    let (_, _, wk) = mat(&s.wk.weight);
    let (_, _, wv) = mat(&s.wv.weight);
    let (_, _, wo) = mat(&s.wo.weight);
    let mut y = A::zeros(x.n, x.c, x.h, x.w);
    for n in 0..x.n {
        // xn[p][i]: normalized attended channels per token.
        let xn: Vec<Vec<f64>> = (0..t)
            .map(|p| {
                let vals: Vec<f64> = (0..cp).map(|i| x.d[x.idx(n, i, p)]).collect();
                ln_token(&vals, &g, &b, s.norm.eps)
            })
            .collect();
        let proj = |w: &[f64], rows: usize, p: usize| -> Vec<f64> {
            (0..rows).map(|r| (0..cp).map(|i| w[r * cp + i] * xn[p][i]).sum()).collect()
        };
        let q: Vec<Vec<f64>> = (0..t).map(|p| proj(&wq, dq, p)).collect();
        let k: Vec<Vec<f64>> = (0..t).map(|p| proj(&wk, dq, p)).collect();
        let v: Vec<Vec<f64>> = (0..t).map(|p| proj(&wv, cp, p)).collect();
        let mut mixed = vec![vec![0.0; x.c]; t];
        for p in 0..t {
            let mut row: Vec<f64> = (0..t)
                .map(|u| (0..dq).map(|d| q[p][d] * k[u][d]).sum::<f64>() / (dq as f64).sqrt())
                .collect();
            softmax(&mut row);
            for c in 0..cp {
                mixed[p][c] = (0..t).map(|u| row[u] * v[u][c]).sum();
            }
            for c in cp..x.c {
                mixed[p][c] = x.d[x.idx(n, c, p)];
            }
        }
        for p in 0..t {
            for o in 0..x.c {
                let i = y.idx(n, o, p);
                y.d[i] = (0..x.c).map(|c| wo[o * x.c + c] * mixed[p][c]).sum();
            }
        }
    }
    y
}

/// Multi-head attention; head `h` output is scaled by `mask[h]` before the
/// output projection.
pub fn mhsa(x: &A, m: &Mhsa, mask: &[f64]) -> A {
    let (t, c, nh, dh, dv) = (x.tokens(), x.c, m.heads, m.d_head, m.d_v);
    let g = m.norm.gamma.to_vec_f64();
    let b = m.norm.beta.to_vec_f64();
    let (_, _, wq) = mat(&m.wq.weight);
    let (_, _, wk) = mat(&m.wk.weight);
    let (_, _, wv) = mat(&m.wv.weight);
    let (_, _, wo) = mat(&m.wo.weight);
    let mut y = A::zeros(x.n, c, x.h, x.w);
    for n in 0..x.n {
        let xn: Vec<Vec<f64>> = (0..t)
            .map(|p| {
                let vals: Vec<f64> = (0..c).map(|i| x.d[x.idx(n, i, p)]).collect();
                ln_token(&vals, &g, &b, m.norm.eps)
            })
            .collect();
        let proj = |w: &[f64], r: usize, p: usize| -> f64 { (0..c).map(|i| w[r * c + i] * xn[p][i]).sum() };
        let mut concat = vec![vec![0.0; nh * dv]; t];
        for h in 0..nh {
            for p in 0..t {
                let mut row: Vec<f64> = (0..t)
                    .map(|u| {
                        (0..dh)
                            .map(|d| proj(&wq, h * dh + d, p) * proj(&wk, h * dh + d, u))
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                softmax(&mut row);
                for e in 0..dv {
                    let o: f64 = (0..t).map(|u| row[u] * proj(&wv, h * dv + e, u)).sum();
                    concat[p][h * dv + e] = mask[h] * o;
                }
            }
        }
        for p in 0..t {
            for o in 0..c {
                let i = y.idx(n, o, p);
                y.d[i] = (0..nh * dv).map(|j| wo[o * nh * dv + j] * concat[p][j]).sum();
            }
        }
    }
    y
}

pub fn ffn(x: &A, f: &Ffn) -> A {
    conv_bn(&relu(conv_bn(x, &f.expand)), &f.project)
}

pub fn block(x: &A, b: &Block) -> A {
    let x = add(x, &conv_bn(x, &b.dw));
    let x = match &b.mixer {
        Mixer::None => x,
        Mixer::Shsa(s) => add(&x, &shsa(&x, s)),
        Mixer::Mhsa(m) => add(&x, &mhsa(&x, m, m.mask())),
    };
    add(&x, &ffn(&x, &b.ffn))
}

pub fn downsample(x: &A, d: &Downsample) -> A {
    let x = block(x, &d.pre);
    let h = relu(conv_bn(&x, &d.ir.expand));
    let h = relu(conv_bn(&h, &d.ir.dw));
    block(&conv_bn(&h, &d.ir.project), &d.post)
}

pub fn bn_linear(x: &[Vec<f64>], l: &BnLinear) -> Vec<Vec<f64>> {
    let (out, inp, w) = mat(&l.fc.weight);
    let bias = l.fc.bias.as_ref().map(|b| b.to_vec_f64());
    x.iter()
        .map(|row| {
            let row: Vec<f64> = match &l.bn {
                Some(bn) => {
                    let (s, t) = bn_coeffs(bn);
                    row.iter().enumerate().map(|(c, v)| v * s[c] + t[c]).collect()
                }
                None => row.clone(),
            };
            (0..out)
                .map(|o| (0..inp).map(|i| w[o * inp + i] * row[i]).sum::<f64>() + bias.as_ref().map_or(0.0, |b| b[o]))
                .collect()
        })
        .collect()
}

/// Eval-mode logits, one row per sample.
pub fn model(x: &Tensor, m: &Model) -> Vec<Vec<f64>> {
    let mut a = A::from(x);
    for cb in &m.stem {
        a = relu(conv_bn(&a, cb));
    }
    for st in &m.stages {
        if let Some(d) = &st.downsample {
            a = downsample(&a, d);
        }
        for b in &st.blocks {
            a = block(&a, b);
        }
    }
    let t = a.tokens() as f64;
    let pooled: Vec<Vec<f64>> = (0..a.n)
        .map(|n| (0..a.c).map(|c| (0..a.tokens()).map(|p| a.d[a.idx(n, c, p)]).sum::<f64>() / t).collect())
        .collect();
    bn_linear(&pooled, &m.head)
}

/// Moves norm affine parameters and BN running statistics away from their
/// identity initialization so that oracles exercise every term.
pub fn jitter_affine<M: Module>(m: &mut M, rng: &mut Rng) {
    m.visit_mut("", &mut |name, t, slot| {
        let n = t.numel();
        let shape = t.shape().to_vec();
        let v: Vec<f64> = if name.ends_with("running_var") {
            (0..n).map(|_| 0.5 + rng.uniform()).collect()
        } else if name.ends_with("running_mean") || name.ends_with("bn.bias") || (slot == Slot::Param && name.ends_with("norm.bias")) {
            (0..n).map(|_| 0.1 * rng.normal()).collect()
        } else if name.ends_with("bn.weight") || name.ends_with("norm.weight") {
            (0..n).map(|_| 1.0 + 0.2 * rng.normal()).collect()
        } else {
            return;
        };
        *t = Tensor::from_f64_vec(v, &shape).unwrap().to_dtype(t.dtype());
    });
}
