//! Numeric kernels behind the tape operations.

use crate::tensor::{matmul_into, MatView, Scalar};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Option<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || w[2] != w[3] || stride == 0 {
            return None;
        }
        let k = w[2];
        if x[2] + 2 * pad < k || x[3] + 2 * pad < k {
            return None;
        }
        Some(ConvGeom {
            batch: x[0],
            c_in: x[1],
            h: x[2],
            w: x[3],
            c_out: w[0],
            k,
            stride,
            pad,
            h_out: (x[2] + 2 * pad - k) / stride + 1,
            w_out: (x[3] + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    fn in_plane(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.c_out * self.positions()
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * p;
                let dst = &mut col[row..row + p];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, o) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *o = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * p;
                let src = &col[row..row + p];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_plane()];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * g.positions()]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.in_plane()..(b + 1) * g.in_plane()];
        let ob = &mut out[b * g.out_plane()..(b + 1) * g.out_plane()];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        matmul_into(
            w,
            MatView::new(g.c_out, g.patch()),
            src,
            MatView::new(g.patch(), g.positions()),
            ob,
            T::one(),
            T::zero(),
        );
    }
    out
}

/// Returns `(dx, dw)`; `dx` is only computed when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let pointwise = g.is_pointwise();
    let mut col = vec![T::zero(); if pointwise { 0 } else { g.patch() * g.positions() }];
    let mut dcol = vec![
        T::zero();
        if pointwise || !need_dx {
            0
        } else {
            g.patch() * g.positions()
        }
    ];
    for b in 0..g.batch {
        let xb = &x[b * g.in_plane()..(b + 1) * g.in_plane()];
        let dyb = &dy[b * g.out_plane()..(b + 1) * g.out_plane()];
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if pointwise {
                xb
            } else {
                im2col(g, xb, &mut col);
                &col
            };
            // dw += dy_b · colᵀ
            matmul_into(
                dyb,
                MatView::new(g.c_out, g.positions()),
                src,
                MatView::new(g.patch(), g.positions()).t(),
                dw,
                T::one(),
                T::one(),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * g.in_plane()..(b + 1) * g.in_plane()];
            if pointwise {
                matmul_into(
                    w,
                    MatView::new(g.c_out, g.patch()).t(),
                    dyb,
                    MatView::new(g.c_out, g.positions()),
                    dxb,
                    T::one(),
                    T::zero(),
                );
            } else {
                matmul_into(
                    w,
                    MatView::new(g.c_out, g.patch()).t(),
                    dyb,
                    MatView::new(g.c_out, g.positions()),
                    &mut dcol,
                    T::one(),
                    T::zero(),
                );
                col2im(g, &dcol, dxb);
            }
        }
    }
    (dx, dw)
}

/// Per-channel statistics over the (batch, spatial) axes of a `[B, C, S]`
/// buffer. Returns `(mean, biased variance)`.
pub(crate) fn channel_stats<T: Scalar>(x: &[T], batch: usize, channels: usize, spatial: usize) -> (Vec<T>, Vec<T>) {
    let count = T::cast_from((batch * spatial) as f64);
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    for c in 0..channels {
        let mut s = T::zero();
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            for &v in &x[base..base + spatial] {
                s += v;
            }
        }
        let m = s / count;
        let mut q = T::zero();
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            for &v in &x[base..base + spatial] {
                let d = v - m;
                q += d * d;
            }
        }
        mean[c] = m;
        var[c] = q / count;
    }
    (mean, var)
}
