//! Convolution kernels: direct and transposed, 2-D and 3-D.
//!
//! Both ranks share one 3-D implementation (2-D runs with a unit depth axis).
//! Forward lowers to im2col + gemm; the transposed convolution is the exact
//! adjoint map, realized with the same column buffers, which is also what the
//! backward passes use. Samples of a batch are processed in parallel.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{Scalar, Tensor};
use crate::error::TensorError;
use rayon::prelude::*;

/// Geometry of one convolution: all spatial axes share stride and padding.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_dims: [usize; 3],
    pub k_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Geometry for a direct convolution over `in_dims`.
    fn forward(in_dims: [usize; 3], k_dims: [usize; 3], stride: usize, pad: usize) -> Result<Self, TensorError> {
        let mut out_dims = [0usize; 3];
        for i in 0..3 {
            let padded = in_dims[i] + 2 * pad_for_axis(k_dims[i], pad);
            if padded < k_dims[i] {
                return Err(TensorError::Dimension {
                    op: "conv",
                    msg: format!("input {in_dims:?} smaller than kernel {k_dims:?}"),
                });
            }
            out_dims[i] = (padded - k_dims[i]) / stride_for_axis(k_dims[i], stride) + 1;
        }
        Ok(ConvGeom { in_dims, k_dims, out_dims, stride, pad })
    }

    /// Geometry whose *output* is `out_dims`, i.e. the transposed direction.
    fn transposed(in_dims: [usize; 3], k_dims: [usize; 3], stride: usize, pad: usize) -> Result<Self, TensorError> {
        let mut out_dims = [0usize; 3];
        for i in 0..3 {
            let s = stride_for_axis(k_dims[i], stride);
            let p = pad_for_axis(k_dims[i], pad);
            let o = (in_dims[i] - 1) * s + k_dims[i];
            if o < 2 * p {
                return Err(TensorError::Dimension {
                    op: "conv_transpose",
                    msg: format!("degenerate output for input {in_dims:?}"),
                });
            }
            out_dims[i] = o - 2 * p;
        }
        // Stored with the roles of conv input/output: in_dims is the large side.
        Ok(ConvGeom { in_dims: out_dims, k_dims, out_dims: in_dims, stride, pad })
    }

    fn out_numel(&self) -> usize {
        self.out_dims.iter().product()
    }
    fn in_numel(&self) -> usize {
        self.in_dims.iter().product()
    }
    fn k_numel(&self) -> usize {
        self.k_dims.iter().product()
    }
}

// Unit axes (depth of a 2-D conv) always use stride 1 / pad 0 so that the
// shared 3-D kernel leaves them untouched.
fn stride_for_axis(k: usize, stride: usize) -> usize {
    if k == 1 { 1 } else { stride }
}
fn pad_for_axis(k: usize, pad: usize) -> usize {
    if k == 1 { 0 } else { pad }
}

/// Gathers conv patches of one sample into `cols[C*kvol, out_numel]`.
fn im2col<F: Scalar>(x: &[F], channels: usize, g: &ConvGeom, cols: &mut [F]) {
    let [d, h, w] = g.in_dims;
    let [kd, kh, kw] = g.k_dims;
    let [od, oh, ow] = g.out_dims;
    let (sd, sh, sw) = (stride_for_axis(kd, g.stride), stride_for_axis(kh, g.stride), stride_for_axis(kw, g.stride));
    let (pd, ph, pw) = (pad_for_axis(kd, g.pad), pad_for_axis(kh, g.pad), pad_for_axis(kw, g.pad));
    let out_n = od * oh * ow;
    let mut row = 0usize;
    for c in 0..channels {
        let x_c = &x[c * d * h * w..(c + 1) * d * h * w];
        for zk in 0..kd {
            for yk in 0..kh {
                for xk in 0..kw {
                    let dst = &mut cols[row * out_n..(row + 1) * out_n];
                    row += 1;
                    let mut p = 0usize;
                    for oz in 0..od {
                        let iz = (oz * sd + zk) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            dst[p..p + oh * ow].iter_mut().for_each(|v| *v = F::zero());
                            p += oh * ow;
                            continue;
                        }
                        let base_z = iz as usize * h * w;
                        for oy in 0..oh {
                            let iy = (oy * sh + yk) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                dst[p..p + ow].iter_mut().for_each(|v| *v = F::zero());
                                p += ow;
                                continue;
                            }
                            let base = base_z + iy as usize * w;
                            for ox in 0..ow {
                                let ix = (ox * sw + xk) as isize - pw as isize;
                                dst[p] = if ix < 0 || ix >= w as isize {
                                    F::zero()
                                } else {
                                    x_c[base + ix as usize]
                                };
                                p += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto one sample.
fn col2im<F: Scalar>(cols: &[F], channels: usize, g: &ConvGeom, x: &mut [F]) {
    let [d, h, w] = g.in_dims;
    let [kd, kh, kw] = g.k_dims;
    let [od, oh, ow] = g.out_dims;
    let (sd, sh, sw) = (stride_for_axis(kd, g.stride), stride_for_axis(kh, g.stride), stride_for_axis(kw, g.stride));
    let (pd, ph, pw) = (pad_for_axis(kd, g.pad), pad_for_axis(kh, g.pad), pad_for_axis(kw, g.pad));
    let out_n = od * oh * ow;
    let mut row = 0usize;
    for c in 0..channels {
        let x_c = &mut x[c * d * h * w..(c + 1) * d * h * w];
        for zk in 0..kd {
            for yk in 0..kh {
                for xk in 0..kw {
                    let src = &cols[row * out_n..(row + 1) * out_n];
                    row += 1;
                    let mut p = 0usize;
                    for oz in 0..od {
                        let iz = (oz * sd + zk) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            p += oh * ow;
                            continue;
                        }
                        let base_z = iz as usize * h * w;
                        for oy in 0..oh {
                            let iy = (oy * sh + yk) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                p += ow;
                                continue;
                            }
                            let base = base_z + iy as usize * w;
                            for ox in 0..ow {
                                let ix = (ox * sw + xk) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    x_c[base + ix as usize] += src[p];
                                }
                                p += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn spatial_dims(shape: &[usize], op: &'static str) -> Result<[usize; 3], TensorError> {
    match shape.len() {
        4 => Ok([1, shape[2], shape[3]]),
        5 => Ok([shape[2], shape[3], shape[4]]),
        _ => Err(TensorError::Dimension {
            op,
            msg: format!("expected rank 4 or 5 input, got {shape:?}"),
        }),
    }
}

fn kernel_dims(shape: &[usize]) -> [usize; 3] {
    match shape.len() {
        4 => [1, shape[2], shape[3]],
        _ => [shape[2], shape[3], shape[4]],
    }
}

fn out_shape(batch: usize, ch: usize, dims: [usize; 3], rank: usize) -> Vec<usize> {
    if rank == 4 {
        vec![batch, ch, dims[1], dims[2]]
    } else {
        vec![batch, ch, dims[0], dims[1], dims[2]]
    }
}

/// Direct convolution. `x` is `[N, Ci, (D,) H, W]`, `w` is `[Co, Ci, (kd,) kh, kw]`.
pub(crate) fn conv_forward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>, TensorError> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != ws.len() {
        return Err(TensorError::Dimension {
            op: "conv",
            msg: format!("input rank {xs:?} vs kernel rank {ws:?}"),
        });
    }
    let (n, ci) = (xs[0], xs[1]);
    let (co, ci_w) = (ws[0], ws[1]);
    if ci != ci_w {
        return Err(TensorError::Dimension {
            op: "conv",
            msg: format!("input channels {ci} != kernel channels {ci_w}"),
        });
    }
    let g = ConvGeom::forward(spatial_dims(xs, "conv")?, kernel_dims(ws), stride, pad)?;
    let out_n = g.out_numel();
    let k_rows = ci * g.k_numel();
    let in_n = g.in_numel();

    let mut y = vec![F::zero(); n * co * out_n];
    y.par_chunks_mut(co * out_n)
        .zip(x.data().par_chunks(ci * in_n))
        .for_each(|(y_s, x_s)| {
            let mut cols = vec![F::zero(); k_rows * out_n];
            im2col(x_s, ci, &g, &mut cols);
            gemm_nn(w.data(), &cols, y_s, co, k_rows, out_n);
            if let Some(bias) = b {
                for (c, y_c) in y_s.chunks_mut(out_n).enumerate() {
                    let bv = bias.data()[c];
                    y_c.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    Ok(Tensor::from_vec(&out_shape(n, co, g.out_dims, xs.len()), y))
}

/// Gradients of [`conv_forward`] w.r.t. input, kernel and bias.
pub(crate) fn conv_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<(Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>), TensorError> {
    let xs = x.shape();
    let ws = w.shape();
    let (n, ci) = (xs[0], xs[1]);
    let co = ws[0];
    let g = ConvGeom::forward(spatial_dims(xs, "conv")?, kernel_dims(ws), stride, pad)?;
    let out_n = g.out_numel();
    let k_rows = ci * g.k_numel();
    let in_n = g.in_numel();

    let per_sample: Vec<(Option<Vec<F>>, Option<Vec<F>>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let x_s = &x.data()[s * ci * in_n..(s + 1) * ci * in_n];
            let dy_s = &dy.data()[s * co * out_n..(s + 1) * co * out_n];
            let dw_s = if need_dw {
                let mut cols = vec![F::zero(); k_rows * out_n];
                im2col(x_s, ci, &g, &mut cols);
                let mut dw = vec![F::zero(); co * k_rows];
                gemm_nt(dy_s, &cols, &mut dw, co, out_n, k_rows);
                Some(dw)
            } else {
                None
            };
            let dx_s = if need_dx {
                let mut dcols = vec![F::zero(); k_rows * out_n];
                gemm_tn(w.data(), dy_s, &mut dcols, k_rows, co, out_n);
                let mut dx = vec![F::zero(); ci * in_n];
                col2im(&dcols, ci, &g, &mut dx);
                Some(dx)
            } else {
                None
            };
            (dx_s, dw_s)
        })
        .collect();

    let dx = if need_dx {
        let mut dx = vec![F::zero(); n * ci * in_n];
        for (s, (dx_s, _)) in per_sample.iter().enumerate() {
            dx[s * ci * in_n..(s + 1) * ci * in_n].copy_from_slice(dx_s.as_ref().unwrap());
        }
        Some(Tensor::from_vec(xs, dx))
    } else {
        None
    };
    let dw = if need_dw {
        let mut dw = vec![F::zero(); co * k_rows];
        for (_, dw_s) in &per_sample {
            for (a, b) in dw.iter_mut().zip(dw_s.as_ref().unwrap().iter()) {
                *a += *b;
            }
        }
        Some(Tensor::from_vec(ws, dw))
    } else {
        None
    };
    let db = if need_db {
        let mut db = vec![F::zero(); co];
        for s in 0..n {
            let dy_s = &dy.data()[s * co * out_n..(s + 1) * co * out_n];
            for (c, dv) in db.iter_mut().enumerate() {
                *dv += dy_s[c * out_n..(c + 1) * out_n].iter().copied().sum();
            }
        }
        Some(Tensor::from_vec(&[co], db))
    } else {
        None
    };
    Ok((dx, dw, db))
}

/// Transposed convolution (adjoint of [`conv_forward`] in its spatial map).
/// `x` is `[N, Ci, (D,) H, W]`, `w` is `[Ci, Co, (kd,) kh, kw]`.
pub(crate) fn conv_transpose_forward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>, TensorError> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != ws.len() {
        return Err(TensorError::Dimension {
            op: "conv_transpose",
            msg: format!("input rank {xs:?} vs kernel rank {ws:?}"),
        });
    }
    let (n, ci) = (xs[0], xs[1]);
    let (ci_w, co) = (ws[0], ws[1]);
    if ci != ci_w {
        return Err(TensorError::Dimension {
            op: "conv_transpose",
            msg: format!("input channels {ci} != kernel channels {ci_w}"),
        });
    }
    // Geometry in conv terms: the transposed output plays the conv input role.
    let g = ConvGeom::transposed(spatial_dims(xs, "conv_transpose")?, kernel_dims(ws), stride, pad)?;
    let big_n = g.in_numel();
    let small_n = g.out_numel();
    let k_rows = co * g.k_numel();

    let mut y = vec![F::zero(); n * co * big_n];
    y.par_chunks_mut(co * big_n)
        .zip(x.data().par_chunks(ci * small_n))
        .for_each(|(y_s, x_s)| {
            // cols[co*kvol, small_n] = W^T[co*kvol, ci] . x[ci, small_n]
            let mut cols = vec![F::zero(); k_rows * small_n];
            gemm_tn(w.data(), x_s, &mut cols, k_rows, ci, small_n);
            col2im(&cols, co, &g, y_s);
            if let Some(bias) = b {
                for (c, y_c) in y_s.chunks_mut(big_n).enumerate() {
                    let bv = bias.data()[c];
                    y_c.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    Ok(Tensor::from_vec(&out_shape(n, co, g.in_dims, xs.len()), y))
}

/// Gradients of [`conv_transpose_forward`].
pub(crate) fn conv_transpose_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<(Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>), TensorError> {
    let xs = x.shape();
    let ws = w.shape();
    let (n, ci) = (xs[0], xs[1]);
    let co = ws[1];
    let g = ConvGeom::transposed(spatial_dims(xs, "conv_transpose")?, kernel_dims(ws), stride, pad)?;
    let big_n = g.in_numel();
    let small_n = g.out_numel();
    let k_rows = co * g.k_numel();

    let per_sample: Vec<(Option<Vec<F>>, Option<Vec<F>>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let x_s = &x.data()[s * ci * small_n..(s + 1) * ci * small_n];
            let dy_s = &dy.data()[s * co * big_n..(s + 1) * co * big_n];
            let mut cols = vec![F::zero(); k_rows * small_n];
            im2col(dy_s, co, &g, &mut cols);
            let dx_s = if need_dx {
                // dx[ci, small_n] = Wflat[ci, co*kvol] . cols
                let mut dx = vec![F::zero(); ci * small_n];
                gemm_nn(w.data(), &cols, &mut dx, ci, k_rows, small_n);
                Some(dx)
            } else {
                None
            };
            let dw_s = if need_dw {
                // dW[ci, co*kvol] = x[ci, small_n] . cols^T
                let mut dw = vec![F::zero(); ci * k_rows];
                gemm_nt(x_s, &cols, &mut dw, ci, small_n, k_rows);
                Some(dw)
            } else {
                None
            };
            (dx_s, dw_s)
        })
        .collect();

    let dx = if need_dx {
        let mut dx = vec![F::zero(); n * ci * small_n];
        for (s, (dx_s, _)) in per_sample.iter().enumerate() {
            dx[s * ci * small_n..(s + 1) * ci * small_n].copy_from_slice(dx_s.as_ref().unwrap());
        }
        Some(Tensor::from_vec(xs, dx))
    } else {
        None
    };
    let dw = if need_dw {
        let mut dw = vec![F::zero(); ci * k_rows];
        for (_, dw_s) in &per_sample {
            for (a, b) in dw.iter_mut().zip(dw_s.as_ref().unwrap().iter()) {
                *a += *b;
            }
        }
        Some(Tensor::from_vec(ws, dw))
    } else {
        None
    };
    let db = if need_db {
        let mut db = vec![F::zero(); co];
        for s in 0..n {
            let dy_s = &dy.data()[s * co * big_n..(s + 1) * co * big_n];
            for (c, dv) in db.iter_mut().enumerate() {
                *dv += dy_s[c * big_n..(c + 1) * big_n].iter().copied().sum();
            }
        }
        Some(Tensor::from_vec(&[co], db))
    } else {
        None
    };
    Ok((dx, dw, db))
}
