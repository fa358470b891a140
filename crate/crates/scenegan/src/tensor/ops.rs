//! Value-level kernels shared by graph forward and backward passes:
//! broadcast elementwise arithmetic, reductions, softmax, concat/slice/pad
//! and bilinear crop-resize.

use super::{broadcast_shape, broadcast_strides, strides_of, Scalar, Tensor};
use crate::error::TensorError;

/// Elementwise binary op with right-aligned broadcasting.
pub(crate) fn binary_broadcast<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    op: &'static str,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>, TensorError> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor::from_vec(a.shape(), data));
    }
    let out_shape = broadcast_shape(a.shape(), b.shape(), op)?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut data = Vec::with_capacity(numel);
    let mut coords = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..numel {
        data.push(f(a.data()[ia], b.data()[ib]));
        // odometer increment
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    Ok(Tensor::from_vec(&out_shape, data))
}

/// Expands `t` to `shape` (broadcast semantics, copy). Works axis by axis so
/// replication happens in contiguous block copies.
pub(crate) fn broadcast_to<F: Scalar>(
    t: &Tensor<F>,
    shape: &[usize],
) -> Result<Tensor<F>, TensorError> {
    let check = broadcast_shape(t.shape(), shape, "broadcast")?;
    if check != shape {
        return Err(TensorError::Dimension {
            op: "broadcast",
            msg: format!("{:?} does not broadcast to {:?}", t.shape(), shape),
        });
    }
    let st = broadcast_strides(t.shape(), shape);
    let numel: usize = shape.iter().product();
    let rank = shape.len();
    let mut out = vec![F::zero(); numel];
    fill_broadcast(t.data(), 0, &st, shape, 0, &mut out);
    let _ = rank;
    Ok(Tensor::from_vec(shape, out))
}

fn fill_broadcast<F: Scalar>(
    src: &[F],
    src_off: usize,
    st: &[usize],
    shape: &[usize],
    dim: usize,
    out: &mut [F],
) {
    if dim == shape.len() {
        out[0] = src[src_off];
        return;
    }
    let inner: usize = shape[dim + 1..].iter().product();
    if dim + 1 == shape.len() {
        if st[dim] == 0 {
            out.fill(src[src_off]);
        } else if st[dim] == 1 {
            out.copy_from_slice(&src[src_off..src_off + shape[dim]]);
        } else {
            for (i, o) in out.iter_mut().enumerate() {
                *o = src[src_off + i * st[dim]];
            }
        }
        return;
    }
    if st[dim] == 0 {
        // compute the first block, replicate it
        fill_broadcast(src, src_off, st, shape, dim + 1, &mut out[..inner]);
        let (first, rest) = out.split_at_mut(inner);
        for chunk in rest.chunks_exact_mut(inner) {
            chunk.copy_from_slice(first);
        }
    } else {
        for i in 0..shape[dim] {
            fill_broadcast(
                src,
                src_off + i * st[dim],
                st,
                shape,
                dim + 1,
                &mut out[i * inner..(i + 1) * inner],
            );
        }
    }
}

/// Sums `grad` down to `shape` (adjoint of broadcasting).
pub(crate) fn reduce_to_shape<F: Scalar>(grad: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let st = broadcast_strides(shape, grad.shape());
    let rank = grad.shape().len();
    let numel_out: usize = shape.iter().product();
    let mut out = vec![F::zero(); numel_out];
    let mut coords = vec![0usize; rank];
    let mut idx = 0usize;
    for &g in grad.data() {
        out[idx] += g;
        for d in (0..rank).rev() {
            coords[d] += 1;
            idx += st[d];
            if coords[d] < grad.shape()[d] {
                break;
            }
            coords[d] = 0;
            idx -= st[d] * grad.shape()[d];
        }
    }
    Tensor::from_vec(shape, out)
}

/// Shape left after reducing `axes` (no kept dims); empty becomes `[1]`.
pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    if out.is_empty() {
        vec![1]
    } else {
        out
    }
}

/// Sum over the given axes.
pub(crate) fn sum_axes<F: Scalar>(t: &Tensor<F>, axes: &[usize]) -> Tensor<F> {
    let out_shape = reduced_shape(t.shape(), axes);
    let rank = t.rank();
    let out_strides = {
        // stride of each input axis in the output (0 when reduced)
        let kept: Vec<usize> = (0..rank).filter(|i| !axes.contains(i)).collect();
        let os = strides_of(&out_shape);
        let mut m = vec![0usize; rank];
        if !kept.is_empty() {
            for (oi, &ax) in kept.iter().enumerate() {
                m[ax] = os[oi];
            }
        }
        m
    };
    let mut out = vec![F::zero(); out_shape.iter().product()];
    let mut coords = vec![0usize; rank];
    let mut oi = 0usize;
    for &v in t.data() {
        out[oi] += v;
        for d in (0..rank).rev() {
            coords[d] += 1;
            oi += out_strides[d];
            if coords[d] < t.shape()[d] {
                break;
            }
            coords[d] = 0;
            oi -= out_strides[d] * t.shape()[d];
        }
    }
    Tensor::from_vec(&out_shape, out)
}

/// Scatters a reduced-gradient back over the input shape (adjoint of sum).
pub(crate) fn expand_from_reduced<F: Scalar>(
    grad: &Tensor<F>,
    input_shape: &[usize],
    axes: &[usize],
) -> Tensor<F> {
    let rank = input_shape.len();
    let kept: Vec<usize> = (0..rank).filter(|i| !axes.contains(i)).collect();
    let gs = strides_of(grad.shape());
    let mut in_strides = vec![0usize; rank];
    for (oi, &ax) in kept.iter().enumerate() {
        in_strides[ax] = gs[oi];
    }
    let numel: usize = input_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut coords = vec![0usize; rank];
    let mut gi = 0usize;
    for _ in 0..numel {
        out.push(grad.data()[gi]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            gi += in_strides[d];
            if coords[d] < input_shape[d] {
                break;
            }
            coords[d] = 0;
            gi -= in_strides[d] * input_shape[d];
        }
    }
    Tensor::from_vec(input_shape, out)
}

/// Softmax along `axis`.
pub(crate) fn softmax<F: Scalar>(t: &Tensor<F>, axis: usize) -> Tensor<F> {
    let shape = t.shape();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![F::zero(); t.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mx = F::neg_infinity();
            for j in 0..n {
                mx = mx.max(t.data()[base + j * inner]);
            }
            let mut z = F::zero();
            for j in 0..n {
                let e = (t.data()[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                z += e;
            }
            for j in 0..n {
                out[base + j * inner] /= z;
            }
        }
    }
    Tensor::from_vec(shape, out)
}

/// dx for softmax: y * (g - sum(g*y, axis)).
pub(crate) fn softmax_backward<F: Scalar>(y: &Tensor<F>, g: &Tensor<F>, axis: usize) -> Tensor<F> {
    let shape = y.shape();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![F::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = F::zero();
            for j in 0..n {
                dot += g.data()[base + j * inner] * y.data()[base + j * inner];
            }
            for j in 0..n {
                let idx = base + j * inner;
                out[idx] = y.data()[idx] * (g.data()[idx] - dot);
            }
        }
    }
    Tensor::from_vec(shape, out)
}

/// Concatenation along `axis`.
pub(crate) fn concat<F: Scalar>(parts: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>, TensorError> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Contract { op: "concat", msg: "no inputs".into() })?;
    let rank = first.rank();
    if axis >= rank {
        return Err(TensorError::Dimension { op: "concat", msg: format!("axis {axis} out of rank {rank}") });
    }
    let mut axis_total = 0usize;
    for p in parts {
        if p.rank() != rank {
            return Err(TensorError::Dimension { op: "concat", msg: "rank mismatch".into() });
        }
        for d in 0..rank {
            if d != axis && p.shape()[d] != first.shape()[d] {
                return Err(TensorError::Dimension {
                    op: "concat",
                    msg: format!("shape {:?} vs {:?} on axis {d}", p.shape(), first.shape()),
                });
            }
        }
        axis_total += p.shape()[axis];
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = axis_total;
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut data = vec![F::zero(); out_shape.iter().product()];
    let row = axis_total * inner;
    let mut offset = 0usize;
    for p in parts {
        let pa = p.shape()[axis];
        for o in 0..outer {
            let src = &p.data()[o * pa * inner..(o + 1) * pa * inner];
            let dst = &mut data[o * row + offset..o * row + offset + pa * inner];
            dst.copy_from_slice(src);
        }
        offset += pa * inner;
    }
    Ok(Tensor::from_vec(&out_shape, data))
}

/// Copies the region `[start, start+len)` per axis.
pub(crate) fn slice_region<F: Scalar>(
    t: &Tensor<F>,
    ranges: &[(usize, usize)],
) -> Result<Tensor<F>, TensorError> {
    let rank = t.rank();
    if ranges.len() != rank {
        return Err(TensorError::Dimension {
            op: "slice",
            msg: format!("{} ranges for rank {rank}", ranges.len()),
        });
    }
    for (d, &(s, l)) in ranges.iter().enumerate() {
        if l == 0 || s + l > t.shape()[d] {
            return Err(TensorError::Dimension {
                op: "slice",
                msg: format!("range ({s},{l}) out of axis {d} size {}", t.shape()[d]),
            });
        }
    }
    let out_shape: Vec<usize> = ranges.iter().map(|&(_, l)| l).collect();
    let st = t.strides();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    // iterate output coords; innermost axis copied as a contiguous run
    let inner_len = out_shape[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut coords = vec![0usize; rank - 1];
    for _ in 0..outer.max(1) {
        let mut base = ranges[rank - 1].0;
        for d in 0..rank - 1 {
            base += (ranges[d].0 + coords[d]) * st[d];
        }
        data.extend_from_slice(&t.data()[base..base + inner_len]);
        for d in (0..rank.saturating_sub(1)).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    Ok(Tensor::from_vec(&out_shape, data))
}

/// Adds `patch` into `acc` at the region described by `ranges` (adjoint of slice).
pub(crate) fn scatter_add_region<F: Scalar>(
    acc: &mut Tensor<F>,
    patch: &Tensor<F>,
    ranges: &[(usize, usize)],
) {
    let rank = acc.rank();
    let st = acc.strides();
    let out_shape: Vec<usize> = ranges.iter().map(|&(_, l)| l).collect();
    let inner_len = out_shape[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut coords = vec![0usize; rank - 1];
    let mut src = 0usize;
    for _ in 0..outer.max(1) {
        let mut base = ranges[rank - 1].0;
        for d in 0..rank - 1 {
            base += (ranges[d].0 + coords[d]) * st[d];
        }
        for k in 0..inner_len {
            acc.data_mut()[base + k] += patch.data()[src + k];
        }
        src += inner_len;
        for d in (0..rank.saturating_sub(1)).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
}

/// Zero-pads each axis by (lo, hi).
pub(crate) fn pad<F: Scalar>(t: &Tensor<F>, pads: &[(usize, usize)]) -> Result<Tensor<F>, TensorError> {
    if pads.len() != t.rank() {
        return Err(TensorError::Dimension {
            op: "pad",
            msg: format!("{} pad pairs for rank {}", pads.len(), t.rank()),
        });
    }
    let out_shape: Vec<usize> = t
        .shape()
        .iter()
        .zip(pads.iter())
        .map(|(&d, &(lo, hi))| d + lo + hi)
        .collect();
    let mut out = Tensor::zeros(&out_shape);
    let ranges: Vec<(usize, usize)> = t
        .shape()
        .iter()
        .zip(pads.iter())
        .map(|(&d, &(lo, _))| (lo, d))
        .collect();
    scatter_add_region(&mut out, t, &ranges);
    Ok(out)
}

/// Axis permutation: output axis `i` takes input axis `perm[i]`.
pub(crate) fn permute<F: Scalar>(t: &Tensor<F>, perm: &[usize]) -> Result<Tensor<F>, TensorError> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(TensorError::Dimension {
            op: "permute",
            msg: format!("invalid permutation {perm:?} for rank {rank}"),
        });
    }
    let in_strides = strides_of(t.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let read_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = t.numel();
    let mut data = Vec::with_capacity(numel);
    let mut coords = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..numel {
        data.push(t.data()[idx]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            idx += read_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            idx -= read_strides[d] * out_shape[d];
        }
    }
    Ok(Tensor::from_vec(&out_shape, data))
}

/// Inverse of a permutation.
pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Bilinear resample of a pixel-space box from a `[..., C, H, W]` tensor into
/// `[C, oh, ow]`. `lead` pins the leading axes (for example batch and frame).
pub(crate) fn crop_resize<F: Scalar>(
    src: &Tensor<F>,
    lead: &[usize],
    bbox: [f64; 4],
    oh: usize,
    ow: usize,
) -> Result<Tensor<F>, TensorError> {
    let rank = src.rank();
    if lead.len() + 3 != rank {
        return Err(TensorError::Dimension {
            op: "crop_resize",
            msg: format!("{} lead indices for rank {rank}", lead.len()),
        });
    }
    let c = src.shape()[rank - 3];
    let h = src.shape()[rank - 2];
    let w = src.shape()[rank - 1];
    let st = src.strides();
    let mut base = 0usize;
    for (d, &i) in lead.iter().enumerate() {
        if i >= src.shape()[d] {
            return Err(TensorError::Dimension {
                op: "crop_resize",
                msg: format!("lead index {i} out of axis {d} size {}", src.shape()[d]),
            });
        }
        base += i * st[d];
    }
    let [bx, by, bw, bh] = bbox;
    if bw <= 0.0 || bh <= 0.0 {
        return Err(TensorError::Contract {
            op: "crop_resize",
            msg: format!("degenerate bbox {bbox:?}"),
        });
    }
    let y_taps = axis_taps(by, bh, oh, h);
    let x_taps = axis_taps(bx, bw, ow, w);
    let mut out = vec![F::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &src.data()[base + ch * h * w..base + (ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (i, &(y0, y1, fy)) in y_taps.iter().enumerate() {
            let row0 = &plane[y0 * w..y0 * w + w];
            let row1 = &plane[y1 * w..y1 * w + w];
            for (j, &(x0, x1, fx)) in x_taps.iter().enumerate() {
                let top = row0[x0].as_f64() * (1.0 - fx) + row0[x1].as_f64() * fx;
                let bot = row1[x0].as_f64() * (1.0 - fx) + row1[x1].as_f64() * fx;
                dst[i * ow + j] = F::from_f64(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::from_vec(&[c, oh, ow], out))
}

/// Interpolation taps along one axis: (low index, high index, fraction).
fn axis_taps(origin: f64, extent: f64, out_len: usize, src_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|i| {
            let s = (origin + (i as f64 + 0.5) * extent / out_len as f64 - 0.5)
                .clamp(0.0, (src_len - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Adjoint of [`crop_resize`]: scatters `grad [C, oh, ow]` into `acc`.
pub(crate) fn crop_resize_backward<F: Scalar>(
    acc: &mut Tensor<F>,
    grad: &Tensor<F>,
    lead: &[usize],
    bbox: [f64; 4],
    oh: usize,
    ow: usize,
) {
    let rank = acc.rank();
    let c = acc.shape()[rank - 3];
    let h = acc.shape()[rank - 2];
    let w = acc.shape()[rank - 1];
    let st = acc.strides();
    let mut base = 0usize;
    for (d, &i) in lead.iter().enumerate() {
        base += i * st[d];
    }
    let [bx, by, bw, bh] = bbox;
    let y_taps = axis_taps(by, bh, oh, h);
    let x_taps = axis_taps(bx, bw, ow, w);
    for ch in 0..c {
        let plane = base + ch * h * w;
        let gsrc = &grad.data()[ch * oh * ow..(ch + 1) * oh * ow];
        for (i, &(y0, y1, fy)) in y_taps.iter().enumerate() {
            for (j, &(x0, x1, fx)) in x_taps.iter().enumerate() {
                let g = gsrc[i * ow + j].as_f64();
                for (iy, ix, wgt) in [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ] {
                    let slot = &mut acc.data_mut()[plane + iy * w + ix];
                    *slot = F::from_f64(slot.as_f64() + g * wgt);
                }
            }
        }
    }
}
