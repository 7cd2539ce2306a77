//! Shape and broadcast index arithmetic for row-major tensors.

use crate::error::{Error, Result};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::dim(format!(
                "shapes {a:?} and {b:?} are not broadcastable"
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Left-pad a shape with 1s to `ndim` dimensions.
pub fn pad_shape(shape: &[usize], ndim: usize) -> Vec<usize> {
    let mut padded = vec![1usize; ndim];
    padded[ndim - shape.len()..].copy_from_slice(shape);
    padded
}

/// Row-major strides, with stride 0 on broadcast (extent-1) axes relative to `out_shape`.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let padded = pad_shape(shape, out_shape.len());
    let mut strides = vec![0usize; out_shape.len()];
    let mut acc = 1usize;
    for d in (0..padded.len()).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    strides
}

/// Iterate flat output indices of `out_shape` together with the flat source
/// index under broadcasting. Calls `f(out_idx, src_idx)`.
pub fn for_each_broadcast(out_shape: &[usize], src_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(out_shape);
    let strides = broadcast_strides(src_shape, out_shape);
    let ndim = out_shape.len();
    let mut coords = vec![0usize; ndim];
    let mut src = 0usize;
    for out_idx in 0..total {
        f(out_idx, src);
        // advance odometer
        for d in (0..ndim).rev() {
            coords[d] += 1;
            src += strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            coords[d] = 0;
        }
    }
}

pub fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

/// Shape with `axis` removed; scalars collapse to `[1]`.
pub fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

/// Decompose a shape around `axis` into (outer, axis_len, inner) extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_trailing() {
        assert_eq!(broadcast_shapes(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shapes(&[4, 1, 3], &[2, 1]).unwrap(), vec![4, 2, 3]);
        assert!(broadcast_shapes(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn broadcast_iteration_matches_naive() {
        let out_shape = [2usize, 3, 2];
        let src_shape = [3usize, 1];
        let mut pairs = Vec::new();
        for_each_broadcast(&out_shape, &src_shape, |o, s| pairs.push((o, s)));
        assert_eq!(pairs.len(), 12);
        // src index depends only on the middle coordinate
        for (o, s) in pairs {
            let mid = (o / 2) % 3;
            assert_eq!(s, mid);
        }
    }

    #[test]
    fn axis_helpers() {
        assert_eq!(reduced_shape(&[4, 5, 6], 1), vec![4, 6]);
        assert_eq!(reduced_shape(&[3], 0), vec![1]);
        assert_eq!(axis_split(&[4, 5, 6], 1), (4, 5, 6));
    }
}
