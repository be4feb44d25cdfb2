//! Slice-level kernels shared by the tape's forward and backward rules.

use super::Scalar;

/// Matrix operand layout: logical `rows × cols`, optionally stored transposed.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatLayout {
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl MatLayout {
    pub fn plain(rows: usize, cols: usize) -> Self {
        Self { rows, cols, transposed: false }
    }

    pub fn t(rows: usize, cols: usize) -> Self {
        Self { rows, cols, transposed: true }
    }

    fn strides(self) -> (isize, isize) {
        if self.transposed {
            // stored as cols × rows
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c[i] (+)= a[i] · b[i]` for `batch` matrix pairs. A batch stride of 0
/// broadcasts that operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_matmul<T: Scalar>(
    batch: usize,
    a: &[T],
    a_layout: MatLayout,
    a_stride: usize,
    b: &[T],
    b_layout: MatLayout,
    b_stride: usize,
    c: &mut [T],
    accumulate: bool,
) {
    let (m, k, n) = (a_layout.rows, a_layout.cols, b_layout.cols);
    debug_assert_eq!(k, b_layout.rows);
    let (rsa, csa) = a_layout.strides();
    let (rsb, csb) = b_layout.strides();
    let beta = if accumulate { T::one() } else { T::zero() };
    for i in 0..batch {
        let a_i = &a[i * a_stride..i * a_stride + m * k];
        let b_i = &b[i * b_stride..i * b_stride + k * n];
        let c_i = &mut c[i * m * n..(i + 1) * m * n];
        if k == 0 {
            if !accumulate {
                c_i.iter_mut().for_each(|v| *v = T::zero());
            }
            continue;
        }
        T::gemm(m, k, n, T::one(), a_i, rsa, csa, b_i, rsb, csb, beta, c_i, n as isize, 1);
    }
}

/// Gather index realizing an axis permutation of a row-major array of `shape`:
/// `out[j] = in[index[j]]`.
pub(crate) fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let len: usize = shape.iter().product();
    let mut index = Vec::with_capacity(len);
    let mut counter = vec![0usize; rank];
    for _ in 0..len {
        index.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    index
}

/// For each output element of a broadcast binary op, the flat index into an
/// operand of `shape` (same rank as `out_shape`, extents equal or 1).
pub(crate) fn broadcast_index(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    let len: usize = out_shape.iter().product();
    let mut index = Vec::with_capacity(len);
    let mut counter = vec![0usize; rank];
    for _ in 0..len {
        index.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    index
}

/// Offsets of the 3×3 neighborhood, row-major.
pub(crate) const NEIGHBOR_OFFSETS: [(isize, isize); 9] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Grid position of neighbor `slot` around `(y, x)` on a `p × q` grid, if in bounds.
pub(crate) fn neighbor(y: usize, x: usize, slot: usize, p: usize, q: usize) -> Option<(usize, usize)> {
    let (dy, dx) = NEIGHBOR_OFFSETS[slot];
    let ny = y as isize + dy;
    let nx = x as isize + dx;
    (ny >= 0 && nx >= 0 && (ny as usize) < p && (nx as usize) < q).then_some((ny as usize, nx as usize))
}

/// `[b, c, p, q] → [b, c·9, p·q]`, zero padding 1.
pub(crate) fn unfold3x3<T: Scalar>(x: &[T], b: usize, c: usize, p: usize, q: usize) -> Vec<T> {
    let l = p * q;
    let mut out = vec![T::zero(); b * c * 9 * l];
    for bi in 0..b {
        for ch in 0..c {
            let src = &x[(bi * c + ch) * l..(bi * c + ch + 1) * l];
            for slot in 0..9 {
                let row = &mut out[((bi * c + ch) * 9 + slot) * l..((bi * c + ch) * 9 + slot + 1) * l];
                for y in 0..p {
                    for xx in 0..q {
                        if let Some((ny, nx)) = neighbor(y, xx, slot, p, q) {
                            row[y * q + xx] = src[ny * q + nx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`unfold3x3`]: `[b, c·9, p·q] → [b, c, p, q]`, summing overlaps.
pub(crate) fn fold3x3<T: Scalar>(cols: &[T], b: usize, c: usize, p: usize, q: usize) -> Vec<T> {
    let l = p * q;
    let mut out = vec![T::zero(); b * c * l];
    for bi in 0..b {
        for ch in 0..c {
            let dst = &mut out[(bi * c + ch) * l..(bi * c + ch + 1) * l];
            for slot in 0..9 {
                let row = &cols[((bi * c + ch) * 9 + slot) * l..((bi * c + ch) * 9 + slot + 1) * l];
                for y in 0..p {
                    for xx in 0..q {
                        if let Some((ny, nx)) = neighbor(y, xx, slot, p, q) {
                            dst[ny * q + nx] += row[y * q + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Convolution geometry for one `[cin, h, w]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if stride == 0 || padded < k {
            return None;
        }
        Some((padded - k) / stride + 1)
    }
}

/// im2col for channels `[c0, c0 + cn)`: rows `(ch, ky, kx)`, columns `(oy, ox)`.
pub(crate) fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, c0: usize, cn: usize, col: &mut [T]) {
    let ohw = g.oh * g.ow;
    for ci in 0..cn {
        let plane = &img[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[((ci * g.kh + ky) * g.kw + kx) * ohw..][..ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy as usize >= g.h {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix as usize >= g.w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into `img`.
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, c0: usize, cn: usize, img: &mut [T]) {
    let ohw = g.oh * g.ow;
    for ci in 0..cn {
        let plane = &mut img[(c0 + ci) * g.h * g.w..(c0 + ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[((ci * g.kh + ky) * g.kw + kx) * ohw..][..ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_index_transposes_matrix() {
        // [[0,1,2],[3,4,5]]ᵀ
        assert_eq!(permute_index(&[2, 3], &[1, 0]), vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn broadcast_index_repeats_size_one_axes() {
        assert_eq!(broadcast_index(&[1, 3], &[2, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_index(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn gemm_handles_transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]; aᵀ·b = [[26,30],[38,44]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        batched_matmul(1, &a, MatLayout::t(2, 2), 0, &b, MatLayout::plain(2, 2), 0, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }
}
