//! Plain slice kernels shared by the tape operations and by code that needs
//! the same arithmetic without recording (flow inverses, scoring).

use crate::scalar::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * bv;
            }
        }
    }
}

/// `out[m×n] += aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == T::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_pi * bv;
            }
        }
    }
}

/// `out[m×n] += a · bᵀ` where `a` is `m×k` and `b` is stored `n×k`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = out[i * n + j] + dot(a_row, b_row);
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let aa = &a[c * LANES..(c + 1) * LANES];
        let bb = &b[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] = acc[l] + aa[l] * bb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * LANES..a.len() {
        tail = tail + a[i] * b[i];
    }
    let mut total = T::zero();
    for v in acc {
        total = total + v;
    }
    total + tail
}

/// Unfold one `(c, h, w)` image into `(c·k·k, h·w)` columns for a
/// stride-1 convolution with `k/2` zero padding.
pub fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * k * k * hw);
    for ci in 0..c {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, img: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ci * hw + sy as usize * w;
                    for x in 0..w {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            img[base + sx as usize] = img[base + sx as usize] + src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a same-padded stride-1 convolution over a batch.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvShape {
    fn cols_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel * self.height * self.width
    }
}

/// Forward convolution: `input (n,ci,h,w)`, `weight (co,ci,k,k)` → `(n,co,h,w)`.
pub fn conv2d_forward<T: Scalar>(input: &[T], weight: &[T], s: ConvShape) -> Vec<T> {
    let hw = s.height * s.width;
    let ckk = s.in_ch * s.kernel * s.kernel;
    let mut out = vec![T::zero(); s.batch * s.out_ch * hw];
    let mut cols = vec![T::zero(); if s.kernel == 1 { 0 } else { s.cols_len() }];
    for b in 0..s.batch {
        let img = &input[b * s.in_ch * hw..(b + 1) * s.in_ch * hw];
        let dst = &mut out[b * s.out_ch * hw..(b + 1) * s.out_ch * hw];
        if s.kernel == 1 {
            matmul_nn(weight, img, dst, s.out_ch, ckk, hw);
        } else {
            im2col(img, s.in_ch, s.height, s.width, s.kernel, &mut cols);
            matmul_nn(weight, &cols, dst, s.out_ch, ckk, hw);
        }
    }
    out
}

/// Gradients of a convolution with respect to its input and weight.
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    s: ConvShape,
    want_input: bool,
    want_weight: bool,
) -> (Vec<T>, Vec<T>) {
    let hw = s.height * s.width;
    let ckk = s.in_ch * s.kernel * s.kernel;
    let mut grad_in = vec![T::zero(); if want_input { input.len() } else { 0 }];
    let mut grad_w = vec![T::zero(); if want_weight { weight.len() } else { 0 }];
    let mut cols = vec![T::zero(); if s.kernel == 1 { 0 } else { s.cols_len() }];
    let mut grad_cols = vec![
        T::zero();
        if s.kernel == 1 || !want_input {
            0
        } else {
            s.cols_len()
        }
    ];
    for b in 0..s.batch {
        let img = &input[b * s.in_ch * hw..(b + 1) * s.in_ch * hw];
        let g = &grad_out[b * s.out_ch * hw..(b + 1) * s.out_ch * hw];
        if want_weight {
            if s.kernel == 1 {
                matmul_nt(g, img, &mut grad_w, s.out_ch, hw, ckk);
            } else {
                im2col(img, s.in_ch, s.height, s.width, s.kernel, &mut cols);
                matmul_nt(g, &cols, &mut grad_w, s.out_ch, hw, ckk);
            }
        }
        if want_input {
            let gi = &mut grad_in[b * s.in_ch * hw..(b + 1) * s.in_ch * hw];
            if s.kernel == 1 {
                matmul_tn(weight, g, gi, ckk, s.out_ch, hw);
            } else {
                grad_cols.iter_mut().for_each(|v| *v = T::zero());
                matmul_tn(weight, g, &mut grad_cols, ckk, s.out_ch, hw);
                col2im(&grad_cols, s.in_ch, s.height, s.width, s.kernel, gi);
            }
        }
    }
    (grad_in, grad_w)
}

/// Space-to-depth on 2×2 neighbourhoods: `(n,c,h,w)` → `(n,4c,h/2,w/2)`.
///
/// Output channel `4·ci + 2·dy + dx` at `(i, j)` holds input `(ci, 2i+dy, 2j+dx)`.
pub fn squeeze2x2<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let oc = 4 * ci + 2 * (y % 2) + (xx % 2);
                    let dst = ((b * 4 * c + oc) * h2 + y / 2) * w2 + xx / 2;
                    out[dst] = x[((b * c + ci) * h + y) * w + xx];
                }
            }
        }
    }
    out
}

/// Inverse of [`squeeze2x2`]; `(c, h, w)` describe the unsqueezed layout.
pub fn unsqueeze2x2<T: Scalar>(z: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![T::zero(); z.len()];
    for b in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let oc = 4 * ci + 2 * (y % 2) + (xx % 2);
                    let src = ((b * 4 * c + oc) * h2 + y / 2) * w2 + xx / 2;
                    out[((b * c + ci) * h + y) * w + xx] = z[src];
                }
            }
        }
    }
    out
}
