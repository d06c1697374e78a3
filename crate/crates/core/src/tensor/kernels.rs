// Raw numeric kernels over flat row-major buffers.
//
// Row-parallel kernels never split a reduction across threads, so results are
// bitwise identical regardless of the thread count.

use rayon::prelude::*;

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

/// `a[m,k] · b[k,n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 {
        return out;
    }
    let row = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `aᵀ · b` with `a[m,k]`, `b[m,n]` → `[k,n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul(&transpose(a, m, k), b, k, m, n)
}

/// `a · bᵀ` with `a[m,n]`, `b[k,n]` → `[m,k]`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    matmul(a, &transpose(b, k, n), m, n, k)
}

/// Geometry of a stride-1 "same" convolution over NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn pad_top(&self) -> usize {
        (self.kh - 1) / 2
    }

    fn pad_left(&self) -> usize {
        (self.kw - 1) / 2
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }

    pub fn positions(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// Unfolds input patches into rows: `[n·h·w, kh·kw·c]`, zero outside the image.
pub(crate) fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.positions() * patch];
    let (pt, pl) = (g.pad_top() as isize, g.pad_left() as isize);
    cols.par_chunks_mut(patch * g.w)
        .enumerate()
        .for_each(|(nh, chunk)| {
            let (b, i) = (nh / g.h, nh % g.h);
            for j in 0..g.w {
                let row = &mut chunk[j * patch..(j + 1) * patch];
                for di in 0..g.kh {
                    let ii = i as isize + di as isize - pt;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for dj in 0..g.kw {
                        let jj = j as isize + dj as isize - pl;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + ii as usize) * g.w + jj as usize) * g.c;
                        let dst = (di * g.kw + dj) * g.c;
                        row[dst..dst + g.c].copy_from_slice(&x[src..src + g.c]);
                    }
                }
            }
        });
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub(crate) fn col2im(cols: &[f64], g: ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut x = vec![0.0; g.n * g.h * g.w * g.c];
    let (pt, pl) = (g.pad_top() as isize, g.pad_left() as isize);
    // parallel over images; each image's scatter stays on one thread
    x.par_chunks_mut(g.h * g.w * g.c)
        .enumerate()
        .for_each(|(b, img)| {
            for i in 0..g.h {
                for j in 0..g.w {
                    let row = &cols[((b * g.h + i) * g.w + j) * patch..][..patch];
                    for di in 0..g.kh {
                        let ii = i as isize + di as isize - pt;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        for dj in 0..g.kw {
                            let jj = j as isize + dj as isize - pl;
                            if jj < 0 || jj >= g.w as isize {
                                continue;
                            }
                            let dst = (ii as usize * g.w + jj as usize) * g.c;
                            let src = (di * g.kw + dj) * g.c;
                            for ch in 0..g.c {
                                img[dst + ch] += row[src + ch];
                            }
                        }
                    }
                }
            }
        });
    x
}

/// 2×2 average pooling, stride 2, over NHWC input with even extents.
pub(crate) fn avg_pool2(x: &[f64], n: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * oh * ow * c];
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let o = ((b * oh + i) * ow + j) * c;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((b * h + 2 * i + di) * w + 2 * j + dj) * c;
                    for ch in 0..c {
                        out[o + ch] += 0.25 * x[s + ch];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(g: &[f64], n: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; n * h * w * c];
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let o = ((b * oh + i) * ow + j) * c;
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((b * h + 2 * i + di) * w + 2 * j + dj) * c;
                    for ch in 0..c {
                        dx[s + ch] += 0.25 * g[o + ch];
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] · [[5],[6]]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0], 2, 2, 1);
        assert_eq!(c, vec![17.0, 39.0]);
    }

    #[test]
    fn transposed_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..8).map(|v| v as f64 * 0.5).collect(); // 2x4
        let tn = matmul_tn(&a, &b, 2, 3, 4);
        let direct = matmul(&transpose(&a, 2, 3), &b, 3, 2, 4);
        assert_eq!(tn, direct);
        let c: Vec<f64> = (0..12).map(|v| v as f64).collect(); // 4x3
        let nt = matmul_nt(&a, &c, 2, 3, 4);
        assert_eq!(nt, matmul(&a, &transpose(&c, 4, 3), 2, 3, 4));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { n: 2, h: 4, w: 5, c: 2, kh: 3, kw: 2 };
        let x: Vec<f64> = (0..g.n * g.h * g.w * g.c).map(|v| (v as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.positions() * g.patch()).map(|v| (v as f64 * 0.11).cos()).collect();
        let lhs: f64 = im2col(&x, g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pooling_averages_quads() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(avg_pool2(&x, 1, 2, 2, 1), vec![2.5]);
        assert_eq!(avg_pool2_backward(&[1.0], 1, 2, 2, 1), vec![0.25; 4]);
    }
}
