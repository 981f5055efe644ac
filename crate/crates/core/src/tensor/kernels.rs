//! Dense row-major kernels used by the graph ops.

/// `c[m×k] += a[m×n] · b[n×k]`
pub(crate) fn gemm(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let c_row = &mut c[i * k..(i + 1) * k];
        for p in 0..n {
            let a_ip = a[i * n + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * k..(p + 1) * k];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c[n×k] += a[m×n]ᵀ · b[m×k]`
pub(crate) fn gemm_tn(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let b_row = &b[i * k..(i + 1) * k];
        for p in 0..n {
            let a_ip = a[i * n + p];
            if a_ip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * k..(p + 1) * k];
            for (c_pj, &b_ij) in c_row.iter_mut().zip(b_row) {
                *c_pj += a_ip * b_ij;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `C×H×W` image into a `(C·kh·kw) × (H'·W')` column matrix.
pub(crate) fn im2col(g: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let positions = g.positions();
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        dst[oi * g.out_w + oj] = if ii >= 0
                            && jj >= 0
                            && (ii as usize) < g.height
                            && (jj as usize) < g.width
                        {
                            image[(c * g.height + ii as usize) * g.width + jj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let positions = g.positions();
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii as usize >= g.height {
                        continue;
                    }
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj < 0 || jj as usize >= g.width {
                            continue;
                        }
                        image[(c * g.height + ii as usize) * g.width + jj as usize] +=
                            src[oi * g.out_w + oj];
                    }
                }
            }
        }
    }
}
