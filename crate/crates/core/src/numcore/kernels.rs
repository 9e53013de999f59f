//! Raw dense kernels on flat row-major buffers.

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ * b[k,n]`
pub fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]ᵀ`
pub fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Unfolds one sample into `[c*kh*kw, oh*ow]` columns.
    fn im2col(&self, sample: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let l = oh * ow;
        for c in 0..self.in_ch {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            dst[oy * ow + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.height
                                && (ix as usize) < self.width
                            {
                                sample[(c * self.height + iy as usize) * self.width + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_acc(&self, cols: &[f64], sample: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let l = oh * ow;
        for c in 0..self.in_ch {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= self.height {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix < 0 || ix as usize >= self.width {
                                continue;
                            }
                            sample[(c * self.height + iy as usize) * self.width + ix as usize] +=
                                src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &[f64], weight: &[f64]) -> Vec<f64> {
        let (k, l) = (self.patch_len(), self.positions());
        let in_len = self.in_ch * self.height * self.width;
        let mut out = vec![0.0; self.batch * self.out_ch * l];
        let mut cols = vec![0.0; k * l];
        for b in 0..self.batch {
            self.im2col(&input[b * in_len..(b + 1) * in_len], &mut cols);
            gemm_acc(
                weight,
                &cols,
                &mut out[b * self.out_ch * l..(b + 1) * self.out_ch * l],
                self.out_ch,
                k,
                l,
            );
        }
        out
    }

    /// Returns `(d_input, d_weight)` for upstream gradient `d_out`.
    pub fn backward(&self, input: &[f64], weight: &[f64], d_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (k, l) = (self.patch_len(), self.positions());
        let in_len = self.in_ch * self.height * self.width;
        let mut d_input = vec![0.0; input.len()];
        let mut d_weight = vec![0.0; weight.len()];
        let mut cols = vec![0.0; k * l];
        let mut d_cols = vec![0.0; k * l];
        for b in 0..self.batch {
            let dy = &d_out[b * self.out_ch * l..(b + 1) * self.out_ch * l];
            self.im2col(&input[b * in_len..(b + 1) * in_len], &mut cols);
            gemm_nt_acc(dy, &cols, &mut d_weight, self.out_ch, l, k);
            d_cols.iter_mut().for_each(|v| *v = 0.0);
            gemm_tn_acc(weight, dy, &mut d_cols, k, self.out_ch, l);
            self.col2im_acc(&d_cols, &mut d_input[b * in_len..(b + 1) * in_len]);
        }
        (d_input, d_weight)
    }
}
