//! Dense kernels behind the graph ops. All loops are single-threaded and
//! visit elements in a fixed order, so results are bit-reproducible.

/// `c = a · b + beta · c` for an `m x k` by `k x n` product. `a_t` / `b_t`
/// mean the operand is stored transposed (`k x m` / `n x k`, row-major).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `[ci, h, w]` item into `[ci*k*k, h*w]` patches with zero
/// "same" padding.
pub(crate) fn im2col(x: &[f32], ci: usize, h: usize, w: usize, k: usize, cols: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..ci {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(0.0);
                    out[x_hi..].fill(0.0);
                    let s0 = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto `dx`.
pub(crate) fn col2im(cols: &[f32], ci: usize, h: usize, w: usize, k: usize, dx: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..ci {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                let x_lo = (-dxo).max(0) as usize;
                let x_hi = (w as isize - dxo).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x_lo as isize + dxo) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..x_hi - x_lo];
                    for (d, g) in dst.iter_mut().zip(&row[y * w + x_lo..y * w + x_hi]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// Geometry of a stride-1 "same" convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvShape {
    fn patch(&self) -> usize {
        self.ci * self.k * self.k
    }
}

pub(crate) fn conv_forward(s: ConvShape, x: &[f32], weight: &[f32], bias: &[f32], y: &mut [f32]) {
    let hw = s.h * s.w;
    let mut cols = if s.k == 1 { Vec::new() } else { vec![0.0; s.patch() * hw] };
    for n in 0..s.n {
        let xn = &x[n * s.ci * hw..(n + 1) * s.ci * hw];
        let yn = &mut y[n * s.co * hw..(n + 1) * s.co * hw];
        let b: &[f32] = if s.k == 1 {
            xn
        } else {
            im2col(xn, s.ci, s.h, s.w, s.k, &mut cols);
            &cols
        };
        gemm(s.co, s.patch(), hw, weight, false, b, false, yn, 0.0);
        for (co, row) in yn.chunks_exact_mut(hw).enumerate() {
            let bv = bias[co];
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// Accumulates weight and bias gradients; writes the input gradient when
/// `dx` is given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    s: ConvShape,
    x: &[f32],
    weight: &[f32],
    dy: &[f32],
    dweight: &mut [f32],
    dbias: &mut [f32],
    mut dx: Option<&mut [f32]>,
) {
    let hw = s.h * s.w;
    let mut cols = if s.k == 1 { Vec::new() } else { vec![0.0; s.patch() * hw] };
    let mut dcols = if s.k == 1 || dx.is_none() {
        Vec::new()
    } else {
        vec![0.0; s.patch() * hw]
    };
    for n in 0..s.n {
        let xn = &x[n * s.ci * hw..(n + 1) * s.ci * hw];
        let dyn_ = &dy[n * s.co * hw..(n + 1) * s.co * hw];
        let b: &[f32] = if s.k == 1 {
            xn
        } else {
            im2col(xn, s.ci, s.h, s.w, s.k, &mut cols);
            &cols
        };
        gemm(s.co, hw, s.patch(), dyn_, false, b, true, dweight, 1.0);
        for (co, row) in dyn_.chunks_exact(hw).enumerate() {
            dbias[co] += row.iter().sum::<f32>();
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * s.ci * hw..(n + 1) * s.ci * hw];
            if s.k == 1 {
                gemm(s.ci, s.co, hw, weight, true, dyn_, false, dxn, 1.0);
            } else {
                gemm(s.patch(), s.co, hw, weight, true, dyn_, false, &mut dcols, 0.0);
                col2im(&dcols, s.ci, s.h, s.w, s.k, dxn);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64, n: usize) -> Vec<f32> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 40) as f32 / (1u64 << 24) as f32) - 0.5
            })
            .collect()
    }

    fn naive_conv(s: ConvShape, x: &[f32], w: &[f32], b: &[f32]) -> Vec<f32> {
        let pad = (s.k / 2) as isize;
        let mut y = vec![0.0f32; s.n * s.co * s.h * s.w];
        for n in 0..s.n {
            for co in 0..s.co {
                for r in 0..s.h {
                    for c in 0..s.w {
                        let mut acc = b[co] as f64;
                        for ci in 0..s.ci {
                            for ky in 0..s.k {
                                for kx in 0..s.k {
                                    let sr = r as isize + ky as isize - pad;
                                    let sc = c as isize + kx as isize - pad;
                                    if sr < 0 || sc < 0 || sr >= s.h as isize || sc >= s.w as isize {
                                        continue;
                                    }
                                    let xv = x[((n * s.ci + ci) * s.h + sr as usize) * s.w + sc as usize];
                                    let wv = w[((co * s.ci + ci) * s.k + ky) * s.k + kx];
                                    acc += (xv * wv) as f64;
                                }
                            }
                        }
                        y[((n * s.co + co) * s.h + r) * s.w + c] = acc as f32;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive() {
        for k in [1, 3] {
            let s = ConvShape { n: 2, ci: 3, co: 4, h: 5, w: 6, k };
            let x = lcg(1, s.n * s.ci * s.h * s.w);
            let w = lcg(2, s.co * s.ci * k * k);
            let b = lcg(3, s.co);
            let mut y = vec![0.0; s.n * s.co * s.h * s.w];
            conv_forward(s, &x, &w, &b, &mut y);
            for (a, e) in y.iter().zip(naive_conv(s, &x, &w, &b)) {
                assert!((a - e).abs() < 1e-5);
            }
        }
    }

    /// <dy, conv(x)> is linear in x and w, so the backward pass must satisfy
    /// the adjoint identities against the forward pass.
    #[test]
    fn conv_backward_is_adjoint() {
        for k in [1, 3] {
            let s = ConvShape { n: 2, ci: 3, co: 2, h: 4, w: 5, k };
            let x = lcg(4, s.n * s.ci * s.h * s.w);
            let w = lcg(5, s.co * s.ci * k * k);
            let zero_b = vec![0.0; s.co];
            let dy = lcg(6, s.n * s.co * s.h * s.w);
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; s.co];
            let mut dx = vec![0.0; x.len()];
            conv_backward(s, &x, &w, &dy, &mut dw, &mut db, Some(&mut dx));
            let mut y = vec![0.0; dy.len()];
            conv_forward(s, &x, &w, &zero_b, &mut y);
            let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| (a * b) as f64).sum();
            let via_x: f64 = x.iter().zip(&dx).map(|(a, b)| (a * b) as f64).sum();
            let via_w: f64 = w.iter().zip(&dw).map(|(a, b)| (a * b) as f64).sum();
            assert!((lhs - via_x).abs() < 1e-4, "{lhs} vs {via_x}");
            assert!((lhs - via_w).abs() < 1e-4, "{lhs} vs {via_w}");
            let dy_sum: Vec<f32> = (0..s.co)
                .map(|co| {
                    (0..s.n)
                        .map(|n| dy[(n * s.co + co) * s.h * s.w..][..s.h * s.w].iter().sum::<f32>())
                        .sum()
                })
                .collect();
            for (a, b) in db.iter().zip(dy_sum) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }
}
