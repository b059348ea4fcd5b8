//! Specialized kernel for the temporal-convolution weight gradient.
//!
//! The first layer of the decoder convolves every (sample, channel) row with
//! a bank of short 1-d filters; its weight gradient contracts over tens of
//! thousands of positions per filter tap, a shape the generic GEMM route
//! packs poorly. This kernel keeps both streams sequential and is runtime
//! dispatched: AVX2+FMA where the CPU has it, portable fallback otherwise.
//! (`f64` always takes the generic route; only training runs in `f32` at
//! sizes where this matters.)
//!
//! Layout contract, for a conv with `Cin = 1`, `kH = 1`, unit stride:
//! `x` is `[N, H, W]` row-major, `dy` is `[N, Cout, H, OW]` row-major with
//! `OW = W - kW + 1`, and the kernel accumulates
//! `dw[co*kw + j] += sum over n, hh, t of dy[n,co,hh,t] * x[n,hh,t+j]`.

pub(crate) fn grad_weights_f32(
    n_samples: usize,
    h: usize,
    w_in: usize,
    ow: usize,
    n_co: usize,
    kw: usize,
    x: &[f32],
    dy: &[f32],
    dw: &mut [f32],
) {
    debug_assert_eq!(ow, w_in - kw + 1);
    debug_assert_eq!(x.len(), n_samples * h * w_in);
    debug_assert_eq!(dy.len(), n_samples * n_co * h * ow);
    debug_assert_eq!(dw.len(), n_co * kw);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
        {
            unsafe { avx2::grad_weights(n_samples, h, w_in, ow, n_co, kw, x, dy, dw) };
            return;
        }
    }
    grad_weights_portable(n_samples, h, w_in, ow, n_co, kw, x, dy, dw);
}

#[allow(clippy::too_many_arguments)]
fn grad_weights_portable(
    n_samples: usize,
    h: usize,
    w_in: usize,
    ow: usize,
    n_co: usize,
    kw: usize,
    x: &[f32],
    dy: &[f32],
    dw: &mut [f32],
) {
    for n in 0..n_samples {
        for co in 0..n_co {
            for hh in 0..h {
                let xr = &x[(n * h + hh) * w_in..(n * h + hh + 1) * w_in];
                let base = ((n * n_co + co) * h + hh) * ow;
                let dyr = &dy[base..base + ow];
                for j in 0..kw {
                    let xs = &xr[j..j + ow];
                    let mut acc = 0f32;
                    for (&g, &v) in dyr.iter().zip(xs) {
                        acc += g * v;
                    }
                    dw[co * kw + j] += acc;
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx2", enable = "fma")]
    unsafe fn hsum(v: __m256) -> f32 {
        let hi = _mm256_extractf128_ps(v, 1);
        let lo = _mm256_castps256_ps128(v);
        let s = _mm_add_ps(hi, lo);
        let s = _mm_hadd_ps(s, s);
        let s = _mm_hadd_ps(s, s);
        _mm_cvtss_f32(s)
    }

    /// Register-blocked over pairs of output filters and four taps at a
    /// time: each loaded vector feeds several FMAs, which is what keeps the
    /// loop ahead of the load ports.
    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn grad_weights(
        n_samples: usize,
        h: usize,
        w_in: usize,
        ow: usize,
        n_co: usize,
        kw: usize,
        x: &[f32],
        dy: &[f32],
        dw: &mut [f32],
    ) {
        for n in 0..n_samples {
            let mut co = 0;
            while co < n_co {
                let co_block = (n_co - co).min(2);
                for hh in 0..h {
                    let xr = x.as_ptr().add((n * h + hh) * w_in);
                    let dy0 = dy.as_ptr().add(((n * n_co + co) * h + hh) * ow);
                    let dy1 = if co_block == 2 {
                        dy.as_ptr().add(((n * n_co + co + 1) * h + hh) * ow)
                    } else {
                        dy0
                    };
                    let mut j = 0;
                    while j < kw {
                        let j_block = (kw - j).min(4);
                        let mut acc = [[_mm256_setzero_ps(); 4]; 2];
                        let mut t = 0;
                        while t + 8 <= ow {
                            let g0 = _mm256_loadu_ps(dy0.add(t));
                            let g1 = _mm256_loadu_ps(dy1.add(t));
                            for dj in 0..j_block {
                                let xv = _mm256_loadu_ps(xr.add(t + j + dj));
                                acc[0][dj] = _mm256_fmadd_ps(g0, xv, acc[0][dj]);
                                if co_block == 2 {
                                    acc[1][dj] = _mm256_fmadd_ps(g1, xv, acc[1][dj]);
                                }
                            }
                            t += 8;
                        }
                        for dj in 0..j_block {
                            let mut t0 = hsum(acc[0][dj]);
                            let mut t1 = hsum(acc[1][dj]);
                            let mut tt = t;
                            while tt < ow {
                                let xv = *xr.add(tt + j + dj);
                                t0 += *dy0.add(tt) * xv;
                                if co_block == 2 {
                                    t1 += *dy1.add(tt) * xv;
                                }
                                tt += 1;
                            }
                            dw[co * kw + j + dj] += t0;
                            if co_block == 2 {
                                dw[(co + 1) * kw + j + dj] += t1;
                            }
                        }
                        j += j_block;
                    }
                }
                co += co_block;
            }
        }
    }
}
