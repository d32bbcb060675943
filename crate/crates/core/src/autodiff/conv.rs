//! Direct 3D convolution kernels.
//!
//! Layouts: input `[N, Ci, D, H, W]`, weight `[Co, Ci, K, K, K]`, output
//! `[N, Co, Do, Ho, Wo]` with `Do = (D + 2·pad − K) / stride + 1`. Each
//! parallel task owns a disjoint output slice and accumulates in a fixed
//! order, so results do not depend on thread scheduling.

use rayon::prelude::*;

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn output_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        (padded >= k).then(|| (padded - k) / stride + 1)
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    /// Output indices `o` along one axis whose tap `kk` lands inside the
    /// input, and the input index of the first of them.
    #[inline]
    fn valid(&self, axis: usize, kk: usize) -> (usize, usize) {
        let (s, p, len, olen) = (self.stride, self.pad, self.input[axis], self.output[axis]);
        // i = o*s + kk - p must lie in [0, len)
        let lo = if kk >= p { 0 } else { (p - kk).div_ceil(s) };
        let hi = if len + p > kk { ((len + p - kk - 1) / s + 1).min(olen) } else { 0 };
        (lo, hi.max(lo))
    }

    #[inline]
    fn tap(&self, o: usize, kk: usize) -> usize {
        o * self.stride + kk - self.pad
    }
}

pub fn forward<T: Real>(x: &[T], w: &[T], g: &ConvGeometry) -> Vec<T> {
    let (in_len, out_len, k3) = (g.in_len(), g.out_len(), g.k * g.k * g.k);
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let mut out = vec![T::zero(); g.n * g.co * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(idx, o)| {
        let (n, co) = (idx / g.co, idx % g.co);
        for ci in 0..g.ci {
            let xs = &x[(n * g.ci + ci) * in_len..][..in_len];
            let ws = &w[(co * g.ci + ci) * k3..][..k3];
            for kz in 0..g.k {
                let (z0, z1) = g.valid(0, kz);
                for ky in 0..g.k {
                    let (y0, y1) = g.valid(1, ky);
                    for kx in 0..g.k {
                        let (x0, x1) = g.valid(2, kx);
                        let wv = ws[(kz * g.k + ky) * g.k + kx];
                        for od in z0..z1 {
                            let iz = g.tap(od, kz);
                            for oy in y0..y1 {
                                let iy = g.tap(oy, ky);
                                let orow = (od * oh + oy) * ow;
                                let irow = (iz * ih + iy) * iw;
                                for ox in x0..x1 {
                                    o[orow + ox] = o[orow + ox] + wv * xs[irow + g.tap(ox, kx)];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn grad_input<T: Real>(go: &[T], w: &[T], g: &ConvGeometry) -> Vec<T> {
    let (in_len, out_len, k3) = (g.in_len(), g.out_len(), g.k * g.k * g.k);
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let mut gi = vec![T::zero(); g.n * g.ci * in_len];
    gi.par_chunks_mut(in_len).enumerate().for_each(|(idx, gx)| {
        let (n, ci) = (idx / g.ci, idx % g.ci);
        for co in 0..g.co {
            let gos = &go[(n * g.co + co) * out_len..][..out_len];
            let ws = &w[(co * g.ci + ci) * k3..][..k3];
            for kz in 0..g.k {
                let (z0, z1) = g.valid(0, kz);
                for ky in 0..g.k {
                    let (y0, y1) = g.valid(1, ky);
                    for kx in 0..g.k {
                        let (x0, x1) = g.valid(2, kx);
                        let wv = ws[(kz * g.k + ky) * g.k + kx];
                        for od in z0..z1 {
                            let iz = g.tap(od, kz);
                            for oy in y0..y1 {
                                let iy = g.tap(oy, ky);
                                let orow = (od * oh + oy) * ow;
                                let irow = (iz * ih + iy) * iw;
                                for ox in x0..x1 {
                                    let i = irow + g.tap(ox, kx);
                                    gx[i] = gx[i] + wv * gos[orow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gi
}

pub fn grad_weight<T: Real>(go: &[T], x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (in_len, out_len, k3) = (g.in_len(), g.out_len(), g.k * g.k * g.k);
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let mut gw = vec![T::zero(); g.co * g.ci * k3];
    gw.par_chunks_mut(k3).enumerate().for_each(|(idx, gk)| {
        let (co, ci) = (idx / g.ci, idx % g.ci);
        for n in 0..g.n {
            let gos = &go[(n * g.co + co) * out_len..][..out_len];
            let xs = &x[(n * g.ci + ci) * in_len..][..in_len];
            for kz in 0..g.k {
                let (z0, z1) = g.valid(0, kz);
                for ky in 0..g.k {
                    let (y0, y1) = g.valid(1, ky);
                    for kx in 0..g.k {
                        let (x0, x1) = g.valid(2, kx);
                        let mut acc = T::zero();
                        for od in z0..z1 {
                            let iz = g.tap(od, kz);
                            for oy in y0..y1 {
                                let iy = g.tap(oy, ky);
                                let orow = (od * oh + oy) * ow;
                                let irow = (iz * ih + iy) * iw;
                                for ox in x0..x1 {
                                    acc = acc + gos[orow + ox] * xs[irow + g.tap(ox, kx)];
                                }
                            }
                        }
                        let j = (kz * g.k + ky) * g.k + kx;
                        gk[j] = gk[j] + acc;
                    }
                }
            }
        }
    });
    gw
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let [id, ih, iw] = g.input;
        let [od, oh, ow] = g.output;
        let mut out = vec![0.0; g.n * g.co * od * oh * ow];
        for n in 0..g.n {
            for co in 0..g.co {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..g.ci {
                                for kz in 0..g.k {
                                    for ky in 0..g.k {
                                        for kx in 0..g.k {
                                            let iz = (z * g.stride + kz) as isize - g.pad as isize;
                                            let iy = (y * g.stride + ky) as isize - g.pad as isize;
                                            let ix = (xx * g.stride + kx) as isize - g.pad as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= id || iy >= ih || ix >= iw {
                                                continue;
                                            }
                                            acc += w[(((co * g.ci + ci) * g.k + kz) * g.k + ky) * g.k + kx]
                                                * x[(((n * g.ci + ci) * id + iz) * ih + iy) * iw + ix];
                                        }
                                    }
                                }
                            }
                            out[(((n * g.co + co) * od + z) * oh + y) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution() {
        for (input, stride, pad, k) in [([5, 6, 7], 2, 1, 3), ([4, 4, 4], 1, 0, 1), ([3, 5, 4], 1, 1, 3)] {
            let output = input.map(|d| ConvGeometry::output_extent(d, k, stride, pad).unwrap());
            let g = ConvGeometry { n: 2, ci: 3, co: 2, k, stride, pad, input, output };
            let x: Vec<f64> = (0..2 * 3 * input.iter().product::<usize>()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
            let w: Vec<f64> = (0..2 * 3 * k * k * k).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
            let a = forward(&x, &w, &g);
            let b = naive(&x, &w, &g);
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
