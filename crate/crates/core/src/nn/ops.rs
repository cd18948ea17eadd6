//! Layer kernels with hand-written backward passes.
//!
//! Convolutions lower to im2col + GEMM over slabs of output `z` slices so the
//! column buffer stays bounded regardless of volume size.

use super::params::{Grads, ParamId, ParamStore};
use super::real::{gemm, MatRef, Real};
use super::tensor::{voxel_count, Dims, Tensor};

/// Upper bound on im2col buffer elements per slab.
const COL_BUDGET: usize = 1 << 21;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

/// 3D convolution with zero "same" padding (`kernel / 2`) and per-axis stride.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl Conv3d {
    fn pad(&self) -> [usize; 3] {
        [self.kernel[0] / 2, self.kernel[1] / 2, self.kernel[2] / 2]
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn out_dims(&self, input: Dims) -> Dims {
        let p = self.pad();
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = (input[a] + 2 * p[a] - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.kvol() + self.cout
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }

    fn slab_z(&self, out: Dims) -> usize {
        let k = self.cin * self.kvol();
        (COL_BUDGET / (k * out[0] * out[1]).max(1)).clamp(1, out[2])
    }

    pub fn forward<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.cin, "conv input channel mismatch");
        let w = params.get(self.weight);
        let b = params.get(self.bias);
        let od = self.out_dims(x.dims());
        let ov = voxel_count(od);
        let mut y = Tensor::zeros(self.cout, od);
        {
            let yd = y.data_mut();
            for co in 0..self.cout {
                yd[co * ov..(co + 1) * ov].fill(b[co]);
            }
        }
        let k = self.cin * self.kvol();
        let wm = MatRef::row_major(w, self.cout, k);
        if self.is_pointwise() {
            gemm(
                wm,
                MatRef::row_major(x.data(), self.cin, ov),
                T::one(),
                y.data_mut(),
                ov,
                1,
            );
            return y;
        }
        let slab = self.slab_z(od);
        let plane = od[0] * od[1];
        let mut col = vec![T::zero(); k * plane * slab];
        let mut z0 = 0;
        while z0 < od[2] {
            let z1 = (z0 + slab).min(od[2]);
            let n = plane * (z1 - z0);
            im2col(self, x, od, z0, z1, &mut col[..k * n]);
            let off = z0 * plane;
            gemm(
                wm,
                MatRef::row_major(&col[..k * n], k, n),
                T::one(),
                &mut y.data_mut()[off..],
                ov,
                1,
            );
            z0 = z1;
        }
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient when `need_dx`.
    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let w = params.get(self.weight);
        let od = dy.dims();
        let ov = voxel_count(od);
        {
            let db = grads.get_mut(self.bias);
            for co in 0..self.cout {
                db[co] += dy.channel(co).iter().copied().sum::<T>();
            }
        }
        let k = self.cin * self.kvol();
        let wm = MatRef::row_major(w, self.cout, k);
        if self.is_pointwise() {
            let xm = MatRef::row_major(x.data(), self.cin, ov);
            let dym = MatRef::row_major(dy.data(), self.cout, ov);
            gemm(dym, xm.t(), T::one(), grads.get_mut(self.weight), k, 1);
            return need_dx.then(|| {
                let mut dx = Tensor::zeros(self.cin, x.dims());
                gemm(wm.t(), dym, T::zero(), dx.data_mut(), ov, 1);
                dx
            });
        }
        let slab = self.slab_z(od);
        let plane = od[0] * od[1];
        let mut col = vec![T::zero(); k * plane * slab];
        let mut dx = need_dx.then(|| Tensor::zeros(self.cin, x.dims()));
        let mut z0 = 0;
        while z0 < od[2] {
            let z1 = (z0 + slab).min(od[2]);
            let n = plane * (z1 - z0);
            let off = z0 * plane;
            let dym = MatRef {
                data: &dy.data()[off..],
                rows: self.cout,
                cols: n,
                rs: ov,
                cs: 1,
            };
            im2col(self, x, od, z0, z1, &mut col[..k * n]);
            gemm(
                dym,
                MatRef::row_major(&col[..k * n], k, n).t(),
                T::one(),
                grads.get_mut(self.weight),
                k,
                1,
            );
            if let Some(dx) = dx.as_mut() {
                gemm(wm.t(), dym, T::zero(), &mut col[..k * n], n, 1);
                col2im(self, dx, od, z0, z1, &col[..k * n]);
            }
            z0 = z1;
        }
        dx
    }
}

/// Calls `f(row, ci, dz, dy, x_shift)` for every lowered column row, where
/// `x_shift = dx - pad_x`.
#[inline]
fn for_each_tap(conv: &Conv3d, mut f: impl FnMut(usize, usize, usize, usize, isize)) {
    let p = conv.pad();
    let kv = conv.kvol();
    let [kx, ky, kz] = conv.kernel;
    for ci in 0..conv.cin {
        for dz in 0..kz {
            for dy in 0..ky {
                for dx in 0..kx {
                    let row = ci * kv + (dz * ky + dy) * kx + dx;
                    f(row, ci, dz, dy, dx as isize - p[0] as isize);
                }
            }
        }
    }
}

fn im2col<T: Real>(conv: &Conv3d, x: &Tensor<T>, od: Dims, z0: usize, z1: usize, col: &mut [T]) {
    let id = x.dims();
    let [sx, sy, sz] = conv.stride;
    let p = conv.pad();
    let plane = od[0] * od[1];
    let n = plane * (z1 - z0);
    let xd = x.data();
    let iv = voxel_count(id);
    for_each_tap(conv, |row, ci, dz, dy, shift_x| {
        let dst = &mut col[row * n..(row + 1) * n];
        let base = ci * iv;
        let mut j = 0;
        for oz in z0..z1 {
            let iz = (oz * sz + dz) as isize - p[2] as isize;
            if iz < 0 || iz >= id[2] as isize {
                dst[j..j + plane].fill(T::zero());
                j += plane;
                continue;
            }
            for oy in 0..od[1] {
                let iy = (oy * sy + dy) as isize - p[1] as isize;
                let out_row = &mut dst[j..j + od[0]];
                j += od[0];
                if iy < 0 || iy >= id[1] as isize {
                    out_row.fill(T::zero());
                    continue;
                }
                let src = base + (iz as usize * id[1] + iy as usize) * id[0];
                let src_row = &xd[src..src + id[0]];
                if sx == 1 {
                    let lo = (-shift_x).clamp(0, od[0] as isize) as usize;
                    let hi = (id[0] as isize - shift_x).clamp(lo as isize, od[0] as isize) as usize;
                    out_row[..lo].fill(T::zero());
                    let s0 = (lo as isize + shift_x) as usize;
                    out_row[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                    out_row[hi..].fill(T::zero());
                } else {
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * sx) as isize + shift_x;
                        *v = if ix < 0 || ix >= id[0] as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    });
}

fn col2im<T: Real>(conv: &Conv3d, dx: &mut Tensor<T>, od: Dims, z0: usize, z1: usize, col: &[T]) {
    let id = dx.dims();
    let [sx, sy, sz] = conv.stride;
    let p = conv.pad();
    let plane = od[0] * od[1];
    let n = plane * (z1 - z0);
    let iv = voxel_count(id);
    let dd = dx.data_mut();
    for_each_tap(conv, |row, ci, dz, dy, shift_x| {
        let src = &col[row * n..(row + 1) * n];
        let base = ci * iv;
        let mut j = 0;
        for oz in z0..z1 {
            let iz = (oz * sz + dz) as isize - p[2] as isize;
            if iz < 0 || iz >= id[2] as isize {
                j += plane;
                continue;
            }
            for oy in 0..od[1] {
                let iy = (oy * sy + dy) as isize - p[1] as isize;
                let in_row = &src[j..j + od[0]];
                j += od[0];
                if iy < 0 || iy >= id[1] as isize {
                    continue;
                }
                let dst = base + (iz as usize * id[1] + iy as usize) * id[0];
                let dst_row = &mut dd[dst..dst + id[0]];
                if sx == 1 {
                    let lo = (-shift_x).clamp(0, od[0] as isize) as usize;
                    let hi = (id[0] as isize - shift_x).clamp(lo as isize, od[0] as isize) as usize;
                    let s0 = (lo as isize + shift_x) as usize;
                    for (d, &v) in dst_row[s0..s0 + (hi - lo)].iter_mut().zip(&in_row[lo..hi]) {
                        *d += v;
                    }
                } else {
                    for (ox, &v) in in_row.iter().enumerate() {
                        let ix = (ox * sx) as isize + shift_x;
                        if ix >= 0 && ix < id[0] as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    });
}

/// Transposed convolution with kernel equal to stride (non-overlapping upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub stride: [usize; 3],
}

impl ConvTranspose3d {
    fn kvol(&self) -> usize {
        self.stride.iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.cin * self.cout * self.kvol() + self.cout
    }

    pub fn out_dims(&self, input: Dims) -> Dims {
        [
            input[0] * self.stride[0],
            input[1] * self.stride[1],
            input[2] * self.stride[2],
        ]
    }

    /// Maps `(column-row, input voxel)` of the lowered product to the output voxel index.
    fn scatter(&self, id: Dims, mut f: impl FnMut(usize, usize)) {
        let [sx, sy, sz] = self.stride;
        let od = self.out_dims(id);
        let kv = self.kvol();
        let iv = voxel_count(id);
        let ov = voxel_count(od);
        for co in 0..self.cout {
            for dz in 0..sz {
                for dy in 0..sy {
                    for dx in 0..sx {
                        let r = co * kv + (dz * sy + dy) * sx + dx;
                        let mut i = 0;
                        for iz in 0..id[2] {
                            for iy in 0..id[1] {
                                let orow = co * ov + ((iz * sz + dz) * od[1] + iy * sy + dy) * od[0] + dx;
                                for ix in 0..id[0] {
                                    f(r * iv + i, orow + ix * sx);
                                    i += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.cin, "transposed conv channel mismatch");
        let w = params.get(self.weight);
        let b = params.get(self.bias);
        let id = x.dims();
        let iv = voxel_count(id);
        let cols = self.cout * self.kvol();
        let mut tmp = vec![T::zero(); cols * iv];
        gemm(
            MatRef::row_major(w, self.cin, cols).t(),
            MatRef::row_major(x.data(), self.cin, iv),
            T::zero(),
            &mut tmp,
            iv,
            1,
        );
        let od = self.out_dims(id);
        let ov = voxel_count(od);
        let mut y = Tensor::zeros(self.cout, od);
        let yd = y.data_mut();
        self.scatter(id, |src, dst| yd[dst] = tmp[src]);
        for co in 0..self.cout {
            for v in &mut yd[co * ov..(co + 1) * ov] {
                *v += b[co];
            }
        }
        y
    }

    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        let w = params.get(self.weight);
        let id = x.dims();
        let iv = voxel_count(id);
        let cols = self.cout * self.kvol();
        {
            let db = grads.get_mut(self.bias);
            for co in 0..self.cout {
                db[co] += dy.channel(co).iter().copied().sum::<T>();
            }
        }
        let mut dtmp = vec![T::zero(); cols * iv];
        let dyd = dy.data();
        self.scatter(id, |src, dst| dtmp[src] = dyd[dst]);
        let xm = MatRef::row_major(x.data(), self.cin, iv);
        let dm = MatRef::row_major(&dtmp, cols, iv);
        gemm(xm, dm.t(), T::one(), grads.get_mut(self.weight), cols, 1);
        let mut dx = Tensor::zeros(self.cin, id);
        gemm(
            MatRef::row_major(w, self.cin, cols),
            dm,
            T::zero(),
            dx.data_mut(),
            iv,
            1,
        );
        dx
    }
}

/// Per-sample, per-channel normalisation with learnable affine.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl InstanceNorm {
    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let g = params.get(self.gamma);
        let b = params.get(self.beta);
        let n = T::lit(x.voxels() as f64);
        let eps = T::lit(NORM_EPS);
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let xc = x.channel(c);
            let mean = xc.iter().copied().sum::<T>() / n;
            let var = xc.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (h, yv) in xhat.channel_mut(c).iter_mut().zip(y.channel_mut(c).iter_mut()) {
                *h = (*h - mean) * is;
                *yv = *h * g[c] + b[c];
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        cache: &NormCache<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        let g = params.get(self.gamma);
        let n = T::lit(dy.voxels() as f64);
        let mut dx = Tensor::zeros(self.channels, dy.dims());
        let mut dg = vec![T::zero(); self.channels];
        let mut dbeta = vec![T::zero(); self.channels];
        for c in 0..self.channels {
            let xh = cache.xhat.channel(c);
            let d = dy.channel(c);
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for (&dv, &h) in d.iter().zip(xh) {
                sum_d += dv;
                sum_dx += dv * h;
            }
            dg[c] = sum_dx;
            dbeta[c] = sum_d;
            let k = g[c] * cache.inv_std[c] / n;
            for ((o, &dv), &h) in dx.channel_mut(c).iter_mut().zip(d).zip(xh) {
                *o = k * (n * dv - sum_d - h * sum_dx);
            }
        }
        for (a, b) in grads.get_mut(self.gamma).iter_mut().zip(dg) {
            *a += b;
        }
        for (a, b) in grads.get_mut(self.beta).iter_mut().zip(dbeta) {
            *a += b;
        }
        dx
    }
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = T::lit(LEAKY_SLOPE);
    x.map(|v| if v > T::zero() { v } else { v * s })
}

/// Gradient through the leaky rectifier given its *input*.
pub fn leaky_relu_backward<T: Real>(input: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let s = T::lit(LEAKY_SLOPE);
    let data = input
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&x, &d)| if x > T::zero() { d } else { d * s })
        .collect();
    Tensor::from_vec(dy.channels(), dy.dims(), data)
}
