use super::real::Real;

/// Spatial extent `[x, y, z]`.
pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// One sample's multi-channel 3D feature map.
///
/// Storage is channel-major, then `z`, `y`, `x` with `x` varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    channels: usize,
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Self {
            channels,
            dims,
            data: vec![T::zero(); channels * voxel_count(dims)],
        }
    }

    pub fn from_vec(channels: usize, dims: Dims, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * voxel_count(dims), "tensor data length mismatch");
        Self { channels, dims, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let v = self.voxels();
        &mut self.data[c * v..(c + 1) * v]
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        ((c * self.dims[2] + z) * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(c, x, y, z)]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(c, x, y, z);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Reverse the tensor along every axis listed in `axes`.
    pub fn flip(&self, axes: &[usize]) -> Self {
        if axes.is_empty() {
            return self.clone();
        }
        let mut flip = [false; 3];
        for &a in axes {
            flip[a] = !flip[a];
        }
        let [dx, dy, dz] = self.dims;
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            for z in 0..dz {
                let sz = if flip[2] { dz - 1 - z } else { z };
                for y in 0..dy {
                    let sy = if flip[1] { dy - 1 - y } else { y };
                    let row = self.index(c, 0, sy, sz);
                    let src = &self.data[row..row + dx];
                    if flip[0] {
                        out.extend(src.iter().rev());
                    } else {
                        out.extend_from_slice(src);
                    }
                }
            }
        }
        Self {
            channels: self.channels,
            dims: self.dims,
            data: out,
        }
    }

    /// Stack `self` channels before `other` channels.
    pub fn concat(&self, other: &Self) -> Self {
        assert_eq!(self.dims, other.dims, "concat spatial mismatch");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self {
            channels: self.channels + other.channels,
            dims: self.dims,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`]: split off the first `first` channels.
    pub fn split(&self, first: usize) -> (Self, Self) {
        let v = self.voxels();
        let a = self.data[..first * v].to_vec();
        let b = self.data[first * v..].to_vec();
        (
            Self {
                channels: first,
                dims: self.dims,
                data: a,
            },
            Self {
                channels: self.channels - first,
                dims: self.dims,
                data: b,
            },
        )
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.as_f64()).unwrap_or(U::nan()))
                .collect(),
        }
    }

    /// Copy a spatial window starting at `corner`; out-of-range voxels read as zero.
    pub fn crop(&self, corner: [isize; 3], size: Dims) -> Self {
        let mut out = Self::zeros(self.channels, size);
        for c in 0..self.channels {
            for z in 0..size[2] {
                let sz = corner[2] + z as isize;
                if sz < 0 || sz >= self.dims[2] as isize {
                    continue;
                }
                for y in 0..size[1] {
                    let sy = corner[1] + y as isize;
                    if sy < 0 || sy >= self.dims[1] as isize {
                        continue;
                    }
                    let x0 = corner[0].max(0);
                    let x1 = (corner[0] + size[0] as isize).min(self.dims[0] as isize);
                    if x1 <= x0 {
                        continue;
                    }
                    let src = self.index(c, x0 as usize, sy as usize, sz as usize);
                    let dst = out.index(c, (x0 - corner[0]) as usize, y, z);
                    let n = (x1 - x0) as usize;
                    out.data[dst..dst + n].copy_from_slice(&self.data[src..src + n]);
                }
            }
        }
        out
    }
}
