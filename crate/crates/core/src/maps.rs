//! Dense H×W×C grids and the `A2BT` tensor container.
//!
//! Layout on disk (all little-endian):
//!
//! | bytes | field                         |
//! |-------|-------------------------------|
//! | 4     | magic `A2BT`                  |
//! | 2     | version, u16 = 1              |
//! | 1     | dtype, u8 = 0 (IEEE-754 f32)  |
//! | 1     | ndim, u8 = 3                  |
//! | 12    | H, W, C as u32                |
//! | 4·HWC | values, H outer, C inner      |

use std::fs;
use std::path::Path;

use crate::error::{io_err, Error, Result};

pub const MAGIC: [u8; 4] = *b"A2BT";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 3 * 4;

/// Row-major grid, pixel-major and channel-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

/// The 32-bit carrier for images and supervision maps.
pub type DenseMap = Grid<f32>;

impl<T: Copy + Default> Grid<T> {
    /// Panics if any dimension is zero.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::default())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        assert!(
            height >= 1 && width >= 1 && channels >= 1,
            "grid dimensions must be positive, got {height}x{width}x{channels}"
        );
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl<T> Grid<T> {
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, c: usize) -> usize {
        debug_assert!(i < self.height && j < self.width && c < self.channels);
        (i * self.width + j) * self.channels + c
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> &[T] {
        let start = (i * self.width + j) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, i: usize, j: usize) -> &mut [T] {
        let start = (i * self.width + j) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.shape() == other.shape()
    }
}

impl<T: Copy> Grid<T> {
    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> T {
        self.data[self.index(i, j, c)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: T) {
        let k = self.index(i, j, c);
        self.data[k] = v;
    }
}

impl DenseMap {
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(k) = self.first_non_finite() {
            return Err(Error::NonFinite(k));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        out.push(3);
        for d in [self.height, self.width, self.channels] {
            let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(Error::BadMagic(bytes[..4].try_into().unwrap()));
            }
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        if bytes[6] != DTYPE_F32 {
            return Err(Error::UnsupportedDtype(bytes[6]));
        }
        if bytes[7] != 3 {
            return Err(Error::UnsupportedNdim(bytes[7]));
        }
        let dim = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().unwrap()) as usize;
        let (h, w, c) = (dim(0), dim(1), dim(2));
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| Error::Shape(format!("{h}x{w}x{c} overflows")))?;
        let expected = HEADER_LEN + 4 * n;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::Shape(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected
            )));
        }
        let data: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let map = Grid::from_vec(h, w, c, data)?;
        if let Some(k) = map.first_non_finite() {
            return Err(Error::NonFinite(k));
        }
        Ok(map)
    }
}

/// Writes through a sibling temp file and renames, so readers never see a partial tensor.
pub fn write_tensor(map: &DenseMap, path: impl AsRef<Path>) -> Result<()> {
    let bytes = map.to_bytes()?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DenseMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    DenseMap::from_bytes(&bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smallest_map_layout() {
        let m = DenseMap::zeros(1, 1, 1);
        let b = m.to_bytes().unwrap();
        assert_eq!(b.len(), HEADER_LEN + 4);
        assert_eq!(&b[..4], b"A2BT");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 0);
        assert_eq!(b[7], 3);
        assert_eq!(&b[8..20], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[20..], &[0, 0, 0, 0]);
    }

    #[test]
    fn header_is_twenty_bytes() {
        // magic 4 + version 2 + dtype 1 + ndim 1 + three u32 dims
        assert_eq!(HEADER_LEN, 20);
        let m = DenseMap::zeros(2, 3, 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.a2bt");
        write_tensor(&m, &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 20 + 96);
    }

    #[test]
    fn distinct_read_errors() {
        let good = DenseMap::filled(2, 2, 1, 0.5).to_bytes().unwrap();

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(DenseMap::from_bytes(&bad), Err(Error::BadMagic(m)) if &m == b"XXXX"));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(DenseMap::from_bytes(&bad), Err(Error::UnsupportedVersion(2))));

        let mut bad = good.clone();
        bad[6] = 1;
        assert!(matches!(DenseMap::from_bytes(&bad), Err(Error::UnsupportedDtype(1))));

        let mut bad = good.clone();
        bad[7] = 4;
        assert!(matches!(DenseMap::from_bytes(&bad), Err(Error::UnsupportedNdim(4))));

        let bad = &good[..good.len() - 3];
        assert!(matches!(DenseMap::from_bytes(bad), Err(Error::Truncated { .. })));
        assert!(matches!(DenseMap::from_bytes(&good[..10]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn refuses_non_finite() {
        let mut m = DenseMap::zeros(1, 2, 1);
        m.set(0, 1, 0, f32::NAN);
        assert!(matches!(m.to_bytes(), Err(Error::NonFinite(1))));
        m.set(0, 1, 0, f32::INFINITY);
        let dir = tempfile::tempdir().unwrap();
        assert!(write_tensor(&m, dir.path().join("x.a2bt")).is_err());
        assert!(!dir.path().join("x.a2bt").exists());
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Grid::from_vec(2, 2, 2, vec![0.0f32; 7]).is_err());
        assert!(Grid::<f32>::from_vec(0, 2, 2, vec![]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_byte_exact(h in 1usize..6, w in 1usize..6, c in 1usize..5, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..h * w * c).map(|_| rng.random_range(-1e6f32..1e6)).collect();
            let m = DenseMap::from_vec(h, w, c, data).unwrap();
            let bytes = m.to_bytes().unwrap();
            let back = DenseMap::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back.to_bytes().unwrap(), &bytes);
            for (a, b) in m.data().iter().zip(back.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
