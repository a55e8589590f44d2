//! IDX image/label files and a synthetic stand-in for the clothing
//! image set.

use crate::error::{CoreError, Result};
use dgmr_tensor::{Rng, Tensor};
use std::path::Path;

const U8_CODE: u8 = 0x08;

/// A decoded IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn decode_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(CoreError::Format("idx: bad magic".into()));
    }
    if bytes[2] != U8_CODE {
        return Err(CoreError::Format(format!("idx: unsupported element type 0x{:02x}", bytes[2])));
    }
    let nd = bytes[3] as usize;
    let head = 4 + 4 * nd;
    if nd == 0 || bytes.len() < head {
        return Err(CoreError::Format("idx: truncated header".into()));
    }
    let dims: Vec<usize> = (0..nd)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != head + n {
        return Err(CoreError::Format(format!(
            "idx: expected {n} data bytes, found {}",
            bytes.len() - head
        )));
    }
    Ok(IdxArray {
        dims,
        data: bytes[head..].to_vec(),
    })
}

pub fn encode_idx(a: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, U8_CODE, a.dims.len() as u8];
    for &d in &a.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&a.data);
    out
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let p = path.as_ref();
    let bytes = std::fs::read(p).map_err(|e| CoreError::io(p, e))?;
    decode_idx(&bytes)
}

pub fn write_idx(a: &IdxArray, path: impl AsRef<Path>) -> Result<()> {
    let p = path.as_ref();
    std::fs::write(p, encode_idx(a)).map_err(|e| CoreError::io(p, e))
}

/// Labelled 28x28 grayscale images.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub images: IdxArray,
    pub labels: IdxArray,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.data.is_empty()
    }

    pub fn load(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let s = Self {
            images: read_idx(images)?,
            labels: read_idx(labels)?,
        };
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<()> {
        let d = &self.images.dims;
        if d.len() != 3 || self.labels.dims.len() != 1 || d[0] != self.labels.dims[0] {
            return Err(CoreError::Format(format!(
                "image dims {:?} do not match label dims {:?}",
                d, self.labels.dims
            )));
        }
        Ok(())
    }

    pub fn pixels_per_image(&self) -> usize {
        self.images.dims[1..].iter().product()
    }

    /// Rows `idx` as floats normalised to `(p/255 - 0.5) / 0.5`, with labels.
    pub fn tensor(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let d = self.pixels_per_image();
        let mut x = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= self.len() {
                return Err(CoreError::Domain(format!("image {i} out of range")));
            }
            x.extend(self.images.data[i * d..(i + 1) * d].iter().map(|&p| (p as f32 / 255.0 - 0.5) / 0.5));
        }
        let y = idx.iter().map(|&i| self.labels.data[i] as usize).collect();
        Ok((Tensor::new(vec![idx.len(), d], x)?, y))
    }

    pub fn save(&self, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
        write_idx(&self.images, images)?;
        write_idx(&self.labels, labels)
    }
}

/// Knobs of the synthetic image generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateSpec {
    pub classes: usize,
    pub prototypes_per_class: usize,
    pub side: usize,
    /// Per-pixel gaussian noise on the 0..1 scale.
    pub pixel_noise: f32,
    /// Max shift in pixels along each axis.
    pub max_shift: i32,
    /// Probability that a label is replaced by a random class.
    pub label_noise: f64,
    /// Probability that a sample is blended with a prototype of its
    /// sibling class (`c ^ 1`), making it genuinely ambiguous.
    pub confusion: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            prototypes_per_class: 4,
            side: 28,
            pixel_noise: 0.25,
            max_shift: 2,
            label_noise: 0.1,
            confusion: 0.0,
        }
    }
}

fn blob_image(rng: &mut Rng, side: usize, blobs: usize) -> Vec<f32> {
    let mut img = vec![0f32; side * side];
    for _ in 0..blobs {
        let cx = rng.uniform_range(4.0, side as f32 - 4.0);
        let cy = rng.uniform_range(4.0, side as f32 - 4.0);
        let sx = rng.uniform_range(1.5, 6.0);
        let sy = rng.uniform_range(1.5, 6.0);
        let a = rng.uniform_range(0.4, 1.0);
        for y in 0..side {
            for x in 0..side {
                let dx = (x as f32 - cx) / sx;
                let dy = (y as f32 - cy) / sy;
                img[y * side + x] += a * (-(dx * dx + dy * dy) / 2.0).exp();
            }
        }
    }
    img
}

/// Draws `n` images: each class owns a shared silhouette plus several
/// prototypes; samples blend two prototypes of their class, shift, and add
/// pixel noise; some are blended toward a sibling class. Labels are then flipped with `label_noise`.
pub fn surrogate(spec: &SurrogateSpec, n: usize, seed: u64) -> ImageSet {
    let side = spec.side;
    let mut proto_rng = Rng::derive(seed, 0);
    let protos: Vec<Vec<Vec<f32>>> = (0..spec.classes)
        .map(|_| {
            let base = blob_image(&mut proto_rng, side, 3);
            (0..spec.prototypes_per_class)
                .map(|_| {
                    let extra = blob_image(&mut proto_rng, side, 2);
                    base.iter().zip(extra).map(|(a, b)| a + 0.6 * b).collect()
                })
                .collect()
        })
        .collect();
    let mut rng = Rng::derive(seed, 1);
    let mut images = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.below(spec.classes);
        let p = &protos[c];
        let (a, b) = (rng.below(p.len()), rng.below(p.len()));
        let t = rng.uniform_f32();
        let sib = (c ^ 1) % spec.classes;
        let mix = if rng.uniform() < spec.confusion {
            Some((rng.below(p.len()), rng.uniform_range(0.2, 0.6)))
        } else {
            None
        };
        let span = 2 * spec.max_shift + 1;
        let sx = rng.below(span as usize) as i32 - spec.max_shift;
        let sy = rng.below(span as usize) as i32 - spec.max_shift;
        for y in 0..side as i32 {
            for x in 0..side as i32 {
                let (ox, oy) = (x - sx, y - sy);
                let v = if ox < 0 || oy < 0 || ox >= side as i32 || oy >= side as i32 {
                    0.0
                } else {
                    let i = oy as usize * side + ox as usize;
                    let v = t * p[a][i] + (1.0 - t) * p[b][i];
                    match mix {
                        Some((j, m)) => (1.0 - m) * v + m * protos[sib][j][i],
                        None => v,
                    }
                };
                let v = (v + spec.pixel_noise * rng.normal()).clamp(0.0, 1.0);
                images.push((v * 255.0).round() as u8);
            }
        }
        let label = if rng.uniform() < spec.label_noise {
            rng.below(spec.classes)
        } else {
            c
        };
        labels.push(label as u8);
    }
    ImageSet {
        images: IdxArray {
            dims: vec![n, side, side],
            data: images,
        },
        labels: IdxArray {
            dims: vec![n],
            data: labels,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip_and_errors() {
        let a = IdxArray {
            dims: vec![2, 2, 3],
            data: (0..12).collect(),
        };
        let bytes = encode_idx(&a);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(&bytes[4..8], &[0, 0, 0, 2]);
        assert_eq!(decode_idx(&bytes).unwrap(), a);
        assert!(decode_idx(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[2] = 0x0d;
        assert!(decode_idx(&bad).is_err());
        assert!(decode_idx(&[1, 0, 8, 1]).is_err());
    }

    #[test]
    fn surrogate_is_deterministic_and_normalised() {
        let spec = SurrogateSpec::default();
        let a = surrogate(&spec, 20, 5);
        assert_eq!(a, surrogate(&spec, 20, 5));
        assert_ne!(a, surrogate(&spec, 20, 6));
        a.check().unwrap();
        let (x, y) = a.tensor(&[0, 3]).unwrap();
        assert_eq!(x.shape(), &[2, 784]);
        assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(y.iter().all(|&c| c < 10));
    }
}
