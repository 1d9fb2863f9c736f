//! Random affine warps and mirroring as fixed linear resampling maps, so
//! they sit inside the differentiable graph.

use discover_autograd::{ResampleMap, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    /// Shift as a fraction of the row and column extents.
    pub translate: [f64; 2],
    /// Isotropic zoom factor.
    pub scale: f64,
    /// Mirror the row axis after the warp.
    pub hflip: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            rotation_deg: 0.0,
            translate: [0.0, 0.0],
            scale: 1.0,
            hflip: false,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentRanges {
    pub rotation_deg: f64,
    pub translate: f64,
    pub scale: [f64; 2],
    pub hflip_prob: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            rotation_deg: 10.0,
            translate: 0.10,
            scale: [0.90, 1.10],
            hflip_prob: 0.5,
        }
    }
}

impl AugmentRanges {
    pub fn none() -> Self {
        AugmentRanges {
            rotation_deg: 0.0,
            translate: 0.0,
            scale: [1.0, 1.0],
            hflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation_deg >= 0.0
            && self.translate >= 0.0
            && self.scale[0] > 0.0
            && self.scale[0] <= self.scale[1]
            && (0.0..=1.0).contains(&self.hflip_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation ranges {self:?}")))
        }
    }

    pub fn draw(&self, rng: &mut impl Rng) -> AugmentParams {
        let sym = |rng: &mut dyn rand::RngCore, r: f64| {
            if r > 0.0 {
                rng.gen_range(-r..=r)
            } else {
                0.0
            }
        };
        AugmentParams {
            rotation_deg: sym(rng, self.rotation_deg),
            translate: [sym(rng, self.translate), sym(rng, self.translate)],
            scale: if self.scale[1] > self.scale[0] {
                rng.gen_range(self.scale[0]..=self.scale[1])
            } else {
                self.scale[0]
            },
            hflip: self.hflip_prob > 0.0 && rng.gen_bool(self.hflip_prob),
        }
    }
}

/// Bilinear, zero-padded resampling map for an `h x w` image. Rotation and
/// scaling are about the image center; the mirror is applied last.
pub fn resample_map(h: usize, w: usize, p: &AugmentParams) -> ResampleMap {
    if p.is_identity() {
        return ResampleMap::identity(h, w);
    }
    let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = p.rotation_deg.to_radians().sin_cos();
    let (tr, tc) = (p.translate[0] * h as f64, p.translate[1] * w as f64);
    let mut taps = Vec::with_capacity(h * w);
    for i in 0..h {
        let row = if p.hflip { h - 1 - i } else { i };
        for j in 0..w {
            let v = row as f64 - cr - tr;
            let u = j as f64 - cc - tc;
            let su = (cos * u + sin * v) / p.scale + cc;
            let sv = (-sin * u + cos * v) / p.scale + cr;
            let (r0, c0) = (sv.floor(), su.floor());
            let (fr, fc) = (sv - r0, su - c0);
            let mut t = [(0u32, 0.0); 4];
            let corners = [
                (r0, c0, (1.0 - fr) * (1.0 - fc)),
                (r0, c0 + 1.0, (1.0 - fr) * fc),
                (r0 + 1.0, c0, fr * (1.0 - fc)),
                (r0 + 1.0, c0 + 1.0, fr * fc),
            ];
            for (slot, (r, c, wt)) in t.iter_mut().zip(corners) {
                if wt != 0.0 && r >= 0.0 && c >= 0.0 && r < h as f64 && c < w as f64 {
                    *slot = ((r as usize * w + c as usize) as u32, wt);
                }
            }
            taps.push(t);
        }
    }
    ResampleMap {
        in_h: h,
        in_w: w,
        out_h: h,
        out_w: w,
        taps,
    }
}

/// Applies the transform to a `[C, H, W]` image.
pub fn apply_transform(image: &Tensor, params: &AugmentParams) -> Tensor {
    let [c, h, w] = [image.dim(0), image.dim(1), image.dim(2)];
    let map = resample_map(h, w, params);
    let mut out = vec![0.0; c * h * w];
    for k in 0..c {
        map.apply(
            &image.data()[k * h * w..(k + 1) * h * w],
            &mut out[k * h * w..(k + 1) * h * w],
        );
    }
    Tensor::new(&[c, h, w], out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern() -> Tensor {
        Tensor::new(&[2, 3, 4], (0..24).map(|v| v as f64 * 0.5 - 3.0).collect()).unwrap()
    }

    #[test]
    fn identity_is_exact() {
        let img = pattern();
        assert_eq!(apply_transform(&img, &AugmentParams::identity()), img);
    }

    #[test]
    fn mirror_is_an_involution() {
        let img = pattern();
        let flip = AugmentParams {
            hflip: true,
            ..AugmentParams::identity()
        };
        let once = apply_transform(&img, &flip);
        assert_ne!(once, img);
        assert_eq!(once.data()[0], img.data()[8]);
        assert_eq!(apply_transform(&once, &flip), img);
    }

    #[test]
    fn draws_stay_in_range() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let r = AugmentRanges::default();
        for _ in 0..1000 {
            let p = r.draw(&mut rng);
            assert!(p.rotation_deg.abs() <= 10.0);
            assert!(p.translate.iter().all(|t| t.abs() <= 0.1));
            assert!((0.9..=1.1).contains(&p.scale));
        }
        assert!(AugmentRanges::none().draw(&mut rng).is_identity());
    }
}
