//! Retina masking, ILM flattening and depth cropping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::octa_store::{check_surface_order, OctaBundle, Plane, SurfaceMap, Volume, Volume3C};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Depth at which the ILM is placed after flattening.
    pub y0: usize,
    /// Retained depth after cropping.
    pub y1: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { y0: 8, y1: 56 }
    }
}

impl PreprocessConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if !(0 < self.y0 && self.y0 < self.y1 && self.y1 <= depth) {
            return Err(Error::Validation(format!(
                "need 0 < y0 < y1 <= Y, got y0={}, y1={}, Y={depth}",
                self.y0, self.y1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedVolume {
    pub id: String,
    pub grade: Option<u8>,
    pub config: PreprocessConfig,
    /// Channels (flow, structure, lso), dims (X, y1, Z).
    pub volume: Volume3C,
}

/// Binary volume stored as bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

pub fn build_lso_volume(lso: &Plane, depth: usize) -> Volume {
    let [nx, nz] = lso.dims;
    let mut v = Volume::zeros([nx, depth, nz]);
    for x in 0..nx {
        let row = &lso.data[x * nz..(x + 1) * nz];
        for y in 0..depth {
            let o = v.index(x, y, 0);
            v.data[o..o + nz].copy_from_slice(row);
        }
    }
    v
}

pub fn build_mask(ilm: &SurfaceMap, chorio: &SurfaceMap, depth: usize) -> Result<Mask> {
    check_surface_order(ilm, chorio)?;
    let [nx, nz] = ilm.dims;
    let mut data = vec![0u8; nx * depth * nz];
    for x in 0..nx {
        for z in 0..nz {
            let (top, bottom) = (ilm.at(x, z), chorio.at(x, z).min(depth.saturating_sub(1)));
            for y in top..=bottom {
                data[(x * depth + y) * nz + z] = 1;
            }
        }
    }
    Ok(Mask {
        dims: [nx, depth, nz],
        data,
    })
}

pub fn stack_and_mask(
    flow: &Volume,
    structure: &Volume,
    lso: &Volume,
    mask: &Mask,
) -> Result<Volume3C> {
    for (name, dims) in [
        ("structure", structure.dims),
        ("lso volume", lso.dims),
        ("mask", mask.dims),
    ] {
        if dims != flow.dims {
            return Err(Error::Validation(format!(
                "{name} dims {dims:?} differ from flow dims {:?}",
                flow.dims
            )));
        }
    }
    let mut out = Volume3C::zeros(3, flow.dims);
    let n = mask.data.len();
    for (c, src) in [flow, structure, lso].into_iter().enumerate() {
        let dst = &mut out.data[c * n..(c + 1) * n];
        for ((d, s), m) in dst.iter_mut().zip(&src.data).zip(&mask.data) {
            *d = if *m != 0 { *s } else { 0.0 };
        }
    }
    Ok(out)
}

/// Shifts each A-scan so that its ILM lands at depth `y0`; vacated and
/// out-of-range positions are zero.
pub fn flatten(volume: &Volume3C, ilm: &SurfaceMap, y0: usize) -> Volume3C {
    let [nx, ny, nz] = volume.dims;
    let mut out = Volume3C::zeros(volume.channels, volume.dims);
    out.spacing_mm = volume.spacing_mm;
    for c in 0..volume.channels {
        for x in 0..nx {
            for z in 0..nz {
                let s = ilm.at(x, z);
                for y in y0..ny {
                    let src = y - y0 + s;
                    if src >= ny {
                        break;
                    }
                    out.set(c, x, y, z, volume.get(c, x, src, z));
                }
            }
        }
    }
    out
}

pub fn crop_depth(volume: &Volume3C, y1: usize) -> Result<Volume3C> {
    let [nx, ny, nz] = volume.dims;
    if y1 > ny {
        return Err(Error::Validation(format!(
            "crop depth {y1} exceeds volume depth {ny}"
        )));
    }
    let mut out = Volume3C::zeros(volume.channels, [nx, y1, nz]);
    out.spacing_mm = volume.spacing_mm;
    for c in 0..volume.channels {
        for x in 0..nx {
            let src = volume.index(c, x, 0, 0);
            let dst = out.index(c, x, 0, 0);
            out.data[dst..dst + y1 * nz].copy_from_slice(&volume.data[src..src + y1 * nz]);
        }
    }
    Ok(out)
}

pub fn preprocess_bundle(bundle: &OctaBundle, config: PreprocessConfig) -> Result<PreprocessedVolume> {
    bundle.validate()?;
    let depth = bundle.dims()[1];
    config.validate(depth)?;
    let lso = build_lso_volume(&bundle.lso, depth);
    let mask = build_mask(&bundle.ilm, &bundle.chorio, depth)?;
    let mut stacked = stack_and_mask(&bundle.flow, &bundle.structure, &lso, &mask)?;
    stacked.spacing_mm = bundle.spacing_mm;
    let flat = flatten(&stacked, &bundle.ilm, config.y0);
    let volume = crop_depth(&flat, config.y1)?;
    Ok(PreprocessedVolume {
        id: bundle.id.clone(),
        grade: Some(bundle.grade),
        config,
        volume,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_covers_the_closed_interval() {
        let ilm = SurfaceMap::constant([1, 1], 2);
        let chorio = SurfaceMap::constant([1, 1], 5);
        let m = build_mask(&ilm, &chorio, 8).unwrap();
        assert_eq!(m.data, vec![0, 0, 1, 1, 1, 1, 0, 0]);
        let m = build_mask(&ilm, &ilm, 8).unwrap();
        assert_eq!(m.data.iter().map(|&v| v as usize).sum::<usize>(), 1);
        assert!(build_mask(&chorio, &ilm, 8).is_err());
    }

    #[test]
    fn lso_volume_repeats_along_depth() {
        let lso = Plane {
            dims: [2, 3],
            data: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        };
        let v = build_lso_volume(&lso, 4);
        assert_eq!(v.dims, [2, 4, 3]);
        for x in 0..2 {
            for z in 0..3 {
                for y in 0..4 {
                    assert_eq!(v.get(x, y, z), lso.get(x, z));
                }
            }
        }
    }

    #[test]
    fn flatten_moves_ilm_to_y0() {
        let mut v = Volume3C::zeros(1, [1, 8, 1]);
        for y in 0..8 {
            v.set(0, 0, y, 0, y as f32);
        }
        let out = flatten(&v, &SurfaceMap::constant([1, 1], 5), 2);
        let col: Vec<f32> = (0..8).map(|y| out.get(0, 0, y, 0)).collect();
        assert_eq!(col, vec![0.0, 0.0, 5.0, 6.0, 7.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn crop_rejects_excess_depth() {
        let v = Volume3C::zeros(3, [2, 4, 2]);
        assert!(crop_depth(&v, 5).is_err());
        assert_eq!(crop_depth(&v, 4).unwrap(), v);
    }

    #[test]
    fn config_bounds() {
        assert!(PreprocessConfig { y0: 8, y1: 56 }.validate(96).is_ok());
        assert!(PreprocessConfig { y0: 0, y1: 56 }.validate(96).is_err());
        assert!(PreprocessConfig { y0: 8, y1: 97 }.validate(96).is_err());
        assert!(PreprocessConfig { y0: 56, y1: 56 }.validate(96).is_err());
    }
}
