//! On-disk acquisition container and in-memory volume types.
//!
//! A bundle is a directory holding `meta.json` and raw little-endian float32
//! arrays. Volumes are stored x-major: index `((x * Y) + y) * Z + z`; 2-D
//! arrays use `x * Z + z`. Each array entry in `meta.json` may carry a
//! SHA-256 digest over its declared shape and bytes, so editing dimensions
//! without rewriting the data is detected even when the element count is
//! unchanged.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "discover-bundle/1";
/// Number of ordinal cutoffs (ICDR grades 1..=4).
pub const N_CUTOFFS: usize = 4;
pub const MAX_GRADE: u8 = 4;
pub const CHANNEL_NAMES: [&str; 3] = ["flow", "structure", "lso"];

/// Single-channel volume indexed `(x, y, z)`; `y` is depth along the A-scan.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }
}

/// En-face 2-D array indexed `(x, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub dims: [usize; 2],
    pub data: Vec<f32>,
}

impl Plane {
    pub fn zeros(dims: [usize; 2]) -> Self {
        Plane {
            dims,
            data: vec![0.0; dims[0] * dims[1]],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, z: usize) -> f32 {
        self.data[x * self.dims[1] + z]
    }

    #[inline]
    pub fn set(&mut self, x: usize, z: usize, v: f32) {
        self.data[x * self.dims[1] + z] = v;
    }
}

/// Integer depth (along `y`) of a segmented surface at every A-scan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurfaceMap {
    pub dims: [usize; 2],
    pub depths: Vec<usize>,
}

impl SurfaceMap {
    pub fn constant(dims: [usize; 2], depth: usize) -> Self {
        SurfaceMap {
            dims,
            depths: vec![depth; dims[0] * dims[1]],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, z: usize) -> usize {
        self.depths[x * self.dims[1] + z]
    }

    pub fn validate_depth(&self, depth: usize) -> Result<()> {
        if let Some(d) = self.depths.iter().find(|&&d| d >= depth) {
            return Err(Error::Validation(format!(
                "surface depth {d} outside [0, {depth})"
            )));
        }
        Ok(())
    }
}

/// Multi-channel volume indexed `(c, x, y, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3C {
    pub channels: usize,
    pub dims: [usize; 3],
    /// Physical voxel size per axis in mm; informational only.
    pub spacing_mm: [f64; 3],
    pub data: Vec<f32>,
}

impl Volume3C {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Volume3C {
            channels,
            dims,
            spacing_mm: [0.0; 3],
            data: vec![0.0; channels * dims.iter().product::<usize>()],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        ((c * self.dims[0] + x) * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(c, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(c, x, y, z);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n: usize = self.dims.iter().product();
        &self.data[c * n..(c + 1) * n]
    }
}

/// One acquisition: flow and structure volumes, LSO localizer, two
/// segmented surfaces and the ICDR grade.
#[derive(Clone, Debug, PartialEq)]
pub struct OctaBundle {
    pub id: String,
    pub grade: u8,
    pub flow: Volume,
    pub structure: Volume,
    pub lso: Plane,
    pub ilm: SurfaceMap,
    pub chorio: SurfaceMap,
    pub spacing_mm: [f64; 3],
}

impl OctaBundle {
    pub fn dims(&self) -> [usize; 3] {
        self.flow.dims
    }

    pub fn validate(&self) -> Result<()> {
        let [x, y, z] = self.flow.dims;
        if x == 0 || y == 0 || z == 0 {
            return Err(Error::Validation(format!(
                "dimensions must be positive, got {:?}",
                self.flow.dims
            )));
        }
        if self.grade > MAX_GRADE {
            return Err(Error::Validation(format!(
                "grade {} outside [0, {MAX_GRADE}]",
                self.grade
            )));
        }
        if self.structure.dims != self.flow.dims {
            return Err(Error::Validation(format!(
                "structure dims {:?} differ from flow dims {:?}",
                self.structure.dims, self.flow.dims
            )));
        }
        for (name, dims) in [
            ("lso", self.lso.dims),
            ("ilm", self.ilm.dims),
            ("chorio", self.chorio.dims),
        ] {
            if dims != [x, z] {
                return Err(Error::Validation(format!(
                    "{name} dims {dims:?} differ from en-face dims {:?}",
                    [x, z]
                )));
            }
        }
        for (name, data) in [
            ("flow", &self.flow.data),
            ("structure", &self.structure.data),
            ("lso", &self.lso.data),
        ] {
            if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
                return Err(Error::Validation(format!(
                    "{name} intensity {v} outside [0, 1]"
                )));
            }
        }
        self.ilm.validate_depth(y)?;
        self.chorio.validate_depth(y)?;
        check_surface_order(&self.ilm, &self.chorio)
    }
}

pub fn check_surface_order(ilm: &SurfaceMap, chorio: &SurfaceMap) -> Result<()> {
    if ilm.dims != chorio.dims {
        return Err(Error::Validation("surface dims differ".into()));
    }
    for (i, (a, b)) in ilm.depths.iter().zip(&chorio.depths).enumerate() {
        if a > b {
            return Err(Error::Validation(format!(
                "ILM depth {a} below chorioretinal depth {b} at A-scan ({}, {})",
                i / ilm.dims[1],
                i % ilm.dims[1]
            )));
        }
    }
    Ok(())
}

/// Binary ordinal labels: `lambda[n - 1] = 1` iff grade >= n.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradeLabels {
    pub lambda: [u8; N_CUTOFFS],
}

impl GradeLabels {
    /// Number of positive cutoffs, which recovers the grade.
    pub fn decode(&self) -> u8 {
        self.lambda.iter().sum()
    }

    pub fn as_f64(&self) -> [f64; N_CUTOFFS] {
        self.lambda.map(f64::from)
    }
}

pub fn encode_labels(grade: u8) -> Result<GradeLabels> {
    if grade > MAX_GRADE {
        return Err(Error::Validation(format!(
            "grade {grade} outside [0, {MAX_GRADE}]"
        )));
    }
    let mut lambda = [0u8; N_CUTOFFS];
    for (n, l) in lambda.iter_mut().enumerate() {
        *l = u8::from(grade as usize > n);
    }
    Ok(GradeLabels { lambda })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ArrayMeta {
    pub file: String,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BundleMeta {
    pub format_version: String,
    pub id: String,
    pub dims: [usize; 3],
    pub channels: Vec<String>,
    pub dtype: String,
    pub endianness: String,
    #[serde(default)]
    pub grade: Option<u8>,
    #[serde(default)]
    pub spacing_mm: [f64; 3],
    #[serde(default)]
    pub preprocessed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y0: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y1: Option<usize>,
    pub arrays: BTreeMap<String, ArrayMeta>,
}

fn digest(shape: &[usize], bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("{shape:?}").as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn to_le_bytes(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(f32::to_le_bytes).collect()
}

fn write_array(dir: &Path, name: &str, shape: &[usize], bytes: Vec<u8>) -> Result<ArrayMeta> {
    let file = format!("{name}.raw");
    let path = dir.join(&file);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(ArrayMeta {
        file,
        shape: shape.to_vec(),
        sha256: Some(digest(shape, &bytes)),
    })
}

fn read_array(dir: &Path, meta: &BundleMeta, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let entry = meta
        .arrays
        .get(name)
        .ok_or_else(|| Error::Format(format!("meta.json lists no '{name}' array")))?;
    if entry.shape != shape {
        return Err(Error::Format(format!(
            "{}: declared shape {:?} inconsistent with dims {:?}",
            entry.file, entry.shape, shape
        )));
    }
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            file: entry.file.clone(),
            expected,
            found: bytes.len(),
        });
    }
    if let Some(sum) = &entry.sha256 {
        if *sum != digest(shape, &bytes) {
            return Err(Error::Format(format!(
                "{}: checksum mismatch with declared shape {:?}",
                entry.file, shape
            )));
        }
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_meta(dir: &Path, meta: &BundleMeta) -> Result<()> {
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_meta(dir: &Path) -> Result<BundleMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: BundleMeta = serde_json::from_str(&text)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version '{}'",
            meta.format_version
        )));
    }
    if meta.dtype != "float32" {
        return Err(Error::Format(format!("unsupported dtype '{}'", meta.dtype)));
    }
    if meta.endianness != "little" {
        return Err(Error::Format(format!(
            "unsupported endianness '{}'",
            meta.endianness
        )));
    }
    if meta.dims.iter().any(|&d| d == 0) {
        return Err(Error::Format(format!("zero dimension in {:?}", meta.dims)));
    }
    Ok(meta)
}

fn surface_to_f32(s: &SurfaceMap) -> impl Iterator<Item = f32> + '_ {
    s.depths.iter().map(|&d| d as f32)
}

fn surface_from_f32(name: &str, dims: [usize; 2], data: Vec<f32>) -> Result<SurfaceMap> {
    let depths = data
        .into_iter()
        .map(|v| {
            if v.is_finite() && v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("{name}: non-integer depth {v}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SurfaceMap { dims, depths })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_bundle(bundle: &OctaBundle, path: &Path) -> Result<()> {
    bundle.validate()?;
    create_dir(path)?;
    let [x, y, z] = bundle.dims();
    let mut arrays = BTreeMap::new();
    let vol = [x, y, z];
    let plane = [x, z];
    arrays.insert(
        "flow".into(),
        write_array(path, "flow", &vol, to_le_bytes(bundle.flow.data.iter().copied()))?,
    );
    arrays.insert(
        "structure".into(),
        write_array(
            path,
            "structure",
            &vol,
            to_le_bytes(bundle.structure.data.iter().copied()),
        )?,
    );
    arrays.insert(
        "lso".into(),
        write_array(path, "lso", &plane, to_le_bytes(bundle.lso.data.iter().copied()))?,
    );
    arrays.insert(
        "ilm".into(),
        write_array(path, "ilm", &plane, to_le_bytes(surface_to_f32(&bundle.ilm)))?,
    );
    arrays.insert(
        "chorio".into(),
        write_array(path, "chorio", &plane, to_le_bytes(surface_to_f32(&bundle.chorio)))?,
    );
    let meta = BundleMeta {
        format_version: FORMAT_VERSION.into(),
        id: bundle.id.clone(),
        dims: bundle.dims(),
        channels: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        dtype: "float32".into(),
        endianness: "little".into(),
        grade: Some(bundle.grade),
        spacing_mm: bundle.spacing_mm,
        preprocessed: false,
        y0: None,
        y1: None,
        arrays,
    };
    write_meta(path, &meta)
}

pub fn read_bundle(path: &Path) -> Result<OctaBundle> {
    let meta = read_meta(path)?;
    if meta.preprocessed {
        return Err(Error::Format(format!(
            "{} holds a preprocessed volume, not a raw acquisition",
            path.display()
        )));
    }
    let [x, y, z] = meta.dims;
    let grade = meta
        .grade
        .ok_or_else(|| Error::Format("meta.json has no grade".into()))?;
    let bundle = OctaBundle {
        id: meta.id.clone(),
        grade,
        flow: Volume {
            dims: meta.dims,
            data: read_array(path, &meta, "flow", &[x, y, z])?,
        },
        structure: Volume {
            dims: meta.dims,
            data: read_array(path, &meta, "structure", &[x, y, z])?,
        },
        lso: Plane {
            dims: [x, z],
            data: read_array(path, &meta, "lso", &[x, z])?,
        },
        ilm: surface_from_f32("ilm", [x, z], read_array(path, &meta, "ilm", &[x, z])?)?,
        chorio: surface_from_f32("chorio", [x, z], read_array(path, &meta, "chorio", &[x, z])?)?,
        spacing_mm: meta.spacing_mm,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes a preprocessed `(3, X, Y1, Z)` volume as a bundle variant.
pub fn write_preprocessed(
    id: &str,
    grade: Option<u8>,
    volume: &Volume3C,
    y0: usize,
    y1: usize,
    path: &Path,
) -> Result<()> {
    create_dir(path)?;
    let shape = [volume.channels, volume.dims[0], volume.dims[1], volume.dims[2]];
    let mut arrays = BTreeMap::new();
    arrays.insert(
        "volume".into(),
        write_array(path, "volume", &shape, to_le_bytes(volume.data.iter().copied()))?,
    );
    let meta = BundleMeta {
        format_version: FORMAT_VERSION.into(),
        id: id.into(),
        dims: volume.dims,
        channels: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        dtype: "float32".into(),
        endianness: "little".into(),
        grade,
        spacing_mm: volume.spacing_mm,
        preprocessed: true,
        y0: Some(y0),
        y1: Some(y1),
        arrays,
    };
    write_meta(path, &meta)
}

/// Reads a preprocessed volume; returns the volume and its metadata.
pub fn read_preprocessed(path: &Path) -> Result<(Volume3C, BundleMeta)> {
    let meta = read_meta(path)?;
    if !meta.preprocessed {
        return Err(Error::Format(format!(
            "{} is not a preprocessed bundle",
            path.display()
        )));
    }
    let [x, y, z] = meta.dims;
    let data = read_array(path, &meta, "volume", &[3, x, y, z])?;
    let volume = Volume3C {
        channels: 3,
        dims: meta.dims,
        spacing_mm: meta.spacing_mm,
        data,
    };
    Ok((volume, meta))
}

/// True when `path` holds a preprocessed bundle.
pub fn is_preprocessed(path: &Path) -> Result<bool> {
    Ok(read_meta(path)?.preprocessed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bundle() -> OctaBundle {
        let dims = [2, 3, 2];
        let n = 12;
        OctaBundle {
            id: "tiny".into(),
            grade: 2,
            flow: Volume {
                dims,
                data: (0..n).map(|i| i as f32 / n as f32).collect(),
            },
            structure: Volume {
                dims,
                data: (0..n).map(|i| 1.0 - i as f32 / n as f32).collect(),
            },
            lso: Plane {
                dims: [2, 2],
                data: vec![0.1, 0.2, 0.3, 0.4],
            },
            ilm: SurfaceMap::constant([2, 2], 0),
            chorio: SurfaceMap::constant([2, 2], 2),
            spacing_mm: [0.012, 0.004, 0.012],
        }
    }

    #[test]
    fn labels_threshold_the_grade() {
        assert_eq!(encode_labels(0).unwrap().lambda, [0, 0, 0, 0]);
        assert_eq!(encode_labels(3).unwrap().lambda, [1, 1, 1, 0]);
        assert_eq!(encode_labels(4).unwrap().lambda, [1, 1, 1, 1]);
        assert!(encode_labels(5).is_err());
        for g in 0..=4 {
            let l = encode_labels(g).unwrap();
            assert_eq!(l.decode(), g);
            assert!(l.lambda.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = tiny_bundle();
        write_bundle(&b, dir.path()).unwrap();
        assert_eq!(read_bundle(dir.path()).unwrap(), b);
    }

    #[test]
    fn rejects_out_of_range_grade() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = tiny_bundle();
        b.grade = 5;
        let err = write_bundle(&b, dir.path()).unwrap_err();
        assert!(err.to_string().contains("grade"), "{err}");
    }

    #[test]
    fn rejects_lso_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = tiny_bundle();
        b.lso = Plane::zeros([3, 2]);
        let err = write_bundle(&b, dir.path()).unwrap_err();
        assert!(err.to_string().contains("lso"), "{err}");
    }

    #[test]
    fn truncated_array_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&tiny_bundle(), dir.path()).unwrap();
        let p = dir.path().join("flow.raw");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        match read_bundle(dir.path()).unwrap_err() {
            Error::Truncated { file, .. } => assert_eq!(file, "flow.raw"),
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&tiny_bundle(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("lso.raw")).unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn wrong_endianness_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&tiny_bundle(), dir.path()).unwrap();
        let p = dir.path().join("meta.json");
        let text = fs::read_to_string(&p).unwrap().replace("\"little\"", "\"big\"");
        fs::write(&p, text).unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn externally_written_bundle_without_checksums_is_accepted() {
        // 2x2x2 volume with a 32-byte flow array.
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let vol = to_le_bytes(std::iter::repeat(0.5f32).take(8));
        let plane = to_le_bytes(std::iter::repeat(0.25f32).take(4));
        assert_eq!(vol.len(), 32);
        fs::write(d.join("flow.raw"), &vol).unwrap();
        fs::write(d.join("structure.raw"), &vol).unwrap();
        fs::write(d.join("lso.raw"), &plane).unwrap();
        fs::write(d.join("ilm.raw"), to_le_bytes(std::iter::repeat(0.0f32).take(4))).unwrap();
        fs::write(d.join("chorio.raw"), to_le_bytes(std::iter::repeat(1.0f32).take(4))).unwrap();
        let meta = serde_json::json!({
            "format_version": FORMAT_VERSION,
            "id": "ext",
            "dims": [2, 2, 2],
            "channels": ["flow", "structure", "lso"],
            "dtype": "float32",
            "endianness": "little",
            "grade": 1,
            "vendor_note": "ignored",
            "arrays": {
                "flow": {"file": "flow.raw", "shape": [2, 2, 2]},
                "structure": {"file": "structure.raw", "shape": [2, 2, 2]},
                "lso": {"file": "lso.raw", "shape": [2, 2]},
                "ilm": {"file": "ilm.raw", "shape": [2, 2]},
                "chorio": {"file": "chorio.raw", "shape": [2, 2]}
            }
        });
        fs::write(d.join("meta.json"), meta.to_string()).unwrap();
        let b = read_bundle(d).unwrap();
        assert_eq!(b.flow.data, vec![0.5; 8]);
        assert_eq!(b.grade, 1);
    }

    #[test]
    fn editing_dims_is_rejected_even_with_equal_element_count() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = tiny_bundle();
        // (X, Y, Z) = (2, 3, 4) and (4, 3, 2) have equal volume sizes.
        let dims = [2, 3, 4];
        b.flow = Volume {
            dims,
            data: vec![0.5; 24],
        };
        b.structure = b.flow.clone();
        b.lso = Plane::zeros([2, 4]);
        b.ilm = SurfaceMap::constant([2, 4], 0);
        b.chorio = SurfaceMap::constant([2, 4], 1);
        write_bundle(&b, dir.path()).unwrap();
        let p = dir.path().join("meta.json");
        let mut meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        meta["dims"] = serde_json::json!([4, 3, 2]);
        fs::write(&p, meta.to_string()).unwrap();
        assert!(read_bundle(dir.path()).is_err());
    }
}
