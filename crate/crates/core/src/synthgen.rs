//! Synthetic OCTA phantoms with a recorded lesion ledger.
//!
//! Each phantom draws from three independent random streams (anatomy,
//! lesions, noise) so that lesion-free and noise-free renders of the same
//! seed share identical anatomy.
//!
//! Lesion geometry, with `e` the extent triple and `c` the center:
//!
//! * `flow_void`: every voxel with `(x - cx)^2 + (z - cz)^2 <= ex^2`, at any
//!   depth, has its flow set to zero.
//! * `cyst`: voxels inside the ellipsoid `sum_i (d_i / (e_i + 0.5))^2 <= 1`
//!   and inside the retina (`ilm <= y <= chorio`) have their structure
//!   intensity scaled by [`CYST_ATTENUATION`].
//! * `tuft`: voxels inside the same ellipsoid form, without the retina
//!   restriction, have their flow set to [`TUFT_FLOW`].

use std::f64::consts::PI;

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::octa_store::{OctaBundle, Plane, SurfaceMap, Volume, MAX_GRADE};

pub const CYST_ATTENUATION: f32 = 0.3;
pub const TUFT_FLOW: f32 = 0.95;
pub const MIN_DIMS: [usize; 3] = [16, 32, 16];
/// Fraction of the total assigned to train, validation and test.
pub const SPLIT_FRACTIONS: [f64; 3] = [0.70, 0.18, 0.12];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub seed: u64,
    pub grade: u8,
    pub noise_level: f64,
    pub n_layers: usize,
}

impl PhantomSpec {
    pub fn new(dims: [usize; 3], seed: u64, grade: u8) -> Self {
        PhantomSpec {
            dims,
            seed,
            grade,
            noise_level: 0.03,
            n_layers: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().zip(MIN_DIMS).any(|(&d, m)| d < m) {
            return Err(Error::Validation(format!(
                "phantom dims {:?} below minimum {MIN_DIMS:?}",
                self.dims
            )));
        }
        if self.grade > MAX_GRADE {
            return Err(Error::Validation(format!(
                "grade {} outside [0, {MAX_GRADE}]",
                self.grade
            )));
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return Err(Error::Validation(format!(
                "noise level {} must be finite and non-negative",
                self.noise_level
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Validation("n_layers must be at least 1".into()));
        }
        let g = Geometry::of(self.dims);
        if g.ilm_max + g.thickness >= self.dims[1] {
            return Err(Error::Validation(format!(
                "depth {} too small for retina ending at {}",
                self.dims[1],
                g.ilm_max + g.thickness
            )));
        }
        if g.thickness < self.n_layers {
            return Err(Error::Validation(format!(
                "retina thickness {} cannot hold {} layers",
                g.thickness, self.n_layers
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionKind {
    FlowVoid,
    Cyst,
    Tuft,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lesion {
    #[serde(rename = "type")]
    pub kind: LesionKind,
    pub center: [usize; 3],
    pub extent: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub bundle: OctaBundle,
    pub lesions: Vec<Lesion>,
}

/// Depth layout shared by every phantom of the given dimensions.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    ilm_min: usize,
    ilm_max: usize,
    thickness: usize,
}

impl Geometry {
    fn of(dims: [usize; 3]) -> Self {
        let y = dims[1] as f64;
        Geometry {
            ilm_min: (0.15 * y).round() as usize,
            ilm_max: (0.30 * y).round() as usize,
            thickness: ((0.35 * y).round() as usize).min(47),
        }
    }
}

/// Independent generator for one purpose, keyed by seed and label.
pub fn stream_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Stable 64-bit seed derived from a parent seed and an identifier.
pub fn derive_seed(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn smooth_field(dims: [usize; 2], rng: &mut impl Rng) -> Vec<f64> {
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.gen_range(0.3..1.2),
                rng.gen_range(0.3..1.2),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.5..1.0),
            ]
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w[3]).sum();
    let mut out = Vec::with_capacity(dims[0] * dims[1]);
    for x in 0..dims[0] {
        for z in 0..dims[1] {
            let (u, v) = (x as f64 / dims[0] as f64, z as f64 / dims[1] as f64);
            let s: f64 = waves
                .iter()
                .map(|w| w[3] * (2.0 * PI * (w[0] * u + w[1] * v) + w[2]).cos())
                .sum();
            out.push(0.5 + 0.5 * s / total);
        }
    }
    out
}

fn vessel_map(dims: [usize; 2], rng: &mut impl Rng) -> Vec<f32> {
    let [nx, nz] = dims;
    let mut map = vec![0.0f32; nx * nz];
    let span = nx.max(nz) as f64;
    // (x, z, heading, width, remaining steps)
    let mut stack: Vec<(f64, f64, f64, f64, usize)> = Vec::new();
    for _ in 0..5 {
        let (x, z) = match rng.gen_range(0..4) {
            0 => (0.0, rng.gen_range(0.0..nz as f64)),
            1 => (nx as f64 - 1.0, rng.gen_range(0.0..nz as f64)),
            2 => (rng.gen_range(0.0..nx as f64), 0.0),
            _ => (rng.gen_range(0.0..nx as f64), nz as f64 - 1.0),
        };
        let heading = (nz as f64 / 2.0 - z).atan2(nx as f64 / 2.0 - x) + rng.gen_range(-0.4..0.4);
        stack.push((x, z, heading, 1.6, (0.8 * span) as usize));
    }
    let bend = Normal::new(0.0, 0.15).expect("valid normal");
    while let Some((mut x, mut z, mut heading, width, steps)) = stack.pop() {
        for step in 0..steps {
            let reach = (2.0 * width).ceil() as isize;
            let (cx, cz) = (x.round() as isize, z.round() as isize);
            for ix in cx - reach..=cx + reach {
                for iz in cz - reach..=cz + reach {
                    if ix < 0 || iz < 0 || ix >= nx as isize || iz >= nz as isize {
                        continue;
                    }
                    let d2 = (ix as f64 - x).powi(2) + (iz as f64 - z).powi(2);
                    let v = (-d2 / (width * width)).exp() as f32;
                    let cell = &mut map[ix as usize * nz + iz as usize];
                    *cell = cell.max(v);
                }
            }
            heading += bend.sample(rng);
            x += heading.cos();
            z += heading.sin();
            if x < 0.0 || z < 0.0 || x >= nx as f64 || z >= nz as f64 {
                break;
            }
            if step % 12 == 11 && width > 0.8 && rng.gen_bool(0.35) {
                let turn = if rng.gen_bool(0.5) { 0.6 } else { -0.6 };
                stack.push((x, z, heading + turn, width * 0.7, (steps - step) * 6 / 10));
            }
        }
    }
    map
}

fn in_ellipsoid(d: [f64; 3], e: [usize; 3]) -> bool {
    d.iter()
        .zip(e)
        .map(|(di, ei)| (di / (ei as f64 + 0.5)).powi(2))
        .sum::<f64>()
        <= 1.0
}

struct Anatomy {
    ilm: SurfaceMap,
    chorio: SurfaceMap,
    flow: Volume,
    structure: Volume,
    lso_clean: Plane,
}

fn render_anatomy(spec: &PhantomSpec) -> Anatomy {
    let [nx, ny, nz] = spec.dims;
    let g = Geometry::of(spec.dims);
    let mut rng = stream_rng(spec.seed, "anatomy");
    let field = smooth_field([nx, nz], &mut rng);
    let ilm_depths: Vec<usize> = field
        .iter()
        .map(|f| (g.ilm_min as f64 + f * (g.ilm_max - g.ilm_min) as f64).round() as usize)
        .collect();
    let chorio_depths: Vec<usize> = ilm_depths.iter().map(|d| d + g.thickness).collect();
    let vessels = vessel_map([nx, nz], &mut rng);

    let levels: Vec<f32> = (0..spec.n_layers)
        .map(|l| {
            let k = (l * 3 % spec.n_layers) as f32;
            0.4 + 0.45 * k / (spec.n_layers.max(2) - 1) as f32
        })
        .collect();

    let mut flow = Volume::zeros(spec.dims);
    let mut structure = Volume::zeros(spec.dims);
    for x in 0..nx {
        for z in 0..nz {
            let top = ilm_depths[x * nz + z];
            let bottom = chorio_depths[x * nz + z];
            let v = vessels[x * nz + z];
            for y in 0..ny {
                let (f, s) = if y < top {
                    (
                        0.01 + 0.03 * rng.gen::<f32>(),
                        0.02 + 0.06 * rng.gen::<f32>(),
                    )
                } else if y <= bottom {
                    let r = (y - top) as f64 / g.thickness as f64;
                    let profile = (-((r - 0.25) / 0.12).powi(2))
                        .exp()
                        .max(0.7 * (-((r - 0.65) / 0.1).powi(2)).exp());
                    let band = ((r * spec.n_layers as f64) as usize).min(spec.n_layers - 1);
                    (
                        0.12 + 0.75 * v * profile as f32 + 0.02 * rng.gen::<f32>(),
                        levels[band] + 0.08 * (rng.gen::<f32>() - 0.5),
                    )
                } else {
                    (
                        0.01 + 0.03 * rng.gen::<f32>(),
                        0.25 + 0.2 * rng.gen::<f32>(),
                    )
                };
                flow.set(x, y, z, f);
                structure.set(x, y, z, s);
            }
        }
    }

    let mut mean = Plane::zeros([nx, nz]);
    for x in 0..nx {
        for z in 0..nz {
            let s: f32 = (0..ny).map(|y| structure.get(x, y, z)).sum();
            mean.set(x, z, s / ny as f32);
        }
    }
    let mut lso_clean = Plane::zeros([nx, nz]);
    for x in 0..nx {
        for z in 0..nz {
            let mut acc = 0.0;
            let mut n = 0.0;
            for ix in x.saturating_sub(1)..(x + 2).min(nx) {
                for iz in z.saturating_sub(1)..(z + 2).min(nz) {
                    acc += mean.get(ix, iz);
                    n += 1.0;
                }
            }
            lso_clean.set(x, z, acc / n);
        }
    }

    Anatomy {
        ilm: SurfaceMap {
            dims: [nx, nz],
            depths: ilm_depths,
        },
        chorio: SurfaceMap {
            dims: [nx, nz],
            depths: chorio_depths,
        },
        flow,
        structure,
        lso_clean,
    }
}

/// Draws the lesion ledger for a grade; the geometry of the four flow voids
/// is drawn regardless of grade so that lower grades are nested subsets.
fn draw_lesions(spec: &PhantomSpec, ilm: &SurfaceMap) -> Vec<Lesion> {
    let [nx, ny, nz] = spec.dims;
    let g = Geometry::of(spec.dims);
    let mut rng = stream_rng(spec.seed, "lesions");
    let base_radius = ((0.06 * nx.min(nz) as f64).round() as usize).max(2);
    let frac = |rng: &mut ChaCha8Rng, lo: f64, hi: f64, n: usize| -> usize {
        ((rng.gen_range(lo..hi) * n as f64) as usize).min(n - 1)
    };
    let voids: Vec<[usize; 2]> = (0..4)
        .map(|_| [frac(&mut rng, 0.25, 0.75, nx), frac(&mut rng, 0.25, 0.75, nz)])
        .collect();
    let cyst_center = [frac(&mut rng, 0.3, 0.7, nx), frac(&mut rng, 0.15, 0.85, nz)];
    let tuft_side = rng.gen_bool(0.5);
    let tuft_x = if tuft_side {
        frac(&mut rng, 0.06, 0.14, nx)
    } else {
        frac(&mut rng, 0.86, 0.94, nx)
    };
    let tuft_z = frac(&mut rng, 0.2, 0.8, nz);

    let mut lesions = Vec::new();
    let radius = if spec.grade >= 3 {
        2 * base_radius
    } else {
        base_radius
    };
    for c in voids.iter().take(spec.grade as usize) {
        lesions.push(Lesion {
            kind: LesionKind::FlowVoid,
            center: [c[0], ny / 2, c[1]],
            extent: [radius, ny.div_ceil(2), radius],
        });
    }
    if spec.grade >= 2 {
        let [cx, cz] = cyst_center;
        // Odd z-extent strictly below a tenth of Z.
        let ez = (((0.1 * nz as f64 - 1.0) / 2.0).ceil() as usize).saturating_sub(1);
        lesions.push(Lesion {
            kind: LesionKind::Cyst,
            center: [cx, ilm.at(cx, cz) + g.thickness / 2, cz],
            extent: [
                ((0.15 * nx as f64).round() as usize).max(2),
                ((0.1 * ny as f64).round() as usize).max(2),
                ez,
            ],
        });
    }
    if spec.grade >= 4 {
        lesions.push(Lesion {
            kind: LesionKind::Tuft,
            center: [tuft_x, ilm.at(tuft_x, tuft_z), tuft_z],
            extent: [
                ((0.05 * nx as f64).round() as usize).max(2),
                3,
                ((0.05 * nz as f64).round() as usize).max(2),
            ],
        });
    }
    lesions
}

fn apply_lesions(a: &mut Anatomy, lesions: &[Lesion]) {
    let [nx, ny, nz] = a.flow.dims;
    // Voids last so that a tuft never masks zeroed flow.
    let ordered = lesions
        .iter()
        .filter(|l| l.kind != LesionKind::FlowVoid)
        .chain(lesions.iter().filter(|l| l.kind == LesionKind::FlowVoid));
    for l in ordered {
        let [cx, cy, cz] = l.center.map(|v| v as f64);
        match l.kind {
            LesionKind::FlowVoid => {
                let r2 = (l.extent[0] * l.extent[0]) as f64;
                for x in 0..nx {
                    for z in 0..nz {
                        if (x as f64 - cx).powi(2) + (z as f64 - cz).powi(2) <= r2 {
                            for y in 0..ny {
                                a.flow.set(x, y, z, 0.0);
                            }
                        }
                    }
                }
            }
            LesionKind::Cyst | LesionKind::Tuft => {
                for x in 0..nx {
                    for z in 0..nz {
                        for y in 0..ny {
                            let d = [x as f64 - cx, y as f64 - cy, z as f64 - cz];
                            if !in_ellipsoid(d, l.extent) {
                                continue;
                            }
                            if l.kind == LesionKind::Tuft {
                                a.flow.set(x, y, z, TUFT_FLOW);
                            } else if a.ilm.at(x, z) <= y && y <= a.chorio.at(x, z) {
                                let s = a.structure.get(x, y, z);
                                a.structure.set(x, y, z, s * CYST_ATTENUATION);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Renders a phantom with lesions and noise optionally disabled. The
/// lesion ledger is returned in both cases.
pub fn render(spec: &PhantomSpec, with_lesions: bool, with_noise: bool) -> Result<Phantom> {
    spec.validate()?;
    let mut a = render_anatomy(spec);
    let lesions = draw_lesions(spec, &a.ilm);
    if with_lesions {
        apply_lesions(&mut a, &lesions);
    }
    let mut lso = a.lso_clean.clone();
    if with_noise && spec.noise_level > 0.0 {
        let mut rng = stream_rng(spec.seed, "noise");
        let normal = Normal::new(0.0, spec.noise_level).expect("valid sigma");
        let mut perturb = |v: &mut f32| {
            *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        };
        a.flow.data.iter_mut().for_each(&mut perturb);
        a.structure.data.iter_mut().for_each(&mut perturb);
        lso.data.iter_mut().for_each(&mut perturb);
    }
    let bundle = OctaBundle {
        id: format!("phantom-{:016x}", spec.seed),
        grade: spec.grade,
        flow: a.flow,
        structure: a.structure,
        lso,
        ilm: a.ilm,
        chorio: a.chorio,
        spacing_mm: [
            6.0 / spec.dims[0] as f64,
            2.0 / spec.dims[1] as f64,
            6.0 / spec.dims[2] as f64,
        ],
    };
    bundle.validate()?;
    Ok(Phantom { bundle, lesions })
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    render(spec, true, true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Validation(format!("unknown split '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub grade: u8,
    pub split: Split,
    pub lesions: Vec<Lesion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_per_grade: usize,
    pub dims: [usize; 3],
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise_level: f64,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
}

fn default_noise() -> f64 {
    0.03
}

fn default_layers() -> usize {
    4
}

impl DatasetSpec {
    pub fn new(n_per_grade: usize, dims: [usize; 3], seed: u64) -> Self {
        DatasetSpec {
            n_per_grade,
            dims,
            seed,
            noise_level: default_noise(),
            n_layers: default_layers(),
        }
    }
}

/// One planned bundle: identity, phantom parameters and split.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedBundle {
    pub id: String,
    pub split: Split,
    pub spec: PhantomSpec,
}

/// Split sizes by largest remainder on the total: floors first, leftover
/// units to the largest fractional parts, lower index on ties.
pub fn split_sizes(total: usize) -> [usize; 3] {
    let quotas = SPLIT_FRACTIONS.map(|f| f * total as f64);
    let mut sizes = quotas.map(|q| q.floor() as usize);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    let left = total - sizes.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        sizes[i] += 1;
    }
    sizes
}

/// Ids, phantom specs and splits for a dataset, without rendering anything.
///
/// Bundles are shuffled within each grade, interleaved across grades, and
/// each is assigned to the split with the largest remaining deficit against
/// its proportional share, which keeps every prefix close to stratified
/// while hitting the totals of [`split_sizes`] exactly.
pub fn plan_dataset(spec: &DatasetSpec) -> Result<Vec<PlannedBundle>> {
    if spec.n_per_grade == 0 {
        return Err(Error::Validation("n_per_grade must be at least 1".into()));
    }
    let total = 5 * spec.n_per_grade;
    let sizes = split_sizes(total);
    let mut rng = stream_rng(spec.seed, "split");
    let mut per_grade: Vec<Vec<usize>> = (0..5)
        .map(|_| {
            let mut idx: Vec<usize> = (0..spec.n_per_grade).collect();
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
            idx
        })
        .collect();
    let mut assigned = [0usize; 3];
    let mut plan = Vec::with_capacity(total);
    for round in 0..spec.n_per_grade {
        for (grade, order) in per_grade.iter_mut().enumerate() {
            let i = order[round];
            let step = plan.len() + 1;
            let split = (0..3)
                .filter(|&s| assigned[s] < sizes[s])
                .max_by(|&a, &b| {
                    let da = sizes[a] as f64 * step as f64 / total as f64 - assigned[a] as f64;
                    let db = sizes[b] as f64 * step as f64 / total as f64 - assigned[b] as f64;
                    da.partial_cmp(&db).expect("finite").then(b.cmp(&a))
                })
                .expect("capacity remains");
            assigned[split] += 1;
            let id = format!("g{grade}-{i:04}");
            let phantom = PhantomSpec {
                dims: spec.dims,
                seed: derive_seed(spec.seed, &id),
                grade: grade as u8,
                noise_level: spec.noise_level,
                n_layers: spec.n_layers,
            };
            phantom.validate()?;
            plan.push(PlannedBundle {
                id,
                split: Split::ALL[split],
                spec: phantom,
            });
        }
    }
    Ok(plan)
}

/// Renders one planned bundle and its manifest entry.
pub fn render_planned(p: &PlannedBundle) -> Result<(OctaBundle, ManifestEntry)> {
    let phantom = generate_phantom(&p.spec)?;
    let mut bundle = phantom.bundle;
    bundle.id = p.id.clone();
    let entry = ManifestEntry {
        id: p.id.clone(),
        grade: p.spec.grade,
        split: p.split,
        lesions: phantom.lesions,
    };
    Ok((bundle, entry))
}

/// Generates all `5 * n_per_grade` bundles in memory.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<(Vec<OctaBundle>, Vec<ManifestEntry>)> {
    let mut bundles = Vec::new();
    let mut manifest = Vec::new();
    for p in plan_dataset(spec)? {
        let (b, e) = render_planned(&p)?;
        bundles.push(b);
        manifest.push(e);
    }
    Ok((bundles, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_follow_largest_remainder() {
        assert_eq!(split_sizes(50), [35, 9, 6]);
        assert_eq!(split_sizes(200), [140, 36, 24]);
        assert_eq!(split_sizes(5), [3, 1, 1]);
        for n in 1..300 {
            assert_eq!(split_sizes(n).iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn rejects_too_shallow_volume() {
        let mut s = PhantomSpec::new([16, 32, 16], 1, 0);
        assert!(s.validate().is_ok());
        s.dims = [16, 20, 16];
        assert!(s.validate().is_err());
        s.dims = [16, 32, 16];
        s.grade = 5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn grade_zero_has_no_voids() {
        let p = render(&PhantomSpec::new([24, 40, 24], 3, 0), true, false).unwrap();
        assert!(p.lesions.is_empty());
        let b = &p.bundle;
        let [nx, _, nz] = b.dims();
        for x in 0..nx {
            for z in 0..nz {
                for y in b.ilm.at(x, z)..=b.chorio.at(x, z) {
                    assert!(b.flow.get(x, y, z) > 0.0);
                }
            }
        }
    }

    #[test]
    fn lesion_counts_follow_grade() {
        for grade in 0..=4u8 {
            let p = render(&PhantomSpec::new([32, 48, 32], 11, grade), true, true).unwrap();
            let count = |k| p.lesions.iter().filter(|l| l.kind == k).count();
            assert_eq!(count(LesionKind::FlowVoid), grade as usize);
            assert_eq!(count(LesionKind::Cyst), usize::from(grade >= 2));
            assert_eq!(count(LesionKind::Tuft), usize::from(grade == 4));
        }
    }
}
