//! Synthetic head phantoms with bilateral structure pairs.
//!
//! Left and right members of a pair share shape family, size and intensity
//! statistics and are mirrored across the mid-sagittal plane (the last image
//! axis), so only their position tells them apart.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;
use crate::volume::LabeledVolume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Laterality {
    Left,
    Right,
    Midline,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ShapeFamily {
    Sphere,
    /// Axis-aligned; semi-axes are `radius * semi_axes`.
    Ellipsoid { semi_axes: [f64; 3] },
    /// Capsule around the segment `center ± half_axis`.
    Tube { half_axis: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StructureSpec {
    pub name: String,
    pub laterality: Laterality,
    pub shape: ShapeFamily,
    /// Voxel coordinates `(d, h, w)`.
    pub center: [f64; 3],
    /// Radius is drawn uniformly from `[min, max]` voxels.
    pub radius_range: [f64; 2],
    pub intensity_mean: f64,
    pub intensity_sd: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    pub background_mean: f64,
    pub noise_sd: f64,
    /// Maximum integer offset per axis applied independently to each structure.
    pub jitter: usize,
    pub structures: Vec<StructureSpec>,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

fn default_attempts() -> usize {
    200
}

fn mirror_center(c: [f64; 3], width: usize) -> [f64; 3] {
    [c[0], c[1], (width as f64 - 1.0) - c[2]]
}

fn mirror_shape(s: &ShapeFamily) -> ShapeFamily {
    match *s {
        ShapeFamily::Tube { half_axis: [a, b, c] } => ShapeFamily::Tube { half_axis: [a, b, -c] },
        ref other => other.clone(),
    }
}

impl PhantomSpec {
    /// The default 32³ desk phantom.
    pub fn desk() -> Self {
        Self::desk_with_dim(32)
    }

    /// Five classes (left/right eye spheres, left/right nerve tubes, a midline
    /// brain stem tube) laid out on an `n³` grid; geometry scales with `n / 32`.
    pub fn desk_with_dim(n: usize) -> Self {
        let s = n as f64 / 32.0;
        let at = |c: [f64; 3]| c.map(|v| (v + 0.5) * s - 0.5);
        let r = |lo: f64, hi: f64, floor: f64| [(lo * s).max(floor), (hi * s).max(floor)];
        let pair = |name: &str, shape: ShapeFamily, center: [f64; 3], radius_range: [f64; 2], mean: f64| {
            let left = StructureSpec {
                name: format!("left_{name}"),
                laterality: Laterality::Left,
                shape: shape.clone(),
                center,
                radius_range,
                intensity_mean: mean,
                intensity_sd: 0.05,
            };
            let right = StructureSpec {
                name: format!("right_{name}"),
                laterality: Laterality::Right,
                shape: mirror_shape(&shape),
                center: mirror_center(center, n),
                radius_range,
                intensity_mean: mean,
                intensity_sd: 0.05,
            };
            [left, right]
        };
        let [le, re] = pair("eye", ShapeFamily::Sphere, at([16.0, 7.5, 7.5]), r(3.25, 4.0, 1.0), 1.0);
        let nerve = ShapeFamily::Tube { half_axis: [0.0, 3.0 * s, 2.0 * s] };
        let [ln, rn] = pair("nerve", nerve, at([16.0, 16.0, 11.5]), r(1.3, 1.7, 1.0), 0.6);
        let stem = StructureSpec {
            name: "brain_stem".into(),
            laterality: Laterality::Midline,
            shape: ShapeFamily::Tube { half_axis: [8.0 * s, 0.0, 0.0] },
            center: at([16.0, 25.0, 15.5]),
            radius_range: r(3.0, 3.5, 1.0),
            intensity_mean: 0.8,
            intensity_sd: 0.05,
        };
        PhantomSpec {
            dims: [n; 3],
            spacing: unit_spacing(),
            background_mean: 0.0,
            noise_sd: 0.1,
            jitter: if n >= 24 { 1 } else { 0 },
            structures: vec![le, re, ln, rn, stem],
            max_attempts: default_attempts(),
        }
    }

    pub fn roster(&self) -> Vec<String> {
        self.structures.iter().map(|s| s.name.clone()).collect()
    }

    /// Index pairs `(left, right)` of mirrored structures.
    pub fn bilateral_pairs(&self) -> Vec<(usize, usize)> {
        let w = self.dims[2];
        let mut out = Vec::new();
        for (i, l) in self.structures.iter().enumerate() {
            if l.laterality != Laterality::Left {
                continue;
            }
            if let Some(j) = self.structures.iter().position(|r| {
                r.laterality == Laterality::Right
                    && r.shape == mirror_shape(&l.shape)
                    && r.radius_range == l.radius_range
                    && r.intensity_mean == l.intensity_mean
                    && r.intensity_sd == l.intensity_sd
                    && r.center.iter().zip(mirror_center(l.center, w)).all(|(a, b)| (a - b).abs() < 1e-9)
            }) {
                out.push((i, j));
            }
        }
        out
    }

    pub fn midline_classes(&self) -> Vec<usize> {
        (0..self.structures.len()).filter(|&i| self.structures[i].laterality == Laterality::Midline).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dims.contains(&0) {
            return bad(format!("dims must be positive: {:?}", self.dims));
        }
        if self.structures.is_empty() {
            return bad("phantom needs at least one structure".into());
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) || !self.background_mean.is_finite() {
            return bad("noise_sd must be finite and non-negative".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        for (i, s) in self.structures.iter().enumerate() {
            let [lo, hi] = s.radius_range;
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{}: radius range {:?} invalid", s.name, s.radius_range));
            }
            if !(s.intensity_sd >= 0.0 && s.intensity_sd.is_finite() && s.intensity_mean.is_finite()) {
                return bad(format!("{}: invalid intensity statistics", s.name));
            }
            if s.intensity_mean == self.background_mean {
                return bad(format!("{}: intensity must differ from background", s.name));
            }
            if self.structures[..i].iter().any(|o| o.name == s.name) {
                return bad(format!("duplicate structure name {}", s.name));
            }
        }
        let pairs = self.bilateral_pairs();
        let lefts = self.structures.iter().filter(|s| s.laterality == Laterality::Left).count();
        let rights = self.structures.iter().filter(|s| s.laterality == Laterality::Right).count();
        let mut used: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        used.sort_unstable();
        used.dedup();
        if pairs.len() != lefts || rights != lefts || used.len() != rights {
            return bad("every left structure needs a mirrored right twin with equal shape, size and intensity".into());
        }
        Ok(())
    }
}

fn extent(shape: &ShapeFamily, r: f64) -> [f64; 3] {
    match shape {
        ShapeFamily::Sphere => [r; 3],
        ShapeFamily::Ellipsoid { semi_axes } => semi_axes.map(|a| a.abs() * r),
        ShapeFamily::Tube { half_axis } => half_axis.map(|a| a.abs() + r),
    }
}

fn inside(shape: &ShapeFamily, c: [f64; 3], r: f64, p: [f64; 3]) -> bool {
    let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
    match shape {
        ShapeFamily::Sphere => d.iter().map(|v| v * v).sum::<f64>() <= r * r,
        ShapeFamily::Ellipsoid { semi_axes } => {
            d.iter().zip(semi_axes).map(|(v, a)| (v / (a * r)) * (v / (a * r))).sum::<f64>() <= 1.0
        }
        ShapeFamily::Tube { half_axis } => {
            // distance from p to segment c ± half_axis
            let a = [c[0] - half_axis[0], c[1] - half_axis[1], c[2] - half_axis[2]];
            let ab = half_axis.map(|v| 2.0 * v);
            let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
            let len2: f64 = ab.iter().map(|v| v * v).sum();
            let t = if len2 > 0.0 { (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0) } else { 0.0 };
            (0..3).map(|i| ap[i] - t * ab[i]).map(|v| v * v).sum::<f64>() <= r * r
        }
    }
}

/// Generates one labeled phantom volume; deterministic in `(spec, seed)`.
pub fn generate_phantom(spec: &PhantomSpec, id: &str, seed: u64) -> Result<LabeledVolume> {
    spec.validate()?;
    let [dd, hh, ww] = spec.dims;
    let vox = dd * hh * ww;
    let n = spec.structures.len();
    let pairs = spec.bilateral_pairs();
    let mut rng = rng_from_seed(seed);
    let mut last_reason = String::new();

    for _ in 0..spec.max_attempts {
        let mut radii: Vec<f64> = spec
            .structures
            .iter()
            .map(|s| {
                let [lo, hi] = s.radius_range;
                if hi > lo { rng.random_range(lo..=hi) } else { lo }
            })
            .collect();
        for &(l, r) in &pairs {
            radii[r] = radii[l];
        }
        let j = spec.jitter as i64;
        let offsets: Vec<[f64; 3]> = (0..n)
            .map(|_| core::array::from_fn(|_| if j > 0 { rng.random_range(-j..=j) as f64 } else { 0.0 }))
            .collect();

        let mut owner = vec![0u8; vox];
        let mut ok = true;
        'structures: for (si, s) in spec.structures.iter().enumerate() {
            let c: [f64; 3] = core::array::from_fn(|a| s.center[a] + offsets[si][a]);
            let ext = extent(&s.shape, radii[si]);
            for a in 0..3 {
                if c[a] - ext[a] < 0.0 || c[a] + ext[a] > (spec.dims[a] - 1) as f64 {
                    last_reason = format!("{} leaves the volume along axis {a}", s.name);
                    ok = false;
                    break 'structures;
                }
            }
            let lo: [usize; 3] = core::array::from_fn(|a| libm::floor(c[a] - ext[a]) as usize);
            let hi: [usize; 3] = core::array::from_fn(|a| libm::ceil(c[a] + ext[a]) as usize);
            let mut count = 0usize;
            for z in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for x in lo[2]..=hi[2] {
                        if !inside(&s.shape, c, radii[si], [z as f64, y as f64, x as f64]) {
                            continue;
                        }
                        let o = &mut owner[(z * hh + y) * ww + x];
                        if *o != 0 {
                            last_reason = format!("{} overlaps {}", s.name, spec.structures[*o as usize - 1].name);
                            ok = false;
                            break 'structures;
                        }
                        *o = si as u8 + 1;
                        count += 1;
                    }
                }
            }
            if count == 0 {
                last_reason = format!("{} rasterizes to no voxels", s.name);
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }

        let mut image = Vec::with_capacity(vox);
        for &o in &owner {
            let z: f64 = StandardNormal.sample(&mut rng);
            let mut v = spec.background_mean + spec.noise_sd * z;
            if o != 0 {
                let s = &spec.structures[o as usize - 1];
                let zs: f64 = StandardNormal.sample(&mut rng);
                v += s.intensity_mean - spec.background_mean + s.intensity_sd * zs;
            }
            image.push(v);
        }
        let masks = (0..n)
            .map(|si| Some(Tensor::from_fn(&[dd, hh, ww], |i| (owner[i] as usize == si + 1) as u8 as f64)))
            .collect();
        return Ok(LabeledVolume {
            id: id.into(),
            roster: spec.roster(),
            image: Tensor::new(vec![1, dd, hh, ww], image)?,
            masks,
            spacing: spec.spacing,
        });
    }
    Err(Error::Placement { attempts: spec.max_attempts, reason: last_reason })
}

/// Mirrors an `[.., D, H, W]` tensor across the last axis.
pub fn mirror_last_axis(t: &Tensor) -> Tensor {
    let w = *t.shape().last().expect("non-scalar");
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}
