use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ImageRecord, Platform};
use super::splitmix64;
use crate::attributes::{AttributeSchema, AttributeTable};
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// Vertical body regions, as fractions of the image height.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BodyBand {
    Head,
    Torso,
    Legs,
    Feet,
}

impl BodyBand {
    pub const ALL: [BodyBand; 4] = [BodyBand::Head, BodyBand::Torso, BodyBand::Legs, BodyBand::Feet];

    pub fn fraction(self) -> (f64, f64) {
        match self {
            BodyBand::Head => (0.0, 0.2),
            BodyBand::Torso => (0.2, 0.55),
            BodyBand::Legs => (0.55, 0.88),
            BodyBand::Feet => (0.88, 1.0),
        }
    }

    /// Row range `[start, end)` for an image of height `h`.
    pub fn rows(self, h: usize) -> (usize, usize) {
        let (a, b) = self.fraction();
        ((a * h as f64).round() as usize, (b * h as f64).round() as usize)
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Degradation applied to aerial views. The figure is squashed towards the
/// bottom edge, then blurred by an area downscale and nearest upsample and
/// finally brightened.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AerialTransform {
    pub downscale: f64,
    pub squash: f64,
    pub brightness: f64,
}

impl Default for AerialTransform {
    fn default() -> Self {
        AerialTransform {
            downscale: 0.5,
            squash: 0.85,
            brightness: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub identities: usize,
    pub images_per_platform: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub max_shift: usize,
    pub aerial: AerialTransform,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            identities: 64,
            images_per_platform: 4,
            height: 64,
            width: 32,
            noise: 0.02,
            max_shift: 1,
            aerial: AerialTransform::default(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Row range occupied by `band` in a rendered view from `platform`.
    pub fn band_rows(&self, band: BodyBand, platform: Platform) -> (usize, usize) {
        let h = self.height;
        let (r0, r1) = band.rows(h);
        match platform {
            Platform::Ground => (r0, r1),
            Platform::Aerial => {
                let sq = self.aerial.squash;
                let off = h - ((h as f64 * sq).round() as usize).clamp(1, h);
                let at = |r: usize| (off + (r as f64 * sq).ceil() as usize).min(h);
                (at(r0), at(r1))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::InvalidParam(format!("need at least 2 identities, got {}", self.identities)));
        }
        if self.images_per_platform == 0 {
            return Err(Error::InvalidParam("images_per_platform must be positive".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::InvalidParam("image must be at least 8x8".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidParam(format!("noise must be >= 0, got {}", self.noise)));
        }
        let a = &self.aerial;
        if !(a.downscale > 0.0 && a.downscale <= 1.0) || !(a.squash > 0.0 && a.squash <= 1.0) {
            return Err(Error::InvalidParam("aerial downscale and squash must lie in (0, 1]".into()));
        }
        if !a.brightness.is_finite() {
            return Err(Error::InvalidParam("aerial brightness must be finite".into()));
        }
        Ok(())
    }
}

const PALETTE: [[f64; 3]; 12] = [
    [0.85, 0.10, 0.10],
    [0.10, 0.70, 0.20],
    [0.10, 0.20, 0.85],
    [0.90, 0.85, 0.10],
    [0.80, 0.10, 0.80],
    [0.10, 0.80, 0.80],
    [0.95, 0.55, 0.10],
    [0.45, 0.10, 0.60],
    [0.95, 0.95, 0.95],
    [0.05, 0.05, 0.05],
    [0.50, 0.30, 0.10],
    [0.95, 0.60, 0.70],
];
const BACKGROUND: f64 = 0.45;
const PLAIN_FILL: [f64; 3] = [0.6, 0.6, 0.6];

fn category_color(category: usize, attribute: usize) -> [f64; 3] {
    let base = PALETTE[(category * 5 + attribute * 3) % PALETTE.len()];
    let shade = 1.0 - 0.25 * ((category / PALETTE.len()) % 3) as f64;
    base.map(|c| c * shade)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    Fill,
    Patch,
}

fn default_role(name: &str) -> Option<(BodyBand, Role)> {
    use BodyBand::*;
    Some(match name {
        "hair_color" => (Head, Role::Fill),
        "upper_color" => (Torso, Role::Fill),
        "lower_color" => (Legs, Role::Fill),
        "shoe_color" => (Feet, Role::Fill),
        "age_group" | "hair_style" | "headwear" => (Head, Role::Patch),
        "gender" | "build" | "upper_type" | "bag" | "accessory" => (Torso, Role::Patch),
        "height" | "lower_type" => (Legs, Role::Patch),
        "shoe_type" => (Feet, Role::Patch),
        _ => return None,
    })
}

/// Band and role of every attribute. Unrecognised names become patches
/// assigned round-robin starting at the torso.
fn layout(schema: &AttributeSchema) -> Vec<(BodyBand, Role)> {
    let mut next = 1;
    let mut fills = [false; 4];
    schema
        .attributes()
        .iter()
        .map(|a| match default_role(&a.name) {
            Some((b, Role::Fill)) if !fills[b.index()] => {
                fills[b.index()] = true;
                (b, Role::Fill)
            }
            Some((b, _)) => (b, Role::Patch),
            None => {
                let b = BodyBand::ALL[next % 4];
                next += 1;
                (b, Role::Patch)
            }
        })
        .collect()
}

/// Renders one identity view as a `[3,H,W]` tensor in [0,1]. Every
/// attribute changes pixels only inside its own body band; the per-image
/// seed drives horizontal jitter and sensor noise.
pub fn render_person(
    schema: &AttributeSchema,
    raw: &[usize],
    platform: Platform,
    image_seed: u64,
    spec: &SyntheticSpec,
) -> Result<Tensor> {
    spec.validate()?;
    schema.encode(raw)?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed);
    let span = 2 * spec.max_shift as i64 + 1;
    let shift = rng.gen_range(0..span) - spec.max_shift as i64;
    let body = (w / 4) as i64 + shift;
    let (c0, c1) = (body.max(0) as usize, ((body + (w / 2) as i64).max(0) as usize).min(w));

    let mut img = vec![[BACKGROUND; 3]; h * w];
    let roles = layout(schema);
    for band in BodyBand::ALL {
        let (r0, r1) = band.rows(h);
        if r1 <= r0 || c1 <= c0 {
            continue;
        }
        let fill = roles
            .iter()
            .position(|&(b, r)| b == band && r == Role::Fill)
            .map(|a| category_color(raw[a], a))
            .unwrap_or(PLAIN_FILL);
        for y in r0..r1 {
            for x in c0..c1 {
                img[y * w + x] = fill;
            }
        }
        let patches: Vec<usize> = (0..roles.len())
            .filter(|&a| roles[a] == (band, Role::Patch))
            .collect();
        if patches.is_empty() {
            continue;
        }
        let rows = (((r1 - r0) as f64) * 0.3).ceil() as usize;
        let width = c1 - c0;
        for (j, &a) in patches.iter().enumerate() {
            let color = category_color(raw[a], a);
            let x0 = c0 + j * width / patches.len();
            let x1 = c0 + (j + 1) * width / patches.len();
            for y in (r1 - rows.min(r1 - r0))..r1 {
                for x in x0..x1 {
                    img[y * w + x] = color;
                }
            }
        }
    }

    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in img.iter().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c];
        }
    }
    if platform == Platform::Aerial {
        data = aerial_view(&data, h, w, &spec.aerial);
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidParam(e.to_string()))?;
        for v in &mut data {
            *v += normal.sample(&mut rng);
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, h, w], data)
}

fn aerial_view(src: &[f64], h: usize, w: usize, t: &AerialTransform) -> Vec<f64> {
    let hs = ((h as f64 * t.squash).round() as usize).clamp(1, h);
    let mut squashed = vec![BACKGROUND; 3 * h * w];
    for c in 0..3 {
        for y in (h - hs)..h {
            let sy = (((y - (h - hs)) as f64 / t.squash) as usize).min(h - 1);
            for x in 0..w {
                squashed[(c * h + y) * w + x] = src[(c * h + sy) * w + x];
            }
        }
    }
    let sh = ((h as f64 * t.downscale).round() as usize).clamp(1, h);
    let sw = ((w as f64 * t.downscale).round() as usize).clamp(1, w);
    let mut small = vec![0.0; 3 * sh * sw];
    for c in 0..3 {
        for i in 0..sh {
            let (y0, y1) = (i * h / sh, ((i + 1) * h / sh).max(i * h / sh + 1));
            for j in 0..sw {
                let (x0, x1) = (j * w / sw, ((j + 1) * w / sw).max(j * w / sw + 1));
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += squashed[(c * h + y) * w + x];
                    }
                }
                small[(c * sh + i) * sw + j] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            let i = y * sh / h;
            for x in 0..w {
                let j = x * sw / w;
                out[(c * h + y) * w + x] = small[(c * sh + i) * sw + j] + t.brightness;
            }
        }
    }
    out
}

/// A generated corpus held in memory. `images[i]` belongs to
/// `manifest.records[i]`.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub manifest: DatasetManifest,
    pub images: Vec<Tensor>,
}

pub const AERIAL_CAMERA: u32 = 0;
pub const GROUND_CAMERA: u32 = 1;

fn image_seed(master: u64, person_id: u32, platform: Platform, index: usize) -> u64 {
    let p = matches!(platform, Platform::Ground) as u64;
    splitmix64(master ^ splitmix64(((person_id as u64) << 24) | (p << 20) | index as u64))
}

/// Draws distinct attribute combinations for every identity and renders
/// `images_per_platform` views per platform. Output depends only on the
/// spec and schema.
pub fn generate_synthetic(spec: &SyntheticSpec, schema: &AttributeSchema) -> Result<SyntheticDataset> {
    spec.validate()?;
    let combos: f64 = schema.attributes().iter().map(|a| a.cardinality as f64).product();
    if combos < spec.identities as f64 {
        return Err(Error::InvalidParam(format!(
            "schema admits only {combos} distinct identities"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ 0xa77e_1b00_7e5e_ed00));
    let mut seen = HashSet::new();
    let mut table = AttributeTable::default();
    for i in 0..spec.identities {
        let raw = loop {
            let raw: Vec<usize> = schema
                .attributes()
                .iter()
                .map(|a| rng.gen_range(0..a.cardinality))
                .collect();
            if seen.insert(raw.clone()) {
                break raw;
            }
        };
        table.rows.insert(i as u32 + 1, raw);
    }

    let mut records = Vec::new();
    for pid in 1..=spec.identities as u32 {
        for platform in [Platform::Aerial, Platform::Ground] {
            for k in 0..spec.images_per_platform {
                let tag = if platform == Platform::Aerial { 'a' } else { 'g' };
                records.push(ImageRecord {
                    image_path: format!("images/p{pid:04}_{tag}_{k:03}.atrt"),
                    person_id: pid,
                    platform,
                    camera_id: if platform == Platform::Aerial { AERIAL_CAMERA } else { GROUND_CAMERA },
                    frame_index: (k * 30) as u32,
                    label: 0,
                });
            }
        }
    }
    let images = exec::try_map(&records, |r| {
        let k = r.frame_index as usize / 30;
        render_person(
            schema,
            table.get(r.person_id).expect("drawn above"),
            r.platform,
            image_seed(spec.seed, r.person_id, r.platform, k),
            spec,
        )
    })?;
    let manifest = DatasetManifest::new(PathBuf::new(), schema.clone(), records, table, BTreeSet::new())?;
    Ok(SyntheticDataset {
        spec: spec.clone(),
        manifest,
        images,
    })
}

impl SyntheticDataset {
    /// Persists images and manifest files under `dir` and points the
    /// manifest root there.
    pub fn write(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images"))?;
        for (r, img) in self.manifest.records.iter().zip(&self.images) {
            img.save(dir.join(&r.image_path))?;
        }
        self.manifest.write_files(dir)?;
        std::fs::write(dir.join("synthetic.json"), serde_json::to_string_pretty(&self.spec)?)?;
        self.manifest.root = dir.to_path_buf();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            identities: 6,
            images_per_platform: 2,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let s = AttributeSchema::default();
        let a = generate_synthetic(&small(), &s).unwrap();
        let b = generate_synthetic(&small(), &s).unwrap();
        assert_eq!(a.manifest, b.manifest);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.to_le_bytes(), y.to_le_bytes());
        }
        let c = generate_synthetic(&SyntheticSpec { seed: 1, ..small() }, &s).unwrap();
        assert_ne!(a.images[0].to_le_bytes(), c.images[0].to_le_bytes());
    }

    #[test]
    fn torso_colour_changes_only_torso_band() {
        let s = AttributeSchema::default();
        let spec = SyntheticSpec { noise: 0.0, ..small() };
        let upper = s.index_of("upper_color").unwrap();
        let mut raw = vec![0usize; s.len()];
        let a = render_person(&s, &raw, Platform::Ground, 7, &spec).unwrap();
        raw[upper] = 4;
        let b = render_person(&s, &raw, Platform::Ground, 7, &spec).unwrap();
        let (r0, r1) = spec.band_rows(BodyBand::Torso, Platform::Ground);
        let (h, w) = (spec.height, spec.width);
        let mut changed = 0;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let i = (c * h + y) * w + x;
                    if a.data()[i] != b.data()[i] {
                        assert!((r0..r1).contains(&y), "row {y} changed outside torso");
                        changed += 1;
                    }
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn every_attribute_is_visible() {
        let s = AttributeSchema::default();
        let spec = SyntheticSpec { noise: 0.0, ..small() };
        let base = vec![0usize; s.len()];
        let a = render_person(&s, &base, Platform::Ground, 3, &spec).unwrap();
        for k in 0..s.len() {
            let mut raw = base.clone();
            raw[k] = 1;
            let b = render_person(&s, &raw, Platform::Ground, 3, &spec).unwrap();
            assert_ne!(a, b, "attribute {} not rendered", s.attributes()[k].name);
        }
    }

    #[test]
    fn aerial_differs_from_ground() {
        let s = AttributeSchema::default();
        let spec = SyntheticSpec { noise: 0.0, ..small() };
        let raw = vec![1usize; s.len()];
        let g = render_person(&s, &raw, Platform::Ground, 3, &spec).unwrap();
        let a = render_person(&s, &raw, Platform::Aerial, 3, &spec).unwrap();
        assert_ne!(g, a);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn upper_colour_recoverable_by_nearest_centroid() {
        let s = AttributeSchema::default();
        let spec = SyntheticSpec {
            identities: 120,
            images_per_platform: 2,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec, &s).unwrap();
        let upper = s.index_of("upper_color").unwrap();
        let (h, w) = (spec.height, spec.width);
        let feature = |t: &Tensor, platform: Platform| -> [f64; 3] {
            let (r0, r1) = spec.band_rows(BodyBand::Torso, platform);
            let mut f = [0.0; 3];
            for (c, fc) in f.iter_mut().enumerate() {
                for y in r0..r1 {
                    for x in w / 4..3 * w / 4 {
                        *fc += t.data()[(c * h + y) * w + x];
                    }
                }
                *fc /= ((r1 - r0) * (w / 2)) as f64;
            }
            f
        };
        let label = |i: usize| ds.manifest.attributes.get(ds.manifest.records[i].person_id).unwrap()[upper];
        let n = ds.images.len();
        let (train, test): (Vec<usize>, Vec<usize>) = (0..n).partition(|i| ds.manifest.records[*i].person_id.is_multiple_of(2));
        let plat = |i: usize| ds.manifest.records[i].platform;
        let slot = |i: usize| label(i) * 2 + (plat(i) == Platform::Ground) as usize;
        let mut sums = vec![([0.0; 3], 0usize); 24];
        for &i in &train {
            let f = feature(&ds.images[i], plat(i));
            let e = &mut sums[slot(i)];
            for (acc, v) in e.0.iter_mut().zip(f) {
                *acc += v;
            }
            e.1 += 1;
        }
        let mut correct = 0;
        for &i in &test {
            let f = feature(&ds.images[i], plat(i));
            let p = (plat(i) == Platform::Ground) as usize;
            let best = (0..12)
                .map(|k| k * 2 + p)
                .filter(|&k| sums[k].1 > 0)
                .min_by(|&a, &b| {
                    let d = |k: usize| (0..3).map(|c| (f[c] - sums[k].0[c] / sums[k].1 as f64).powi(2)).sum::<f64>();
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            correct += (best == slot(i)) as usize;
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.9, "accuracy {acc}");
    }

    #[test]
    fn write_and_reload() {
        let s = AttributeSchema::default();
        let mut ds = generate_synthetic(&small(), &s).unwrap();
        let d = tempfile::tempdir().unwrap();
        ds.write(d.path()).unwrap();
        let m = super::super::load_manifest(d.path()).unwrap();
        assert_eq!(m.records, ds.manifest.records);
        let img = super::super::load_image(&m, 3, (64, 32)).unwrap();
        assert_eq!(img, ds.images[3]);
    }
}
