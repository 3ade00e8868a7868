use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeSchema, AttributeTable, AttributeVector};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Aerial,
    Ground,
}

impl Platform {
    pub fn other(self) -> Platform {
        match self {
            Platform::Aerial => Platform::Ground,
            Platform::Ground => Platform::Aerial,
        }
    }
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Platform::Aerial => "aerial",
            Platform::Ground => "ground",
        })
    }
}

impl FromStr for Platform {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "aerial" | "a" | "uav" => Ok(Platform::Aerial),
            "ground" | "g" | "cctv" => Ok(Platform::Ground),
            other => Err(format!("unknown platform `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_path: String,
    pub person_id: u32,
    pub platform: Platform,
    pub camera_id: u32,
    pub frame_index: u32,
    /// Dense identity index over all person ids in the manifest.
    pub label: usize,
}

impl ImageRecord {
    /// File stem of the image path; used as the image identifier.
    pub fn image_id(&self) -> String {
        Path::new(&self.image_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image_path.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub schema: AttributeSchema,
    pub records: Vec<ImageRecord>,
    pub attributes: AttributeTable,
    pub excluded: BTreeSet<u32>,
}

pub const MANIFEST_HEADER: &str = "image_path,person_id,platform,camera_id,frame_index";

impl DatasetManifest {
    /// Validates references and assigns dense labels in person-id order.
    pub fn new(
        root: PathBuf,
        schema: AttributeSchema,
        mut records: Vec<ImageRecord>,
        attributes: AttributeTable,
        excluded: BTreeSet<u32>,
    ) -> Result<Self> {
        let mut missing: Vec<u32> = records
            .iter()
            .map(|r| r.person_id)
            .filter(|p| attributes.get(*p).is_none())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if !missing.is_empty() {
            missing.sort_unstable();
            return Err(Error::MissingAttributes(missing));
        }
        let mut cams: BTreeMap<u32, Platform> = BTreeMap::new();
        for r in &records {
            if let Some(p) = cams.insert(r.camera_id, r.platform) {
                if p != r.platform {
                    return Err(Error::Config(format!(
                        "camera {} appears on both platforms",
                        r.camera_id
                    )));
                }
            }
        }
        let ids: BTreeSet<u32> = records.iter().map(|r| r.person_id).collect();
        let dense: BTreeMap<u32, usize> = ids.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        for r in &mut records {
            r.label = dense[&r.person_id];
        }
        Ok(DatasetManifest {
            root,
            schema,
            records,
            attributes,
            excluded,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn person_ids(&self) -> BTreeSet<u32> {
        self.records.iter().map(|r| r.person_id).collect()
    }

    pub fn identity_count(&self) -> usize {
        self.person_ids().len()
    }

    pub fn attribute_vector(&self, person_id: u32) -> Result<AttributeVector> {
        let raw = self
            .attributes
            .get(person_id)
            .ok_or_else(|| Error::MissingAttributes(vec![person_id]))?;
        self.schema.encode(raw)
    }

    pub fn find_image(&self, image_id: &str) -> Result<usize> {
        self.records
            .iter()
            .position(|r| r.image_id() == image_id || r.image_path == image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }

    pub fn records_csv(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.image_path, r.person_id, r.platform, r.camera_id, r.frame_index
            );
        }
        s
    }

    pub fn exclusions_text(&self) -> String {
        self.excluded.iter().map(|p| format!("{p}\n")).collect()
    }

    /// Writes the record, attribute and schema files into `dir`, plus
    /// `exclusions.txt` when identities are excluded.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.csv"), self.records_csv())?;
        std::fs::write(dir.join("attributes.csv"), self.attributes.to_csv(&self.schema))?;
        std::fs::write(dir.join("schema.txt"), self.schema.to_text())?;
        if !self.excluded.is_empty() {
            std::fs::write(dir.join("exclusions.txt"), self.exclusions_text())?;
        }
        Ok(())
    }
}

fn parse_records(text: &str, path: &Path) -> Result<Vec<ImageRecord>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty manifest"))?;
    if header.trim() != MANIFEST_HEADER {
        return Err(Error::parse(path, 1, format!("header must be `{MANIFEST_HEADER}`")));
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(Error::parse(path, i + 1, format!("expected 5 fields, found {}", f.len())));
        }
        let num = |s: &str, what: &str| -> Result<u32> {
            s.parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad {what} `{s}`")))
        };
        records.push(ImageRecord {
            image_path: f[0].to_string(),
            person_id: num(f[1], "person_id")?,
            platform: f[2].parse().map_err(|e: String| Error::parse(path, i + 1, e))?,
            camera_id: num(f[3], "camera_id")?,
            frame_index: num(f[4], "frame_index")?,
            label: 0,
        });
    }
    if records.is_empty() {
        return Err(Error::parse(path, 2, "manifest has no records"));
    }
    Ok(records)
}

fn parse_exclusions(text: &str, path: &Path) -> Result<BTreeSet<u32>> {
    let mut out = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let l = line.split('#').next().unwrap_or("").trim();
        if l.is_empty() {
            continue;
        }
        out.insert(
            l.parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad person_id `{l}`")))?,
        );
    }
    Ok(out)
}

/// Loads `manifest.csv` from `dir` together with `attributes.csv`, the
/// optional `schema.txt` (default schema otherwise) and the optional
/// `exclusions.txt`.
pub fn load_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let schema_path = dir.join("schema.txt");
    let schema = if schema_path.exists() {
        AttributeSchema::load(&schema_path)?
    } else {
        AttributeSchema::default()
    };
    let mpath = dir.join("manifest.csv");
    if !mpath.exists() {
        return Err(Error::MissingArtifact(mpath));
    }
    let records = parse_records(&std::fs::read_to_string(&mpath)?, &mpath)?;
    let apath = dir.join("attributes.csv");
    if !apath.exists() {
        return Err(Error::MissingArtifact(apath));
    }
    let attributes = AttributeTable::load(&apath, &schema)?;
    let epath = dir.join("exclusions.txt");
    let excluded = if epath.exists() {
        parse_exclusions(&std::fs::read_to_string(&epath)?, &epath)?
    } else {
        BTreeSet::new()
    };
    DatasetManifest::new(dir.to_path_buf(), schema, records, attributes, excluded)
}

/// Reads an image as a `[3,H,W]` tensor in [0,1]. Tensor files are used
/// as-is; PNGs are resized to `(height, width)` when needed.
pub fn load_image(manifest: &DatasetManifest, index: usize, size: (usize, usize)) -> Result<Tensor> {
    let path = manifest.root.join(&manifest.records[index].image_path);
    let is_tensor = path.extension().is_some_and(|e| e == "atrt");
    if is_tensor {
        let t = Tensor::load(&path)?;
        t.expect_shape(&[3, size.0, size.1])?;
        return Ok(t);
    }
    let mut img = image::open(&path)?.to_rgb8();
    if (img.height() as usize, img.width() as usize) != size {
        img = image::imageops::resize(
            &img,
            size.1 as u32,
            size.0 as u32,
            image::imageops::FilterType::Triangle,
        );
    }
    let (h, w) = size;
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, manifest: &str, attrs: &str) {
        std::fs::write(dir.join("manifest.csv"), manifest).unwrap();
        std::fs::write(dir.join("attributes.csv"), attrs).unwrap();
        std::fs::write(dir.join("schema.txt"), "a,2\nb,3\n").unwrap();
    }

    #[test]
    fn empty_manifest_is_parse_error() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "", "person_id,a,b\n");
        assert!(matches!(load_manifest(d.path()), Err(Error::Parse { .. })));
        write(d.path(), &format!("{MANIFEST_HEADER}\n"), "person_id,a,b\n");
        assert!(matches!(load_manifest(d.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn two_records() {
        let d = tempfile::tempdir().unwrap();
        write(
            d.path(),
            &format!("{MANIFEST_HEADER}\nx.png,7,aerial,0,1\ny.png,3,ground,1,2\n"),
            "person_id,a,b\n7,1,2\n3,0,0\n",
        );
        let m = load_manifest(d.path()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.identity_count(), 2);
        assert_eq!(m.records[0].label, 1);
        assert_eq!(m.records[1].label, 0);
        assert_eq!(m.find_image("y").unwrap(), 1);
        assert!(matches!(m.find_image("z"), Err(Error::UnknownImage(_))));
    }

    #[test]
    fn missing_attributes_listed() {
        let d = tempfile::tempdir().unwrap();
        write(
            d.path(),
            &format!("{MANIFEST_HEADER}\nx.png,7,aerial,0,1\ny.png,9,ground,1,2\n"),
            "person_id,a,b\n7,1,2\n",
        );
        assert!(matches!(load_manifest(d.path()), Err(Error::MissingAttributes(v)) if v == vec![9]));
    }

    #[test]
    fn bad_line_reports_line_number() {
        let d = tempfile::tempdir().unwrap();
        write(
            d.path(),
            &format!("{MANIFEST_HEADER}\nx.png,7,aerial,0,1\ny.png,7,sideways,1,2\n"),
            "person_id,a,b\n7,1,2\n",
        );
        assert!(matches!(load_manifest(d.path()), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn camera_platform_consistency() {
        let d = tempfile::tempdir().unwrap();
        write(
            d.path(),
            &format!("{MANIFEST_HEADER}\nx.png,7,aerial,0,1\ny.png,7,ground,0,2\n"),
            "person_id,a,b\n7,1,2\n",
        );
        assert!(matches!(load_manifest(d.path()), Err(Error::Config(_))));
    }

    #[test]
    fn png_images_decode_and_resize() {
        let d = tempfile::tempdir().unwrap();
        write(
            d.path(),
            &format!("{MANIFEST_HEADER}\nx.png,7,aerial,0,1\n"),
            "person_id,a,b\n7,1,2\n",
        );
        let img = image::RgbImage::from_pixel(4, 8, image::Rgb([255, 0, 51]));
        img.save(d.path().join("x.png")).unwrap();
        let m = load_manifest(d.path()).unwrap();
        let t = load_image(&m, 0, (8, 4)).unwrap();
        assert_eq!(t.shape(), &[3, 8, 4]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[32], 0.0);
        assert!((t.data()[64] - 0.2).abs() < 1e-12);
        assert_eq!(load_image(&m, 0, (16, 8)).unwrap().shape(), &[3, 16, 8]);
    }
}
