use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Platform};
use super::splitmix64;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub queries_per_platform: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.5,
            queries_per_platform: 2,
            seed: 0,
        }
    }
}

/// Identity-disjoint partition. Image lists hold record indices into the
/// manifest, sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub config: SplitConfig,
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
    pub excluded_ids: Vec<u32>,
    pub train_images: Vec<usize>,
    pub query_images: Vec<usize>,
    pub gallery_images: Vec<usize>,
    pub warnings: Vec<String>,
}

impl Split {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Split> {
        let p = path.as_ref();
        if !p.exists() {
            return Err(Error::MissingArtifact(p.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    }
}

/// Splits identities into train and test. The train count is
/// `ceil(fraction * all ids)` where the count includes excluded ids;
/// excluded ids never appear on either side. Within the test side each
/// identity contributes up to `queries_per_platform` query images per
/// platform while keeping at least one gallery image per platform.
/// Identities seen on one platform only stay in the gallery.
pub fn split_protocol(manifest: &DatasetManifest, config: &SplitConfig) -> Result<Split> {
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        return Err(Error::InvalidParam(format!(
            "train fraction must lie in (0, 1), got {}",
            config.train_fraction
        )));
    }
    let all: BTreeSet<u32> = manifest.person_ids().union(&manifest.excluded).copied().collect();
    let mut valid: Vec<u32> = all.difference(&manifest.excluded).copied().collect();
    if valid.len() < 2 {
        return Err(Error::TooFewIdentities(valid.len()));
    }
    let n_train = ((all.len() as f64 * config.train_fraction).ceil() as usize).clamp(1, valid.len() - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed));
    valid.shuffle(&mut rng);
    let mut train_ids = valid[..n_train].to_vec();
    let mut test_ids = valid[n_train..].to_vec();
    train_ids.sort_unstable();
    test_ids.sort_unstable();
    let train_set: BTreeSet<u32> = train_ids.iter().copied().collect();
    let test_set: BTreeSet<u32> = test_ids.iter().copied().collect();

    let train_images: Vec<usize> = (0..manifest.len())
        .filter(|&i| train_set.contains(&manifest.records[i].person_id))
        .collect();
    let mut by_id: BTreeMap<u32, BTreeMap<Platform, Vec<usize>>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if test_set.contains(&r.person_id) {
            by_id.entry(r.person_id).or_default().entry(r.platform).or_default().push(i);
        }
    }
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    let mut warnings = Vec::new();
    for (pid, platforms) in &mut by_id {
        if platforms.len() < 2 {
            let only = platforms.keys().next().expect("non-empty");
            let msg = format!("identity {pid} appears only on the {only} platform; kept in gallery only");
            log::warn!("{msg}");
            warnings.push(msg);
            gallery.extend(platforms.values().flatten());
            continue;
        }
        for imgs in platforms.values_mut() {
            imgs.shuffle(&mut rng);
            let q = config.queries_per_platform.min(imgs.len() - 1);
            query.extend_from_slice(&imgs[..q]);
            gallery.extend_from_slice(&imgs[q..]);
        }
    }
    query.sort_unstable();
    gallery.sort_unstable();
    Ok(Split {
        config: config.clone(),
        train_ids,
        test_ids,
        excluded_ids: manifest.excluded.iter().copied().collect(),
        train_images,
        query_images: query,
        gallery_images: gallery,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attributes::{AttributeSchema, AttributeTable};
    use crate::data::ImageRecord;
    use std::path::PathBuf;

    fn manifest(ids: u32, per_platform: usize, excluded: &[u32]) -> DatasetManifest {
        let schema = AttributeSchema::new(vec![("a".into(), 2)]).unwrap();
        let mut table = AttributeTable::default();
        let mut records = Vec::new();
        for p in 1..=ids {
            table.rows.insert(p, vec![(p % 2) as usize]);
            for platform in [Platform::Aerial, Platform::Ground] {
                for k in 0..per_platform {
                    records.push(ImageRecord {
                        image_path: format!("{p}_{platform}_{k}.png"),
                        person_id: p,
                        platform,
                        camera_id: (platform == Platform::Ground) as u32,
                        frame_index: k as u32,
                        label: 0,
                    });
                }
            }
        }
        DatasetManifest::new(PathBuf::new(), schema, records, table, excluded.iter().copied().collect()).unwrap()
    }

    #[test]
    fn published_identity_counts() {
        let excluded: Vec<u32> = (1..=9).map(|i| i * 40).collect();
        let m = manifest(397, 1, &excluded);
        let s = split_protocol(&m, &SplitConfig::default()).unwrap();
        assert_eq!(s.train_ids.len(), 199);
        assert_eq!(s.test_ids.len(), 189);
        for e in &excluded {
            assert!(!s.train_ids.contains(e) && !s.test_ids.contains(e));
        }
    }

    #[test]
    fn four_ids_half_split_is_disjoint() {
        let m = manifest(4, 3, &[]);
        let s = split_protocol(&m, &SplitConfig::default()).unwrap();
        assert_eq!(s.train_ids.len(), 2);
        assert_eq!(s.test_ids.len(), 2);
        assert!(s.train_ids.iter().all(|p| !s.test_ids.contains(p)));
        assert_eq!(s.query_images.len(), 2 * 2 * 2);
        assert_eq!(s.gallery_images.len(), 2 * 2);
        let q: BTreeSet<_> = s.query_images.iter().collect();
        assert!(s.gallery_images.iter().all(|g| !q.contains(g)));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let m = manifest(40, 2, &[]);
        let a = split_protocol(&m, &SplitConfig::default()).unwrap();
        assert_eq!(a, split_protocol(&m, &SplitConfig::default()).unwrap());
        let b = split_protocol(&m, &SplitConfig { seed: 5, ..SplitConfig::default() }).unwrap();
        assert_ne!(a.train_ids, b.train_ids);
    }

    #[test]
    fn single_platform_identity_goes_to_gallery() {
        let mut m = manifest(6, 2, &[]);
        m.records.retain(|r| !(r.person_id <= 6 && r.platform == Platform::Ground && r.person_id % 2 == 0));
        let s = split_protocol(&m, &SplitConfig::default()).unwrap();
        let one_platform: Vec<u32> = s.test_ids.iter().copied().filter(|p| p % 2 == 0).collect();
        assert_eq!(s.warnings.len(), one_platform.len());
        for p in one_platform {
            assert!(s.query_images.iter().all(|&i| m.records[i].person_id != p));
            assert!(s.gallery_images.iter().any(|&i| m.records[i].person_id == p));
        }
    }

    #[test]
    fn too_few_identities() {
        let m = manifest(3, 1, &[1, 2]);
        assert!(matches!(
            split_protocol(&m, &SplitConfig::default()),
            Err(Error::TooFewIdentities(1))
        ));
    }
}
