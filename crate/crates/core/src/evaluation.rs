//! Ranking metrics for cross-platform retrieval: raw average precision,
//! CMC curves, direction filters and an independent brute-force oracle.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Platform;
use crate::error::{Error, Result};
use crate::exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "a2g")]
    AerialToGround,
    #[serde(rename = "g2a")]
    GroundToAerial,
    #[serde(rename = "all")]
    All,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::AerialToGround => "a2g",
            Direction::GroundToAerial => "g2a",
            Direction::All => "all",
        })
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "a2g" => Ok(Direction::AerialToGround),
            "g2a" => Ok(Direction::GroundToAerial),
            "all" => Ok(Direction::All),
            other => Err(format!("unknown direction `{other}` (expected a2g, g2a or all)")),
        }
    }
}

/// Whether a directional gallery holds only the opposite platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GalleryMode {
    #[default]
    Cross,
    All,
}

impl fmt::Display for GalleryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GalleryMode::Cross => "cross",
            GalleryMode::All => "all",
        })
    }
}

impl FromStr for GalleryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cross" => Ok(GalleryMode::Cross),
            "all" => Ok(GalleryMode::All),
            other => Err(format!("unknown gallery mode `{other}` (expected cross or all)")),
        }
    }
}

/// Identity and capture metadata of one query or gallery image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub person_id: u32,
    pub platform: Platform,
    pub camera_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilteredSets {
    pub queries: Vec<usize>,
    pub gallery: Vec<usize>,
    pub description: String,
}

/// Selects queries and gallery for a direction. Under `Cross` the a2g and
/// g2a galleries hold only the opposite platform; `All` keeps both.
/// Same-camera same-identity entries are removed per query at ranking time.
pub fn direction_filter(queries: &[EvalItem], gallery: &[EvalItem], direction: Direction, mode: GalleryMode) -> FilteredSets {
    let (qp, gp) = match direction {
        Direction::AerialToGround => (Some(Platform::Aerial), Some(Platform::Ground)),
        Direction::GroundToAerial => (Some(Platform::Ground), Some(Platform::Aerial)),
        Direction::All => (None, None),
    };
    let gp = if mode == GalleryMode::All { None } else { gp };
    let keep = |p: Option<Platform>, it: &EvalItem| p.is_none_or(|p| it.platform == p);
    FilteredSets {
        queries: (0..queries.len()).filter(|&i| keep(qp, &queries[i])).collect(),
        gallery: (0..gallery.len()).filter(|&i| keep(gp, &gallery[i])).collect(),
        description: format!("direction={direction} gallery={mode}; same-camera same-identity entries excluded"),
    }
}

/// Ranking of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub query: usize,
    pub platform: Platform,
    /// Gallery indices by ascending distance, ties by ascending index.
    pub order: Vec<usize>,
    pub matches: Vec<bool>,
    pub average_precision: f64,
    /// 1-based rank of the first true match.
    pub first_match_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub direction: Direction,
    pub gallery_mode: GalleryMode,
    pub description: String,
    pub map: f64,
    /// `cmc[k-1]` is the fraction of queries with a match in the top `k`.
    pub cmc: Vec<f64>,
    pub rankings: Vec<RankingResult>,
    /// Queries dropped for having no true match in their gallery.
    pub dropped_queries: Vec<usize>,
}

pub const REPORT_RANKS: [usize; 4] = [1, 5, 10, 20];

impl EvalReport {
    /// CMC at rank `k`, saturating at the last entry.
    pub fn cmc_at(&self, k: usize) -> f64 {
        if k == 0 || self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }

    pub fn csv_header() -> &'static str {
        "direction,gallery_mode,queries,mAP,CMC1,CMC5,CMC10,CMC20"
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{},{},{}", self.direction, self.gallery_mode, self.rankings.len(), self.map);
        for k in REPORT_RANKS {
            let _ = write!(s, ",{}", self.cmc_at(k));
        }
        s
    }

    pub fn text(&self) -> String {
        let mut s = format!(
            "direction: {}\ngallery mode: {}\nqueries: {} ({} dropped without a match)\nmAP: {:.4}\n",
            self.direction,
            self.gallery_mode,
            self.rankings.len(),
            self.dropped_queries.len(),
            self.map
        );
        for k in REPORT_RANKS {
            let _ = writeln!(s, "CMC-{k}: {:.4}", self.cmc_at(k));
        }
        s
    }

    /// `query_index,average_precision,first_match_rank`.
    pub fn per_query_csv(&self) -> String {
        let mut s = String::from("query_index,average_precision,first_match_rank\n");
        for r in &self.rankings {
            let _ = writeln!(s, "{},{},{}", r.query, r.average_precision, r.first_match_rank);
        }
        s
    }
}

fn rank_query(
    q: usize,
    queries: &[EvalItem],
    gallery: &[EvalItem],
    dist: &[Vec<f64>],
    candidates: &[usize],
) -> Option<RankingResult> {
    let item = queries[q];
    let mut order: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&g| !(gallery[g].camera_id == item.camera_id && gallery[g].person_id == item.person_id))
        .collect();
    order.sort_by(|&a, &b| dist[q][a].total_cmp(&dist[q][b]).then(a.cmp(&b)));
    let matches: Vec<bool> = order.iter().map(|&g| gallery[g].person_id == item.person_id).collect();
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first = 0;
    for (r, &m) in matches.iter().enumerate() {
        if m {
            hits += 1;
            precision_sum += hits as f64 / (r + 1) as f64;
            if first == 0 {
                first = r + 1;
            }
        }
    }
    (hits > 0).then(|| RankingResult {
        query: q,
        platform: item.platform,
        order,
        matches,
        average_precision: precision_sum / hits as f64,
        first_match_rank: first,
    })
}

fn check_matrix(queries: &[EvalItem], gallery: &[EvalItem], dist: &[Vec<f64>]) -> Result<()> {
    if dist.len() != queries.len() || dist.iter().any(|row| row.len() != gallery.len()) {
        return Err(Error::ShapeMismatch(format!(
            "distance matrix must be {}x{}",
            queries.len(),
            gallery.len()
        )));
    }
    if dist.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("distance matrix".into()));
    }
    Ok(())
}

fn finish(
    direction: Direction,
    mode: GalleryMode,
    description: String,
    results: Vec<(usize, Option<RankingResult>)>,
    gallery_len: usize,
) -> Result<EvalReport> {
    let mut rankings = Vec::new();
    let mut dropped = Vec::new();
    for (q, r) in results {
        match r {
            Some(r) => rankings.push(r),
            None => dropped.push(q),
        }
    }
    if !dropped.is_empty() {
        log::warn!("{} queries have no true match in the gallery and were dropped", dropped.len());
    }
    if rankings.is_empty() {
        return Err(Error::NoValidQueries);
    }
    let n = rankings.len() as f64;
    let map = rankings.iter().map(|r| r.average_precision).sum::<f64>() / n;
    let mut counts = vec![0usize; gallery_len.max(1)];
    for r in &rankings {
        counts[r.first_match_rank - 1] += 1;
    }
    let mut acc = 0;
    let cmc = counts
        .iter()
        .map(|&c| {
            acc += c;
            acc as f64 / n
        })
        .collect();
    Ok(EvalReport {
        direction,
        gallery_mode: mode,
        description,
        map,
        cmc,
        rankings,
        dropped_queries: dropped,
    })
}

/// mAP and CMC from a full query-by-gallery distance matrix. Queries are
/// ranked in parallel; the mean is an ordered sum over query index.
pub fn evaluate(
    queries: &[EvalItem],
    gallery: &[EvalItem],
    dist: &[Vec<f64>],
    direction: Direction,
    mode: GalleryMode,
) -> Result<EvalReport> {
    check_matrix(queries, gallery, dist)?;
    let f = direction_filter(queries, gallery, direction, mode);
    if f.gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let results = exec::map(&f.queries, |&q| (q, rank_query(q, queries, gallery, dist, &f.gallery)));
    finish(direction, mode, f.description, results, f.gallery.len())
}

/// Quadratic reference implementation: every gallery item's rank is counted
/// directly as one plus the number of items strictly ahead of it.
pub fn evaluate_oracle(
    queries: &[EvalItem],
    gallery: &[EvalItem],
    dist: &[Vec<f64>],
    direction: Direction,
    mode: GalleryMode,
) -> Result<EvalReport> {
    check_matrix(queries, gallery, dist)?;
    let f = direction_filter(queries, gallery, direction, mode);
    if f.gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let mut results = Vec::new();
    for &q in &f.queries {
        let item = queries[q];
        let cand: Vec<usize> = f
            .gallery
            .iter()
            .copied()
            .filter(|&g| !(gallery[g].camera_id == item.camera_id && gallery[g].person_id == item.person_id))
            .collect();
        let ahead = |a: usize, b: usize| dist[q][a] < dist[q][b] || (dist[q][a] == dist[q][b] && a < b);
        let rank_of = |g: usize| 1 + cand.iter().filter(|&&o| o != g && ahead(o, g)).count();
        let match_ranks: Vec<usize> = cand
            .iter()
            .filter(|&&g| gallery[g].person_id == item.person_id)
            .map(|&g| rank_of(g))
            .collect();
        if match_ranks.is_empty() {
            results.push((q, None));
            continue;
        }
        let ap = match_ranks
            .iter()
            .map(|&r| match_ranks.iter().filter(|&&o| o <= r).count() as f64 / r as f64)
            .sum::<f64>()
            / match_ranks.len() as f64;
        let mut order = cand.clone();
        order.sort_by_key(|&g| rank_of(g));
        let matches = order.iter().map(|&g| gallery[g].person_id == item.person_id).collect();
        results.push((
            q,
            Some(RankingResult {
                query: q,
                platform: item.platform,
                order,
                matches,
                average_precision: ap,
                first_match_rank: *match_ranks.iter().min().expect("non-empty"),
            }),
        ));
    }
    finish(direction, mode, f.description, results, f.gallery.len())
}

/// Reports agree when mAP and every CMC entry match within `tol`.
pub fn reports_agree(a: &EvalReport, b: &EvalReport, tol: f64) -> bool {
    (a.map - b.map).abs() <= tol
        && a.cmc.len() == b.cmc.len()
        && a.cmc.iter().zip(&b.cmc).all(|(x, y)| (x - y).abs() <= tol)
        && a.dropped_queries == b.dropped_queries
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn item(person_id: u32, platform: Platform) -> EvalItem {
        EvalItem {
            person_id,
            platform,
            camera_id: (platform == Platform::Ground) as u32,
        }
    }

    fn random_instance(rng: &mut impl Rng) -> (Vec<EvalItem>, Vec<EvalItem>, Vec<Vec<f64>>) {
        let nq = rng.gen_range(1..6);
        let ng = rng.gen_range(1..=20);
        let ids = rng.gen_range(1..5);
        let plat = |r: &mut dyn rand::RngCore| {
            if r.gen_bool(0.5) {
                Platform::Aerial
            } else {
                Platform::Ground
            }
        };
        let q: Vec<EvalItem> = (0..nq).map(|_| item(rng.gen_range(0..ids), plat(rng))).collect();
        let g: Vec<EvalItem> = (0..ng).map(|_| item(rng.gen_range(0..ids), plat(rng))).collect();
        // Coarse values so ties are common.
        let d = (0..nq)
            .map(|_| (0..ng).map(|_| rng.gen_range(0..6) as f64 * 0.5).collect())
            .collect();
        (q, g, d)
    }

    #[test]
    fn perfect_single_match() {
        let q = [item(1, Platform::Aerial)];
        let g = [item(1, Platform::Ground), item(2, Platform::Ground)];
        let r = evaluate(&q, &g, &[vec![0.1, 0.5]], Direction::AerialToGround, GalleryMode::Cross).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.cmc_at(1), 1.0);
    }

    #[test]
    fn two_matches_at_ranks_one_and_three() {
        let q = [item(1, Platform::Aerial)];
        let g = [
            item(1, Platform::Ground),
            item(2, Platform::Ground),
            item(1, Platform::Ground),
            item(3, Platform::Ground),
        ];
        let r = evaluate(&q, &g, &[vec![0.1, 0.2, 0.3, 0.4]], Direction::AerialToGround, GalleryMode::Cross).unwrap();
        assert!((r.map - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(r.rankings[0].first_match_rank, 1);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let q = [item(1, Platform::Aerial)];
        let g = [item(2, Platform::Ground), item(1, Platform::Ground)];
        let r = evaluate(&q, &g, &[vec![0.5, 0.5]], Direction::AerialToGround, GalleryMode::Cross).unwrap();
        assert_eq!(r.rankings[0].order, vec![0, 1]);
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn all_aerial_gallery_is_empty_for_a2g() {
        let q = [item(1, Platform::Aerial)];
        let g = [item(1, Platform::Aerial)];
        assert!(matches!(
            evaluate(&q, &g, &[vec![0.0]], Direction::AerialToGround, GalleryMode::Cross),
            Err(Error::EmptyGallery)
        ));
    }

    #[test]
    fn same_camera_matches_excluded_under_all() {
        let q = [item(1, Platform::Aerial)];
        let g = [item(1, Platform::Aerial), item(2, Platform::Ground), item(1, Platform::Ground)];
        let r = evaluate(&q, &g, &[vec![0.0, 0.1, 0.2]], Direction::All, GalleryMode::Cross).unwrap();
        assert_eq!(r.rankings[0].order, vec![1, 2]);
        assert_eq!(r.map, 0.5);
        let only_same = [item(1, Platform::Aerial)];
        assert!(matches!(
            evaluate(&q, &only_same, &[vec![0.0]], Direction::All, GalleryMode::Cross),
            Err(Error::NoValidQueries)
        ));
    }

    #[test]
    fn gallery_mode_all_keeps_both_platforms() {
        let q = [item(1, Platform::Aerial)];
        let g = [item(2, Platform::Aerial), item(1, Platform::Ground)];
        let f = direction_filter(&q, &g, Direction::AerialToGround, GalleryMode::All);
        assert_eq!(f.gallery, vec![0, 1]);
        let f = direction_filter(&q, &g, Direction::AerialToGround, GalleryMode::Cross);
        assert_eq!(f.gallery, vec![1]);
        let f = direction_filter(&q, &g, Direction::GroundToAerial, GalleryMode::Cross);
        assert!(f.queries.is_empty());
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut compared = 0;
        for _ in 0..1000 {
            let (q, g, d) = random_instance(&mut rng);
            for dir in [Direction::AerialToGround, Direction::GroundToAerial, Direction::All] {
                let a = evaluate(&q, &g, &d, dir, GalleryMode::Cross);
                let b = evaluate_oracle(&q, &g, &d, dir, GalleryMode::Cross);
                match (a, b) {
                    (Ok(a), Ok(b)) => {
                        assert!(reports_agree(&a, &b, 1e-12));
                        for (x, y) in a.rankings.iter().zip(&b.rankings) {
                            assert_eq!((&x.order, &x.matches, x.first_match_rank), (&y.order, &y.matches, y.first_match_rank));
                            assert!((x.average_precision - y.average_precision).abs() <= 1e-12);
                        }
                        compared += 1;
                    }
                    (Err(a), Err(b)) => assert_eq!(a.to_string(), b.to_string()),
                    (a, b) => panic!("disagree: {a:?} vs {b:?}"),
                }
            }
        }
        assert!(compared > 500);
    }

    #[test]
    fn report_formats() {
        let q = [item(1, Platform::Aerial)];
        let g = [item(1, Platform::Ground), item(2, Platform::Ground)];
        let r = evaluate(&q, &g, &[vec![0.6, 0.5]], Direction::AerialToGround, GalleryMode::Cross).unwrap();
        assert_eq!(r.csv_row(), "a2g,cross,1,0.5,0,1,1,1");
        assert!(r.text().contains("mAP: 0.5000"));
        assert_eq!(r.per_query_csv(), "query_index,average_precision,first_match_rank\n0,0.5,2\n");
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(seed in any::<u64>(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (q, g, d) = random_instance(&mut rng);
            let t: Vec<Vec<f64>> = d.iter().map(|r| r.iter().map(|&x| a * x.powi(3) + x + b).collect()).collect();
            for dir in [Direction::AerialToGround, Direction::GroundToAerial, Direction::All] {
                match (evaluate(&q, &g, &d, dir, GalleryMode::Cross), evaluate(&q, &g, &t, dir, GalleryMode::Cross)) {
                    (Ok(x), Ok(y)) => {
                        prop_assert_eq!(x.map, y.map);
                        prop_assert_eq!(x.cmc, y.cmc);
                    }
                    (Err(_), Err(_)) => {}
                    _ => prop_assert!(false, "outcome changed under monotone map"),
                }
            }
        }

        #[test]
        fn metric_bounds(seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (q, g, d) = random_instance(&mut rng);
            if let Ok(r) = evaluate(&q, &g, &d, Direction::All, GalleryMode::Cross) {
                prop_assert!((0.0..=1.0).contains(&r.map));
                prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
                prop_assert_eq!(*r.cmc.last().unwrap(), 1.0);
                let perfect = r.rankings.iter().all(|x| {
                    let hits = x.matches.iter().filter(|&&m| m).count();
                    x.matches[..hits].iter().all(|&m| m)
                });
                prop_assert_eq!(perfect, r.map == 1.0);
            }
        }
    }
}
