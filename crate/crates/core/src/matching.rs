//! Weakly verified matches: mutual nearest neighbours in descriptor space,
//! then a least-median-of-squares fundamental-matrix filter.

use log::{debug, warn};
use nalgebra::{Matrix3, SMatrix, SymmetricEigen, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pixel;

/// Keypoint locations and unit-norm descriptors (row-major `N x D`).
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pixels: Vec<Pixel>,
    dim: usize,
    descriptors: Vec<f64>,
}

impl KeypointSet {
    /// Rows of `descriptors` are normalized to unit length.
    pub fn new(pixels: Vec<Pixel>, dim: usize, mut descriptors: Vec<f64>) -> Result<Self> {
        if descriptors.len() != pixels.len() * dim {
            return Err(Error::DimensionMismatch {
                what: "descriptor matrix",
                expected: pixels.len() * dim,
                actual: descriptors.len(),
            });
        }
        if dim > 0 {
            for (i, row) in descriptors.chunks_mut(dim).enumerate() {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(norm > 0.0) || !norm.is_finite() {
                    return Err(Error::Domain(format!("descriptor {i} has zero or non-finite norm")));
                }
                // already-unit rows are left bit-identical
                if (norm - 1.0).abs() > 4.0 * f64::EPSILON {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
        }
        Ok(KeypointSet {
            pixels,
            dim,
            descriptors,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pixels(&self) -> &[Pixel] {
        &self.pixels
    }

    pub fn pixel(&self, i: usize) -> Pixel {
        self.pixels[i]
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }
}

/// Index pairs `(keypoint in frame i, keypoint in frame j)`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchSet {
    pub frame_i: usize,
    pub frame_j: usize,
    pub pairs: Vec<(usize, usize)>,
}

impl MatchSet {
    pub fn new(frame_i: usize, frame_j: usize, pairs: Vec<(usize, usize)>) -> Self {
        MatchSet { frame_i, frame_j, pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> MatchSet {
        MatchSet {
            frame_i: self.frame_i,
            frame_j: self.frame_j,
            pairs: indices.iter().map(|&m| self.pairs[m]).collect(),
        }
    }

    /// Same matches seen from the other frame.
    pub fn transposed(&self) -> MatchSet {
        let mut pairs: Vec<_> = self.pairs.iter().map(|&(a, b)| (b, a)).collect();
        pairs.sort_unstable();
        MatchSet {
            frame_i: self.frame_j,
            frame_j: self.frame_i,
            pairs,
        }
    }

    /// Checks index ranges and duplicates.
    pub fn validate(&self, len_i: usize, len_j: usize) -> Result<()> {
        let mut seen = std::collections::HashSet::with_capacity(self.pairs.len());
        for &(a, b) in &self.pairs {
            if a >= len_i || b >= len_j {
                return Err(Error::Domain(format!(
                    "match ({a}, {b}) out of range for {len_i} x {len_j} keypoints"
                )));
            }
            if !seen.insert((a, b)) {
                return Err(Error::Domain(format!("duplicate match ({a}, {b})")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    /// Neighbourhood size for the mutual check; 1 is the classic crosscheck.
    pub k: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { k: 1 }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` smallest entries, ties broken by lower index.
fn k_smallest(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let k = k.min(row.len());
    idx.select_nth_unstable_by(k.saturating_sub(1), |&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    idx
}

/// Mutual nearest neighbours under Euclidean descriptor distance, with
/// `frame_i`/`frame_j` left at 0 for the caller to fill in.
pub fn mutual_nn_match(a: &KeypointSet, b: &KeypointSet, cfg: &MatchConfig) -> Result<MatchSet> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            what: "descriptor dimension",
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    if a.is_empty() || b.is_empty() {
        return Ok(MatchSet::default());
    }
    let k = cfg.k.max(1);
    let (na, nb) = (a.len(), b.len());
    let mut dist = vec![0.0; na * nb];
    for m in 0..na {
        for n in 0..nb {
            dist[m * nb + n] = squared_distance(a.descriptor(m), b.descriptor(n));
        }
    }
    let forward: Vec<Vec<usize>> = (0..na).map(|m| k_smallest(&dist[m * nb..(m + 1) * nb], k)).collect();
    let mut column = vec![0.0; na];
    let backward: Vec<Vec<usize>> = (0..nb)
        .map(|n| {
            for m in 0..na {
                column[m] = dist[m * nb + n];
            }
            k_smallest(&column, k)
        })
        .collect();

    let mut pairs = Vec::new();
    for (m, fwd) in forward.iter().enumerate() {
        for &n in fwd {
            if backward[n].contains(&m) {
                pairs.push((m, n));
            }
        }
    }
    pairs.sort_unstable();
    Ok(MatchSet::new(0, 0, pairs))
}

/// Similarity transform taking points to zero centroid and mean distance √2.
fn hartley_normalization(points: &[Pixel]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let cu = points.iter().map(|p| p.u).sum::<f64>() / n;
    let cv = points.iter().map(|p| p.v).sum::<f64>() / n;
    let mean_dist = points.iter().map(|p| ((p.u - cu).powi(2) + (p.v - cv).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { 2f64.sqrt() / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cu, 0.0, s, -s * cv, 0.0, 0.0, 1.0)
}

/// Normalized eight-point estimate of `F` with `x_b^T F x_a = 0`, forced to
/// rank 2 and unit Frobenius norm.
pub fn eight_point_fundamental(correspondences: &[(Pixel, Pixel)]) -> Result<Matrix3<f64>> {
    if correspondences.len() < 8 {
        return Err(Error::Degenerate(format!(
            "eight-point estimate needs 8 correspondences, got {}",
            correspondences.len()
        )));
    }
    let pa: Vec<Pixel> = correspondences.iter().map(|c| c.0).collect();
    let pb: Vec<Pixel> = correspondences.iter().map(|c| c.1).collect();
    let ta = hartley_normalization(&pa);
    let tb = hartley_normalization(&pb);

    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (a, b) in pa.iter().zip(&pb) {
        let x = ta * Vector3::new(a.u, a.v, 1.0);
        let y = tb * Vector3::new(b.u, b.v, 1.0);
        let row = SMatrix::<f64, 9, 1>::from_column_slice(&[
            y.x * x.x,
            y.x * x.y,
            y.x,
            y.y * x.x,
            y.y * x.y,
            y.y,
            x.x,
            x.y,
            1.0,
        ]);
        ata += row * row.transpose();
    }
    let eig = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let largest = eig.eigenvalues[order[8]].max(f64::MIN_POSITIVE);
    // A one-dimensional null space is required; a second (near-)zero
    // eigenvalue means the points do not pin down F.
    if eig.eigenvalues[order[1]] <= 1e-10 * largest {
        return Err(Error::Degenerate(
            "correspondences do not determine a unique fundamental matrix".into(),
        ));
    }
    let f = eig.eigenvectors.column(order[0]);
    let f_norm = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);

    let svd = f_norm.svd(true, true);
    let mut s = svd.singular_values;
    let imin = s.imin();
    s[imin] = 0.0;
    let f_rank2 = svd.u.unwrap() * Matrix3::from_diagonal(&s) * svd.v_t.unwrap();

    let f = tb.transpose() * f_rank2 * ta;
    let norm = f.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate("fundamental matrix vanished after denormalization".into()));
    }
    Ok(f / norm)
}

/// First-order geometric error (pixels squared) of a correspondence under `F`.
pub fn sampson_error(f: &Matrix3<f64>, a: Pixel, b: Pixel) -> f64 {
    let x = Vector3::new(a.u, a.v, 1.0);
    let y = Vector3::new(b.u, b.v, 1.0);
    let fx = f * x;
    let fty = f.transpose() * y;
    let num = y.dot(&fx);
    let den = fx.x * fx.x + fx.y * fx.y + fty.x * fty.x + fty.y * fty.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num * num / den
}

/// LMedS constants. The inlier test is `sqrt(sampson) < cutoff * scale`
/// with `scale = max(1.4826 sqrt(median), min_scale_px)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmedsConfig {
    pub samples: usize,
    pub seed: u64,
    pub cutoff: f64,
    /// Lower bound on the robust scale, so noise-free data does not collapse
    /// the threshold below floating-point residuals.
    pub min_scale_px: f64,
}

pub const LMEDS_SAMPLES: usize = 512;
pub const LMEDS_SCALE_FACTOR: f64 = 1.4826;
pub const LMEDS_CUTOFF: f64 = 2.5;

impl Default for LmedsConfig {
    fn default() -> Self {
        LmedsConfig {
            samples: LMEDS_SAMPLES,
            seed: 0,
            cutoff: LMEDS_CUTOFF,
            min_scale_px: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmedsOutcome {
    pub matches: MatchSet,
    pub fundamental: Option<Matrix3<f64>>,
    pub median_sampson: Option<f64>,
    /// Set when the input was too small to verify and was passed through.
    pub passed_through: bool,
}

fn median(values: &mut [f64]) -> f64 {
    let mid = values.len() / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

pub fn lmeds_verify(matches: &MatchSet, a: &KeypointSet, b: &KeypointSet, cfg: &LmedsConfig) -> Result<LmedsOutcome> {
    matches.validate(a.len(), b.len())?;
    if matches.len() < 8 {
        warn!(
            "pair ({}, {}): {} matches, fewer than 8; skipping fundamental-matrix check",
            matches.frame_i,
            matches.frame_j,
            matches.len()
        );
        return Ok(LmedsOutcome {
            matches: matches.clone(),
            fundamental: None,
            median_sampson: None,
            passed_through: true,
        });
    }
    let corr: Vec<(Pixel, Pixel)> = matches.pairs.iter().map(|&(m, n)| (a.pixel(m), b.pixel(n))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, Matrix3<f64>)> = None;
    let mut errors = vec![0.0; corr.len()];
    let mut sample_corr = Vec::with_capacity(8);
    for _ in 0..cfg.samples {
        sample_corr.clear();
        sample_corr.extend(sample(&mut rng, corr.len(), 8).into_iter().map(|i| corr[i]));
        let Ok(f) = eight_point_fundamental(&sample_corr) else {
            continue;
        };
        for (e, &(pa, pb)) in errors.iter_mut().zip(&corr) {
            *e = sampson_error(&f, pa, pb);
        }
        let med = median(&mut errors);
        if best.as_ref().is_none_or(|(bm, _)| med < *bm) {
            best = Some((med, f));
        }
    }
    let Some((med, f)) = best else {
        debug!(
            "pair ({}, {}): every LMedS sample was degenerate; skipping fundamental-matrix check",
            matches.frame_i, matches.frame_j
        );
        return Ok(LmedsOutcome {
            matches: matches.clone(),
            fundamental: None,
            median_sampson: None,
            passed_through: true,
        });
    };
    let scale = (LMEDS_SCALE_FACTOR * med.sqrt()).max(cfg.min_scale_px);
    let threshold = cfg.cutoff * scale;
    let kept: Vec<(usize, usize)> = matches
        .pairs
        .iter()
        .zip(&corr)
        .filter(|(_, &(pa, pb))| sampson_error(&f, pa, pb).sqrt() < threshold)
        .map(|(&p, _)| p)
        .collect();
    Ok(LmedsOutcome {
        matches: MatchSet::new(matches.frame_i, matches.frame_j, kept),
        fundamental: Some(f),
        median_sampson: Some(med),
        passed_through: false,
    })
}

#[cfg(test)]
mod tests {
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::geometry::Intrinsics;

    fn random_keypoints(rng: &mut impl Rng, n: usize, dim: usize) -> KeypointSet {
        let pixels = (0..n).map(|_| Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))).collect();
        let desc = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        KeypointSet::new(pixels, dim, desc).unwrap()
    }

    fn brute_force_mutual(a: &KeypointSet, b: &KeypointSet) -> Vec<(usize, usize)> {
        let nearest = |x: &[f64], set: &KeypointSet| {
            let mut best = (f64::INFINITY, usize::MAX);
            for n in 0..set.len() {
                let d: f64 = x.iter().zip(set.descriptor(n)).map(|(p, q)| (p - q).powi(2)).sum();
                if d < best.0 {
                    best = (d, n);
                }
            }
            best.1
        };
        let mut out = Vec::new();
        for m in 0..a.len() {
            let n = nearest(a.descriptor(m), b);
            if nearest(b.descriptor(n), a) == m {
                out.push((m, n));
            }
        }
        out
    }

    #[test]
    fn descriptors_are_normalized() {
        let k = KeypointSet::new(vec![Pixel::new(0.0, 0.0)], 2, vec![3.0, 4.0]).unwrap();
        assert!((k.descriptor(0)[0] - 0.6).abs() < 1e-15);
        assert!(KeypointSet::new(vec![Pixel::new(0.0, 0.0)], 2, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn identical_sets_match_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_keypoints(&mut rng, 50, 16);
        let m = mutual_nn_match(&a, &a, &MatchConfig::default()).unwrap();
        assert_eq!(m.pairs, (0..50).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn equidistant_tie_resolves_to_lower_index() {
        let a = KeypointSet::new(vec![Pixel::new(0.0, 0.0)], 2, vec![1.0, 0.0]).unwrap();
        let b = KeypointSet::new(vec![Pixel::new(0.0, 0.0); 2], 2, vec![0.0, 1.0, 0.0, -1.0]).unwrap();
        let m = mutual_nn_match(&a, &b, &MatchConfig::default()).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let a = random_keypoints(&mut rng, 100, 8);
            let b = random_keypoints(&mut rng, 100, 8);
            let m = mutual_nn_match(&a, &b, &MatchConfig::default()).unwrap();
            assert_eq!(m.pairs, brute_force_mutual(&a, &b));
        }
    }

    #[test]
    fn larger_k_is_superset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_keypoints(&mut rng, 60, 8);
        let b = random_keypoints(&mut rng, 70, 8);
        let m1 = mutual_nn_match(&a, &b, &MatchConfig { k: 1 }).unwrap();
        let m3 = mutual_nn_match(&a, &b, &MatchConfig { k: 3 }).unwrap();
        assert!(m1.pairs.iter().all(|p| m3.pairs.contains(p)));
        assert!(m3.len() > m1.len());
    }

    proptest! {
        #[test]
        fn mutual_matching_is_symmetric(seed in 0u64..500, k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_keypoints(&mut rng, 40, 4);
            let b = random_keypoints(&mut rng, 30, 4);
            let cfg = MatchConfig { k };
            let ab = mutual_nn_match(&a, &b, &cfg).unwrap();
            let ba = mutual_nn_match(&b, &a, &cfg).unwrap();
            prop_assert_eq!(ab.transposed().pairs, ba.pairs);
        }
    }

    /// Two calibrated views of random 3D points; F built from the planted motion.
    struct EpipolarScene {
        corr: Vec<(Pixel, Pixel)>,
        fundamental: Matrix3<f64>,
    }

    fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
        Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
    }

    fn epipolar_scene(rng: &mut impl Rng, n: usize, rotation: Matrix3<f64>, t: Vector3<f64>) -> EpipolarScene {
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let kmat = Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0);
        let kinv = kmat.try_inverse().unwrap();
        let mut corr = Vec::new();
        while corr.len() < n {
            let x = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(3.0..8.0));
            let y = rotation * x + t;
            let (pa, pb) = (k.project(&x), k.project(&y));
            if y.z > 0.1 && k.contains(pa) && k.contains(pb) {
                corr.push((pa, pb));
            }
        }
        let e = skew(&t) * rotation;
        let f = kinv.transpose() * e * kinv;
        EpipolarScene {
            corr,
            fundamental: f / f.norm(),
        }
    }

    fn random_motion(rng: &mut impl Rng) -> (Matrix3<f64>, Vector3<f64>) {
        let axis = Unit::new_normalize(Vector3::new(rng.random(), rng.random(), rng.random()));
        let r = *Rotation3::from_axis_angle(&axis, rng.random_range(0.05..0.3)).matrix();
        let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5), rng.random_range(-0.3..0.3));
        (r, t)
    }

    #[test]
    fn eight_point_fits_exact_correspondences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (r, t) = random_motion(&mut rng);
            let scene = epipolar_scene(&mut rng, 30, r, t);
            let f = eight_point_fundamental(&scene.corr).unwrap();
            for &(a, b) in &scene.corr {
                assert!(sampson_error(&f, a, b) < 1e-8);
            }
            // same matrix as the planted one up to sign
            let d = (f - scene.fundamental).norm().min((f + scene.fundamental).norm());
            assert!(d < 1e-6, "distance to planted F {d}");
            let sv = f.svd(false, false).singular_values;
            assert!(sv.min() < 1e-12 * sv.max());
            assert!((f.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_translation_epipole_follows_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Vector3::new(0.4, 0.1, 0.2);
        let scene = epipolar_scene(&mut rng, 40, Matrix3::identity(), t);
        let f = eight_point_fundamental(&scene.corr).unwrap();
        // epipole in image b is K t; it spans the left null space of F
        let kmat = Matrix3::new(500.0, 0.0, 320.0, 0.0, 500.0, 240.0, 0.0, 0.0, 1.0);
        let e = kmat * t;
        assert!((f.transpose() * e).norm() < 1e-8 * e.norm());
    }

    #[test]
    fn zero_motion_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let corr: Vec<_> = (0..20)
            .map(|_| {
                let p = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                (p, p)
            })
            .collect();
        assert!(matches!(eight_point_fundamental(&corr), Err(Error::Degenerate(_))));
    }

    fn keypoints_from(pixels: Vec<Pixel>) -> KeypointSet {
        let n = pixels.len();
        KeypointSet::new(pixels, 1, vec![1.0; n]).unwrap()
    }

    fn planted_lmeds_problem(rng: &mut impl Rng, inliers: usize, outliers: usize) -> (KeypointSet, KeypointSet, MatchSet, usize) {
        let (r, t) = random_motion(rng);
        let scene = epipolar_scene(rng, inliers, r, t);
        let mut pa: Vec<Pixel> = scene.corr.iter().map(|c| c.0).collect();
        let mut pb: Vec<Pixel> = scene.corr.iter().map(|c| c.1).collect();
        for _ in 0..outliers {
            pa.push(Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)));
            pb.push(Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)));
        }
        let n = pa.len();
        let matches = MatchSet::new(0, 1, (0..n).map(|i| (i, i)).collect());
        (keypoints_from(pa), keypoints_from(pb), matches, inliers)
    }

    #[test]
    fn lmeds_keeps_all_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, b, matches, _) = planted_lmeds_problem(&mut rng, 60, 0);
        let out = lmeds_verify(&matches, &a, &b, &LmedsConfig::default()).unwrap();
        assert_eq!(out.matches, matches);
        assert!(!out.passed_through);
    }

    #[test]
    fn lmeds_rejects_planted_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..5 {
            // 50 inliers plus 30% of the final set as uniform outliers
            let (a, b, matches, n_in) = planted_lmeds_problem(&mut rng, 50, 21);
            let cfg = LmedsConfig {
                seed: trial,
                ..LmedsConfig::default()
            };
            let out = lmeds_verify(&matches, &a, &b, &cfg).unwrap();
            let kept_in = out.matches.pairs.iter().filter(|p| p.0 < n_in).count();
            let kept_out = out.matches.pairs.iter().filter(|p| p.0 >= n_in).count();
            assert!(kept_in as f64 >= 0.95 * n_in as f64, "recall {kept_in}/{n_in}");
            assert!(kept_out as f64 <= 0.10 * 21.0, "{kept_out} outliers survived");
        }
    }

    #[test]
    fn lmeds_passes_small_sets_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, b, matches, _) = planted_lmeds_problem(&mut rng, 7, 0);
        let out = lmeds_verify(&matches, &a, &b, &LmedsConfig::default()).unwrap();
        assert!(out.passed_through);
        assert_eq!(out.matches, matches);
    }

    #[test]
    fn lmeds_passes_zero_motion_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pixels: Vec<Pixel> = (0..30)
            .map(|_| Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)))
            .collect();
        let (a, b) = (keypoints_from(pixels.clone()), keypoints_from(pixels));
        let matches = MatchSet::new(0, 1, (0..30).map(|m| (m, m)).collect());
        let out = lmeds_verify(&matches, &a, &b, &LmedsConfig::default()).unwrap();
        assert!(out.passed_through);
        assert_eq!(out.matches, matches);
    }

    #[test]
    fn lmeds_is_idempotent_on_its_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b, matches, _) = planted_lmeds_problem(&mut rng, 80, 30);
        let cfg = LmedsConfig::default();
        let once = lmeds_verify(&matches, &a, &b, &cfg).unwrap();
        let twice = lmeds_verify(&once.matches, &a, &b, &cfg).unwrap();
        assert_eq!(once.matches, twice.matches);
    }
}
