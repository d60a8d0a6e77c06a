//! Cross-attention score maps: computation, spatial interpolation and
//! cropping of captured maps, and the composer that averages the attended
//! features from the regional prompt path with those from the captured
//! prior scores.

use crate::error::{Error, Result};
use crate::tiling::RegionSpec;
use crate::types::{resize_bilinear_with, Mat};

/// Row-stochastic relevance scores between the spatial cells of one
/// cross-attention site and the text tokens, plus the metadata needed to
/// map latent coordinates onto the site's query grid.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub spatial_height: usize,
    pub spatial_width: usize,
    pub token_count: usize,
    /// `(spatial_height * spatial_width) x token_count`, rows in row-major
    /// spatial order.
    pub scores: Mat,
    pub site_id: String,
    /// Latent-to-site scale at this attention site.
    pub downsample_factor: usize,
}

impl AttentionMap {
    pub fn new(
        spatial_height: usize,
        spatial_width: usize,
        scores: Mat,
        site_id: impl Into<String>,
        downsample_factor: usize,
    ) -> Result<Self> {
        if scores.rows != spatial_height * spatial_width {
            return Err(Error::Shape(format!(
                "attention map has {} rows, expected {spatial_height}x{spatial_width}",
                scores.rows
            )));
        }
        Ok(AttentionMap {
            spatial_height,
            spatial_width,
            token_count: scores.cols,
            scores,
            site_id: site_id.into(),
            downsample_factor,
        })
    }

    /// Maximum deviation of any row sum from 1.
    pub fn row_sum_error(&self) -> f64 {
        (0..self.scores.rows)
            .map(|r| (self.scores.row(r).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Captured maps for every cross-attention site (heads flattened into the
/// site id) at one timestep.
#[derive(Debug, Clone)]
pub struct AttentionPriorSet {
    pub maps: Vec<AttentionMap>,
    pub timestep: usize,
}

impl AttentionPriorSet {
    pub fn empty(timestep: usize) -> Self {
        AttentionPriorSet {
            maps: Vec::new(),
            timestep,
        }
    }
}

/// `softmax(Q K^T / sqrt(d))`, row-stochastic by construction.
pub fn attention_scores(q: &Mat, k: &Mat) -> Result<Mat> {
    if q.cols != k.cols {
        return Err(Error::Shape(format!(
            "attention_scores: query dim {} does not match key dim {}",
            q.cols, k.cols
        )));
    }
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut out = Mat::zeros(q.rows, k.rows);
    let mut logits = vec![0.0; k.rows];
    for r in 0..q.rows {
        let qr = q.row(r);
        let mut max = f64::NEG_INFINITY;
        for (j, logit) in logits.iter_mut().enumerate() {
            let kr = k.row(j);
            let dot: f64 = qr.iter().zip(kr.iter()).map(|(a, b)| a * b).sum();
            *logit = dot * scale;
            max = max.max(*logit);
        }
        let mut sum = 0.0;
        for logit in logits.iter_mut() {
            *logit = (*logit - max).exp();
            sum += *logit;
        }
        for (j, logit) in logits.iter().enumerate() {
            out.set(r, j, logit / sum);
        }
    }
    Ok(out)
}

/// Upsamples the spatial axes of a captured map bilinearly, leaving the token
/// axis untouched. Downscaling is rejected.
pub fn interpolate_attention(
    a: &AttentionMap,
    target_height: usize,
    target_width: usize,
) -> Result<AttentionMap> {
    if target_height < a.spatial_height || target_width < a.spatial_width {
        return Err(Error::Argument(format!(
            "interpolate_attention target {target_height}x{target_width} is smaller than \
             source {}x{}",
            a.spatial_height, a.spatial_width
        )));
    }
    if target_height == a.spatial_height && target_width == a.spatial_width {
        return Ok(a.clone());
    }
    let mut scores = Mat::zeros(target_height * target_width, a.token_count);
    for tok in 0..a.token_count {
        let plane = resize_bilinear_with(
            a.spatial_height,
            a.spatial_width,
            target_height,
            target_width,
            |y, x| a.scores.get(y * a.spatial_width + x, tok),
        );
        for y in 0..target_height {
            for x in 0..target_width {
                scores.set(y * target_width + x, tok, plane.get(y, x));
            }
        }
    }
    AttentionMap::new(
        target_height,
        target_width,
        scores,
        a.site_id.clone(),
        a.downsample_factor,
    )
}

/// Spatially windows a map to `spec` (already scaled to this site's
/// resolution). Rows are copied verbatim, so row-stochasticity is preserved
/// exactly.
pub fn crop_attention(a: &AttentionMap, spec: &RegionSpec) -> Result<AttentionMap> {
    if !spec.fits(a.spatial_height, a.spatial_width) {
        return Err(Error::Argument(format!(
            "attention crop ({},{}) {}x{} exceeds map {}x{}",
            spec.top, spec.left, spec.height, spec.width, a.spatial_height, a.spatial_width
        )));
    }
    let mut scores = Mat::zeros(spec.height * spec.width, a.token_count);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let src = (spec.top + y) * a.spatial_width + (spec.left + x);
            let dst = y * spec.width + x;
            for tok in 0..a.token_count {
                scores.set(dst, tok, a.scores.get(src, tok));
            }
        }
    }
    AttentionMap::new(
        spec.height,
        spec.width,
        scores,
        a.site_id.clone(),
        a.downsample_factor,
    )
}

/// The composer: averages the attended features computed from the regional
/// prompt (`softmax(q k_semantic^T / sqrt(d)) * v_semantic`) with the
/// features obtained by applying the captured prior scores to the global
/// prompt's value projection.
pub fn compose_attention(
    q_region: &Mat,
    k_semantic: &Mat,
    v_semantic: &Mat,
    a_prior: &AttentionMap,
    v_global: &Mat,
) -> Result<Mat> {
    if q_region.cols != k_semantic.cols {
        return Err(Error::Shape(format!(
            "compose_attention: q_region dim {} does not match k_semantic dim {}",
            q_region.cols, k_semantic.cols
        )));
    }
    if k_semantic.rows != v_semantic.rows {
        return Err(Error::Shape(format!(
            "compose_attention: k_semantic has {} tokens but v_semantic has {}",
            k_semantic.rows, v_semantic.rows
        )));
    }
    if a_prior.scores.rows != q_region.rows {
        return Err(Error::Shape(format!(
            "compose_attention: a_prior has {} rows but q_region has {}",
            a_prior.scores.rows, q_region.rows
        )));
    }
    if a_prior.token_count != v_global.rows {
        return Err(Error::Shape(format!(
            "compose_attention: a_prior has {} tokens but v_global has {}",
            a_prior.token_count, v_global.rows
        )));
    }
    if v_semantic.cols != v_global.cols {
        return Err(Error::Shape(format!(
            "compose_attention: v_semantic width {} does not match v_global width {}",
            v_semantic.cols, v_global.cols
        )));
    }
    let c_s = attention_scores(q_region, k_semantic)?.matmul(v_semantic)?;
    let c_a = a_prior.scores.matmul(v_global)?;
    let mut out = c_s;
    for (o, a) in out.data.iter_mut().zip(c_a.data.iter()) {
        *o = (*o + a) / 2.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_stochastic_map(h: usize, w: usize, k: usize, rng: &mut ChaCha12Rng) -> AttentionMap {
        let mut scores = Mat::zeros(h * w, k);
        for r in 0..h * w {
            let mut row: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let sum: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= sum;
            }
            for (j, v) in row.iter().enumerate() {
                scores.set(r, j, *v);
            }
        }
        AttentionMap::new(h, w, scores, "test", 1).unwrap()
    }

    #[test]
    fn uniform_logits_give_uniform_row() {
        let q = Mat::from_rows(vec![vec![0.0]]).unwrap();
        let k = Mat::from_rows(vec![vec![0.0], vec![0.0]]).unwrap();
        let a = attention_scores(&q, &k).unwrap();
        assert!((a.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((a.get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_token_rows_are_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let q = random_mat(5, 3, &mut rng);
        let k = random_mat(1, 3, &mut rng);
        let a = attention_scores(&q, &k).unwrap();
        assert!(a.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn scores_match_scalar_softmax_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let q = random_mat(4, 3, &mut rng);
        let k = random_mat(5, 3, &mut rng);
        let a = attention_scores(&q, &k).unwrap();
        for r in 0..4 {
            let logits: Vec<f64> = (0..5)
                .map(|j| (0..3).map(|d| q.get(r, d) * k.get(j, d)).sum::<f64>() / (3.0f64).sqrt())
                .collect();
            let denom: f64 = logits.iter().map(|l| l.exp()).sum();
            for (j, l) in logits.iter().enumerate() {
                assert!((a.get(r, j) - l.exp() / denom).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn scores_dimension_mismatch() {
        let q = Mat::zeros(2, 3);
        let k = Mat::zeros(2, 4);
        assert!(attention_scores(&q, &k).is_err());
    }

    #[test]
    fn interpolate_identity_at_same_size() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a = random_stochastic_map(3, 4, 5, &mut rng);
        let b = interpolate_attention(&a, 3, 4).unwrap();
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn interpolate_preserves_constant_rows() {
        let v = [0.2, 0.5, 0.3];
        let scores = Mat::from_fn(6, 3, |_, j| v[j]);
        let a = AttentionMap::new(2, 3, scores, "s", 1).unwrap();
        let b = interpolate_attention(&a, 5, 7).unwrap();
        for r in 0..b.scores.rows {
            for (j, want) in v.iter().enumerate() {
                assert!((b.scores.get(r, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interpolate_preserves_row_sums() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..20 {
            let h = rng.random_range(2..6);
            let w = rng.random_range(2..6);
            let k = rng.random_range(1..8);
            let a = random_stochastic_map(h, w, k, &mut rng);
            let b =
                interpolate_attention(&a, h + rng.random_range(0..6), w + rng.random_range(0..6))
                    .unwrap();
            assert!(b.row_sum_error() < 1e-5, "row sums drifted");
        }
    }

    #[test]
    fn interpolate_rejects_downscale() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let a = random_stochastic_map(4, 4, 2, &mut rng);
        assert!(interpolate_attention(&a, 3, 4).is_err());
    }

    #[test]
    fn interpolate_commutes_with_token_permutation() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let a = random_stochastic_map(3, 3, 4, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let permuted_scores = Mat::from_fn(9, 4, |r, j| a.scores.get(r, perm[j]));
        let pa = AttentionMap::new(3, 3, permuted_scores, "s", 1).unwrap();
        let left = interpolate_attention(&pa, 6, 5).unwrap();
        let right = interpolate_attention(&a, 6, 5).unwrap();
        for r in 0..left.scores.rows {
            for (j, &p) in perm.iter().enumerate() {
                assert!((left.scores.get(r, j) - right.scores.get(r, p)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn crop_full_extent_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let a = random_stochastic_map(4, 5, 3, &mut rng);
        let spec = RegionSpec {
            index: 0,
            top: 0,
            left: 0,
            height: 4,
            width: 5,
        };
        let b = crop_attention(&a, &spec).unwrap();
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn crop_single_cell() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let a = random_stochastic_map(4, 5, 3, &mut rng);
        let spec = RegionSpec {
            index: 0,
            top: 2,
            left: 3,
            height: 1,
            width: 1,
        };
        let b = crop_attention(&a, &spec).unwrap();
        assert_eq!(b.scores.rows, 1);
        for j in 0..3 {
            assert_eq!(b.scores.get(0, j), a.scores.get(2 * 5 + 3, j));
        }
    }

    #[test]
    fn crop_matches_index_oracle_and_preserves_rows() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let a = random_stochastic_map(6, 7, 4, &mut rng);
        let spec = RegionSpec {
            index: 0,
            top: 1,
            left: 2,
            height: 3,
            width: 4,
        };
        let b = crop_attention(&a, &spec).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                for j in 0..4 {
                    assert_eq!(
                        b.scores.get(y * 4 + x, j),
                        a.scores.get((1 + y) * 7 + (2 + x), j)
                    );
                }
            }
        }
        assert!(b.row_sum_error() < 1e-12);
    }

    #[test]
    fn crop_out_of_bounds() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let a = random_stochastic_map(4, 4, 2, &mut rng);
        let spec = RegionSpec {
            index: 0,
            top: 2,
            left: 2,
            height: 3,
            width: 2,
        };
        assert!(crop_attention(&a, &spec).is_err());
    }

    #[test]
    fn compose_collapses_when_paths_agree() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let q = random_mat(4, 3, &mut rng);
        let k = random_mat(5, 3, &mut rng);
        let v = random_mat(5, 2, &mut rng);
        let prior_scores = attention_scores(&q, &k).unwrap();
        let prior = AttentionMap::new(2, 2, prior_scores, "s", 1).unwrap();
        let c = compose_attention(&q, &k, &v, &prior, &v).unwrap();
        let c_s = attention_scores(&q, &k).unwrap().matmul(&v).unwrap();
        assert_eq!(c.data, c_s.data);
    }

    #[test]
    fn compose_zero_values_give_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let q = random_mat(4, 3, &mut rng);
        let k = random_mat(5, 3, &mut rng);
        let prior = random_stochastic_map(2, 2, 6, &mut rng);
        let c = compose_attention(&q, &k, &Mat::zeros(5, 2), &prior, &Mat::zeros(6, 2)).unwrap();
        assert!(c.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compose_matches_two_path_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let q = random_mat(4, 2, &mut rng);
        let k = random_mat(3, 2, &mut rng);
        let v = random_mat(3, 2, &mut rng);
        let prior = random_stochastic_map(2, 2, 5, &mut rng);
        let vg = random_mat(5, 2, &mut rng);
        let c = compose_attention(&q, &k, &v, &prior, &vg).unwrap();
        // Brute-force both paths.
        let a = attention_scores(&q, &k).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let cs: f64 = (0..3).map(|t| a.get(i, t) * v.get(t, j)).sum();
                let ca: f64 = (0..5).map(|t| prior.scores.get(i, t) * vg.get(t, j)).sum();
                assert!((c.get(i, j) - (cs + ca) / 2.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn compose_is_jointly_linear_in_values() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let q = random_mat(4, 2, &mut rng);
        let k = random_mat(3, 2, &mut rng);
        let v1 = random_mat(3, 2, &mut rng);
        let v2 = random_mat(3, 2, &mut rng);
        let prior = random_stochastic_map(2, 2, 5, &mut rng);
        let g1 = random_mat(5, 2, &mut rng);
        let g2 = random_mat(5, 2, &mut rng);

        let scale = |m: &Mat, s: f64| Mat::from_fn(m.rows, m.cols, |r, c| s * m.get(r, c));
        let add = |a: &Mat, b: &Mat| Mat::from_fn(a.rows, a.cols, |r, c| a.get(r, c) + b.get(r, c));

        let lhs = compose_attention(
            &q,
            &k,
            &add(&scale(&v1, 2.0), &v2),
            &prior,
            &add(&scale(&g1, 2.0), &g2),
        )
        .unwrap();
        let c1 = compose_attention(&q, &k, &v1, &prior, &g1).unwrap();
        let c2 = compose_attention(&q, &k, &v2, &prior, &g2).unwrap();
        for i in 0..lhs.data.len() {
            assert!((lhs.data[i] - (2.0 * c1.data[i] + c2.data[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn compose_output_bounded_by_value_norms() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let q = random_mat(6, 3, &mut rng);
        let k = random_mat(4, 3, &mut rng);
        let v = random_mat(4, 2, &mut rng);
        let prior = random_stochastic_map(2, 3, 7, &mut rng);
        let vg = random_mat(7, 2, &mut rng);
        let c = compose_attention(&q, &k, &v, &prior, &vg).unwrap();
        let inf = |m: &Mat| m.data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        assert!(inf(&c) <= (inf(&v) + inf(&vg)) / 2.0 + 1e-12);
    }

    #[test]
    fn compose_names_offending_operand() {
        let q = Mat::zeros(4, 2);
        let k = Mat::zeros(3, 2);
        let v = Mat::zeros(2, 2);
        let prior = AttentionMap::new(2, 2, Mat::zeros(4, 5), "s", 1).unwrap();
        let vg = Mat::zeros(5, 2);
        let err = compose_attention(&q, &k, &v, &prior, &vg).unwrap_err();
        assert!(err.to_string().contains("v_semantic"), "{err}");
    }
}
