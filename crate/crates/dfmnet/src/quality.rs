//! Boundary-alignment depth-quality analysis. Depth maps that agree with
//! the RGB image put their discontinuities where the image puts its
//! edges; depth maps that are misaligned, blurry, or from a different
//! scene do not. The analyzer binarizes Sobel edge maps of both inputs at
//! a shared threshold and scores their overlap with a Dice coefficient at
//! three scales, then contrasts genuine pairs with a deliberately
//! shuffled (deranged) pairing to show how much signal the score carries.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::maxpool2;
use crate::tensor::{Shape, Tensor};
use crate::weights::splitmix64;

/// Dice denominators get this guard so empty masks score 0 instead of
/// dividing by zero; any non-empty mask absorbs it in f32.
pub const DICE_EPS: f32 = 1e-8;

/// Rec. 601 luma of a `(1, 3, h, w)` tensor in [0, 1].
pub fn luma(rgb: &Tensor) -> Result<Tensor> {
    let s = rgb.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "luma expects (1, 3, h, w), got {s}"
        )));
    }
    Tensor::from_fn(Shape::new(1, 1, s.h, s.w), |_, _, y, x| {
        0.299 * rgb.get(0, 0, y, x) + 0.587 * rgb.get(0, 1, y, x) + 0.114 * rgb.get(0, 2, y, x)
    })
}

/// Sobel gradient magnitude of a single-channel map, replicating the
/// border and normalized so the strongest edge is 1. An all-flat input
/// returns zeros.
pub fn sobel_edges(gray: &Tensor) -> Result<Tensor> {
    let s = gray.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::ShapeMismatch(format!(
            "sobel expects (1, 1, h, w), got {s}"
        )));
    }
    let (h, w) = (s.h, s.w);
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        gray.get(0, 0, y, x) as f64
    };
    let mut mag = vec![0f64; h * w];
    let mut peak = 0f64;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let m = (gx * gx + gy * gy).sqrt();
            peak = peak.max(m);
            mag[(y as usize) * w + x as usize] = m;
        }
    }
    let data = if peak <= 1e-12 {
        vec![0f32; h * w]
    } else {
        mag.iter().map(|&m| (m / peak) as f32).collect()
    };
    Tensor::new(Shape::new(1, 1, h, w), data)
}

/// Binarizes a map at `threshold` (inclusive) into {0, 1}.
pub fn binarize(t: &Tensor, threshold: f32) -> Tensor {
    let data = t
        .data()
        .iter()
        .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_parts(t.shape(), data)
}

/// Dice coefficient of two binary masks: `2|a and b| / (|a| + |b|)`.
pub fn dice(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "dice masks {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x != 0.0, y != 0.0);
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    Ok(2.0 * inter as f32 / (total as f32 + DICE_EPS))
}

/// Boundary-alignment score of one RGB/depth pair in [0, 1] space.
#[derive(Clone, Debug, Serialize)]
pub struct PairReport {
    /// Dice of the binarized edge masks at full, half, and quarter scale.
    pub dice_per_scale: [f32; 3],
    pub mean_dice: f64,
    pub edge_pixels_rgb: usize,
    pub edge_pixels_depth: usize,
    pub threshold: f32,
}

/// Scores how well depth discontinuities track image edges. Inputs are
/// raw (unnormalized) tensors in [0, 1].
pub fn boundary_alignment(rgb: &Tensor, depth: &Tensor, threshold: f32) -> Result<PairReport> {
    if rgb.shape().h != depth.shape().h || rgb.shape().w != depth.shape().w {
        return Err(Error::ShapeMismatch(format!(
            "pair sizes {} vs {}",
            rgb.shape(),
            depth.shape()
        )));
    }
    let edges_rgb = binarize(&sobel_edges(&luma(rgb)?)?, threshold);
    let edges_depth = binarize(&sobel_edges(depth)?, threshold);
    let count = |t: &Tensor| t.data().iter().filter(|&&v| v != 0.0).count();
    let mut dice_per_scale = [0f32; 3];
    let (mut a, mut b) = (edges_rgb.clone(), edges_depth.clone());
    for (scale, slot) in dice_per_scale.iter_mut().enumerate() {
        *slot = dice(&a, &b)?;
        if scale < 2 {
            a = maxpool2(&a)?;
            b = maxpool2(&b)?;
        }
    }
    let mean_dice = dice_per_scale.iter().map(|&d| d as f64).sum::<f64>() / 3.0;
    Ok(PairReport {
        dice_per_scale,
        mean_dice,
        edge_pixels_rgb: count(&edges_rgb),
        edge_pixels_depth: count(&edges_depth),
        threshold,
    })
}

/// Summary of per-pair mean Dice scores over a corpus.
#[derive(Clone, Debug, Serialize)]
pub struct DistributionStats {
    pub mean_dice: f64,
    pub per_scale_means: [f64; 3],
    /// Interior deciles (10% through 90%) of the per-pair means.
    pub deciles: [f64; 9],
}

fn summarize(reports: &[PairReport]) -> DistributionStats {
    let n = reports.len() as f64;
    let mut per_scale_means = [0f64; 3];
    for r in reports {
        for (m, &d) in per_scale_means.iter_mut().zip(&r.dice_per_scale) {
            *m += d as f64 / n;
        }
    }
    let mut means: Vec<f64> = reports.iter().map(|r| r.mean_dice).collect();
    means.sort_by(|a, b| a.total_cmp(b));
    let mut deciles = [0f64; 9];
    for (k, d) in deciles.iter_mut().enumerate() {
        let pos = (k + 1) as f64 / 10.0 * (means.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        *d = means[lo] * (1.0 - frac) + means[hi] * frac;
    }
    DistributionStats {
        mean_dice: means.iter().sum::<f64>() / n,
        per_scale_means,
        deciles,
    }
}

/// Deterministic derangement of `0..n`: seeded Fisher-Yates shuffles,
/// retried with an advanced seed until no index maps to itself.
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "derangement needs at least 2 items, got {n}"
        )));
    }
    let mut state = seed;
    loop {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = (splitmix64(&mut state) % (i as u64 + 1)) as usize;
            perm.swap(i, j);
        }
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Corpus-level contrast between genuine and deranged pairings.
#[derive(Clone, Debug, Serialize)]
pub struct CorpusReport {
    pub pairs: usize,
    pub threshold: f32,
    pub aligned: DistributionStats,
    pub mismatched: DistributionStats,
    /// Aligned minus mismatched mean Dice; positive values mean the score
    /// actually senses pairing.
    pub separation: f64,
    pub mismatch_seed: u64,
}

/// Scores every genuine pair and every deranged pair (RGB `i` against
/// depth `perm[i]`) and summarizes both distributions.
pub fn corpus_alignment(
    rgbs: &[Tensor],
    depths: &[Tensor],
    threshold: f32,
    mismatch_seed: u64,
) -> Result<CorpusReport> {
    if rgbs.len() != depths.len() {
        return Err(Error::InvalidArgument(format!(
            "corpus has {} rgb images but {} depth maps",
            rgbs.len(),
            depths.len()
        )));
    }
    if rgbs.len() < 2 {
        return Err(Error::InvalidArgument(
            "corpus analysis needs at least 2 pairs".into(),
        ));
    }
    let mut aligned = Vec::with_capacity(rgbs.len());
    for (rgb, depth) in rgbs.iter().zip(depths) {
        aligned.push(boundary_alignment(rgb, depth, threshold)?);
    }
    let perm = derangement(rgbs.len(), mismatch_seed)?;
    let mut mismatched = Vec::with_capacity(rgbs.len());
    for (i, rgb) in rgbs.iter().enumerate() {
        mismatched.push(boundary_alignment(rgb, &depths[perm[i]], threshold)?);
    }
    let aligned = summarize(&aligned);
    let mismatched = summarize(&mismatched);
    let separation = aligned.mean_dice - mismatched.mean_dice;
    Ok(CorpusReport {
        pairs: rgbs.len(),
        threshold,
        aligned,
        mismatched,
        separation,
        mismatch_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_mask(size: usize, y0: usize, x0: usize, side: usize) -> Tensor {
        Tensor::from_fn(Shape::new(1, 1, size, size), |_, _, y, x| {
            if y >= y0 && y < y0 + side && x >= x0 && x < x0 + side {
                1.0
            } else {
                0.0
            }
        })
        .unwrap()
    }

    fn rgb_from_gray(gray: &Tensor) -> Tensor {
        let s = gray.shape();
        Tensor::from_fn(Shape::new(1, 3, s.h, s.w), |_, _, y, x| gray.get(0, 0, y, x))
            .unwrap()
    }

    #[test]
    fn dice_algebra_hits_exact_values() {
        let a = square_mask(8, 0, 0, 4);
        let b = square_mask(8, 4, 4, 4);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        // 4 and 4 pixels with 2 shared: 2*2 / 8 = 0.5.
        let c = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, y, x| {
            (y == 0 && x < 4) as u8 as f32
        })
        .unwrap();
        let d = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, y, x| {
            ((y == 0 && x >= 2) || (y == 1 && x < 2)) as u8 as f32
        })
        .unwrap();
        assert_eq!(dice(&c, &d).unwrap(), 0.5);
        let empty = Tensor::zeros(Shape::new(1, 1, 4, 4));
        assert_eq!(dice(&empty, &empty).unwrap(), 0.0);
    }

    #[test]
    fn sobel_finds_a_step_edge_and_ignores_flat_maps() {
        let step = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, _, x| {
            (x >= 4) as u8 as f32
        })
        .unwrap();
        let e = sobel_edges(&step).unwrap();
        // Strongest response on the two columns around the step.
        assert_eq!(e.get(0, 0, 4, 3), 1.0);
        assert_eq!(e.get(0, 0, 4, 4), 1.0);
        assert_eq!(e.get(0, 0, 4, 0), 0.0);
        let flat = Tensor::full(Shape::new(1, 1, 8, 8), 0.7).unwrap();
        assert!(sobel_edges(&flat).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn luma_weights_sum_to_one_on_gray_inputs() {
        let gray = Tensor::full(Shape::new(1, 3, 4, 4), 0.25).unwrap();
        let l = luma(&gray).unwrap();
        for &v in l.data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn aligned_square_scores_near_one_and_shifted_square_near_zero() {
        let obj = square_mask(32, 4, 4, 8);
        let rgb = rgb_from_gray(&obj);
        let same = boundary_alignment(&rgb, &obj, 0.1).unwrap();
        assert!(same.mean_dice > 0.99, "aligned {}", same.mean_dice);
        let far = square_mask(32, 20, 20, 8);
        let other = boundary_alignment(&rgb, &far, 0.1).unwrap();
        assert_eq!(other.dice_per_scale[0], 0.0, "mismatched {:?}", other.dice_per_scale);
        assert!(same.edge_pixels_rgb > 0 && same.edge_pixels_depth > 0);
    }

    #[test]
    fn derangement_is_deterministic_and_fixed_point_free() {
        for n in [2, 3, 5, 8, 50] {
            let p = derangement(n, 7).unwrap();
            let q = derangement(n, 7).unwrap();
            assert_eq!(p, q);
            assert!(p.iter().enumerate().all(|(i, &v)| i != v));
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }
        assert!(derangement(1, 0).is_err());
        assert_ne!(derangement(8, 1).unwrap(), derangement(8, 2).unwrap());
    }

    #[test]
    fn corpus_contrast_separates_real_from_shuffled_pairs() {
        let mut rgbs = Vec::new();
        let mut depths = Vec::new();
        for i in 0..6 {
            let obj = square_mask(32, 2 + 4 * (i % 3), 2 + 4 * (i / 3), 6);
            rgbs.push(rgb_from_gray(&obj));
            depths.push(obj);
        }
        let report = corpus_alignment(&rgbs, &depths, 0.1, 3).unwrap();
        assert_eq!(report.pairs, 6);
        assert!(report.aligned.mean_dice > 0.99);
        assert!(report.separation > 0.5, "separation {}", report.separation);
        assert!(report.aligned.deciles.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn corpus_rejects_mismatched_or_tiny_input_lists() {
        let a = square_mask(8, 0, 0, 4);
        let rgb = rgb_from_gray(&a);
        assert!(corpus_alignment(std::slice::from_ref(&rgb), std::slice::from_ref(&a), 0.1, 0).is_err());
        assert!(corpus_alignment(&[rgb], &[], 0.1, 0).is_err());
    }
}
