//! Volumetric evaluation: overlap scores, average symmetric surface
//! distance, physical volumes and volume-stratified summaries.
//!
//! Conventions pinned here: Dice of two empty masks is 1.0; precision of an
//! empty prediction is 1.0 against an empty reference and 0.0 otherwise; ASD
//! of an empty mask is an error and is reported as missing, never as zero.

use thiserror::Error;

use crate::synth::MaskVolume;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("mask dims mismatch: {0:?} vs {1:?}")]
    DimsMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("mask spacing mismatch: {0:?} vs {1:?}")]
    SpacingMismatch((f64, f64, f64), (f64, f64, f64)),
    #[error("surface distance undefined: {0} mask is empty")]
    EmptyMask(&'static str),
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn check_dims(a: &MaskVolume, b: &MaskVolume) -> Result<()> {
    if a.dims != b.dims {
        return Err(MetricError::DimsMismatch(a.dims, b.dims));
    }
    Ok(())
}

fn check_spacing(a: &MaskVolume, b: &MaskVolume) -> Result<()> {
    if a.spacing_mm != b.spacing_mm {
        return Err(MetricError::SpacingMismatch(a.spacing_mm, b.spacing_mm));
    }
    Ok(())
}

/// `2|A n B| / (|A| + |B|)`; both-empty is 1.0.
pub fn dice_coefficient(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    check_dims(a, b)?;
    check_spacing(a, b)?;
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (x, y) in a.voxels().iter().zip(b.voxels()) {
        na += usize::from(*x != 0);
        nb += usize::from(*y != 0);
        inter += usize::from(*x != 0 && *y != 0);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `TP / (TP + FP)`; an empty prediction scores 1.0 against an empty
/// reference, 0.0 otherwise.
pub fn precision(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    check_dims(pred, gt)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut gt_fg = 0usize;
    for (p, g) in pred.voxels().iter().zip(gt.voxels()) {
        gt_fg += usize::from(*g != 0);
        if *p != 0 {
            if *g != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    if tp + fp == 0 {
        return Ok(if gt_fg == 0 { 1.0 } else { 0.0 });
    }
    Ok(tp as f64 / (tp + fp) as f64)
}

/// Foreground voxels with at least one background face-neighbor
/// (4-connectivity in-plane for single-slab masks, 6-connectivity
/// otherwise). Voxels outside the grid count as background.
pub fn boundary_voxels(mask: &MaskVolume) -> Vec<(usize, usize, usize)> {
    let (nx, ny, nz) = mask.dims;
    let mut out = Vec::new();
    let offsets: &[(isize, isize, isize)] = if nz == 1 {
        &[(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0)]
    } else {
        &[
            (-1, 0, 0),
            (1, 0, 0),
            (0, -1, 0),
            (0, 1, 0),
            (0, 0, -1),
            (0, 0, 1),
        ]
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask.get(x, y, z) {
                    continue;
                }
                let is_boundary = offsets.iter().any(|(dx, dy, dz)| {
                    let (qx, qy, qz) = (
                        x as isize + dx,
                        y as isize + dy,
                        z as isize + dz,
                    );
                    if qx < 0
                        || qy < 0
                        || qz < 0
                        || qx >= nx as isize
                        || qy >= ny as isize
                        || qz >= nz as isize
                    {
                        return true;
                    }
                    !mask.get(qx as usize, qy as usize, qz as usize)
                });
                if is_boundary {
                    out.push((x, y, z));
                }
            }
        }
    }
    out
}

/// Average symmetric surface distance in mm: for every boundary voxel of
/// each mask, the Euclidean distance to the nearest boundary voxel of the
/// other; mean over both directed sets.
pub fn average_surface_distance(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    check_dims(a, b)?;
    check_spacing(a, b)?;
    if a.foreground_count() == 0 {
        return Err(MetricError::EmptyMask("first"));
    }
    if b.foreground_count() == 0 {
        return Err(MetricError::EmptyMask("second"));
    }
    let ba = boundary_voxels(a);
    let bb = boundary_voxels(b);
    let (sx, sy, sz) = a.spacing_mm;
    let dist2 = |p: (usize, usize, usize), q: (usize, usize, usize)| {
        let dx = (p.0 as f64 - q.0 as f64) * sx;
        let dy = (p.1 as f64 - q.1 as f64) * sy;
        let dz = (p.2 as f64 - q.2 as f64) * sz;
        dx * dx + dy * dy + dz * dz
    };
    let directed_sum = |from: &[(usize, usize, usize)], to: &[(usize, usize, usize)]| -> f64 {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| dist2(*p, *q))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum()
    };
    let total = directed_sum(&ba, &bb) + directed_sum(&bb, &ba);
    Ok(total / (ba.len() + bb.len()) as f64)
}

/// Foreground voxel count times voxel volume, in mL.
pub fn volume_ml(mask: &MaskVolume) -> f64 {
    mask.volume_ml()
}

/// `|volume(pred) - volume(gt)|` in mL.
pub fn abvd_ml(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    check_spacing(pred, gt)?;
    Ok((volume_ml(pred) - volume_ml(gt)).abs())
}

/// Everything the report needs for one test case. `asd_mm` is `None` when
/// either mask is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: f64,
    pub precision: f64,
    pub asd_mm: Option<f64>,
    pub vol_pred_ml: f64,
    pub vol_gt_ml: f64,
    pub abvd_ml: f64,
}

impl CaseMetrics {
    pub fn compute(case_id: &str, pred: &MaskVolume, gt: &MaskVolume) -> Result<CaseMetrics> {
        let dice = dice_coefficient(pred, gt)?;
        let prec = precision(pred, gt)?;
        let asd = match average_surface_distance(pred, gt) {
            Ok(v) => Some(v),
            Err(MetricError::EmptyMask(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(CaseMetrics {
            case_id: case_id.to_string(),
            dice,
            precision: prec,
            asd_mm: asd,
            vol_pred_ml: volume_ml(pred),
            vol_gt_ml: volume_ml(gt),
            abvd_ml: abvd_ml(pred, gt)?,
        })
    }
}

/// Summary of the cases whose reference volume exceeds a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumSummary {
    pub threshold_ml: f64,
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub median: Option<f64>,
    pub iqr: Option<f64>,
}

/// Linear-interpolation quantile on sorted data (the common "R-7" rule).
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn mean_and_sd(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (Some(mean), None);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
    (Some(mean), Some(var.sqrt()))
}

/// Per-threshold Dice summaries over cases with reference volume strictly
/// above the threshold. Thresholds must be ascending.
pub fn stratified_dice(
    cases: &[(f64, f64)], // (dice, vol_gt_ml)
    thresholds_ml: &[f64],
) -> Vec<StratumSummary> {
    debug_assert!(
        thresholds_ml.windows(2).all(|w| w[0] <= w[1]),
        "thresholds must be ascending"
    );
    thresholds_ml
        .iter()
        .map(|threshold| {
            let mut dices: Vec<f64> = cases
                .iter()
                .filter(|(_, vol)| *vol > *threshold)
                .map(|(dice, _)| *dice)
                .collect();
            dices.sort_by(|a, b| a.partial_cmp(b).expect("finite dice"));
            let (mean, sd) = mean_and_sd(&dices);
            let (median, iqr) = if dices.is_empty() {
                (None, None)
            } else {
                (
                    Some(quantile_sorted(&dices, 0.5)),
                    Some(quantile_sorted(&dices, 0.75) - quantile_sorted(&dices, 0.25)),
                )
            };
            StratumSummary {
                threshold_ml: *threshold,
                n: dices.len(),
                mean,
                sd,
                median,
                iqr,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(nx: usize, ny: usize, spacing: (f64, f64, f64), fg: &[(usize, usize)]) -> MaskVolume {
        let mut voxels = vec![0u8; nx * ny];
        for (x, y) in fg {
            voxels[y * nx + x] = 1;
        }
        MaskVolume::new((nx, ny, 1), spacing, voxels).unwrap()
    }

    #[test]
    fn dice_identical_disjoint_and_half() {
        let a = mask(4, 4, (1.0, 1.0, 1.0), &[(0, 0), (1, 0)]);
        let b = mask(4, 4, (1.0, 1.0, 1.0), &[(2, 2), (3, 2)]);
        assert_eq!(dice_coefficient(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_coefficient(&a, &b).unwrap(), 0.0);
        let c = mask(4, 4, (1.0, 1.0, 1.0), &[(1, 0), (2, 0)]);
        assert_eq!(dice_coefficient(&a, &c).unwrap(), 0.5);
    }

    #[test]
    fn dice_both_empty_is_one() {
        let a = mask(3, 3, (1.0, 1.0, 1.0), &[]);
        assert_eq!(dice_coefficient(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn dice_dims_mismatch_rejected() {
        let a = mask(3, 3, (1.0, 1.0, 1.0), &[]);
        let b = mask(4, 3, (1.0, 1.0, 1.0), &[]);
        assert!(matches!(
            dice_coefficient(&a, &b),
            Err(MetricError::DimsMismatch(..))
        ));
    }

    #[test]
    fn precision_counting_and_conventions() {
        let gt = mask(4, 4, (1.0, 1.0, 1.0), &[(0, 0), (1, 0), (2, 0)]);
        let pred = mask(4, 4, (1.0, 1.0, 1.0), &[(0, 0), (1, 0), (3, 3)]);
        assert!((precision(&pred, &gt).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(precision(&gt, &gt).unwrap(), 1.0);
        let outside = mask(4, 4, (1.0, 1.0, 1.0), &[(3, 3)]);
        assert_eq!(precision(&outside, &gt).unwrap(), 0.0);
        let empty = mask(4, 4, (1.0, 1.0, 1.0), &[]);
        assert_eq!(precision(&empty, &gt).unwrap(), 0.0);
        assert_eq!(precision(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn asd_identical_masks_is_zero() {
        let a = mask(5, 5, (1.0, 1.0, 1.0), &[(1, 1), (2, 1), (1, 2), (2, 2)]);
        assert_eq!(average_surface_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn asd_single_voxels_scale_with_spacing() {
        let a = mask(5, 1, (1.0, 1.0, 1.0), &[(0, 0)]);
        let b = mask(5, 1, (1.0, 1.0, 1.0), &[(3, 0)]);
        assert_eq!(average_surface_distance(&a, &b).unwrap(), 3.0);
        let a2 = mask(5, 1, (2.0, 1.0, 1.0), &[(0, 0)]);
        let b2 = mask(5, 1, (2.0, 1.0, 1.0), &[(3, 0)]);
        assert_eq!(average_surface_distance(&a2, &b2).unwrap(), 6.0);
    }

    #[test]
    fn asd_empty_mask_is_an_error() {
        let a = mask(3, 3, (1.0, 1.0, 1.0), &[(1, 1)]);
        let empty = mask(3, 3, (1.0, 1.0, 1.0), &[]);
        assert!(matches!(
            average_surface_distance(&a, &empty),
            Err(MetricError::EmptyMask("second"))
        ));
        assert!(matches!(
            average_surface_distance(&empty, &a),
            Err(MetricError::EmptyMask("first"))
        ));
    }

    #[test]
    fn asd_is_symmetric() {
        let a = mask(6, 6, (1.0, 2.0, 1.0), &[(1, 1), (2, 1), (3, 1)]);
        let b = mask(6, 6, (1.0, 2.0, 1.0), &[(2, 4), (3, 4)]);
        let ab = average_surface_distance(&a, &b).unwrap();
        let ba = average_surface_distance(&b, &a).unwrap();
        assert_eq!(ab, ba);
        assert!(ab > 0.0);
    }

    #[test]
    fn interior_voxels_are_not_boundary() {
        // 3x3 block: the center voxel has no background face-neighbor.
        let fg: Vec<(usize, usize)> = (1..4)
            .flat_map(|y| (1..4).map(move |x| (x, y)))
            .collect();
        let m = mask(5, 5, (1.0, 1.0, 1.0), &fg);
        let boundary = boundary_voxels(&m);
        assert_eq!(boundary.len(), 8);
        assert!(!boundary.contains(&(2, 2, 0)));
    }

    #[test]
    fn volume_conversions() {
        let mut voxels = vec![0u8; 1000];
        voxels.iter_mut().for_each(|v| *v = 1);
        let m = MaskVolume::new((10, 10, 10), (1.0, 1.0, 1.0), voxels).unwrap();
        assert_eq!(volume_ml(&m), 1.0);

        let empty = MaskVolume::new((10, 10, 10), (1.0, 1.0, 1.0), vec![0; 1000]).unwrap();
        assert_eq!(volume_ml(&empty), 0.0);

        let mut voxels = vec![0u8; 1000];
        voxels[..500].iter_mut().for_each(|v| *v = 1);
        let half = MaskVolume::new((10, 10, 10), (1.0, 1.0, 2.0), voxels).unwrap();
        assert_eq!(volume_ml(&half), 1.0);
    }

    #[test]
    fn abvd_arithmetic_and_symmetry() {
        let full = MaskVolume::new((10, 10, 10), (1.0, 1.0, 1.0), vec![1; 1000]).unwrap();
        let mut half_vox = vec![0u8; 1000];
        half_vox[..500].iter_mut().for_each(|v| *v = 1);
        let half = MaskVolume::new((10, 10, 10), (1.0, 1.0, 1.0), half_vox).unwrap();
        assert_eq!(abvd_ml(&full, &half).unwrap(), 0.5);
        assert_eq!(abvd_ml(&half, &full).unwrap(), 0.5);
        assert_eq!(abvd_ml(&full, &full).unwrap(), 0.0);
        let other_spacing = MaskVolume::new((10, 10, 10), (2.0, 1.0, 1.0), vec![1; 1000]).unwrap();
        assert!(matches!(
            abvd_ml(&full, &other_spacing),
            Err(MetricError::SpacingMismatch(..))
        ));
    }

    #[test]
    fn case_metrics_consistency() {
        let gt = mask(6, 6, (1.0, 1.0, 5.0), &[(1, 1), (2, 1), (1, 2), (2, 2)]);
        let pred = mask(6, 6, (1.0, 1.0, 5.0), &[(1, 1), (2, 1)]);
        let m = CaseMetrics::compute("case_x", &pred, &gt).unwrap();
        assert_eq!(m.abvd_ml, (m.vol_pred_ml - m.vol_gt_ml).abs());
        assert!((m.dice - 2.0 * 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(m.precision, 1.0);
        assert!(m.asd_mm.is_some());

        let empty = mask(6, 6, (1.0, 1.0, 5.0), &[]);
        let m = CaseMetrics::compute("case_y", &empty, &gt).unwrap();
        assert_eq!(m.asd_mm, None);
        assert_eq!(m.dice, 0.0);
    }

    #[test]
    fn stratified_dice_hand_computed() {
        // Five cases with known dices and volumes.
        let cases = [
            (0.90, 10.0),
            (0.80, 20.0),
            (0.70, 30.0),
            (0.60, 40.0),
            (0.50, 50.0),
        ];
        let summaries = stratified_dice(&cases, &[0.0, 25.0, 100.0]);

        assert_eq!(summaries[0].n, 5);
        assert!((summaries[0].mean.unwrap() - 0.70).abs() < 1e-12);
        assert!((summaries[0].median.unwrap() - 0.70).abs() < 1e-12);
        // R-7 quartiles of [0.5..0.9]: q1 = 0.6, q3 = 0.8.
        assert!((summaries[0].iqr.unwrap() - 0.2).abs() < 1e-12);
        // Sum of squared deviations 0.10 over n-1 = 4.
        let sd = summaries[0].sd.unwrap();
        assert!((sd - 0.025f64.sqrt()).abs() < 1e-9, "sd {sd}");

        assert_eq!(summaries[1].n, 3);
        assert!((summaries[1].mean.unwrap() - 0.60).abs() < 1e-12);

        assert_eq!(summaries[2].n, 0);
        assert_eq!(summaries[2].mean, None);
        assert_eq!(summaries[2].sd, None);
        assert_eq!(summaries[2].median, None);
        assert_eq!(summaries[2].iqr, None);
    }

    #[test]
    fn stratified_threshold_zero_includes_all() {
        let cases = [(0.5, 1.0), (0.6, 2.0)];
        let s = stratified_dice(&cases, &[0.0]);
        assert_eq!(s[0].n, 2);
    }
}
