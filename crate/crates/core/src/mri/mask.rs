//! Retrospective undersampling patterns.

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DimoError, Result};
use crate::mri::types::{CenterRegion, SamplingMask};

/// Exponent of the polynomial variable-density law for Cartesian lines.
pub const VARIABLE_DENSITY_POWER: i32 = 6;

/// Relative tolerance on the Poisson-disk sample budget.
pub const POISSON_BUDGET_TOLERANCE: f64 = 0.05;

fn check_af(af: f64) -> Result<()> {
    if !af.is_finite() || af < 1.0 {
        return Err(DimoError::InvalidArgument(format!("acceleration factor {af} must be >= 1")));
    }
    Ok(())
}

/// 1D variable-density Cartesian mask of full phase-encode columns.
///
/// Exactly `round(w / af)` columns are kept: the centered block of
/// `center_lines` plus lines drawn without replacement with probability
/// proportional to `(1 - |i - w/2| / (w/2))^6`.
pub fn make_cartesian_mask(h: usize, w: usize, af: f64, center_lines: usize, seed: u64) -> Result<SamplingMask> {
    check_af(af)?;
    if af == 1.0 {
        return SamplingMask::full(h, w);
    }
    let budget = (w as f64 / af).round() as usize;
    if center_lines > budget || center_lines > w {
        return Err(DimoError::Mask(format!("{center_lines} center lines exceed the budget of {budget} lines")));
    }
    let center = CenterRegion::centered_range(w, center_lines);
    let half = w as f64 / 2.0;
    let candidates: Vec<(usize, f64)> = (0..w)
        .filter(|i| !center.contains(i))
        .map(|i| {
            let d = (i as f64 - half).abs() / half;
            (i, (1.0 - d).max(0.0).powi(VARIABLE_DENSITY_POWER))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extra = budget - center_lines;
    let positive: Vec<(usize, f64)> = candidates.iter().copied().filter(|c| c.1 > 0.0).collect();
    let mut chosen: Vec<usize> = positive
        .choose_multiple_weighted(&mut rng, extra.min(positive.len()), |c| c.1)
        .map_err(|e| DimoError::Mask(format!("weighted line draw failed: {e}")))?
        .map(|c| c.0)
        .collect();
    // zero-weight edge lines only come into play when the budget demands them
    chosen.extend(candidates.iter().filter(|c| c.1 == 0.0).map(|c| c.0).take(extra - chosen.len()));

    let mut mask = Array2::from_elem((h, w), false);
    for col in center.chain(chosen) {
        mask.column_mut(col).fill(true);
    }
    SamplingMask::new(mask, af, CenterRegion::Lines(center_lines))
}

/// Random-order dart throwing on the pixel grid: a pixel is accepted when no
/// earlier accepted pixel lies strictly closer than `radius`. Stops after
/// `limit` acceptances.
fn dart_throw(h: usize, w: usize, order: &[(usize, usize)], radius: f64, limit: usize) -> Vec<(usize, usize)> {
    let mut occupied = Array2::from_elem((h, w), false);
    let reach = radius.ceil() as isize;
    let r2 = radius * radius;
    let mut accepted = Vec::new();
    for &(i, j) in order {
        if accepted.len() >= limit {
            break;
        }
        let mut free = true;
        'scan: for di in -reach..=reach {
            for dj in -reach..=reach {
                let (ni, nj) = (i as isize + di, j as isize + dj);
                if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                    continue;
                }
                if ((di * di + dj * dj) as f64) < r2 && occupied[[ni as usize, nj as usize]] {
                    free = false;
                    break 'scan;
                }
            }
        }
        if free {
            occupied[[i, j]] = true;
            accepted.push((i, j));
        }
    }
    accepted
}

/// 2D Poisson-disk mask with a fully sampled centered block.
///
/// The exclusion radius is found by bisection as the largest radius whose
/// maximal dart-throwing pattern still holds the sample budget
/// `round(h * w / af)`; the pattern at that radius is then cut off once the
/// budget is met.
pub fn make_poisson_mask(h: usize, w: usize, af: f64, center_block: usize, seed: u64) -> Result<SamplingMask> {
    check_af(af)?;
    if center_block > h.min(w) {
        return Err(DimoError::Mask(format!("center block {center_block} larger than grid {h}x{w}")));
    }
    if af == 1.0 {
        return SamplingMask::full(h, w);
    }
    let center = CenterRegion::Block(center_block);
    let target = (h as f64 * w as f64 / af).round() as usize;
    let center_count = center_block * center_block;
    let needed = target.saturating_sub(center_count);

    let mut order: Vec<(usize, usize)> =
        (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).filter(|&(i, j)| !center.contains(h, w, i, j)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let (mut lo, mut hi) = (1.0f64, (h.max(w)) as f64);
    if dart_throw(h, w, &order, lo, usize::MAX).len() < needed {
        return Err(DimoError::Mask(format!("AF {af} unattainable: not enough free samples")));
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if dart_throw(h, w, &order, mid, usize::MAX).len() >= needed {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let points = dart_throw(h, w, &order, lo, needed);

    let mut mask = Array2::from_elem((h, w), false);
    for (i, j) in CenterRegion::centered_range(h, center_block)
        .flat_map(|i| CenterRegion::centered_range(w, center_block).map(move |j| (i, j)))
    {
        mask[[i, j]] = true;
    }
    for (i, j) in points {
        mask[[i, j]] = true;
    }
    let total = mask.iter().filter(|&&m| m).count();
    let rel = (total as f64 - target as f64).abs() / target as f64;
    if rel > POISSON_BUDGET_TOLERANCE && total > center_count {
        return Err(DimoError::Mask(format!("AF {af} unattainable: {total} samples vs target {target}")));
    }
    // when the center block alone exceeds the budget the effective AF drops below the nominal one
    SamplingMask::new(mask, af, center).map(|m| m.with_min_distance(lo))
}
