use serde::{Deserialize, Serialize};

use super::{DataError, Result};

/// Maximum relative deviation of a bucket's area from the target.
pub const BUCKET_AREA_TOLERANCE: f64 = 0.125;

/// A training resolution in pixel space. `aspect = width / height`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub id: usize,
    pub height: usize,
    pub width: usize,
}

impl Bucket {
    pub fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    /// Latent-space dimensions for a codec with the given downsample factor.
    pub fn latent_dims(&self, downsample: usize) -> (usize, usize) {
        (self.height / downsample, self.width / downsample)
    }
}

/// Grid sizes whose area lies within the tolerance of `area`.
fn feasible_sizes(area: f64, quantum: usize) -> Vec<(usize, usize)> {
    let max_area = area * (1.0 + BUCKET_AREA_TOLERANCE);
    let min_area = area * (1.0 - BUCKET_AREA_TOLERANCE);
    let mut out = Vec::new();
    let mut h = quantum;
    while (h * quantum) as f64 <= max_area {
        let w_lo = ((min_area / h as f64) / quantum as f64).ceil().max(1.0) as usize * quantum;
        let mut w = w_lo;
        while ((h * w) as f64) <= max_area {
            out.push((h, w));
            w += quantum;
        }
        h += quantum;
    }
    out
}

/// The feasible size closest to `ratio` in log-aspect, then closest in area,
/// then shorter.
fn pick_size(sizes: &[(usize, usize)], area: f64, ratio: f64) -> Option<(usize, usize)> {
    let key = |&(h, w): &(usize, usize)| {
        let adist = ((w as f64 / h as f64).ln() - ratio.ln()).abs();
        (adist, ((h * w) as f64 - area).abs(), h)
    };
    sizes
        .iter()
        .copied()
        .min_by(|a, b| key(a).partial_cmp(&key(b)).expect("finite keys"))
}

/// `count` buckets with log-spaced aspects over `[ratio_min, ratio_max]`.
/// Each bucket is the `quantum`-grid size nearest its aspect among sizes whose
/// area is within ±12.5% of `target_area`; ties go to the smaller area error.
/// Ids ascend with aspect.
pub fn make_buckets(
    target_area: usize,
    count: usize,
    ratio_min: f64,
    ratio_max: f64,
    quantum: usize,
) -> Result<Vec<Bucket>> {
    if count == 0 || quantum == 0 {
        return Err(DataError::Config(
            "bucket count and quantum must be positive".into(),
        ));
    }
    if target_area < quantum * quantum {
        return Err(DataError::Config(format!(
            "target area {target_area} is smaller than one quantum cell ({quantum}²)"
        )));
    }
    if !(ratio_min > 0.0 && ratio_min <= ratio_max && ratio_max.is_finite()) {
        return Err(DataError::Config(format!(
            "bad aspect range [{ratio_min}, {ratio_max}]"
        )));
    }
    let area = target_area as f64;
    let (lo, hi) = (ratio_min.ln(), ratio_max.ln());
    let sizes = feasible_sizes(area, quantum);
    let mut out: Vec<Bucket> = Vec::with_capacity(count);
    for k in 0..count {
        let ratio = if count == 1 {
            1.0f64.clamp(ratio_min, ratio_max)
        } else {
            (lo + (hi - lo) * k as f64 / (count - 1) as f64).exp()
        };
        let (height, width) = pick_size(&sizes, area, ratio).ok_or_else(|| {
            DataError::Config(format!(
                "aspect {ratio:.4}: no {quantum}-multiple size within 12.5% of area {target_area}"
            ))
        })?;
        let bucket = Bucket {
            id: k,
            height,
            width,
        };
        if let Some(prev) = out.last() {
            if bucket.aspect() <= prev.aspect() {
                return Err(DataError::Config(format!(
                    "aspect {ratio:.4} rounds to {height}x{width}, not distinct from the previous bucket {}x{}; \
                     raise the target area or lower the count",
                    prev.height, prev.width
                )));
            }
        }
        out.push(bucket);
    }
    Ok(out)
}

/// Relative tolerance under which two log-aspect distances count as a tie.
const TIE_EPS: f64 = 1e-12;

/// Bucket whose aspect is nearest in log space; ties go to the smaller id.
/// `buckets` must be ordered by aspect (as produced by [`make_buckets`]).
pub fn assign_bucket(native_h: usize, native_w: usize, buckets: &[Bucket]) -> Result<usize> {
    if buckets.is_empty() {
        return Err(DataError::Config("no buckets to assign to".into()));
    }
    if native_h == 0 || native_w == 0 {
        return Err(DataError::Config(format!(
            "degenerate native size {native_h}x{native_w}"
        )));
    }
    let target = (native_w as f64 / native_h as f64).ln();
    let pos = buckets.partition_point(|b| b.aspect().ln() < target);
    let mut best: Option<(usize, f64)> = None;
    for i in [pos.saturating_sub(1), pos.min(buckets.len() - 1)] {
        let d = (buckets[i].aspect().ln() - target).abs();
        best = match best {
            Some((j, bd)) if !closer(d, bd, buckets[i].id, buckets[j].id) => Some((j, bd)),
            _ => Some((i, d)),
        };
    }
    Ok(buckets[best.expect("non-empty").0].id)
}

/// Whether distance `d` (bucket `id`) beats `best` (bucket `best_id`).
fn closer(d: f64, best: f64, id: usize, best_id: usize) -> bool {
    let tol = TIE_EPS * d.max(best).max(1e-300);
    if (d - best).abs() <= tol {
        id < best_id
    } else {
        d < best
    }
}
