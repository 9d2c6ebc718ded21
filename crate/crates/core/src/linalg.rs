//! Small dense kernels shared by the explanation modules. Accumulation is always f64.

/// Sum of `f(a_i, b_i)` over four interleaved f64 lanes; the order is fixed, so results
/// are reproducible.
#[inline]
fn lane_sum(a: &[f32], b: &[f32], f: impl Fn(f64, f64) -> f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += f(x[l] as f64, y[l] as f64);
        }
    }
    let mut tail = 0f64;
    for (&x, &y) in ra.iter().zip(rb) {
        tail += f(x as f64, y as f64);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    lane_sum(a, b, |x, y| x * y)
}

#[inline]
pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    lane_sum(a, b, |x, y| (x - y) * (x - y))
}

/// Squared distance between an f32 point and an f64 centroid.
#[inline]
pub fn squared_l2_mixed(a: &[f32], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

/// Index of the first maximum. NaN entries never win.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if !(v > b) => {}
            _ if v.partial_cmp(&v).is_none() => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Nearest row of `centers` (row-major, `dim` wide) to `point`; ties go to the lowest index.
pub fn nearest(point: &[f32], centers: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, center) in centers.chunks_exact(dim).enumerate() {
        let d = squared_l2(point, center);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[f64::NAN, 1.0]), Some(1));
        assert_eq!(argmax::<f32>(&[]), None);
        assert_eq!(nearest(&[0.0], &[1.0, -1.0, 0.5], 1), (2, 0.25));
        assert_eq!(nearest(&[0.0], &[1.0, -1.0], 1).0, 0);
    }
}
