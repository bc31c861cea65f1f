//! Small numeric helpers shared by several stages.

/// Nearest-rank percentile (`p` in percent) of an unsorted slice.
///
/// Returns `None` for an empty slice. Uses `select_nth_unstable`, so the
/// input order is irrelevant and the cost is linear.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut buf = values.to_vec();
    Some(percentile_in_place(&mut buf, p))
}

pub(crate) fn percentile_in_place(buf: &mut [f64], p: f64) -> f64 {
    let n = buf.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    let idx = rank.clamp(1, n) - 1;
    let (_, v, _) = buf.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    *v
}

/// Result of a one-dimensional k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans1D {
    pub centers: Vec<f64>,
    /// Cluster index per input value.
    pub assignment: Vec<usize>,
    pub iterations: usize,
}

/// Lloyd iterations on scalars from the given initial centers.
///
/// Ties go to the lower cluster index; a cluster that loses all members keeps
/// its previous center.
pub fn kmeans_1d(values: &[f64], init: &[f64], max_iter: usize) -> KMeans1D {
    let k = init.len();
    let mut centers = init.to_vec();
    let mut assignment = vec![usize::MAX; values.len()];
    let mut iterations = 0;
    for it in 0..max_iter.max(1) {
        iterations = it + 1;
        let mut changed = false;
        let mut sums = vec![0.0f64; k];
        let mut counts = vec![0usize; k];
        for (a, &v) in assignment.iter_mut().zip(values) {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, &m) in centers.iter().enumerate() {
                let d = (v - m).abs();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if *a != best {
                *a = best;
                changed = true;
            }
            sums[best] += v;
            counts[best] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    KMeans1D {
        centers,
        assignment,
        iterations,
    }
}

/// Pearson correlation of two equally long samples.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Mean and population standard deviation.
pub fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}
