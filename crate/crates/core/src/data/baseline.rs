use super::{Dataset, Split};
use crate::error::{Error, Result};

/// Accuracy on `eval` of a nearest-centroid classifier that sees one frame
/// per clip (the frame at the word center), with centroids from `train`.
pub fn nearest_centroid_baseline(ds: &Dataset, train: Split, eval: Split) -> Result<f64> {
    let k = ds.num_classes();
    let frame = |i: usize| -> Result<Vec<f64>> {
        let s = &ds.samples[i];
        Ok(s.frames.select(0, s.boundary.center())?.to_f64_vec())
    };
    let train_idx = ds.indices(train);
    let eval_idx = ds.indices(eval);
    if train_idx.is_empty() || eval_idx.is_empty() {
        return Err(Error::Data("baseline needs non-empty train and eval splits".into()));
    }
    let dim = frame(train_idx[0])?.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for &i in &train_idx {
        let label = ds.samples[i].label;
        for (a, b) in sums[label].iter_mut().zip(frame(i)?) {
            *a += b;
        }
        counts[label] += 1;
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect();
    let mut correct = 0;
    for &i in &eval_idx {
        let f = frame(i)?;
        let best = centroids
            .iter()
            .enumerate()
            .filter_map(|(c, cent)| cent.as_ref().map(|m| (c, m.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>())))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c);
        if best == Some(ds.samples[i].label) {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval_idx.len() as f64)
}
