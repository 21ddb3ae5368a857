use rand::seq::SliceRandom;

use super::{DataSet, ImageSample, Split};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Seeded shuffle, then contiguous partition by `ratios`. Rounding remainders go to train.
pub fn split_dataset(
    samples: &[ImageSample],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<ImageSample>, Vec<ImageSample>, Vec<ImageSample>)> {
    let n = samples.len();
    if n < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: n });
    }
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let n_val = ((n as f64) * b + 1e-9).floor() as usize;
    let n_test = ((n as f64) * c + 1e-9).floor() as usize;
    if n_val == 0 || n_test == 0 || n_val + n_test >= n {
        return Err(Error::TooFewSamples { needed: 3, got: n });
    }
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Domain::Split, 0));
    let take = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Ok((
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_val]),
        take(&order[n_train + n_val..]),
    ))
}

/// `k` (train, val) pairs whose validation folds partition the dataset.
/// Fold sizes differ by at most one; the first `len % k` folds get the extra sample.
pub fn kfold_partitions(data: &DataSet, k: usize, seed: u64) -> Result<Vec<(DataSet, DataSet)>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let n = data.len();
    if n < k {
        return Err(Error::TooFewSamples { needed: k, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Domain::Fold, 0));

    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(&order[start..start + size]);
        start += size;
    }
    Ok((0..k)
        .map(|f| {
            let val: Vec<ImageSample> = folds[f].iter().map(|&i| data.samples[i].clone()).collect();
            let train: Vec<ImageSample> = (0..k)
                .filter(|&g| g != f)
                .flat_map(|g| folds[g].iter().map(|&i| data.samples[i].clone()))
                .collect();
            (
                data.with_samples(&format!("{}-fold{}-train", data.name, f + 1), Split::Train, train),
                data.with_samples(&format!("{}-fold{}-val", data.name, f + 1), Split::Val, val),
            )
        })
        .collect())
}
