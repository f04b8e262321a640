//! Sliding-window segmentation and gap filling.

use crate::error::{Error, Result};

/// Hop size between consecutive window starts.
pub fn window_step(window: usize, overlap: f64) -> Result<usize> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be >= 1 sample".into()));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    Ok(((window as f64 * (1.0 - overlap)).round() as usize).max(1))
}

/// Number of complete windows; the trailing remainder is dropped.
pub fn window_count(n: usize, window: usize, overlap: f64) -> Result<usize> {
    let step = window_step(window, overlap)?;
    if window > n {
        return Err(Error::InvalidArgument(format!("window of {window} exceeds signal length {n}")));
    }
    Ok((n - window) / step + 1)
}

pub fn window_starts(n: usize, window: usize, overlap: f64) -> Result<Vec<usize>> {
    let step = window_step(window, overlap)?;
    let count = window_count(n, window, overlap)?;
    Ok((0..count).map(|i| i * step).collect())
}

pub fn sliding_windows(signal: &[f64], window: usize, overlap: f64) -> Result<Vec<&[f64]>> {
    Ok(window_starts(signal.len(), window, overlap)?
        .into_iter()
        .map(|s| &signal[s..s + window])
        .collect())
}

/// Linear interpolation across interior gaps, nearest-value fill at the
/// edges. Non-finite values count as gaps.
pub fn impute_missing(signal: &[Option<f64>]) -> Result<Vec<f64>> {
    let present = |v: &Option<f64>| v.filter(|x| x.is_finite());
    let known: Vec<(usize, f64)> = signal
        .iter()
        .enumerate()
        .filter_map(|(i, v)| present(v).map(|x| (i, x)))
        .collect();
    let (Some(&(first_i, first_v)), Some(&(last_i, last_v))) = (known.first(), known.last()) else {
        return Err(Error::Data(format!("all {} samples of the channel are missing", signal.len())));
    };
    let mut out = vec![0.0; signal.len()];
    out[..first_i].fill(first_v);
    out[last_i..].fill(last_v);
    for pair in known.windows(2) {
        let ((i0, v0), (i1, v1)) = (pair[0], pair[1]);
        out[i0] = v0;
        let span = (i1 - i0) as f64;
        for (k, slot) in out.iter_mut().enumerate().take(i1).skip(i0 + 1) {
            let t = (k - i0) as f64 / span;
            *slot = v0 + (v1 - v0) * t;
        }
    }
    Ok(out)
}

/// Most frequent label; ties go to the label that occurs first.
pub fn majority_label(labels: &[usize]) -> Option<usize> {
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for &l in labels {
        match counts.iter_mut().find(|(c, _)| *c == l) {
            Some(e) => e.1 += 1,
            None => counts.push((l, 1)),
        }
    }
    // max_by_key keeps the last maximum, so scan manually
    let mut best: Option<(usize, usize)> = None;
    for (l, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((l, c));
        }
    }
    best.map(|(l, _)| l)
}
