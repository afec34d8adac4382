use crate::error::{Error, Result};

/// All-points interpolated average precision of one class: the area under
/// the precision envelope (precision made non-increasing in recall). Items
/// are ranked by descending score, ties by position. `None` without
/// positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positives.len(), "one label per score");
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut precision = Vec::with_capacity(order.len());
    let mut hits = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        hits.push(positives[i]);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let sum: f64 = precision.iter().zip(&hits).filter(|(_, &h)| h).map(|(p, _)| p).sum();
    Some(sum / total as f64)
}

/// Mean of [`average_precision`] over classes with at least one positive.
/// `scores[i][k]` and `labels[i][k]` are item `i`, class `k`.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::arg("one label row per score row"));
    }
    let k = scores.first().map_or(0, |r| r.len());
    if scores.iter().any(|r| r.len() != k) || labels.iter().any(|r| r.len() != k) {
        return Err(Error::arg("score and label rows differ in length"));
    }
    let aps: Vec<f64> = (0..k)
        .filter_map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let y: Vec<bool> = labels.iter().map(|r| r[c]).collect();
            average_precision(&s, &y)
        })
        .collect();
    if aps.is_empty() {
        return Err(Error::arg("mAP is undefined without any positive label"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}
