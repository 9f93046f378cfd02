//! Mean silhouette coefficient as a class-separation score.

use serde::{Deserialize, Serialize};

use crate::error::{DrlError, Result};
use crate::numkernel::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    /// Mean silhouette over points of non-singleton classes, in `[-1, 1]`.
    pub score: f64,
    pub points: usize,
    /// Classes with a single member, left out of the mean.
    pub singleton_classes: usize,
}

/// Silhouette over Euclidean distances. For point `i` with intra-class mean
/// distance `a` and smallest mean distance `b` to another class, the
/// coefficient is `(b - a) / max(a, b)` (zero when both vanish).
pub fn class_separation(features: &Matrix, labels: &[usize]) -> Result<SeparationReport> {
    if labels.len() != features.rows() {
        return Err(DrlError::Shape {
            op: "class_separation",
            left: features.shape(),
            right: (labels.len(), 1),
        });
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let counts: Vec<usize> = classes
        .iter()
        .map(|c| labels.iter().filter(|&&l| l == *c).count())
        .collect();
    if classes.len() < 2 {
        return Err(DrlError::Precondition("silhouette needs at least two classes".into()));
    }
    let singleton_classes = counts.iter().filter(|&&n| n == 1).count();
    if singleton_classes == classes.len() {
        return Err(DrlError::Precondition("every class is a singleton".into()));
    }
    if singleton_classes > 0 {
        log::warn!("class_separation: {singleton_classes} singleton classes excluded");
    }
    let class_index = |l: usize| classes.binary_search(&l).expect("label present");

    let n = features.rows();
    let mut total = 0.0;
    let mut points = 0;
    let mut sums = vec![0.0; classes.len()];
    for i in 0..n {
        let own = class_index(labels[i]);
        if counts[own] < 2 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = features
                .row(i)
                .iter()
                .zip(features.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            sums[class_index(labels[j])] += d;
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..classes.len())
            .filter(|&k| k != own)
            .map(|k| sums[k] / counts[k] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        total += if denom > 0.0 { (b - a) / denom } else { 0.0 };
        points += 1;
    }
    Ok(SeparationReport {
        score: total / points as f64,
        points,
        singleton_classes,
    })
}
