//! Slice prediction, series-level score averaging, and macro-F1.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_rows;
use crate::data::ImageGrid;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicePrediction {
    pub series_id: String,
    pub slice_path: PathBuf,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPrediction {
    pub series_id: String,
    pub probs: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Number of classes.
    pub n: usize,
    /// `confusion[true][predicted]` series counts.
    pub confusion: Vec<Vec<usize>>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_f1: f64,
    pub accuracy: f64,
}

fn to_batch<T: Scalar>(model: &Model<T>, images: &[&ImageGrid]) -> Result<Tensor<T>> {
    let cfg = model.config();
    let [h, w] = cfg.input_size;
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) || cfg.input_channels != 1 {
            return Err(Error::dim(format!(
                "image {}×{} does not match model input {h}×{w}",
                img.height, img.width
            )));
        }
        data.extend(img.data.iter().map(|&v| T::of(f64::from(v))));
    }
    Tensor::new(vec![images.len(), 1, h, w], data)
}

/// Inference-mode class probabilities for a batch of preprocessed images.
pub fn predict_probs<T: Scalar>(model: &Model<T>, images: &[&ImageGrid]) -> Result<Vec<Vec<f64>>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let logits = model.logits(to_batch(model, images)?)?;
    let k = model.config().num_classes;
    let probs = softmax_rows(logits.data(), k);
    Ok(probs
        .chunks(k)
        .map(|row| row.iter().map(|v| v.as_f64()).collect())
        .collect())
}

pub fn predict_slice<T: Scalar>(
    model: &Model<T>,
    series_id: &str,
    slice_path: &Path,
    image: &ImageGrid,
) -> Result<SlicePrediction> {
    let probs = predict_probs(model, &[image])?.remove(0);
    Ok(SlicePrediction {
        series_id: series_id.to_owned(),
        slice_path: slice_path.to_path_buf(),
        probs,
    })
}

/// Lowest index among maximal entries.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Averages slice probability vectors into one series prediction.
///
/// Slices are summed in lexicographic path order whatever order they arrive
/// in, so the result does not depend on the caller's ordering.
pub fn aggregate_series(series_id: &str, slices: &[SlicePrediction]) -> Result<SeriesPrediction> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Data(format!("series {series_id} has no slice predictions")))?;
    let k = first.probs.len();
    if k == 0 || slices.iter().any(|s| s.probs.len() != k) {
        return Err(Error::dim(format!(
            "series {series_id}: slice probability vectors have unequal lengths"
        )));
    }
    let mut ordered: Vec<&SlicePrediction> = slices.iter().collect();
    ordered.sort_by(|a, b| {
        a.slice_path.cmp(&b.slice_path).then_with(|| {
            a.probs
                .iter()
                .zip(&b.probs)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut mean = vec![0.0; k];
    for s in &ordered {
        for (m, &p) in mean.iter_mut().zip(&s.probs) {
            *m += p;
        }
    }
    let count = ordered.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    Ok(SeriesPrediction {
        series_id: series_id.to_owned(),
        label: argmax(&mean),
        probs: mean,
    })
}

/// Groups slice predictions by series id (in id order) and aggregates each.
pub fn aggregate_all(slices: &[SlicePrediction]) -> Result<Vec<SeriesPrediction>> {
    let mut groups: BTreeMap<&str, Vec<SlicePrediction>> = BTreeMap::new();
    for s in slices {
        groups.entry(&s.series_id).or_default().push(s.clone());
    }
    groups.into_iter().map(|(id, g)| aggregate_series(id, &g)).collect()
}

fn check_labels(y_true: &[usize], y_pred: &[usize], n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::config(format!("macro-F1 needs at least 2 classes, got {n}")));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::dim(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Data("macro-F1 of an empty sample".into()));
    }
    if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&l| l >= n) {
        return Err(Error::Data(format!("label {bad} outside [0, {n})")));
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

struct ClassScores {
    precision: Vec<f64>,
    recall: Vec<f64>,
    f1: Vec<f64>,
}

fn class_scores(confusion: &[Vec<usize>]) -> ClassScores {
    let n = confusion.len();
    let mut out = ClassScores {
        precision: vec![0.0; n],
        recall: vec![0.0; n],
        f1: vec![0.0; n],
    };
    for i in 0..n {
        let tp = confusion[i][i];
        let predicted: usize = (0..n).map(|t| confusion[t][i]).sum();
        let actual: usize = confusion[i].iter().sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        out.precision[i] = p;
        out.recall[i] = r;
        out.f1[i] = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    out
}

fn confusion_matrix(y_true: &[usize], y_pred: &[usize], n: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; n]; n];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        m[t][p] += 1;
    }
    m
}

/// Unweighted mean of one-vs-rest F1 over all `n` classes; a class whose
/// precision or recall is undefined contributes 0 for that quantity.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize], n: usize) -> Result<f64> {
    check_labels(y_true, y_pred, n)?;
    let scores = class_scores(&confusion_matrix(y_true, y_pred, n));
    Ok(scores.f1.iter().sum::<f64>() / n as f64)
}

pub fn evaluate(predictions: &[SeriesPrediction], truth: &BTreeMap<String, usize>, n: usize) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::Data("no series predictions to evaluate".into()));
    }
    let missing: Vec<&str> = predictions
        .iter()
        .filter(|p| !truth.contains_key(&p.series_id))
        .map(|p| p.series_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "no ground-truth label for series: {}",
            missing.join(", ")
        )));
    }
    let y_true: Vec<usize> = predictions.iter().map(|p| truth[&p.series_id]).collect();
    let y_pred: Vec<usize> = predictions.iter().map(|p| p.label).collect();
    check_labels(&y_true, &y_pred, n)?;
    let confusion = confusion_matrix(&y_true, &y_pred, n);
    let scores = class_scores(&confusion);
    let correct = (0..n).map(|i| confusion[i][i]).sum::<usize>();
    Ok(MetricsReport {
        n,
        macro_f1: scores.f1.iter().sum::<f64>() / n as f64,
        accuracy: correct as f64 / predictions.len() as f64,
        confusion,
        precision: scores.precision,
        recall: scores.recall,
        f1: scores.f1,
    })
}

pub fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slice(path: &str, probs: &[f64]) -> SlicePrediction {
        SlicePrediction {
            series_id: "s".into(),
            slice_path: PathBuf::from(path),
            probs: probs.to_vec(),
        }
    }

    #[test]
    fn averages_two_slices() {
        let p = aggregate_series("s", &[slice("a", &[0.6, 0.4]), slice("b", &[0.2, 0.8])]).unwrap();
        assert!((p.probs[0] - 0.4).abs() < 1e-12 && (p.probs[1] - 0.6).abs() < 1e-12);
        assert_eq!(p.label, 1);
    }

    #[test]
    fn single_slice_and_tie() {
        let p = aggregate_series("s", &[slice("a", &[0.3, 0.7])]).unwrap();
        assert_eq!(p.probs, vec![0.3, 0.7]);
        let tie = aggregate_series("s", &[slice("a", &[0.5, 0.5])]).unwrap();
        assert_eq!(tie.label, 0);
    }

    #[test]
    fn aggregation_errors() {
        assert!(aggregate_series("s", &[]).is_err());
        assert!(matches!(
            aggregate_series("s", &[slice("a", &[0.5, 0.5]), slice("b", &[1.0])]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn macro_f1_fixtures() {
        assert_eq!(macro_f1(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap(), 1.0);
        // class 0: P = 1, R = 1/2 → 2/3; class 1: P = 2/3, R = 1 → 4/5.
        let m = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert!((m - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert_eq!(macro_f1(&[0, 1, 0], &[1, 0, 1], 2).unwrap(), 0.0);
    }

    #[test]
    fn macro_f1_errors() {
        assert!(macro_f1(&[0, 2], &[0, 1], 2).is_err());
        assert!(macro_f1(&[0], &[0], 1).is_err());
        assert!(macro_f1(&[], &[], 2).is_err());
        assert!(macro_f1(&[0, 1], &[0], 2).is_err());
    }

    #[test]
    fn absent_class_counts_as_zero() {
        // Class 2 never appears: its F1 is 0 and still divides the sum.
        let m = macro_f1(&[0, 1], &[0, 1], 3).unwrap();
        assert!((m - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_fills_report() {
        let truth: BTreeMap<String, usize> = [("a", 0), ("b", 0), ("c", 1), ("d", 1)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let preds: Vec<SeriesPrediction> = [("a", 0), ("b", 1), ("c", 1), ("d", 1)]
            .into_iter()
            .map(|(id, l)| SeriesPrediction {
                series_id: id.into(),
                probs: vec![0.5, 0.5],
                label: l,
            })
            .collect();
        let r = evaluate(&preds, &truth, 2).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
        assert!((r.macro_f1 - 0.733_333_333).abs() < 1e-6);
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.confusion.iter().flatten().sum::<usize>(), 4);

        let mut orphan = preds.clone();
        orphan[0].series_id = "zz".into();
        let err = evaluate(&orphan, &truth, 2).unwrap_err().to_string();
        assert!(err.contains("zz"), "{err}");
        assert!(evaluate(&[], &truth, 2).is_err());
    }
}
