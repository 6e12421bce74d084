//! Evaluation: per-image and per-set protocols, confusion matrices and
//! per-class recall.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heads::{Backbone, HeadError, HeadModel};
use crate::image::ImageTensor;
use crate::nn::argmax;

/// Images per specimen set.
pub const SET_SIZE: usize = 3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("set requires exactly three images, got {0}")]
    WrongSetSize(usize),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("probability vectors of different lengths")]
    RaggedProbabilities,
    #[error(transparent)]
    Head(#[from] HeadError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub trait ProbabilisticClassifier: Send + Sync {
    fn classes(&self) -> Vec<String>;
    /// Class probabilities for one model-input image.
    fn predict_proba(&self, img: &ImageTensor) -> Result<Vec<f64>>;
}

/// A single head over a backbone.
pub struct HeadClassifier {
    pub head: HeadModel<f32>,
    pub backbone: Arc<dyn Backbone>,
}

impl ProbabilisticClassifier for HeadClassifier {
    fn classes(&self) -> Vec<String> {
        self.head.classes()
    }

    fn predict_proba(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.head.predict_image(img, self.backbone.as_ref())?)
    }
}

/// Element-wise mean of equally long probability vectors.
pub fn average_probabilities(ps: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = ps.first().map_or(0, Vec::len);
    if ps.iter().any(|p| p.len() != k) {
        return Err(EvalError::RaggedProbabilities);
    }
    let n = ps.len() as f64;
    Ok((0..k).map(|i| ps.iter().map(|p| p[i]).sum::<f64>() / n).collect())
}

/// Mean of the per-image probabilities of exactly three images.
pub fn predict_set(clf: &dyn ProbabilisticClassifier, images: &[ImageTensor]) -> Result<Vec<f64>> {
    if images.len() != SET_SIZE {
        return Err(EvalError::WrongSetSize(images.len()));
    }
    let ps = images.iter().map(|img| clf.predict_proba(img)).collect::<Result<Vec<_>>>()?;
    average_probabilities(&ps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    PerImage,
    PerSet,
}

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let k = classes.len();
        Self {
            classes,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| EvalError::UnknownLabel(label.to_owned()))
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn from_labels(classes: Vec<String>, truth: &[&str], predicted: &[&str]) -> Result<Self> {
        let mut m = Self::new(classes);
        for (t, p) in truth.iter().zip(predicted) {
            let (t, p) = (m.index_of(t)?, m.index_of(p)?);
            m.add(t, p);
        }
        Ok(m)
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn total(&self) -> u64 {
        self.row_sums().iter().sum()
    }

    /// Diagonal over row sum; `None` for classes with no examples.
    pub fn recall(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        let diag: u64 = (0..self.classes.len()).map(|i| self.counts[i][i]).sum();
        (total > 0).then(|| diag as f64 / total as f64)
    }

    /// CSV with a header row of predicted classes and one row per true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for c in &self.classes {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&self.counts) {
            out.push_str(c);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub n_items: usize,
    pub accuracy: Option<f64>,
    pub per_class_recall: BTreeMap<String, Option<f64>>,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(protocol: Protocol, confusion: ConfusionMatrix) -> Self {
        let per_class_recall = confusion.classes.iter().cloned().zip(confusion.recall()).collect();
        Self {
            protocol,
            n_items: confusion.total() as usize,
            accuracy: confusion.accuracy(),
            per_class_recall,
            confusion,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.confusion.classes.iter().map(String::len).max().unwrap_or(5).max(5);
        let pct = |v: Option<f64>| v.map_or("n/a".to_owned(), |r| format!("{:.1}%", 100.0 * r));
        writeln!(f, "protocol: {:?}  items: {}  accuracy: {}", self.protocol, self.n_items, pct(self.accuracy))?;
        writeln!(f, "{:<width$}  {:>8}  {:>6}", "class", "recall", "n")?;
        for (c, n) in self.confusion.classes.iter().zip(self.confusion.row_sums()) {
            writeln!(f, "{c:<width$}  {:>8}  {n:>6}", pct(self.per_class_recall[c]))?;
        }
        Ok(())
    }
}

/// Scores `(true label, probabilities)` pairs.
pub fn evaluate_probabilities(
    classes: Vec<String>,
    protocol: Protocol,
    items: &[(String, Vec<f64>)],
) -> Result<EvalReport> {
    let mut m = ConfusionMatrix::new(classes);
    for (label, p) in items {
        let t = m.index_of(label)?;
        if p.len() != m.classes.len() {
            return Err(EvalError::RaggedProbabilities);
        }
        m.add(t, argmax(p));
    }
    Ok(EvalReport::from_confusion(protocol, m))
}

/// A specimen's three images with its true label.
#[derive(Debug, Clone)]
pub struct SpecimenSet {
    pub specimen_id: String,
    pub label: String,
    pub images: Vec<ImageTensor>,
}

pub fn evaluate_images(clf: &dyn ProbabilisticClassifier, items: &[(ImageTensor, String)]) -> Result<EvalReport> {
    let classes = clf.classes();
    let scored = items
        .iter()
        .map(|(img, label)| {
            if !classes.contains(label) {
                return Err(EvalError::UnknownLabel(label.clone()));
            }
            Ok((label.clone(), clf.predict_proba(img)?))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_probabilities(classes, Protocol::PerImage, &scored)
}

pub fn evaluate_sets(clf: &dyn ProbabilisticClassifier, sets: &[SpecimenSet]) -> Result<EvalReport> {
    let classes = clf.classes();
    let scored = sets
        .iter()
        .map(|s| {
            if !classes.contains(&s.label) {
                return Err(EvalError::UnknownLabel(s.label.clone()));
            }
            Ok((s.label.clone(), predict_set(clf, &s.images)?))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_probabilities(classes, Protocol::PerSet, &scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Scale;
    use proptest::prelude::*;

    /// Probabilities from the mean red intensity.
    struct RedClassifier;

    impl ProbabilisticClassifier for RedClassifier {
        fn classes(&self) -> Vec<String> {
            vec!["low".into(), "high".into()]
        }

        fn predict_proba(&self, img: &ImageTensor) -> Result<Vec<f64>> {
            let r = f64::from(img.pixel(0, 0)[0]) / 255.0;
            Ok(vec![1.0 - r, r])
        }
    }

    fn img(red: f32) -> ImageTensor {
        ImageTensor::filled(2, 2, Scale::Byte, [red, 0.0, 0.0])
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn set_averages_three_images() {
        let p = predict_set(&RedClassifier, &[img(0.0), img(255.0), img(51.0)]).unwrap();
        assert!((p[1] - (0.0 + 1.0 + 0.2) / 3.0).abs() < 1e-12);
        assert!(matches!(
            predict_set(&RedClassifier, &[img(0.0), img(1.0)]),
            Err(EvalError::WrongSetSize(2))
        ));
        let e = predict_set(&RedClassifier, &vec![img(0.0); 4]).unwrap_err();
        assert_eq!(e.to_string(), "set requires exactly three images, got 4");
    }

    #[test]
    fn identical_images_reproduce_single_prediction() {
        let single = RedClassifier.predict_proba(&img(90.0)).unwrap();
        let set = predict_set(&RedClassifier, &[img(90.0), img(90.0), img(90.0)]).unwrap();
        for (a, b) in single.iter().zip(&set) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let r = evaluate_probabilities(names(&["a", "b"]), Protocol::PerImage, &[("b".into(), vec![0.5, 0.5])]).unwrap();
        assert_eq!(r.confusion.counts, vec![vec![0, 0], vec![1, 0]]);
    }

    #[test]
    fn confusion_example() {
        let m = ConfusionMatrix::from_labels(
            names(&["a", "b", "c"]),
            &["a", "a", "b", "c", "c", "c"],
            &["a", "b", "b", "c", "a", "c"],
        )
        .unwrap();
        assert_eq!(m.counts, vec![vec![1, 1, 0], vec![0, 1, 0], vec![1, 0, 2]]);
        assert_eq!(m.row_sums(), vec![2, 1, 3]);
        assert_eq!(m.recall(), vec![Some(0.5), Some(1.0), Some(2.0 / 3.0)]);
        assert_eq!(m.to_csv(), "true\\predicted,a,b,c\na,1,1,0\nb,0,1,0\nc,1,0,2\n");
    }

    #[test]
    fn empty_class_has_no_recall() {
        let m = ConfusionMatrix::from_labels(names(&["a", "b"]), &["a"], &["a"]).unwrap();
        assert_eq!(m.recall(), vec![Some(1.0), None]);
    }

    #[test]
    fn unknown_label_is_an_error() {
        assert!(matches!(
            ConfusionMatrix::from_labels(names(&["a"]), &["z"], &["a"]),
            Err(EvalError::UnknownLabel(_))
        ));
        assert!(matches!(
            evaluate_images(&RedClassifier, &[(img(0.0), "medium".into())]),
            Err(EvalError::UnknownLabel(_))
        ));
    }

    #[test]
    fn report_formats() {
        let sets = vec![
            SpecimenSet {
                specimen_id: "s1".into(),
                label: "high".into(),
                images: vec![img(200.0), img(250.0), img(10.0)],
            },
            SpecimenSet {
                specimen_id: "s2".into(),
                label: "low".into(),
                images: vec![img(10.0), img(20.0), img(30.0)],
            },
        ];
        let r = evaluate_sets(&RedClassifier, &sets).unwrap();
        assert_eq!(r.protocol, Protocol::PerSet);
        assert_eq!(r.n_items, 2);
        assert_eq!(r.accuracy, Some(1.0));
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["protocol"], "per_set");
        assert_eq!(json["per_class_recall"]["high"], 1.0);
        let text = r.to_string();
        assert!(text.contains("high") && text.contains("100.0%"));
    }

    proptest! {
        #[test]
        fn rows_sum_to_populations(labels in proptest::collection::vec((0usize..4, 0usize..4), 0..60)) {
            let classes = names(&["a", "b", "c", "d"]);
            let t: Vec<&str> = labels.iter().map(|&(t, _)| classes[t].as_str()).collect();
            let p: Vec<&str> = labels.iter().map(|&(_, p)| classes[p].as_str()).collect();
            let m = ConfusionMatrix::from_labels(classes.clone(), &t, &p).unwrap();
            for (i, c) in classes.iter().enumerate() {
                let pop = t.iter().filter(|&&x| x == c).count() as u64;
                prop_assert_eq!(m.row_sums()[i], pop);
                if let Some(r) = m.recall()[i] {
                    prop_assert!((r * pop as f64 - m.counts[i][i] as f64).abs() < 1e-9);
                }
            }
        }
    }
}
