use serde::{Deserialize, Serialize};

use crate::dataset::{Label, LabeledInstance};
use crate::error::{arg, Result};
use crate::svm::SvmModel;

/// Confusion counts with precision, recall and F1 for the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1; every zero denominator yields 0.
pub fn f_measure(tp: usize, fp: usize, fn_: usize) -> Metrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics {
        tp,
        fp,
        fn_,
        tn: 0,
        precision,
        recall,
        f1,
    }
}

pub fn evaluate(model: &SvmModel, test: &[LabeledInstance]) -> Result<Metrics> {
    if test.is_empty() {
        return arg("empty test set");
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for x in test {
        match (model.predict(&x.features)?, x.label) {
            (Label::Positive, Label::Positive) => tp += 1,
            (Label::Positive, Label::Negative) => fp += 1,
            (Label::Negative, Label::Positive) => fn_ += 1,
            (Label::Negative, Label::Negative) => tn += 1,
        }
    }
    Ok(Metrics {
        tn,
        ..f_measure(tp, fp, fn_)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SparseVector;
    use crate::svm::TrainConfig;

    fn constant_model(bias: f64) -> SvmModel {
        SvmModel {
            weights: vec![0.0],
            bias,
            alphas: vec![],
            config: TrainConfig::default(),
            converged: true,
            iterations: 0,
        }
    }

    fn test_set(pos: usize, n: usize) -> Vec<LabeledInstance> {
        (0..n)
            .map(|i| {
                let l = if i < pos { Label::Positive } else { Label::Negative };
                LabeledInstance::new(SparseVector::empty(), l)
            })
            .collect()
    }

    #[test]
    fn formula() {
        let m = f_measure(1, 1, 1);
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
        let m = f_measure(0, 0, 5);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert_eq!(f_measure(10, 0, 0).f1, 1.0);
    }

    #[test]
    fn counting() {
        let m = evaluate(&constant_model(-1.0), &test_set(3, 10)).unwrap();
        assert_eq!((m.tp, m.fn_, m.tn, m.fp), (0, 3, 7, 0));
        assert_eq!(m.f1, 0.0);

        let m = evaluate(&constant_model(1.0), &test_set(176, 1000)).unwrap();
        assert!((m.precision - 0.176).abs() < 1e-12);
        assert_eq!(m.recall, 1.0);
        // 2·0.176/1.176
        assert!((m.f1 - 0.299_319_727_891_156_4).abs() < 1e-12);

        assert!(evaluate(&constant_model(1.0), &[]).is_err());
    }

    #[test]
    fn perfect_model() {
        let data = vec![
            LabeledInstance::new(SparseVector::binary([0]), Label::Positive),
            LabeledInstance::new(SparseVector::empty(), Label::Negative),
        ];
        let model = SvmModel {
            weights: vec![2.0],
            bias: -1.0,
            ..constant_model(0.0)
        };
        assert_eq!(evaluate(&model, &data).unwrap().f1, 1.0);
    }
}
