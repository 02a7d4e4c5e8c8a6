//! One-vs-all evaluation of distilled models.
//!
//! A sample is accepted when the argmax over all logits (ties to the lowest
//! class) is the target class.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::analysis::{layer_maps, LayerMaps};
use crate::codec::model_digest;
use crate::data::Dataset;
use crate::distiller::{critical_path_from_maps, distill, DistillConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Scalar;
use crate::trainer::predict;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneVsAll {
    pub tp: f64,
    pub fp: f64,
}

/// TP/FP rates from predictions.
pub fn one_vs_all_rates(predictions: &[usize], labels: &[usize], target_class: usize) -> Result<OneVsAll> {
    let (mut pos, mut tp, mut neg, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        let accepted = p == target_class;
        if l == target_class {
            pos += 1;
            tp += accepted as usize;
        } else {
            neg += 1;
            fp += accepted as usize;
        }
    }
    if pos == 0 {
        return Err(Error::UndefinedTp { class: target_class });
    }
    if neg == 0 {
        return Err(Error::UndefinedFp { class: target_class });
    }
    Ok(OneVsAll { tp: tp as f64 / pos as f64, fp: fp as f64 / neg as f64 })
}

pub fn eval_one_vs_all<T: Scalar>(model: &Model<T>, test_set: &Dataset, target_class: usize) -> Result<OneVsAll> {
    let labels = test_set.labels();
    if !labels.contains(&target_class) {
        return Err(Error::UndefinedTp { class: target_class });
    }
    if labels.iter().all(|&l| l == target_class) {
        return Err(Error::UndefinedFp { class: target_class });
    }
    let preds = predict(model, test_set)?;
    one_vs_all_rates(&preds, labels, target_class)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub class: usize,
    pub tp: f64,
    pub fp: f64,
    pub params: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub mean_tp: f64,
    pub mean_fp: f64,
    /// Chance FP rate of the argmax rule on balanced data, `1/(n−1)`.
    pub chance_fp: f64,
    pub source_digest: alloc::string::String,
    pub source_params: usize,
    pub source_bytes: usize,
    pub reserved_ratio: f64,
    pub distill_layers: Vec<usize>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<ReportRow>, model: &Model<f32>, base: &DistillConfig, digest: alloc::string::String) -> Self {
        let n = rows.len().max(1) as f64;
        let stats = model.param_stats();
        Self {
            mean_tp: rows.iter().map(|r| r.tp).sum::<f64>() / n,
            mean_fp: rows.iter().map(|r| r.fp).sum::<f64>() / n,
            chance_fp: 1.0 / (model.num_classes().max(2) - 1) as f64,
            rows,
            source_digest: digest,
            source_params: stats.total_params,
            source_bytes: stats.total_bytes(),
            reserved_ratio: base.reserved_ratio,
            distill_layers: base.distill_layers.clone(),
        }
    }
}

/// Distill and evaluate one class from precomputed maps.
pub fn report_row(
    model: &Model<f32>,
    maps: &[LayerMaps],
    test_set: &Dataset,
    base: &DistillConfig,
    digest: &str,
    class: usize,
) -> Result<ReportRow> {
    let config = DistillConfig { target_class: class, ..base.clone() };
    config.validate(model.arch())?;
    let path = critical_path_from_maps(maps, &config, digest.into())?;
    let distilled = distill(model, &path)?;
    let rates = eval_one_vs_all(&distilled.model, test_set, class)?;
    let stats = distilled.model.param_stats();
    Ok(ReportRow { class, tp: rates.tp, fp: rates.fp, params: stats.total_params, bytes: stats.total_bytes() })
}

/// Distill every class from shared maps and evaluate each one-vs-all task.
/// Maps come from `analysis_set`; rates from `test_set`.
pub fn full_report(
    model: &Model<f32>,
    analysis_set: &Dataset,
    test_set: &Dataset,
    base: &DistillConfig,
) -> Result<EvalReport> {
    base.validate(model.arch())?;
    for class in 0..model.num_classes() {
        if !test_set.labels().contains(&class) {
            return Err(Error::EmptyClass { class });
        }
    }
    let maps = layer_maps(model, analysis_set, &base.distill_layers, &base.analysis)?;
    let digest = model_digest(model);
    let rows = (0..model.num_classes())
        .map(|class| report_row(model, &maps, test_set, base, &digest, class))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows, model, base, digest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_from_predictions() {
        let labels = [0, 0, 1, 1, 2, 2];
        let preds = [0, 1, 0, 1, 2, 2];
        let r = one_vs_all_rates(&preds, &labels, 0).unwrap();
        assert_eq!(r, OneVsAll { tp: 0.5, fp: 0.25 });
        assert!(matches!(one_vs_all_rates(&preds, &labels, 5), Err(Error::UndefinedTp { class: 5 })));
        assert!(matches!(one_vs_all_rates(&[0], &[0], 0), Err(Error::UndefinedFp { class: 0 })));
    }

    #[test]
    fn rates_ignore_order() {
        let labels = [0, 1, 2, 0, 1];
        let preds = [0, 0, 2, 1, 1];
        let a = one_vs_all_rates(&preds, &labels, 0).unwrap();
        let b = one_vs_all_rates(&[1, 1, 0, 2, 0], &[1, 1, 0, 2, 0], 0).unwrap();
        assert_eq!(a.tp, 0.5);
        assert_eq!(b.tp, 1.0);
        let rl: Vec<usize> = labels.iter().rev().copied().collect();
        let rp: Vec<usize> = preds.iter().rev().copied().collect();
        assert_eq!(one_vs_all_rates(&rp, &rl, 0).unwrap(), a);
    }
}
