use super::EVAL_CHUNK;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::MsunModel;
use crate::tensor::Tensor;

/// Arithmetic mean of per-size accuracies.
pub fn average_accuracy(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::invalid("average accuracy of an empty list"));
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

/// Top-1 accuracy of eval-mode predictions on `ds` (routed by size).
pub fn accuracy(model: &MsunModel, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let per = ds.sample_len();
    let mut correct = 0usize;
    let mut start = 0;
    while start < ds.len() {
        let end = (start + EVAL_CHUNK).min(ds.len());
        let mut shape = ds.images.shape().to_vec();
        shape[0] = end - start;
        let x = Tensor::from_slice(&shape, &ds.images.data()[start * per..end * per])?;
        let logits = model.predict(&x)?;
        let c = logits.shape()[1];
        correct += logits
            .data()
            .chunks(c)
            .zip(&ds.labels[start..end])
            .filter(|(row, &y)| crate::model::argmax(row) == y)
            .count();
        start = end;
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub size: usize,
    pub accuracy: f64,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub const HEADER: &'static str = "size,accuracy,flops";

    pub fn average_accuracy(&self) -> Result<f64> {
        average_accuracy(&self.records.iter().map(|r| r.accuracy).collect::<Vec<_>>())
    }

    pub fn mean_flops(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.flops as f64).sum::<f64>() / self.records.len() as f64
    }

    pub fn accuracy_at(&self, size: usize) -> Option<f64> {
        self.records.iter().find(|r| r.size == size).map(|r| r.accuracy)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.records {
            s.push_str(&format!("{},{},{}\n", r.size, r.accuracy, r.flops));
        }
        s.push_str(&format!("average,{},{}\n", self.average_accuracy()?, self.mean_flops()));
        Ok(s)
    }
}
