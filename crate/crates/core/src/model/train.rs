use super::loss::{si_loss, total_loss, LossBreakdown};
use super::msun::MsunModel;
use crate::data::MultiScaleBatch;
use crate::error::{Error, Result};
use crate::optim::{sgd_step, OptimizerState};
use crate::tape::{Mode, Tape};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    /// Correct predictions of the largest-scale branch.
    pub correct: usize,
    pub batch_size: usize,
}

/// One optimization step: zero grads, forward every branch, scale-invariant
/// and total loss, backward, SGD update, then the batch-norm running
/// statistics.
pub fn training_step(
    model: &mut MsunModel,
    batch: &MultiScaleBatch,
    opt: &mut OptimizerState,
    hp: StepParams,
) -> Result<StepOutcome> {
    model.params.zero_grad();
    let mut tape: Tape<f32> = Tape::new();
    let inputs: Vec<_> = batch.images.iter().map(|x| tape.constant(x.clone())).collect();
    let outs = model.forward_train(&mut tape, &inputs, Mode::Train)?;
    let logits: Vec<_> = outs.iter().map(|o| o.logits).collect();
    let si = if outs.len() >= 2 {
        let feats: Vec<_> = outs.iter().map(|o| o.features).collect();
        Some(si_loss(&mut tape, &feats)?)
    } else {
        None
    };
    let (total, loss) = total_loss(&mut tape, &logits, &batch.labels, si, hp.lambda)?;
    if !loss.total.is_finite() {
        let at = tape.first_non_finite().unwrap_or_else(|| "total loss".to_string());
        return Err(Error::NonFinite(format!("loss {} (first non-finite: {at})", loss.total)));
    }
    tape.backward(total)?;
    tape.write_param_grads(&mut model.params);
    sgd_step(&mut model.params, opt, hp.lr, hp.momentum, hp.weight_decay)?;
    model.params.apply_stat_updates(tape.take_stat_updates());

    let last = tape.value(*logits.last().expect("at least one branch"));
    let classes = last.shape()[1];
    let correct = last
        .data()
        .chunks(classes)
        .zip(&batch.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(StepOutcome {
        loss,
        correct,
        batch_size: batch.labels.len(),
    })
}

/// Index of the first maximum.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
