use super::{ExperimentSpec, Method};
use crate::analysis::{accuracy, count_flops, EvalRecord, EvalReport};
use crate::data::{bilinear_resize, for_each_batch, make_multiscale, Dataset};
use crate::error::{Error, Result};
use crate::model::{build_vanilla, training_step, transform_to_msun, MsunModel, ScaleSet, StepParams};
use crate::optim::{lr_at, OptimizerState};
use crate::rng::Rng;

pub const LOG_HEADER: &str = "epoch,split,loss_total,loss_ce,loss_si,clamped,accuracy,lr";

/// One line of the training log. Test rows carry only accuracy and the
/// loss columns are empty.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss_total: Option<f64>,
    pub loss_ce: Option<f64>,
    pub loss_si: Option<f64>,
    /// Fraction of the epoch's steps whose scale-invariant term was clamped.
    pub clamped: Option<f64>,
    pub accuracy: f64,
    pub lr: Option<f64>,
}

impl LogRow {
    pub fn to_csv_line(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            f(self.loss_total),
            f(self.loss_ce),
            f(self.loss_si),
            f(self.clamped),
            self.accuracy,
            f(self.lr)
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub method: Method,
    pub model: MsunModel,
    pub log: Vec<LogRow>,
}

impl TrainRun {
    pub fn log_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.log {
            s.push_str(&r.to_csv_line());
            s.push('\n');
        }
        s
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.log.iter().rev().find(|r| r.split == "test").map(|r| r.accuracy)
    }
}

fn build_model(spec: &ExperimentSpec, rng: &mut Rng) -> Result<MsunModel> {
    match spec.method {
        Method::Vanilla | Method::Mst => build_vanilla(&spec.backbone, rng),
        Method::Msun => transform_to_msun(&spec.backbone, spec.subnet_blocks, &spec.scale_set()?, rng),
    }
}

/// Trains per `spec` on `train`. After every epoch the model is evaluated
/// on `test` (at its native size) when given.
///
/// Vanilla sees only the canonical size. MST sees each batch at one
/// uniformly drawn quantized size, upsampled back to the canonical size.
/// The multi-scale network sees every batch at all quantized sizes.
pub fn train(spec: &ExperimentSpec, train_set: &Dataset, test: Option<&Dataset>) -> Result<TrainRun> {
    spec.validate()?;
    if train_set.num_classes() != spec.backbone.num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes but the model {}",
            train_set.num_classes(),
            spec.backbone.num_classes
        )));
    }
    let cfg = &spec.train;
    let root = Rng::new(cfg.seed);
    let mut model = build_model(spec, &mut root.fork("init"))?;
    let scales = spec.scale_set()?;
    let canonical = scales.largest();
    let batch_scales = match spec.method {
        Method::Msun => scales.clone(),
        _ => ScaleSet::new(vec![canonical])?,
    };
    let lambda = if spec.method == Method::Msun { cfg.lambda } else { 0.0 };
    let train_set = if train_set.native_size == canonical {
        std::borrow::Cow::Borrowed(train_set)
    } else {
        std::borrow::Cow::Owned(train_set.resized(canonical))
    };
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = OptimizerState::new(&model.params);
    let mut step = 0usize;
    let mut log = Vec::new();

    for epoch in 0..cfg.epochs {
        let stream = make_multiscale(
            &train_set,
            &batch_scales,
            cfg.batch_size,
            root.fork_index("epoch", epoch as u64).seed(),
        );
        let (mut sum_total, mut sum_ce, mut sum_si) = (0.0, 0.0, 0.0);
        let (mut clamped, mut correct, mut seen, mut steps) = (0usize, 0usize, 0usize, 0usize);
        let mut lr = 0.0;
        for_each_batch(stream, spec.threads, |mut batch| {
            if spec.method == Method::Mst {
                let pick = root.fork_index("mst", step as u64).below(scales.len());
                let r = scales.get(pick);
                if r != canonical {
                    let down = bilinear_resize(&batch.images[0], r);
                    batch.images[0] = bilinear_resize(&down, canonical);
                }
            }
            lr = lr_at(step, total_steps, cfg);
            let hp = StepParams {
                lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
                lambda,
            };
            let out = training_step(&mut model, &batch, &mut opt, hp).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
            sum_total += out.loss.total;
            sum_ce += out.loss.ce_sum();
            sum_si += out.loss.si;
            clamped += out.loss.clamped as usize;
            correct += out.correct;
            seen += out.batch_size;
            steps += 1;
            step += 1;
            Ok(())
        })?;
        let k = steps.max(1) as f64;
        log.push(LogRow {
            epoch,
            split: "train",
            loss_total: Some(sum_total / k),
            loss_ce: Some(sum_ce / k),
            loss_si: Some(sum_si / k),
            clamped: Some(clamped as f64 / k),
            accuracy: correct as f64 / seen.max(1) as f64,
            lr: Some(lr),
        });
        if let Some(t) = test {
            log.push(LogRow {
                epoch,
                split: "test",
                loss_total: None,
                loss_ce: None,
                loss_si: None,
                clamped: None,
                accuracy: accuracy(&model, t)?,
                lr: None,
            });
        }
    }
    Ok(TrainRun {
        method: spec.method,
        model,
        log,
    })
}

/// Accuracy and inference FLOPs per evaluation size. `test_at(size)` must
/// return the test samples presented at that size; the model routes (or,
/// with a single branch, upsamples) them itself.
pub fn eval_multiscale<F>(model: &MsunModel, sizes: &[usize], mut test_at: F) -> Result<EvalReport>
where
    F: FnMut(usize) -> Result<Dataset>,
{
    if sizes.is_empty() {
        return Err(Error::invalid("no evaluation sizes"));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s < 8) {
        return Err(Error::invalid(format!("evaluation size {s} is below the minimum of 8")));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("evaluation sizes must be strictly ascending"));
    }
    let mut records = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let ds = test_at(size)?;
        records.push(EvalRecord {
            size,
            accuracy: accuracy(model, &ds)?,
            flops: count_flops(model, size)?.total(),
        });
    }
    Ok(EvalReport { records })
}
