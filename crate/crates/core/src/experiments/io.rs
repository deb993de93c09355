use std::collections::BTreeMap;
use std::path::Path;

use super::Method;
use crate::checkpoint::Snapshot;
use crate::error::{Error, Result};
use crate::model::{transform_to_msun, BackboneSpec, MsunModel, ScaleSet};
use crate::rng::Rng;

/// A model restored from disk together with how it was trained.
#[derive(Debug)]
pub struct Checkpoint {
    pub method: Method,
    pub model: MsunModel,
}

fn meta_string(model: &MsunModel, method: Method) -> String {
    let s = &model.spec;
    let widths: Vec<String> = s.widths.iter().map(|w| w.to_string()).collect();
    [
        ("method", method.to_string()),
        ("subnet_blocks", model.subnet_blocks.to_string()),
        ("widths", widths.join(",")),
        ("blocks_per_stage", s.blocks_per_stage.to_string()),
        ("block_kind", s.block_kind.to_string()),
        ("num_classes", s.num_classes.to_string()),
        ("input_size", s.input_size.to_string()),
        ("in_channels", s.in_channels.to_string()),
        ("stem_kernel", s.stem_kernel.to_string()),
        ("stem_stride", s.stem_stride.to_string()),
        ("stem_pool", s.stem_pool.to_string()),
    ]
    .iter()
    .map(|(k, v)| format!("{k}={v}\n"))
    .collect()
}

pub fn save_checkpoint(model: &MsunModel, method: Method, path: &Path) -> Result<()> {
    let scales = model
        .scales
        .sizes()
        .iter()
        .map(|&s| u32::try_from(s).map_err(|_| Error::invalid("scale does not fit in u32")))
        .collect::<Result<_>>()?;
    Snapshot {
        scales,
        meta: meta_string(model, method),
        tensors: model.params.named_tensors(),
    }
    .save(path)
}

fn parse<T: std::str::FromStr>(meta: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
    let raw = meta.get(key).ok_or_else(|| Error::Format {
        what: "checkpoint",
        msg: format!("missing meta key `{key}`"),
    })?;
    raw.parse().map_err(|_| Error::Format {
        what: "checkpoint",
        msg: format!("bad value `{raw}` for `{key}`"),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let snap = Snapshot::load(path)?;
    let meta: BTreeMap<&str, &str> = snap.meta.lines().filter_map(|l| l.split_once('=')).collect();
    let widths = meta
        .get("widths")
        .unwrap_or(&"")
        .split(',')
        .map(|w| {
            w.parse().map_err(|_| Error::Format {
                what: "checkpoint",
                msg: format!("bad width `{w}`"),
            })
        })
        .collect::<Result<Vec<usize>>>()?;
    let kind: String = parse(&meta, "block_kind")?;
    let spec = BackboneSpec {
        widths,
        blocks_per_stage: parse(&meta, "blocks_per_stage")?,
        block_kind: kind.parse()?,
        num_classes: parse(&meta, "num_classes")?,
        input_size: parse(&meta, "input_size")?,
        in_channels: parse(&meta, "in_channels")?,
        stem_kernel: parse(&meta, "stem_kernel")?,
        stem_stride: parse(&meta, "stem_stride")?,
        stem_pool: parse(&meta, "stem_pool")?,
    };
    let method: String = parse(&meta, "method")?;
    let scales = ScaleSet::new(snap.scales.iter().map(|&s| s as usize).collect())?;
    let mut model = transform_to_msun(&spec, parse(&meta, "subnet_blocks")?, &scales, &mut Rng::new(0))?;
    model.params.load_named(&snap.tensors)?;
    Ok(Checkpoint {
        method: method.parse()?,
        model,
    })
}
