//! Plain-text checkpoint format.
//!
//! ```text
//! TEMPO-CKPT-1
//! config <TempoConfig as one-line JSON>
//! params <count>
//! param <name> <group> <trainable 0|1> <rows> <cols>
//! <rows·cols values, space separated>
//! ...
//! ```
//!
//! Values use the shortest decimal form that parses back to the same `f64`,
//! so save followed by load is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{TempoConfig, TempoModel};
use crate::backbone::params::{ParamGroup, ParamStore};
use crate::backbone::tape::Mat;
use crate::error::{Result, TempoError};

pub const MAGIC: &str = "TEMPO-CKPT-1";

fn bad(msg: impl Into<String>) -> TempoError {
    TempoError::Checkpoint(msg.into())
}

pub fn to_string(model: &TempoModel) -> Result<String> {
    let config = serde_json::to_string(&model.config).map_err(|e| bad(e.to_string()))?;
    let mut out = format!("{MAGIC}\nconfig {config}\nparams {}\n", model.params.len());
    for p in model.params.iter() {
        let (r, c) = p.value.dim();
        writeln!(out, "param {} {} {} {r} {c}", p.name, p.group, u8::from(p.trainable)).expect("string write");
        let values: Vec<String> = p.value.iter().map(|v| v.to_string()).collect();
        out.push_str(&values.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn from_str(text: &str) -> Result<TempoModel> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad(format!("missing {MAGIC} header")));
    }
    let config_json = lines
        .next()
        .and_then(|l| l.strip_prefix("config "))
        .ok_or_else(|| bad("missing config line"))?;
    let config: TempoConfig = serde_json::from_str(config_json).map_err(|e| bad(format!("config: {e}")))?;
    config.validate()?;
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("params "))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad("missing params line"))?;

    let mut params = ParamStore::new();
    for _ in 0..count {
        let header = lines.next().ok_or_else(|| bad("truncated parameter list"))?;
        let fields: Vec<&str> = header.split(' ').collect();
        let ["param", name, group, trainable, rows, cols] = fields.as_slice() else {
            return Err(bad(format!("malformed parameter header {header:?}")));
        };
        let group: ParamGroup = group.parse()?;
        let dim = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad dimension {s:?} for {name}")));
        let (rows, cols) = (dim(rows)?, dim(cols)?);
        let body = lines.next().ok_or_else(|| bad(format!("missing values for {name}")))?;
        let values = body
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad value {s:?} in {name}"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != rows * cols {
            return Err(bad(format!("{name}: expected {} values, found {}", rows * cols, values.len())));
        }
        let value = Mat::from_shape_vec((rows, cols), values).expect("length checked");
        let id = params.insert(*name, group, value)?;
        params.param_mut(id).trainable = match *trainable {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("bad trainable flag {other:?} for {name}"))),
        };
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(bad("trailing content after parameters"));
    }

    // Layout check: a fresh model from the same config has the same tensors.
    let reference = TempoModel::new(config.clone())?;
    if reference.params.len() != params.len() {
        return Err(bad("parameter count does not match the config"));
    }
    for p in reference.params.iter() {
        let id = params.id(&p.name).ok_or_else(|| bad(format!("missing parameter {}", p.name)))?;
        if params.param(id).value.dim() != p.value.dim() {
            return Err(bad(format!("parameter {} has the wrong shape", p.name)));
        }
    }
    Ok(TempoModel { config, params })
}

pub fn save(model: &TempoModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_string(model)?).map_err(|e| TempoError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<TempoModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| TempoError::io(path, e))?;
    from_str(&text)
}
