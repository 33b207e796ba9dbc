//! Plain-text checkpoint file.
//!
//! ```text
//! EGS-CKPT v1
//! PARAM <name> <ndim> <dims...>
//! <row-major values, one line per innermost row>
//! ...
//! META
//! step <u64>
//! seed <u64>
//! config_hash <hex>
//! budgets <comma-separated>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::optim::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "EGS-CKPT v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub budgets: Vec<usize>,
}

pub fn checkpoint_to_string(store: &ParameterStore, meta: &CheckpointMeta) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    for p in store.iter() {
        let shape = p.value.shape();
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "PARAM {} {} {}", p.name, shape.len(), dims.join(" "));
        for r in 0..p.value.rows() {
            let row: Vec<String> = p.value.row(r).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    let budgets: Vec<String> = meta.budgets.iter().map(|b| b.to_string()).collect();
    let _ = writeln!(out, "META");
    let _ = writeln!(out, "step {}", meta.step);
    let _ = writeln!(out, "seed {}", meta.seed);
    let _ = writeln!(out, "config_hash {}", meta.config_hash);
    let _ = writeln!(out, "budgets {}", budgets.join(","));
    out
}

pub fn write_checkpoint(path: impl AsRef<Path>, store: &ParameterStore, meta: &CheckpointMeta) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_to_string(store, meta)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(ParameterStore, CheckpointMeta)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}

fn perr(line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        line,
        reason: reason.into(),
    }
}

pub fn parse_checkpoint(text: &str) -> Result<(ParameterStore, CheckpointMeta)> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.first() != Some(&MAGIC) {
        return Err(perr(1, format!("expected `{MAGIC}`")));
    }
    let mut store = ParameterStore::new();
    let mut i = 1;
    while i < lines.len() && lines[i].starts_with("PARAM ") {
        let parts: Vec<&str> = lines[i].split(' ').collect();
        if parts.len() < 3 {
            return Err(perr(i + 1, "expected `PARAM <name> <ndim> <dims...>`"));
        }
        let name = parts[1];
        let ndim: usize = parts[2].parse().map_err(|_| perr(i + 1, "bad ndim"))?;
        if parts.len() != 3 + ndim {
            return Err(perr(i + 1, format!("expected {ndim} dims")));
        }
        let shape: Vec<usize> = parts[3..]
            .iter()
            .map(|d| d.parse().map_err(|_| perr(i + 1, format!("bad dim `{d}`"))))
            .collect::<Result<_>>()?;
        let cols = *shape.last().unwrap_or(&1);
        let rows: usize = if shape.is_empty() { 1 } else { shape[..shape.len() - 1].iter().product() };
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let ln = i + 2 + r;
            let line = lines
                .get(ln - 1)
                .ok_or_else(|| Error::Format(format!("parameter {name} truncated")))?;
            let before = data.len();
            for tok in line.split(' ') {
                data.push(tok.parse::<f64>().map_err(|_| perr(ln, format!("bad value `{tok}`")))?);
            }
            if data.len() - before != cols {
                return Err(Error::Format(format!(
                    "parameter {name} row {r} has {} values, expected {cols}",
                    data.len() - before
                )));
            }
        }
        store.add(name, Tensor::new(shape, data)?)?;
        i += 1 + rows;
    }
    if lines.get(i) != Some(&"META") {
        return Err(perr(i + 1, "expected META block"));
    }
    let mut step = None;
    let mut seed = None;
    let mut config_hash = None;
    let mut budgets = None;
    for (k, line) in lines.iter().enumerate().skip(i + 1) {
        let (key, val) = line.split_once(' ').ok_or_else(|| perr(k + 1, "expected `<key> <value>`"))?;
        match key {
            "step" => step = Some(val.parse().map_err(|_| perr(k + 1, "bad step"))?),
            "seed" => seed = Some(val.parse().map_err(|_| perr(k + 1, "bad seed"))?),
            "config_hash" => config_hash = Some(val.to_string()),
            "budgets" => {
                budgets = Some(
                    val.split(',')
                        .map(|b| b.parse().map_err(|_| perr(k + 1, format!("bad budget `{b}`"))))
                        .collect::<Result<Vec<usize>>>()?,
                )
            }
            other => return Err(perr(k + 1, format!("unknown META key `{other}`"))),
        }
    }
    let missing = |k: &str| Error::Format(format!("META block missing `{k}`"));
    let meta = CheckpointMeta {
        step: step.ok_or_else(|| missing("step"))?,
        seed: seed.ok_or_else(|| missing("seed"))?,
        config_hash: config_hash.ok_or_else(|| missing("config_hash"))?,
        budgets: budgets.ok_or_else(|| missing("budgets"))?,
    };
    store.set_step(meta.step);
    Ok((store, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            step: 12,
            seed: 2026,
            config_hash: "00ff".into(),
            budgets: vec![8, 16],
        }
    }

    #[test]
    fn round_trip_exact() {
        let mut s = ParameterStore::new();
        s.add("a.weight", Tensor::matrix(2, 3, vec![0.1, -1.0 / 3.0, 1e-300, 5.0, 7e10, -0.0]).unwrap())
            .unwrap();
        s.add("b", Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, f64::MIN_POSITIVE]).unwrap())
            .unwrap();
        let text = checkpoint_to_string(&s, &meta());
        let (back, m) = parse_checkpoint(&text).unwrap();
        assert_eq!(m, meta());
        for (p, q) in s.iter().zip(back.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
        assert_eq!(checkpoint_to_string(&back, &m), text);
    }

    #[test]
    fn malformed() {
        assert!(parse_checkpoint("nope").is_err());
        let bad = "EGS-CKPT v1\nPARAM a 2 1 2\n1 2 3\nMETA\nstep 1\nseed 1\nconfig_hash x\nbudgets 1\n";
        assert!(matches!(parse_checkpoint(bad), Err(Error::Format(_))));
        let bad = "EGS-CKPT v1\nMETA\nstep 1\nseed 1\nbudgets 1\n";
        assert!(matches!(parse_checkpoint(bad), Err(Error::Format(_))));
        let bad = "EGS-CKPT v1\nMETA\nstep 1\nwhat 2\n";
        assert!(matches!(parse_checkpoint(bad), Err(Error::Parse { line: 4, .. })));
    }
}
