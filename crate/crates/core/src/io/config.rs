//! Run configuration: `key = value` lines, `#` starts a comment.
//!
//! | key                   | default      | range                     |
//! |-----------------------|--------------|---------------------------|
//! | `sparsity.<layer>`    | 0            | `[0, 1)`                  |
//! | `granularity.<layer>` | see below    | `kernel`, `capsule_group` |
//! | `routing_iters`       | 3            | ≥ 1                       |
//! | `frac_bits`           | 8            | 1..=15                    |
//! | `pe_count`            | 10           | ≥ 1                       |
//! | `fact`                | 10           | ≥ 1                       |
//! | `clock_hz`            | 100000000    | > 0                       |
//! | `mode`                | `reference`  | `reference`, `optimized`  |
//! | `pruner`              | `lakp`       | `lakp`, `kp`              |
//! | `arith`               | `real`       | `real`, `fx16`            |
//! | `cost.<primitive>`    | cost table   | ≥ 1                       |
//!
//! Layers are `conv1` (default granularity `kernel`) and `primary` (default
//! `capsule_group`). Unknown keys and repeated keys are errors.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::read_file;
use crate::accel::{CostTable, PEArraySpec};
use crate::capsnet::RoutingMode;
use crate::error::{Error, Result};
use crate::fxp::FxFormat;
use crate::pruning::{Granularity, Pruner};

/// Prunable layers, in network order.
pub const LAYER_NAMES: [&str; 2] = ["conv1", "primary"];

/// Numeric carrier for inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Arith {
    #[default]
    Real,
    Fx16,
}

impl FromStr for Arith {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "real" => Ok(Arith::Real),
            "fx16" => Ok(Arith::Fx16),
            other => Err(format!("unknown arithmetic `{other}` (expected real or fx16)")),
        }
    }
}

impl fmt::Display for Arith {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arith::Real => "real",
            Arith::Fx16 => "fx16",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Per layer, in [`LAYER_NAMES`] order.
    pub sparsity: [f64; 2],
    pub granularity: [Granularity; 2],
    pub routing_iters: usize,
    pub frac_bits: u32,
    pub pe_count: usize,
    pub fact: usize,
    pub clock_hz: f64,
    pub mode: RoutingMode,
    pub pruner: Pruner,
    pub arith: Arith,
    pub costs: CostTable,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sparsity: [0.0, 0.0],
            granularity: [Granularity::Kernel, Granularity::CapsuleGroup],
            routing_iters: 3,
            frac_bits: 8,
            pe_count: 10,
            fact: 10,
            clock_hz: 100e6,
            mode: RoutingMode::Reference,
            pruner: Pruner::LookAhead,
            arith: Arith::Real,
            costs: CostTable::default(),
        }
    }
}

impl RunConfig {
    pub fn format(&self) -> FxFormat {
        FxFormat::new(self.frac_bits).expect("validated on parse")
    }

    pub fn pe_array(&self) -> PEArraySpec {
        PEArraySpec {
            pe_count: self.pe_count,
            ..PEArraySpec::default()
        }
    }

    /// Routing mode with the configured `fact` filled in.
    pub fn routing_mode(&self) -> RoutingMode {
        match self.mode {
            RoutingMode::Reference => RoutingMode::Reference,
            RoutingMode::Optimized { .. } => RoutingMode::Optimized { fact: self.fact },
        }
    }
}

fn layer_index(name: &str) -> Option<usize> {
    LAYER_NAMES.iter().position(|&l| l == name)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| Error::Config { line: line_no, message };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(format!("expected `key = value`, got `{line}`")));
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(err(format!("expected `key = value`, got `{line}`")));
        }
        if !seen.insert(key.to_string()) {
            return Err(err(format!("`{key}` set twice")));
        }
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| err(format!("`{key}`: `{v}` is not a number")))
        };
        let int = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| err(format!("`{key}`: `{v}` is not a non-negative integer")))
        };
        let at_least_one = |v: &str| match int(v)? {
            0 => Err(err(format!("`{key}` must be at least 1"))),
            n => Ok(n),
        };

        if let Some(layer) = key.strip_prefix("sparsity.") {
            let idx = layer_index(layer).ok_or_else(|| err(format!("unknown layer `{layer}`")))?;
            let s = num(value)?;
            if !(0.0..1.0).contains(&s) {
                return Err(err(format!("`{key}` must be in [0, 1), got {s}")));
            }
            cfg.sparsity[idx] = s;
        } else if let Some(layer) = key.strip_prefix("granularity.") {
            let idx = layer_index(layer).ok_or_else(|| err(format!("unknown layer `{layer}`")))?;
            cfg.granularity[idx] = value.parse().map_err(err)?;
        } else if let Some(prim) = key.strip_prefix("cost.") {
            let c = at_least_one(value)?;
            cfg.costs.set(prim, c).map_err(|e| err(e.to_string()))?;
        } else {
            match key {
                "routing_iters" => cfg.routing_iters = at_least_one(value)? as usize,
                "frac_bits" => {
                    let f = int(value)?;
                    if !(1..=15).contains(&f) {
                        return Err(err(format!("`frac_bits` must be in 1..=15, got {f}")));
                    }
                    cfg.frac_bits = f as u32;
                }
                "pe_count" => cfg.pe_count = at_least_one(value)? as usize,
                "fact" => cfg.fact = at_least_one(value)? as usize,
                "clock_hz" => {
                    let c = num(value)?;
                    if !(c > 0.0 && c.is_finite()) {
                        return Err(err(format!("`clock_hz` must be positive, got {value}")));
                    }
                    cfg.clock_hz = c;
                }
                "mode" => cfg.mode = value.parse().map_err(err)?,
                "pruner" => cfg.pruner = value.parse().map_err(err)?,
                "arith" => cfg.arith = value.parse().map_err(err)?,
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
    }
    cfg.costs.validate().map_err(|e| Error::Config {
        line: 0,
        message: e.to_string(),
    })?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Config {
        line: 0,
        message: format!("{} is not UTF-8", path.display()),
    })?;
    parse_config_str(&text)
}
