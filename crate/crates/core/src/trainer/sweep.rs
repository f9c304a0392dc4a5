//! Cartesian parameter sweeps over a base config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{run_experiment, ExperimentConfig, MetricsRecord};
use crate::error::{Error, Result};
use crate::optim::{ForgettingSchedule, Horizon, ScheduleKind};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Values to sweep per axis; empty axes keep the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub epsilon: Vec<f64>,
    #[serde(default)]
    pub v: Vec<usize>,
    #[serde(default)]
    pub k: Vec<u64>,
    /// Forgetting horizons. 0 means vanilla training and `"inf"` active forgetting.
    #[serde(default, rename = "N")]
    pub n: Vec<Horizon>,
    #[serde(default)]
    pub weight_decay: Vec<f64>,
    #[serde(default)]
    pub seed: Vec<u64>,
}

#[derive(Clone, Copy, Debug)]
enum Setting {
    Alpha(f64),
    Epsilon(f64),
    V(usize),
    K(u64),
    N(Horizon),
    WeightDecay(f64),
    Seed(u64),
}

impl Setting {
    fn name(self) -> &'static str {
        match self {
            Setting::Alpha(_) => "alpha",
            Setting::Epsilon(_) => "epsilon",
            Setting::V(_) => "v",
            Setting::K(_) => "k",
            Setting::N(_) => "N",
            Setting::WeightDecay(_) => "weight_decay",
            Setting::Seed(_) => "seed",
        }
    }

    fn value(self) -> Value {
        match self {
            Setting::Alpha(x) | Setting::Epsilon(x) | Setting::WeightDecay(x) => x.into(),
            Setting::V(x) => x.into(),
            Setting::K(x) | Setting::Seed(x) => x.into(),
            Setting::N(h) => serde_json::to_value(h).expect("horizon serializes"),
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig) {
        match self {
            Setting::Alpha(a) => cfg.grammar.alpha = a,
            Setting::Epsilon(e) => cfg.grammar.epsilon = e,
            Setting::V(v) => {
                cfg.grammar.v = v;
                cfg.model.vocab_size = v + 2;
            }
            Setting::K(k) => cfg.schedule.k = k,
            Setting::N(n) => {
                let kind = match n {
                    Horizon::Steps(0) => ScheduleKind::Vanilla,
                    Horizon::Unbounded => ScheduleKind::Active,
                    Horizon::Steps(_) => ScheduleKind::Temporary,
                };
                cfg.schedule = ForgettingSchedule {
                    kind,
                    k: cfg.schedule.k,
                    n,
                };
            }
            Setting::WeightDecay(w) => cfg.optim.weight_decay = w,
            Setting::Seed(s) => {
                cfg.seed = s;
                cfg.grammar.seed = s;
            }
        }
    }
}

impl SweepGrid {
    fn axes(&self) -> Vec<Vec<Setting>> {
        let axes = vec![
            self.alpha
                .iter()
                .map(|&x| Setting::Alpha(x))
                .collect::<Vec<_>>(),
            self.epsilon.iter().map(|&x| Setting::Epsilon(x)).collect(),
            self.v.iter().map(|&x| Setting::V(x)).collect(),
            self.k.iter().map(|&x| Setting::K(x)).collect(),
            self.n.iter().map(|&x| Setting::N(x)).collect(),
            self.weight_decay
                .iter()
                .map(|&x| Setting::WeightDecay(x))
                .collect(),
            self.seed.iter().map(|&x| Setting::Seed(x)).collect(),
        ];
        axes.into_iter().filter(|a| !a.is_empty()).collect()
    }
}

/// One grid point: its settings, run directory, and the config or the reason
/// it is invalid.
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub params: Map<String, Value>,
    pub directory: String,
    pub config: std::result::Result<ExperimentConfig, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub cell: Map<String, Value>,
    pub directory: String,
    /// `pending`, `ok`, `config_error` or `failed`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_metrics: Option<MetricsRecord>,
}

/// Expands the grid in row-major order (later axes vary fastest). Seeds are
/// the base seed unless `seed` is swept, in which case the cell's value
/// seeds both the run and the grammar.
pub fn plan_sweep(base: &ExperimentConfig, grid: &SweepGrid) -> Result<Vec<SweepCell>> {
    let axes = grid.axes();
    if axes.is_empty() {
        return Err(Error::Config("sweep grid has no values on any axis".into()));
    }
    let mut combos: Vec<Vec<Setting>> = vec![Vec::new()];
    for axis in &axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                axis.iter().map(move |&s| {
                    let mut c = c.clone();
                    c.push(s);
                    c
                })
            })
            .collect();
    }
    Ok(combos
        .into_iter()
        .enumerate()
        .map(|(i, settings)| {
            let mut cfg = base.clone();
            let mut params = Map::new();
            for s in &settings {
                s.apply(&mut cfg);
                params.insert(s.name().to_string(), s.value());
            }
            SweepCell {
                params,
                directory: format!("cell_{i:03}"),
                config: cfg.validate().map(|_| cfg).map_err(|e| e.to_string()),
            }
        })
        .collect())
}

pub fn write_manifest(out_root: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let path = out_root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(entries)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Runs every cell in turn. A failing cell is recorded in `manifest.json`
/// and the sweep moves on; the manifest is rewritten after each cell.
pub fn run_sweep(
    base: &ExperimentConfig,
    grid: &SweepGrid,
    out_root: &Path,
) -> Result<Vec<ManifestEntry>> {
    let cells = plan_sweep(base, grid)?;
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let mut entries: Vec<ManifestEntry> = cells
        .iter()
        .map(|c| ManifestEntry {
            cell: c.params.clone(),
            directory: c.directory.clone(),
            status: "pending".into(),
            error: None,
            final_metrics: None,
        })
        .collect();
    write_manifest(out_root, &entries)?;
    for (cell, entry) in cells.iter().zip(0..) {
        let e = &mut entries[entry];
        match &cell.config {
            Err(msg) => {
                e.status = "config_error".into();
                e.error = Some(msg.clone());
            }
            Ok(cfg) => match run_experiment(cfg, &out_root.join(&cell.directory)) {
                Ok(rec) => {
                    e.status = "ok".into();
                    e.final_metrics = Some(rec);
                }
                Err(err) => {
                    e.status = "failed".into();
                    e.error = Some(err.to_string());
                }
            },
        }
        write_manifest(out_root, &entries)?;
    }
    Ok(entries)
}
