// SPDX-License-Identifier: Apache-2.0

//! `simulate` and `gen-trace`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use teeinfer_sim::scenario::write_results;
use teeinfer_sim::{run_experiment, ExperimentConfig, VariantResult};

/// Reads and validates an experiment config. Unknown keys are errors.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: ExperimentConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    cfg.validate().with_context(|| format!("validating {}", path.display()))?;
    Ok(cfg)
}

/// Directory that relative paths inside a config resolve against.
pub fn config_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Runs every variant of the config and, with `out`, writes
/// `<out>/<variant>/{metrics.csv,summary.json}`.
pub fn simulate(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Vec<VariantResult>> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let results = run_experiment(&cfg, &config_base(config))?;
    if let Some(dir) = out {
        write_results(&results, dir)?;
    }
    Ok(results)
}

/// Writes the workload a config would generate as a replayable CSV trace.
pub fn gen_trace(config: &Path, seed: Option<u64>, out: &Path) -> Result<usize> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let trace = cfg.build_trace(&config_base(config))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    trace.write_csv(file)?;
    Ok(trace.len())
}
