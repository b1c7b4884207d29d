//! key=value experiment config files.
//!
//! One entry per line; `#` starts a comment. Keys mirror the experiment
//! config fields (snake_case). Flags given on the command line override file
//! entries.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use labelshift::experiment::RunConfig;
use labelshift::model::ModelKind;

use crate::CliError;

pub fn parse_seeds(spec: &str) -> Result<Vec<u64>, String> {
    let seeds: Result<Vec<u64>, _> = spec.split(',').map(|s| s.trim().parse::<u64>()).collect();
    match seeds {
        Ok(seeds) if !seeds.is_empty() => Ok(seeds),
        _ => Err(format!("cannot parse seed list `{spec}`")),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse::<T>()
        .map_err(|_| CliError::Usage(format!("config key `{key}`: cannot parse `{value}`")))
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut cfg = RunConfig::default();
    for (ix, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!(
                "{}:{}: expected key=value, got `{line}`",
                path.display(),
                ix + 1
            ))
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "suite_dir" => cfg.suite_dir = Some(PathBuf::from(value)),
            "num_labels" => cfg.num_labels = parse(key, value)?,
            "none_share" => cfg.none_share = parse(key, value)?,
            "vocab_size" => cfg.vocab_size = parse(key, value)?,
            "feats_per_instance" => cfg.feats_per_instance = parse(key, value)?,
            "block_mass" => cfg.block_mass = parse(key, value)?,
            "suite_seed" => cfg.suite_seed = parse(key, value)?,
            "n_train" => cfg.n_train = parse(key, value)?,
            "n_test" => cfg.n_test = parse(key, value)?,
            "model_kind" => {
                cfg.model_kind = ModelKind::from_str(value)
                    .map_err(|e| CliError::Usage(format!("config key `model_kind`: {e}")))?
            }
            "embedding_dim" => cfg.embedding_dim = parse(key, value)?,
            "lr0" => cfg.lr0 = parse(key, value)?,
            "decay_factor" => cfg.decay_factor = parse(key, value)?,
            "patience" => cfg.patience = parse(key, value)?,
            "max_epochs" => cfg.max_epochs = parse(key, value)?,
            "batch_size" => cfg.batch_size = parse(key, value)?,
            "input_dropout" => cfg.input_dropout = parse(key, value)?,
            "pool_dropout" => cfg.pool_dropout = parse(key, value)?,
            "l2" => cfg.l2 = parse(key, value)?,
            "noisy_dev_fraction" => cfg.noisy_dev_fraction = parse(key, value)?,
            "clean_dev_fraction" => cfg.clean_dev_fraction = parse(key, value)?,
            "alpha" => cfg.alpha = parse(key, value)?,
            "grid_steps" => cfg.grid_steps = parse(key, value)?,
            "seeds" => {
                cfg.seeds = parse_seeds(value).map_err(CliError::Usage)?;
            }
            other => {
                return Err(CliError::Usage(format!(
                    "{}:{}: unknown config key `{other}`",
                    path.display(),
                    ix + 1
                )))
            }
        }
    }
    Ok(cfg)
}
