//! Run configuration: a merged, fully-serializable view of the dataset,
//! model and training parameters. Config files are flat TOML with dotted
//! keys; command-line flags override file values, and every command echoes
//! the effective configuration into its output directory.

use std::path::Path;

use crate::dataset::{DatasetConfig, DatasetKind, Regime};
use crate::error::RteError;
use crate::model::{ModelConfig, Variant};
use crate::training::{Collocation, TrainConfig};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads (0 = logical cores).
    pub threads: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            dataset: DatasetConfig::default(),
            model: ModelConfig::full(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a flat dotted-key TOML file over the defaults.
    pub fn from_file(path: &Path) -> Result<Self, RteError> {
        let mut cfg = Self::default();
        cfg.apply_toml(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn apply_toml(&mut self, text: &str) -> Result<(), RteError> {
        let value: toml::Value =
            text.parse().map_err(|e| RteError::Config(format!("bad TOML: {e}")))?;
        let table = value
            .as_table()
            .ok_or_else(|| RteError::Config("config root must be a table".into()))?;
        let mut flat = Vec::new();
        flatten("", table, &mut flat);
        for (key, v) in flat {
            self.set(&key, &v)?;
        }
        Ok(())
    }

    /// Sets one dotted key from a TOML value.
    pub fn set(&mut self, key: &str, v: &toml::Value) -> Result<(), RteError> {
        let as_u = || -> Result<usize, RteError> {
            v.as_integer()
                .map(|x| x as usize)
                .ok_or_else(|| RteError::Config(format!("{key} expects an integer")))
        };
        let as_f = || -> Result<f64, RteError> {
            v.as_float()
                .or_else(|| v.as_integer().map(|x| x as f64))
                .ok_or_else(|| RteError::Config(format!("{key} expects a number")))
        };
        let as_s = || -> Result<&str, RteError> {
            v.as_str().ok_or_else(|| RteError::Config(format!("{key} expects a string")))
        };
        match key {
            "seed" => self.seed = as_u()? as u64,
            "threads" => self.threads = as_u()?,

            "dataset.mesh" => {
                self.dataset.nx = as_u()?;
                self.dataset.ny = self.dataset.nx;
            }
            "dataset.num_train" => self.dataset.num_train = as_u()?,
            "dataset.num_val" => self.dataset.num_val = as_u()?,
            "dataset.regime" => self.dataset.regime = Regime::parse(as_s()?)?,
            "dataset.solver_tol" => self.dataset.solver_tol = as_f()?,
            "dataset.solver_max_iter" => self.dataset.solver_max_iter = as_u()?,
            "dataset.sigma_r_min" => self.dataset.sigma_r_range.0 = as_f()?,
            "dataset.sigma_r_max" => self.dataset.sigma_r_range.1 = as_f()?,
            "dataset.sigma_v_min" => self.dataset.sigma_v_range.0 = as_f()?,
            "dataset.sigma_v_max" => self.dataset.sigma_v_range.1 = as_f()?,

            "model.num_layer" => self.model.n_mlp = as_u()?,
            "model.hidden_dim" => self.model.d_mlp = as_u()?,
            "model.latent_dim" => self.model.d_model = as_u()?,
            "model.num_head" => self.model.n_heads = as_u()?,
            "model.key_dim" => self.model.d_k = as_u()?,
            "model.value_dim" => self.model.d_v = as_u()?,
            "model.tau_dim" => self.model.d_tau = as_u()?,
            "model.num_block" => self.model.n_blocks = as_u()?,
            "model.variant" => {
                self.model.variant = Variant::parse(as_s()?)?;
                self.apply_variant_defaults();
            }

            "train.learning_rate" => self.train.lr0 = as_f()?,
            "train.batch_size" => self.train.batch = as_u()?,
            "train.epochs" => self.train.epochs = as_u()?,
            "train.num_collocation" => self.train.n_col = as_u()?,
            "train.checkpoint_every" => self.train.checkpoint_every = as_u()?,
            "train.collocation" => {
                self.train.collocation = match as_s()? {
                    "grouped" => Collocation::Grouped,
                    "uniform" => Collocation::Uniform,
                    other => {
                        return Err(RteError::Config(format!("unknown collocation '{other}'")))
                    }
                }
            }

            other => return Err(RteError::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Aligns variant-coupled fields (block count, MLP width, dataset kind)
    /// with the chosen variant.
    pub fn apply_variant_defaults(&mut self) {
        match self.model.variant {
            Variant::AttenuationOnly => {
                self.model.n_blocks = 0;
                self.dataset.kind = DatasetKind::AblationJ;
            }
            Variant::Lifting => {
                self.model.n_blocks = 0;
                self.model.d_mlp = 256;
                self.dataset.kind = DatasetKind::AblationL;
            }
            Variant::NoScatter => {
                // Scattering-disabled control trains on the wide-regime data.
                self.dataset.regime = Regime::Range(0.0, 0.9);
            }
            Variant::Full => {}
        }
    }

    /// The micro sanity preset: tiny model, tiny dataset, a short schedule.
    pub fn apply_micro_preset(&mut self) {
        self.dataset.nx = 8;
        self.dataset.ny = 8;
        self.dataset.num_train = 5;
        self.dataset.num_val = 2;
        self.model = ModelConfig::micro();
        self.train.epochs = 50;
        self.train.batch = 2;
        self.train.n_col = 32;
        self.train.checkpoint_every = 25;
    }

    /// Serializes the effective configuration as flat dotted-key TOML.
    pub fn echo_toml(&self) -> String {
        let d = &self.dataset;
        let m = &self.model;
        let t = &self.train;
        format!(
            "seed = {}\nthreads = {}\n\
             dataset.mesh = {}\ndataset.num_train = {}\ndataset.num_val = {}\n\
             dataset.regime = {:?}\ndataset.solver_tol = {:e}\ndataset.solver_max_iter = {}\n\
             dataset.sigma_r_min = {}\ndataset.sigma_r_max = {}\n\
             dataset.sigma_v_min = {}\ndataset.sigma_v_max = {}\n\
             model.num_layer = {}\nmodel.hidden_dim = {}\nmodel.latent_dim = {}\n\
             model.num_head = {}\nmodel.key_dim = {}\nmodel.value_dim = {}\n\
             model.tau_dim = {}\nmodel.num_block = {}\nmodel.variant = {:?}\n\
             train.learning_rate = {:e}\ntrain.batch_size = {}\ntrain.epochs = {}\n\
             train.num_collocation = {}\ntrain.checkpoint_every = {}\ntrain.collocation = {:?}\n",
            self.seed,
            self.threads,
            d.nx,
            d.num_train,
            d.num_val,
            d.regime.name(),
            d.solver_tol,
            d.solver_max_iter,
            d.sigma_r_range.0,
            d.sigma_r_range.1,
            d.sigma_v_range.0,
            d.sigma_v_range.1,
            m.n_mlp,
            m.d_mlp,
            m.d_model,
            m.n_heads,
            m.d_k,
            m.d_v,
            m.d_tau,
            m.n_blocks,
            m.variant.as_str(),
            t.lr0,
            t.batch,
            t.epochs,
            t.n_col,
            t.checkpoint_every,
            match t.collocation {
                Collocation::Grouped => "grouped",
                Collocation::Uniform => "uniform",
            },
        )
    }
}

fn flatten(prefix: &str, table: &toml::value::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.dataset.nx, 40);
        assert_eq!(cfg.train.lr0, 1e-3);
        assert_eq!(cfg.train.batch, 8);
        assert_eq!(cfg.train.epochs, 5000);
        assert_eq!(cfg.train.n_col, 128);
        cfg.apply_toml(
            "seed = 7\ndataset.mesh = 20\nmodel.num_head = 1\ntrain.learning_rate = 2e-3\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!((cfg.dataset.nx, cfg.dataset.ny), (20, 20));
        assert_eq!(cfg.model.n_heads, 1);
        assert_eq!(cfg.train.lr0, 2e-3);
        assert!(cfg.apply_toml("bogus.key = 1\n").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_toml("dataset.mesh = 20\ntrain.epochs = 500\n").unwrap();
        let echoed = cfg.echo_toml();
        let mut back = RunConfig::default();
        back.apply_toml(&echoed).unwrap();
        assert_eq!(back.dataset.nx, 20);
        assert_eq!(back.train.epochs, 500);
        assert_eq!(back.echo_toml(), echoed);
    }

    #[test]
    fn variant_defaults() {
        let mut cfg = RunConfig::default();
        cfg.apply_toml("model.variant = \"lifting\"\n").unwrap();
        assert_eq!(cfg.model.d_mlp, 256);
        assert_eq!(cfg.model.n_blocks, 0);
        assert_eq!(cfg.dataset.kind, DatasetKind::AblationL);
    }
}
