//! Flat `key = value` run configuration covering training and data generation.
//!
//! The file is TOML restricted to top-level scalars. Unknown keys are rejected.
//! `seed` is required; every other key falls back to the desk-scale default.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proxy::ProxyLossForm;
use crate::synthgen::DatasetSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Training seed (model init and batch sampling).
    pub seed: u64,
    /// Data-generation seed; defaults to `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,

    #[serde(default = "d::num_classes")]
    pub num_classes: usize,
    #[serde(default = "d::d_in")]
    pub d_in: usize,
    #[serde(default = "d::d_hidden")]
    pub d_hidden: usize,
    #[serde(default = "d::d_out")]
    pub d_out: usize,

    #[serde(default = "d::tau")]
    pub tau: f64,
    #[serde(default = "d::margin")]
    pub margin: f64,
    #[serde(default = "d::bank_capacity")]
    pub bank_capacity: usize,
    #[serde(default = "d::batch_size")]
    pub batch_size: usize,
    #[serde(default = "d::lr_main")]
    pub lr_main: f64,
    #[serde(default = "d::lr_proxy")]
    pub lr_proxy: f64,
    #[serde(default = "d::momentum")]
    pub momentum: f64,
    #[serde(default = "d::lr_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "d::lr_decay_every")]
    pub lr_decay_every: u64,
    #[serde(default = "d::lambda_max")]
    pub lambda_max: f64,
    /// Defaults to a quarter of `total_iters`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp_length: Option<u64>,
    #[serde(default = "d::total_iters")]
    pub total_iters: u64,
    #[serde(default)]
    pub proxy_loss_form: ProxyLossForm,
    #[serde(default = "d::yes")]
    pub proposal_alignment: bool,
    #[serde(default = "d::yes")]
    pub prototype_alignment: bool,
    #[serde(default)]
    pub supervised_only: bool,

    #[serde(default = "d::r_sep")]
    pub r_sep: f64,
    #[serde(default = "d::sigma_cluster")]
    pub sigma_cluster: f64,
    #[serde(default = "d::n_labeled")]
    pub n_labeled: usize,
    #[serde(default = "d::n_unlabeled")]
    pub n_unlabeled: usize,
    #[serde(default = "d::n_test")]
    pub n_test: usize,
    #[serde(default = "d::labeled_fraction")]
    pub labeled_fraction: f64,
    #[serde(default = "d::n_distractors")]
    pub n_distractors: usize,
    #[serde(default = "d::distractor_spread")]
    pub distractor_spread: f64,
}

mod d {
    use crate::synthgen::DatasetSpec;
    use crate::trainer::TrainConfig;

    fn t() -> TrainConfig {
        TrainConfig::default()
    }
    fn s() -> DatasetSpec {
        DatasetSpec::default()
    }
    pub fn num_classes() -> usize { t().num_classes }
    pub fn d_in() -> usize { t().d_in }
    pub fn d_hidden() -> usize { t().d_hidden }
    pub fn d_out() -> usize { t().d_out }
    pub fn tau() -> f64 { t().tau }
    pub fn margin() -> f64 { t().margin }
    pub fn bank_capacity() -> usize { t().bank_capacity }
    pub fn batch_size() -> usize { t().batch_size }
    pub fn lr_main() -> f64 { t().lr_main }
    pub fn lr_proxy() -> f64 { t().lr_proxy }
    pub fn momentum() -> f64 { t().momentum }
    pub fn lr_decay_factor() -> f64 { t().lr_decay_factor }
    pub fn lr_decay_every() -> u64 { t().lr_decay_every }
    pub fn lambda_max() -> f64 { t().lambda_max }
    pub fn total_iters() -> u64 { t().total_iters }
    pub fn yes() -> bool { true }
    pub fn r_sep() -> f64 { s().r_sep }
    pub fn sigma_cluster() -> f64 { s().sigma_cluster }
    pub fn n_labeled() -> usize { s().n_labeled }
    pub fn n_unlabeled() -> usize { s().n_unlabeled }
    pub fn n_test() -> usize { s().n_test }
    pub fn labeled_fraction() -> f64 { s().labeled_fraction }
    pub fn n_distractors() -> usize { s().n_distractors }
    pub fn distractor_spread() -> f64 { s().distractor_spread }
}

impl RunConfig {
    /// Desk-scale defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self::parse(&format!("seed = {seed}\n")).expect("default config parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            match msg.strip_prefix("missing field `").and_then(|r| r.strip_suffix('`')) {
                Some(key) => Error::MissingKey(key.to_string()),
                None => Error::Config(e.to_string().trim_end().to_string()),
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat scalar config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if i64::try_from(self.seed).is_err() || self.data_seed.is_some_and(|s| i64::try_from(s).is_err()) {
            return Err(Error::Config("seeds must fit in a signed 64-bit integer".into()));
        }
        self.train_config().validate()?;
        self.dataset_spec().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            num_classes: self.num_classes,
            d_in: self.d_in,
            d_hidden: self.d_hidden,
            d_out: self.d_out,
            tau: self.tau,
            margin: self.margin,
            bank_capacity: self.bank_capacity,
            batch_size: self.batch_size,
            lr_main: self.lr_main,
            lr_proxy: self.lr_proxy,
            momentum: self.momentum,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_every: self.lr_decay_every,
            lambda_max: self.lambda_max,
            ramp_length: self.ramp_length.unwrap_or((self.total_iters / 4).max(1)),
            total_iters: self.total_iters,
            proxy_loss_form: self.proxy_loss_form,
            proposal_alignment: self.proposal_alignment,
            prototype_alignment: self.prototype_alignment,
            supervised_only: self.supervised_only,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            num_classes: self.num_classes,
            d_in: self.d_in,
            r_sep: self.r_sep,
            sigma_cluster: self.sigma_cluster,
            n_labeled: self.n_labeled,
            n_unlabeled: self.n_unlabeled,
            n_test: self.n_test,
            labeled_fraction: self.labeled_fraction,
            n_distractors: self.n_distractors,
            distractor_spread: self.distractor_spread,
            seed: self.data_seed.unwrap_or(self.seed),
        }
    }
}
