use std::fmt;
use std::str::FromStr;

use super::adam::{ADAM_EPS, BETA1, BETA2};
use crate::cost::{CostMethod, CostOptions};
use crate::error::{Error, Result};
use crate::head::{CeOrientation, DEFAULT_LAPLACE_SCALE, DEFAULT_MU};
use crate::io::KvFile;
use crate::nets::{AdaptorArch, AggregatorDesc, FeatureDesc, HeadConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    /// Feature extractor and aggregator trained together.
    Base,
    /// A new feature source attached to a trained aggregator; nothing trains.
    Graft,
    /// Only the feature adaptor trains.
    Adapt,
    /// Only the aggregator trains.
    Retrain,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Self::Base, Self::Graft, Self::Adapt, Self::Retrain];

    /// Stages run in declaration order, each at most once; a graft may also
    /// start fresh from an aggregator trained elsewhere.
    pub fn check_after(self, completed: Option<Stage>) -> Result<()> {
        let ok = match self {
            Self::Base | Self::Graft => completed.is_none_or(|c| c < self),
            Self::Adapt | Self::Retrain => completed.is_some_and(|c| c >= Self::Graft && c < self),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::StageOrder {
                completed: completed.map_or_else(|| "nothing".to_string(), |c| c.to_string()),
                requested: self.to_string(),
            })
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Base => "base",
            Self::Graft => "graft",
            Self::Adapt => "adapt",
            Self::Retrain => "retrain",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub method: CostMethod,
    pub d_max: usize,
    pub temperature: f64,
    pub laplace_scale: f64,
    pub mu: f64,
    pub lambdas: Vec<f64>,
    pub orientation: CeOrientation,
    pub squared_l2: bool,

    pub feature_width: usize,
    pub feature_channels: usize,
    pub aggregator_width: usize,
    pub aggregator_depth: usize,
    pub adaptor: Option<AdaptorArch>,
    pub adaptor_base: usize,

    pub epochs_base: usize,
    pub epochs_adapt: usize,
    pub epochs_retrain: usize,
    pub lr: f64,
    /// Retrain switches to this rate for its second half.
    pub lr_retrain_late: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    /// Continue from the trained aggregator in Retrain instead of a fresh one.
    pub retrain_resume: bool,
    /// Experimental: train adaptor and aggregator together in Adapt and Retrain.
    pub joint: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            method: CostMethod::Cosine,
            d_max: 6,
            temperature: 1.0,
            laplace_scale: DEFAULT_LAPLACE_SCALE,
            mu: DEFAULT_MU,
            lambdas: vec![1.0],
            orientation: CeOrientation::Standard,
            squared_l2: false,
            feature_width: 8,
            feature_channels: 16,
            aggregator_width: 8,
            aggregator_depth: 4,
            adaptor: Some(AdaptorArch::UShape),
            adaptor_base: 16,
            epochs_base: 8,
            epochs_adapt: 1,
            epochs_retrain: 10,
            lr: 1e-3,
            lr_retrain_late: 1e-4,
            beta1: BETA1,
            beta2: BETA2,
            adam_eps: ADAM_EPS,
            retrain_resume: false,
            joint: false,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "method",
    "d_max",
    "temperature",
    "laplace_scale",
    "mu",
    "lambdas",
    "orientation",
    "squared_l2",
    "feature_width",
    "feature_channels",
    "aggregator_width",
    "aggregator_depth",
    "adaptor",
    "adaptor_base",
    "epochs_base",
    "epochs_adapt",
    "epochs_retrain",
    "lr",
    "lr_retrain_late",
    "beta1",
    "beta2",
    "adam_eps",
    "retrain_resume",
    "joint",
    "seed",
];

impl PipelineConfig {
    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            method: self.method,
            d_max: self.d_max,
            temperature: self.temperature,
            laplace_scale: self.laplace_scale,
            mu: self.mu,
            lambdas: self.lambdas.clone(),
            orientation: self.orientation,
            cost: CostOptions {
                squared_l2: self.squared_l2,
                ..CostOptions::default()
            },
        }
    }

    pub fn feature_desc(&self) -> FeatureDesc {
        FeatureDesc {
            in_channels: 1,
            width: self.feature_width,
            out_channels: self.feature_channels,
        }
    }

    pub fn aggregator_desc(&self, feature_channels: usize) -> AggregatorDesc {
        AggregatorDesc {
            in_channels: self.method.volume_channels(feature_channels),
            width: self.aggregator_width,
            depth: self.aggregator_depth,
            heads: self.lambdas.len(),
        }
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Base => self.epochs_base,
            Stage::Graft => 0,
            Stage::Adapt => self.epochs_adapt,
            Stage::Retrain => self.epochs_retrain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_max == 0 {
            return bad("d_max must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::NonPositiveTemperature(self.temperature));
        }
        if !(self.laplace_scale > 0.0 && self.laplace_scale.is_finite()) {
            return Err(Error::NonPositiveScale(self.laplace_scale));
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !l.is_finite()) {
            return bad("lambdas must be a non-empty list of finite weights".into());
        }
        if self.aggregator_depth < 2 || self.lambdas.len() >= self.aggregator_depth {
            return bad(format!(
                "{} outputs need an aggregator deeper than {}",
                self.lambdas.len(),
                self.aggregator_depth
            ));
        }
        for (k, v) in [
            ("lr", self.lr),
            ("lr_retrain_late", self.lr_retrain_late),
            ("mu", self.mu),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if [self.feature_width, self.feature_channels, self.aggregator_width, self.adaptor_base]
            .contains(&0)
        {
            return bad("network widths must be positive".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("method", self.method);
        kv.set("d_max", self.d_max);
        kv.set("temperature", self.temperature);
        kv.set("laplace_scale", self.laplace_scale);
        kv.set("mu", self.mu);
        let lambdas: Vec<String> = self.lambdas.iter().map(f64::to_string).collect();
        kv.set("lambdas", lambdas.join(","));
        kv.set("orientation", self.orientation);
        kv.set("squared_l2", self.squared_l2);
        kv.set("feature_width", self.feature_width);
        kv.set("feature_channels", self.feature_channels);
        kv.set("aggregator_width", self.aggregator_width);
        kv.set("aggregator_depth", self.aggregator_depth);
        kv.set(
            "adaptor",
            self.adaptor.map_or_else(|| "none".to_string(), |a| a.to_string()),
        );
        kv.set("adaptor_base", self.adaptor_base);
        kv.set("epochs_base", self.epochs_base);
        kv.set("epochs_adapt", self.epochs_adapt);
        kv.set("epochs_retrain", self.epochs_retrain);
        kv.set("lr", self.lr);
        kv.set("lr_retrain_late", self.lr_retrain_late);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("adam_eps", self.adam_eps);
        kv.set("retrain_resume", self.retrain_resume);
        kv.set("joint", self.joint);
        kv.set("seed", self.seed);
        kv
    }

    /// Defaults overridden by whatever keys `kv` sets; unknown keys are errors.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        if let Some((k, _)) = kv.iter().find(|(k, _)| !KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        let d = Self::default();
        let adaptor = match kv.get("adaptor") {
            None => d.adaptor,
            Some("none") => None,
            Some(s) => Some(s.parse()?),
        };
        let cfg = Self {
            method: kv.parse_or("method", d.method)?,
            d_max: kv.parse_or("d_max", d.d_max)?,
            temperature: kv.parse_or("temperature", d.temperature)?,
            laplace_scale: kv.parse_or("laplace_scale", d.laplace_scale)?,
            mu: kv.parse_or("mu", d.mu)?,
            lambdas: kv.parse_list("lambdas")?.unwrap_or(d.lambdas),
            orientation: kv.parse_or("orientation", d.orientation)?,
            squared_l2: kv.parse_or("squared_l2", d.squared_l2)?,
            feature_width: kv.parse_or("feature_width", d.feature_width)?,
            feature_channels: kv.parse_or("feature_channels", d.feature_channels)?,
            aggregator_width: kv.parse_or("aggregator_width", d.aggregator_width)?,
            aggregator_depth: kv.parse_or("aggregator_depth", d.aggregator_depth)?,
            adaptor,
            adaptor_base: kv.parse_or("adaptor_base", d.adaptor_base)?,
            epochs_base: kv.parse_or("epochs_base", d.epochs_base)?,
            epochs_adapt: kv.parse_or("epochs_adapt", d.epochs_adapt)?,
            epochs_retrain: kv.parse_or("epochs_retrain", d.epochs_retrain)?,
            lr: kv.parse_or("lr", d.lr)?,
            lr_retrain_late: kv.parse_or("lr_retrain_late", d.lr_retrain_late)?,
            beta1: kv.parse_or("beta1", d.beta1)?,
            beta2: kv.parse_or("beta2", d.beta2)?,
            adam_eps: kv.parse_or("adam_eps", d.adam_eps)?,
            retrain_resume: kv.parse_or("retrain_resume", d.retrain_resume)?,
            joint: kv.parse_or("joint", d.joint)?,
            seed: kv.parse_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
