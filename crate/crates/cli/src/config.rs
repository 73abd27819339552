use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sigma_pca::constraints::{ConstraintSpec, Orthogonality, UnitNorm};
use sigma_pca::optim::OptimizerConfig;
use sigma_pca::train::{CheckpointPolicy, TrainConfig};

macro_rules! choice {
    ($(#[$m:meta])* $name:ident { $($variant:ident),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
        #[serde(rename_all = "kebab-case")]
        pub enum $name { $($variant),+ }
    };
}

choice!(OptimizerKind { Sgd, Adam });
choice!(Checkpoint { BestLoss, Last });
choice!(UnitNormKind { Project, None, WeightNorm });
choice!(OrthKind { None, Iterative, GramSchmidt });
choice!(
    /// Signal setups: `orthogonal` is the equal-variance square/sawtooth pair
    /// plus a distinct sine; `orthogonal-distinct` gives every source its own variance.
    Mixing { Orthogonal, OrthogonalDistinct, NonOrthogonal }
);
choice!(SignalMethodKind { Linear, Nlpca, Fastica, TwoStageNlpca, TwoLayer });
choice!(PointsMethod { Nlpca, Linear, Fastica });
choice!(Dist { Uniform, Laplace, Gaussian });
choice!(PcaVariant {
    Svd,
    Tied,
    Subspace,
    WeightedV1,
    WeightedV2,
    WeightedV3,
    Asymmetric,
    Gha,
    GhaWithEncoder,
    GhaPlusSubspace,
    GhaReconCombo,
    Nested,
    WeightedVariance,
});
choice!(Decoder {
    Stopgrad,
    Full,
    EncoderScaled,
    RescaledSpectral,
    RescaledFrobenius,
    RescaledNuclear,
    SigmaDropped,
    SigmaDroppedNoDerivative,
});
choice!(OrderingKind { None, Deflation, Triangular, Weighted, Nested });
choice!(ObjectiveKind { SigmaPca, Conventional });
choice!(SigmaModeKind { Batch, Ema, Trainable });
choice!(MuModeKind { Precentred, Batch, Ema });
choice!(IcaMethod { Fastica, TwoStage, TwoLayer, Easi });
choice!(ContrastKind { Logcosh, Cube });
choice!(PatchMethodKind { SigmaPca, LinearTied, Svd });

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<OptimizerKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Full-batch epochs appended after the main phase (pca and patches).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refine_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<Checkpoint>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unit_norm: Option<UnitNormKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub orthogonality: Option<OrthKind>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub signals: Option<SignalMethodKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<PointsMethod>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ica: Option<IcaMethod>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patches: Option<PatchMethodKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<PcaVariant>,
    /// Number of components; absent means one per input feature.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// tanh scale of h(z) = a·tanh(z/a).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    /// tanh scale of the rotation: the second layer of two-layer ICA, or the
    /// conventional nonlinear PCA stage of two-stage ICA.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder: Option<Decoder>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ordering: Option<OrderingKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triangular_variant: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective: Option<ObjectiveKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_mode: Option<SigmaModeKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_mode: Option<MuModeKind>,
    /// EMA smoothing factor for the ema σ and μ modes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ema_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub orth_strength: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrast: Option<ContrastKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instances: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Numeric CSV, one sample per row.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Folder of 8-bit grayscale or RGB images, read in sorted filename order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mixing: Option<Mixing>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Signal noise std as a fraction of each source's std.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dist: Option<Dist>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equal_var: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_pad: Option<bool>,
    /// Pixels between tiles of the filter grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap: Option<usize>,
}

/// Run configuration. Every field is optional so that defaults, a file and
/// command-line flags can be layered; the effective layer is fully populated
/// for the keys the command reads.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Independent seeds (seed, seed+1, …) run on worker threads.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runs: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub constraints: ConstraintsSection,
    #[serde(default)]
    pub method: MethodSection,
    #[serde(default)]
    pub data: DataSection,
}

fn merge_values(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_values(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl Config {
    /// `over` wins wherever it sets a value.
    pub fn layered(&self, over: &Config) -> Config {
        let mut base = serde_json::to_value(self).expect("config serialises");
        merge_values(&mut base, serde_json::to_value(over).expect("config serialises"));
        serde_json::from_value(base).expect("merged config keeps the schema")
    }

    pub fn parse_toml(text: &str) -> Result<Config> {
        toml::from_str(text).map_err(|e| anyhow!("{}", with_suggestion(&e.to_string())))
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse_toml(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Validated training settings from the optimizer, train and constraints sections.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let o = &self.optimizer;
        let lr = o.lr.ok_or_else(|| anyhow!("optimizer.lr is not set"))?;
        let optimizer = match o.kind.unwrap_or(OptimizerKind::Sgd) {
            OptimizerKind::Sgd => OptimizerConfig::Sgd { lr, momentum: o.momentum.unwrap_or(0.0) },
            OptimizerKind::Adam => OptimizerConfig::Adam {
                lr,
                beta1: o.beta1.unwrap_or(0.9),
                beta2: o.beta2.unwrap_or(0.999),
                eps: o.eps.unwrap_or(1e-8),
            },
        };
        let unit_norm = match self.constraints.unit_norm.unwrap_or(UnitNormKind::Project) {
            UnitNormKind::Project => UnitNorm::Project,
            UnitNormKind::None => UnitNorm::None,
            UnitNormKind::WeightNorm => UnitNorm::WeightNorm,
        };
        let orthogonality = match self.constraints.orthogonality.unwrap_or(OrthKind::None) {
            OrthKind::None => Orthogonality::None,
            OrthKind::Iterative => Orthogonality::iterative_default(),
            OrthKind::GramSchmidt => Orthogonality::GramSchmidt,
        };
        let cfg = TrainConfig {
            optimizer,
            batch_size: self.train.batch_size.unwrap_or(100),
            epochs: self.train.epochs.unwrap_or(0),
            seed: self.seed(),
            constraints: ConstraintSpec { unit_norm, orthogonality },
            checkpoint: match self.train.checkpoint.unwrap_or(Checkpoint::BestLoss) {
                Checkpoint::BestLoss => CheckpointPolicy::BestLoss,
                Checkpoint::Last => CheckpointPolicy::Last,
            },
        };
        cfg.validate().map_err(|e| anyhow!("invalid configuration: {e}"))?;
        Ok(cfg)
    }

    /// Rejects values that the typed schema cannot rule out.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: Option<f64>| -> Result<()> {
            match v {
                Some(x) if !(x > 0.0) => bail!("invalid configuration: {name} must be positive, got {x}"),
                _ => Ok(()),
            }
        };
        positive("method.a", self.method.a)?;
        positive("method.v_a", self.method.v_a)?;
        positive("method.eta", self.method.eta)?;
        positive("method.h", self.method.h)?;
        positive("method.tol", self.method.tol)?;
        if let Some(r) = self.method.rho {
            if !(r > 0.0 && r < 1.0) {
                bail!("invalid configuration: method.rho must lie in (0, 1), got {r}");
            }
        }
        if let Some(l2) = self.method.l2 {
            if !(l2 >= 0.0) {
                bail!("invalid configuration: method.l2 must be non-negative, got {l2}");
            }
        }
        if self.method.k == Some(0) {
            bail!("invalid configuration: method.k must be positive");
        }
        if self.runs == Some(0) {
            bail!("invalid configuration: runs must be positive");
        }
        if let Some(v) = self.method.triangular_variant {
            if !(1..=6).contains(&v) {
                bail!("invalid configuration: method.triangular_variant must be 1 to 6, got {v}");
            }
        }
        Ok(())
    }
}

/// Appends "did you mean" to serde's unknown-field message when a listed
/// field is close to the unknown one.
fn with_suggestion(msg: &str) -> String {
    let Some(start) = msg.find("unknown field `") else {
        return msg.to_string();
    };
    let rest = &msg[start + "unknown field `".len()..];
    let Some(end) = rest.find('`') else {
        return msg.to_string();
    };
    let unknown = &rest[..end];
    let expected: Vec<&str> = rest[end..].split('`').skip(2).step_by(2).collect();
    let best = expected
        .iter()
        .map(|c| (strsim::jaro_winkler(unknown, c), *c))
        .filter(|(score, _)| *score >= 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0));
    match best {
        Some((_, name)) => format!("{}\nhelp: did you mean `{name}`?", msg.trim_end()),
        None => msg.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(Config::parse_toml("").unwrap(), Config::default());
    }

    #[test]
    fn unknown_key_gets_suggestion() {
        let err = Config::parse_toml("[optimizer]\nlrr = 0.1\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("did you mean `lr`"), "{err}");
    }

    #[test]
    fn parse_error_has_line() {
        let err = Config::parse_toml("seed = 1\n[train\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn negative_lr_fails_validation() {
        let c = Config::parse_toml("optimizer.lr = -1").unwrap();
        assert!(c.train_config().unwrap_err().to_string().contains("learning rate"));
    }

    #[test]
    fn later_layers_win() {
        let file = Config::parse_toml("seed = 3\n[optimizer]\nlr = 0.001\nmomentum = 0.5\n").unwrap();
        let mut flags = Config::default();
        flags.optimizer.lr = Some(0.01);
        let eff = file.layered(&flags);
        assert_eq!(eff.optimizer.lr, Some(0.01));
        assert_eq!(eff.optimizer.momentum, Some(0.5));
        assert_eq!(eff.seed, Some(3));
    }

    #[test]
    fn toml_round_trip() {
        let mut c = Config::parse_toml("seed = 3\n[data]\nmixing = \"non-orthogonal\"\ntheta = 0.7853981633974483\n").unwrap();
        c.method.decoder = Some(Decoder::RescaledFrobenius);
        assert_eq!(Config::parse_toml(&c.to_toml()).unwrap(), c);
    }
}
