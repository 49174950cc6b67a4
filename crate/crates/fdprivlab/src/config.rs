//! Experiment configuration. JSON on disk, one struct tree here.
//!
//! Unknown keys are rejected so typos fail loudly, and every field below
//! the schema version has a default, so `{"schema_version": 1}` is a
//! complete (if slow) experiment.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use fdlab::fdsim::{ClientTrainConfig, FdConfig, Framework, ModelArch, ShareKind};
use fdlab::nn::{Activation, DpConfig, Loss};

use crate::HarnessError;

/// Bump when the config layout changes incompatibly.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub federation: FederationSpec,
    #[serde(default)]
    pub attacks: AttackSpec,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_seed() -> u64 {
    42
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub source: SourceSpec,
    /// Fraction of the base dataset held out for test accuracy and
    /// non-member probes.
    pub test_fraction: f64,
    /// Fraction of the remainder that becomes the public pool.
    pub public_fraction: f64,
    /// Strip labels from the public pool to model an unlabeled corpus.
    pub public_labels: bool,
    /// Dirichlet concentration for the private partition; small values
    /// give skewed shards.
    pub partition_alpha: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            source: SourceSpec::default(),
            test_fraction: 0.2,
            public_fraction: 0.2,
            public_labels: true,
            partition_alpha: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    /// Gaussian class blobs; `class_sep` scales the distance between
    /// class means in units of the within-class standard deviation.
    Synthetic { classes: usize, dim: usize, examples: usize, class_sep: f64 },
    /// CSV with one feature per column and an optional integer label
    /// column (any distinct integers; they are densely re-indexed).
    Csv { path: PathBuf, #[serde(default)] label_column: Option<String> },
    /// IDX tensor files, features plus optional labels.
    Idx { features: PathBuf, #[serde(default)] labels: Option<PathBuf> },
}

impl Default for SourceSpec {
    fn default() -> Self {
        Self::Synthetic { classes: 10, dim: 32, examples: 20_000, class_sep: 1.5 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSpec {
    pub framework: Framework,
    pub clients: usize,
    pub rounds: usize,
    pub round_public_count: usize,
    /// Override what clients share; defaults to the framework's choice.
    pub share_kind: Option<ShareKind>,
    /// Override the distillation loss; defaults to the framework's choice.
    pub distill_loss: Option<Loss>,
    pub era_temperature: f64,
    pub trim_fraction: f64,
    pub first_round_epochs: usize,
    pub local_epochs: usize,
    pub distill_epochs: usize,
    pub pretrain_patience: usize,
    pub pretrain_max_epochs: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub batch_size: usize,
    /// Per-example gradient noise multiplier; 0 disables noising.
    pub dp_sigma: f64,
    /// Per-example gradient clip; absent means unclipped.
    pub dp_clip: Option<f64>,
}

impl Default for FederationSpec {
    fn default() -> Self {
        Self {
            framework: Framework::FedMd,
            clients: 10,
            rounds: 3,
            round_public_count: 3072,
            share_kind: None,
            distill_loss: None,
            era_temperature: 0.1,
            trim_fraction: 0.1,
            first_round_epochs: 20,
            local_epochs: 5,
            distill_epochs: 10,
            pretrain_patience: 3,
            pretrain_max_epochs: 50,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            lr: 0.05,
            batch_size: 64,
            dp_sigma: 0.0,
            dp_clip: None,
        }
    }
}

impl FederationSpec {
    pub fn fd_config(&self) -> FdConfig {
        let mut cfg = FdConfig::for_framework(self.framework, self.clients);
        cfg.rounds = self.rounds;
        cfg.round_public_count = self.round_public_count;
        if let Some(share) = self.share_kind {
            cfg.share_kind = share;
        }
        if let Some(loss) = self.distill_loss {
            cfg.distill_loss = loss;
        }
        cfg.era_temperature = self.era_temperature;
        cfg.trim_fraction = self.trim_fraction;
        cfg.first_round_epochs = self.first_round_epochs;
        cfg.local_epochs = self.local_epochs;
        cfg.distill_epochs = self.distill_epochs;
        cfg.pretrain_patience = self.pretrain_patience;
        cfg.pretrain_max_epochs = self.pretrain_max_epochs;
        cfg
    }

    pub fn arch(&self) -> ModelArch {
        ModelArch { hidden: self.hidden.clone(), activation: self.activation }
    }

    pub fn train_config(&self) -> ClientTrainConfig {
        ClientTrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            dp: Some(DpConfig { sigma: self.dp_sigma, clip: self.dp_clip.unwrap_or(f64::INFINITY) }),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSpec {
    pub ldia: LdiaSpec,
    pub coop: CoopSpec,
    pub distill: DistillSpec,
    pub evasion: EvasionSpec,
    /// Member and non-member probes planted per attacked client (so twice
    /// this many rows per client enter the public pool).
    pub probes_per_client: usize,
    /// Match non-member probe labels to the member label histogram.
    pub stratified_probes: bool,
    /// Which round's shared predictions the membership attacks read.
    pub attack_round: usize,
    /// Clients under membership attack; absent means all of them.
    pub targets: Option<Vec<usize>>,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            ldia: LdiaSpec::default(),
            coop: CoopSpec::default(),
            distill: DistillSpec::default(),
            evasion: EvasionSpec::default(),
            probes_per_client: 64,
            stratified_probes: true,
            attack_round: 0,
            targets: None,
        }
    }
}

impl AttackSpec {
    pub fn membership_enabled(&self) -> bool {
        self.coop.enabled || self.distill.enabled
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdiaSpec {
    pub enabled: bool,
}

impl Default for LdiaSpec {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoopSpec {
    pub enabled: bool,
    /// Strict KL threshold for admitting a reference client.
    pub beta: f64,
    pub symmetric: bool,
}

impl Default for CoopSpec {
    fn default() -> Self {
        Self { enabled: true, beta: 0.1, symmetric: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSpec {
    pub enabled: bool,
    pub reference_models: usize,
    pub subset_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for DistillSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            reference_models: 32,
            subset_fraction: 0.8,
            epochs: 40,
            lr: 0.05,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvasionMode {
    /// Score withheld probes through a model distilled from what the
    /// target did answer.
    Shadow,
    /// Score withheld probes through planted noisy copies the target does
    /// not recognize.
    Neighbors,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvasionSpec {
    pub enabled: bool,
    /// The client that withholds predictions on its own planted rows.
    pub client: usize,
    pub modes: Vec<EvasionMode>,
    pub neighbors_per_probe: usize,
    /// Std of the additive query noise before clipping.
    pub neighbor_noise: f64,
    pub shadow_epochs: usize,
}

impl Default for EvasionSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            client: 0,
            modes: vec![EvasionMode::Shadow, EvasionMode::Neighbors],
            neighbors_per_probe: 4,
            neighbor_noise: 0.25,
            shadow_epochs: 40,
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let spec: Self = serde_json::from_str(text)
            .map_err(|e| HarnessError::Config(format!("config parse failed: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Structural checks that need no data. Size relations that depend on
    /// the loaded dataset are enforced when the experiment is built.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return bad(format!("data.test_fraction must be in (0,1), got {}", self.data.test_fraction));
        }
        if !(self.data.public_fraction > 0.0 && self.data.public_fraction < 1.0) {
            return bad(format!(
                "data.public_fraction must be in (0,1), got {}",
                self.data.public_fraction
            ));
        }
        if !(self.data.partition_alpha > 0.0 && self.data.partition_alpha.is_finite()) {
            return bad(format!(
                "data.partition_alpha must be positive, got {}",
                self.data.partition_alpha
            ));
        }
        if let SourceSpec::Synthetic { classes, dim, examples, class_sep } = &self.data.source {
            if *classes < 2 || *dim == 0 || *examples < 10 {
                return bad("data.source needs classes >= 2, dim >= 1, examples >= 10".into());
            }
            if !(*class_sep >= 0.0 && class_sep.is_finite()) {
                return bad(format!("data.source.class_sep must be finite and >= 0, got {class_sep}"));
            }
        }
        let f = &self.federation;
        if f.clients < 2 {
            return bad(format!("federation.clients must be at least 2, got {}", f.clients));
        }
        if f.lr <= 0.0 || !f.lr.is_finite() {
            return bad(format!("federation.lr must be positive, got {}", f.lr));
        }
        if f.batch_size == 0 {
            return bad("federation.batch_size must be at least 1".into());
        }
        if f.dp_sigma < 0.0 || !f.dp_sigma.is_finite() {
            return bad(format!("federation.dp_sigma must be finite and >= 0, got {}", f.dp_sigma));
        }
        if f.dp_sigma > 0.0 && f.dp_clip.map_or(true, |c| !c.is_finite() || c <= 0.0) {
            return bad("federation.dp_sigma > 0 requires a positive finite federation.dp_clip".into());
        }
        if let Some(c) = f.dp_clip {
            if c <= 0.0 {
                return bad(format!("federation.dp_clip must be positive, got {c}"));
            }
        }
        f.fd_config().validate().map_err(|e| HarnessError::Config(format!("federation: {e}")))?;

        let a = &self.attacks;
        if a.membership_enabled() {
            if a.probes_per_client == 0 {
                return bad("membership attacks need attacks.probes_per_client >= 1".into());
            }
            if a.attack_round >= f.rounds {
                return bad(format!(
                    "attacks.attack_round {} is out of range for {} rounds",
                    a.attack_round, f.rounds
                ));
            }
            if let Some(targets) = &a.targets {
                if targets.is_empty() {
                    return bad("attacks.targets must not be empty when present".into());
                }
                if let Some(&t) = targets.iter().find(|&&t| t >= f.clients) {
                    return bad(format!("attacks.targets contains client {t}, but there are only {} clients", f.clients));
                }
                let mut seen = std::collections::HashSet::new();
                if let Some(&d) = targets.iter().find(|&&t| !seen.insert(t)) {
                    return bad(format!("attacks.targets lists client {d} twice"));
                }
            }
        }
        if a.coop.enabled && !(a.coop.beta.is_finite() && a.coop.beta >= 0.0) {
            return bad(format!("attacks.coop.beta must be finite and >= 0, got {}", a.coop.beta));
        }
        if a.distill.enabled {
            let d = &a.distill;
            if d.reference_models < 2 {
                return bad(format!("attacks.distill.reference_models must be >= 2, got {}", d.reference_models));
            }
            if !(d.subset_fraction > 0.0 && d.subset_fraction <= 1.0) {
                return bad(format!("attacks.distill.subset_fraction must be in (0,1], got {}", d.subset_fraction));
            }
            if d.epochs == 0 {
                return bad("attacks.distill.epochs must be >= 1".into());
            }
        }
        if a.evasion.enabled {
            let e = &a.evasion;
            if !a.coop.enabled {
                return bad("attacks.evasion requires attacks.coop to be enabled".into());
            }
            if e.client >= f.clients {
                return bad(format!("attacks.evasion.client {} is out of range", e.client));
            }
            if e.modes.is_empty() {
                return bad("attacks.evasion.modes must not be empty".into());
            }
            if e.modes.contains(&EvasionMode::Neighbors) && e.neighbors_per_probe == 0 {
                return bad("neighbor evasion needs attacks.evasion.neighbors_per_probe >= 1".into());
            }
            if e.modes.contains(&EvasionMode::Shadow) && e.shadow_epochs == 0 {
                return bad("shadow evasion needs attacks.evasion.shadow_epochs >= 1".into());
            }
            if !(e.neighbor_noise >= 0.0 && e.neighbor_noise.is_finite()) {
                return bad(format!("attacks.evasion.neighbor_noise must be finite and >= 0, got {}", e.neighbor_noise));
            }
        }
        Ok(())
    }

    /// Clients the membership attacks run against.
    pub fn attack_targets(&self) -> Vec<usize> {
        match &self.attacks.targets {
            Some(t) => t.clone(),
            None => (0..self.federation.clients).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let spec = ExperimentSpec::from_json(r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(spec.seed, 42);
        assert_eq!(spec.federation.clients, 10);
        assert!(spec.attacks.ldia.enabled);
        assert!(spec.attacks.coop.enabled);
        assert!(!spec.attacks.distill.enabled);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentSpec::from_json(r#"{"schema_version": 1, "sead": 3}"#).unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)));
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let err = ExperimentSpec::from_json(r#"{"schema_version": 2}"#).unwrap_err();
        let HarnessError::Config(msg) = err else { panic!() };
        assert!(msg.contains("schema_version"));
    }

    #[test]
    fn semantic_validation_catches_bad_values() {
        let cases = [
            r#"{"schema_version":1,"data":{"test_fraction":0.0}}"#,
            r#"{"schema_version":1,"data":{"partition_alpha":-1.0}}"#,
            r#"{"schema_version":1,"federation":{"clients":1}}"#,
            r#"{"schema_version":1,"federation":{"dp_sigma":1.0}}"#,
            r#"{"schema_version":1,"federation":{"rounds":0}}"#,
            r#"{"schema_version":1,"attacks":{"attack_round":7}}"#,
            r#"{"schema_version":1,"attacks":{"targets":[11]}}"#,
            r#"{"schema_version":1,"attacks":{"targets":[1,1]}}"#,
            r#"{"schema_version":1,"attacks":{"evasion":{"enabled":true},"coop":{"enabled":false}}}"#,
            r#"{"schema_version":1,"attacks":{"distill":{"enabled":true,"reference_models":1}}}"#,
        ];
        for c in cases {
            assert!(ExperimentSpec::from_json(c).is_err(), "accepted: {c}");
        }
    }

    #[test]
    fn dp_requires_clip_only_when_noisy() {
        let ok = r#"{"schema_version":1,"federation":{"dp_sigma":0.0}}"#;
        assert!(ExperimentSpec::from_json(ok).is_ok());
        let ok = r#"{"schema_version":1,"federation":{"dp_sigma":1.0,"dp_clip":5.0}}"#;
        assert!(ExperimentSpec::from_json(ok).is_ok());
    }

    #[test]
    fn framework_overrides_flow_into_fd_config() {
        let spec = ExperimentSpec::from_json(
            r#"{"schema_version":1,"federation":{"framework":"dsfl","era_temperature":0.2,"rounds":4}}"#,
        )
        .unwrap();
        let cfg = spec.federation.fd_config();
        assert_eq!(cfg.rounds, 4);
        assert_eq!(cfg.era_temperature, 0.2);
        assert_eq!(cfg.share_kind, ShareKind::Probabilities);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = ExperimentSpec::from_json(r#"{"schema_version":1}"#).unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        let again = ExperimentSpec::from_json(&text).unwrap();
        assert_eq!(serde_json::to_string(&again).unwrap(), text);
    }
}
