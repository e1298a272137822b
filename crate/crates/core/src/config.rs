//! Experiment configuration: a flat `key=value` file with dotted keys.
//!
//! Files are line-oriented: blank lines and `#` comments are skipped,
//! everything else must be `key=value`. Unknown keys and duplicate keys are
//! errors. CLI flags override file values by writing into the same key
//! space before the config is built. `serialize` emits every key in a
//! canonical order, and `parse(serialize(c)) == c` for any config.

use crate::capsule::{CapsMethod, HeadKind};
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::{HeadSpec, ModelSpec, StemKind};
use crate::optim::{
    preset, Algorithm, LrSchedule, OptimizerConfig, Preset, ADAM_BETA1, ADAM_BETA2, RMSPROP_RHO,
};
use crate::trainer::TimingMode;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub optimizer: OptSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub augment: AugmentConfig,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSection {
    pub stem: StemKind,
    pub head: HeadKind,
    pub method: CapsMethod,
    pub capsule_dim: usize,
    pub capsule_dim_out: usize,
    pub classes: usize,
}

/// Optimizer selection: a preset, explicit fields, or a preset plus
/// overrides. `resolve` folds them into an [`OptimizerConfig`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptSection {
    pub preset: Option<Preset>,
    pub algorithm: Option<Algorithm>,
    pub epsilon: Option<f64>,
    pub eta0: Option<f64>,
    pub rho: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub decay_rate: Option<f64>,
    pub decay_interval: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub label_smoothing: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSection {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Synth {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        size: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub timing: TimingMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelSection {
                stem: StemKind::Tiny,
                head: HeadKind::Hvc,
                method: CapsMethod::B,
                capsule_dim: 8,
                capsule_dim_out: 16,
                classes: 10,
            },
            optimizer: OptSection {
                preset: Some(Preset::O3),
                ..OptSection::default()
            },
            train: TrainSection {
                epochs: 5,
                batch_size: 32,
                seed: 0,
                label_smoothing: 0.0,
            },
            data: DataSection::Synth {
                classes: 10,
                per_class: 100,
                test_per_class: 20,
                size: 28,
            },
            augment: AugmentConfig::default(),
            output: OutputSection {
                dir: PathBuf::from("out"),
                timing: TimingMode::Wall,
            },
        }
    }
}

impl ExperimentConfig {
    /// Parse a config file body into key/value pairs. Duplicate keys are
    /// rejected so files stay diff-friendly.
    pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "line {}: expected key=value, got '{raw}'",
                    lineno + 1
                )));
            };
            let key = k.trim().to_string();
            let value = v.trim().to_string();
            if map.insert(key.clone(), value).is_some() {
                return Err(Error::config(format!("duplicate key '{key}'")));
            }
        }
        Ok(map)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&Self::parse_pairs(text)?)
    }

    /// Build a config from pairs, starting at the defaults. Unknown keys
    /// are configuration errors.
    pub fn from_pairs(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        // The data source key decides which sibling keys are legal.
        if let Some(source) = map.get("data.source") {
            c.data = match source.as_str() {
                "idx" => DataSection::Idx {
                    train_images: PathBuf::new(),
                    train_labels: PathBuf::new(),
                    test_images: PathBuf::new(),
                    test_labels: PathBuf::new(),
                },
                "synth" => DataSection::Synth {
                    classes: 10,
                    per_class: 100,
                    test_per_class: 20,
                    size: 28,
                },
                other => return Err(Error::config(format!("unknown data.source '{other}'"))),
            };
        }
        if map.keys().any(|k| k.starts_with("optimizer.")) && !map.contains_key("optimizer.preset")
        {
            // Explicit fields without a preset start from an empty section.
            c.optimizer = OptSection::default();
        }
        for (key, value) in map {
            c.set(key, value)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::config(format!("invalid {what} '{value}' for key '{key}'"));
        match key {
            "model.stem" => {
                self.model.stem = match value {
                    "tiny" => StemKind::Tiny,
                    "full" => StemKind::Full,
                    _ => return Err(bad("stem")),
                }
            }
            "model.head" => {
                self.model.head = match value {
                    "fc" => HeadKind::Fc,
                    "hvc" => HeadKind::Hvc,
                    "matrix-full" => HeadKind::MatrixFull,
                    "matrix-square" => HeadKind::MatrixSquare,
                    _ => return Err(bad("head kind")),
                }
            }
            "model.method" => {
                self.model.method = match value {
                    "a" => CapsMethod::A,
                    "b" => CapsMethod::B,
                    "c" => CapsMethod::C,
                    _ => return Err(bad("capsule method")),
                }
            }
            "model.capsule-dim" => self.model.capsule_dim = parse_num(value).ok_or_else(|| bad("integer"))?,
            "model.capsule-dim-out" => {
                self.model.capsule_dim_out = parse_num(value).ok_or_else(|| bad("integer"))?
            }
            "model.classes" => self.model.classes = parse_num(value).ok_or_else(|| bad("integer"))?,

            "optimizer.preset" => self.optimizer.preset = Some(Preset::parse(value)?),
            "optimizer.algorithm" => {
                self.optimizer.algorithm = Some(match value {
                    "rmsprop" => Algorithm::RmsProp,
                    "adam" => Algorithm::Adam,
                    _ => return Err(bad("algorithm")),
                })
            }
            "optimizer.epsilon" => self.optimizer.epsilon = Some(parse_f64(value).ok_or_else(|| bad("number"))?),
            "optimizer.eta0" => self.optimizer.eta0 = Some(parse_f64(value).ok_or_else(|| bad("number"))?),
            "optimizer.rho" => self.optimizer.rho = Some(parse_f64(value).ok_or_else(|| bad("number"))?),
            "optimizer.beta1" => self.optimizer.beta1 = Some(parse_f64(value).ok_or_else(|| bad("number"))?),
            "optimizer.beta2" => self.optimizer.beta2 = Some(parse_f64(value).ok_or_else(|| bad("number"))?),
            "optimizer.decay-rate" => {
                self.optimizer.decay_rate = Some(parse_f64(value).ok_or_else(|| bad("number"))?)
            }
            "optimizer.decay-interval" => {
                self.optimizer.decay_interval = Some(parse_num(value).ok_or_else(|| bad("integer"))?)
            }

            "train.epochs" => self.train.epochs = parse_num(value).ok_or_else(|| bad("integer"))?,
            "train.batch-size" => self.train.batch_size = parse_num(value).ok_or_else(|| bad("integer"))?,
            "train.seed" => {
                self.train.seed = value.parse::<u64>().map_err(|_| bad("seed"))?;
            }
            "train.label-smoothing" => {
                let s = parse_f64(value).ok_or_else(|| bad("number"))?;
                if !(0.0..1.0).contains(&s) {
                    return Err(Error::config("train.label-smoothing must be in [0, 1)"));
                }
                self.train.label_smoothing = s;
            }

            "data.source" => {} // handled up front in from_pairs
            "data.train-images" | "data.train-labels" | "data.test-images" | "data.test-labels" => {
                let DataSection::Idx {
                    train_images,
                    train_labels,
                    test_images,
                    test_labels,
                } = &mut self.data
                else {
                    return Err(Error::config(format!(
                        "key '{key}' requires data.source=idx"
                    )));
                };
                let slot = match key {
                    "data.train-images" => train_images,
                    "data.train-labels" => train_labels,
                    "data.test-images" => test_images,
                    _ => test_labels,
                };
                *slot = PathBuf::from(value);
            }
            "data.synth-classes" | "data.synth-per-class" | "data.synth-test-per-class"
            | "data.synth-size" => {
                let DataSection::Synth {
                    classes,
                    per_class,
                    test_per_class,
                    size,
                } = &mut self.data
                else {
                    return Err(Error::config(format!(
                        "key '{key}' requires data.source=synth"
                    )));
                };
                let n: usize = parse_num(value).ok_or_else(|| bad("integer"))?;
                match key {
                    "data.synth-classes" => *classes = n,
                    "data.synth-per-class" => *per_class = n,
                    "data.synth-test-per-class" => *test_per_class = n,
                    _ => *size = n,
                }
            }

            "augment.enabled" => self.augment.enabled = parse_bool(value).ok_or_else(|| bad("bool"))?,
            "augment.max-shift" => self.augment.max_shift = parse_num(value).ok_or_else(|| bad("integer"))?,
            "augment.flip" => self.augment.flip = parse_bool(value).ok_or_else(|| bad("bool"))?,

            "output.dir" => self.output.dir = PathBuf::from(value),
            "output.timing" => {
                self.output.timing = match value {
                    "wall" => TimingMode::Wall,
                    "fixed" => TimingMode::Fixed,
                    _ => return Err(bad("timing mode")),
                }
            }
            other => return Err(Error::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.model.classes == 0 {
            return Err(Error::config("model.classes must be positive"));
        }
        if let DataSection::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } = &self.data
        {
            for (name, p) in [
                ("data.train-images", train_images),
                ("data.train-labels", train_labels),
                ("data.test-images", test_images),
                ("data.test-labels", test_labels),
            ] {
                if p.as_os_str().is_empty() {
                    return Err(Error::config(format!("missing dataset path {name}")));
                }
            }
        }
        self.resolve_optimizer()?;
        Ok(())
    }

    /// Fold the optimizer section into a concrete configuration: start from
    /// the preset when given, then apply explicit overrides.
    pub fn resolve_optimizer(&self) -> Result<OptimizerConfig> {
        let o = &self.optimizer;
        let mut cfg = match (o.preset, o.algorithm) {
            (Some(p), _) => preset(p),
            (None, Some(algorithm)) => {
                let eta0 = o
                    .eta0
                    .ok_or_else(|| Error::config("optimizer.eta0 required without a preset"))?;
                let epsilon = o
                    .epsilon
                    .ok_or_else(|| Error::config("optimizer.epsilon required without a preset"))?;
                OptimizerConfig {
                    algorithm,
                    epsilon,
                    eta0,
                    rho: RMSPROP_RHO,
                    beta1: ADAM_BETA1,
                    beta2: ADAM_BETA2,
                    schedule: LrSchedule::constant(),
                }
            }
            (None, None) => {
                return Err(Error::config(
                    "optimizer.preset or optimizer.algorithm must be set",
                ))
            }
        };
        if let Some(a) = o.algorithm {
            cfg.algorithm = a;
        }
        if let Some(v) = o.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = o.eta0 {
            cfg.eta0 = v;
        }
        if let Some(v) = o.rho {
            cfg.rho = v;
        }
        if let Some(v) = o.beta1 {
            cfg.beta1 = v;
        }
        if let Some(v) = o.beta2 {
            cfg.beta2 = v;
        }
        if let Some(v) = o.decay_rate {
            cfg.schedule.decay_rate = v;
        }
        if let Some(v) = o.decay_interval {
            if v == 0 {
                return Err(Error::config("optimizer.decay-interval must be positive"));
            }
            cfg.schedule.interval_epochs = v;
        }
        if cfg.epsilon <= 0.0 {
            return Err(Error::config("optimizer.epsilon must be positive"));
        }
        Ok(cfg)
    }

    /// Model spec against a concrete input shape (from the dataset).
    pub fn model_spec(&self, input: (usize, usize, usize)) -> ModelSpec {
        ModelSpec {
            input,
            stem: self.model.stem,
            head: HeadSpec {
                kind: self.model.head,
                method: self.model.method,
                capsule_dim: self.model.capsule_dim,
                capsule_dim_out: self.model.capsule_dim_out,
            },
            classes: self.model.classes,
        }
    }

    /// Canonical key/value listing (every key, fixed order).
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![
            ("model.stem".into(), self.model.stem.name().into()),
            ("model.head".into(), self.model.head.name().into()),
            ("model.method".into(), self.model.method.letter().into()),
            ("model.capsule-dim".into(), self.model.capsule_dim.to_string()),
            (
                "model.capsule-dim-out".into(),
                self.model.capsule_dim_out.to_string(),
            ),
            ("model.classes".into(), self.model.classes.to_string()),
        ];
        let o = &self.optimizer;
        if let Some(p) = o.preset {
            out.push(("optimizer.preset".into(), p.name().into()));
        }
        if let Some(a) = o.algorithm {
            out.push(("optimizer.algorithm".into(), a.name().into()));
        }
        for (key, v) in [
            ("optimizer.epsilon", o.epsilon),
            ("optimizer.eta0", o.eta0),
            ("optimizer.rho", o.rho),
            ("optimizer.beta1", o.beta1),
            ("optimizer.beta2", o.beta2),
            ("optimizer.decay-rate", o.decay_rate),
        ] {
            if let Some(v) = v {
                out.push((key.into(), format_f64(v)));
            }
        }
        if let Some(v) = o.decay_interval {
            out.push(("optimizer.decay-interval".into(), v.to_string()));
        }
        out.push(("train.epochs".into(), self.train.epochs.to_string()));
        out.push(("train.batch-size".into(), self.train.batch_size.to_string()));
        out.push(("train.seed".into(), self.train.seed.to_string()));
        out.push((
            "train.label-smoothing".into(),
            format_f64(self.train.label_smoothing),
        ));
        match &self.data {
            DataSection::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                out.push(("data.source".into(), "idx".into()));
                out.push((
                    "data.train-images".into(),
                    train_images.display().to_string(),
                ));
                out.push((
                    "data.train-labels".into(),
                    train_labels.display().to_string(),
                ));
                out.push(("data.test-images".into(), test_images.display().to_string()));
                out.push(("data.test-labels".into(), test_labels.display().to_string()));
            }
            DataSection::Synth {
                classes,
                per_class,
                test_per_class,
                size,
            } => {
                out.push(("data.source".into(), "synth".into()));
                out.push(("data.synth-classes".into(), classes.to_string()));
                out.push(("data.synth-per-class".into(), per_class.to_string()));
                out.push((
                    "data.synth-test-per-class".into(),
                    test_per_class.to_string(),
                ));
                out.push(("data.synth-size".into(), size.to_string()));
            }
        }
        out.push(("augment.enabled".into(), self.augment.enabled.to_string()));
        out.push(("augment.max-shift".into(), self.augment.max_shift.to_string()));
        out.push(("augment.flip".into(), self.augment.flip.to_string()));
        out.push(("output.dir".into(), self.output.dir.display().to_string()));
        out.push((
            "output.timing".into(),
            match self.output.timing {
                TimingMode::Wall => "wall".into(),
                TimingMode::Fixed => "fixed".into(),
            },
        ));
        out
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }
}

fn parse_num(v: &str) -> Option<usize> {
    v.parse::<usize>().ok()
}

fn parse_f64(v: &str) -> Option<f64> {
    v.parse::<f64>().ok().filter(|x| x.is_finite())
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

/// Shortest representation that round-trips through `f64::parse`.
fn format_f64(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().ok(), Some(v));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        let text = c.serialize();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn explicit_optimizer_round_trips() {
        let text = "\
optimizer.algorithm=rmsprop
optimizer.epsilon=1
optimizer.eta0=0.045
optimizer.decay-rate=0.94
optimizer.decay-interval=2
";
        let c = ExperimentConfig::parse(text).unwrap();
        assert!(c.optimizer.preset.is_none());
        let resolved = c.resolve_optimizer().unwrap();
        assert_eq!(resolved.algorithm, Algorithm::RmsProp);
        assert_eq!(resolved.epsilon, 1.0);
        assert_eq!(resolved.schedule.decay_rate, 0.94);
        let back = ExperimentConfig::parse(&c.serialize()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn preset_with_override() {
        let text = "optimizer.preset=O3\noptimizer.epsilon=1e-8\n";
        let c = ExperimentConfig::parse(text).unwrap();
        let r = c.resolve_optimizer().unwrap();
        assert_eq!(r.algorithm, Algorithm::Adam);
        assert_eq!(r.epsilon, 1e-8);
        assert_eq!(r.eta0, 0.001);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(matches!(
            ExperimentConfig::parse("model.depth=3\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn duplicate_key_is_rejected() {
        assert!(matches!(
            ExperimentConfig::parse("train.seed=1\ntrain.seed=2\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn idx_source_requires_paths() {
        let err = ExperimentConfig::parse("data.source=idx\n");
        assert!(matches!(err, Err(Error::Config(msg)) if msg.contains("missing dataset path")));
        let ok = ExperimentConfig::parse(
            "data.source=idx\n\
             data.train-images=a\ndata.train-labels=b\n\
             data.test-images=c\ndata.test-labels=d\n",
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let c = ExperimentConfig::parse("# hello\n\ntrain.seed=9\n").unwrap();
        assert_eq!(c.train.seed, 9);
    }

    #[test]
    fn idx_config_round_trips() {
        let text = "\
data.source=idx
data.train-images=ds/train-images
data.train-labels=ds/train-labels
data.test-images=ds/test-images
data.test-labels=ds/test-labels
model.head=fc
";
        let c = ExperimentConfig::parse(text).unwrap();
        let back = ExperimentConfig::parse(&c.serialize()).unwrap();
        assert_eq!(back, c);
    }
}
