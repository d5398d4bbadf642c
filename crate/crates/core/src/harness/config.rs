//! Run configuration and its plain-text `key=value` form.
//!
//! Keys are dotted: `model.*`, `optimizer.*` and `generator.*` address the
//! fields of the corresponding config structs, bare keys address
//! [`TrainConfig`]. `model.preset` and `optimizer.kind` reset their section
//! to a preset and are applied before every other key.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{AttributeType, GeneratorConfig, LegalTable, ObjectType, RelationType};
use crate::encoding::{MEConfig, Variant};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{OptimizerConfig, OptimizerKind};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Dropout on the penultimate `f_phi` layer during training.
    pub dropout: bool,
    /// Samples per independently recorded graph inside a batch.
    pub chunk_size: usize,
    /// Stop after the first epoch whose validation accuracy reaches this.
    pub target_accuracy: Option<f64>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 512,
            epochs: 1,
            train_data: PathBuf::new(),
            val_data: PathBuf::new(),
            seed: 0,
            checkpoint: PathBuf::new(),
            metrics: PathBuf::new(),
            dropout: false,
            chunk_size: 16,
            target_accuracy: None,
            resume: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults around [`ModelConfig::micro`].
    pub fn micro(relation_layers: usize) -> Self {
        TrainConfig {
            model: ModelConfig::micro(relation_layers),
            batch_size: 128,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.chunk_size == 0 {
            return Err(Error::Config(
                "batch_size, epochs and chunk_size must be >= 1".into(),
            ));
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("target_accuracy {t} outside [0, 1]")));
            }
        }
        let paths = [
            &self.train_data,
            &self.val_data,
            &self.checkpoint,
            &self.metrics,
        ];
        for (i, a) in paths.iter().enumerate() {
            for b in &paths[i + 1..] {
                if !a.as_os_str().is_empty() && a == b {
                    return Err(Error::Config(format!("path {} used twice", a.display())));
                }
            }
        }
        Ok(())
    }
}

/// Everything a config file can set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
}

const PRESET_KEYS: [&str; 2] = ["model.preset", "optimizer.kind"];

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| value(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn optional(v: &str) -> Option<&str> {
    match v {
        "" | "none" => None,
        _ => Some(v),
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        let key = k.trim().to_string();
        if out.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!(
                "line {}: duplicate key {key}",
                n + 1
            )));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(&parse_lines(text)?)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies presets first, then every other entry in order.
    pub fn apply(&mut self, entries: &[(String, String)]) -> Result<()> {
        for (k, v) in entries
            .iter()
            .filter(|(k, _)| PRESET_KEYS.contains(&k.as_str()))
        {
            self.set(k, v)?;
        }
        for (k, v) in entries
            .iter()
            .filter(|(k, _)| !PRESET_KEYS.contains(&k.as_str()))
        {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key.split_once('.') {
            Some(("model", rest)) => set_model(&mut self.train.model, rest, v),
            Some(("optimizer", rest)) => set_optimizer(&mut self.train.optimizer, rest, v),
            Some(("generator", rest)) => set_generator(&mut self.generator, rest, v),
            _ => set_train(&mut self.train, key, v),
        }
    }

    /// Canonical text form; parsing it reproduces `self`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        render_train(&self.train, &mut s);
        render_model(&self.train.model, &mut s);
        render_optimizer(&self.train.optimizer, &mut s);
        render_generator(&self.generator, &mut s);
        s
    }
}

fn set_train(t: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "batch_size" => t.batch_size = value(key, v)?,
        "epochs" => t.epochs = value(key, v)?,
        "train_data" => t.train_data = v.into(),
        "val_data" => t.val_data = v.into(),
        "seed" => t.seed = value(key, v)?,
        "checkpoint" => t.checkpoint = v.into(),
        "metrics" => t.metrics = v.into(),
        "dropout" => t.dropout = flag(key, v)?,
        "chunk_size" => t.chunk_size = value(key, v)?,
        "target_accuracy" => t.target_accuracy = optional(v).map(|s| value(key, s)).transpose()?,
        "resume" => t.resume = optional(v).map(PathBuf::from),
        _ => return Err(Error::Config(format!("unknown key {key}"))),
    }
    Ok(())
}

fn render_train(t: &TrainConfig, s: &mut String) {
    let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
    let _ = writeln!(s, "batch_size={}", t.batch_size);
    let _ = writeln!(s, "epochs={}", t.epochs);
    let _ = writeln!(s, "train_data={}", t.train_data.display());
    let _ = writeln!(s, "val_data={}", t.val_data.display());
    let _ = writeln!(s, "seed={}", t.seed);
    let _ = writeln!(s, "checkpoint={}", t.checkpoint.display());
    let _ = writeln!(s, "metrics={}", t.metrics.display());
    let _ = writeln!(s, "dropout={}", t.dropout);
    let _ = writeln!(s, "chunk_size={}", t.chunk_size);
    let _ = writeln!(
        s,
        "target_accuracy={}",
        opt(t.target_accuracy.map(|a| a.to_string()))
    );
    let _ = writeln!(
        s,
        "resume={}",
        opt(t.resume.as_ref().map(|p| p.display().to_string()))
    );
}

fn set_model(m: &mut ModelConfig, key: &str, v: &str) -> Result<()> {
    let full = format!("model.{key}");
    let key_ = full.as_str();
    match key {
        "preset" => {
            let layers = m.relation_layers;
            *m = match v {
                "paper" => ModelConfig::paper(layers),
                "micro" => ModelConfig::micro(layers),
                "tiny" => ModelConfig::tiny(),
                _ => return Err(Error::Config(format!("unknown model preset {v:?}"))),
            };
        }
        "relation_layers" => m.relation_layers = value(key_, v)?,
        "layer1_widths" => m.layer1_widths = list(key_, v)?,
        "deeper_widths" => m.deeper_widths = list(key_, v)?,
        "f_phi_widths" => m.f_phi_widths = list(key_, v)?,
        "embed_dim" => m.embed_dim = value(key_, v)?,
        "conv_channels" => m.conv_channels = value(key_, v)?,
        "conv_count" => m.conv_count = value(key_, v)?,
        "image_size" => m.image_size = value(key_, v)?,
        "aggregation" => m.aggregation = value(key_, v)?,
        "me.variant" => match v {
            "none" => m.me = None,
            _ => {
                let variant: Variant = value(key_, v)?;
                let base = m.me.unwrap_or(MEConfig {
                    d: 8,
                    sigma: 0.28,
                    variant,
                });
                m.me = Some(MEConfig { variant, ..base });
            }
        },
        "me.d" | "me.sigma" => {
            let me = m
                .me
                .as_mut()
                .ok_or_else(|| Error::Config(format!("{key_} set while model.me.variant=none")))?;
            if key == "me.d" {
                me.d = value(key_, v)?;
            } else {
                me.sigma = value(key_, v)?;
            }
        }
        _ => return Err(Error::Config(format!("unknown key {key_}"))),
    }
    Ok(())
}

fn render_model(m: &ModelConfig, s: &mut String) {
    let _ = writeln!(s, "model.relation_layers={}", m.relation_layers);
    let _ = writeln!(s, "model.layer1_widths={}", join(&m.layer1_widths));
    let _ = writeln!(s, "model.deeper_widths={}", join(&m.deeper_widths));
    let _ = writeln!(s, "model.f_phi_widths={}", join(&m.f_phi_widths));
    let _ = writeln!(s, "model.embed_dim={}", m.embed_dim);
    let _ = writeln!(s, "model.conv_channels={}", m.conv_channels);
    let _ = writeln!(s, "model.conv_count={}", m.conv_count);
    let _ = writeln!(s, "model.image_size={}", m.image_size);
    let _ = writeln!(s, "model.aggregation={}", m.aggregation);
    match &m.me {
        None => {
            let _ = writeln!(s, "model.me.variant=none");
        }
        Some(me) => {
            let _ = writeln!(s, "model.me.variant={}", me.variant);
            let _ = writeln!(s, "model.me.d={}", me.d);
            let _ = writeln!(s, "model.me.sigma={}", me.sigma);
        }
    }
}

/// Model config from the `model.*` lines of a rendered config.
pub fn parse_model(text: &str) -> Result<ModelConfig> {
    let mut m = ModelConfig::default();
    for (k, v) in parse_lines(text)? {
        let rest = k
            .strip_prefix("model.")
            .ok_or_else(|| Error::Config(format!("expected a model key, got {k}")))?;
        set_model(&mut m, rest, &v)?;
    }
    Ok(m)
}

/// The `model.*` lines of a config file.
pub fn render_model_config(m: &ModelConfig) -> String {
    let mut s = String::new();
    render_model(m, &mut s);
    s
}

fn set_optimizer(o: &mut OptimizerConfig, key: &str, v: &str) -> Result<()> {
    let full = format!("optimizer.{key}");
    let key_ = full.as_str();
    match key {
        "kind" => {
            *o = match value::<OptimizerKind>(key_, v)? {
                OptimizerKind::Adam => OptimizerConfig::adam(),
                OptimizerKind::Lamb => OptimizerConfig::lamb(),
            }
        }
        "lr" => o.lr = value(key_, v)?,
        "beta1" => o.beta1 = value(key_, v)?,
        "beta2" => o.beta2 = value(key_, v)?,
        "eps" => o.eps = value(key_, v)?,
        "weight_decay" => o.weight_decay = value(key_, v)?,
        "trust_offset" => o.trust_offset = value(key_, v)?,
        "grad_clip_norm" => o.grad_clip_norm = value(key_, v)?,
        "clip_mode" => o.clip_mode = value(key_, v)?,
        "warmup" => o.warmup = flag(key_, v)?,
        "warmup_epochs" => o.warmup_epochs = value(key_, v)?,
        "l2" => o.l2 = value(key_, v)?,
        _ => return Err(Error::Config(format!("unknown key {key_}"))),
    }
    Ok(())
}

fn render_optimizer(o: &OptimizerConfig, s: &mut String) {
    let _ = writeln!(s, "optimizer.kind={}", o.kind);
    let _ = writeln!(s, "optimizer.lr={}", o.lr);
    let _ = writeln!(s, "optimizer.beta1={}", o.beta1);
    let _ = writeln!(s, "optimizer.beta2={}", o.beta2);
    let _ = writeln!(s, "optimizer.eps={}", o.eps);
    let _ = writeln!(s, "optimizer.weight_decay={}", o.weight_decay);
    let _ = writeln!(s, "optimizer.trust_offset={}", o.trust_offset);
    let _ = writeln!(s, "optimizer.grad_clip_norm={}", o.grad_clip_norm);
    let _ = writeln!(s, "optimizer.clip_mode={}", o.clip_mode);
    let _ = writeln!(s, "optimizer.warmup={}", o.warmup);
    let _ = writeln!(s, "optimizer.warmup_epochs={}", o.warmup_epochs);
    let _ = writeln!(s, "optimizer.l2={}", o.l2);
}

fn set_generator(g: &mut GeneratorConfig, key: &str, v: &str) -> Result<()> {
    let full = format!("generator.{key}");
    let key_ = full.as_str();
    match key {
        "image_size" => g.image_size = value(key_, v)?,
        "grid" => g.grid = value(key_, v)?,
        "sizes" => g.sizes = value(key_, v)?,
        "colors" => g.colors = value(key_, v)?,
        "types" => g.types = value(key_, v)?,
        "triples_per_sample" => g.triples_per_sample = value(key_, v)?,
        "distractors" => g.distractors = flag(key_, v)?,
        "column_wise" => g.column_wise = flag(key_, v)?,
        "seed" => g.seed = value(key_, v)?,
        "legal" => {
            g.legal = LegalTable::from_str(v).map_err(|e| Error::Config(format!("{key_}: {e}")))?
        }
        "relations" => g.legal = g.legal.restrict_relations(&list::<RelationType>(key_, v)?),
        "objects" => g.legal = g.legal.restrict_objects(&list::<ObjectType>(key_, v)?),
        "attributes" => {
            g.legal = g
                .legal
                .restrict_attributes(&list::<AttributeType>(key_, v)?)
        }
        _ => return Err(Error::Config(format!("unknown key {key_}"))),
    }
    Ok(())
}

fn render_generator(g: &GeneratorConfig, s: &mut String) {
    let _ = writeln!(s, "generator.image_size={}", g.image_size);
    let _ = writeln!(s, "generator.grid={}", g.grid);
    let _ = writeln!(s, "generator.sizes={}", g.sizes);
    let _ = writeln!(s, "generator.colors={}", g.colors);
    let _ = writeln!(s, "generator.types={}", g.types);
    let _ = writeln!(s, "generator.triples_per_sample={}", g.triples_per_sample);
    let _ = writeln!(s, "generator.distractors={}", g.distractors);
    let _ = writeln!(s, "generator.column_wise={}", g.column_wise);
    let _ = writeln!(s, "generator.seed={}", g.seed);
    let _ = writeln!(s, "generator.legal={}", g.legal);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_reach_every_section() {
        let cfg = RunConfig::parse(
            "# micro run\n\
             model.preset = micro\n\
             model.relation_layers=2\n\
             optimizer.lr=2e-3   # peak rate\n\
             optimizer.clip_mode=per_element\n\
             generator.relations=progression,and\n\
             batch_size=64\n\
             target_accuracy=0.85\n",
        )
        .unwrap();
        assert_eq!(cfg.train.model.relation_layers, 2);
        assert_eq!(cfg.train.model.embed_dim, 64);
        assert_eq!(cfg.train.optimizer.lr, 2e-3);
        assert_eq!(
            cfg.train.optimizer.clip_mode,
            crate::optim::ClipMode::PerElement
        );
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.target_accuracy, Some(0.85));
        assert!(cfg
            .generator
            .legal
            .triples()
            .iter()
            .all(|t| matches!(t.relation, RelationType::Progression | RelationType::And)));
    }

    #[test]
    fn presets_apply_before_other_keys() {
        let cfg = RunConfig::parse("optimizer.lr=5e-4\noptimizer.kind=adam\n").unwrap();
        assert_eq!(cfg.train.optimizer.kind, OptimizerKind::Adam);
        assert_eq!(cfg.train.optimizer.lr, 5e-4);
        assert!(!cfg.train.optimizer.warmup);
    }

    #[test]
    fn render_round_trips() {
        let mut cfg =
            RunConfig::parse("model.preset=micro\nmodel.me.variant=triangle\nresume=a.ckpt\n")
                .unwrap();
        cfg.train.target_accuracy = Some(0.5);
        let back = RunConfig::parse(&cfg.render()).unwrap();
        assert_eq!(back, cfg);
        let m = parse_model(&render_model_config(&ModelConfig::paper(3))).unwrap();
        assert_eq!(m, ModelConfig::paper(3));
        let none = RunConfig::parse("model.me.variant=none\n").unwrap();
        assert_eq!(none.train.model.me, None);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("nonsense").is_err());
        assert!(RunConfig::parse("model.bogus=1").is_err());
        assert!(RunConfig::parse("epochs=many").is_err());
        assert!(RunConfig::parse("epochs=1\nepochs=2").is_err());
        assert!(RunConfig::parse("dropout=maybe").is_err());
        let mut t = TrainConfig::micro(1);
        t.train_data = "a".into();
        t.val_data = "a".into();
        assert!(t.validate().is_err());
        t.val_data = "b".into();
        t.validate().unwrap();
    }
}
