//! Declarative experiment configuration.
//!
//! The on-disk format is a flat `key = value` text file: one key per line,
//! `#` starts a comment line, unknown or duplicate keys are errors. Every
//! key has a default, so the empty file is the default experiment, and
//! serialization always emits the full key set in a fixed order — parsing a
//! serialized config reproduces it exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::encoders::Template;
use crate::error::{Error, Result};
use crate::federation::ProtocolVariant;
use crate::losses::TextAugMode;
use crate::optim::{OptimKind, Scheduler};

/// Template selector without its parameter (both parameters are separate
/// keys so switching templates never loses the other's setting).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateKind {
    Padding,
    FixedPatch,
    RandomPatch,
}

impl TemplateKind {
    fn parse(name: &str) -> Result<Self> {
        match name {
            "padding" => Ok(TemplateKind::Padding),
            "fixed_patch" => Ok(TemplateKind::FixedPatch),
            "random_patch" => Ok(TemplateKind::RandomPatch),
            other => Err(Error::InvalidArgument(format!(
                "unknown template '{other}' (expected padding, fixed_patch, or random_patch)"
            ))),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            TemplateKind::Padding => "padding",
            TemplateKind::FixedPatch => "fixed_patch",
            TemplateKind::RandomPatch => "random_patch",
        }
    }
}

/// Where the class token goes in the context sequence; `End` resolves to the
/// context length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassPosition {
    End,
    At(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub variant: ProtocolVariant,
    /// M: total clients.
    pub clients: usize,
    /// K: clients sampled per round.
    pub participants: usize,
    /// T_g: global aggregation rounds.
    pub rounds: usize,
    /// T_loc: local passes over the client's data per round.
    pub local_epochs: usize,
    pub optimizer: OptimKind,
    pub scheduler: Scheduler,
    /// Base learning rate α.
    pub alpha: f64,
    /// Weight μ on the contrastive augmentation terms.
    pub mu: f64,
    /// Temperature Γ for both losses.
    pub gamma: f64,
    /// L: number of learnable context vectors.
    pub context_len: usize,
    pub class_position: ClassPosition,
    pub token_dim: usize,
    /// Shared embedding dimension D of both encoders.
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub visual_prompt: bool,
    pub template: TemplateKind,
    pub pad_width: usize,
    pub patch_size: usize,
    /// C: number of classes.
    pub class_count: usize,
    /// n_k: samples per class per owning client.
    pub shots: usize,
    /// s: classes assigned to each client.
    pub classes_per_client: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    /// Training samples generated per class; 0 means "exactly what the
    /// partition needs".
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Local mini-batch size; 0 means the full local set.
    pub batch_size: usize,
    pub text_aug_mode: TextAugMode,
    /// Macro-F1 value credited to a class with no true and no predicted
    /// samples (1 or 0).
    pub empty_class_f1: f64,
    pub seeds: Vec<u64>,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            variant: ProtocolVariant::Atpfl,
            clients: 10,
            participants: 10,
            rounds: 200,
            local_epochs: 2,
            optimizer: OptimKind::Adam,
            scheduler: Scheduler::Cosine,
            alpha: 0.1,
            mu: 1.0,
            gamma: 0.07,
            context_len: 4,
            class_position: ClassPosition::End,
            token_dim: 16,
            embed_dim: 32,
            hidden_dim: 64,
            visual_prompt: true,
            template: TemplateKind::Padding,
            pad_width: 2,
            patch_size: 4,
            class_count: 8,
            shots: 4,
            classes_per_client: 2,
            height: 16,
            width: 16,
            channels: 1,
            noise_sigma: 0.5,
            train_per_class: 0,
            test_per_class: 25,
            batch_size: 0,
            text_aug_mode: TextAugMode::PerClass,
            empty_class_f1: 1.0,
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: "out".into(),
        }
    }
}

impl ExperimentConfig {
    /// Insertion index of the class token, resolved against the context
    /// length.
    pub fn resolved_class_position(&self) -> usize {
        match self.class_position {
            ClassPosition::End => self.context_len,
            ClassPosition::At(p) => p,
        }
    }

    /// Flattened image length H·W·Ch.
    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Input width of the text encoder: (L+1) tokens of token_dim each.
    pub fn text_in_dim(&self) -> usize {
        (self.context_len + 1) * self.token_dim
    }

    /// The heaviest per-class demand the partition can make: the round-robin
    /// assignment gives some class ceil(M·s/C) owners, each taking `shots`.
    pub fn max_class_usage(&self) -> usize {
        let slots = self.clients * self.classes_per_client;
        slots.div_ceil(self.class_count) * self.shots
    }

    /// Training samples to generate per class (resolving the 0 = auto case).
    pub fn train_per_class_resolved(&self) -> usize {
        if self.train_per_class == 0 {
            self.max_class_usage()
        } else {
            self.train_per_class
        }
    }

    /// Augmentation weight the variant actually trains with.
    pub fn effective_mu(&self) -> f64 {
        match self.variant {
            ProtocolVariant::Atpfl => self.mu,
            _ => 0.0,
        }
    }

    /// Whether the visual prompt participates for this variant.
    pub fn effective_visual(&self) -> bool {
        match self.variant {
            ProtocolVariant::PromptflTextOnly => false,
            _ => self.visual_prompt,
        }
    }

    pub fn template(&self) -> Template {
        match self.template {
            TemplateKind::Padding => Template::Padding {
                pad_width: self.pad_width,
            },
            TemplateKind::FixedPatch => Template::FixedPatch {
                patch_size: self.patch_size,
            },
            TemplateKind::RandomPatch => Template::RandomPatch {
                patch_size: self.patch_size,
            },
        }
    }

    /// Full key set in canonical order.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "variant = {}", self.variant.name());
        let _ = writeln!(w, "clients = {}", self.clients);
        let _ = writeln!(w, "participants = {}", self.participants);
        let _ = writeln!(w, "rounds = {}", self.rounds);
        let _ = writeln!(w, "local_epochs = {}", self.local_epochs);
        let _ = writeln!(w, "optimizer = {}", self.optimizer.name());
        let _ = writeln!(w, "scheduler = {}", self.scheduler.name());
        let _ = writeln!(w, "alpha = {}", self.alpha);
        let _ = writeln!(w, "mu = {}", self.mu);
        let _ = writeln!(w, "gamma = {}", self.gamma);
        let _ = writeln!(w, "context_len = {}", self.context_len);
        match self.class_position {
            ClassPosition::End => {
                let _ = writeln!(w, "class_position = end");
            }
            ClassPosition::At(p) => {
                let _ = writeln!(w, "class_position = {p}");
            }
        }
        let _ = writeln!(w, "token_dim = {}", self.token_dim);
        let _ = writeln!(w, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(w, "hidden_dim = {}", self.hidden_dim);
        let _ = writeln!(w, "visual_prompt = {}", self.visual_prompt);
        let _ = writeln!(w, "template = {}", self.template.name());
        let _ = writeln!(w, "pad_width = {}", self.pad_width);
        let _ = writeln!(w, "patch_size = {}", self.patch_size);
        let _ = writeln!(w, "class_count = {}", self.class_count);
        let _ = writeln!(w, "shots = {}", self.shots);
        let _ = writeln!(w, "classes_per_client = {}", self.classes_per_client);
        let _ = writeln!(w, "height = {}", self.height);
        let _ = writeln!(w, "width = {}", self.width);
        let _ = writeln!(w, "channels = {}", self.channels);
        let _ = writeln!(w, "noise_sigma = {}", self.noise_sigma);
        let _ = writeln!(w, "train_per_class = {}", self.train_per_class);
        let _ = writeln!(w, "test_per_class = {}", self.test_per_class);
        let _ = writeln!(w, "batch_size = {}", self.batch_size);
        let _ = writeln!(w, "text_aug_mode = {}", self.text_aug_mode.name());
        let _ = writeln!(w, "empty_class_f1 = {}", self.empty_class_f1);
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(w, "seeds = {}", seeds.join(","));
        let _ = writeln!(w, "out_dir = {}", self.out_dir);
        s
    }

    /// Parse a config file body, collecting every problem before failing.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut errors: Vec<String> = Vec::new();
        let mut seen: Vec<&str> = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errors.push(format!("line {}: expected key = value", lineno + 1));
                continue;
            };
            let key = key.trim();
            let value = value.trim();
            if let Some(known) = KEYS.iter().find(|&&k| k == key) {
                if seen.contains(known) {
                    errors.push(format!("line {}: duplicate key '{key}'", lineno + 1));
                    continue;
                }
                seen.push(known);
            } else {
                errors.push(format!("line {}: unknown key '{key}'", lineno + 1));
                continue;
            }
            if let Err(e) = cfg.set(key, value) {
                errors.push(format!("line {}: {key}: {e}", lineno + 1));
            }
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::InvalidConfig(errors))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(value: &str, what: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("cannot parse '{value}' as {what}")))
        }
        match key {
            "variant" => self.variant = ProtocolVariant::parse(value)?,
            "clients" => self.clients = num(value, "an integer")?,
            "participants" => self.participants = num(value, "an integer")?,
            "rounds" => self.rounds = num(value, "an integer")?,
            "local_epochs" => self.local_epochs = num(value, "an integer")?,
            "optimizer" => self.optimizer = OptimKind::parse(value)?,
            "scheduler" => self.scheduler = Scheduler::parse(value)?,
            "alpha" => self.alpha = num(value, "a number")?,
            "mu" => self.mu = num(value, "a number")?,
            "gamma" => self.gamma = num(value, "a number")?,
            "context_len" => self.context_len = num(value, "an integer")?,
            "class_position" => {
                self.class_position = if value == "end" {
                    ClassPosition::End
                } else {
                    ClassPosition::At(num(value, "an integer or 'end'")?)
                }
            }
            "token_dim" => self.token_dim = num(value, "an integer")?,
            "embed_dim" => self.embed_dim = num(value, "an integer")?,
            "hidden_dim" => self.hidden_dim = num(value, "an integer")?,
            "visual_prompt" => self.visual_prompt = num(value, "true or false")?,
            "template" => self.template = TemplateKind::parse(value)?,
            "pad_width" => self.pad_width = num(value, "an integer")?,
            "patch_size" => self.patch_size = num(value, "an integer")?,
            "class_count" => self.class_count = num(value, "an integer")?,
            "shots" => self.shots = num(value, "an integer")?,
            "classes_per_client" => self.classes_per_client = num(value, "an integer")?,
            "height" => self.height = num(value, "an integer")?,
            "width" => self.width = num(value, "an integer")?,
            "channels" => self.channels = num(value, "an integer")?,
            "noise_sigma" => self.noise_sigma = num(value, "a number")?,
            "train_per_class" => self.train_per_class = num(value, "an integer")?,
            "test_per_class" => self.test_per_class = num(value, "an integer")?,
            "batch_size" => self.batch_size = num(value, "an integer")?,
            "text_aug_mode" => self.text_aug_mode = TextAugMode::parse(value)?,
            "empty_class_f1" => self.empty_class_f1 = num(value, "a number")?,
            "seeds" => {
                let mut seeds = Vec::new();
                for part in value.split(',') {
                    seeds.push(num(part.trim(), "an integer seed")?);
                }
                self.seeds = seeds;
            }
            "out_dir" => self.out_dir = value.to_string(),
            _ => unreachable!("key checked against KEYS"),
        }
        Ok(())
    }

    /// Cross-field validation; returns every violation at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.class_count < 2 {
            errs.push(format!("class_count must be at least 2, got {}", self.class_count));
        }
        if self.clients == 0 {
            errs.push("clients must be at least 1".into());
        }
        if self.participants == 0 || self.participants > self.clients {
            errs.push(format!(
                "participants ({}) must be in 1..=clients ({})",
                self.participants, self.clients
            ));
        }
        if self.local_epochs == 0 {
            errs.push("local_epochs must be at least 1".into());
        }
        if !(self.alpha > 0.0) {
            errs.push(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.mu >= 0.0) {
            errs.push(format!("mu must be nonnegative, got {}", self.mu));
        }
        if !(self.gamma > 0.0) {
            errs.push(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(1..=64).contains(&self.context_len) {
            errs.push(format!("context_len must be in 1..=64, got {}", self.context_len));
        }
        if let ClassPosition::At(p) = self.class_position {
            if p > self.context_len {
                errs.push(format!(
                    "class_position ({p}) must not exceed context_len ({})",
                    self.context_len
                ));
            }
        }
        for (name, v) in [
            ("token_dim", self.token_dim),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("shots", self.shots),
            ("test_per_class", self.test_per_class),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.classes_per_client == 0 || self.classes_per_client > self.class_count {
            errs.push(format!(
                "classes_per_client ({}) must be in 1..=class_count ({})",
                self.classes_per_client, self.class_count
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            errs.push(format!("noise_sigma must be nonnegative, got {}", self.noise_sigma));
        }
        match self.template {
            TemplateKind::Padding => {
                if self.pad_width == 0 {
                    errs.push("pad_width must be positive".into());
                }
            }
            TemplateKind::FixedPatch | TemplateKind::RandomPatch => {
                if self.patch_size == 0 || self.patch_size > self.height.min(self.width) {
                    errs.push(format!(
                        "patch_size ({}) must be in 1..={}",
                        self.patch_size,
                        self.height.min(self.width)
                    ));
                }
            }
        }
        if self.train_per_class != 0 && self.train_per_class < self.max_class_usage() {
            errs.push(format!(
                "train_per_class ({}) cannot satisfy the partition, which may draw {} samples from one class",
                self.train_per_class,
                self.max_class_usage()
            ));
        }
        if self.empty_class_f1 != 0.0 && self.empty_class_f1 != 1.0 {
            errs.push(format!(
                "empty_class_f1 must be 0 or 1, got {}",
                self.empty_class_f1
            ));
        }
        if self.seeds.is_empty() {
            errs.push("seeds must list at least one seed".into());
        }
        if self.out_dir.is_empty() {
            errs.push("out_dir must not be empty".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}

const KEYS: &[&str] = &[
    "variant",
    "clients",
    "participants",
    "rounds",
    "local_epochs",
    "optimizer",
    "scheduler",
    "alpha",
    "mu",
    "gamma",
    "context_len",
    "class_position",
    "token_dim",
    "embed_dim",
    "hidden_dim",
    "visual_prompt",
    "template",
    "pad_width",
    "patch_size",
    "class_count",
    "shots",
    "classes_per_client",
    "height",
    "width",
    "channels",
    "noise_sigma",
    "train_per_class",
    "test_per_class",
    "batch_size",
    "text_aug_mode",
    "empty_class_f1",
    "seeds",
    "out_dir",
];
