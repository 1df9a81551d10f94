//! Training configuration and its flat `key = value` text form.
//!
//! Keys are exactly the field names listed in [`TrainConfig::KEYS`]. Lines
//! starting with `#` and blank lines are ignored; unknown keys are errors.
//! The same keys are written, one per row, to the `key,value` config echo.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::compensation::{CompensationConfig, EpsMode};
use crate::data::{NoiseKind, DEFAULT_CENTER_RADIUS};
use crate::error::{AlumError, Result};
use crate::losses::{Members, MixWeighting};
use crate::mining::PSchedule;
use crate::network::{Architecture, Grid, ScoreKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecayMode {
    /// `p ← p·(1 − lr·wd)` after the Adam step.
    #[default]
    Decoupled,
    /// `g ← g + wd·p` before the Adam step.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplerKind {
    /// Round-robin over per-class shuffles so every batch covers every class.
    #[default]
    Balanced,
    /// Plain shuffle; a batch with a single class is re-drawn up to 10 times.
    Random,
}

macro_rules! str_enum {
    ($t:ty { $($v:path => $s:literal),+ $(,)? }) => {
        impl FromStr for $t {
            type Err = AlumError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(AlumError::Config(format!("unknown value `{s}`"))),
                }
            }
        }
        impl std::fmt::Display for $t {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $($v => $s,)+ })
            }
        }
    };
}

str_enum!(DecayMode { DecayMode::Decoupled => "decoupled", DecayMode::L2 => "l2" });
str_enum!(SamplerKind { SamplerKind::Balanced => "balanced", SamplerKind::Random => "random" });

/// Component toggles of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    /// Latent compensation.
    pub lc: bool,
    /// Adversarial positives.
    pub ap: bool,
    /// Adversarial negatives.
    pub an: bool,
    pub triplet: bool,
}

impl AblationFlags {
    pub const BASELINE: Self = Self::new(false, false, false, false);
    pub const FULL: Self = Self::new(true, true, true, true);

    pub const fn new(lc: bool, ap: bool, an: bool, triplet: bool) -> Self {
        AblationFlags { lc, ap, an, triplet }
    }

    /// Rows of the component ablation: baseline and five increasingly complete variants.
    pub const TABLE: [(&'static str, AblationFlags); 6] = [
        ("Baseline", Self::new(false, false, false, false)),
        ("ALUM-1", Self::new(true, false, false, false)),
        ("ALUM-2", Self::new(true, true, false, false)),
        ("ALUM-3", Self::new(true, false, true, false)),
        ("ALUM-4", Self::new(true, true, true, false)),
        ("ALUM-5", Self::new(true, true, true, true)),
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub head_lr_mult: f64,
    pub weight_decay: f64,
    pub decay: DecayMode,
    pub lambda: f64,
    pub p: f64,
    pub p_schedule: PSchedule,
    pub alpha: f64,
    pub compensation: bool,
    pub comp_layers: Vec<usize>,
    pub comp_mode: EpsMode,
    pub comp_eq7_literal: bool,
    pub comp_apply_in_eval: bool,
    pub comp_eps_div: f64,
    pub use_positive: bool,
    pub use_negative: bool,
    pub use_triplet: bool,
    pub mix_weighting: MixWeighting,
    pub score: ScoreKind,
    pub sampler: SamplerKind,
    pub embed_dim: usize,
    pub hidden: Grid,
    pub hidden_layers: usize,
    pub classes: usize,
    pub dims: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub spread: f64,
    pub center_radius: f64,
    pub noise: NoiseKind,
    pub noise_ratio: f64,
    /// Empty means "synthesize from the dataset keys above".
    pub train_file: String,
    pub test_file: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 128,
            epochs: 40,
            lr: 1e-3,
            head_lr_mult: 1.0,
            weight_decay: 1e-4,
            decay: DecayMode::Decoupled,
            lambda: 0.003,
            p: 0.2,
            p_schedule: PSchedule::Constant,
            alpha: 1.0,
            compensation: true,
            comp_layers: vec![1, 2],
            comp_mode: EpsMode::PerElement,
            comp_eq7_literal: false,
            comp_apply_in_eval: false,
            comp_eps_div: 1e-6,
            use_positive: true,
            use_negative: true,
            use_triplet: true,
            mix_weighting: MixWeighting::Sigma,
            score: ScoreKind::Mean,
            sampler: SamplerKind::Balanced,
            embed_dim: 64,
            hidden: Grid::new(16, 2, 2),
            hidden_layers: 2,
            classes: 4,
            dims: 10,
            n_train: 2000,
            n_test: 1000,
            spread: 1.0,
            center_radius: DEFAULT_CENTER_RADIUS,
            noise: NoiseKind::SymmetricFlip,
            noise_ratio: 0.0,
            train_file: String::new(),
            test_file: String::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| AlumError::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(AlumError::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

impl TrainConfig {
    pub const KEYS: [&'static str; 36] = [
        "seed",
        "batch_size",
        "epochs",
        "lr",
        "head_lr_mult",
        "weight_decay",
        "decay",
        "lambda",
        "p",
        "p_schedule",
        "alpha",
        "compensation",
        "comp_layers",
        "comp_mode",
        "comp_eq7_literal",
        "comp_apply_in_eval",
        "comp_eps_div",
        "use_positive",
        "use_negative",
        "use_triplet",
        "mix_weighting",
        "score",
        "sampler",
        "embed_dim",
        "hidden",
        "hidden_layers",
        "classes",
        "dims",
        "n_train",
        "n_test",
        "spread",
        "center_radius",
        "noise",
        "noise_ratio",
        "train_file",
        "test_file",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "head_lr_mult" => self.head_lr_mult = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "decay" => self.decay = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "p" => self.p = parse(key, v)?,
            "p_schedule" => self.p_schedule = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "compensation" => self.compensation = parse_bool(key, v)?,
            "comp_layers" => self.comp_layers = parse_list(key, v)?,
            "comp_mode" => self.comp_mode = parse(key, v)?,
            "comp_eq7_literal" => self.comp_eq7_literal = parse_bool(key, v)?,
            "comp_apply_in_eval" => self.comp_apply_in_eval = parse_bool(key, v)?,
            "comp_eps_div" => self.comp_eps_div = parse(key, v)?,
            "use_positive" => self.use_positive = parse_bool(key, v)?,
            "use_negative" => self.use_negative = parse_bool(key, v)?,
            "use_triplet" => self.use_triplet = parse_bool(key, v)?,
            "mix_weighting" => self.mix_weighting = parse(key, v)?,
            "score" => self.score = parse(key, v)?,
            "sampler" => self.sampler = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "hidden" => self.hidden = v.parse().map_err(|_| AlumError::Config(format!("bad grid `{v}`")))?,
            "hidden_layers" => self.hidden_layers = parse(key, v)?,
            "classes" => self.classes = parse(key, v)?,
            "dims" => self.dims = parse(key, v)?,
            "n_train" => self.n_train = parse(key, v)?,
            "n_test" => self.n_test = parse(key, v)?,
            "spread" => self.spread = parse(key, v)?,
            "center_radius" => self.center_radius = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "noise_ratio" => self.noise_ratio = parse(key, v)?,
            "train_file" => self.train_file = v.to_string(),
            "test_file" => self.test_file = v.to_string(),
            _ => return Err(AlumError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        fn s(v: impl Display) -> Option<String> {
            Some(v.to_string())
        }
        match key {
            "seed" => s(self.seed),
            "batch_size" => s(self.batch_size),
            "epochs" => s(self.epochs),
            "lr" => s(self.lr),
            "head_lr_mult" => s(self.head_lr_mult),
            "weight_decay" => s(self.weight_decay),
            "decay" => s(self.decay),
            "lambda" => s(self.lambda),
            "p" => s(self.p),
            "p_schedule" => s(self.p_schedule),
            "alpha" => s(self.alpha),
            "compensation" => s(self.compensation),
            "comp_layers" => s(self
                .comp_layers
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(",")),
            "comp_mode" => s(self.comp_mode),
            "comp_eq7_literal" => s(self.comp_eq7_literal),
            "comp_apply_in_eval" => s(self.comp_apply_in_eval),
            "comp_eps_div" => s(self.comp_eps_div),
            "use_positive" => s(self.use_positive),
            "use_negative" => s(self.use_negative),
            "use_triplet" => s(self.use_triplet),
            "mix_weighting" => s(self.mix_weighting),
            "score" => s(self.score),
            "sampler" => s(self.sampler),
            "embed_dim" => s(self.embed_dim),
            "hidden" => s(self.hidden),
            "hidden_layers" => s(self.hidden_layers),
            "classes" => s(self.classes),
            "dims" => s(self.dims),
            "n_train" => s(self.n_train),
            "n_test" => s(self.n_test),
            "spread" => s(self.spread),
            "center_radius" => s(self.center_radius),
            "noise" => s(self.noise),
            "noise_ratio" => s(self.noise_ratio),
            "train_file" => s(&self.train_file),
            "test_file" => s(&self.test_file),
            _ => None,
        }
    }

    /// Parse `key = value` lines on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AlumError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    /// `key,value` CSV, one row per key, with a header row.
    pub fn to_echo_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["key", "value"])?;
        for k in Self::KEYS {
            w.write_record([k, &self.get(k).unwrap_or_default()])?;
        }
        let bytes = w.into_inner().map_err(|e| AlumError::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| AlumError::Format(e.to_string()))
    }

    pub fn from_echo_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut cfg = TrainConfig::default();
        let mut seen = BTreeMap::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(AlumError::Config("config echo rows must be key,value".into()));
            }
            cfg.set(&rec[0], &rec[1])?;
            seen.insert(rec[0].to_string(), ());
        }
        Ok(cfg)
    }

    pub fn flags(&self) -> AblationFlags {
        AblationFlags::new(
            self.compensation,
            self.use_positive,
            self.use_negative,
            self.use_triplet,
        )
    }

    pub fn with_flags(mut self, flags: AblationFlags) -> Self {
        self.compensation = flags.lc;
        self.use_positive = flags.ap;
        self.use_negative = flags.an;
        self.use_triplet = flags.triplet;
        self
    }

    pub fn members(&self) -> Members {
        Members {
            positive: self.use_positive,
            negative: self.use_negative,
        }
    }

    /// Whether any component needs a triplet plan.
    pub fn needs_plan(&self) -> bool {
        self.use_positive || self.use_negative || self.use_triplet
    }

    pub fn compensation_config(&self) -> CompensationConfig {
        CompensationConfig {
            enabled_layers: if self.compensation {
                self.comp_layers.clone()
            } else {
                Vec::new()
            },
            mode: self.comp_mode,
            apply_in_eval: self.comp_apply_in_eval,
            eps_div: self.comp_eps_div,
            eq7_literal: self.comp_eq7_literal,
        }
    }

    pub fn architecture(&self, input_dim: usize, num_classes: usize) -> Architecture {
        Architecture::dense(input_dim, self.hidden, self.hidden_layers, self.embed_dim, num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AlumError::Config(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        for (name, v) in [
            ("lr", self.lr),
            ("head_lr_mult", self.head_lr_mult),
            ("weight_decay", self.weight_decay),
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("spread", self.spread),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(AlumError::Config(format!(
                    "`{name}` must be a finite non-negative number"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.p) {
            return bad("p must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.noise_ratio) {
            return bad("noise_ratio must lie in [0, 1]");
        }
        if self.hidden.len() < 2 || self.hidden.height * self.hidden.width < 2 && self.compensation {
            return bad("hidden grid needs at least 2 spatial positions");
        }
        if self.train_file.is_empty() != self.test_file.is_empty() {
            return bad("train_file and test_file must be given together");
        }
        self.compensation_config().validate(self.hidden_layers)?;
        Ok(())
    }
}
