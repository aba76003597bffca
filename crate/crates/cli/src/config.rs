//! Run configuration: a line-oriented `section.key = value` file plus
//! command-line overrides.

use std::path::Path;
use std::str::FromStr;

use lutfetch::cost::{DesignConstraints, KernelConfig, TableConfig};
use lutfetch::distill::DistillConfig;
use lutfetch::eval::PrefetchConfig;
use lutfetch::kernels::Activation;
use lutfetch::nn::{ModelConfig, Optimizer, TrainConfig};
use lutfetch::tabularize::{FineTuneConfig, TabularizeOptions};
use lutfetch::trace::DatasetConfig;
use lutfetch::Error;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSection {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// 0 means `4 * dim`.
    pub ffn_dim: usize,
    pub train: TrainConfig,
}

impl ModelSection {
    fn new(layers: usize, dim: usize, heads: usize) -> Self {
        ModelSection {
            layers,
            dim,
            heads,
            ffn_dim: 0,
            train: TrainConfig::default(),
        }
    }

    pub fn model_config(&self, data: &DatasetConfig) -> ModelConfig {
        let mut mc = ModelConfig::new(self.layers, self.dim, self.heads, data);
        if self.ffn_dim > 0 {
            mc.ffn_dim = self.ffn_dim;
        }
        mc
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableSection {
    pub table: TableConfig,
    /// 0 means "same as `attention_c`".
    pub attention_time_c: usize,
    pub activation: Activation,
    pub lut_resolution: usize,
    pub lut_range: f64,
    pub finetune: FineTuneConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub teacher: ModelSection,
    pub student: ModelSection,
    pub distill: DistillConfig,
    pub table: TableSection,
    pub constraints: DesignConstraints,
    pub eval: PrefetchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut table = TableConfig::uniform(128, 2);
        table.input.c = 1;
        RunConfig {
            seed: 0,
            dataset: DatasetConfig::default(),
            teacher: ModelSection::new(4, 256, 8),
            student: ModelSection::new(1, 32, 2),
            distill: DistillConfig::default(),
            table: TableSection {
                table,
                attention_time_c: 1,
                activation: Activation::Softmax,
                lut_resolution: 4096,
                lut_range: 8.0,
                finetune: FineTuneConfig::default(),
            },
            constraints: DesignConstraints {
                latency: 100.0,
                storage_bytes: 1_000_000.0,
            },
            eval: PrefetchConfig::default(),
        }
    }
}

/// Derived seed for a named pipeline stage: `seed` xor a hash of `tag`.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let h = Sha256::digest(tag.as_bytes());
    seed ^ u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, Error> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {value:?}"))),
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Softmax => "softmax",
        Activation::Sigmoid => "sigmoid",
    }
}

fn optimizer_name(o: Optimizer) -> &'static str {
    match o {
        Optimizer::Sgd => "sgd",
        Optimizer::Adam => "adam",
    }
}

fn set_model(m: &mut ModelSection, field: &str, key: &str, v: &str) -> Result<(), Error> {
    match field {
        "layers" => m.layers = parse(key, v)?,
        "dim" => m.dim = parse(key, v)?,
        "heads" => m.heads = parse(key, v)?,
        "ffn_dim" => m.ffn_dim = parse(key, v)?,
        "epochs" => m.train.epochs = parse(key, v)?,
        "learning_rate" => m.train.learning_rate = parse(key, v)?,
        "batch_size" => m.train.batch_size = parse(key, v)?,
        "optimizer" => m.train.optimizer = parse(key, v)?,
        _ => return Err(Error::Config(format!("unknown key {key:?}"))),
    }
    Ok(())
}

fn model_entries(name: &str, m: &ModelSection, out: &mut Vec<(String, String)>) {
    let mut push = |k: &str, v: String| out.push((format!("{name}.{k}"), v));
    push("layers", m.layers.to_string());
    push("dim", m.dim.to_string());
    push("heads", m.heads.to_string());
    push("ffn_dim", m.ffn_dim.to_string());
    push("epochs", m.train.epochs.to_string());
    push("learning_rate", m.train.learning_rate.to_string());
    push("batch_size", m.train.batch_size.to_string());
    push("optimizer", optimizer_name(m.train.optimizer).to_string());
}

fn kernel_mut<'a>(t: &'a mut TableConfig, class: &str) -> Option<&'a mut KernelConfig> {
    match class {
        "input" => Some(&mut t.input),
        "attention" => Some(&mut t.attention),
        "ffn" => Some(&mut t.ffn),
        "output" => Some(&mut t.output),
        _ => None,
    }
}

impl RunConfig {
    /// Applies one `section.key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        let v = value;
        let d = &mut self.dataset;
        match (section, field) {
            ("run", "seed") => self.seed = parse(key, v)?,
            ("dataset", "history") => d.history = parse(key, v)?,
            ("dataset", "page_bits") => d.page_bits = parse(key, v)?,
            ("dataset", "block_bits") => d.block_bits = parse(key, v)?,
            ("dataset", "lookahead") => d.lookahead = parse(key, v)?,
            ("dataset", "delta_range") => d.delta_range = parse(key, v)?,
            ("dataset", "pc_bits") => d.pc_bits = parse(key, v)?,
            ("teacher", f) => set_model(&mut self.teacher, f, key, v)?,
            ("student", f) => set_model(&mut self.student, f, key, v)?,
            ("distill", "temperature") => self.distill.temperature = parse(key, v)?,
            ("distill", "lambda") => self.distill.lambda = parse(key, v)?,
            ("distill", "scale_by_t2") => self.distill.scale_by_t2 = parse_bool(key, v)?,
            ("distill", "epochs") => self.distill.train.epochs = parse(key, v)?,
            ("distill", "learning_rate") => self.distill.train.learning_rate = parse(key, v)?,
            ("distill", "batch_size") => self.distill.train.batch_size = parse(key, v)?,
            ("distill", "optimizer") => self.distill.train.optimizer = parse(key, v)?,
            ("table", "entry_bits") => self.table.table.entry_bits = parse(key, v)?,
            ("table", "attention_time_c") => self.table.attention_time_c = parse(key, v)?,
            ("table", "activation") => self.table.activation = parse(key, v)?,
            ("table", "lut_resolution") => self.table.lut_resolution = parse(key, v)?,
            ("table", "lut_range") => self.table.lut_range = parse(key, v)?,
            ("table", "finetune_epochs") => self.table.finetune.epochs = parse(key, v)?,
            ("table", "finetune_learning_rate") => self.table.finetune.learning_rate = parse(key, v)?,
            ("table", "finetune_batch_size") => self.table.finetune.batch_size = parse(key, v)?,
            ("table", f) => {
                let (class, which) = f
                    .rsplit_once('_')
                    .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
                let kc = kernel_mut(&mut self.table.table, class)
                    .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
                match which {
                    "k" => kc.k = parse(key, v)?,
                    "c" => kc.c = parse(key, v)?,
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
            }
            ("constraints", "latency") => self.constraints.latency = parse(key, v)?,
            ("constraints", "storage") => self.constraints.storage_bytes = parse(key, v)?,
            ("eval", "threshold") => self.eval.threshold = parse(key, v)?,
            ("eval", "degree") => self.eval.degree = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), Error> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Parses config text on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self, Error> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Parse {
                line: i + 1,
                msg: format!("expected `section.key = value`, got {line:?}"),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_text(&text)
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let d = &self.dataset;
        out.push(("run.seed".into(), self.seed.to_string()));
        for (k, v) in [
            ("history", d.history.to_string()),
            ("page_bits", d.page_bits.to_string()),
            ("block_bits", d.block_bits.to_string()),
            ("lookahead", d.lookahead.to_string()),
            ("delta_range", d.delta_range.to_string()),
            ("pc_bits", d.pc_bits.to_string()),
        ] {
            out.push((format!("dataset.{k}"), v));
        }
        model_entries("teacher", &self.teacher, &mut out);
        model_entries("student", &self.student, &mut out);
        let ds = &self.distill;
        for (k, v) in [
            ("temperature", ds.temperature.to_string()),
            ("lambda", ds.lambda.to_string()),
            ("scale_by_t2", ds.scale_by_t2.to_string()),
            ("epochs", ds.train.epochs.to_string()),
            ("learning_rate", ds.train.learning_rate.to_string()),
            ("batch_size", ds.train.batch_size.to_string()),
            ("optimizer", optimizer_name(ds.train.optimizer).to_string()),
        ] {
            out.push((format!("distill.{k}"), v));
        }
        let t = &self.table;
        for (class, kc) in [
            ("input", t.table.input),
            ("attention", t.table.attention),
            ("ffn", t.table.ffn),
            ("output", t.table.output),
        ] {
            out.push((format!("table.{class}_k"), kc.k.to_string()));
            out.push((format!("table.{class}_c"), kc.c.to_string()));
        }
        for (k, v) in [
            ("entry_bits", t.table.entry_bits.to_string()),
            ("attention_time_c", t.attention_time_c.to_string()),
            ("activation", activation_name(t.activation).to_string()),
            ("lut_resolution", t.lut_resolution.to_string()),
            ("lut_range", t.lut_range.to_string()),
            ("finetune_epochs", t.finetune.epochs.to_string()),
            ("finetune_learning_rate", t.finetune.learning_rate.to_string()),
            ("finetune_batch_size", t.finetune.batch_size.to_string()),
        ] {
            out.push((format!("table.{k}"), v));
        }
        out.push(("constraints.latency".into(), self.constraints.latency.to_string()));
        out.push(("constraints.storage".into(), self.constraints.storage_bytes.to_string()));
        out.push(("eval.threshold".into(), self.eval.threshold.to_string()));
        out.push(("eval.degree".into(), self.eval.degree.to_string()));
        out
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.dataset.validate()?;
        self.teacher.model_config(&self.dataset).validate()?;
        self.student.model_config(&self.dataset).validate()?;
        self.teacher.train.validate()?;
        self.student.train.validate()?;
        self.distill.validate()?;
        self.constraints.validate()?;
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::Config("eval.threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn teacher_train(&self) -> TrainConfig {
        TrainConfig {
            seed: sub_seed(self.seed, "teacher"),
            ..self.teacher.train
        }
    }

    pub fn student_train(&self) -> TrainConfig {
        TrainConfig {
            seed: sub_seed(self.seed, "student"),
            ..self.student.train
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            train: TrainConfig {
                seed: sub_seed(self.seed, "distill"),
                ..self.distill.train
            },
            ..self.distill
        }
    }

    pub fn tabularize_options(&self, finetune: bool) -> TabularizeOptions {
        let t = &self.table;
        let mut ft = FineTuneConfig {
            seed: sub_seed(self.seed, "finetune"),
            ..t.finetune
        };
        if !finetune {
            ft.epochs = 0;
        }
        TabularizeOptions {
            table: t.table,
            attention_time_subspaces: (t.attention_time_c > 0).then_some(t.attention_time_c),
            activation: t.activation,
            lut_resolution: t.lut_resolution,
            lut_range: t.lut_range,
            fine_tune: ft,
            seed: sub_seed(self.seed, "tabularize"),
        }
    }
}
