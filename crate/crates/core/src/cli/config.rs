//! Flat `section.key = value` experiment configs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::divergence::DiscriminatorSchedule;
use crate::error::{Error, Result};
use crate::evaluation::default_epsilons;
use crate::nets::{build_lenet, build_mlp, NetworkSpec};
use crate::posterior::HypernetConfig;
use crate::training::{KlScale, Method, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum NetworkChoice {
    Mlp(Vec<usize>),
    Lenet { classes: usize },
}

impl NetworkChoice {
    pub fn build(&self) -> Result<NetworkSpec> {
        match self {
            NetworkChoice::Mlp(extents) => build_mlp(extents),
            NetworkChoice::Lenet { classes } => build_lenet(*classes),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MnistSource {
    pub dir: PathBuf,
    /// First `n` training examples; `None` keeps all of them.
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    /// IDX image file of an outlier set. Uniform noise images stand in when absent.
    pub outlier: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySource {
    pub points: usize,
    pub x_lo: f64,
    pub x_hi: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// How far past the training range the predictive table extends.
    pub margin: f64,
}

impl Default for ToySource {
    fn default() -> Self {
        Self {
            points: 20,
            x_lo: -4.0,
            x_hi: 4.0,
            noise_std: 3.0,
            seed: 0,
            margin: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Mnist(MnistSource),
    Toy(ToySource),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub samples: usize,
    pub epsilons: Vec<f64>,
    /// Test examples attacked in the adversarial sweep; `None` attacks all of them.
    pub attack_subset: Option<usize>,
    pub diagnose: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            epsilons: default_epsilons(),
            attack_subset: None,
            diagnose: "layer0.kernel:0..4".to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub output: PathBuf,
    pub network: NetworkChoice,
    pub data: DataSource,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            output: PathBuf::from(format!("runs/{method}")),
            network: NetworkChoice::Mlp(vec![784, 64, 10]),
            data: DataSource::Mnist(MnistSource {
                dir: PathBuf::from("data/mnist"),
                train_subset: None,
                test_subset: None,
                outlier: None,
            }),
            train: TrainConfig::for_method(method),
            eval: EvalConfig::default(),
        }
    }

    pub fn method(&self) -> Method {
        self.train.method
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Writes the resolved config back out in the format [`parse_config`] reads.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("experiment.output", self.output.display().to_string());
        kv("experiment.seed", t.seed.to_string());
        match &self.network {
            NetworkChoice::Mlp(e) => {
                kv("network.kind", "mlp".into());
                kv("network.extents", join(e));
            }
            NetworkChoice::Lenet { classes } => {
                kv("network.kind", "lenet".into());
                kv("network.classes", classes.to_string());
            }
        }
        match &self.data {
            DataSource::Mnist(m) => {
                kv("data.kind", "mnist".into());
                kv("mnist.dir", m.dir.display().to_string());
                if let Some(n) = m.train_subset {
                    kv("mnist.train_subset", n.to_string());
                }
                if let Some(n) = m.test_subset {
                    kv("mnist.test_subset", n.to_string());
                }
                if let Some(p) = &m.outlier {
                    kv("mnist.outlier", p.display().to_string());
                }
            }
            DataSource::Toy(y) => {
                kv("data.kind", "toy".into());
                kv("toy.points", y.points.to_string());
                kv("toy.x_lo", y.x_lo.to_string());
                kv("toy.x_hi", y.x_hi.to_string());
                kv("toy.noise_std", y.noise_std.to_string());
                kv("toy.seed", y.seed.to_string());
                kv("toy.margin", y.margin.to_string());
            }
        }
        kv("train.method", t.method.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.steps", t.steps.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.kl_samples", t.kl_samples.to_string());
        kv("train.prior_samples", t.prior_samples.to_string());
        kv("train.prior", "standard_normal".into());
        kv("train.anneal_fraction", t.anneal_fraction.to_string());
        kv(
            "train.kl_scale",
            match t.kl_scale {
                KlScale::PerExample => "per_example".into(),
                KlScale::Fixed(v) => v.to_string(),
            },
        );
        kv("train.data_free", t.data_free.to_string());
        match t.method {
            Method::Bbh => {
                let h = &t.hypernet;
                kv("hypernet.architecture", h.architecture.to_string());
                kv("hypernet.hidden", join(&h.hidden));
                kv("hypernet.noise_dim", h.noise_dim.to_string());
                kv("hypernet.noise_mode", h.noise_mode.to_string());
            }
            Method::BbbAvb => {
                let d = &t.discriminator;
                kv("discriminator.pretrain_steps", d.pretrain_steps.to_string());
                kv("discriminator.steps_per_update", d.steps_per_update.to_string());
                kv("discriminator.hidden", join(&d.hidden));
                kv("discriminator.lr", d.lr.to_string());
                kv("discriminator.batch_size", d.batch.to_string());
                kv("discriminator.estimate_coords", d.estimate_coords.to_string());
            }
            Method::Ensemble => kv("ensemble.size", t.ensemble_size.to_string()),
            Method::Dropout => kv("dropout.rate", t.dropout_rate.to_string()),
            _ => {}
        }
        kv("eval.samples", self.eval.samples.to_string());
        kv("eval.epsilons", join(&self.eval.epsilons));
        if let Some(n) = self.eval.attack_subset {
            kv("eval.attack_subset", n.to_string());
        }
        kv("eval.diagnose", self.eval.diagnose.clone());
        s
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Which method (or data kind) a section belongs to.
fn section_owner(section: &str) -> Option<&'static str> {
    match section {
        "hypernet" => Some("bbh"),
        "discriminator" => Some("bbb_avb"),
        "ensemble" => Some("ensemble"),
        "dropout" => Some("dropout"),
        "mnist" => Some("data.kind = mnist"),
        "toy" => Some("data.kind = toy"),
        _ => None,
    }
}

const KEYS: &[&str] = &[
    "experiment.output",
    "experiment.seed",
    "network.kind",
    "network.extents",
    "network.classes",
    "data.kind",
    "mnist.dir",
    "mnist.train_subset",
    "mnist.test_subset",
    "mnist.outlier",
    "toy.points",
    "toy.x_lo",
    "toy.x_hi",
    "toy.noise_std",
    "toy.seed",
    "toy.margin",
    "train.method",
    "train.lr",
    "train.steps",
    "train.batch_size",
    "train.kl_samples",
    "train.prior_samples",
    "train.prior",
    "train.anneal_fraction",
    "train.kl_scale",
    "train.data_free",
    "hypernet.architecture",
    "hypernet.hidden",
    "hypernet.noise_dim",
    "hypernet.noise_mode",
    "discriminator.pretrain_steps",
    "discriminator.steps_per_update",
    "discriminator.hidden",
    "discriminator.lr",
    "discriminator.batch_size",
    "discriminator.estimate_coords",
    "ensemble.size",
    "dropout.rate",
    "eval.samples",
    "eval.epsilons",
    "eval.attack_subset",
    "eval.diagnose",
];

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|(_, v)| v.as_str())
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.get(key) {
            None => Ok(None),
            Some((_, v)) => v.parse::<T>().map(Some).map_err(|e| Error::ConfigField {
                field: key.to_string(),
                msg: format!("cannot parse `{v}`: {e}"),
            }),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(raw) = self.raw(key) else { return Ok(None) };
        raw.split(',')
            .map(|p| {
                p.trim().parse::<T>().map_err(|e| Error::ConfigField {
                    field: key.to_string(),
                    msg: format!("cannot parse `{}`: {e}", p.trim()),
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

fn field(key: &str, msg: impl Into<String>) -> Error {
    Error::ConfigField {
        field: key.to_string(),
        msg: msg.into(),
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut map: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::ConfigSyntax {
                line: line_no,
                msg: format!("expected `section.key = value`, found `{content}`"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        if !key.contains('.') || key.split('.').any(str::is_empty) {
            return Err(Error::ConfigSyntax {
                line: line_no,
                msg: format!("key `{key}` is not of the form `section.key`"),
            });
        }
        if value.is_empty() {
            return Err(Error::ConfigSyntax {
                line: line_no,
                msg: format!("missing value for `{key}`"),
            });
        }
        if !KEYS.contains(&key) {
            return Err(Error::ConfigSyntax {
                line: line_no,
                msg: format!("unknown key `{key}`"),
            });
        }
        if let Some((first, _)) = map.get(key) {
            return Err(Error::ConfigSyntax {
                line: line_no,
                msg: format!("duplicate key `{key}` (first set on line {first})"),
            });
        }
        map.insert(key.to_string(), (line_no, value.to_string()));
    }
    resolve(&Entries { map })
}

fn resolve(e: &Entries) -> Result<ExperimentConfig> {
    let method: Method = e.get("train.method")?.unwrap_or(Method::Bbh);
    let data_kind = e.raw("data.kind").unwrap_or("mnist");
    if !matches!(data_kind, "mnist" | "toy") {
        return Err(field("data.kind", format!("expected mnist or toy, found `{data_kind}`")));
    }
    let method_name = method.to_string();
    let data_owner = format!("data.kind = {data_kind}");
    for key in e.map.keys() {
        let section = key.split('.').next().unwrap_or_default();
        if let Some(owner) = section_owner(section) {
            if owner != method_name && owner != data_owner {
                return Err(field(key, format!("only valid with {}", owner_phrase(owner))));
            }
        }
    }

    let mut cfg = ExperimentConfig::for_method(method);
    if let Some(o) = e.raw("experiment.output") {
        cfg.output = PathBuf::from(o);
    }
    let t = &mut cfg.train;
    if let Some(v) = e.get("experiment.seed")? {
        t.seed = v;
    }
    if let Some(v) = e.get("train.lr")? {
        t.lr = v;
    }
    if let Some(v) = e.get("train.steps")? {
        t.steps = v;
    }
    if let Some(v) = e.get("train.batch_size")? {
        t.batch_size = v;
    }
    if let Some(v) = e.get("train.kl_samples")? {
        t.kl_samples = v;
    }
    if let Some(v) = e.get("train.prior_samples")? {
        t.prior_samples = v;
    }
    if let Some(p) = e.raw("train.prior") {
        if p != "standard_normal" {
            return Err(field("train.prior", format!("only standard_normal is supported, found `{p}`")));
        }
    }
    if let Some(v) = e.get("train.anneal_fraction")? {
        t.anneal_fraction = v;
    }
    if let Some(s) = e.raw("train.kl_scale") {
        t.kl_scale = if s == "per_example" {
            KlScale::PerExample
        } else {
            KlScale::Fixed(e.get("train.kl_scale")?.unwrap_or_default())
        };
    }
    if let Some(v) = e.get("train.data_free")? {
        t.data_free = v;
    }

    let mut h = HypernetConfig::default();
    if let Some(v) = e.get("hypernet.architecture")? {
        h.architecture = v;
    }
    if let Some(v) = e.list("hypernet.hidden")? {
        h.hidden = v;
    }
    if let Some(v) = e.get("hypernet.noise_dim")? {
        h.noise_dim = v;
    }
    if let Some(v) = e.get("hypernet.noise_mode")? {
        h.noise_mode = v;
    }
    if h.noise_dim == 0 {
        return Err(field("hypernet.noise_dim", "must be positive"));
    }
    if h.hidden.contains(&0) {
        return Err(field("hypernet.hidden", "extents must be positive"));
    }
    t.hypernet = h;

    let mut d = DiscriminatorSchedule::default();
    if let Some(v) = e.get("discriminator.pretrain_steps")? {
        d.pretrain_steps = v;
    }
    if let Some(v) = e.get("discriminator.steps_per_update")? {
        d.steps_per_update = v;
    }
    if let Some(v) = e.list("discriminator.hidden")? {
        d.hidden = v;
    }
    if let Some(v) = e.get("discriminator.lr")? {
        d.lr = v;
    }
    if let Some(v) = e.get("discriminator.batch_size")? {
        d.batch = v;
    }
    if let Some(v) = e.get("discriminator.estimate_coords")? {
        d.estimate_coords = v;
    }
    if !(d.lr > 0.0) {
        return Err(field("discriminator.lr", "must be positive"));
    }
    if d.batch == 0 || d.estimate_coords == 0 {
        return Err(field("discriminator.batch_size", "batch and coordinate counts must be positive"));
    }
    t.discriminator = d;

    if let Some(v) = e.get("ensemble.size")? {
        t.ensemble_size = v;
    }
    if let Some(v) = e.get("dropout.rate")? {
        t.dropout_rate = v;
    }
    t.validate()?;

    cfg.network = match e.raw("network.kind").unwrap_or("mlp") {
        "mlp" => {
            if e.raw("network.classes").is_some() {
                return Err(field("network.classes", "only valid with network.kind = lenet"));
            }
            let default = if data_kind == "toy" { vec![1, 50, 1] } else { vec![784, 64, 10] };
            NetworkChoice::Mlp(e.list("network.extents")?.unwrap_or(default))
        }
        "lenet" => {
            if e.raw("network.extents").is_some() {
                return Err(field("network.extents", "only valid with network.kind = mlp"));
            }
            NetworkChoice::Lenet {
                classes: e.get("network.classes")?.unwrap_or(10),
            }
        }
        other => return Err(field("network.kind", format!("expected mlp or lenet, found `{other}`"))),
    };
    cfg.network.build().map_err(|err| field("network", err.to_string()))?;

    cfg.data = if data_kind == "toy" {
        let mut y = ToySource::default();
        if let Some(v) = e.get("toy.points")? {
            y.points = v;
        }
        if let Some(v) = e.get("toy.x_lo")? {
            y.x_lo = v;
        }
        if let Some(v) = e.get("toy.x_hi")? {
            y.x_hi = v;
        }
        if let Some(v) = e.get("toy.noise_std")? {
            y.noise_std = v;
        }
        if let Some(v) = e.get("toy.seed")? {
            y.seed = v;
        }
        if let Some(v) = e.get("toy.margin")? {
            y.margin = v;
        }
        if y.points == 0 {
            return Err(field("toy.points", "must be at least 1"));
        }
        if !(y.x_lo < y.x_hi) {
            return Err(field("toy.x_hi", "must exceed toy.x_lo"));
        }
        if !(y.noise_std >= 0.0) || !(y.margin >= 0.0) {
            return Err(field("toy.noise_std", "noise and margin must be non-negative"));
        }
        DataSource::Toy(y)
    } else {
        DataSource::Mnist(MnistSource {
            dir: e.raw("mnist.dir").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data/mnist")),
            train_subset: e.get("mnist.train_subset")?,
            test_subset: e.get("mnist.test_subset")?,
            outlier: e.raw("mnist.outlier").map(PathBuf::from),
        })
    };

    if let Some(v) = e.get("eval.samples")? {
        cfg.eval.samples = v;
    }
    if cfg.eval.samples == 0 {
        return Err(field("eval.samples", "must be at least 1"));
    }
    if let Some(v) = e.list::<f64>("eval.epsilons")? {
        if v.iter().any(|x| !(*x >= 0.0)) {
            return Err(field("eval.epsilons", "perturbation sizes must be non-negative"));
        }
        cfg.eval.epsilons = v;
    }
    cfg.eval.attack_subset = e.get("eval.attack_subset")?;
    if let Some(s) = e.raw("eval.diagnose") {
        cfg.eval.diagnose = s.to_string();
    }
    Ok(cfg)
}

fn owner_phrase(owner: &str) -> String {
    if owner.starts_with("data.") {
        owner.to_string()
    } else {
        format!("train.method = {owner}")
    }
}
