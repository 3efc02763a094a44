//! Run configuration: `key = value` lines with `#` comments, merged with
//! command-line overrides. The key table below is the single source for the
//! parser, the resolved-config writer and the CLI help text.

use std::fmt::{self, Display};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::arch::{Arch, NetConfig};
use crate::data::PhantomConfig;
use crate::error::{Error, Result};
use crate::losses::{DiceVariant, LossKind};
use crate::train::{DecisionRule, EvalSlices, TrainConfig};
use crate::{NUM_CLASSES, NUM_MODALITIES};

/// Which parameters score a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalParams {
    /// Moving-average shadow parameters.
    Ema,
    Raw,
}

impl FromStr for EvalParams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ema" => Ok(Self::Ema),
            "raw" => Ok(Self::Raw),
            _ => Err(Error::Invalid(format!("unknown parameter set `{s}` (expected ema|raw)"))),
        }
    }
}

impl Display for EvalParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ema => "ema",
            Self::Raw => "raw",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: Arch,
    /// Training settings, including the network and loss parameters.
    pub train: TrainConfig,
    /// Phantom settings; case `i` of a generated set uses seed `seed + i`.
    pub phantom: PhantomConfig,
    /// Number of cases `gen` writes.
    pub count: usize,
    /// `None` picks the rule matching the loss.
    pub decision: Option<DecisionRule>,
    pub eval_slices: EvalSlices,
    pub eval_params: EvalParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        let arch = Arch::ResUnet;
        RunConfig {
            arch,
            train: TrainConfig::new(NetConfig::new(arch), LossKind::Hdice),
            phantom: PhantomConfig::default(),
            count: 16,
            decision: None,
            eval_slices: EvalSlices::Tumor,
            eval_params: EvalParams::Ema,
        }
    }
}

pub struct Key {
    pub name: &'static str,
    pub doc: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> Result<(), String>,
}

impl Key {
    pub fn value(&self, cfg: &RunConfig) -> String {
        (self.get)(cfg)
    }
}

fn num<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: Display,
{
    s.parse().map_err(|e| format!("cannot parse `{s}`: {e}"))
}

fn list<T: FromStr, const N: usize>(s: &str) -> Result<[T; N], String>
where
    T::Err: Display,
{
    let items: Vec<T> = s.split([',', ';']).map(|x| num(x.trim())).collect::<Result<_, _>>()?;
    let n = items.len();
    items.try_into().map_err(|_| format!("expected {N} comma-separated values, got {n}"))
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn named<T: FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| match e {
        Error::Invalid(m) => m,
        other => other.to_string(),
    })
}

pub static KEYS: &[Key] = &[
    Key {
        name: "arch",
        doc: "network: fcn8s-vgg, fcn8s-resnet, unet, res-unet",
        get: |c| c.arch.to_string(),
        set: |c, v| {
            c.arch = named(v)?;
            (c.train.net.encoder, c.train.net.decoder) = c.arch.kinds();
            Ok(())
        },
    },
    Key {
        name: "loss",
        doc: "training loss: ce, wce, bootstrap, ss, dice, hdice",
        get: |c| c.train.loss.to_string(),
        set: |c, v| Ok(c.train.loss = named(v)?),
    },
    Key { name: "seed", doc: "seed for initialization, sampling and phantoms", get: |c| c.train.seed.to_string(), set: |c, v| {
        c.train.seed = num(v)?;
        c.phantom.seed = c.train.seed;
        Ok(())
    } },
    Key { name: "depth", doc: "number of 2x down-sampling stages", get: |c| c.train.net.depth.to_string(), set: |c, v| Ok(c.train.net.depth = num(v)?) },
    Key { name: "base_width", doc: "channels at the first stage", get: |c| c.train.net.base_width.to_string(), set: |c, v| Ok(c.train.net.base_width = num(v)?) },
    Key { name: "in_channels", doc: "input modalities (phantoms have 4)", get: |c| c.train.net.in_channels.to_string(), set: |c, v| Ok(c.train.net.in_channels = num(v)?) },
    Key { name: "num_classes", doc: "output classes (must be 5)", get: |c| c.train.net.num_classes.to_string(), set: |c, v| Ok(c.train.net.num_classes = num(v)?) },
    Key { name: "input_size", doc: "square slice extent, divisible by 2^depth", get: |c| c.train.net.input_size.to_string(), set: |c, v| Ok(c.train.net.input_size = num(v)?) },
    Key {
        name: "branch_weights",
        doc: "skip-add fusion weights, deepest branch first",
        get: |c| join(&c.train.net.branch_weights),
        set: |c, v| Ok(c.train.net.branch_weights = list(v)?),
    },
    Key { name: "lr", doc: "base learning rate", get: |c| c.train.base_lr.to_string(), set: |c, v| Ok(c.train.base_lr = num(v)?) },
    Key { name: "lr_decay", doc: "learning-rate multiplier per decay period", get: |c| c.train.lr_decay.to_string(), set: |c, v| Ok(c.train.lr_decay = num(v)?) },
    Key { name: "decay_every", doc: "iterations per decay period", get: |c| c.train.decay_every.to_string(), set: |c, v| Ok(c.train.decay_every = num(v)?) },
    Key { name: "ema_decay", doc: "parameter moving-average decay", get: |c| c.train.ema_decay.to_string(), set: |c, v| Ok(c.train.ema_decay = num(v)?) },
    Key { name: "adam_beta1", doc: "Adam first-moment decay", get: |c| c.train.adam.beta1.to_string(), set: |c, v| Ok(c.train.adam.beta1 = num(v)?) },
    Key { name: "adam_beta2", doc: "Adam second-moment decay", get: |c| c.train.adam.beta2.to_string(), set: |c, v| Ok(c.train.adam.beta2 = num(v)?) },
    Key { name: "adam_eps", doc: "Adam denominator offset", get: |c| c.train.adam.eps.to_string(), set: |c, v| Ok(c.train.adam.eps = num(v)?) },
    Key { name: "batch_per_worker", doc: "slices per worker per iteration", get: |c| c.train.batch_per_worker.to_string(), set: |c, v| Ok(c.train.batch_per_worker = num(v)?) },
    Key { name: "workers", doc: "data-parallel workers", get: |c| c.train.workers.to_string(), set: |c, v| Ok(c.train.workers = num(v)?) },
    Key { name: "iterations", doc: "training iterations", get: |c| c.train.max_iterations.to_string(), set: |c, v| Ok(c.train.max_iterations = num(v)?) },
    Key {
        name: "checkpoint_every",
        doc: "iterations between checkpoints (0: only at the end)",
        get: |c| c.train.checkpoint_every.to_string(),
        set: |c, v| Ok(c.train.checkpoint_every = num(v)?),
    },
    Key {
        name: "class_weights",
        doc: "weighted cross-entropy class weights, summing to 1",
        get: |c| join(&c.train.loss_params.class_weights),
        set: |c, v| Ok(c.train.loss_params.class_weights = list(v)?),
    },
    Key { name: "bootstrap_t", doc: "bootstrapping threshold on true-class probability", get: |c| c.train.loss_params.bootstrap_t.to_string(), set: |c, v| Ok(c.train.loss_params.bootstrap_t = num(v)?) },
    Key { name: "ss_lambda", doc: "sensitivity weight of the sensitivity-specificity loss", get: |c| c.train.loss_params.ss_lambda.to_string(), set: |c, v| Ok(c.train.loss_params.ss_lambda = num(v)?) },
    Key { name: "epsilon", doc: "smoothing constant of the dice and ss losses", get: |c| c.train.loss_params.epsilon.to_string(), set: |c, v| Ok(c.train.loss_params.epsilon = num(v)?) },
    Key {
        name: "dice_variant",
        doc: "dice form: printed (sum ab / sum (a+b)) or standard (2 sum ab / sum (a+b))",
        get: |c| c.train.loss_params.dice_variant.to_string(),
        set: |c, v| Ok(c.train.loss_params.dice_variant = named::<DiceVariant>(v)?),
    },
    Key {
        name: "hdice_weights",
        doc: "weights of the complete, core and enhancing dice terms",
        get: |c| join(&c.train.loss_params.hdice_weights),
        set: |c, v| Ok(c.train.loss_params.hdice_weights = list(v)?),
    },
    Key { name: "count", doc: "phantom cases written by gen", get: |c| c.count.to_string(), set: |c, v| Ok(c.count = num(v)?) },
    Key { name: "phantom_dims", doc: "phantom extent D,H,W", get: |c| join(&c.phantom.dims), set: |c, v| Ok(c.phantom.dims = list(v)?) },
    Key { name: "ratios", doc: "target class ratios for labels 0-4", get: |c| join(&c.phantom.ratios), set: |c, v| Ok(c.phantom.ratios = list(v)?) },
    Key { name: "tumor_count", doc: "tumors per phantom", get: |c| c.phantom.tumor_count.to_string(), set: |c, v| Ok(c.phantom.tumor_count = num(v)?) },
    Key { name: "size_jitter", doc: "relative spread of tumor volume", get: |c| c.phantom.size_jitter.to_string(), set: |c, v| Ok(c.phantom.size_jitter = num(v)?) },
    Key { name: "noise", doc: "standard deviation of phantom intensity noise", get: |c| c.phantom.noise.to_string(), set: |c, v| Ok(c.phantom.noise = num(v)?) },
    Key {
        name: "class_means",
        doc: "mean T1,T1c,T2,FLAIR intensity per label 0-4, rows separated by `;`",
        get: |c| c.phantom.class_means.iter().map(|r| join(r)).collect::<Vec<_>>().join(";"),
        set: |c, v| {
            let flat: [f64; NUM_CLASSES * NUM_MODALITIES] = list(v)?;
            for (row, chunk) in c.phantom.class_means.iter_mut().zip(flat.chunks(NUM_MODALITIES)) {
                row.copy_from_slice(chunk);
            }
            Ok(())
        },
    },
    Key {
        name: "decision",
        doc: "eval decision rule: auto (hierarchical for hdice), hierarchical, argmax",
        get: |c| c.decision.map_or_else(|| "auto".to_string(), |d| d.to_string()),
        set: |c, v| {
            c.decision = if v == "auto" { None } else { Some(named(v)?) };
            Ok(())
        },
    },
    Key { name: "eval_slices", doc: "slices scored by eval: tumor or all", get: |c| c.eval_slices.to_string(), set: |c, v| Ok(c.eval_slices = named(v)?) },
    Key { name: "eval_params", doc: "parameters scored by eval: ema or raw", get: |c| c.eval_params.to_string(), set: |c, v| Ok(c.eval_params = named(v)?) },
];

pub fn key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

fn config_err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config { key: key.to_string(), msg: msg.into() }
}

/// `(key, value)` pairs from config text. Blank lines and `#` comments are
/// skipped; later lines win.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(line, format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Defaults, then `text`, then `overrides`, validated.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in parse_lines(text)?.iter().chain(overrides) {
        let spec = key(k).ok_or_else(|| config_err(k, "unknown key"))?;
        (spec.set)(&mut cfg, v).map_err(|m| config_err(k, m))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Checks every invariant, naming the key at fault.
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let n = &t.net;
        let lp = &t.loss_params;
        let p = &self.phantom;
        let fail = |k: &str, m: String| Err(config_err(k, m));
        let unit = |k: &str, v: f64| if v > 0.0 && v <= 1.0 { Ok(()) } else { fail(k, format!("{v} outside (0, 1]")) };
        let half_open = |k: &str, v: f64| if (0.0..1.0).contains(&v) { Ok(()) } else { fail(k, format!("{v} outside [0, 1)")) };
        let positive = |k: &str, v: usize| if v > 0 { Ok(()) } else { fail(k, "must be positive".into()) };
        unit("lr", t.base_lr)?;
        unit("lr_decay", t.lr_decay)?;
        if !(t.ema_decay > 0.0 && t.ema_decay < 1.0) {
            return fail("ema_decay", format!("{} outside (0, 1)", t.ema_decay));
        }
        half_open("adam_beta1", t.adam.beta1)?;
        half_open("adam_beta2", t.adam.beta2)?;
        if !(t.adam.eps > 0.0) {
            return fail("adam_eps", "must be positive".into());
        }
        if t.decay_every == 0 {
            return fail("decay_every", "must be positive".into());
        }
        positive("batch_per_worker", t.batch_per_worker)?;
        positive("workers", t.workers)?;
        positive("depth", n.depth)?;
        positive("base_width", n.base_width)?;
        if n.in_channels != NUM_MODALITIES {
            return fail("in_channels", format!("phantom volumes have {NUM_MODALITIES} channels, got {}", n.in_channels));
        }
        if n.num_classes != NUM_CLASSES {
            return fail("num_classes", format!("must be {NUM_CLASSES}, got {}", n.num_classes));
        }
        if n.depth > 12 || n.input_size == 0 || n.input_size % (1 << n.depth) != 0 {
            return fail("input_size", format!("{} is not a positive multiple of 2^depth", n.input_size));
        }
        if n.branch_weights.iter().any(|w| !w.is_finite()) {
            return fail("branch_weights", "must be finite".into());
        }
        let sum: f64 = lp.class_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || lp.class_weights.iter().any(|w| !(*w >= 0.0)) {
            return fail("class_weights", format!("must be non-negative and sum to 1, sum is {sum}"));
        }
        unit("bootstrap_t", lp.bootstrap_t)?;
        if !(0.0..=1.0).contains(&lp.ss_lambda) {
            return fail("ss_lambda", format!("{} outside [0, 1]", lp.ss_lambda));
        }
        if !(lp.epsilon > 0.0) {
            return fail("epsilon", "must be positive".into());
        }
        if lp.hdice_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return fail("hdice_weights", "must be finite and non-negative".into());
        }
        if p.dims.iter().any(|&d| d == 0) {
            return fail("phantom_dims", "must be positive".into());
        }
        if p.dims[1] % (1 << n.depth) != 0 || p.dims[2] % (1 << n.depth) != 0 {
            return fail("phantom_dims", format!("slice extent {}x{} not divisible by 2^depth", p.dims[1], p.dims[2]));
        }
        if p.ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return fail("ratios", "must be positive".into());
        }
        positive("tumor_count", p.tumor_count)?;
        half_open("size_jitter", p.size_jitter)?;
        if !(p.noise >= 0.0 && p.noise.is_finite()) {
            return fail("noise", "must be finite and non-negative".into());
        }
        if p.class_means.iter().flatten().any(|m| !(*m > 0.0 && m.is_finite())) {
            return fail("class_means", "must be positive".into());
        }
        positive("count", self.count)?;
        // Backstops for anything the component types check beyond the above.
        self.train.validate().map_err(|e| config_err("train", e.to_string()))?;
        self.phantom.validate().map_err(|e| config_err("phantom", e.to_string()))
    }

    /// Every key with its resolved value, preceded by its description.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            out.push_str(&format!("# {}\n{} = {}\n", k.doc, k.name, k.value(self)));
        }
        out
    }

    /// The experimental cell a run belongs to: architecture and loss.
    pub fn fingerprint(&self) -> String {
        format!("{}/{}", self.arch, self.train.loss)
    }

    /// SHA-256 of the resolved text; equal digests mean identical settings.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn decision_rule(&self) -> DecisionRule {
        self.decision.unwrap_or_else(|| DecisionRule::for_loss(self.train.loss))
    }
}
