//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::process::ExitCode;
use std::time::Instant;

use hierseg::arch::{build_network, Arch, NetConfig, ParamStore};
use hierseg::autodiff::{bilinear_kernel, finite_diff_check, BilinearSpec, Graph, Mode, Var};
use hierseg::classifier::{hierarchical_decide, RegionDecision};
use hierseg::data::{
    generate_phantom, normalize, read_bvol, slice_and_filter, write_bvol, LabelVolume, PhantomConfig, Slice, Volume,
};
use hierseg::losses::{
    bootstrap_loss, dice_loss, hdice_loss, softmax_ce, ss_loss, weighted_ce, DiceVariant, LossKind,
};
use hierseg::metrics::{eval_table, region_masks, region_scores, volume_table, Confusion, RegionTable};
use hierseg::train::{
    adam_step, assemble_batch, evaluate_volume, lr_at, read_checkpoint, sample_batch, worker_gradients,
    write_checkpoint, Checkpoint, DecisionRule, EvalSlices, GradMap, TrainConfig, TrainState, Trainer,
};
use hierseg::{Tensor, NUM_CLASSES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-6;
const GRAD_INSTANCES: usize = 20;
const ORACLE_TOL: f64 = 1e-10;
const ORACLE_INSTANCES: usize = 100;
const HAND_TOL: f64 = 1e-12;
const EPS: f64 = 1e-5;
const BILINEAR_TOL: f64 = 1e-6;
const CE_ENHANCING_MAX: f64 = 0.05;
const ENHANCING_MIN: f64 = 0.3;
const COMPLETE_MIN: f64 = 0.85;
const WORKER_TOL: f64 = 1e-5;

struct Gate {
    failed: usize,
}

impl Gate {
    fn line(&mut self, name: &str, pass: bool, detail: impl AsRef<str>) {
        if !pass {
            self.failed += 1;
        }
        println!("{} {name}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn t64(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, v).unwrap()
}

fn random_labels(r: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| r.random_range(0..NUM_CLASSES as u8)).collect()
}

/// Rows of 5 positive probabilities summing to 1, laid out `(1, 5, n)`.
fn random_class_probs(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = uniform(r, n * NUM_CLASSES, 0.02, 1.0);
    let mut out = vec![0.0; n * NUM_CLASSES];
    for i in 0..n {
        let s: f64 = (0..NUM_CLASSES).map(|k| raw[k * n + i]).sum();
        for k in 0..NUM_CLASSES {
            out[k * n + i] = raw[k * n + i] / s;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Gradient suite

/// A fixed 1x1 projection to 5 channels followed by cross-entropy on fixed
/// labels: turns any `(N, C, H, W)` node into a non-linear scalar.
struct Probe {
    weight: Tensor<f64>,
    labels: Vec<u8>,
}

impl Probe {
    fn new(r: &mut ChaCha8Rng, channels: usize, pixels: usize) -> Self {
        Probe {
            weight: t64(&[NUM_CLASSES, channels, 1, 1], uniform(r, NUM_CLASSES * channels, -1.0, 1.0)),
            labels: random_labels(r, pixels),
        }
    }

    fn apply(&self, g: &mut Graph<f64>, y: Var) -> hierseg::Result<Var> {
        let w = g.constant(self.weight.clone());
        let logits = g.conv2d(y, w, 1, 0)?;
        softmax_ce(g, logits, &self.labels)
    }
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> hierseg::Result<Var>>;

/// One random instance of an op or loss: inputs and a scalar-valued builder.
fn gradient_case(name: &str, r: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Builder) {
    let x4 = |r: &mut ChaCha8Rng, c: usize| t64(&[1, c, 4, 4], uniform(r, c * 16, -2.0, 2.0));
    match name {
        "conv2d" => {
            let (x, k) = (x4(r, 2), t64(&[3, 2, 3, 3], uniform(r, 54, -1.0, 1.0)));
            let probe = Probe::new(r, 3, 16);
            (vec![x, k], Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], 1, 1)?;
                probe.apply(g, y)
            }))
        }
        "conv2d_strided" => {
            let (x, k) = (x4(r, 2), t64(&[3, 2, 3, 3], uniform(r, 54, -1.0, 1.0)));
            let probe = Probe::new(r, 3, 4);
            (vec![x, k], Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], 2, 1)?;
                probe.apply(g, y)
            }))
        }
        "conv_transpose2d" => {
            let x = t64(&[1, 2, 2, 2], uniform(r, 8, -2.0, 2.0));
            let k = t64(&[2, 2, 4, 4], uniform(r, 64, -1.0, 1.0));
            let probe = Probe::new(r, 2, 16);
            (vec![x, k], Box::new(move |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], 2, 1)?;
                probe.apply(g, y)
            }))
        }
        "bias_add" => {
            let (x, b) = (x4(r, 3), t64(&[3], uniform(r, 3, -1.0, 1.0)));
            let probe = Probe::new(r, 3, 16);
            (vec![x, b], Box::new(move |g, v| {
                let y = g.bias_add(v[0], v[1])?;
                probe.apply(g, y)
            }))
        }
        "maxpool2d" => {
            let x = x4(r, 2);
            let probe = Probe::new(r, 2, 4);
            (vec![x], Box::new(move |g, v| {
                let y = g.maxpool2d(v[0], 2, 2)?;
                probe.apply(g, y)
            }))
        }
        "batch_norm" => {
            let x = x4(r, 3);
            let (gamma, beta) = (t64(&[3], uniform(r, 3, 0.5, 1.5)), t64(&[3], uniform(r, 3, -0.5, 0.5)));
            let probe = Probe::new(r, 3, 16);
            (vec![x, gamma, beta], Box::new(move |g, v| {
                let y = g.batch_norm(v[0], v[1], v[2], 1e-5, Mode::Train, None)?;
                probe.apply(g, y)
            }))
        }
        "relu" => {
            let x = x4(r, 2);
            let probe = Probe::new(r, 2, 16);
            (vec![x], Box::new(move |g, v| {
                let y = g.relu(v[0]);
                probe.apply(g, y)
            }))
        }
        "add" => {
            let (a, b) = (x4(r, 2), x4(r, 2));
            let probe = Probe::new(r, 2, 16);
            (vec![a, b], Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                probe.apply(g, y)
            }))
        }
        "scale" => {
            let x = x4(r, 2);
            let factor = r.random_range(-3.0..3.0);
            let probe = Probe::new(r, 2, 16);
            (vec![x], Box::new(move |g, v| {
                let y = g.scale(v[0], factor);
                probe.apply(g, y)
            }))
        }
        "concat_channels" => {
            let (a, b) = (x4(r, 2), x4(r, 1));
            let probe = Probe::new(r, 3, 16);
            (vec![a, b], Box::new(move |g, v| {
                let y = g.concat_channels(v[0], v[1])?;
                probe.apply(g, y)
            }))
        }
        "slice_channels" => {
            let x = x4(r, 4);
            let probe = Probe::new(r, 2, 16);
            (vec![x], Box::new(move |g, v| {
                let y = g.slice_channels(v[0], 1, 3)?;
                probe.apply(g, y)
            }))
        }
        "softmax_channels" => {
            let x = x4(r, 5);
            let probe = Probe::new(r, 5, 16);
            (vec![x], Box::new(move |g, v| {
                let y = g.softmax_channels(v[0])?;
                probe.apply(g, y)
            }))
        }
        "hierarchy" => {
            let x = x4(r, 5);
            let probe = Probe::new(r, 3, 16);
            (vec![x], Box::new(move |g, v| {
                let q = g.softmax_channels(v[0])?;
                let y = g.hierarchy(q)?;
                probe.apply(g, y)
            }))
        }
        "sum" | "mean" => {
            let (x, k) = (x4(r, 2), t64(&[1, 2, 3, 3], uniform(r, 18, -1.0, 1.0)));
            let mean = name == "mean";
            (vec![x, k], Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], 1, 1)?;
                let y = g.relu(y);
                Ok(if mean { g.mean(y) } else { g.sum(y) })
            }))
        }
        "softmax_ce" => {
            let (x, l) = (x4(r, 5), random_labels(r, 16));
            (vec![x], Box::new(move |g, v| softmax_ce(g, v[0], &l)))
        }
        "weighted_ce" => {
            let (x, l) = (x4(r, 5), random_labels(r, 16));
            (vec![x], Box::new(move |g, v| weighted_ce(g, v[0], &l, &[0.1, 0.35, 0.1, 0.1, 0.35])))
        }
        "bootstrap_loss" => {
            let (x, l) = (x4(r, 5), random_labels(r, 16));
            (vec![x], Box::new(move |g, v| {
                let p = g.softmax_channels(v[0])?;
                Ok(bootstrap_loss(g, p, &l, 0.9)?.0)
            }))
        }
        "ss_loss" | "dice_loss" | "dice_loss_standard" => {
            let x = x4(r, 5);
            let mask: Vec<bool> = (0..16).map(|_| r.random_bool(0.4)).collect();
            let class = r.random_range(0..NUM_CLASSES);
            let kind = name.to_string();
            (vec![x], Box::new(move |g, v| {
                let q = g.softmax_channels(v[0])?;
                let p = g.slice_channels(q, class, class + 1)?;
                match kind.as_str() {
                    "ss_loss" => ss_loss(g, p, &mask, 0.5, EPS),
                    "dice_loss" => dice_loss(g, p, &mask, EPS, DiceVariant::Printed),
                    _ => dice_loss(g, p, &mask, EPS, DiceVariant::Standard),
                }
            }))
        }
        "hdice_loss" => {
            let (x, l) = (x4(r, 5), random_labels(r, 16));
            (vec![x], Box::new(move |g, v| {
                let q = g.softmax_channels(v[0])?;
                let h = g.hierarchy(q)?;
                Ok(hdice_loss(g, h, &l, EPS, DiceVariant::Printed, [1.0 / 3.0; 3])?.0)
            }))
        }
        other => panic!("no gradient case for {other}"),
    }
}

const GRADIENT_CASES: &[&str] = &[
    "conv2d",
    "conv2d_strided",
    "conv_transpose2d",
    "bias_add",
    "maxpool2d",
    "batch_norm",
    "relu",
    "add",
    "scale",
    "concat_channels",
    "slice_channels",
    "softmax_channels",
    "hierarchy",
    "sum",
    "mean",
    "softmax_ce",
    "weighted_ce",
    "bootstrap_loss",
    "ss_loss",
    "dice_loss",
    "dice_loss_standard",
    "hdice_loss",
];

fn gradient_suite(gate: &mut Gate) {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    for &name in GRADIENT_CASES {
        for _ in 0..GRAD_INSTANCES {
            let (inputs, build) = gradient_case(name, &mut r);
            let err = finite_diff_check(|g, v| build(g, v), &inputs, GRAD_STEP).unwrap_or(f64::INFINITY);
            if err > worst.0 {
                worst = (err, name);
            }
            if !(err < GRAD_TOL) {
                failures.push(format!("{name} {err:.2e}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    gate.line(
        "gradient suite",
        failures.is_empty() && secs < 60.0,
        format!(
            "{} ops/losses x {GRAD_INSTANCES} instances, worst rel err {:.2e} ({}) < {GRAD_TOL:e}, {secs:.1}s < 60s{}",
            GRADIENT_CASES.len(),
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    );
}

// ---------------------------------------------------------------------------
// Loss oracle: straight scalar transcriptions of the printed formulas.

fn oracle_ce(logits: &[f64], labels: &[u8], weights: Option<&[f64; 5]>) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for i in 0..n {
        let y = labels[i] as usize;
        let denom: f64 = (0..5).map(|j| logits[j * n + i].exp()).sum();
        let w = weights.map_or(1.0, |w| w[y]);
        total += -w * (logits[y * n + i].exp() / denom).ln();
    }
    total / n as f64
}

fn oracle_bootstrap(probs: &[f64], labels: &[u8], t: f64) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    let mut kept = 0usize;
    for i in 0..n {
        let p = probs[labels[i] as usize * n + i];
        if p < t {
            total += -p.ln();
            kept += 1;
        }
    }
    if kept == 0 {
        0.0
    } else {
        total / kept as f64
    }
}

fn oracle_ss(p: &[f64], r: &[f64], lambda: f64, eps: f64) -> f64 {
    let mut sens_num = 0.0;
    let mut sens_den = 0.0;
    let mut spec_num = 0.0;
    let mut spec_den = 0.0;
    for i in 0..p.len() {
        sens_num += (r[i] - p[i]).powi(2) * r[i];
        sens_den += r[i];
        spec_num += (r[i] - p[i]).powi(2) * (1.0 - r[i]);
        spec_den += 1.0 - r[i];
    }
    lambda * sens_num / (sens_den + eps) + (1.0 - lambda) * spec_num / (spec_den + eps)
}

/// `1 - (Σab+ε)/(Σ(a+b)+ε) - (Σcd+ε)/(Σ(c+d)+ε)`, or with the conventional
/// factor 2 and averaging for the standard variant.
fn oracle_pair_dice(a: &[f64], b: &[f64], c: &[f64], d: &[f64], eps: f64, standard: bool) -> f64 {
    let mut ab = 0.0;
    let mut a_b = 0.0;
    let mut cd = 0.0;
    let mut c_d = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        a_b += a[i] + b[i];
        cd += c[i] * d[i];
        c_d += c[i] + d[i];
    }
    if standard {
        1.0 - 0.5 * ((2.0 * ab + eps) / (a_b + eps) + (2.0 * cd + eps) / (c_d + eps))
    } else {
        1.0 - (ab + eps) / (a_b + eps) - (cd + eps) / (c_d + eps)
    }
}

fn oracle_dice(p: &[f64], r: &[f64], eps: f64, standard: bool) -> f64 {
    let pc: Vec<f64> = p.iter().map(|x| 1.0 - x).collect();
    let rc: Vec<f64> = r.iter().map(|x| 1.0 - x).collect();
    oracle_pair_dice(p, r, &pc, &rc, eps, standard)
}

/// `(DL0, DL1, DL2, DL_H)` from class probabilities laid out `(5, n)`.
fn oracle_hdice(q: &[f64], labels: &[u8], eps: f64) -> [f64; 4] {
    let n = labels.len();
    let at = |k: usize, i: usize| q[k * n + i];
    let p0: Vec<f64> = (0..n).map(|i| at(1, i) + at(2, i) + at(3, i) + at(4, i)).collect();
    let p1: Vec<f64> = (0..n).map(|i| at(1, i) + at(3, i) + at(4, i)).collect();
    let p2: Vec<f64> = (0..n).map(|i| at(4, i)).collect();
    let ind = |f: fn(u8) -> bool| labels.iter().map(|&l| if f(l) { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let r0 = ind(|l| (1..=4).contains(&l));
    let r1 = ind(|l| l == 1 || l == 3 || l == 4);
    let r2 = ind(|l| l == 4);
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f64>>();
    let ones = vec![1.0; n];
    let dl0 = oracle_pair_dice(&p0, &r0, &diff(&ones, &p0), &diff(&ones, &r0), eps, false);
    let dl1 = oracle_pair_dice(&p1, &r1, &diff(&p0, &p1), &diff(&r0, &r1), eps, false);
    let dl2 = oracle_pair_dice(&p2, &r2, &diff(&p1, &p2), &diff(&r1, &r2), eps, false);
    [dl0, dl1, dl2, (dl0 + dl1 + dl2) / 3.0]
}

fn scalar(f: impl FnOnce(&mut Graph<f64>) -> hierseg::Result<Var>) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).item()
}

fn engine_ce(logits: &[f64], labels: &[u8], weights: Option<&[f64; 5]>) -> f64 {
    let n = labels.len();
    scalar(|g| {
        let x = g.constant(t64(&[1, 5, n], logits.to_vec()));
        match weights {
            Some(w) => weighted_ce(g, x, labels, w),
            None => softmax_ce(g, x, labels),
        }
    })
}

fn engine_bootstrap(probs: &[f64], labels: &[u8], t: f64) -> f64 {
    let n = labels.len();
    scalar(|g| {
        let p = g.constant(t64(&[1, 5, n], probs.to_vec()));
        Ok(bootstrap_loss(g, p, labels, t)?.0)
    })
}

fn engine_binary(p: &[f64], r: &[f64], f: impl FnOnce(&mut Graph<f64>, Var, &[bool]) -> hierseg::Result<Var>) -> f64 {
    let mask: Vec<bool> = r.iter().map(|&x| x == 1.0).collect();
    scalar(|g| {
        let v = g.constant(t64(&[p.len()], p.to_vec()));
        f(g, v, &mask)
    })
}

fn engine_hdice(q: &[f64], labels: &[u8], eps: f64) -> [f64; 4] {
    let n = labels.len();
    let mut g = Graph::new();
    let p = g.constant(t64(&[1, 5, n], q.to_vec()));
    let h = g.hierarchy(p).unwrap();
    let (v, parts) = hdice_loss(&mut g, h, labels, eps, DiceVariant::Printed, [1.0 / 3.0; 3]).unwrap();
    [parts.dl[0], parts.dl[1], parts.dl[2], g.value(v).item()]
}

fn loss_oracle_suite(gate: &mut Gate) {
    let mut r = rng(202);
    let mut worst = [0.0f64; 7];
    let names = ["ce", "wce", "bootstrap", "ss", "dice", "dice-standard", "hdice"];
    let default_weights = [0.1, 0.35, 0.1, 0.1, 0.35];
    for _ in 0..ORACLE_INSTANCES {
        let n = r.random_range(1..=16usize);
        let logits = uniform(&mut r, 5 * n, -3.0, 3.0);
        let labels = random_labels(&mut r, n);
        let q = random_class_probs(&mut r, n);
        let p = uniform(&mut r, n, 0.0, 1.0);
        let mask: Vec<f64> = (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let t = r.random_range(0.05..1.0);
        let lambda = r.random_range(0.0..=1.0);
        let eps = [1e-5, 1e-3, 0.1][r.random_range(0..3usize)];
        let diffs = [
            (engine_ce(&logits, &labels, None) - oracle_ce(&logits, &labels, None)).abs(),
            (engine_ce(&logits, &labels, Some(&default_weights)) - oracle_ce(&logits, &labels, Some(&default_weights))).abs(),
            (engine_bootstrap(&q, &labels, t) - oracle_bootstrap(&q, &labels, t)).abs(),
            (engine_binary(&p, &mask, |g, v, m| ss_loss(g, v, m, lambda, eps)) - oracle_ss(&p, &mask, lambda, eps)).abs(),
            (engine_binary(&p, &mask, |g, v, m| dice_loss(g, v, m, eps, DiceVariant::Printed))
                - oracle_dice(&p, &mask, eps, false))
            .abs(),
            (engine_binary(&p, &mask, |g, v, m| dice_loss(g, v, m, eps, DiceVariant::Standard))
                - oracle_dice(&p, &mask, eps, true))
            .abs(),
            {
                let e = engine_hdice(&q, &labels, eps);
                let o = oracle_hdice(&q, &labels, eps);
                e.iter().zip(&o).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            },
        ];
        for (w, d) in worst.iter_mut().zip(diffs) {
            *w = w.max(if d.is_nan() { f64::INFINITY } else { d });
        }
    }
    let ok = worst.iter().all(|&w| w < ORACLE_TOL);
    let detail: Vec<String> = names.iter().zip(&worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    gate.line(
        "loss oracle (random)",
        ok,
        format!("{ORACLE_INSTANCES} inputs per loss, max |engine - oracle| < {ORACLE_TOL:e}: {}", detail.join(", ")),
    );

    // Hand-derived closed forms.
    let e = EPS;
    let h = (1.0 + e) / (2.0 + e);
    let fixed: Vec<(&str, f64, f64)> = vec![
        ("ce zero logits", engine_ce(&[0.0; 5], &[3], None), 5f64.ln()),
        ("ce (2,0,0,0,0)", engine_ce(&[2.0, 0.0, 0.0, 0.0, 0.0], &[0], None), -(2f64.exp() / (2f64.exp() + 4.0)).ln()),
        ("wce label 0", engine_ce(&[0.0; 5], &[0], Some(&default_weights)), 0.1 * 5f64.ln()),
        ("wce label 1", engine_ce(&[0.0; 5], &[1], Some(&default_weights)), 0.35 * 5f64.ln()),
        (
            "bootstrap (0.95,0.5,0.8)",
            engine_bootstrap(&[0.95, 0.5, 0.8, 0.05, 0.5, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &[0, 0, 0], 0.9),
            (-(0.5f64.ln()) - 0.8f64.ln()) / 2.0,
        ),
        (
            "ss r=(1,0) p=(.5,.5)",
            engine_binary(&[0.5, 0.5], &[1.0, 0.0], |g, v, m| ss_loss(g, v, m, 0.5, e)),
            0.5 * 0.25 / (1.0 + e) + 0.5 * 0.25 / (1.0 + e),
        ),
        (
            "ss sensitivity only",
            engine_binary(&[0.0, 0.0], &[1.0, 1.0], |g, v, m| ss_loss(g, v, m, 1.0, e)),
            2.0 / (2.0 + e),
        ),
        (
            "dice p=r=(1,1,0,0)",
            engine_binary(&[1.0, 1.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0], |g, v, m| dice_loss(g, v, m, e, DiceVariant::Printed)),
            1.0 - 2.0 * (2.0 + e) / (4.0 + e),
        ),
        (
            "dice total mismatch",
            engine_binary(&[1.0; 4], &[0.0; 4], |g, v, m| dice_loss(g, v, m, e, DiceVariant::Printed)),
            1.0 - 2.0 * e / (4.0 + e),
        ),
        (
            "dice all positive",
            engine_binary(&[1.0; 4], &[1.0; 4], |g, v, m| dice_loss(g, v, m, e, DiceVariant::Printed)),
            1.0 - (4.0 + e) / (8.0 + e) - 1.0,
        ),
    ];
    let mut hand: Vec<(String, f64, f64)> = fixed.into_iter().map(|(n, a, b)| (n.to_string(), a, b)).collect();
    let edema = engine_hdice(&[0.0, 0.0, 1.0, 0.0, 0.0], &[2], e);
    let background = engine_hdice(&[1.0, 0.0, 0.0, 0.0, 0.0], &[0], e);
    let missed = engine_hdice(&[1.0, 0.0, 0.0, 0.0, 0.0], &[4], e);
    let tiny = e / (1.0 + e);
    let hdice_cases = [
        ("hdice edema", edema, [-h, -h, -1.0, (-2.0 * h - 1.0) / 3.0]),
        ("hdice background", background, [-h, -1.0, -1.0, (-h - 2.0) / 3.0]),
        ("hdice missed enhancing", missed, [1.0 - 2.0 * tiny, -tiny, -tiny, (1.0 - 4.0 * tiny) / 3.0]),
    ];
    for (name, got, want) in hdice_cases {
        for (k, part) in ["DL0", "DL1", "DL2", "DL_H"].iter().enumerate() {
            hand.push((format!("{name} {part}"), got[k], want[k]));
        }
    }
    let worst_hand = hand.iter().map(|(_, a, b)| (a - b).abs()).fold(0.0, f64::max);
    let bad: Vec<&str> = hand.iter().filter(|(_, a, b)| !((a - b).abs() < HAND_TOL)).map(|(n, _, _)| n.as_str()).collect();
    gate.line(
        "loss oracle (hand examples)",
        bad.is_empty(),
        format!("{} closed forms, max diff {worst_hand:.1e} < {HAND_TOL:e}{}", hand.len(), if bad.is_empty() { String::new() } else { format!("; failing: {}", bad.join(", ")) }),
    );
    println!(
        "     note: perfect edema pixel DL_H = {:.10} (exactly -2/3 - eps/6); distance from -2/3 is {:.3e}",
        edema[3],
        (edema[3] + 2.0 / 3.0).abs()
    );
}

// ---------------------------------------------------------------------------
// Classifier grid

/// Which of the four printed inequality sets holds, in exact integer
/// arithmetic on twentieths; `None` if none or several do.
fn brute_force_region(i: i64, j: i64, k: i64) -> Option<RegionDecision> {
    let tumor = 2 * i > 20;
    let non_tumor = 2 * i < 20;
    let core = 2 * j > i;
    let edema = 2 * j < i;
    let enh = 2 * k > j;
    let not_enh = 2 * k < j;
    let sets = [
        (non_tumor, RegionDecision::NonTumor),
        (tumor && edema, RegionDecision::EdemaOnly),
        (tumor && core && not_enh, RegionDecision::CoreNonEnhancing),
        (tumor && core && enh, RegionDecision::Enhancing),
    ];
    let hits: Vec<RegionDecision> = sets.iter().filter(|(on, _)| *on).map(|(_, d)| *d).collect();
    (hits.len() == 1).then(|| hits[0])
}

fn classifier_suite(gate: &mut Gate) {
    let start = Instant::now();
    let mut checked = 0;
    let mut mismatches = Vec::new();
    let mut nesting_ok = true;
    let mut points = 0;
    for i in 0..=20i64 {
        for j in 0..=i {
            for k in 0..=j {
                points += 1;
                let d = hierarchical_decide(i as f64 / 20.0, j as f64 / 20.0, k as f64 / 20.0).unwrap();
                let [c, t, e] = d.masks();
                nesting_ok &= (!e || t) && (!t || c);
                let tie = 2 * i == 20 || (2 * i > 20 && 2 * j == i) || (2 * i > 20 && 2 * j > i && 2 * k == j);
                if tie {
                    continue;
                }
                checked += 1;
                if brute_force_region(i, j, k) != Some(d) {
                    mismatches.push(format!("({i},{j},{k})/20"));
                }
            }
        }
    }
    let ms = start.elapsed().as_secs_f64() * 1e3;
    gate.line(
        "classifier grid",
        mismatches.is_empty() && nesting_ok && ms < 1000.0,
        format!(
            "{checked} non-tie points of {points} match the inequality sets, masks nested: {nesting_ok}, {ms:.1}ms < 1000ms{}",
            if mismatches.is_empty() { String::new() } else { format!("; mismatches: {}", mismatches.join(" ")) }
        ),
    );
}

// ---------------------------------------------------------------------------
// Metrics

fn brute_force_scores(pred: &[u8], truth: &[u8], region: usize) -> [f64; 4] {
    let inside = |l: u8| match region {
        0 => l != 0,
        1 => l == 1 || l == 3 || l == 4,
        _ => l == 4,
    };
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        match (inside(p), inside(t)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { if tp + fp + fn_ == 0 { 1.0 } else { 0.0 } } else { a as f64 / b as f64 };
    [ratio(tp, tp + fp), ratio(tp, tp + fn_), ratio(tp, tp + fp + fn_), ratio(2 * tp, 2 * tp + fp + fn_)]
}

fn metrics_suite(gate: &mut Gate) {
    let mut r = rng(303);
    let mut exact = true;
    let mut ordered = true;
    for _ in 0..100 {
        let n = r.random_range(1..=256usize);
        // Skewed toward background so empty regions occur.
        let draw = |r: &mut ChaCha8Rng| -> Vec<u8> {
            (0..n).map(|_| if r.random_bool(0.5) { 0 } else { r.random_range(0..NUM_CLASSES as u8) }).collect()
        };
        let (pred, truth) = (draw(&mut r), draw(&mut r));
        let table = volume_table(&region_masks(&pred).unwrap(), &truth).unwrap();
        for k in 0..3 {
            let s = table.0[k];
            exact &= s.as_array() == brute_force_scores(&pred, &truth, k);
            ordered &= s.miou <= s.dice;
        }
    }
    let s = region_scores(&Confusion { tp: 3, fp: 3, fn_: 1, tn: 0 });
    let example = s.as_array() == [0.5, 0.75, 3.0 / 7.0, 0.6];
    gate.line(
        "metrics",
        exact && ordered && example,
        format!(
            "100 random maps equal brute force exactly: {exact}, miou <= dice: {ordered}, (3,3,1) -> ({}, {}, {:.5}, {}): {example}",
            s.precision, s.recall, s.miou, s.dice
        ),
    );
}

// ---------------------------------------------------------------------------
// Bilinear upsampling

fn bilinear_suite(gate: &mut Gate) {
    let mut worst = 0.0f64;
    let mut interior = 0usize;
    let value = 1.7;
    for stride in 1..=4usize {
        let spec = BilinearSpec::for_factor(stride);
        let pad = spec.same_padding();
        let (c, side) = (2usize, 6usize);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, c, side, side], value as f32));
        let k = g.constant(bilinear_kernel(spec, c).unwrap());
        let y = g.conv_transpose2d(x, k, stride, pad).unwrap();
        let out = g.value(y);
        let (_, _, oh, ow) = out.nchw().unwrap();
        // Output pixel o reads inputs i with 0 <= o + pad - i*stride < K;
        // it is interior when all of them exist.
        let covered = |o: usize| {
            let top = (o + pad) as i64;
            let (s, k) = (stride as i64, spec.size as i64);
            let first = (top - k + 1).div_euclid(s) + i64::from((top - k + 1).rem_euclid(s) != 0);
            first >= 0 && top / s < side as i64
        };
        for ch in 0..c {
            for yy in (0..oh).filter(|&o| covered(o)) {
                for xx in (0..ow).filter(|&o| covered(o)) {
                    let v = out.data()[(ch * oh + yy) * ow + xx] as f64;
                    worst = worst.max((v - value).abs());
                    interior += 1;
                }
            }
        }
    }
    gate.line(
        "bilinear upsampling",
        interior > 0 && worst < BILINEAR_TOL,
        format!("strides 1-4, K = 2*stride, {interior} interior pixels, max |out - {value}| = {worst:.1e} < {BILINEAR_TOL:e}"),
    );
}

// ---------------------------------------------------------------------------
// Data

fn phantom(seed: u64) -> (Volume, LabelVolume) {
    generate_phantom(&PhantomConfig { seed, ..Default::default() }).unwrap()
}

fn filter_suite(gate: &mut Gate) {
    let (mut before, mut after) = ([0usize; 2], [0usize; 2]);
    let mut each = true;
    for seed in 0..16 {
        let (v, l) = phantom(seed);
        let all = l.histogram();
        let kept = slice_and_filter(&v, &l).unwrap();
        let mut hist = [0usize; NUM_CLASSES];
        for s in &kept.slices {
            for &x in &s.labels {
                hist[x as usize] += 1;
            }
        }
        let tumor = |h: &[usize; NUM_CLASSES]| h[1..].iter().sum::<usize>();
        each &= (hist[0] as f64 / tumor(&hist) as f64) < (all[0] as f64 / tumor(&all) as f64);
        before[0] += all[0];
        before[1] += tumor(&all);
        after[0] += hist[0];
        after[1] += tumor(&hist);
    }
    let (rb, ra) = (before[0] as f64 / before[1] as f64, after[0] as f64 / after[1] as f64);
    gate.line(
        "slice filter",
        each && ra < rb,
        format!("background:tumor {rb:.1}:1 -> {ra:.1}:1 over 16 phantoms, strictly lower in every volume: {each}"),
    );
}

fn pool(seeds: std::ops::Range<u64>) -> Vec<Slice> {
    let mut out = Vec::new();
    for s in seeds {
        let (v, l) = phantom(s);
        out.extend(slice_and_filter(&normalize(&v), &l).unwrap().slices);
    }
    out
}

// ---------------------------------------------------------------------------
// Training

fn small_cfg(loss: LossKind, workers: usize) -> TrainConfig {
    let net = NetConfig { base_width: 4, ..NetConfig::new(Arch::ResUnet) };
    TrainConfig { batch_per_worker: 2, workers, base_lr: 1e-3, max_iterations: 4, ..TrainConfig::new(net, loss) }
}

fn worker_suite(gate: &mut Gate, data: &[Slice]) {
    // One step with three workers against the single-worker update applied
    // to a hand-averaged gradient.
    let cfg = small_cfg(LossKind::Hdice, 3);
    let mut three = Trainer::new(cfg.clone(), data).unwrap();
    three.step().unwrap();

    let spec = build_network(&cfg.net).unwrap();
    let mut state = TrainState::init(&spec, &cfg).unwrap();
    let mut sums: Vec<Vec<f64>> = spec.params.iter().map(|p| vec![0.0; p.shape.iter().product()]).collect();
    for w in 0..cfg.workers {
        let idx = sample_batch(data.len(), cfg.seed, w, 0, cfg.batch_per_worker);
        let (images, labels) = assemble_batch(data, &idx).unwrap();
        let res = worker_gradients(&spec, &state.store, &images, &labels, cfg.loss, &cfg.loss_params).unwrap();
        for (sum, p) in sums.iter_mut().zip(&spec.params) {
            for (s, g) in sum.iter_mut().zip(&res.grads[&p.name]) {
                *s += *g as f64;
            }
        }
    }
    let mut mean = GradMap::new();
    for (sum, p) in sums.iter().zip(&spec.params) {
        mean.insert(p.name.clone(), sum.iter().map(|s| (s / cfg.workers as f64) as f32).collect());
    }
    adam_step(&mut state.store, &mean, &mut state.adam, lr_at(0, &cfg)).unwrap();

    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for p in &spec.params {
        for (a, b) in three.state.store.param(&p.name).data().iter().zip(state.store.param(&p.name).data()) {
            diff = diff.max((*a as f64 - *b as f64).abs());
            scale = scale.max((*b as f64).abs());
        }
    }
    let rel = diff / scale;
    gate.line(
        "data-parallel equivalence",
        rel < WORKER_TOL,
        format!("W=3 step vs single update on the mean gradient: max |dparam| / max |param| = {rel:.1e} < {WORKER_TOL:e}"),
    );

    let single = small_cfg(LossKind::Hdice, 1);
    let run = || {
        let mut t = Trainer::new(single.clone(), data).unwrap();
        t.run(|_, _| Ok(())).unwrap();
        (t.state, t.history)
    };
    let (a, b) = (run(), run());
    let bits = |h: &[hierseg::train::LossRecord]| h.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    gate.line(
        "W=1 reproducibility",
        a.0 == b.0 && bits(&a.1) == bits(&b.1),
        format!("two {}-iteration runs from seed {}: identical state and loss bits", single.max_iterations, single.seed),
    );
}

fn round_trip_suite(gate: &mut Gate, data: &[Slice]) {
    let dir = tempfile::tempdir().unwrap();
    let (v, l) = phantom(7);
    write_bvol(&dir.path().join("v.bvol"), &v.to_bvol()).unwrap();
    write_bvol(&dir.path().join("l.bvol"), &l.to_bvol()).unwrap();
    let v2 = Volume::from_bvol(read_bvol(&dir.path().join("v.bvol")).unwrap()).unwrap();
    let l2 = LabelVolume::from_bvol(read_bvol(&dir.path().join("l.bvol")).unwrap()).unwrap();
    let same_bits = v.data().iter().zip(v2.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    let bvol_ok = same_bits && v.dims() == v2.dims() && l == l2;

    let cfg = small_cfg(LossKind::Bootstrap, 1);
    let mut full = Trainer::new(cfg.clone(), data).unwrap();
    full.run(|_, _| Ok(())).unwrap();

    let mut first = Trainer::new(TrainConfig { max_iterations: 2, ..cfg.clone() }, data).unwrap();
    first.run(|_, _| Ok(())).unwrap();
    let path = dir.path().join("mid.hnck");
    let ckpt = Checkpoint { state: first.state.clone(), config: "loss = bootstrap\n".into() };
    write_checkpoint(&path, &ckpt).unwrap();
    let back = read_checkpoint(&path).unwrap();
    let ckpt_ok = back == ckpt && back.to_bytes().unwrap() == ckpt.to_bytes().unwrap();

    let mut second = Trainer::resume(cfg, data, back.state).unwrap();
    second.run(|_, _| Ok(())).unwrap();
    let trace: Vec<u64> = first.history.iter().chain(&second.history).map(|r| r.loss.to_bits()).collect();
    let reference: Vec<u64> = full.history.iter().map(|r| r.loss.to_bits()).collect();
    let resume_ok = trace == reference && second.state == full.state;

    gate.line("BVOL round trip", bvol_ok, format!("{:?} volume and labels read back bit-identical", v.dims()));
    gate.line("checkpoint round trip", ckpt_ok, "written and re-read checkpoint equal, byte-identical re-encoding");
    gate.line(
        "resumed training",
        resume_ok,
        format!("2 + {} resumed iterations reproduce the uninterrupted {}-iteration loss trace and state", full.history.len() - 2, full.history.len()),
    );
}

fn held_out_scores(loss: LossKind, data: &[Slice], held: &[(Volume, LabelVolume)]) -> (RegionTable, f64) {
    let start = Instant::now();
    let cfg = TrainConfig::new(NetConfig::new(Arch::ResUnet), loss);
    let mut t = Trainer::new(cfg, data).unwrap();
    t.run(|_, _| Ok(())).unwrap();
    let store: ParamStore<f32> = t.state.eval_store();
    let tables: Vec<RegionTable> = held
        .iter()
        .map(|(v, l)| evaluate_volume(&t.spec, &store, v, l, DecisionRule::for_loss(loss), EvalSlices::Tumor).unwrap().table)
        .collect();
    (eval_table(&tables).unwrap(), start.elapsed().as_secs_f64())
}

fn qualitative_suite(gate: &mut Gate, data: &[Slice]) {
    let held: Vec<(Volume, LabelVolume)> = (1000..1004).map(phantom).collect();
    let (ce, secs) = held_out_scores(LossKind::Ce, data, &held);
    gate.line(
        "cross-entropy misses enhancing tumor",
        ce.enhancing().dice < CE_ENHANCING_MAX,
        format!(
            "res-unet, 2000 iterations: enhancing dice {:.4} (needs < {CE_ENHANCING_MAX}), complete {:.4}, core {:.4}, {secs:.0}s",
            ce.enhancing().dice,
            ce.complete().dice,
            ce.core().dice
        ),
    );
    for loss in [LossKind::Hdice, LossKind::Bootstrap] {
        let (s, secs) = held_out_scores(loss, data, &held);
        gate.line(
            &format!("{loss} finds enhancing tumor"),
            s.enhancing().dice >= ENHANCING_MIN && s.complete().dice >= COMPLETE_MIN,
            format!(
                "res-unet, 2000 iterations: enhancing dice {:.4} (needs >= {ENHANCING_MIN}), complete {:.4} (needs >= {COMPLETE_MIN}), core {:.4}, {secs:.0}s",
                s.enhancing().dice,
                s.complete().dice,
                s.core().dice
            ),
        );
    }
}

fn main() -> ExitCode {
    let mut gate = Gate { failed: 0 };
    gradient_suite(&mut gate);
    loss_oracle_suite(&mut gate);
    classifier_suite(&mut gate);
    metrics_suite(&mut gate);
    bilinear_suite(&mut gate);
    filter_suite(&mut gate);
    let data = pool(0..16);
    worker_suite(&mut gate, &data);
    round_trip_suite(&mut gate, &data);
    qualitative_suite(&mut gate, &data);
    if gate.failed == 0 {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", gate.failed);
        ExitCode::FAILURE
    }
}
