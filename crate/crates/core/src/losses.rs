//! Segmentation losses: softmax cross-entropy, class-weighted cross-entropy,
//! bootstrapping, sensitivity-specificity, binary dice and hierarchical dice.
//!
//! Every loss is a fused scalar node on a [`Graph`]: the value and its
//! derivative w.r.t. the input node are computed together in one pass, and the
//! graph chains that derivative into softmax and the network below.
//!
//! Class-probability and logit tensors carry classes on axis 1, so `(N, 5)`
//! and `(B, 5, H, W)` both work. Labels are one `u8` per pixel in the order
//! `outer * inner` of [`channel_layout`].

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{channel_layout, Graph, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::NUM_CLASSES;

pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Per-class weights for [`weighted_ce`]: background, necrosis, edema, non-enhancing, enhancing.
pub const DEFAULT_CLASS_WEIGHTS: [f64; NUM_CLASSES] = [0.1, 0.35, 0.1, 0.1, 0.35];
pub const DEFAULT_BOOTSTRAP_T: f64 = 0.9;
pub const DEFAULT_SS_LAMBDA: f64 = 0.5;
const WEIGHT_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Ce,
    Wce,
    Bootstrap,
    Ss,
    Dice,
    Hdice,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [Self::Ce, Self::Wce, Self::Bootstrap, Self::Ss, Self::Dice, Self::Hdice];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ce => "ce",
            Self::Wce => "wce",
            Self::Bootstrap => "bootstrap",
            Self::Ss => "ss",
            Self::Dice => "dice",
            Self::Hdice => "hdice",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown loss `{s}` (expected ce|wce|bootstrap|ss|dice|hdice)")))
    }
}

/// Whether the dice ratios carry the conventional factor of two.
///
/// `Printed` is `1 - (Σpr+ε)/(Σ(p+r)+ε) - (Σ(1-p)(1-r)+ε)/(Σ(2-p-r)+ε)`; its
/// minimum depends on class balance and can be negative. `Standard` uses
/// `1 - ½[(2Σpr+ε)/(Σ(p+r)+ε) + (2Σ(1-p)(1-r)+ε)/(Σ(2-p-r)+ε)]`, minimum 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiceVariant {
    Printed,
    Standard,
}

impl FromStr for DiceVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "printed" => Ok(Self::Printed),
            "standard" => Ok(Self::Standard),
            _ => Err(Error::Invalid(format!("unknown dice variant `{s}` (expected printed|standard)"))),
        }
    }
}

impl fmt::Display for DiceVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Printed => "printed",
            Self::Standard => "standard",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossParams {
    pub class_weights: [f64; NUM_CLASSES],
    pub bootstrap_t: f64,
    pub ss_lambda: f64,
    pub epsilon: f64,
    pub dice_variant: DiceVariant,
    /// Weights of DL0, DL1, DL2 in the hierarchical dice loss.
    pub hdice_weights: [f64; 3],
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            class_weights: DEFAULT_CLASS_WEIGHTS,
            bootstrap_t: DEFAULT_BOOTSTRAP_T,
            ss_lambda: DEFAULT_SS_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            dice_variant: DiceVariant::Printed,
            hdice_weights: [1.0 / 3.0; 3],
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        check_class_weights(&self.class_weights)?;
        if !(self.bootstrap_t > 0.0 && self.bootstrap_t <= 1.0) {
            return invalid(format!("bootstrap threshold {} outside (0, 1]", self.bootstrap_t));
        }
        if !(0.0..=1.0).contains(&self.ss_lambda) {
            return invalid(format!("ss lambda {} outside [0, 1]", self.ss_lambda));
        }
        if !(self.epsilon > 0.0) {
            return invalid("epsilon must be positive");
        }
        if self.hdice_weights.iter().any(|w| !(*w >= 0.0)) {
            return invalid("hierarchical dice weights must be non-negative");
        }
        Ok(())
    }
}

fn check_class_weights(w: &[f64; NUM_CLASSES]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL || w.iter().any(|v| *v < 0.0) {
        return invalid(format!("class weights {w:?} must be non-negative and sum to 1 (sum {sum})"));
    }
    Ok(())
}

fn check_labels(labels: &[u8], pixels: usize) -> Result<()> {
    if labels.len() != pixels {
        return shape_err(format!("{} labels for {pixels} pixels", labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return invalid(format!("label {bad} out of range 0..{NUM_CLASSES}"));
    }
    Ok(())
}

fn class_input<T: Real>(g: &Graph<T>, v: Var, labels: &[u8]) -> Result<(usize, usize)> {
    let (outer, c, inner) = channel_layout(g.shape(v))?;
    if c != NUM_CLASSES {
        return shape_err(format!("expected {NUM_CLASSES} class channels, got {c}"));
    }
    check_labels(labels, outer * inner)?;
    Ok((outer, inner))
}

/// Mean over pixels of `-log softmax(f)[y]`.
pub fn softmax_ce<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    cross_entropy(g, logits, labels, None)
}

/// Mean over pixels of `-w[y] * log softmax(f)[y]`; `w` must sum to 1.
pub fn weighted_ce<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[u8],
    weights: &[f64; NUM_CLASSES],
) -> Result<Var> {
    check_class_weights(weights)?;
    cross_entropy(g, logits, labels, Some(weights))
}

fn cross_entropy<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[u8],
    weights: Option<&[f64; NUM_CLASSES]>,
) -> Result<Var> {
    let (outer, inner) = class_input(g, logits, labels)?;
    let c = NUM_CLASSES;
    let f = g.value(logits).data();
    let n = T::from_f64((outer * inner) as f64);
    let mut grad = vec![T::ZERO; f.len()];
    let mut total = T::ZERO;
    for o in 0..outer {
        for s in 0..inner {
            let idx = |k: usize| (o * c + k) * inner + s;
            let y = labels[o * inner + s] as usize;
            let w = weights.map_or(T::ONE, |w| T::from_f64(w[y]));
            let mut m = f[idx(0)];
            for k in 1..c {
                m = m.max(f[idx(k)]);
            }
            let z: T = (0..c).map(|k| (f[idx(k)] - m).exp()).sum();
            let lse = m + z.ln();
            total += w * (lse - f[idx(y)]);
            for k in 0..c {
                let p = (f[idx(k)] - lse).exp();
                let onehot = if k == y { T::ONE } else { T::ZERO };
                grad[idx(k)] = w * (p - onehot) / n;
            }
        }
    }
    g.fused_scalar(logits, total / n, grad)
}

/// What [`bootstrap_loss`] kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BootstrapOutcome {
    pub retained: usize,
    pub total: usize,
    /// Every pixel had true-class probability `>= t`; the loss is 0 and has no gradient.
    pub fully_filtered: bool,
}

/// Mean of `-log p[y]` over pixels whose true-class probability is strictly below `t`.
pub fn bootstrap_loss<T: Real>(
    g: &mut Graph<T>,
    probs: Var,
    labels: &[u8],
    t: f64,
) -> Result<(Var, BootstrapOutcome)> {
    if !(t > 0.0 && t <= 1.0) {
        return invalid(format!("bootstrap threshold {t} outside (0, 1]"));
    }
    let (outer, inner) = class_input(g, probs, labels)?;
    let c = NUM_CLASSES;
    let p = g.value(probs).data();
    let thr = T::from_f64(t);
    let kept: Vec<usize> = (0..outer * inner)
        .filter_map(|i| {
            let (o, s) = (i / inner, i % inner);
            let idx = (o * c + labels[i] as usize) * inner + s;
            (p[idx] < thr).then_some(idx)
        })
        .collect();
    let outcome = BootstrapOutcome { retained: kept.len(), total: outer * inner, fully_filtered: kept.is_empty() };
    let mut grad = vec![T::ZERO; p.len()];
    if kept.is_empty() {
        return Ok((g.fused_scalar(probs, T::ZERO, grad)?, outcome));
    }
    let k = T::from_f64(kept.len() as f64);
    let mut total = T::ZERO;
    for &idx in &kept {
        // Underflowed probabilities would give an infinite loss.
        let pi = p[idx].max(T::min_positive());
        total -= pi.ln();
        grad[idx] = -T::ONE / (k * pi);
    }
    Ok((g.fused_scalar(probs, total / k, grad)?, outcome))
}

fn binary_targets<T: Real>(r: &[bool]) -> Vec<T> {
    r.iter().map(|&b| if b { T::ONE } else { T::ZERO }).collect()
}

/// Sensitivity-specificity loss of probabilities `p` (any shape) against the
/// binary mask `r` (same element count).
pub fn ss_loss<T: Real>(g: &mut Graph<T>, p: Var, r: &[bool], lambda: f64, eps: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) || !(eps > 0.0) {
        return invalid(format!("ss loss needs lambda in [0,1] and eps > 0 (got {lambda}, {eps})"));
    }
    if g.value(p).numel() != r.len() {
        return shape_err(format!("{} targets for {} probabilities", r.len(), g.value(p).numel()));
    }
    let pv = g.value(p).data();
    let rv: Vec<T> = binary_targets(r);
    let (lam, e) = (T::from_f64(lambda), T::from_f64(eps));
    let pos = rv.iter().copied().sum::<T>() + e;
    let neg = rv.iter().map(|&x| T::ONE - x).sum::<T>() + e;
    let mut sens = T::ZERO;
    let mut spec = T::ZERO;
    let mut grad = Vec::with_capacity(pv.len());
    let two = T::from_f64(2.0);
    for (&pi, &ri) in pv.iter().zip(&rv) {
        let d = ri - pi;
        sens += d * d * ri;
        spec += d * d * (T::ONE - ri);
        grad.push(-two * d * (lam * ri / pos + (T::ONE - lam) * (T::ONE - ri) / neg));
    }
    let value = lam * sens / pos + (T::ONE - lam) * spec / neg;
    g.fused_scalar(p, value, grad)
}

/// `(k Σab + ε) / (Σ(a+b) + ε)` and its derivative w.r.t. each `a`.
fn overlap_ratio<T: Real>(a: &[T], b: &[T], k: T, eps: T) -> (T, Vec<T>) {
    let num = k * a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>() + eps;
    let den = a.iter().zip(b).map(|(&x, &y)| x + y).sum::<T>() + eps;
    let d = b.iter().map(|&y| k * y / den - num / (den * den)).collect();
    (num / den, d)
}

/// One dice loss over a positive pair `(a, b)` and a complementary pair `(c, d)`:
/// `1 - R(a,b) - R(c,d)` (printed) or `1 - (R2(a,b) + R2(c,d))/2` (standard).
/// Returns the value and derivatives w.r.t. `a` and `c`.
fn paired_dice<T: Real>(a: &[T], b: &[T], c: &[T], d: &[T], eps: T, variant: DiceVariant) -> (T, Vec<T>, Vec<T>) {
    let (k, s) = match variant {
        DiceVariant::Printed => (T::ONE, T::ONE),
        DiceVariant::Standard => (T::from_f64(2.0), T::from_f64(0.5)),
    };
    let (r1, mut d1) = overlap_ratio(a, b, k, eps);
    let (r2, mut d2) = overlap_ratio(c, d, k, eps);
    d1.iter_mut().for_each(|v| *v = -s * *v);
    d2.iter_mut().for_each(|v| *v = -s * *v);
    (T::ONE - s * (r1 + r2), d1, d2)
}

/// Binary dice loss of probabilities `p` against mask `r`.
pub fn dice_loss<T: Real>(g: &mut Graph<T>, p: Var, r: &[bool], eps: f64, variant: DiceVariant) -> Result<Var> {
    if !(eps > 0.0) {
        return invalid("dice epsilon must be positive");
    }
    if g.value(p).numel() != r.len() {
        return shape_err(format!("{} targets for {} probabilities", r.len(), g.value(p).numel()));
    }
    let pv = g.value(p).data().to_vec();
    let rv: Vec<T> = binary_targets(r);
    let pc: Vec<T> = pv.iter().map(|&x| T::ONE - x).collect();
    let rc: Vec<T> = rv.iter().map(|&x| T::ONE - x).collect();
    let (value, da, dc) = paired_dice(&pv, &rv, &pc, &rc, T::from_f64(eps), variant);
    let grad = da.iter().zip(&dc).map(|(&x, &y)| x - y).collect();
    g.fused_scalar(p, value, grad)
}

/// Nested-region membership of a label: complete tumor, tumor core, enhancing tumor.
pub fn region_membership(label: u8) -> [bool; 3] {
    [label != 0, matches!(label, 1 | 3 | 4), label == 4]
}

/// Per-pixel nested-region probabilities and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct HierProbs<T> {
    pub p: [Vec<T>; 3],
    pub r: [Vec<T>; 3],
}

impl<T: Real> HierProbs<T> {
    /// Aggregates class probabilities (classes on axis 1) and maps labels to
    /// region targets.
    pub fn from_class_probs(probs: &Tensor<T>, labels: &[u8]) -> Result<Self> {
        let (outer, c, inner) = channel_layout(probs.shape())?;
        if c != NUM_CLASSES {
            return shape_err(format!("expected {NUM_CLASSES} class channels, got {c}"));
        }
        check_labels(labels, outer * inner)?;
        let q = probs.data();
        let mut p: [Vec<T>; 3] = Default::default();
        for o in 0..outer {
            for s in 0..inner {
                let at = |k: usize| q[(o * c + k) * inner + s];
                let p2 = at(4);
                let p1 = at(1) + at(3) + p2;
                p[0].push(p1 + at(2));
                p[1].push(p1);
                p[2].push(p2);
            }
        }
        Ok(HierProbs { p, r: region_targets(labels) })
    }

    /// Reads `(p0, p1, p2)` from a `(.., 3, ..)` tensor produced by [`Graph::hierarchy`].
    fn from_hier_tensor(hier: &Tensor<T>, labels: &[u8]) -> Result<Self> {
        let (outer, c, inner) = channel_layout(hier.shape())?;
        if c != 3 {
            return shape_err(format!("expected 3 region channels, got {c}"));
        }
        check_labels(labels, outer * inner)?;
        let h = hier.data();
        let mut p: [Vec<T>; 3] = Default::default();
        for (k, pk) in p.iter_mut().enumerate() {
            for o in 0..outer {
                pk.extend_from_slice(&h[(o * 3 + k) * inner..(o * 3 + k + 1) * inner]);
            }
        }
        Ok(HierProbs { p, r: region_targets(labels) })
    }

    pub fn len(&self) -> usize {
        self.p[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.p[0].is_empty()
    }
}

/// `(r0, r1, r2)` as 0/1 vectors.
pub fn region_targets<T: Real>(labels: &[u8]) -> [Vec<T>; 3] {
    let mut r: [Vec<T>; 3] = Default::default();
    for &l in labels {
        for (k, m) in region_membership(l).into_iter().enumerate() {
            r[k].push(if m { T::ONE } else { T::ZERO });
        }
    }
    r
}

/// The three region dice losses and their weighted combination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HdiceParts {
    pub dl: [f64; 3],
    pub combined: f64,
}

/// Hierarchical dice loss value and derivatives w.r.t. `(p0, p1, p2)`.
fn hdice_eval<T: Real>(hp: &HierProbs<T>, eps: f64, variant: DiceVariant, weights: [f64; 3]) -> (HdiceParts, [Vec<T>; 3]) {
    let e = T::from_f64(eps);
    let n = hp.len();
    let mut grad: [Vec<T>; 3] = [vec![T::ZERO; n], vec![T::ZERO; n], vec![T::ZERO; n]];
    let mut dl = [0.0; 3];
    let one: Vec<T> = vec![T::ONE; n];
    for k in 0..3 {
        // Complement pair: (1 - p0, 1 - r0) for the outer region, otherwise the
        // shell between the enclosing region and this one.
        let (outer_p, outer_r) = if k == 0 { (&one, &one) } else { (&hp.p[k - 1], &hp.r[k - 1]) };
        let c: Vec<T> = outer_p.iter().zip(&hp.p[k]).map(|(&o, &i)| o - i).collect();
        let d: Vec<T> = outer_r.iter().zip(&hp.r[k]).map(|(&o, &i)| o - i).collect();
        let (v, da, dc) = paired_dice(&hp.p[k], &hp.r[k], &c, &d, e, variant);
        dl[k] = v.to_f64();
        let w = T::from_f64(weights[k]);
        for i in 0..n {
            grad[k][i] += w * (da[i] - dc[i]);
            if k > 0 {
                grad[k - 1][i] += w * dc[i];
            }
        }
    }
    let combined = dl.iter().zip(weights).map(|(d, w)| d * w).sum();
    (HdiceParts { dl, combined }, grad)
}

/// Hierarchical dice loss evaluated on plain arrays (no graph).
pub fn hdice_value<T: Real>(hp: &HierProbs<T>, eps: f64, variant: DiceVariant, weights: [f64; 3]) -> HdiceParts {
    hdice_eval(hp, eps, variant, weights).0
}

/// Hierarchical dice loss on a `(.., 3, ..)` node from [`Graph::hierarchy`].
pub fn hdice_loss<T: Real>(
    g: &mut Graph<T>,
    hier: Var,
    labels: &[u8],
    eps: f64,
    variant: DiceVariant,
    weights: [f64; 3],
) -> Result<(Var, HdiceParts)> {
    if !(eps > 0.0) {
        return invalid("dice epsilon must be positive");
    }
    let hp = HierProbs::from_hier_tensor(g.value(hier), labels)?;
    let (parts, grads) = hdice_eval(&hp, eps, variant, weights);
    let (outer, _, inner) = channel_layout(g.shape(hier))?;
    let mut local = vec![T::ZERO; outer * 3 * inner];
    for (k, gk) in grads.iter().enumerate() {
        for o in 0..outer {
            local[(o * 3 + k) * inner..(o * 3 + k + 1) * inner].copy_from_slice(&gk[o * inner..(o + 1) * inner]);
        }
    }
    let value = T::from_f64(parts.combined);
    Ok((g.fused_scalar(hier, value, local)?, parts))
}

/// A training loss attached to a logits node.
#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub loss: Var,
    /// The batch contributed no gradient (bootstrap with every pixel filtered).
    pub skip_update: bool,
    pub hdice: Option<HdiceParts>,
}

/// Builds the selected loss on top of network logits `(B, 5, H, W)`.
///
/// `ss` and `dice` are binary losses; for 5-class training they are applied
/// one-vs-rest per class and averaged.
pub fn build_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[u8],
    kind: LossKind,
    params: &LossParams,
) -> Result<LossOutput> {
    let plain = |loss| LossOutput { loss, skip_update: false, hdice: None };
    match kind {
        LossKind::Ce => Ok(plain(softmax_ce(g, logits, labels)?)),
        LossKind::Wce => Ok(plain(weighted_ce(g, logits, labels, &params.class_weights)?)),
        LossKind::Bootstrap => {
            let probs = g.softmax_channels(logits)?;
            let (loss, outcome) = bootstrap_loss(g, probs, labels, params.bootstrap_t)?;
            Ok(LossOutput { loss, skip_update: outcome.fully_filtered, hdice: None })
        }
        LossKind::Hdice => {
            let probs = g.softmax_channels(logits)?;
            let hier = g.hierarchy(probs)?;
            let (loss, parts) = hdice_loss(g, hier, labels, params.epsilon, params.dice_variant, params.hdice_weights)?;
            Ok(LossOutput { loss, skip_update: false, hdice: Some(parts) })
        }
        LossKind::Ss | LossKind::Dice => {
            let probs = g.softmax_channels(logits)?;
            class_input(g, probs, labels)?;
            let mut acc: Option<Var> = None;
            for class in 0..NUM_CLASSES {
                let pc = g.slice_channels(probs, class, class + 1)?;
                let rc: Vec<bool> = labels.iter().map(|&l| l as usize == class).collect();
                let term = if kind == LossKind::Ss {
                    ss_loss(g, pc, &rc, params.ss_lambda, params.epsilon)?
                } else {
                    dice_loss(g, pc, &rc, params.epsilon, params.dice_variant)?
                };
                acc = Some(match acc {
                    Some(a) => g.add(a, term)?,
                    None => term,
                });
            }
            let total = acc.expect("at least one class");
            Ok(plain(g.scale(total, T::from_f64(1.0 / NUM_CLASSES as f64))))
        }
    }
}
