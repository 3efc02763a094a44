use std::fmt;
use std::str::FromStr;

use crate::arch::{forward, NetworkSpec, ParamStore};
use crate::autodiff::{Graph, Mode};
use crate::classifier::{decide_argmax_map, decide_hierarchical_map, decision_masks};
use crate::data::{axial_slice, load_case, normalize, Case, LabelVolume, Volume};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::metrics::{eval_table, region_masks, volume_table, RegionTable};
use crate::tensor::Tensor;

/// How class probabilities become region masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecisionRule {
    /// Nested-region gates on aggregated probabilities.
    Hierarchical,
    /// Most probable class, then its region membership.
    Argmax,
}

impl DecisionRule {
    /// The hierarchical rule for the hierarchical dice loss, argmax otherwise.
    pub fn for_loss(loss: LossKind) -> Self {
        if loss == LossKind::Hdice {
            Self::Hierarchical
        } else {
            Self::Argmax
        }
    }
}

impl FromStr for DecisionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hierarchical" => Ok(Self::Hierarchical),
            "argmax" => Ok(Self::Argmax),
            _ => Err(Error::Invalid(format!("unknown decision rule `{s}` (expected hierarchical|argmax)"))),
        }
    }
}

impl fmt::Display for DecisionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hierarchical => "hierarchical",
            Self::Argmax => "argmax",
        })
    }
}

/// Which axial slices of a volume are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSlices {
    /// Slices whose labels contain tumor, as in training.
    Tumor,
    All,
}

impl FromStr for EvalSlices {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tumor" => Ok(Self::Tumor),
            "all" => Ok(Self::All),
            _ => Err(Error::Invalid(format!("unknown slice selection `{s}` (expected tumor|all)"))),
        }
    }
}

impl fmt::Display for EvalSlices {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tumor => "tumor",
            Self::All => "all",
        })
    }
}

const PREDICT_CHUNK: usize = 8;

/// Softmax class probabilities `(N, 5, H, W)` in eval mode.
pub fn predict_probs(spec: &NetworkSpec, store: &ParamStore<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = images.shape().first().copied().unwrap_or(0);
    let mut parts = Vec::new();
    for start in (0..n).step_by(PREDICT_CHUNK) {
        let chunk = images.batch_range(start, (start + PREDICT_CHUNK).min(n))?;
        let mut g = Graph::new();
        let x = g.constant(chunk);
        let pass = forward(spec, store, &mut g, x, Mode::Eval)?;
        let p = g.softmax_channels(pass.logits)?;
        parts.push(g.value(p).clone());
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Tensor::cat_batch(&refs)
}

/// Scores and per-slice label maps for one volume.
#[derive(Clone, Debug)]
pub struct VolumePrediction {
    pub table: RegionTable,
    /// Axial indices that were scored.
    pub slices: Vec<usize>,
    /// Predicted label per pixel of each scored slice (region decisions map
    /// to 0, 2, 3, 4).
    pub predicted: Vec<Vec<u8>>,
}

/// Normalizes `vol`, predicts the selected slices, and scores them as one
/// volume. Under [`EvalSlices::Tumor`] a volume without tumor is scored on
/// all slices.
pub fn evaluate_volume(
    spec: &NetworkSpec,
    store: &ParamStore<f32>,
    vol: &Volume,
    labels: &LabelVolume,
    rule: DecisionRule,
    which: EvalSlices,
) -> Result<VolumePrediction> {
    let vol = normalize(vol);
    let [d, h, w] = vol.dims();
    let plane = h * w;
    let has_tumor = |z: usize| labels.labels()[z * plane..(z + 1) * plane].iter().any(|&l| l != 0);
    let mut slices: Vec<usize> = match which {
        EvalSlices::Tumor => (0..d).filter(|&z| has_tumor(z)).collect(),
        EvalSlices::All => (0..d).collect(),
    };
    if slices.is_empty() {
        slices = (0..d).collect();
    }
    let mut pred_masks: [Vec<bool>; 3] = Default::default();
    let mut truth = Vec::with_capacity(slices.len() * plane);
    let mut predicted = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(PREDICT_CHUNK) {
        let cut: Vec<_> = chunk.iter().map(|&z| axial_slice(&vol, labels, z)).collect::<Result<_>>()?;
        let images: Vec<Tensor<f32>> = cut.iter().map(|s| s.image.clone().reshape(&[1, spec.in_channels, h, w])).collect::<Result<_>>()?;
        let refs: Vec<&Tensor<f32>> = images.iter().collect();
        let probs = predict_probs(spec, store, &Tensor::cat_batch(&refs)?)?;
        let (masks, labels_out) = match rule {
            DecisionRule::Hierarchical => {
                let dec = decide_hierarchical_map(&probs)?;
                (decision_masks(&dec), dec.iter().map(|d| d.display_label()).collect::<Vec<u8>>())
            }
            DecisionRule::Argmax => {
                let lab = decide_argmax_map(&probs)?;
                (region_masks(&lab)?, lab)
            }
        };
        for (acc, m) in pred_masks.iter_mut().zip(masks) {
            acc.extend(m);
        }
        predicted.extend(labels_out.chunks(plane).map(<[u8]>::to_vec));
        for s in &cut {
            truth.extend_from_slice(&s.labels);
        }
    }
    Ok(VolumePrediction { table: volume_table(&pred_masks, &truth)?, slices, predicted })
}

/// Per-volume scores averaged over every case, in order.
pub fn evaluate_cases(
    spec: &NetworkSpec,
    store: &ParamStore<f32>,
    cases: &[Case],
    rule: DecisionRule,
    which: EvalSlices,
) -> Result<RegionTable> {
    let mut tables = Vec::with_capacity(cases.len());
    for case in cases {
        let (vol, labels) = load_case(case)?;
        tables.push(evaluate_volume(spec, store, &vol, &labels, rule, which)?.table);
    }
    eval_table(&tables)
}
