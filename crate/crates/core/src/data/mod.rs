//! Volumes, label volumes, slice extraction, intensity normalization and the
//! case manifest.

mod bvol;
mod phantom;

use std::fs;
use std::path::{Path, PathBuf};

pub use bvol::{read_bvol, write_bvol, Bvol, BvolPayload, BVOL_HEADER_LEN, BVOL_MAGIC};
pub use phantom::{generate_phantom, PhantomConfig, DEFAULT_CLASS_MEANS, DEFAULT_RATIOS};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::{NUM_CLASSES, NUM_MODALITIES};

/// Four-channel intensity volume, `(D, H, W, 4)` row-major, channels
/// ordered T1, T1c, T2, FLAIR.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) || data.len() != dims.iter().product::<usize>() * NUM_MODALITIES {
            return shape_err(format!("volume dims {dims:?} do not match {} values", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("volume contains non-finite values".into()));
        }
        Ok(Volume { dims, data })
    }

    /// `(D, H, W)`.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_bvol(&self) -> Bvol {
        let [d, h, w] = self.dims;
        Bvol { dims: [d, h, w, NUM_MODALITIES], payload: BvolPayload::F32(self.data.clone()) }
    }

    pub fn from_bvol(b: Bvol) -> Result<Self> {
        match b.payload {
            BvolPayload::F32(data) if b.dims[3] == NUM_MODALITIES => Volume::new([b.dims[0], b.dims[1], b.dims[2]], data),
            _ => Err(Error::Format(format!("expected f32 volume with {NUM_MODALITIES} channels, got dims {:?}", b.dims))),
        }
    }
}

/// Integer labels 0..=4, `(D, H, W)` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 3],
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) || labels.len() != dims.iter().product::<usize>() {
            return shape_err(format!("label dims {dims:?} do not match {} values", labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Invalid(format!("label {bad} out of range 0..{NUM_CLASSES}")));
        }
        Ok(LabelVolume { dims, labels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Voxel count per class.
    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn to_bvol(&self) -> Bvol {
        let [d, h, w] = self.dims;
        Bvol { dims: [d, h, w, 1], payload: BvolPayload::U8(self.labels.clone()) }
    }

    pub fn from_bvol(b: Bvol) -> Result<Self> {
        match b.payload {
            BvolPayload::U8(labels) if b.dims[3] == 1 => LabelVolume::new([b.dims[0], b.dims[1], b.dims[2]], labels),
            _ => Err(Error::Format(format!("expected u8 label volume with 1 channel, got dims {:?}", b.dims))),
        }
    }
}

/// One axial slice: image `(4, H, W)` channel-first, labels `H * W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
}

/// Result of [`slice_and_filter`].
#[derive(Clone, Debug, Default)]
pub struct FilteredSlices {
    pub slices: Vec<Slice>,
    /// Axial index of each retained slice.
    pub indices: Vec<usize>,
    /// No slice contained tumor.
    pub no_tumor: bool,
}

/// The axial slice `z` of a volume, channel-first.
pub fn axial_slice(vol: &Volume, labels: &LabelVolume, z: usize) -> Result<Slice> {
    if vol.dims != labels.dims {
        return shape_err(format!("volume {:?} vs labels {:?}", vol.dims, labels.dims));
    }
    let [d, h, w] = vol.dims;
    if z >= d {
        return shape_err(format!("slice {z} of depth {d}"));
    }
    let plane = h * w;
    let src = &vol.data[z * plane * NUM_MODALITIES..(z + 1) * plane * NUM_MODALITIES];
    let mut image = vec![0f32; NUM_MODALITIES * plane];
    for (p, px) in src.chunks_exact(NUM_MODALITIES).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            image[c * plane + p] = v;
        }
    }
    Ok(Slice {
        image: Tensor::new(&[NUM_MODALITIES, h, w], image)?,
        labels: labels.labels[z * plane..(z + 1) * plane].to_vec(),
    })
}

/// Axial slices that contain at least one tumor label, in order.
pub fn slice_and_filter(vol: &Volume, labels: &LabelVolume) -> Result<FilteredSlices> {
    if vol.dims != labels.dims {
        return shape_err(format!("volume {:?} vs labels {:?}", vol.dims, labels.dims));
    }
    let [d, h, w] = vol.dims;
    let mut out = FilteredSlices::default();
    for z in 0..d {
        if labels.labels[z * h * w..(z + 1) * h * w].iter().any(|&l| l != 0) {
            out.slices.push(axial_slice(vol, labels, z)?);
            out.indices.push(z);
        }
    }
    out.no_tumor = out.slices.is_empty();
    Ok(out)
}

/// Per-channel z-score over nonzero voxels; zeros stay zero and a channel
/// with zero variance becomes all zeros.
pub fn normalize(vol: &Volume) -> Volume {
    let mut data = vol.data.clone();
    for c in 0..NUM_MODALITIES {
        let nonzero = || vol.data.chunks_exact(NUM_MODALITIES).map(|px| px[c] as f64).filter(|&v| v != 0.0);
        let n = nonzero().count();
        let mean = if n > 0 { nonzero().sum::<f64>() / n as f64 } else { 0.0 };
        let var = if n > 0 { nonzero().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64 } else { 0.0 };
        let constant = var == 0.0;
        let std = var.sqrt();
        for px in data.chunks_exact_mut(NUM_MODALITIES) {
            let v = px[c] as f64;
            px[c] = if v == 0.0 || constant { 0.0 } else { ((v - mean) / std) as f32 };
        }
    }
    Volume { dims: vol.dims, data }
}

/// One case: volume and label file paths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Case {
    pub volume: PathBuf,
    pub labels: PathBuf,
}

/// Reads `volume<TAB>labels` lines; relative paths resolve against the
/// manifest's directory. Blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<Case>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut cases = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(v), Some(l), None) if !v.is_empty() && !l.is_empty() => {
                cases.push(Case { volume: base.join(v), labels: base.join(l) });
            }
            _ => {
                return Err(Error::Format(format!(
                    "{}:{}: expected `volume<TAB>labels`",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    if cases.is_empty() {
        return Err(Error::EmptyData(format!("manifest {} lists no cases", path.display())));
    }
    Ok(cases)
}

/// Writes a manifest with paths as given (normally relative to its directory).
pub fn write_manifest(path: &Path, cases: &[(String, String)]) -> Result<()> {
    let mut s = String::new();
    for (v, l) in cases {
        if v.contains(['\t', '\n']) || l.contains(['\t', '\n']) {
            return Err(Error::Invalid(format!("manifest path contains tab or newline: {v:?} {l:?}")));
        }
        s.push_str(v);
        s.push('\t');
        s.push_str(l);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn load_case(case: &Case) -> Result<(Volume, LabelVolume)> {
    let vol = Volume::from_bvol(read_bvol(&case.volume)?)?;
    let labels = LabelVolume::from_bvol(read_bvol(&case.labels)?)?;
    if vol.dims() != labels.dims() {
        return shape_err(format!(
            "{}: volume {:?} vs labels {:?}",
            case.volume.display(),
            vol.dims(),
            labels.dims()
        ));
    }
    Ok((vol, labels))
}
