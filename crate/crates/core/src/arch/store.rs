use std::fmt;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ForwardPass, Init, NetworkSpec};
use crate::autodiff::{bilinear_kernel, BilinearSpec, Graph};
use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Learnable tensors and batch-norm running statistics, keyed by name in
/// registry order.
#[derive(Clone, PartialEq)]
pub struct ParamStore<T> {
    pub params: IndexMap<String, Tensor<T>>,
    pub buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Real> fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map().entries(self.params.iter().chain(&self.buffers).map(|(k, v)| (k, v.shape()))).finish()
    }
}

fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::from_f64(std * rng.sample::<f64, _>(StandardNormal))).collect())
}

impl<T: Real> ParamStore<T> {
    /// Fresh parameters for `spec`, drawn deterministically from `seed`.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        for p in &spec.params {
            let t = match p.init {
                Init::He { fan_in } => normal(&mut rng, &p.shape, (2.0 / fan_in as f64).sqrt())?,
                Init::Normal { std } => normal(&mut rng, &p.shape, std)?,
                Init::Zeros => Tensor::zeros(&p.shape),
                Init::Ones => Tensor::full(&p.shape, T::ONE),
                Init::Bilinear { stride } => {
                    let k = bilinear_kernel(BilinearSpec { size: p.shape[2], stride }, p.shape[0])?;
                    if k.shape() != p.shape.as_slice() {
                        return shape_err(format!("bilinear init for {} has shape {:?}", p.name, k.shape()));
                    }
                    k
                }
            };
            params.insert(p.name.clone(), t);
        }
        let mut buffers = IndexMap::new();
        for n in &spec.norms {
            buffers.insert(n.running_mean_name(), Tensor::zeros(&[n.channels]));
            buffers.insert(n.running_var_name(), Tensor::full(&[n.channels], T::ONE));
        }
        Ok(ParamStore { params, buffers })
    }

    /// Every tensor `spec` needs is present with the right shape.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        for p in &spec.params {
            match self.params.get(&p.name) {
                Some(t) if t.shape() == p.shape.as_slice() => {}
                Some(t) => return shape_err(format!("parameter {} has shape {:?}, expected {:?}", p.name, t.shape(), p.shape)),
                None => return Err(Error::Invalid(format!("missing parameter {}", p.name))),
            }
        }
        for n in &spec.norms {
            for name in [n.running_mean_name(), n.running_var_name()] {
                match self.buffers.get(&name) {
                    Some(t) if t.numel() == n.channels => {}
                    _ => return Err(Error::Invalid(format!("missing or malformed buffer {name}"))),
                }
            }
        }
        Ok(())
    }

    /// Panics if absent; [`ParamStore::check`] first.
    pub fn param(&self, name: &str) -> &Tensor<T> {
        &self.params[name]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.params.get_mut(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    pub fn buffer(&self, name: &str) -> &Tensor<T> {
        &self.buffers[name]
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// buffers; see [`ParamStore::fold_batch_stats`].
    pub fn update_running(&mut self, spec: &NetworkSpec, g: &Graph<T>, pass: &ForwardPass, momentum: f64) -> Result<()> {
        let stats = spec
            .norms
            .iter()
            .zip(&pass.norms)
            .map(|(info, &v)| {
                g.batch_stats(v)
                    .map(|(m, s)| (m.to_vec(), s.to_vec()))
                    .ok_or_else(|| Error::Invalid(format!("{} was not run in train mode", info.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        self.fold_batch_stats(spec, &stats, momentum)
    }

    /// `running = momentum * running + (1 - momentum) * batch`, one
    /// `(mean, variance)` pair per batch-norm layer.
    pub fn fold_batch_stats(&mut self, spec: &NetworkSpec, stats: &[(Vec<T>, Vec<T>)], momentum: f64) -> Result<()> {
        if stats.len() != spec.norms.len() {
            return shape_err(format!("{} batch statistics for {} batch-norm layers", stats.len(), spec.norms.len()));
        }
        let m = T::from_f64(momentum);
        let rest = T::ONE - m;
        for (info, (mean, var)) in spec.norms.iter().zip(stats) {
            for (name, batch) in [(info.running_mean_name(), mean), (info.running_var_name(), var)] {
                let buf = self.buffers.get_mut(&name).ok_or_else(|| Error::Invalid(format!("missing buffer {name}")))?;
                if buf.numel() != batch.len() {
                    return shape_err(format!("{name} has {} entries, batch statistics {}", buf.numel(), batch.len()));
                }
                for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = m * *r + rest * b;
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}
