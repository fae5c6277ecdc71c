use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{ModelParams, Param, ParamRole};
use crate::rng::{seeded, standard_normal};
use crate::{Error, Result, Tensor};

/// Low-rank update `scale * B A` on one `[out, in]` weight. `A` is
/// `[rank, in]`, `B` is `[out, rank]` and starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub scale: f64,
    pub a: Param,
    pub b: Param,
}

impl LoraAdapter {
    pub fn new(target: &str, out_dim: usize, in_dim: usize, rank: usize, scale: f64, seed: u64) -> Result<Self> {
        let max = out_dim.min(in_dim);
        if rank == 0 || rank > max {
            return Err(Error::RankTooLarge { rank, max });
        }
        let a = standard_normal(&mut seeded(seed), rank * in_dim)
            .into_iter()
            .map(|v| v / crate::math::sqrt(in_dim as f64))
            .collect();
        Ok(LoraAdapter {
            target: String::from(target),
            scale,
            a: Param::new(format!("lora.{target}.a"), ParamRole::LoraFactor, Tensor::from_vec(&[rank, in_dim], a)?),
            b: Param::new(format!("lora.{target}.b"), ParamRole::LoraFactor, Tensor::zeros(&[out_dim, rank])),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.tensor.shape()[0]
    }

    /// `scale * B A`.
    pub fn delta(&self) -> Tensor {
        let (out, r) = (self.b.tensor.shape()[0], self.rank());
        let inn = self.a.tensor.shape()[1];
        let mut d = Tensor::zeros(&[out, inn]);
        for i in 0..out {
            for k in 0..r {
                let bik = self.scale * self.b.tensor.at2(i, k);
                crate::math::axpy(
                    bik,
                    &self.a.tensor.data()[k * inn..(k + 1) * inn],
                    &mut d.data_mut()[i * inn..(i + 1) * inn],
                );
            }
        }
        d
    }

    /// `W + scale * B A`.
    pub fn adapted(&self, base: &Tensor) -> Result<Tensor> {
        let delta = self.delta();
        if base.shape() != delta.shape() {
            return Err(Error::shape("lora base", delta.shape(), base.shape()));
        }
        let data = base.data().iter().zip(delta.data()).map(|(w, d)| w + d).collect();
        Tensor::from_vec(base.shape(), data)
    }
}

/// Which weights receive adapters.
#[derive(Debug, Clone, PartialEq)]
pub enum LoraTargets {
    /// Key-frame and cross-attention projections of the main branch.
    MainAttention,
    Names(Vec<String>),
}

impl LoraTargets {
    fn select(&self, params: &ModelParams) -> Result<Vec<String>> {
        match self {
            LoraTargets::MainAttention => Ok(params
                .base_params()
                .iter()
                .filter(|p| p.name.starts_with("main.") && (p.name.contains(".attn.kf.") || p.name.contains(".attn.cross.")))
                .map(|p| p.name.clone())
                .collect()),
            LoraTargets::Names(names) => {
                for n in names {
                    match params.get(n) {
                        Some(p) if p.tensor.shape().len() == 2 => {}
                        Some(_) => return Err(Error::invalid("lora target", format!("{n} is not a matrix"))),
                        None => return Err(Error::UnknownParameter(n.clone())),
                    }
                }
                Ok(names.clone())
            }
        }
    }
}

/// Adds a fresh rank-`rank` adapter to every selected weight. Adapters
/// already present are replaced.
pub fn attach_lora(params: &ModelParams, targets: &LoraTargets, rank: usize, scale: f64, seed: u64) -> Result<ModelParams> {
    let names = targets.select(params)?;
    if names.is_empty() {
        return Err(Error::invalid("lora targets", "selector matched no weights"));
    }
    let mut out = params.clone();
    for (i, name) in names.iter().enumerate() {
        let s = params.get(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?.tensor.shape();
        let adapter = LoraAdapter::new(name, s[0], s[1], rank, scale, seed.wrapping_add(i as u64))?;
        out.set_lora(adapter);
    }
    Ok(out)
}
