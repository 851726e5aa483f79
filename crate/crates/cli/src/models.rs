//! Building score models from configuration.

use anyhow::{bail, Context, Result};
use hgm_core::score::{Checkpoint, GaussianScore, GmmComponent, GmmScore, ScoreModel};
use hgm_core::{HighDimTransform, ImageTensor, Shape};

use crate::config::{Config, ModelKind};

/// A model in original space and one in lifted space.
pub struct ModelPair {
    pub lowdim: Option<ScoreModel>,
    pub highdim: ScoreModel,
    pub transform: HighDimTransform,
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn analytic(cfg: &Config, shape: Shape) -> Result<ScoreModel> {
    let m = &cfg.model;
    Ok(match m.kind {
        ModelKind::Gaussian => GaussianScore::isotropic(ImageTensor::filled(shape, m.mean), m.variance)?.into(),
        ModelKind::Correlated => {
            let data = cfg.data.image_model();
            if data.shape() != shape {
                bail!(
                    "correlated model is {:?} but images are {:?}; adjust [data]",
                    data.shape(),
                    shape
                );
            }
            data.validate()?;
            GaussianScore::full(data.mean_tensor(), data.covariance())?.into()
        }
        ModelKind::Gmm => {
            if m.components.is_empty() {
                bail!("gmm model needs [[model.components]]");
            }
            let comps = m
                .components
                .iter()
                .map(|c| GmmComponent {
                    weight: c.weight,
                    mean: ImageTensor::filled(shape, c.mean),
                    variance: c.variance,
                })
                .collect();
            GmmScore::new(comps)?.into()
        }
        ModelKind::Net => unreachable!("networks come from checkpoints"),
    })
}

fn lift(model: &ScoreModel, t: HighDimTransform) -> Result<ScoreModel> {
    match model {
        ScoreModel::Gaussian(g) => Ok(g.lifted(t)?.into()),
        _ if t == HighDimTransform::Identity => Ok(model.clone()),
        _ => bail!("only Gaussian models can be lifted analytically; use transform = \"identity\""),
    }
}

/// Models for images of `shape` under `transform`. The original-space
/// model is built only when `need_lowdim` is set.
pub fn build(cfg: &Config, shape: Shape, transform: HighDimTransform, need_lowdim: bool) -> Result<ModelPair> {
    if cfg.model.kind == ModelKind::Net {
        let path = cfg
            .model
            .checkpoint
            .as_ref()
            .context("model.kind = \"net\" needs model.checkpoint")?;
        let ck = load_checkpoint(path)?;
        if ck.transform != transform {
            bail!(
                "checkpoint {} was trained with transform {}, but the run uses {}",
                path.display(),
                ck.transform,
                transform
            );
        }
        let highdim: ScoreModel = ck.net()?.into();
        let lowdim = if !need_lowdim {
            None
        } else if let Some(p) = &cfg.model.checkpoint_lowdim {
            let low = load_checkpoint(p)?;
            if low.transform != HighDimTransform::Identity {
                bail!("checkpoint_lowdim must be trained without a transform");
            }
            Some(low.net()?.into())
        } else if transform == HighDimTransform::Identity {
            Some(highdim.clone())
        } else {
            bail!("progressive mode with a lifted network needs model.checkpoint_lowdim");
        };
        return Ok(ModelPair {
            lowdim,
            highdim,
            transform,
        });
    }
    let base = analytic(cfg, shape)?;
    let highdim = lift(&base, transform)?;
    Ok(ModelPair {
        lowdim: need_lowdim.then_some(base),
        highdim,
        transform,
    })
}
