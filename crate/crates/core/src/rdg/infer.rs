//! Utterances in, pictures out, using trained checkpoints.

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ca::Mode;
use super::model::RdgModel;
use crate::data::images::tensor_to_images;
use crate::data::{ImageArray, Spectrogram};
use crate::error::{Error, Result};
use crate::sen::{spectrogram_embeddings, SenModel};

/// Raw generator conditions for `specs`, built the same way training built them.
pub fn spectrogram_conditions(model: &RdgModel, sen: Option<&SenModel>, specs: &[&Spectrogram], log_floor: f32) -> Result<Tensor> {
    if specs.is_empty() {
        return Err(Error::Validation("no utterances given".into()));
    }
    let cond = if model.config.flags.use_sen_embeddings {
        let sen = sen.ok_or_else(|| Error::Validation("this generator was trained on speech embeddings; a SEN checkpoint is required".into()))?;
        if sen.config.embed_dim != model.cond_dim {
            return Err(Error::Compatibility(format!(
                "SEN embedding dim {} vs generator condition dim {}",
                sen.config.embed_dim, model.cond_dim
            )));
        }
        spectrogram_embeddings(sen, specs, log_floor)?
    } else {
        let m = specs[0].num_mel();
        if m != model.cond_dim {
            return Err(Error::Compatibility(format!(
                "spectrograms have {m} Mel bins but the generator expects {}",
                model.cond_dim
            )));
        }
        let flat: Vec<f32> = specs.iter().flat_map(|s| s.mean_frame()).collect();
        Tensor::from_vec(flat, (specs.len(), m), &Device::Cpu)?
    };
    Ok(cond)
}

/// Every scale for `per_condition` draws of each condition row, in row-major
/// order: `out[i * per_condition + k][scale]`.
pub fn generate_pyramids(model: &RdgModel, conditions: &Tensor, per_condition: usize, seed: u64) -> Result<Vec<Vec<ImageArray>>> {
    if per_condition == 0 {
        return Err(Error::Validation("need at least one image per condition".into()));
    }
    let n = conditions.dims2()?.0;
    let ids: Vec<u32> = (0..n as u32).flat_map(|i| std::iter::repeat_n(i, per_condition)).collect();
    let ids = Tensor::from_vec(ids, n * per_condition, conditions.device())?;
    let cond = conditions.index_select(&ids, 0)?;
    let total = n * per_condition;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = model.sample_noise(&mut rng, total)?;
    let mut out = Vec::with_capacity(total);
    for start in (0..total).step_by(32) {
        let len = 32.min(total - start);
        let (_, pyramid) = model.generate(&cond.narrow(0, start, len)?, &z.narrow(0, start, len)?, Mode::Infer, &mut rng)?;
        let per_scale = pyramid.images.iter().map(tensor_to_images).collect::<Result<Vec<_>>>()?;
        for j in 0..len {
            out.push(per_scale.iter().map(|imgs| imgs[j].clone()).collect());
        }
    }
    Ok(out)
}
