use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    adamw_step, clip_grad_norm, combined_loss, ddpm_loss, lm_loss, lr_at_step, partition_params,
    AdamState, Group, ParamGroups, TrainConfig,
};
use crate::diffusion::DiffusionSchedule;
use crate::error::Result;
use crate::model::{FusedModel, TokenStream};
use crate::tensor::{Real, Tape, Tensor};

/// Independent RNG stream for one training step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lm_loss: f64,
    pub ddpm_loss: f64,
    pub combined: f64,
    pub lr_text: f64,
    pub lr_image: f64,
    /// Gradient norm of the trainable groups before clipping.
    pub grad_norm: f64,
}

/// Model, optimizer state and step counter of one run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: FusedModel<T>,
    pub groups: ParamGroups,
    pub opt: AdamState<T>,
    pub cfg: TrainConfig,
    /// Number of completed steps.
    pub step: u64,
    schedule: DiffusionSchedule,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: FusedModel<T>, cfg: TrainConfig) -> Result<Self> {
        let opt = AdamState::new(model.params());
        Self::resume(model, opt, 0, cfg)
    }

    pub fn resume(model: FusedModel<T>, opt: AdamState<T>, step: u64, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let groups = partition_params(&model)?;
        let schedule = DiffusionSchedule::cosine(model.config().diffusion_steps)?;
        Ok(Trainer {
            model,
            groups,
            opt,
            cfg,
            step,
            schedule,
        })
    }

    /// Noises every image segment at an independent `t ~ U{1..T}`, in
    /// place, and returns the noise drawn per segment.
    pub fn noise_batch<R: Rng>(&self, batch: &mut [TokenStream], rng: &mut R) -> Result<Vec<Tensor<T>>> {
        let cfg = self.model.config();
        let mut eps = Vec::new();
        for s in batch.iter_mut() {
            for k in 0..s.segments().len() {
                let t = rng.random_range(1..=self.schedule.steps());
                let clean: Vec<T> = s.segment_latent(k).iter().map(|&x| T::from_f64_lossy(x as f64)).collect();
                let clean = Tensor::new(vec![s.segments()[k].len, cfg.patch_dim], clean)?;
                let n = self.schedule.add_noise(&clean, t, rng)?;
                let noisy: Vec<f32> = n.x_t.data().iter().map(|x| x.to_f64_lossy() as f32).collect();
                s.set_segment_latent(k, &noisy);
                s.set_noise_level(k, t);
                eps.push(n.eps);
            }
        }
        Ok(eps)
    }

    /// Forward and backward of the combined loss on an already-noised
    /// batch; gradients are accumulated into the model. Returns
    /// `(lm, ddpm, combined)`.
    pub fn accumulate_gradients(&mut self, batch: &[TokenStream], eps: &[Tensor<T>]) -> Result<[f64; 3]> {
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, batch, true)?;
        let lm = lm_loss(&mut tape, out.logits, batch)?;
        let dd = ddpm_loss(&mut tape, out.eps, eps)?;
        let total = combined_loss(&mut tape, lm, dd, self.cfg.lambda)?;
        let grads = tape.backward(total)?;
        for (p, v) in self.model.params_mut().iter_mut().zip(&out.params) {
            grads.accumulate_into(*v, &mut p.tensor);
        }
        let val = |v| tape.value(v)[0].to_f64_lossy();
        Ok([val(lm), val(dd), val(total)])
    }

    /// Noise, forward, combined loss, backward, clip, AdamW, zero grads.
    pub fn train_step<R: Rng>(&mut self, batch: &[TokenStream], rng: &mut R) -> Result<StepMetrics> {
        let mut batch = batch.to_vec();
        let eps = self.noise_batch(&mut batch, rng)?;
        self.model.zero_grads();
        let [lm, dd, total] = self.accumulate_gradients(&batch, &eps)?;
        let step = self.step + 1;
        let trainable: Vec<usize> = Group::ALL
            .into_iter()
            .filter(|&g| lr_at_step(step, &self.cfg, g) > 0.0)
            .flat_map(|g| self.groups.members(g).to_vec())
            .collect();
        let grad_norm = clip_grad_norm(self.model.params_mut(), &trainable, self.cfg.grad_clip);
        let [lr_text, lr_image] = adamw_step(
            self.model.params_mut(),
            &self.groups,
            &mut self.opt,
            step,
            &self.cfg,
        );
        self.model.zero_grads();
        self.step = step;
        Ok(StepMetrics {
            step,
            lm_loss: lm,
            ddpm_loss: dd,
            combined: total,
            lr_text,
            lr_image,
            grad_norm,
        })
    }
}
