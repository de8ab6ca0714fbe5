use serde::{Deserialize, Serialize};

use super::{lr_at_step, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{FusedModel, Param};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Text,
    Image,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::Text, Group::Image];

    /// Group of a parameter, from the scope prefix of its name. Shared
    /// tensors belong to the text group.
    pub fn of(name: &str) -> Result<Group> {
        match name.split_once('.').map(|(scope, _)| scope) {
            Some("text" | "shared") => Ok(Group::Text),
            Some("image") => Ok(Group::Image),
            _ => Err(Error::UnassignedParam(name.to_string())),
        }
    }
}

/// Indices into [`FusedModel::params`] per group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroups {
    pub text: Vec<usize>,
    pub image: Vec<usize>,
}

impl ParamGroups {
    pub fn members(&self, g: Group) -> &[usize] {
        match g {
            Group::Text => &self.text,
            Group::Image => &self.image,
        }
    }

    pub fn numel<T: Real>(&self, g: Group, params: &[Param<T>]) -> usize {
        self.members(g).iter().map(|&i| params[i].tensor.numel()).sum()
    }
}

/// Splits the parameters into a disjoint cover of text and image groups.
pub fn partition_params<T: Real>(model: &FusedModel<T>) -> Result<ParamGroups> {
    let mut groups = ParamGroups {
        text: Vec::new(),
        image: Vec::new(),
    };
    for (i, p) in model.params().iter().enumerate() {
        match Group::of(&p.name)? {
            Group::Text => groups.text.push(i),
            Group::Image => groups.image.push(i),
        }
    }
    debug_assert_eq!(groups.text.len() + groups.image.len(), model.params().len());
    Ok(groups)
}

/// AdamW moments and per-parameter update counters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: Vec<u64>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect(),
            t: vec![0; params.len()],
        }
    }
}

/// Scales the gradients of `groups` so that their joint L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(
    params: &mut [Param<T>],
    members: &[usize],
    max_norm: f64,
) -> f64 {
    let sq: f64 = members
        .iter()
        .filter_map(|&i| params[i].tensor.grad())
        .flat_map(|g| g.iter().map(|x| x.to_f64_lossy().powi(2)))
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for &i in members {
            let t = &mut params[i].tensor;
            if let Some(g) = t.grad() {
                let scaled: Vec<T> = g.iter().map(|&x| x * s).collect();
                t.zero_grad();
                t.accumulate_grad(&scaled);
            }
        }
    }
    norm
}

/// One bias-corrected AdamW update with decoupled weight decay, using the
/// learning rate each group has at `step`. Groups whose rate is zero are
/// skipped entirely. Returns the rates used, text first.
pub fn adamw_step<T: Real>(
    params: &mut [Param<T>],
    groups: &ParamGroups,
    state: &mut AdamState<T>,
    step: u64,
    cfg: &TrainConfig,
) -> [f64; 2] {
    let mut lrs = [0.0; 2];
    for (k, g) in Group::ALL.into_iter().enumerate() {
        let lr = lr_at_step(step, cfg, g);
        lrs[k] = lr;
        if lr == 0.0 {
            continue;
        }
        for &i in groups.members(g) {
            state.t[i] += 1;
            let t = state.t[i] as i32;
            let (b1, b2) = (cfg.beta1, cfg.beta2);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let tensor = &mut params[i].tensor;
            let grad: Vec<T> = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); tensor.numel()],
            };
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for (j, w) in tensor.data_mut().iter_mut().enumerate() {
                let gj = grad[j].to_f64_lossy();
                let mj = b1 * m[j].to_f64_lossy() + (1.0 - b1) * gj;
                let vj = b2 * v[j].to_f64_lossy() + (1.0 - b2) * gj * gj;
                m[j] = T::from_f64_lossy(mj);
                v[j] = T::from_f64_lossy(vj);
                let (mh, vh) = (m[j].to_f64_lossy() / c1, v[j].to_f64_lossy() / c2);
                let wj = w.to_f64_lossy();
                let upd = mh / (vh.sqrt() + cfg.adam_eps) + cfg.weight_decay * wj;
                *w = T::from_f64_lossy(wj - lr * upd);
            }
        }
    }
    lrs
}
