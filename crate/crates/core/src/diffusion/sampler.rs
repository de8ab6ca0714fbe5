//! Ancestral sampling of an image segment appended to a prompt.

use rand::Rng;

use super::{cfg_combine, standard_normal, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::model::{FusedModel, Token, TokenStream, BOI, BOS, EOI, NULL};
use crate::tensor::{Real, Tensor};

/// One chain: a prompt ending in `BOI` and its guidance weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    pub prompt: TokenStream,
    pub w: f64,
}

impl SampleRequest {
    /// `[BOS, NULL, BOI]`: the caption replaced by the null token.
    pub fn unconditional(&self) -> TokenStream {
        TokenStream::builder().texts(&[BOS, NULL, BOI]).build()
    }
}

/// Result of a batched sampling run.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples<T> {
    /// Final latents, `[patches_per_image × patch_dim]` per chain.
    pub latents: Vec<Tensor<T>>,
    /// Number of single-stream model evaluations performed.
    pub stream_evals: usize,
}

fn with_latent<T: Real>(prompt: &TokenStream, x: &Tensor<T>, t: usize) -> TokenStream {
    let mut tokens = prompt.tokens().to_vec();
    let mut segs: Vec<usize> = prompt.segments().iter().map(|s| s.t).collect();
    let pd = x.shape()[1];
    for r in 0..x.shape()[0] {
        let row = x.data()[r * pd..(r + 1) * pd]
            .iter()
            .map(|v| v.to_f64_lossy() as f32)
            .collect();
        tokens.push(Token::Patch(row));
    }
    tokens.push(Token::Text(EOI));
    segs.push(t);
    TokenStream::from_tokens(tokens, &segs).expect("appended segment is well formed")
}

/// Runs `t = T..1` for every chain in lockstep. Chain `i` draws all of its
/// noise from `rngs[i]`.
pub fn sample_batch<T: Real, R: Rng>(
    model: &FusedModel<T>,
    requests: &[SampleRequest],
    rngs: &mut [R],
) -> Result<Samples<T>> {
    if requests.len() != rngs.len() {
        return Err(Error::invalid("sample_loop", "one rng per request is required"));
    }
    let cfg = model.config();
    for r in requests {
        if !(r.w >= 0.0) {
            return Err(Error::invalid("sample_loop", format!("guidance weight {} < 0", r.w)));
        }
        if r.prompt.tokens().last() != Some(&Token::Text(BOI)) {
            return Err(Error::InvalidStream("prompt must end with BOI".into()));
        }
    }
    let schedule = DiffusionSchedule::cosine(cfg.diffusion_steps)?;
    let shape = [cfg.patches_per_image, cfg.patch_dim];
    let mut xs: Vec<Tensor<T>> = rngs.iter_mut().map(|rng| standard_normal(&shape, rng)).collect();
    let uncond: Vec<Option<TokenStream>> = requests
        .iter()
        .map(|r| (r.w != 1.0).then(|| r.unconditional()))
        .collect();
    let mut evals = 0;
    for t in (1..=schedule.steps()).rev() {
        let mut batch = Vec::new();
        for (i, r) in requests.iter().enumerate() {
            batch.push(with_latent(&r.prompt, &xs[i], t));
            if let Some(u) = &uncond[i] {
                batch.push(with_latent(u, &xs[i], t));
            }
        }
        evals += batch.len();
        let preds = model.predict(&batch)?;
        let mut it = preds.into_iter();
        for (i, r) in requests.iter().enumerate() {
            let mut cond = it.next().expect("one prediction per stream");
            let eps_c = cond.eps.pop().expect("prompt ends in a fresh segment");
            let eps = match &uncond[i] {
                Some(_) => {
                    let mut u = it.next().expect("unconditional prediction");
                    cfg_combine(&eps_c, &u.eps.pop().expect("segment"), r.w)?
                }
                None => eps_c,
            };
            xs[i] = schedule.ddpm_step(&xs[i], &eps, t, &mut rngs[i])?;
        }
    }
    Ok(Samples {
        latents: xs,
        stream_evals: evals,
    })
}

/// Samples one latent for `prompt` with guidance weight `w`.
pub fn sample_loop<T: Real, R: Rng>(
    model: &FusedModel<T>,
    prompt: &TokenStream,
    w: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let req = SampleRequest {
        prompt: prompt.clone(),
        w,
    };
    let mut s = sample_batch(model, std::slice::from_ref(&req), std::slice::from_mut(rng))?;
    Ok(s.latents.pop().expect("one chain"))
}
