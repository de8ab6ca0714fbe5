use crate::error::Result;
use crate::model::{Token, TokenStream};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Next-token targets for every text position of the batch, in batch row
/// order. A position is predictable iff its successor is a text token.
pub fn lm_targets(streams: &[TokenStream]) -> (Vec<usize>, Vec<bool>) {
    let (mut targets, mut mask) = (Vec::new(), Vec::new());
    for s in streams {
        let toks = s.tokens();
        for (i, tok) in toks.iter().enumerate() {
            if !matches!(tok, Token::Text(_)) {
                continue;
            }
            match toks.get(i + 1) {
                Some(Token::Text(next)) => {
                    targets.push(*next as usize);
                    mask.push(true);
                }
                _ => {
                    targets.push(0);
                    mask.push(false);
                }
            }
        }
    }
    (targets, mask)
}

/// Mean next-token cross-entropy over predictable text positions. `logits`
/// is `None` for a batch without text.
pub fn lm_loss<T: Real>(tape: &mut Tape<T>, logits: Option<Var>, streams: &[TokenStream]) -> Result<Var> {
    match logits {
        Some(l) => {
            let (targets, mask) = lm_targets(streams);
            tape.cross_entropy_logits(l, &targets, &mask)
        }
        None => tape.constant(vec![1], vec![T::zero()]),
    }
}

/// Mean squared error between predicted and true noise over every latent
/// coordinate of the batch. `eps_true` lists the segments in batch order.
pub fn ddpm_loss<T: Real>(tape: &mut Tape<T>, eps_pred: Option<Var>, eps_true: &[Tensor<T>]) -> Result<Var> {
    match eps_pred {
        Some(p) if !eps_true.is_empty() => {
            let data: Vec<T> = eps_true.iter().flat_map(|e| e.data().iter().copied()).collect();
            let target = tape.constant(tape.shape(p).to_vec(), data)?;
            tape.mse(p, target)
        }
        _ => tape.constant(vec![1], vec![T::zero()]),
    }
}

/// `lm + lambda * ddpm` on the tape.
pub fn combined_loss<T: Real>(tape: &mut Tape<T>, lm: Var, ddpm: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(lm);
    }
    let weighted = tape.scale(ddpm, T::from_f64_lossy(lambda));
    tape.add(lm, weighted)
}

/// `lm + lambda * ddpm` on plain numbers.
pub fn combined(lm: f64, ddpm: f64, lambda: f64) -> f64 {
    lm + lambda * ddpm
}
