use super::{combined_loss, ddpm_loss, lm_loss};
use crate::error::Result;
use crate::model::{FusedModel, TokenStream};
use crate::tensor::{relative_error, Tape, Tensor};

fn loss_value(model: &FusedModel<f64>, batch: &[TokenStream], eps: &[Tensor<f64>], lambda: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch, false)?;
    let lm = lm_loss(&mut tape, out.logits, batch)?;
    let dd = ddpm_loss(&mut tape, out.eps, eps)?;
    let total = combined_loss(&mut tape, lm, dd, lambda)?;
    Ok(tape.value(total)[0])
}

/// Worst relative error, over every parameter coordinate, between the tape
/// gradient of the combined loss and central differences at steps `h`,
/// `h/2` and `h/4`, extrapolated twice (Richardson) to cancel the `h^2` and
/// `h^4` error terms. The larger base step keeps cancellation noise well
/// below tiny gradients.
/// `batch` must already be noised, with `eps` the noise drawn per segment.
pub fn gradcheck_model(
    model: &FusedModel<f64>,
    batch: &[TokenStream],
    eps: &[Tensor<f64>],
    lambda: f64,
    h: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch, true)?;
    let lm = lm_loss(&mut tape, out.logits, batch)?;
    let dd = ddpm_loss(&mut tape, out.eps, eps)?;
    let total = combined_loss(&mut tape, lm, dd, lambda)?;
    let grads = tape.backward(total)?;

    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (k, v) in out.params.iter().enumerate() {
        let n = model.params()[k].tensor.numel();
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = probe.params()[k].tensor.data()[i];
            let mut central = |step: f64| -> Result<f64> {
                probe.params_mut()[k].tensor.data_mut()[i] = orig + step;
                let plus = loss_value(&probe, batch, eps, lambda)?;
                probe.params_mut()[k].tensor.data_mut()[i] = orig - step;
                let minus = loss_value(&probe, batch, eps, lambda)?;
                probe.params_mut()[k].tensor.data_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * step))
            };
            let (c1, c2, c4) = (central(h)?, central(h / 2.0)?, central(h / 4.0)?);
            let (r1, r2) = ((4.0 * c2 - c1) / 3.0, (4.0 * c4 - c2) / 3.0);
            let numeric = (16.0 * r2 - r1) / 15.0;
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    Ok(worst)
}
