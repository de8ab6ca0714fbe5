use modalfuse::data::{DataConfig, ToyDataset};
use modalfuse::model::{FusedModel, ModelConfig, Separation, TokenStream, BOI, BOS, EOI, EOS};
use modalfuse::tensor::{Tape, Tensor};
use modalfuse::train::{
    combined, combined_loss, ddpm_loss, gradcheck_model, lm_targets, lr_at_step, step_rng, Group,
    TrainConfig, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn toy_cfg(sep: Separation) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        ffn_hidden: 24,
        vocab_size: 24,
        patch_dim: 16,
        patches_per_image: 4,
        diffusion_steps: 20,
        separation: sep,
        max_seq: 24,
    }
}

fn toy_batch(step: u64, n: usize) -> Vec<TokenStream> {
    let ds = ToyDataset::new(3, DataConfig::default());
    ds.batch(step * n as u64, n).unwrap()
}

fn train_cfg(lr_ratio: f64, lambda: f64, steps: u64) -> TrainConfig {
    TrainConfig {
        lambda,
        eta_image: 3e-3,
        lr_ratio,
        warmup_steps: 2,
        total_steps: steps,
        lr_final: 3e-4,
        batch_size: 4,
        ..Default::default()
    }
}

fn run(model: FusedModel<f32>, cfg: TrainConfig, steps: u64) -> Trainer<f32> {
    let mut tr = Trainer::new(model, cfg).unwrap();
    for s in 0..steps {
        let batch = toy_batch(s, 4);
        tr.train_step(&batch, &mut step_rng(11, s)).unwrap();
    }
    tr
}

fn text_snapshot(m: &FusedModel<f32>) -> Vec<(String, Vec<f32>)> {
    m.params()
        .iter()
        .filter(|p| Group::of(&p.name).unwrap() == Group::Text)
        .map(|p| (p.name.clone(), p.tensor.data().to_vec()))
        .collect()
}

#[test]
fn zero_ratio_leaves_every_text_weight_bitwise_unchanged() {
    for sep in Separation::ALL {
        let m = FusedModel::<f32>::init(&toy_cfg(sep), 0, None).unwrap();
        let before = text_snapshot(&m);
        let image_before: Vec<f32> = m.param("image.down").unwrap().tensor.data().to_vec();
        let tr = run(m, train_cfg(0.0, 1.0, 6), 6);
        assert_eq!(text_snapshot(&tr.model), before, "{sep:?}");
        assert_ne!(tr.model.param("image.down").unwrap().tensor.data(), &image_before[..]);
        assert!(tr.opt.t.iter().zip(tr.model.params()).all(|(&t, p)| {
            (Group::of(&p.name).unwrap() == Group::Text) == (t == 0)
        }));
    }
}

#[test]
fn pure_text_without_diffusion_weight_leaves_projectors_unchanged() {
    let m = FusedModel::<f32>::init(&toy_cfg(Separation::Deep), 1, None).unwrap();
    let down = m.param("image.down").unwrap().tensor.clone();
    let up = m.param("image.up").unwrap().tensor.clone();
    let mut tr = Trainer::new(m, train_cfg(1.0, 0.0, 5)).unwrap();
    let ds = ToyDataset::new(5, DataConfig::default());
    for s in 0..5 {
        let batch = ds.text_batch(s * 4, 4);
        let before = text_snapshot(&tr.model);
        let met = tr.train_step(&batch, &mut step_rng(0, s)).unwrap();
        assert_eq!(met.ddpm_loss, 0.0);
        if s > 0 {
            assert_ne!(text_snapshot(&tr.model), before);
        }
    }
    assert_eq!(tr.model.param("image.down").unwrap().tensor.data(), down.data());
    assert_eq!(tr.model.param("image.up").unwrap().tensor.data(), up.data());
}

#[test]
fn identical_seeds_give_identical_runs() {
    let make = || FusedModel::<f32>::init(&toy_cfg(Separation::Deep), 4, None).unwrap();
    let a = run(make(), train_cfg(0.1, 1.0, 5), 5);
    let b = run(make(), train_cfg(0.1, 1.0, 5), 5);
    for (p, q) in a.model.params().iter().zip(b.model.params()) {
        assert_eq!(p.tensor.data(), q.tensor.data(), "{}", p.name);
    }
    assert_eq!(a.opt, b.opt);
}

#[test]
fn training_reduces_the_combined_loss_on_a_fixed_batch() {
    let m = FusedModel::<f32>::init(&toy_cfg(Separation::Deep), 2, None).unwrap();
    let cfg = TrainConfig {
        lr_ratio: 1.0,
        ..train_cfg(1.0, 1.0, 60)
    };
    let mut tr = Trainer::new(m, cfg).unwrap();
    let batch = toy_batch(0, 8);
    let first = tr.train_step(&batch, &mut step_rng(1, 0)).unwrap().combined;
    let mut last = first;
    for s in 1..60 {
        last = tr.train_step(&batch, &mut step_rng(1, 0)).unwrap().combined;
        assert!(last.is_finite(), "step {s}");
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}

/// With `r = 1` and no separation the two groups move in lockstep, so the
/// run must match plain AdamW over one flat parameter vector.
#[test]
fn unit_ratio_matches_a_single_group_adamw() {
    let steps = 4;
    let cfg = TrainConfig {
        weight_decay: 0.05,
        ..train_cfg(1.0, 1.0, steps)
    };
    let m = FusedModel::<f64>::init(&toy_cfg(Separation::Dense), 6, None).unwrap();
    let mut tr = Trainer::new(m.clone(), cfg.clone()).unwrap();
    let mut probe = Trainer::new(m, cfg.clone()).unwrap();

    let n: usize = probe.model.params().iter().map(|p| p.tensor.numel()).sum();
    let mut w: Vec<f64> = probe.model.params().iter().flat_map(|p| p.tensor.data().to_vec()).collect();
    let (mut mo, mut vo) = (vec![0.0; n], vec![0.0; n]);

    for s in 0..steps {
        let batch = toy_batch(s, 4);
        tr.train_step(&batch, &mut step_rng(2, s)).unwrap();

        let mut noisy = batch.clone();
        let eps = probe.noise_batch(&mut noisy, &mut step_rng(2, s)).unwrap();
        probe.model.zero_grads();
        probe.accumulate_gradients(&noisy, &eps).unwrap();
        let mut g: Vec<f64> = probe
            .model
            .params()
            .iter()
            .flat_map(|p| p.tensor.grad().map(<[f64]>::to_vec).unwrap_or(vec![0.0; p.tensor.numel()]))
            .collect();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            g.iter_mut().for_each(|x| *x *= cfg.grad_clip / norm);
        }
        let k = (s + 1) as i32;
        let lr = lr_at_step(s + 1, &cfg, Group::Image);
        for j in 0..n {
            mo[j] = cfg.beta1 * mo[j] + (1.0 - cfg.beta1) * g[j];
            vo[j] = cfg.beta2 * vo[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = mo[j] / (1.0 - cfg.beta1.powi(k));
            let vh = vo[j] / (1.0 - cfg.beta2.powi(k));
            w[j] -= lr * (mh / (vh.sqrt() + cfg.adam_eps) + cfg.weight_decay * w[j]);
        }
        let mut off = 0;
        for p in probe.model.params_mut() {
            let len = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&w[off..off + len]);
            off += len;
        }
    }
    let got: Vec<f64> = tr.model.params().iter().flat_map(|p| p.tensor.data().to_vec()).collect();
    let worst = got.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn lm_targets_skip_positions_followed_by_patches() {
    let patches = vec![vec![0.0f32; 2]; 2];
    let s = TokenStream::builder().text(7).image(patches, 0).text(8).build();
    assert_eq!(s.text_ids(), vec![7, BOI, EOI, 8]);
    let (targets, mask) = lm_targets(&[s]);
    assert_eq!(mask, vec![true, false, true, false]);
    assert_eq!(targets[0], BOI as usize);
    assert_eq!(targets[2], 8);
}

#[test]
fn ddpm_loss_is_the_mean_square_over_all_segments() {
    let mut tape = Tape::<f64>::new();
    let pred = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let truth = [
        Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(),
        Tensor::new(vec![1, 2], vec![3.0, 2.0]).unwrap(),
    ];
    let l = ddpm_loss(&mut tape, Some(pred), &truth).unwrap();
    assert!((tape.value(l)[0] - (1.0 + 4.0 + 0.0 + 4.0) / 4.0).abs() < 1e-15);

    let none = ddpm_loss::<f64>(&mut tape, None, &[]).unwrap();
    assert_eq!(tape.value(none)[0], 0.0);
}

#[test]
fn combined_loss_weights_the_diffusion_term() {
    assert_eq!(combined(2.0, 3.0, 5.0), 17.0);
    let mut tape = Tape::<f64>::new();
    let lm = tape.constant(vec![1], vec![2.0]).unwrap();
    let dd = tape.constant(vec![1], vec![3.0]).unwrap();
    let c = combined_loss(&mut tape, lm, dd, 5.0).unwrap();
    assert_eq!(tape.value(c)[0], 17.0);
}

fn random_config(rng: &mut impl Rng) -> ModelConfig {
    let heads = rng.random_range(1..=2);
    let hd = 2 * rng.random_range(1..=2);
    ModelConfig {
        n_layers: 1,
        d_model: heads * hd,
        n_heads: heads,
        ffn_hidden: rng.random_range(2..=6),
        vocab_size: 8,
        patch_dim: rng.random_range(1..=3),
        patches_per_image: rng.random_range(1..=2),
        diffusion_steps: 5,
        separation: Separation::ALL[rng.random_range(0..3)],
        max_seq: 12,
    }
}

fn random_batch(rng: &mut impl Rng, cfg: &ModelConfig) -> Vec<TokenStream> {
    (0..2)
        .map(|_| {
            let ps = (0..cfg.patches_per_image)
                .map(|_| (0..cfg.patch_dim).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            let mut b = TokenStream::builder().texts(&[BOS, rng.random_range(5..8)]);
            b = b.image(ps, 0);
            b.texts(&[rng.random_range(5..8), EOS]).build()
        })
        .collect()
}

#[test]
fn model_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..25 {
        let cfg = random_config(&mut rng);
        let mut m = FusedModel::<f64>::init(&cfg, case, None).unwrap();
        for p in m.params_mut() {
            for x in p.tensor.data_mut() {
                *x = rng.random_range(-0.6..0.6);
            }
        }
        let mut batch = random_batch(&mut rng, &cfg);
        let tr = Trainer::new(m, TrainConfig { warmup_steps: 0, total_steps: 1, ..Default::default() }).unwrap();
        let eps = tr.noise_batch(&mut batch, &mut rng).unwrap();
        let err = gradcheck_model(&tr.model, &batch, &eps, 1.7, 1e-2).unwrap();
        assert!(err <= 1e-4, "case {case} {cfg:?}: {err}");
    }
}
