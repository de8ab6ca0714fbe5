//! Held-out text likelihood, oracle-scored generation, greedy captioning,
//! and the separation x learning-rate-ratio ablation grid.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::data::{caption_class, oracle_classify, Class, DataConfig, ToyDataset, VOCAB_SIZE};
use crate::diffusion::{sample_batch, SampleRequest};
use crate::error::{Error, Result};
use crate::model::{FusedModel, ModelConfig, Separation, TextWeights, TokenStream, BOI, BOS, EOS};
use crate::tensor::{Real, Tape};
use crate::train::{ddpm_loss, lm_loss, step_rng, StepMetrics, TrainConfig, Trainer};

/// Longest caption decoded greedily.
pub const CAPTION_CAP: usize = 12;
/// Declared in every report: what the toy metrics stand in for.
pub const METRIC_NOTE: &str =
    "toy metrics: template-oracle generation accuracy and caption attribute accuracy replace FID/CLIP/CIDEr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    /// Held-out pure-text streams.
    pub text_samples: usize,
    /// Held-out multimodal streams for the validation losses.
    pub val_samples: usize,
    pub gen_per_class: usize,
    /// Guidance weight reported next to `w = 1`.
    pub cfg_w: f64,
    pub caption_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 1_000_003,
            text_samples: 256,
            val_samples: 64,
            gen_per_class: 4,
            cfg_w: 1.55,
            caption_samples: 64,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.text_samples == 0 || self.val_samples == 0 {
            return Err(Error::Config("eval.text_samples and eval.val_samples must be positive".into()));
        }
        if !(self.cfg_w >= 0.0) {
            return Err(Error::Config("eval.cfg_w must be nonnegative".into()));
        }
        Ok(())
    }

    fn heldout(&self, data: &DataConfig) -> ToyDataset {
        ToyDataset::new(self.seed, data.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    pub text_nll: f64,
    pub text_acc: f64,
    pub lm_val_loss: f64,
    pub diffusion_val_loss: f64,
    /// `(w, accuracy)` pairs.
    pub gen_accuracy: Vec<(f64, f64)>,
    pub caption_acc: f64,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn gen_at(&self, w: f64) -> Option<f64> {
        self.gen_accuracy.iter().find(|(x, _)| *x == w).map(|(_, a)| *a)
    }
}

const EVAL_BATCH: usize = 64;

/// Teacher-forced mean NLL and argmax accuracy over predictable positions.
pub fn eval_text<T: Real>(model: &FusedModel<T>, streams: &[TokenStream]) -> Result<(f64, f64)> {
    if streams.is_empty() {
        return Err(Error::invalid("eval_text", "no held-out streams"));
    }
    let (mut nll, mut hits, mut count) = (0.0, 0usize, 0usize);
    for chunk in streams.chunks(EVAL_BATCH) {
        if chunk.iter().any(|s| !s.segments().is_empty()) {
            return Err(Error::invalid("eval_text", "held-out streams must be pure text"));
        }
        let preds = model.predict(chunk)?;
        for (s, p) in chunk.iter().zip(&preds) {
            let ids = s.text_ids();
            let v = p.logits.shape()[1];
            for i in 0..ids.len().saturating_sub(1) {
                let row: Vec<f64> = p.logits.row(i).iter().map(|x| x.to_f64_lossy()).collect();
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                let target = ids[i + 1] as usize;
                nll += lse - row[target];
                let argmax = (0..v).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                hits += (argmax == target) as usize;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid("eval_text", "no predictable positions"));
    }
    Ok((nll / count as f64, hits as f64 / count as f64))
}

/// LM and diffusion losses on held-out multimodal streams, noised with a
/// fixed seed.
pub fn eval_losses(trainer: &Trainer<f32>, streams: &[TokenStream], seed: u64) -> Result<(f64, f64)> {
    let (mut lm_sum, mut dd_sum, mut n) = (0.0, 0.0, 0.0);
    for (k, chunk) in streams.chunks(EVAL_BATCH).enumerate() {
        let mut batch = chunk.to_vec();
        let mut rng = step_rng(seed, k as u64);
        let eps = trainer.noise_batch(&mut batch, &mut rng)?;
        let mut tape = Tape::new();
        let out = trainer.model.forward(&mut tape, &batch, false)?;
        let lm = lm_loss(&mut tape, out.logits, &batch)?;
        let dd = ddpm_loss(&mut tape, out.eps, &eps)?;
        let w = chunk.len() as f64;
        lm_sum += tape.value(lm)[0] as f64 * w;
        dd_sum += tape.value(dd)[0] as f64 * w;
        n += w;
    }
    Ok((lm_sum / n, dd_sum / n))
}

/// `[BOS, a, color, shape, BOI]`.
pub fn class_prompt(class: Class) -> TokenStream {
    TokenStream::builder()
        .text(BOS)
        .texts(&crate::data::caption(class, None))
        .text(BOI)
        .build()
}

/// Oracle match rate of sampled images per guidance weight. Chain `k` of
/// class `c` uses the same noise for every weight.
pub fn eval_generation<T: Real>(
    model: &FusedModel<T>,
    data: &DataConfig,
    ws: &[f64],
    per_class: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(ws.len());
    let geom = data.geometry;
    for &w in ws {
        let mut reqs = Vec::new();
        let mut rngs = Vec::new();
        let mut want = Vec::new();
        for class in Class::all() {
            for k in 0..per_class {
                reqs.push(SampleRequest {
                    prompt: class_prompt(class),
                    w,
                });
                rngs.push(step_rng(seed, (class.index() * per_class + k) as u64));
                want.push(class);
            }
        }
        let mut hits = 0;
        for ((reqs, rngs), want) in reqs
            .chunks(EVAL_BATCH)
            .zip(rngs.chunks_mut(EVAL_BATCH))
            .zip(want.chunks(EVAL_BATCH))
        {
            let s = sample_batch(model, reqs, rngs)?;
            for (x, class) in s.latents.iter().zip(want) {
                let flat: Vec<f32> = x.data().iter().map(|v| v.to_f64_lossy() as f32).collect();
                let latent = geom.unpatchify(&flat)?;
                hits += (oracle_classify(&geom, &latent).class == Some(*class)) as usize;
            }
        }
        out.push((w, hits as f64 / want.len().max(1) as f64));
    }
    Ok(out)
}

/// Greedy continuation of each prompt until `EOS` or `cap` new tokens.
pub fn greedy_decode<T: Real>(model: &FusedModel<T>, prompts: &[TokenStream], cap: usize) -> Result<Vec<Vec<u32>>> {
    let mut streams = prompts.to_vec();
    let mut out = vec![Vec::new(); prompts.len()];
    let mut live: Vec<usize> = (0..prompts.len()).collect();
    let max_seq = model.config().max_seq;
    for _ in 0..cap {
        live.retain(|&i| streams[i].len() < max_seq);
        if live.is_empty() {
            break;
        }
        let batch: Vec<TokenStream> = live.iter().map(|&i| streams[i].clone()).collect();
        let preds = model.predict(&batch)?;
        let mut still = Vec::new();
        for (&i, p) in live.iter().zip(&preds) {
            let last = p.logits.row(p.logits.shape()[0] - 1);
            let next = (0..last.len()).fold(0, |b, j| if last[j] > last[b] { j } else { b }) as u32;
            out[i].push(next);
            streams[i].push_text(next);
            if next != EOS {
                still.push(i);
            }
        }
        live = still;
    }
    Ok(out)
}

/// Exact (color, shape) match rate of greedy captions for clean images
/// given as `[BOS, BOI, patches, EOI]`.
pub fn eval_captioning<T: Real>(model: &FusedModel<T>, data: &DataConfig, n: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return Ok(0.0);
    }
    let ds = ToyDataset::new(seed, data.clone());
    let mut prompts = Vec::with_capacity(n);
    let mut want = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let it = ds.item(i);
        let patches = data.geometry.patchify(&it.sample.latent)?;
        prompts.push(TokenStream::builder().text(BOS).image(patches, 0).build());
        want.push(it.sample.class);
    }
    let mut hits = 0;
    for (p, w) in prompts.chunks(EVAL_BATCH).zip(want.chunks(EVAL_BATCH)) {
        let decoded = greedy_decode(model, p, CAPTION_CAP)?;
        for (ids, class) in decoded.iter().zip(w) {
            let upto = ids.iter().position(|&t| t == EOS).unwrap_or(ids.len());
            hits += (caption_class(&ids[..upto]) == Some(*class)) as usize;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Held-out pure-text streams `[BOS, caption, EOS]`.
pub fn heldout_text(eval: &EvalConfig, data: &DataConfig) -> Vec<TokenStream> {
    eval.heldout(data).text_batch(0, eval.text_samples)
}

/// Held-out multimodal streams, never caption-dropped.
pub fn heldout_streams(eval: &EvalConfig, data: &DataConfig) -> Result<Vec<TokenStream>> {
    let cfg = DataConfig {
        caption_dropout: 0.0,
        ..data.clone()
    };
    ToyDataset::new(eval.seed ^ 0x5eed, cfg).batch(0, eval.val_samples)
}

/// Which axes an evaluation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Axes {
    pub generation: bool,
    pub captioning: bool,
}

impl Axes {
    pub const ALL: Axes = Axes {
        generation: true,
        captioning: true,
    };
    pub const TEXT_ONLY: Axes = Axes {
        generation: false,
        captioning: false,
    };
}

/// Runs the requested axes against the trainer's current weights.
pub fn evaluate(
    trainer: &Trainer<f32>,
    data: &DataConfig,
    eval: &EvalConfig,
    axes: Axes,
    fingerprint: &str,
) -> Result<EvalReport> {
    let model = &trainer.model;
    let (text_nll, text_acc) = eval_text(model, &heldout_text(eval, data))?;
    let (lm_val_loss, diffusion_val_loss) = eval_losses(trainer, &heldout_streams(eval, data)?, eval.seed)?;
    let gen_accuracy = if axes.generation {
        eval_generation(model, data, &[1.0, eval.cfg_w], eval.gen_per_class, eval.seed)?
    } else {
        Vec::new()
    };
    let caption_acc = if axes.captioning {
        eval_captioning(model, data, eval.caption_samples, eval.seed ^ 0xca9)?
    } else {
        f64::NAN
    };
    Ok(EvalReport {
        step: trainer.step,
        text_nll,
        text_acc,
        lm_val_loss,
        diffusion_val_loss,
        gen_accuracy,
        caption_acc,
        fingerprint: fingerprint.to_string(),
    })
}

/// Settings for pretraining the text-only base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub eta: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        BaseConfig {
            steps: 2000,
            batch_size: 16,
            eta: 3e-3,
            weight_decay: 0.1,
            seed: 7,
        }
    }
}

/// Trains a dense text-only model on the toy text corpus and returns its
/// weights. This stands in for the pretrained language model.
pub fn pretrain_base(model_cfg: &ModelConfig, cfg: &BaseConfig) -> Result<TextWeights<f32>> {
    let mcfg = model_cfg.clone().with_separation(Separation::Dense);
    let model = FusedModel::<f32>::init(&mcfg, cfg.seed, None)?;
    let tc = TrainConfig {
        eta_image: cfg.eta,
        lr_ratio: 1.0,
        lambda: 0.0,
        warmup_steps: (cfg.steps / 20).max(1),
        total_steps: cfg.steps.max(2),
        lr_final: cfg.eta * 0.15,
        batch_size: cfg.batch_size,
        weight_decay: cfg.weight_decay,
        seed: cfg.seed,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, tc)?;
    for step in 1..=cfg.steps {
        let start = (step - 1) * cfg.batch_size as u64;
        let batch: Vec<TokenStream> = (start..start + cfg.batch_size as u64)
            .map(|i| crate::data::base_text_stream(cfg.seed, i))
            .collect();
        trainer.train_step(&batch, &mut step_rng(cfg.seed, step))?;
    }
    Ok(trainer.model.text_weights())
}

/// A training run on the toy dataset: data item `i` and the noise of step
/// `k` are pure functions of the run seed, so resuming is exact.
#[derive(Clone, Debug)]
pub struct ToyRun {
    pub trainer: Trainer<f32>,
    pub data: ToyDataset,
}

impl ToyRun {
    pub fn new(trainer: Trainer<f32>, data: DataConfig) -> Self {
        let seed = trainer.cfg.seed;
        ToyRun {
            trainer,
            data: ToyDataset::new(seed, data),
        }
    }

    /// Streams of the batch used at (1-based) `step`.
    pub fn batch(&self, step: u64) -> Result<Vec<TokenStream>> {
        let b = self.trainer.cfg.batch_size;
        self.data.batch((step - 1) * b as u64, b)
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.trainer.step + 1;
        let batch = self.batch(step)?;
        let mut rng = step_rng(self.trainer.cfg.seed ^ 0x9e37_79b9, step);
        self.trainer.train_step(&batch, &mut rng)
    }
}

/// Stable 64-bit FNV-1a hash, used for fingerprints and batch identity.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn hash_streams(streams: &[TokenStream]) -> u64 {
    let mut buf = Vec::new();
    for s in streams {
        for t in s.tokens() {
            match t {
                crate::model::Token::Text(id) => buf.extend_from_slice(&id.to_le_bytes()),
                crate::model::Token::Patch(p) => {
                    for x in p {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        buf.push(0xff);
    }
    fnv1a(&buf)
}

/// The ablation design: separations x learning-rate ratios x seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub separations: Vec<Separation>,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub budget: u64,
    pub eval_every: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            separations: Separation::ALL.to_vec(),
            ratios: vec![0.0, 0.1, 1.0],
            seeds: vec![0, 1, 2],
            budget: 2000,
            eval_every: 200,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.separations.is_empty() || self.ratios.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("ablation grid must have at least one cell".into()));
        }
        if self.budget == 0 || self.eval_every == 0 {
            return Err(Error::Config("ablation.budget and ablation.eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// One row of a cell's time series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub step: u64,
    pub lm_loss: f64,
    pub ddpm_loss: f64,
    pub text_nll: f64,
    pub text_acc: f64,
    pub gen_acc_w1: f64,
    pub gen_acc_wcfg: f64,
    pub caption_acc: f64,
    pub lr_text: f64,
    pub lr_image: f64,
}

pub const CELL_CSV_HEADER: &str =
    "step,lm_loss,ddpm_loss,text_nll,text_acc,gen_acc_w1,gen_acc_wcfg,caption_acc,lr_text,lr_image";

impl CellRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.lm_loss,
            self.ddpm_loss,
            self.text_nll,
            self.text_acc,
            self.gen_acc_w1,
            self.gen_acc_wcfg,
            self.caption_acc,
            self.lr_text,
            self.lr_image
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub separation: Separation,
    pub ratio: f64,
    pub seed: u64,
    pub rows: Vec<CellRow>,
    pub first_batch_hash: u64,
    pub error: Option<String>,
}

impl CellResult {
    pub fn key(&self) -> String {
        format!("{}_r{}_s{}", self.separation.name(), self.ratio, self.seed)
    }

    pub fn first(&self) -> Option<&CellRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&CellRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{CELL_CSV_HEADER}").unwrap();
        for r in &self.rows {
            writeln!(s, "{}", r.csv()).unwrap();
        }
        s
    }
}

/// Everything a cell needs besides the grid coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub base: BaseConfig,
}

/// Trains one cell from the tied initialization and evaluates every
/// `eval_every` steps. The warmup keeps its share of the configured
/// schedule when the budget differs from `total_steps`. Generation and captioning run at the final
/// evaluation only.
pub fn run_cell(
    setup: &CellSetup,
    base: &TextWeights<f32>,
    separation: Separation,
    ratio: f64,
    seed: u64,
    grid: &AblationConfig,
) -> Result<CellResult> {
    let mcfg = setup.model.clone().with_separation(separation);
    let model = FusedModel::init(&mcfg, seed, Some(base))?;
    let tc = TrainConfig {
        lr_ratio: ratio,
        seed,
        total_steps: grid.budget,
        warmup_steps: (setup.train.warmup_steps * grid.budget / setup.train.total_steps.max(1))
            .min(grid.budget - 1),
        ..setup.train.clone()
    };
    let mut run = ToyRun::new(Trainer::new(model, tc)?, setup.data.clone());
    let first_batch_hash = hash_streams(&run.batch(1)?);
    let mut rows = Vec::new();
    let mut record = |run: &ToyRun, full: bool, lrs: (f64, f64)| -> Result<()> {
        let axes = if full { Axes::ALL } else { Axes::TEXT_ONLY };
        let r = evaluate(&run.trainer, &setup.data, &setup.eval, axes, "")?;
        let nan = f64::NAN;
        rows.push(CellRow {
            step: r.step,
            lm_loss: r.lm_val_loss,
            ddpm_loss: r.diffusion_val_loss,
            text_nll: r.text_nll,
            text_acc: r.text_acc,
            gen_acc_w1: r.gen_at(1.0).unwrap_or(nan),
            gen_acc_wcfg: r.gen_at(setup.eval.cfg_w).unwrap_or(nan),
            caption_acc: r.caption_acc,
            lr_text: lrs.0,
            lr_image: lrs.1,
        });
        Ok(())
    };
    record(&run, false, (0.0, 0.0))?;
    while run.trainer.step < grid.budget {
        let m = run.step()?;
        if m.step % grid.eval_every == 0 || m.step == grid.budget {
            record(&run, m.step == grid.budget, (m.lr_text, m.lr_image))?;
        }
    }
    Ok(CellResult {
        separation,
        ratio,
        seed,
        rows,
        first_batch_hash,
        error: None,
    })
}

/// The three directional findings, each with a pass flag and a one-line
/// explanation.
#[derive(Clone, Debug, PartialEq)]
pub struct Findings {
    pub forgetting: (bool, String),
    pub separation_order: (bool, String),
    pub frozen_text: (bool, String),
}

impl Findings {
    pub fn all_pass(&self) -> bool {
        self.forgetting.0 && self.separation_order.0 && self.frozen_text.0
    }

    pub fn summary(&self) -> String {
        let line = |name: &str, (ok, why): &(bool, String)| {
            format!("{name}: {} ({why})\n", if *ok { "PASS" } else { "FAIL" })
        };
        let mut s = format!("# {METRIC_NOTE}\n");
        s += &line("dense_text_forgetting", &self.forgetting);
        s += &line("separation_order_at_r0", &self.separation_order);
        s += &line("deep_r0_text_constant", &self.frozen_text);
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResults {
    pub cells: Vec<CellResult>,
}

impl AblationResults {
    fn cell(&self, sep: Separation, ratio: f64, seed: u64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.separation == sep && c.ratio == ratio && c.seed == seed && c.error.is_none())
    }

    /// Evaluates the three directional findings with a seed-majority vote
    /// for the ordering claims and an all-seeds check for exact invariants.
    pub fn findings(&self, grid: &AblationConfig) -> Findings {
        let seeds = &grid.seeds;
        let majority = seeds.len() / 2 + 1;
        let nll_rise = |sep, r, seed| {
            self.cell(sep, r, seed).and_then(|c| Some(c.last()?.text_nll - c.first()?.text_nll))
        };
        let gen = |sep, seed| self.cell(sep, 0.0, seed).and_then(|c| Some(c.last()?.gen_acc_wcfg));

        let mut votes = 0;
        let mut detail = Vec::new();
        for &s in seeds {
            match (nll_rise(Separation::Dense, 1.0, s), nll_rise(Separation::Dense, 0.1, s)) {
                (Some(a), Some(b)) => {
                    let ok = a > 0.0 && b < a;
                    votes += ok as usize;
                    detail.push(format!("seed {s}: rise r=1 {a:.4}, r=0.1 {b:.4}"));
                }
                _ => detail.push(format!("seed {s}: missing cells")),
            }
        }
        let forgetting = (votes >= majority, detail.join("; "));

        let mut votes = 0;
        let mut detail = Vec::new();
        for &s in seeds {
            match (gen(Separation::Deep, s), gen(Separation::Shallow, s), gen(Separation::Dense, s)) {
                (Some(d), Some(sh), Some(n)) => {
                    let ok = d >= sh && sh > n;
                    votes += ok as usize;
                    detail.push(format!("seed {s}: deep {d:.3} shallow {sh:.3} none {n:.3}"));
                }
                _ => detail.push(format!("seed {s}: missing cells")),
            }
        }
        let separation_order = (votes >= majority, detail.join("; "));

        let mut constant = true;
        let mut detail = Vec::new();
        for &s in seeds {
            match self.cell(Separation::Deep, 0.0, s) {
                Some(c) => {
                    let first = c.first().map(|r| (r.text_nll, r.text_acc));
                    let same = c.rows.iter().all(|r| Some((r.text_nll, r.text_acc)) == first);
                    constant &= same;
                    detail.push(format!("seed {s}: {}", if same { "constant" } else { "changed" }));
                }
                None => {
                    constant = false;
                    detail.push(format!("seed {s}: missing cell"));
                }
            }
        }
        Findings {
            forgetting,
            separation_order,
            frozen_text: (constant, detail.join("; ")),
        }
    }
}

/// Runs every cell of the grid on up to `threads` worker threads. A
/// failing cell is recorded with its error and the grid continues.
/// `on_cell` sees each result as it completes; the returned cells are in
/// grid order (seed, separation, ratio) whatever the thread count.
pub fn run_ablation(
    setup: &CellSetup,
    grid: &AblationConfig,
    threads: usize,
    mut on_cell: impl FnMut(&CellResult),
) -> Result<AblationResults> {
    grid.validate()?;
    let base = pretrain_base(&setup.model, &setup.base)?;
    let mut coords = Vec::new();
    for &seed in &grid.seeds {
        for &sep in &grid.separations {
            for &ratio in &grid.ratios {
                coords.push((sep, ratio, seed));
            }
        }
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    let mut slots: Vec<Option<CellResult>> = vec![None; coords.len()];
    thread::scope(|scope| {
        for _ in 0..threads.clamp(1, coords.len()) {
            let tx = tx.clone();
            let (next, coords, base) = (&next, &coords, &base);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(sep, ratio, seed)) = coords.get(i) else { break };
                let cell = run_cell(setup, base, sep, ratio, seed, grid).unwrap_or_else(|e| CellResult {
                    separation: sep,
                    ratio,
                    seed,
                    rows: Vec::new(),
                    first_batch_hash: 0,
                    error: Some(e.to_string()),
                });
                if tx.send((i, cell)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, cell) in rx {
            on_cell(&cell);
            slots[i] = Some(cell);
        }
    });
    Ok(AblationResults {
        cells: slots.into_iter().flatten().collect(),
    })
}

/// Text vocabulary size the toy dataset needs.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB_SIZE,
        ..ModelConfig::desk()
    }
}
