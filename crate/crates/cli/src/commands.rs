//! The four subcommands. Each returns an error carrying its exit code;
//! nothing is created on disk before the inputs have been validated.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use modalfuse::data::{encode, oracle_classify, Geometry};
use modalfuse::diffusion::{sample_batch, SampleRequest};
use modalfuse::eval::{
    evaluate, pretrain_base, run_ablation, Axes, CellSetup, EvalReport, ToyRun, CELL_CSV_HEADER,
    METRIC_NOTE,
};
use modalfuse::model::{FusedModel, TokenStream, BOI, BOS};
use modalfuse::train::{step_rng, StepMetrics, Trainer};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::fsio::{write_atomic, RunLock};

pub const METRICS_HEADER: &str = "step,lm_loss,ddpm_loss,combined,lr_text,lr_image,grad_norm";

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    RunConfig::parse(&text, &path.display().to_string())
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:08}.mfc"))
}

fn metrics_row(m: &StepMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        m.step, m.lm_loss, m.ddpm_loss, m.combined, m.lr_text, m.lr_image, m.grad_norm
    )
}

fn fingerprint_line(fp: &str) -> String {
    format!("# fingerprint {fp}\n")
}

fn with_fingerprint(fp: &str, body: &str) -> String {
    fingerprint_line(fp) + body
}

/// Comment lines opening every CSV: fingerprint, diffusion loss weight and,
/// for evaluation outputs, what the toy metrics stand in for.
fn csv_preamble(fp: &str, lambda: f64, metric_note: bool) -> String {
    let mut s = fingerprint_line(fp) + &format!("# lambda {lambda}\n");
    if metric_note {
        s += &format!("# {METRIC_NOTE}\n");
    }
    s
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(format!("cannot create {}", dir.display())))
}

pub struct TrainArgs {
    pub config: RunConfig,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Stop after this step, as if interrupted right after a checkpoint.
    pub stop_after: Option<u64>,
}

/// Rows of an existing metrics log up to and including `step`.
fn metrics_until(path: &Path, preamble: &str, step: u64) -> Vec<String> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    let Some(rest) = text.strip_prefix(preamble) else {
        return Vec::new();
    };
    let mut lines = rest.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Vec::new();
    }
    lines
        .take_while(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step))
        .map(str::to_string)
        .collect()
}

/// Fresh trainer whose text weights come from the base model, exactly as
/// an ablation cell starts.
fn initial_trainer(cfg: &RunConfig) -> Result<Trainer<f32>, CliError> {
    if cfg.base.steps > 0 {
        eprintln!("pretraining the base language model for {} steps", cfg.base.steps);
    }
    let base = pretrain_base(&cfg.model, &cfg.base)?;
    let model = FusedModel::init(&cfg.model, cfg.train.seed, Some(&base))?;
    Ok(Trainer::new(model, cfg.train.clone())?)
}

/// Trains for `train.total_steps`, writing the effective config, a
/// metrics CSV and checkpoints into the run directory.
pub fn cmd_train(args: TrainArgs) -> Result<PathBuf, CliError> {
    let mut cfg = args.config;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.run.out_dir = out;
    }
    let fp = cfg.fingerprint();
    let resume = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.fingerprint != fp {
                return Err(CheckpointError::Fingerprint {
                    checkpoint: ck.fingerprint,
                    config: fp,
                }
                .into());
            }
            Some(ck)
        }
        None => None,
    };

    let dir = cfg.run.out_dir.clone();
    create_dir(&dir)?;
    let _lock = RunLock::acquire(&dir)?;
    write_atomic(&dir.join("config.txt"), with_fingerprint(&fp, &cfg.render()).as_bytes())?;
    let metrics_path = dir.join("metrics.csv");
    let preamble = csv_preamble(&fp, cfg.train.lambda, false);

    let (trainer, mut rows) = match resume {
        Some(ck) => {
            eprintln!("resuming at step {}", ck.step);
            let rows = metrics_until(&metrics_path, &preamble, ck.step);
            (ck.restore(&cfg)?, rows)
        }
        None => (initial_trainer(&cfg)?, Vec::new()),
    };
    let mut run = ToyRun::new(trainer, cfg.data.clone());

    let save = |run: &ToyRun, rows: &[String]| -> Result<(), CliError> {
        let mut csv = preamble.clone() + METRICS_HEADER;
        csv.push('\n');
        for r in rows {
            csv += r;
            csv.push('\n');
        }
        // Metrics first: a checkpoint on disk then always has its rows
        // logged, and resume drops any rows past the checkpoint.
        write_atomic(&metrics_path, csv.as_bytes())?;
        Checkpoint::capture(&run.trainer, &cfg).save(&checkpoint_path(&dir, run.trainer.step))
    };
    if run.trainer.step == 0 {
        save(&run, &rows)?;
    }
    let total = cfg.train.total_steps;
    let every = cfg.run.checkpoint_every;
    while run.trainer.step < total {
        let m = run.step()?;
        if !(m.combined.is_finite() && run.trainer.model.is_finite()) {
            return Err(CliError::Diverged(m.step));
        }
        rows.push(metrics_row(&m));
        if m.step % 100 == 0 {
            eprintln!("step {} lm {:.4} ddpm {:.4}", m.step, m.lm_loss, m.ddpm_loss);
        }
        let stop = args.stop_after == Some(m.step);
        if (every > 0 && m.step % every == 0) || m.step == total || stop {
            save(&run, &rows)?;
        }
        if stop {
            break;
        }
    }
    Ok(dir)
}

pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub prompt: String,
    pub w: f64,
    pub count: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Plain PGM of a latent mapped from [-1, 1] to [0, 255]; channels are
/// stacked vertically.
pub fn latent_pgm(geom: &Geometry, latent: &[f32], comments: &[String]) -> String {
    let mut s = String::from("P2\n");
    for c in comments {
        writeln!(s, "# {c}").unwrap();
    }
    writeln!(s, "{} {}\n255", geom.size, geom.size * geom.channels).unwrap();
    for row in latent.chunks(geom.size) {
        let px: Vec<String> = row
            .iter()
            .map(|&x| (((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8).to_string())
            .collect();
        writeln!(s, "{}", px.join(" ")).unwrap();
    }
    s
}

/// Samples `count` images for a caption and writes each as a PGM with an
/// `.oracle` sidecar. Returns the image paths.
pub fn cmd_sample(args: SampleArgs) -> Result<Vec<PathBuf>, CliError> {
    let ids = encode(&args.prompt)?;
    if !(args.w >= 0.0) {
        return Err(CliError::Config(format!("--w must be nonnegative, got {}", args.w)));
    }
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = ck.run_config()?;
    let trainer = ck.restore(&cfg)?;
    let prompt = TokenStream::builder().text(BOS).texts(&ids).text(BOI).build();
    let requests: Vec<SampleRequest> = (0..args.count)
        .map(|_| SampleRequest {
            prompt: prompt.clone(),
            w: args.w,
        })
        .collect();
    let mut rngs: Vec<_> = (0..args.count as u64).map(|k| step_rng(args.seed, k)).collect();
    let samples = sample_batch(&trainer.model, &requests, &mut rngs)?;

    create_dir(&args.out)?;
    let geom = cfg.data.geometry;
    let slug = args.prompt.split_whitespace().collect::<Vec<_>>().join("_");
    let mut paths = Vec::new();
    for (k, x) in samples.latents.iter().enumerate() {
        let latent = geom.unpatchify(x.data())?;
        let stem = format!("{slug}_s{}_{k}_w{:.2}", args.seed, args.w);
        let comments = [
            format!("fingerprint {}", ck.fingerprint),
            format!("prompt \"{}\" w {} seed {} index {k} step {}", args.prompt, args.w, args.seed, ck.step),
        ];
        let pgm = args.out.join(format!("{stem}.pgm"));
        write_atomic(&pgm, latent_pgm(&geom, &latent, &comments).as_bytes())?;
        let v = oracle_classify(&geom, &latent);
        let verdict = match v.class {
            Some(c) => format!("{} {} distance {:.6}", c.color, c.shape, v.distance),
            None => format!("reject distance {:.6}", v.distance),
        };
        let side = format!("# fingerprint {}\n{verdict}\n", ck.fingerprint);
        write_atomic(&args.out.join(format!("{stem}.oracle")), side.as_bytes())?;
        paths.push(pgm);
    }
    Ok(paths)
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// Overrides the `eval.*` and `data.*` settings stored in the checkpoint.
    pub config: Option<RunConfig>,
    pub out: Option<PathBuf>,
}

pub const EVAL_CSV_HEADER: &str =
    "step,text_nll,text_acc,lm_val_loss,diffusion_val_loss,gen_acc_w1,gen_acc_wcfg,cfg_w,caption_acc";

pub fn report_csv(r: &EvalReport, cfg_w: f64, lambda: f64) -> String {
    let gen = |w| r.gen_at(w).unwrap_or(f64::NAN);
    format!(
        "{}{EVAL_CSV_HEADER}\n{},{},{},{},{},{},{},{},{}\n",
        csv_preamble(&r.fingerprint, lambda, true),
        r.step,
        r.text_nll,
        r.text_acc,
        r.lm_val_loss,
        r.diffusion_val_loss,
        gen(1.0),
        gen(cfg_w),
        cfg_w,
        r.caption_acc
    )
}

pub fn report_summary(r: &EvalReport) -> String {
    let mut s = format!("# {METRIC_NOTE}\nfingerprint {}\nstep {}\n", r.fingerprint, r.step);
    writeln!(s, "text: held-out NLL {:.6}, next-token accuracy {:.4}", r.text_nll, r.text_acc).unwrap();
    writeln!(s, "validation: lm {:.6}, diffusion {:.6}", r.lm_val_loss, r.diffusion_val_loss).unwrap();
    for (w, a) in &r.gen_accuracy {
        writeln!(s, "generation: oracle accuracy {a:.4} at w = {w}").unwrap();
    }
    writeln!(s, "captioning: attribute accuracy {:.4}", r.caption_acc).unwrap();
    s
}

/// Evaluates a checkpoint on all three axes; writes `eval_<step>.csv` and
/// `eval_<step>.txt`.
pub fn cmd_eval(args: EvalArgs) -> Result<(EvalReport, PathBuf), CliError> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = ck.run_config()?;
    if let Some(over) = args.config {
        cfg.eval = over.eval;
        cfg.data = over.data;
        cfg.validate()?;
    }
    let trainer = ck.restore(&cfg)?;
    let fp = cfg.fingerprint();
    let report = evaluate(&trainer, &cfg.data, &cfg.eval, Axes::ALL, &fp)?;
    let out = args
        .out
        .or_else(|| args.checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    create_dir(&out)?;
    let stem = format!("eval_{:08}", report.step);
    let csv = out.join(format!("{stem}.csv"));
    write_atomic(&csv, report_csv(&report, cfg.eval.cfg_w, cfg.train.lambda).as_bytes())?;
    write_atomic(&out.join(format!("{stem}.txt")), report_summary(&report).as_bytes())?;
    Ok((report, csv))
}

pub struct AblateArgs {
    pub config: RunConfig,
    pub out: Option<PathBuf>,
    pub threads: usize,
}

/// Worker threads allowed by `MODALFUSE_THREADS`, else the machine's
/// parallelism.
pub fn thread_cap() -> usize {
    std::env::var("MODALFUSE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs the ablation grid; writes one CSV per (separation, ratio) cell
/// with a row block per seed, and `summary.txt`. Fails with the findings
/// when any of them does not hold.
pub fn cmd_ablate(args: AblateArgs) -> Result<PathBuf, CliError> {
    let mut cfg = args.config;
    if let Some(out) = args.out {
        cfg.run.out_dir = out;
    }
    let fp = cfg.fingerprint();
    let dir = cfg.run.out_dir.clone();
    create_dir(&dir)?;
    let _lock = RunLock::acquire(&dir)?;
    write_atomic(&dir.join("config.txt"), with_fingerprint(&fp, &cfg.render()).as_bytes())?;
    let setup = CellSetup {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        data: cfg.data.clone(),
        eval: cfg.eval.clone(),
        base: cfg.base.clone(),
    };
    let grid = &cfg.ablation;
    let results = run_ablation(&setup, grid, args.threads, |c| match &c.error {
        None => eprintln!("cell {} done", c.key()),
        Some(e) => eprintln!("cell {} failed: {e}", c.key()),
    })?;

    let mut summary = String::new();
    for &sep in &grid.separations {
        for &ratio in &grid.ratios {
            let mut csv = csv_preamble(&fp, cfg.train.lambda, true) + &format!("seed,{CELL_CSV_HEADER}\n");
            for c in results.cells.iter().filter(|c| c.separation == sep && c.ratio == ratio) {
                for r in &c.rows {
                    writeln!(csv, "{},{}", c.seed, r.csv()).unwrap();
                }
                match (&c.error, c.first(), c.last()) {
                    (Some(e), _, _) => writeln!(summary, "{}: FAILED {e}", c.key()).unwrap(),
                    (None, Some(a), Some(b)) => writeln!(
                        summary,
                        "{}: text_nll {:.6} -> {:.6}, gen w1 {:.3}, gen w{} {:.3}, caption {:.3}",
                        c.key(),
                        a.text_nll,
                        b.text_nll,
                        b.gen_acc_w1,
                        cfg.eval.cfg_w,
                        b.gen_acc_wcfg,
                        b.caption_acc
                    )
                    .unwrap(),
                    _ => {}
                }
            }
            write_atomic(&dir.join(format!("{}_r{ratio}.csv", sep.name())), csv.as_bytes())?;
        }
    }
    let findings = results.findings(grid);
    let text = format!("{}{}\n{summary}", fingerprint_line(&fp), findings.summary());
    write_atomic(&dir.join("summary.txt"), text.as_bytes())?;
    if findings.all_pass() {
        Ok(dir)
    } else {
        Err(CliError::Findings(findings.summary()))
    }
}
