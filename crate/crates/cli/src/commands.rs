use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use unitflow::benchkit::{build_corpus, evaluate_with_samples, CorpusManifest, EvalReport, SAMPLES_DIR};
use unitflow::dsp::{log_mel, mel_to_audio, resample, trim_silence, SAMPLE_RATE};
use unitflow::sampler::{estimate_target_frames, generate, GenerationRequest, OdeMethod, RequestCond};
use unitflow::trainer::{load_checkpoint, run_stage, Checkpoint, Dataset, RunOptions, FINAL_CHECKPOINT};
use unitflow::units::{assign, collapse, fit_kmeans_with};
use unitflow::vfnet::FieldNet;
use unitflow::{io, pipeline, Codebook, InputMode, RunConfig, Stage, SwayConfig};

use crate::args::*;
use crate::error::{CliError, CliResult};
use crate::rundir;

pub const CORPUS_DIR: &str = "corpus";
pub const CODEBOOK_FILE: &str = "codebook.ufcbk";
pub const EVAL_FILE: &str = "eval.json";

struct Ctx {
    cfg: RunConfig,
    /// Config before subcommand flags; names the run directory.
    base: RunConfig,
    run_dir: Option<PathBuf>,
    force: bool,
}

impl Ctx {
    fn new(g: &Global) -> CliResult<Self> {
        let mut cfg = match &g.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(root) = &g.run_root {
            cfg.paths.run_root = root.clone();
        }
        if let Some(w) = g.workers {
            cfg.paths.workers = w;
        }
        if let Some(seed) = g.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(Self { base: cfg.clone(), cfg, run_dir: g.run_dir.clone(), force: g.force })
    }

    fn run_dir(&self, create: bool) -> CliResult<PathBuf> {
        rundir::resolve(self.run_dir.as_deref(), &self.base, create)
    }

    /// Refuses to replace `path` unless `--force`; with it, removes it.
    fn claim(&self, path: &Path) -> CliResult<()> {
        if !path.exists() {
            return Ok(());
        }
        if !self.force {
            return Err(CliError::Exists(path.to_path_buf()));
        }
        let res = if path.is_dir() { fs::remove_dir_all(path) } else { fs::remove_file(path) };
        res.map_err(|e| unitflow::Error::Io { path: path.to_path_buf(), source: e })?;
        Ok(())
    }

    fn corpus(&self, run_dir: &Path) -> CliResult<CorpusManifest> {
        let dir = run_dir.join(CORPUS_DIR);
        if !dir.join(unitflow::benchkit::MANIFEST_FILE).exists() {
            return Err(CliError::Missing(format!(
                "no corpus in {}; run `unitflow corpus build` first",
                run_dir.display()
            )));
        }
        Ok(CorpusManifest::load(&dir)?)
    }

    fn codebook(&self, explicit: Option<&Path>) -> CliResult<Codebook> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => self.run_dir(false)?.join(CODEBOOK_FILE),
        };
        if !path.exists() {
            return Err(CliError::Missing(format!(
                "codebook {} not found; run `unitflow kmeans fit` first",
                path.display()
            )));
        }
        Ok(io::read_codebook(&path)?)
    }

    fn checkpoint(&self, explicit: Option<&Path>) -> CliResult<Checkpoint> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => self.run_dir(false)?.join("finetune").join(FINAL_CHECKPOINT),
        };
        if !path.exists() {
            return Err(CliError::Missing(format!(
                "checkpoint {} not found; run `unitflow train finetune` first",
                path.display()
            )));
        }
        Ok(load_checkpoint(&path)?)
    }

    fn sway(&self, a: &SamplerArgs) -> CliResult<SwayConfig> {
        let mut s = self.cfg.sampler;
        if let Some(n) = a.steps {
            s.n_steps = n;
        }
        if let Some(v) = a.sway {
            s.s = v;
        }
        if let Some(m) = a.method {
            s.method = match m {
                Method::Euler => OdeMethod::Euler,
                Method::Midpoint => OdeMethod::Midpoint,
            };
        }
        s.validate()?;
        Ok(s)
    }
}

pub fn run(cli: Cli) -> CliResult {
    let ctx = Ctx::new(&cli.global)?;
    match cli.command {
        Command::Corpus(CorpusCmd::Build(a)) => corpus_build(ctx, a),
        Command::Mel(MelCmd::Extract(a)) => mel_extract(&ctx, a),
        Command::Vad(VadCmd::Trim(a)) => vad_trim(&ctx, a),
        Command::Kmeans(KmeansCmd::Fit(a)) => kmeans_fit(ctx, a),
        Command::Units(UnitsCmd::Assign(a)) => units_assign(&ctx, a),
        Command::Units(UnitsCmd::Collapse(a)) => units_collapse(&ctx, a),
        Command::Train(TrainCmd::Pretrain(a)) => train(ctx, Stage::Pretrain, a),
        Command::Train(TrainCmd::Finetune(a)) => train(ctx, Stage::Finetune, a),
        Command::Generate(a) => generate_cmd(&ctx, a),
        Command::Eval(a) => eval(ctx, a),
        Command::Plot => plot(&ctx),
    }
}

fn corpus_build(mut ctx: Ctx, a: CorpusBuildArgs) -> CliResult {
    let run_dir = ctx.run_dir(true)?;
    let c = &mut ctx.cfg.corpus;
    if let Some(n) = a.n_train {
        c.n_train = n;
    }
    if let Some(n) = a.n_test {
        c.n_test = n;
    }
    if let Some(s) = a.severity {
        c.severity = s;
        c.degrade = None;
    }
    let ccfg = ctx.cfg.corpus_config()?;
    let dir = run_dir.join(CORPUS_DIR);
    ctx.claim(&dir)?;
    let manifest = build_corpus(&dir, &ccfg, ctx.cfg.paths.workers)?;
    log::info!("wrote {} entries to {}", manifest.entries.len(), dir.display());
    println!("{}", dir.display());
    Ok(())
}

fn mel_extract(ctx: &Ctx, a: MelExtractArgs) -> CliResult {
    let mut wav = io::read_wav(&a.input)?;
    if wav.sample_rate != SAMPLE_RATE {
        log::info!("resampling {} Hz to {SAMPLE_RATE} Hz", wav.sample_rate);
        wav = resample(&wav, SAMPLE_RATE)?;
    }
    let mel = log_mel(&wav)?;
    ctx.claim(&a.output)?;
    io::write_mel(&a.output, &mel)?;
    log::info!("{} frames", mel.num_frames());
    println!("{}", a.output.display());
    Ok(())
}

fn vad_trim(ctx: &Ctx, a: VadTrimArgs) -> CliResult {
    let mut vad = ctx.cfg.vad;
    if let Some(v) = a.edge_db {
        vad.edge_threshold_db = v;
    }
    if let Some(v) = a.energy_db {
        vad.energy_threshold_db = v;
    }
    let wav = io::read_wav(&a.input)?;
    let trimmed = trim_silence(&wav, &vad)?;
    ctx.claim(&a.output)?;
    io::write_wav(&a.output, &trimmed)?;
    log::info!("kept {:.3} s of {:.3} s", trimmed.duration_s(), wav.duration_s());
    println!("{}", a.output.display());
    Ok(())
}

fn kmeans_fit(mut ctx: Ctx, a: KmeansFitArgs) -> CliResult {
    if let Some(k) = a.k {
        ctx.cfg.kmeans.k = k;
    }
    if let Some(n) = a.max_iters {
        ctx.cfg.kmeans.max_iters = n;
    }
    if let Some(n) = a.n_init {
        ctx.cfg.kmeans.n_init = n;
    }
    let feats = if a.features.is_empty() {
        pipeline::clean_train_features(&ctx.corpus(&ctx.run_dir(false)?)?)?
    } else {
        let each = a.features.iter().map(|p| io::read_features(p)).collect::<Result<Vec<_>, _>>()?;
        pipeline::stack_features(&each)?
    };
    let output = match a.output {
        Some(p) => p,
        None => ctx.run_dir(true)?.join(CODEBOOK_FILE),
    };
    ctx.claim(&output)?;
    let cb = fit_kmeans_with(&feats, ctx.cfg.kmeans.k, ctx.cfg.kmeans_seed(), &ctx.cfg.kmeans_config())?;
    io::write_codebook(&output, &cb)?;
    log::info!(
        "K = {} on {} frames, inertia {:.4} after {} iterations",
        cb.k(),
        feats.num_frames(),
        cb.meta.inertia,
        cb.meta.iterations
    );
    println!("{}", output.display());
    Ok(())
}

fn units_assign(ctx: &Ctx, a: UnitsAssignArgs) -> CliResult {
    let cb = ctx.codebook(a.codebook.as_deref())?;
    let feats = io::read_features(&a.features)?;
    let mut units = assign(&feats, &cb)?;
    if a.collapse {
        units = collapse(&units);
    }
    ctx.claim(&a.output)?;
    io::write_units(&a.output, &units, cb.k())?;
    println!("{}", a.output.display());
    Ok(())
}

fn units_collapse(ctx: &Ctx, a: UnitsCollapseArgs) -> CliResult {
    let (units, k) = io::read_units(&a.input)?;
    let out = collapse(&units);
    ctx.claim(&a.output)?;
    io::write_units(&a.output, &out, k)?;
    log::info!("{} units -> {}", units.len(), out.len());
    println!("{}", a.output.display());
    Ok(())
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "pretrain",
        Stage::Finetune => "finetune",
    }
}

fn train(mut ctx: Ctx, stage: Stage, a: TrainArgs) -> CliResult {
    let run_dir = ctx.run_dir(false)?;
    let corpus = ctx.corpus(&run_dir)?;
    let mode = ctx.cfg.model.input_mode;
    let cb = match mode {
        InputMode::Units => {
            let cb = ctx.codebook(Some(&run_dir.join(CODEBOOK_FILE)))?;
            ctx.cfg.kmeans.k = cb.k();
            Some(cb)
        }
        InputMode::MelInput => None,
    };
    let mut tc = ctx.cfg.train_config(stage);
    if let Some(n) = a.updates {
        tc.total_updates = n;
        tc.warmup_steps = tc.warmup_steps.min(n.saturating_sub(1));
    }
    if let Some(v) = a.lr {
        tc.peak_lr = v;
    }
    if let Some(v) = a.warmup {
        tc.warmup_steps = v;
    }
    if let Some(v) = a.batch_frames {
        tc.batch_frames = v;
    }
    tc.validate()?;

    let out_dir = run_dir.join(stage_name(stage));
    if a.resume.is_none() {
        ctx.claim(&out_dir)?;
    }
    let init = match (stage, a.init) {
        (_, Some(p)) => Some(p),
        (Stage::Finetune, None) => {
            let p = run_dir.join("pretrain").join(FINAL_CHECKPOINT);
            p.exists().then_some(p)
        }
        (Stage::Pretrain, None) => None,
    };
    let data = Dataset::from_corpus(&corpus, cb.as_ref(), stage, mode)?;
    let opts = RunOptions {
        out_dir,
        init,
        resume: a.resume,
        allow_scratch: false,
        stop_after: a.stop_after,
    };
    let out = run_stage(&data, &ctx.cfg.model_config(), &tc, &opts)?;
    if let Some((step, loss)) = out.state.loss_history.last() {
        log::info!("{} finished at step {step}, loss {loss:.4}", stage_name(stage));
    }
    println!("{}", out.checkpoint.display());
    Ok(())
}

/// Target frames per conditioning row, from the flag, the config or the
/// corpus median.
fn duplication(ctx: &Ctx, flag: Option<f64>, ckpt: &Checkpoint) -> CliResult<f64> {
    if let Some(d) = flag.or(ctx.cfg.eval.duplication) {
        return Ok(d);
    }
    let run_dir = ctx.run_dir(false)?;
    let corpus = ctx.corpus(&run_dir)?;
    let mode = ckpt.meta.model.input_mode;
    let cb = match mode {
        InputMode::Units => Some(ctx.codebook(None)?),
        InputMode::MelInput => None,
    };
    Ok(Dataset::from_corpus(&corpus, cb.as_ref(), Stage::Finetune, mode)?.median_duplication())
}

fn generate_cmd(ctx: &Ctx, a: GenerateArgs) -> CliResult {
    let sway = ctx.sway(&a.sampler)?;
    let ckpt = ctx.checkpoint(a.checkpoint.as_deref())?;
    let mode = ckpt.meta.model.input_mode;
    let mel_dim = ckpt.meta.model.mel_dim;
    let (cond, cond_len) = match (mode, &a.units, &a.features, &a.mel) {
        (InputMode::Units, Some(p), _, _) => {
            let (units, k) = io::read_units(p)?;
            if k != ckpt.meta.k {
                return Err(unitflow::Error::IncompatibleCheckpoint(format!(
                    "units use k = {k}, the model expects k = {}",
                    ckpt.meta.k
                ))
                .into());
            }
            let units = collapse(&units);
            let n = units.len();
            (RequestCond::Units { units, ref_units: None, k }, n)
        }
        (InputMode::Units, None, Some(p), _) => {
            let cb = ctx.codebook(a.codebook.as_deref())?;
            let units = collapse(&assign(&io::read_features(p)?, &cb)?);
            let n = units.len();
            (RequestCond::Units { units, ref_units: None, k: cb.k() }, n)
        }
        (InputMode::MelInput, None, None, Some(p)) => {
            let mel = io::read_mel(p)?.into_frames();
            let n = mel.nrows();
            (RequestCond::Mel(mel), n)
        }
        (m, ..) => {
            let want = match m {
                InputMode::Units => "--units or --features",
                InputMode::MelInput => "--mel",
            };
            return Err(CliError::Usage(format!("the checkpoint is a {m:?} model; use {want}")));
        }
    };
    let target_frames = match a.frames {
        Some(n) => n,
        None => estimate_target_frames(cond_len, duplication(ctx, a.duplication, &ckpt)?),
    };
    let ref_mel = match &a.ref_mel {
        Some(p) => io::read_mel(p)?.into_frames(),
        None => Array2::zeros((0, mel_dim)),
    };
    let req = GenerationRequest {
        cond,
        ref_mel,
        target_frames,
        seed: ctx.cfg.eval_config(1.0).seed,
    };
    let net = FieldNet::new(ckpt.state.net.params);
    let mel = generate(&req, &net, &sway, &ctx.cfg.path)?;
    ctx.claim(&a.output)?;
    io::write_mel(&a.output, &mel)?;
    if let Some(wav) = &a.wav {
        ctx.claim(wav)?;
        io::write_wav(wav, &mel_to_audio(&mel, a.griffin_lim_iters)?)?;
    }
    log::info!("generated {} frames", mel.num_frames());
    println!("{}", a.output.display());
    Ok(())
}

fn summary(r: &EvalReport) -> serde_json::Value {
    serde_json::json!({
        "mode": r.mode,
        "entries": r.entries.len(),
        "pseudo_wer": r.pseudo_wer,
        "mel_mse": r.mel_mse,
        "baseline_mse": r.baseline_mse,
    })
}

fn eval(mut ctx: Ctx, a: EvalArgs) -> CliResult {
    if let Some(l) = a.limit {
        ctx.cfg.eval.limit = Some(l);
    }
    let sway = ctx.sway(&a.sampler)?;
    let run_dir = ctx.run_dir(false)?;
    let output = a.output.unwrap_or_else(|| run_dir.join(EVAL_FILE));
    let samples_dir = run_dir.join(SAMPLES_DIR);
    ctx.claim(&output)?;
    ctx.claim(&samples_dir)?;

    let ckpt = ctx.checkpoint(a.checkpoint.as_deref())?;
    let corpus = ctx.corpus(&run_dir)?;
    let cb = match ckpt.meta.model.input_mode {
        InputMode::Units => Some(ctx.codebook(None)?),
        InputMode::MelInput => None,
    };
    let mut ecfg = ctx.cfg.eval_config(duplication(&ctx, None, &ckpt)?);
    ecfg.sway = sway;
    let net = FieldNet::new(ckpt.state.net.params);
    let keep = a.samples.unwrap_or(ctx.cfg.eval.keep_samples);
    let (report, samples) = evaluate_with_samples(&corpus, &net, cb.as_ref(), &ecfg, keep)?;

    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    io::write_atomic(&output, text.as_bytes())?;
    if !samples.is_empty() {
        fs::create_dir_all(&samples_dir).map_err(|e| unitflow::Error::Io { path: samples_dir.clone(), source: e })?;
    }
    for s in &samples {
        io::write_mel(&samples_dir.join(format!("{}.before.mel", s.id)), &s.before)?;
        io::write_mel(&samples_dir.join(format!("{}.after.mel", s.id)), &s.after)?;
    }
    log::info!(
        "pseudo_wer {:.4}, mel_mse {:.4} (baseline {:.4}) over {} entries",
        report.pseudo_wer,
        report.mel_mse,
        report.baseline_mse,
        report.entries.len()
    );
    println!("{}", summary(&report));
    Ok(())
}

/// Plots are a pure function of the run directory, so re-rendering
/// rewrites identical files.
fn plot(ctx: &Ctx) -> CliResult {
    let run_dir = ctx.run_dir(false)?;
    for p in unitflow::benchkit::emit_plots(&run_dir)? {
        println!("{}", p.display());
    }
    Ok(())
}
