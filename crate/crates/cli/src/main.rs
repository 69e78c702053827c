use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conceptshift::attention_control::ControlWindow;
use conceptshift::backbone::{Denoiser, EmbeddingTable, TinyDenoiser};
use conceptshift::guidance::FusionOrder;
use conceptshift::pipeline::demo::{desk_scale_report, train_toy_backbone, ToyRecipe};
use conceptshift::pipeline::metrics::evaluate_metrics;
use conceptshift::pipeline::store::{self, EmbeddingHeader};
use conceptshift::pipeline::toy::{random_specs, toy_pair};
use conceptshift::pipeline::{
    CodecKind, IdentityCodec, Image, LatentCodec, RunDir, ScaledIdentityCodec, StageCache,
    TranslationConfig, Translator,
};
use conceptshift::par::Exec;
use conceptshift::Error;
use serde_json::json;

/// One-shot image-guided translation on a small trained diffusion model.
#[derive(Parser, Debug)]
#[command(name = "conceptshift", version)]
struct Cli {
    /// TOML file supplying any translation setting; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Require every stochastic input to be seeded explicitly.
    #[arg(long, global = true)]
    strict: bool,
    /// Directory receiving all artifacts and the manifest.
    #[arg(long, global = true, default_value = "runs/latest")]
    run_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the toy denoiser and write `backbone.cs`.
    TrainBackbone {
        /// Optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// TOML recipe overriding the defaults.
        #[arg(long)]
        recipe: Option<PathBuf>,
    },
    /// Learn the reference concept embedding from an image.
    InvertConcept {
        #[command(flatten)]
        io: ModelArgs,
        #[arg(long)]
        reference: PathBuf,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Invert a source image and optimize its per-step embeddings.
    InvertContent {
        #[command(flatten)]
        io: ModelArgs,
        #[arg(long)]
        source: PathBuf,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Translate a source image toward the concept of a reference image.
    Translate {
        #[command(flatten)]
        io: ModelArgs,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Use a stored concept embedding instead of inverting the reference.
        #[arg(long)]
        concept: Option<PathBuf>,
        /// Use stored per-step embeddings instead of inverting the source.
        #[arg(long)]
        content: Option<PathBuf>,
        /// Cache directory for inversions (defaults to `<run-dir>/cache`).
        #[arg(long)]
        cache: Option<PathBuf>,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Reconstruct the source through the content stream alone.
    Reconstruct {
        #[command(flatten)]
        io: ModelArgs,
        #[arg(long)]
        source: PathBuf,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Score an output image against a source (and optionally a reference).
    Eval {
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Render the toy dataset, train or load a backbone and report the
    /// desk-scale measurements on the fixed pair.
    Demo {
        /// Existing checkpoint; trains one with the default recipe otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of toy images written to `dataset/`.
        #[arg(long, default_value_t = 24)]
        images: usize,
        #[command(flatten)]
        flags: ConfigFlags,
    },
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Backbone checkpoint written by `train-backbone`.
    #[arg(long)]
    checkpoint: PathBuf,
}

/// Flags mirroring `TranslationConfig`.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    #[arg(long)]
    seed: Option<u64>,
    /// Guidance scale shared by both streams and the content inversion.
    #[arg(long)]
    w: Option<f64>,
    /// Denoising steps.
    #[arg(long)]
    steps: Option<usize>,
    /// `source-weighted` or `reference-weighted`.
    #[arg(long)]
    fusion: Option<FusionOrder>,
    #[arg(long)]
    cross_ratio: Option<f64>,
    #[arg(long)]
    self_ratio: Option<f64>,
    /// `early` or `late`.
    #[arg(long)]
    window: Option<ControlWindow>,
    #[arg(long)]
    pti_total_steps: Option<usize>,
    #[arg(long)]
    pti_inner_steps: Option<usize>,
    #[arg(long)]
    mci_steps: Option<usize>,
    #[arg(long)]
    mci_lr: Option<f64>,
    #[arg(long)]
    mci_batch: Option<usize>,
    #[arg(long)]
    concept_tokens: Option<usize>,
    #[arg(long)]
    lambda_rec: Option<f64>,
    /// `identity`, `scaled-identity` or `tiny-autoencoder`.
    #[arg(long)]
    codec: Option<CodecKind>,
    #[arg(long)]
    codec_scale: Option<f64>,
    /// Run every loop on one thread.
    #[arg(long)]
    sequential: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .chain()
                .any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_numerical));
            ExitCode::from(if numerical { 3 } else { 2 })
        }
    }
}

struct Settings {
    cfg: TranslationConfig,
    seed_given: bool,
}

fn settings(cli: &Cli, flags: &ConfigFlags) -> anyhow::Result<Settings> {
    let (mut cfg, mut seed_given) = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let has_seed = text.parse::<toml::Table>().map(|t| t.contains_key("seed")).unwrap_or(false);
            (TranslationConfig::from_toml_str(&text)?, has_seed)
        }
        None => (TranslationConfig::default(), false),
    };
    if let Some(s) = flags.seed {
        cfg.seed = s;
        seed_given = true;
    }
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = flags.$flag { cfg.$($field).+ = v; })*
        };
    }
    set!(
        w => w,
        steps => steps,
        fusion => fusion,
        cross_ratio => attention.cross_ratio,
        self_ratio => attention.self_ratio,
        window => attention.window,
        pti_total_steps => hp.pti_total_steps,
        mci_steps => hp.mci_steps,
        mci_lr => hp.mci_lr,
        mci_batch => hp.mci_batch,
        concept_tokens => hp.concept_tokens,
        lambda_rec => hp.lambda_rec,
        codec => codec,
        codec_scale => codec_scale,
    );
    if flags.pti_inner_steps.is_some() {
        cfg.hp.pti_inner_steps = flags.pti_inner_steps;
    }
    if flags.sequential {
        cfg.exec = Exec::Sequential;
    }
    cfg.validate()?;
    Ok(Settings { cfg, seed_given })
}

/// Builds the configured codec. The patch autoencoder is fitted on the toy
/// dataset the backbone was trained on.
fn codec_for(cfg: &TranslationConfig, h: usize, w: usize) -> anyhow::Result<Box<dyn LatentCodec>> {
    Ok(match cfg.codec {
        CodecKind::Identity => Box::new(IdentityCodec),
        CodecKind::ScaledIdentity => Box::new(ScaledIdentityCodec::new(cfg.codec_scale)?),
        CodecKind::TinyAutoencoder => {
            let images = random_specs(512, ToyRecipe::default().data_seed, h, w)
                .iter()
                .map(|s| s.render(h, w))
                .collect::<Result<Vec<_>, _>>()?;
            let channels = 3;
            Box::new(conceptshift::pipeline::PatchAutoencoder::fit(&images, channels * 4)?)
        }
    })
}

struct Loaded {
    backbone: TinyDenoiser,
    table: EmbeddingTable,
    /// Context length the backbone was trained with.
    context_len: usize,
}

fn load(path: &Path) -> anyhow::Result<Loaded> {
    let ck = store::load_checkpoint(path)?;
    let context_len = ck.extra["recipe"]["train"]["context_len"]
        .as_u64()
        .map_or(ToyRecipe::default().train.context_len, |n| n as usize);
    Ok(Loaded {
        backbone: ck.backbone,
        table: ck.table,
        context_len,
    })
}

fn header(m: &Loaded, cfg: &TranslationConfig, label: &str) -> EmbeddingHeader {
    EmbeddingHeader {
        kind: String::new(),
        schedule_hash: m.backbone.schedule().hash(),
        backbone: m.backbone.fingerprint(),
        seed: Some(cfg.seed),
        w: Some(cfg.w),
        label: label.into(),
        loss_tail: Vec::new(),
        extra: json!(null),
    }
}

fn finish(run: &RunDir, cfg: Option<&TranslationConfig>) -> anyhow::Result<()> {
    if let Some(cfg) = cfg {
        run.write("config.toml", cfg.to_toml_string()?.as_bytes())?;
    }
    let m = run.write_manifest()?;
    log::info!("{} artifacts under {}", m.files.len(), run.root().display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let run = RunDir::create(&cli.run_dir)?;
    match &cli.command {
        Command::TrainBackbone {
            steps,
            samples,
            lr,
            batch_size,
            seed,
            recipe,
        } => {
            if cli.strict && seed.is_none() && recipe.is_none() {
                anyhow::bail!(Error::Config("--seed is required in strict mode".into()));
            }
            let mut r: ToyRecipe = match recipe {
                Some(p) => toml::from_str(&std::fs::read_to_string(p)?)
                    .map_err(|e| Error::Config(e.to_string()))?,
                None => ToyRecipe::default(),
            };
            if let Some(v) = steps {
                r.train.steps = *v;
            }
            if let Some(v) = samples {
                r.samples = *v;
            }
            if let Some(v) = lr {
                r.train.lr = *v;
            }
            if let Some(v) = batch_size {
                r.train.batch_size = *v;
            }
            if let Some(v) = seed {
                r.model_seed = *v;
                r.train.seed = *v;
            }
            let (b, table, report) = train_toy_backbone(&r)?;
            log::info!(
                "trained {} steps: loss {:.4} -> {:.4}",
                report.losses.len(),
                report.head_mean(50),
                report.tail_mean(50)
            );
            store::save_checkpoint(&run.path("backbone.cs")?, &b, &table, json!({ "recipe": r }))?;
            run.write_json("train_losses.json", &report.losses)?;
            run.write("recipe.toml", toml::to_string(&r)?.as_bytes())?;
            println!("{}", b.fingerprint());
            finish(&run, None)
        }
        Command::InvertConcept { io, reference, flags } => {
            let s = settings(&cli, flags)?;
            let m = load(&io.checkpoint)?;
            let x = Image::load_png(reference)?;
            let codec = codec_for(&s.cfg, x.shape()[1], x.shape()[2])?;
            let tr = translator(&m, codec.as_ref());
            let v = tr.invert_concept(&x, &s.cfg)?;
            store::save_concept(&run.path("concept.cs")?, &v, &header(&m, &s.cfg, "concept"))?;
            finish(&run, Some(&s.cfg))
        }
        Command::InvertContent { io, source, flags } => {
            let s = settings(&cli, flags)?;
            let m = load(&io.checkpoint)?;
            let x = Image::load_png(source)?;
            let codec = codec_for(&s.cfg, x.shape()[1], x.shape()[2])?;
            let tr = translator(&m, codec.as_ref());
            let p = tr.invert_content(&x, &s.cfg)?;
            let mut h = header(&m, &s.cfg, "source");
            h.loss_tail = p.losses.iter().rev().take(5).map(|l| l.kept).collect();
            store::save_per_step(&run.path("content.cs")?, &p, &h)?;
            finish(&run, Some(&s.cfg))
        }
        Command::Translate {
            io,
            source,
            reference,
            concept,
            content,
            cache,
            flags,
        } => {
            let s = settings(&cli, flags)?;
            if cli.strict && !s.seed_given {
                anyhow::bail!(Error::Config("--seed is required for translate in strict mode".into()));
            }
            let m = load(&io.checkpoint)?;
            let x_src = Image::load_png(source)?;
            let x_ref = Image::load_png(reference)?;
            let codec = codec_for(&s.cfg, x_src.shape()[1], x_src.shape()[2])?;
            let tr = translator(&m, codec.as_ref());
            let sh = m.backbone.schedule().hash();
            let cache = StageCache::new(cache.clone().unwrap_or_else(|| run.root().join("cache")))?;
            let v_ref = match concept {
                Some(p) => store::load_concept(p, &sh)?.0,
                None => {
                    let (v, hit) = cache.concept(&tr, &x_ref, &s.cfg)?;
                    log::info!("concept inversion {}", if hit { "cached" } else { "computed" });
                    v
                }
            };
            let per_step = match content {
                Some(p) => store::load_per_step(p, &sh)?.0,
                None => {
                    let (p, hit) = cache.content(&tr, &x_src, &s.cfg)?;
                    log::info!("content inversion {}", if hit { "cached" } else { "computed" });
                    p
                }
            };
            let res = tr.translate_from(&x_src, &x_ref, per_step, v_ref, &s.cfg)?;
            res.x_tgt.save_png(&run.path("target.png")?)?;
            res.x_rec.save_png(&run.path("reconstruction.png")?)?;
            store::save_concept(&run.path("concept.cs")?, &res.v_ref, &header(&m, &s.cfg, "concept"))?;
            store::save_per_step(&run.path("content.cs")?, &res.per_step, &header(&m, &s.cfg, "source"))?;
            run.write_json("diagnostics.json", &res.diagnostics)?;
            let metrics = json!({
                "target": res.metrics,
                "reconstruction_mse": res.reconstruction_mse,
                "reconstruction_psnr": finite_or_inf(res.reconstruction_psnr),
            });
            run.write_json("metrics.json", &metrics)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            finish(&run, Some(&s.cfg))
        }
        Command::Reconstruct { io, source, flags } => {
            let s = settings(&cli, flags)?;
            let m = load(&io.checkpoint)?;
            let x = Image::load_png(source)?;
            let codec = codec_for(&s.cfg, x.shape()[1], x.shape()[2])?;
            let tr = translator(&m, codec.as_ref());
            let (rec, p) = tr.reconstruct(&x, &s.cfg)?;
            rec.save_png(&run.path("reconstruction.png")?)?;
            run.write_json("metrics.json", &json!({ "psnr": finite_or_inf(p) }))?;
            println!("psnr {p:.3}");
            finish(&run, Some(&s.cfg))
        }
        Command::Eval {
            output,
            source,
            reference,
        } => {
            let out = Image::load_png(output)?;
            let src = Image::load_png(source)?;
            let r = reference.as_deref().map(Image::load_png).transpose()?;
            let m = evaluate_metrics(&out, &src, r.as_ref())?;
            run.write_json("eval.json", &m)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
            finish(&run, None)
        }
        Command::Demo {
            checkpoint,
            images,
            flags,
        } => {
            let s = settings(&cli, flags)?;
            let recipe = ToyRecipe::default();
            let (h, w) = (recipe.model.height, recipe.model.width);
            for (i, spec) in random_specs(*images, recipe.data_seed, h, w).iter().enumerate() {
                spec.render(h, w)?
                    .save_png(&run.path(&format!("dataset/{i:03}-{}.png", spec.words().join("-")))?)?;
            }
            let (src, refc) = toy_pair();
            src.render(h, w)?.save_png(&run.path("pair/source.png")?)?;
            refc.render(h, w)?.save_png(&run.path("pair/reference.png")?)?;
            let m = match checkpoint {
                Some(p) => load(p)?,
                None => {
                    log::info!("training the toy backbone ({} steps)", recipe.train.steps);
                    let (backbone, table, _) = train_toy_backbone(&recipe)?;
                    store::save_checkpoint(&run.path("backbone.cs")?, &backbone, &table, json!({ "recipe": recipe }))?;
                    Loaded {
                        backbone,
                        table,
                        context_len: recipe.train.context_len,
                    }
                }
            };
            let codec = IdentityCodec;
            let tr = translator(&m, &codec);
            let report = desk_scale_report(&tr, &m.table, &s.cfg)?;
            run.write_json("desk_report.json", &report)?;
            let lines = [
                ("content-branch PSNR >= 30 dB", report.content_psnr >= 30.0, format!("{:.2} dB", report.content_psnr)),
                ("structure IoU >= 0.8", report.structure_iou >= 0.8, format!("{:.3}", report.structure_iou)),
                ("texture reduction >= 50% vs raw token", report.texture_reduction() >= 0.5, format!("{:.1}%", 100.0 * report.texture_reduction())),
                ("translate <= 600 s", report.translate_seconds <= 600.0, format!("{:.1} s", report.translate_seconds)),
                ("no PTI lowers content PSNR", report.no_pti_psnr < report.content_psnr, format!("{:.2} < {:.2}", report.no_pti_psnr, report.content_psnr)),
                ("no attention control lowers IoU", report.no_ac_structure_iou < report.structure_iou, format!("{:.3} < {:.3}", report.no_ac_structure_iou, report.structure_iou)),
                ("raw token raises texture distance", report.no_mci_texture_distance > report.texture_distance, format!("{:.4} > {:.4}", report.no_mci_texture_distance, report.texture_distance)),
            ];
            for (name, ok, value) in &lines {
                println!("{} {name}: {value}", if *ok { "PASS" } else { "FAIL" });
            }
            finish(&run, Some(&s.cfg))
        }
    }
}

fn translator<'a>(m: &'a Loaded, codec: &'a dyn LatentCodec) -> Translator<'a> {
    Translator {
        backbone: &m.backbone,
        codec,
        v_null: m.table.null_embedding(m.context_len),
    }
}

fn finite_or_inf(x: f64) -> serde_json::Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!("inf")
    }
}
