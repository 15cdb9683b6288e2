//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 data or
//! validation error. Diagnostics go to stderr.

use std::error::Error;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use serde::{Deserialize, Serialize};

use crate::baselines::{klt_field, kmvq_field};
use crate::codec::checkpoint::{self, Checkpoint, CHECKPOINT_MAGIC};
use crate::codec::{self, size_report, MAGIC};
use crate::data::{Dataset, DatasetSpec};
use crate::eval::{evaluate, rate_distortion, render_view, write_rd_csv, RdPoint};
use crate::field::{NeuralField, RenderSettings};
use crate::grid::GridConfig;
use crate::oracle::run_oracles;
use crate::train::{init_field, mode_of, TrainConfig, TrainMode, Trainer};
use crate::vq::VqConfig;

/// Whole-run description read from `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    /// Defaults to the desk-scale grid with the dataset's dimensionality.
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub vq: VqConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub render: RenderSettings,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn grid(&self) -> GridConfig {
        self.grid.unwrap_or(GridConfig {
            dim: self.dataset.task().spatial_dim(),
            ..GridConfig::default()
        })
    }

    pub fn validate(&self) -> Result<(), String> {
        let grid = self.grid();
        grid.validate().map_err(|e| e.to_string())?;
        if grid.dim != self.dataset.task().spatial_dim() {
            return Err(format!(
                "grid.dim is {} but a {:?} dataset is {}-dimensional",
                grid.dim,
                self.dataset.task(),
                self.dataset.task().spatial_dim()
            ));
        }
        self.train.validate().map_err(|e| e.to_string())?;
        if self.train.mode != TrainMode::Uncompressed {
            self.vq.validate().map_err(|e| e.to_string())?;
        }
        if self.render.samples_per_cell == 0 {
            return Err("render.samples_per_cell must be positive".into());
        }
        Ok(())
    }
}

#[derive(Parser)]
#[command(
    name = "vqad",
    version,
    about = "Train, compress, stream and evaluate vector-quantized neural fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config and write a checkpoint.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Checkpoint path; defaults to `<output>/model.ckpt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replace soft indices by their argmax.
    Bake {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write the `.vqad` bitstream of a model.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Gzip the file. Reported sizes stay those of the raw stream.
        #[arg(long)]
        compress: bool,
    },
    /// Turn a `.vqad` bitstream back into a checkpoint.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Simulate level-by-level delivery: one render and one RD point per level.
    Stream {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        views: ViewArgs,
    },
    /// PSNR and SSIM at one level of detail, written as CSV.
    Eval {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to the finest level.
        #[arg(long)]
        lod: Option<usize>,
        /// CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        views: ViewArgs,
    },
    /// Non-learned compressors.
    #[command(subcommand)]
    Baseline(Baseline),
    /// Check every gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Args)]
struct ViewArgs {
    /// Run config whose dataset supplies reference views; without it the
    /// bundled dataset for the model's task is used.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Baseline {
    /// Low-rank approximation in each level's KLT basis.
    Klt {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        retain: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Post-hoc k-means vector quantization of a trained uncompressed model.
    Kmvq {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        bitwidth: u8,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train with frozen random indices and learned codebooks.
    Randidx {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bitwidth: u8,
        #[arg(long)]
        output: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Data(Box<dyn Error + Send + Sync>),
}

impl<E: Error + Send + Sync + 'static> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Data(Box::new(e))
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Data(msg.into().into())
}

type Outcome = Result<(), Failure>;

/// Parses `argv` (program name first) and runs one subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Fit {
            config,
            resume,
            out,
        } => fit(&config, resume.as_deref(), out),
        Command::Bake { input, output } => {
            let mut ck = load_model(&input)?;
            ck.field = ck.field.baked()?;
            ck.optimizer = None;
            write_checkpoint(&output, &ck)
        }
        Command::Encode {
            input,
            output,
            compress,
        } => {
            let field = load_model(&input)?.field.baked()?;
            let stream = codec::encode(&field)?;
            let report = size_report(&field)?;
            let bytes = if compress { gzip(&stream)? } else { stream };
            write_file(&output, &bytes)?;
            println!(
                "{} bytes (header {}, mlp {}, indices {}, codebooks {}, features {}), compression ratio {:.2}",
                report.total,
                report.header,
                report.mlp,
                report.index_bytes(),
                report.codebook_bytes(),
                report.feature_bytes(),
                report.compression_ratio()
            );
            Ok(())
        }
        Command::Decode { input, output } => {
            let bytes = read_maybe_gzip(&input)?;
            if !bytes.starts_with(&MAGIC) {
                return Err(invalid(format!(
                    "{} is not a .vqad stream",
                    input.display()
                )));
            }
            let ck = Checkpoint {
                field: codec::decode(&bytes)?,
                train: None,
                history: vec![],
                optimizer: None,
                meta: serde_json::json!({ "decoded_from": input }),
            };
            write_checkpoint(&output, &ck)
        }
        Command::Stream { input, out, views } => stream(&input, &out, views.config.as_deref()),
        Command::Eval {
            input,
            lod,
            out,
            views,
        } => {
            let field = load_model(&input)?.field.baked()?;
            let lod = lod.unwrap_or(field.levels() - 1);
            if lod >= field.levels() {
                return Err(Failure::Usage(format!(
                    "--lod must be below {}",
                    field.levels()
                )));
            }
            let refs = reference_views(&field, views.config.as_deref())?;
            let (psnr_db, ssim) = evaluate(&field, &refs, lod)?;
            let point = RdPoint {
                lod,
                bytes: size_report(&field)?.prefix_bytes(lod + 1),
                psnr_db,
                ssim,
            };
            match out {
                Some(p) => {
                    let mut buf = Vec::new();
                    write_rd_csv(&[point], &mut buf)?;
                    write_file(&p, &buf)?;
                    println!("PSNR {psnr_db:.4} dB, SSIM {ssim:.6}");
                }
                None => write_rd_csv(&[point], std::io::stdout())?,
            }
            Ok(())
        }
        Command::Baseline(b) => baseline(b),
        Command::Gradcheck { seeds, tolerance } => {
            if seeds == 0 {
                return Err(Failure::Usage("--seeds must be positive".into()));
            }
            let mut ok = true;
            for r in run_oracles(seeds)? {
                let pass = r.max_rel_err < tolerance;
                ok &= pass;
                println!(
                    "{:<24} {:.3e} {}",
                    r.name,
                    r.max_rel_err,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            if ok {
                Ok(())
            } else {
                Err(invalid(format!(
                    "gradients disagree with finite differences beyond {tolerance:e}"
                )))
            }
        }
    }
}

fn read_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    cfg.validate()
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

/// Relative dataset paths resolve against the config's directory.
fn config_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn fit(config: &Path, resume: Option<&Path>, out: Option<PathBuf>) -> Outcome {
    fit_config(&read_config(config)?, &config_base(config), resume, out)
}

fn fit_config(
    cfg: &RunConfig,
    base: &Path,
    resume: Option<&Path>,
    out: Option<PathBuf>,
) -> Outcome {
    let data = cfg.dataset.load(base)?;
    let set = data.training_set();
    let (field, optimizer, mut history) = match resume {
        Some(p) => {
            let ck = load_model(p)?;
            if mode_of(&ck.field) != cfg.train.mode {
                return Err(invalid("checkpoint mode differs from train.mode"));
            }
            (ck.field, ck.optimizer, ck.history)
        }
        None => {
            let f = init_field(
                &cfg.train,
                set.task,
                cfg.grid(),
                cfg.vq,
                &data.occupancy(),
                cfg.render,
            )?;
            (f, None, vec![])
        }
    };
    let mut trainer = Trainer::resume(cfg.train.clone(), field, optimizer)?;
    for epoch in 0..cfg.train.epochs {
        let loss = trainer.run_epoch(&set)?;
        if epoch % 50 == 0 || epoch + 1 == cfg.train.epochs {
            log::info!("epoch {epoch}: loss {loss:.6}");
        }
    }
    let model = trainer.finish();
    history.extend(&model.history);
    let ck = Checkpoint {
        field: model.field,
        train: Some(cfg.train.clone()),
        history,
        optimizer: Some(model.optimizer),
        meta: serde_json::to_value(cfg)?,
    };
    let path = out.unwrap_or_else(|| base.join(&cfg.output).join("model.ckpt"));
    write_checkpoint(&path, &ck)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn baseline(b: Baseline) -> Outcome {
    match b {
        Baseline::Klt {
            input,
            retain,
            output,
        } => {
            let mut ck = load_model(&input)?;
            ck.field = klt_field(&ck.field, retain)?;
            ck.optimizer = None;
            ck.meta = serde_json::json!({ "baseline": "klt", "retain": retain, "source": input });
            write_checkpoint(&output, &ck)
        }
        Baseline::Kmvq {
            input,
            bitwidth,
            iters,
            seed,
            output,
        } => {
            let mut ck = load_model(&input)?;
            ck.field = kmvq_field(&ck.field, bitwidth, iters, seed)?;
            ck.optimizer = None;
            ck.meta =
                serde_json::json!({ "baseline": "kmvq", "bitwidth": bitwidth, "source": input });
            write_checkpoint(&output, &ck)
        }
        Baseline::Randidx {
            config,
            bitwidth,
            output,
        } => {
            let mut cfg = read_config(&config)?;
            cfg.train.mode = TrainMode::RandomIndex;
            cfg.vq = VqConfig { bitwidth };
            cfg.validate().map_err(invalid)?;
            fit_config(&cfg, &config_base(&config), None, Some(output))
        }
    }
}

fn stream(input: &Path, out: &Path, config: Option<&Path>) -> Outcome {
    let raw = read_maybe_gzip(input)?;
    let bytes = if raw.starts_with(&MAGIC) {
        raw
    } else {
        codec::encode(&load_model(input)?.field.baked()?)?
    };
    let field = codec::decode(&bytes)?;
    let refs = reference_views(&field, config)?;
    fs::create_dir_all(out)?;
    let points = rate_distortion(&bytes, &refs)?;
    for p in &points {
        let prefix = codec::decode_prefix(&bytes[..p.bytes], p.lod + 1)?;
        render_view(&prefix, &refs[0].0, p.lod)?
            .save_png(&out.join(format!("lod{}.png", p.lod)))?;
        eprintln!("lod {}: {} bytes, PSNR {:.2} dB", p.lod, p.bytes, p.psnr_db);
    }
    let mut csv = Vec::new();
    write_rd_csv(&points, &mut csv)?;
    write_file(&out.join("rd.csv"), &csv)
}

fn reference_views(
    field: &NeuralField,
    config: Option<&Path>,
) -> Result<Vec<(crate::data::View, crate::raster::Image)>, Failure> {
    let data: Dataset = match config {
        Some(p) => read_config(p)?.dataset.load(&config_base(p))?,
        None => DatasetSpec::for_task(field.task).load(Path::new("."))?,
    };
    if data.task() != field.task {
        return Err(invalid(format!(
            "{:?} model cannot be evaluated on a {:?} dataset",
            field.task,
            data.task()
        )));
    }
    Ok(data.eval_set())
}

/// Reads a checkpoint or a bitstream, either possibly gzipped.
fn load_model(path: &Path) -> Result<Checkpoint, Failure> {
    let bytes = read_maybe_gzip(path)?;
    if bytes.starts_with(&CHECKPOINT_MAGIC) {
        Ok(checkpoint::load(&bytes)?)
    } else if bytes.starts_with(&MAGIC) {
        Ok(Checkpoint {
            field: codec::decode(&bytes)?,
            train: None,
            history: vec![],
            optimizer: None,
            meta: serde_json::Value::Null,
        })
    } else {
        Err(invalid(format!(
            "{} is neither a checkpoint nor a .vqad stream",
            path.display()
        )))
    }
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>, Failure> {
    let bytes = fs::read(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn gzip(bytes: &[u8]) -> std::io::Result<Vec<u8>> {
    let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::best());
    enc.write_all(bytes)?;
    enc.finish()
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Outcome {
    write_file(path, &checkpoint::save(ck)?)
}
