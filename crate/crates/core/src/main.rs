use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use avseg::checks::{self, Suite};
use avseg::config::RunConfig;
use avseg::dataset::{self, Dataset, Split};
use avseg::error::{Error, Result};
use avseg::maskige::{self, MaskStack, Palette};
use avseg::synth::SynthSpec;
use avseg::{checkpoint, eval, imageio, train};

#[derive(Parser)]
#[command(name = "avseg", version, about = "Audio-visual segmentation on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModuleArg {
    Tensor,
    Bfm,
    Decoder,
    Loss,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        clips: usize,
        #[arg(long)]
        seed: u64,
        /// Audio noise level.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        /// Proposal boundary jitter in pixels.
        #[arg(long, default_value_t = 2)]
        perturb: usize,
        /// Take T, H, W, D and K_c from a run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint plus `train_log.jsonl`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write a JSON metric report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Directory for predicted label maps; defaults to `predictions/` beside the report.
        #[arg(long)]
        maps: Option<PathBuf>,
    },
    /// Encode a directory of binary PGM masks into a maskige PPM.
    Maskige {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        palette: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare tape gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum)]
        module: ModuleArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Gen {
            out,
            clips,
            seed,
            noise,
            perturb,
            config,
        } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let spec = SynthSpec {
                seed,
                frames: cfg.frames,
                height: cfg.height,
                width: cfg.width,
                classes: cfg.classes,
                audio_dim: cfg.audio_dim,
                noise,
                perturb,
            };
            let m = dataset::write_dataset(&out, &spec, clips)?;
            let val = m.clips.iter().filter(|c| c.split == Split::Val).count();
            println!("wrote {} clips ({} val) to {}", m.clips.len(), val, out.display());
        }
        Command::Train { data, config, out } => {
            let cfg = RunConfig::load(&config)?;
            let ds = Dataset::load(&data)?;
            let m = &ds.manifest;
            checkpoint::check_compatible(&cfg, m.frames, m.height, m.width, m.audio_dim, m.classes)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let log_path = out.join("train_log.jsonl");
            let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut log = BufWriter::new(file);
            let mut write_err = None;
            let outcome = train::train(&cfg, &ds.split(Split::Train), |line| {
                let text = serde_json::to_string(line).expect("log line serialises");
                println!("{text}");
                if let Err(e) = writeln!(log, "{text}") {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err {
                return Err(Error::io(&log_path, e));
            }
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            checkpoint::save(&outcome.model, &out)?;
        }
        Command::Eval {
            data,
            checkpoint: ckpt,
            out,
            split,
            maps,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let m = &ds.manifest;
            checkpoint::check_compatible(&model.config, m.frames, m.height, m.width, m.audio_dim, m.classes)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
            };
            let clips = ds.split(split);
            let (report, predicted) = eval::evaluate(&model, &clips)?;
            let text = eval::report_json(&report);
            imageio::write_file(&out, text.as_bytes())?;
            let maps = maps.unwrap_or_else(|| out.parent().unwrap_or(Path::new(".")).join("predictions"));
            eval::write_predictions(&maps, &clips, &predicted)?;
            println!("miou={:.6} fscore={:.6} clips={}", report.miou, report.fscore, clips.len());
        }
        Command::Maskige { masks, palette, out } => {
            let palette = Palette::read(&palette)?;
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&masks)
                .map_err(|e| Error::io(&masks, e))?
                .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&masks, err)))
                .collect::<Result<Vec<_>>>()?;
            paths.retain(|p| p.extension().is_some_and(|x| x == "pgm"));
            paths.sort();
            let stack = MaskStack::read_pgm_planes(&paths)?;
            let image = maskige::encode_proposals(&stack, &palette)?;
            imageio::write_file(&out, &image.to_ppm()?)?;
            println!("encoded {} masks into {}", stack.planes(), out.display());
        }
        Command::Gradcheck { module, seed } => {
            let suite = match module {
                ModuleArg::Tensor => Suite::Tensor,
                ModuleArg::Bfm => Suite::Bfm,
                ModuleArg::Decoder => Suite::Decoder,
                ModuleArg::Loss => Suite::Loss,
                ModuleArg::All => Suite::All,
            };
            let results = checks::run(suite, seed)?;
            let mut ok = true;
            for r in &results {
                ok &= r.passed;
                println!(
                    "{} {} max_rel_error={:.3e} tolerance={:.0e} coordinates={} within={:.4} shrunk={} worst=({:.6e}, {:.6e}) seconds={:.2}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_error,
                    r.tolerance,
                    r.coordinates,
                    r.within_tolerance,
                    r.shrunk,
                    r.worst.0,
                    r.worst.1,
                    r.seconds
                );
            }
            let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            println!("max_rel_error={worst:.3e} checks={} passed={ok}", results.len());
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
