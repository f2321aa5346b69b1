use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use invi_cli::io::{canny_control, frame_name, read_video};
use invi_cli::{eval_command, run_command, EvalManifest, RunManifest};
use invi_core::denoiser::ControlKind;
use invi_core::pipeline::Mode;

#[derive(Parser)]
#[command(
    name = "invi",
    version,
    about = "Insert objects into videos with anchor-conditioned inpainting"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Pose,
    Canny,
    Depth,
    Normal,
}

impl From<KindArg> for ControlKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Pose => ControlKind::Pose,
            KindArg::Canny => ControlKind::Canny,
            KindArg::Depth => ControlKind::Depth,
            KindArg::Normal => ControlKind::Normal,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Invi,
    PerFrame,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Cmd {
    /// Edit a video.
    Run {
        /// Directory of PNG frames.
        #[arg(long)]
        video: PathBuf,
        /// Box track: `frame_index x y w h` per line, 0-based.
        #[arg(long)]
        boxes: PathBuf,
        /// Directory of frame-aligned control images `00000.png`, ...
        #[arg(long)]
        control: PathBuf,
        #[arg(long, value_enum)]
        control_kind: KindArg,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory of PNG frames.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        postprocess: Option<Switch>,
        /// Also write edited crops, final latents and run statistics here.
        #[arg(long)]
        dump_frames: Option<PathBuf>,
    },
    /// Score an edited video against its original.
    Eval {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        edited: PathBuf,
        /// Directory of background masks `00000.png`, ...
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print JSON instead of `key: value` lines.
        #[arg(long)]
        json: bool,
    },
    /// Write canny edge maps of every frame as control images.
    Canny {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50.0)]
        low: f32,
        #[arg(long, default_value_t = 100.0)]
        high: f32,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run {
            video,
            boxes,
            control,
            control_kind,
            prompt,
            config,
            out,
            mode,
            postprocess,
            dump_frames,
        } => {
            let summary = run_command(&RunManifest {
                video,
                boxes,
                control,
                control_kind: control_kind.into(),
                prompt,
                config,
                out: out.clone(),
                mode: mode.map(|m| match m {
                    ModeArg::Invi => Mode::Invi,
                    ModeArg::PerFrame => Mode::PerFrame,
                }),
                postprocess: postprocess.map(|s| matches!(s, Switch::On)),
                dump_frames,
            })?;
            println!("wrote {} frames to {}", summary.frames, out.display());
        }
        Cmd::Eval {
            original,
            edited,
            mask,
            prompt,
            config,
            json,
        } => {
            let report = eval_command(&EvalManifest {
                original,
                edited,
                mask,
                prompt,
                config,
            })?;
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_text());
            }
        }
        Cmd::Canny { video, out, low, high } => {
            let frames = read_video(&video)?;
            std::fs::create_dir_all(&out)?;
            for (i, f) in frames.iter().enumerate() {
                canny_control(f, low, high).save(out.join(frame_name(i)))?;
            }
            println!("wrote {} control images to {}", frames.len(), out.display());
        }
    }
    Ok(())
}
