use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sculpt::backbone::Backbone;
use sculpt::conditioning::{save_png, Conditioner};
use sculpt::config::{run_style_guided, run_sweep, RunConfig, HOME_ENV};
use sculpt::export::{projection_png, AssetExport, PROJECTION_FILE};
use sculpt::insight::{validate_insight, InsightConfig};
use sculpt::sdfs::SelectionPolicy;
use sculpt::sgc::GuidanceMode;
use sculpt::synthetic::object_image;
use sculpt::{Result, SculptError};

#[derive(Parser)]
#[command(
    name = "sculpt",
    version,
    about = "Style-guided 3D generation on a toy two-stage flow backbone"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one asset from a JSON run configuration.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// One dual-mode run per K, written to `<output_dir>/k<K>`.
    Sweep {
        /// Run configuration; without one, synthetic inputs are generated.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        /// Output root when no configuration is given.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare channel-selection policies by how far they move the content.
    ValidateInsight {
        #[arg(long, value_delimiter = ',', default_value = "random,high,low")]
        policy: Vec<SelectionPolicy>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        seeds: Vec<u64>,
        /// Backbone, guidance and pipeline settings; image paths are ignored.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Steps for both stages (non-default; for quick checks).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        k1: Option<usize>,
        #[arg(long)]
        k2: Option<usize>,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the front projection of an exported asset.
    ExportView {
        asset_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        cell_px: u32,
        /// Defaults to `<asset_dir>/projection.png`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    mode: Option<GuidanceMode>,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    policy: Option<SelectionPolicy>,
    #[arg(long)]
    trace_masks: bool,
    /// Stage-1 steps (the default of 100 is the reference setting).
    #[arg(long)]
    steps1: Option<usize>,
    #[arg(long)]
    steps2: Option<usize>,
}

impl Overrides {
    fn apply(&self, config: &mut RunConfig) {
        let g = &mut config.guidance;
        if let Some(mode) = self.mode {
            g.mode = mode;
        }
        if self.k1.is_some() {
            g.k_stage1 = self.k1;
        }
        if self.k2.is_some() {
            g.k_stage2 = self.k2;
        }
        if let Some(policy) = self.policy {
            g.policy = policy;
        }
        if let Some(s) = self.steps1 {
            g.steps_stage1 = s;
        }
        if let Some(s) = self.steps2 {
            g.steps_stage2 = s;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.export.trace_masks |= self.trace_masks;
    }
}

fn output_root() -> PathBuf {
    std::env::var_os(HOME_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("sculpt-out"))
}

/// A configuration over generated content and style images stored in `dir`.
fn synthetic_config(dir: &Path) -> Result<RunConfig> {
    let inputs = dir.join("inputs");
    std::fs::create_dir_all(&inputs).map_err(|e| SculptError::io(&inputs, e))?;
    let content = inputs.join("content.png");
    let style = inputs.join("style.png");
    save_png(&object_image(1, 96, 96)?, &content)?;
    save_png(&object_image(2, 96, 96)?, &style)?;
    let mut config: RunConfig = serde_json::from_value(serde_json::json!({
        "content_image": content,
        "style_images": [style],
        "output_dir": dir,
    }))
    .expect("static configuration");
    config.resolve_paths(Path::new("."));
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, overrides } => {
            let mut config = RunConfig::load(&config)?;
            overrides.apply(&mut config);
            let export = run_style_guided(&config)?;
            println!(
                "wrote {} ({} voxels, mode {}, config {})",
                config.output_dir.display(),
                export.manifest.voxel_count,
                export.manifest.mode,
                &export.manifest.config_hash[..12]
            );
        }
        Command::Sweep {
            config,
            k,
            out,
            overrides,
        } => {
            let mut config = match config {
                Some(path) => RunConfig::load(&path)?,
                None => synthetic_config(&out.unwrap_or_else(|| output_root().join("sweep")))?,
            };
            overrides.apply(&mut config);
            for (k, export) in run_sweep(&config, &k)? {
                println!("k={k}: {} voxels", export.manifest.voxel_count);
            }
            println!("wrote {}", config.output_dir.display());
        }
        Command::ValidateInsight {
            policy,
            seeds,
            config,
            steps,
            k1,
            k2,
            out,
        } => {
            let base = match config {
                Some(path) => RunConfig::load(&path)?,
                None => serde_json::from_value(serde_json::json!({"content_image": "", "output_dir": ""}))
                    .expect("static configuration"),
            };
            let mut guidance = base.guidance.clone();
            if let Some(s) = steps {
                guidance.steps_stage1 = s;
                guidance.steps_stage2 = s;
            }
            let backbone = base.build_backbone()?;
            let conditioner = Conditioner::new(base.conditioning.clone(), backbone.condition_dim())?;
            let report = validate_insight(
                &backbone,
                &conditioner,
                &InsightConfig {
                    policies: policy,
                    seeds,
                    k_stage1: k1,
                    k_stage2: k2,
                    guidance,
                    pipeline: base.pipeline,
                    ..InsightConfig::default()
                },
            )?;
            print!("{}", report.render_text());
            if let Some(path) = out {
                let json = serde_json::to_vec_pretty(&report).map_err(|source| SculptError::Json {
                    path: path.clone(),
                    source,
                })?;
                std::fs::write(&path, json).map_err(|e| SculptError::io(&path, e))?;
            }
        }
        Command::ExportView {
            asset_dir,
            cell_px,
            out,
        } => {
            let export = AssetExport::read(&asset_dir)?;
            let path = out.unwrap_or_else(|| asset_dir.join(PROJECTION_FILE));
            projection_png(&export.asset, cell_px)?
                .save(&path)
                .map_err(|source| SculptError::Image {
                    path: path.clone(),
                    source,
                })?;
            println!("wrote {} ({} voxels)", path.display(), export.asset.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
