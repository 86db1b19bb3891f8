//! Run configuration files and the end-to-end entry points built on them.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::weights::WeightArchive;
use crate::backbone::{Backbone, ToyBackbone, ToyConfig};
use crate::conditioning::{load_png, Conditioner, ConditioningConfig, ImageInput};
use crate::error::{Result, SculptError};
use crate::export::{read_json, AssetExport, ExportManifest, FORMAT, TRACE_FILE};
use crate::pipeline::{intensity_sweep, run_with_inputs, PipelineOptions, RunInputs, RunOutcome};
use crate::sgc::GuidanceConfig;

/// Root for relative output directories when set.
pub const HOME_ENV: &str = "SCULPT_HOME";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneSpec {
    Toy(ToyBackboneSpec),
    /// A host model reached through an adapter registered under `id`.
    Adapter {
        id: String,
    },
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::Toy(ToyBackboneSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyBackboneSpec {
    /// Hyperparameters; weights are drawn from `model.seed` unless `weights`
    /// names an archive directory.
    pub model: Option<ToyConfig>,
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportOptions {
    pub projection_png: bool,
    pub cell_px: u32,
    pub trace_masks: bool,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self {
            projection_png: true,
            cell_px: 8,
            trace_masks: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub conditioning: ConditioningConfig,
    #[serde(default)]
    pub pipeline: PipelineOptions,
    pub content_image: PathBuf,
    #[serde(default)]
    pub style_images: Vec<PathBuf>,
    pub output_dir: PathBuf,
    /// Seeds the initial noise of both stages.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub export: ExportOptions,
}

impl RunConfig {
    /// Parses `path` and resolves relative paths: inputs against the
    /// file's directory, the output directory against `$SCULPT_HOME` when set.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config: RunConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let against = |p: &Path, root: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
        self.content_image = against(&self.content_image, base);
        for s in &mut self.style_images {
            *s = against(s, base);
        }
        if let BackboneSpec::Toy(ToyBackboneSpec { weights: Some(w), .. }) = &mut self.backbone {
            *w = against(w, base);
        }
        let out_root = std::env::var_os(HOME_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| base.to_path_buf());
        self.output_dir = against(&self.output_dir, &out_root);
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("run config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn build_backbone(&self) -> Result<ToyBackbone> {
        match &self.backbone {
            BackboneSpec::Adapter { id } => Err(SculptError::config(format!(
                "no host adapter is registered under {id:?}; this build ships the toy backbone only"
            ))),
            BackboneSpec::Toy(toy) => match &toy.weights {
                None => ToyBackbone::from_seed(toy.model.clone().unwrap_or_default()),
                Some(dir) => {
                    let backbone = ToyBackbone::from_archive(&WeightArchive::read(dir)?)?;
                    if let Some(model) = &toy.model {
                        if model != backbone.config() {
                            return Err(SculptError::config(format!(
                                "toy model settings disagree with the archive at {}",
                                dir.display()
                            )));
                        }
                    }
                    Ok(backbone)
                }
            },
        }
    }

    /// Input paths must exist before any work starts.
    pub fn check_inputs(&self) -> Result<()> {
        for p in std::iter::once(&self.content_image).chain(&self.style_images) {
            if !p.is_file() {
                return Err(SculptError::config(format!(
                    "input image {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn load_images(&self) -> Result<(ImageInput, Vec<ImageInput>)> {
        self.check_inputs()?;
        let content = load_png(&self.content_image)?;
        let styles = self.style_images.iter().map(|p| load_png(p)).collect::<Result<_>>()?;
        Ok((content, styles))
    }

    /// Assembles the export for a finished run without touching the disk.
    pub fn export_for(&self, backbone: &dyn Backbone, outcome: &RunOutcome) -> AssetExport {
        let asset = outcome.final_asset().clone();
        let trace = self.export.trace_masks.then(|| outcome.mask_trace());
        AssetExport {
            manifest: ExportManifest {
                format: FORMAT.into(),
                resolution: asset.resolution,
                voxel_count: asset.len(),
                seed: self.seed,
                config_hash: self.hash(),
                mode: self.guidance.mode,
                passes: outcome.passes.iter().map(|p| p.summary(backbone.channels())).collect(),
                mask_trace: trace.as_ref().map(|_| TRACE_FILE.to_owned()),
            },
            asset,
            mask_trace: trace,
        }
    }

    /// Runs every pass in memory.
    pub fn execute(&self) -> Result<(RunOutcome, AssetExport)> {
        let backbone = self.build_backbone()?;
        let (content, styles) = self.load_images()?;
        let conditioner = Conditioner::new(self.conditioning.clone(), backbone.condition_dim())?;
        let inputs = RunInputs {
            conditioner: &conditioner,
            content: &content,
            styles: &styles,
        };
        let outcome = run_with_inputs(&backbone, inputs, &self.guidance, &self.pipeline, self.seed)?;
        let export = self.export_for(&backbone, &outcome);
        Ok((outcome, export))
    }

    fn projection(&self) -> Option<u32> {
        self.export.projection_png.then_some(self.export.cell_px)
    }
}

/// Full run from a configuration; the export directory is only written
/// after every pass has finished.
pub fn run_style_guided(config: &RunConfig) -> Result<AssetExport> {
    let (_, export) = config.execute()?;
    export.write(&config.output_dir, config.projection())?;
    Ok(export)
}

/// One export per K under `output_dir/k<K>`.
pub fn run_sweep(config: &RunConfig, k_values: &[usize]) -> Result<Vec<(usize, AssetExport)>> {
    let backbone = config.build_backbone()?;
    let (content, styles) = config.load_images()?;
    let conditioner = Conditioner::new(config.conditioning.clone(), backbone.condition_dim())?;
    let inputs = RunInputs {
        conditioner: &conditioner,
        content: &content,
        styles: &styles,
    };
    let runs = intensity_sweep(
        &backbone,
        inputs,
        &config.guidance,
        &config.pipeline,
        config.seed,
        k_values,
    )?;
    let exports: Vec<(usize, AssetExport)> = runs
        .iter()
        .map(|run| {
            let mut per_k = config.clone();
            per_k.guidance.k_stage1 = Some(run.k);
            per_k.guidance.k_stage2 = Some(run.k);
            per_k.guidance.mode = crate::sgc::GuidanceMode::Dual;
            (run.k, per_k.export_for(&backbone, &run.outcome))
        })
        .collect();
    exports
        .par_iter()
        .try_for_each(|(k, export)| export.write(&config.output_dir.join(format!("k{k}")), config.projection()))?;
    Ok(exports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> RunConfig {
        serde_json::from_str(r#"{"content_image": "c.png", "output_dir": "out"}"#).unwrap()
    }

    #[test]
    fn defaults_fill_in() {
        let c = minimal();
        assert_eq!(c.backbone, BackboneSpec::Toy(ToyBackboneSpec::default()));
        assert_eq!(c.guidance.cfg_stage1, 6.5);
        assert!(c.style_images.is_empty());
    }

    #[test]
    fn unknown_fields_and_double_backbones_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"content_image": "c", "output_dir": "o", "sed": 1}"#).is_err());
        let two = r#"{"content_image": "c", "output_dir": "o",
            "backbone": {"toy": {}, "adapter": {"id": "x"}}}"#;
        assert!(serde_json::from_str::<RunConfig>(two).is_err());
    }

    #[test]
    fn adapter_backbone_is_a_config_error() {
        let mut c = minimal();
        c.backbone = BackboneSpec::Adapter { id: "external".into() };
        assert!(matches!(c.build_backbone(), Err(SculptError::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = minimal();
        let mut b = minimal();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn relative_inputs_resolve_against_the_config_directory() {
        let mut c = minimal();
        c.resolve_paths(Path::new("/data/run"));
        assert_eq!(c.content_image, Path::new("/data/run/c.png"));
        assert!(c.output_dir.is_absolute() || std::env::var_os(HOME_ENV).is_some());
    }
}
