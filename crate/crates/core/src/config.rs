//! Run configuration. Every key has a default; unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use styleseg_nn::PadMode;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub preprocess: PreprocessConfig,
    pub translator: TranslatorConfig,
    pub synthesis: SynthesisConfig,
    pub segmenter: SegmenterConfig,
    pub augment: AugmentConfig,
    pub ensemble: EnsembleConfig,
    pub crf: CrfParams,
    pub morphology: MorphParams,
    pub eval: EvalConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2019,
            phantom: PhantomSpec::default(),
            preprocess: PreprocessConfig::default(),
            translator: TranslatorConfig::default(),
            synthesis: SynthesisConfig::default(),
            segmenter: SegmenterConfig::default(),
            augment: AugmentConfig::default(),
            ensemble: EnsembleConfig::default(),
            crf: CrfParams::default(),
            morphology: MorphParams::default(),
            eval: EvalConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub translator_train: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusCounts {
    pub source: SplitCounts,
    pub target: SplitCounts,
}

impl Default for CorpusCounts {
    fn default() -> Self {
        Self {
            source: SplitCounts {
                translator_train: 40,
                train: 30,
                val: 5,
                test: 0,
            },
            target: SplitCounts {
                translator_train: 40,
                train: 0,
                val: 5,
                test: 10,
            },
        }
    }
}

/// Anatomy ranges in millimetres; each case draws uniformly within them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryRanges {
    pub center_jitter_mm: f64,
    /// Basal LV cavity semi-major axis.
    pub lv_radius_mm: [f64; 2],
    /// Minor/major ratio of the LV cavity.
    pub lv_aspect: [f64; 2],
    pub myo_thickness_mm: [f64; 2],
    /// How far the RV crescent reaches beyond the septal epicardium.
    pub rv_extent_mm: [f64; 2],
    /// LV radius at the apical slice relative to the basal one.
    pub apex_scale: f64,
    pub max_rotation_rad: f64,
    pub body_semi_axes_mm: [f64; 2],
}

impl Default for GeometryRanges {
    fn default() -> Self {
        Self {
            center_jitter_mm: 5.0,
            lv_radius_mm: [10.0, 14.0],
            lv_aspect: [0.8, 1.0],
            myo_thickness_mm: [5.0, 7.0],
            rv_extent_mm: [10.0, 16.0],
            apex_scale: 0.55,
            max_rotation_rad: 0.4,
            body_semi_axes_mm: [37.0, 32.0],
        }
    }
}

/// Appearance of one modality. Intensities are in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleParams {
    pub spacing_mm: f64,
    pub air: f64,
    pub body: f64,
    /// An extra non-cardiac organ blob inside the body.
    pub organ: f64,
    pub lv: f64,
    pub myo: f64,
    pub rv: f64,
    pub noise_sigma: f64,
    pub bias_amplitude: f64,
    pub scar_probability: f64,
    pub scar_intensity: f64,
}

impl StyleParams {
    pub fn source() -> Self {
        Self {
            spacing_mm: 1.25,
            air: 0.03,
            body: 0.40,
            organ: 0.55,
            lv: 0.85,
            myo: 0.18,
            rv: 0.80,
            noise_sigma: 0.02,
            bias_amplitude: 0.10,
            scar_probability: 0.0,
            scar_intensity: 0.0,
        }
    }

    pub fn target() -> Self {
        Self {
            spacing_mm: 1.5,
            air: 0.05,
            body: 0.62,
            organ: 0.30,
            lv: 0.48,
            myo: 0.10,
            rv: 0.42,
            noise_sigma: 0.025,
            bias_amplitude: 0.15,
            scar_probability: 0.7,
            scar_intensity: 0.80,
        }
    }
}

impl Default for StyleParams {
    fn default() -> Self {
        Self::source()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// Source-modality grid in pixels; the field of view is
    /// `image_size * source_style.spacing_mm` for both modalities.
    pub image_size: usize,
    pub slices: usize,
    pub slice_thickness_mm: f64,
    pub counts: CorpusCounts,
    pub geometry: GeometryRanges,
    pub source_style: StyleParams,
    pub target_style: StyleParams,
    /// Minimum two-sample KS statistic between cardiac-region intensities of
    /// the two modalities.
    pub ks_threshold: f64,
    /// Overrides the run seed's phantom child seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            slices: 6,
            slice_thickness_mm: 10.0,
            counts: CorpusCounts::default(),
            geometry: GeometryRanges::default(),
            source_style: StyleParams::source(),
            target_style: StyleParams::target(),
            ks_threshold: 0.3,
            seed: None,
        }
    }
}

impl PhantomSpec {
    pub fn fov_mm(&self) -> f64 {
        self.image_size as f64 * self.source_style.spacing_mm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizerConfig {
    pub base_width: usize,
    pub depth: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Interior knots of the random intensity remapping applied to training
    /// slices (0 disables it).
    pub remap_knots: usize,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            depth: 4,
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            remap_knots: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_spacing: f64,
    pub crop_size: usize,
    pub localizer: LocalizerConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_spacing: 1.25,
            crop_size: 192,
            localizer: LocalizerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslationLossWeights {
    pub gan: f64,
    pub recon_x: f64,
    pub recon_c: f64,
    pub recon_s: f64,
    pub kl: f64,
}

impl Default for TranslationLossWeights {
    fn default() -> Self {
        Self {
            gan: 1.0,
            recon_x: 10.0,
            recon_c: 1.0,
            recon_s: 1.0,
            kl: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslatorConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Channels of the first encoder conv; doubles per downsampling.
    pub dim: usize,
    pub n_downsample: usize,
    pub n_res: usize,
    pub style_dim: usize,
    pub mlp_dim: usize,
    pub style_downsample: usize,
    pub dis_dim: usize,
    pub dis_layers: usize,
    pub pad_mode: PadMode,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Learning rate is multiplied by `lr_gamma` every `lr_step` iterations.
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub weights: TranslationLossWeights,
    pub log_interval: usize,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 1,
            dim: 64,
            n_downsample: 2,
            n_res: 4,
            style_dim: 8,
            mlp_dim: 256,
            style_downsample: 4,
            dis_dim: 64,
            dis_layers: 4,
            pad_mode: PadMode::Reflect,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            weight_decay: 1e-4,
            lr_step: 100_000,
            lr_gamma: 0.5,
            weights: TranslationLossWeights::default(),
            log_interval: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub styles_per_image: usize,
    /// Overrides the run seed's synthesis child seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            styles_per_image: 5,
            seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeNorm {
    Euclidean,
    SquaredEuclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub lambda: f64,
    /// BG, LV, MYO, RV.
    pub class_weights: [f64; 4],
    pub edge_norm: EdgeNorm,
    pub lr_initial: f64,
    pub lr_finetune: f64,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub base_width: usize,
    pub depth: usize,
    pub dropout: f64,
    pub weight_decay: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            class_weights: [0.2, 0.25, 0.3, 0.25],
            edge_norm: EdgeNorm::Euclidean,
            lr_initial: 1e-3,
            lr_finetune: 1e-5,
            epochs_pretrain: 500,
            epochs_finetune: 500,
            batch_size: 8,
            base_width: 32,
            depth: 4,
            dropout: 0.1,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub rotation_deg: f64,
    pub scale_range: [f64; 2],
    /// Standard deviation of the elastic displacement, pixels.
    pub elastic_alpha: f64,
    /// Smoothing scale of the elastic displacement field, pixels.
    pub elastic_sigma: f64,
    pub gamma_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rotation_deg: 15.0,
            scale_range: [0.9, 1.1],
            elastic_alpha: 1.0,
            elastic_sigma: 6.0,
            gamma_range: [0.7, 1.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub size: usize,
    /// Members after the first start from the first member's source-only
    /// U-net 1 instead of pretraining their own.
    pub share_pretrain: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            size: 4,
            share_pretrain: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrfMethod {
    /// Exact up to `exact_max_pixels`, approximate above.
    Auto,
    Exact,
    Approximate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfParams {
    pub iterations: usize,
    /// Smoothness kernel weight and spatial scale (pixels).
    pub w1: f64,
    pub sigma_gamma: f64,
    /// Appearance kernel weight, spatial scale (pixels) and intensity scale.
    pub w2: f64,
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
    /// Scale each kernel so its weights to the other pixels sum to one.
    pub normalize_kernels: bool,
    pub method: CrfMethod,
    pub exact_max_pixels: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            iterations: 5,
            w1: 3.0,
            sigma_gamma: 3.0,
            w2: 5.0,
            sigma_alpha: 30.0,
            sigma_beta: 0.5,
            normalize_kernels: true,
            method: CrfMethod::Auto,
            exact_max_pixels: 64 * 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuringElement {
    /// 3x3x3 six-connected cross.
    Cross6,
    /// Full 3x3x3 cube.
    Cube26,
    /// 3x3 in-plane cross only.
    InPlaneCross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphOp {
    Closing,
    Opening,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MorphParams {
    pub structuring_element: StructuringElement,
    pub iterations: usize,
    pub operation: MorphOp,
}

impl Default for MorphParams {
    fn default() -> Self {
        Self {
            structuring_element: StructuringElement::Cross6,
            iterations: 1,
            operation: MorphOp::Closing,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceMode {
    /// Boundaries per 2D slice with 4-neighbourhoods.
    Slice2d,
    /// Boundaries in 3D with 6-neighbourhoods.
    Volume3d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub surface: SurfaceMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            surface: SurfaceMode::Slice2d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Baselines {
    pub source_only: bool,
    pub unet_ft: bool,
    pub cascade_ft: bool,
    pub cascade_ft_pp: bool,
}

impl Default for Baselines {
    fn default() -> Self {
        Self {
            source_only: true,
            unet_ft: true,
            cascade_ft: true,
            cascade_ft_pp: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub baselines: Baselines,
    /// Tune CRF weights on the labelled target validation split before use.
    pub tune_crf: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            baselines: Baselines::default(),
            tune_crf: true,
        }
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be > 0, got {v}")))
    }
}

fn non_negative(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be >= 0, got {v}")))
    }
}

fn unit(key: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(key, format!("must lie in [0, 1], got {v}")))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be >= {min}, got {v}")))
    }
}

fn ordered(key: &str, r: [f64; 2]) -> Result<()> {
    if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] {
        Ok(())
    } else {
        Err(Error::config(key, format!("range {r:?} must be finite with lo <= hi")))
    }
}

impl StyleParams {
    fn validate(&self, p: &str) -> Result<()> {
        positive(&format!("{p}.spacing_mm"), self.spacing_mm)?;
        for (k, v) in [
            ("air", self.air),
            ("body", self.body),
            ("organ", self.organ),
            ("lv", self.lv),
            ("myo", self.myo),
            ("rv", self.rv),
            ("scar_intensity", self.scar_intensity),
            ("scar_probability", self.scar_probability),
            ("bias_amplitude", self.bias_amplitude),
        ] {
            unit(&format!("{p}.{k}"), v)?;
        }
        non_negative(&format!("{p}.noise_sigma"), self.noise_sigma)
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        at_least("phantom.image_size", self.image_size, 8)?;
        at_least("phantom.slices", self.slices, 1)?;
        positive("phantom.slice_thickness_mm", self.slice_thickness_mm)?;
        let g = &self.geometry;
        non_negative("phantom.geometry.center_jitter_mm", g.center_jitter_mm)?;
        for (k, r) in [
            ("lv_radius_mm", g.lv_radius_mm),
            ("lv_aspect", g.lv_aspect),
            ("myo_thickness_mm", g.myo_thickness_mm),
            ("rv_extent_mm", g.rv_extent_mm),
        ] {
            let key = format!("phantom.geometry.{k}");
            ordered(&key, r)?;
            positive(&key, r[0])?;
        }
        if g.lv_aspect[1] > 1.0 {
            return Err(Error::config("phantom.geometry.lv_aspect", "ratio must not exceed 1"));
        }
        if !(g.apex_scale > 0.0 && g.apex_scale <= 1.0) {
            return Err(Error::config("phantom.geometry.apex_scale", "must lie in (0, 1]"));
        }
        non_negative("phantom.geometry.max_rotation_rad", g.max_rotation_rad)?;
        positive("phantom.geometry.body_semi_axes_mm", g.body_semi_axes_mm[0])?;
        positive("phantom.geometry.body_semi_axes_mm", g.body_semi_axes_mm[1])?;
        self.source_style.validate("phantom.source_style")?;
        self.target_style.validate("phantom.target_style")?;
        unit("phantom.ks_threshold", self.ks_threshold)?;
        if let Some(s) = self.seed {
            seed_fits("phantom.seed", s)?;
        }
        Ok(())
    }
}

fn seed_fits(key: &str, s: u64) -> Result<()> {
    // Structured text stores integers as signed 64-bit.
    if s > i64::MAX as u64 {
        return Err(Error::config(key, "seed must fit in a signed 64-bit integer"));
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        seed_fits("seed", self.seed)?;
        self.phantom.validate()?;

        let p = &self.preprocess;
        positive("preprocess.target_spacing", p.target_spacing)?;
        at_least("preprocess.crop_size", p.crop_size, 2)?;
        if p.crop_size % 2 != 0 {
            return Err(Error::config("preprocess.crop_size", "must be even"));
        }
        let l = &p.localizer;
        at_least("preprocess.localizer.base_width", l.base_width, 1)?;
        at_least("preprocess.localizer.depth", l.depth, 1)?;
        at_least("preprocess.localizer.batch_size", l.batch_size, 1)?;
        positive("preprocess.localizer.lr", l.lr)?;

        let t = &self.translator;
        at_least("translator.batch_size", t.batch_size, 1)?;
        at_least("translator.dim", t.dim, 1)?;
        at_least("translator.style_dim", t.style_dim, 1)?;
        at_least("translator.mlp_dim", t.mlp_dim, 1)?;
        at_least("translator.dis_dim", t.dis_dim, 1)?;
        at_least("translator.dis_layers", t.dis_layers, 1)?;
        at_least("translator.lr_step", t.lr_step, 1)?;
        at_least("translator.log_interval", t.log_interval, 1)?;
        positive("translator.lr", t.lr)?;
        unit("translator.beta1", t.beta1)?;
        unit("translator.beta2", t.beta2)?;
        non_negative("translator.weight_decay", t.weight_decay)?;
        positive("translator.lr_gamma", t.lr_gamma)?;
        let w = &t.weights;
        for (k, v) in [
            ("gan", w.gan),
            ("recon_x", w.recon_x),
            ("recon_c", w.recon_c),
            ("recon_s", w.recon_s),
            ("kl", w.kl),
        ] {
            non_negative(&format!("translator.weights.{k}"), v)?;
        }

        at_least("synthesis.styles_per_image", self.synthesis.styles_per_image, 1)?;
        if let Some(s) = self.synthesis.seed {
            seed_fits("synthesis.seed", s)?;
        }

        let s = &self.segmenter;
        non_negative("segmenter.lambda", s.lambda)?;
        for (i, w) in s.class_weights.iter().enumerate() {
            positive(&format!("segmenter.class_weights[{i}]"), *w)?;
        }
        positive("segmenter.lr_initial", s.lr_initial)?;
        positive("segmenter.lr_finetune", s.lr_finetune)?;
        at_least("segmenter.batch_size", s.batch_size, 1)?;
        at_least("segmenter.base_width", s.base_width, 1)?;
        at_least("segmenter.depth", s.depth, 1)?;
        if !(0.0..1.0).contains(&s.dropout) {
            return Err(Error::config("segmenter.dropout", "must lie in [0, 1)"));
        }
        non_negative("segmenter.weight_decay", s.weight_decay)?;

        let a = &self.augment;
        non_negative("augment.rotation_deg", a.rotation_deg)?;
        ordered("augment.scale_range", a.scale_range)?;
        positive("augment.scale_range", a.scale_range[0])?;
        non_negative("augment.elastic_alpha", a.elastic_alpha)?;
        positive("augment.elastic_sigma", a.elastic_sigma)?;
        ordered("augment.gamma_range", a.gamma_range)?;
        positive("augment.gamma_range", a.gamma_range[0])?;

        at_least("ensemble.size", self.ensemble.size, 1)?;

        let c = &self.crf;
        non_negative("crf.w1", c.w1)?;
        non_negative("crf.w2", c.w2)?;
        positive("crf.sigma_gamma", c.sigma_gamma)?;
        positive("crf.sigma_alpha", c.sigma_alpha)?;
        positive("crf.sigma_beta", c.sigma_beta)?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let key = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("<file>")
                .to_string();
            Error::config(&key, e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Reads a config file; missing keys take their defaults.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_toml_str(&text).map_err(|e| match e {
        Error::Config { key, msg } => Error::Config {
            key,
            msg: format!("{msg} (in {})", path.display()),
        },
        other => other,
    })
}

/// Writes the full effective config to `dir/config.toml`.
pub fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml_string()).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.segmenter.lambda, 0.5);
        assert_eq!(cfg.segmenter.class_weights, [0.2, 0.25, 0.3, 0.25]);
        assert_eq!(cfg.segmenter.lr_initial, 1e-3);
        assert_eq!(cfg.segmenter.lr_finetune, 1e-5);
        assert_eq!(cfg.segmenter.epochs_pretrain + cfg.segmenter.epochs_finetune, 1000);
        assert_eq!(cfg.synthesis.styles_per_image, 5);
        assert_eq!(cfg.preprocess.crop_size, 192);
        assert_eq!(cfg.preprocess.target_spacing, 1.25);
        assert_eq!(cfg.ensemble.size, 4);
        assert_eq!(cfg.translator.batch_size, 1);
        assert_eq!(cfg.translator.iterations, 20_000);
        assert_eq!(cfg.translator.style_dim, 8);
        assert!(cfg.translator.weights.kl > 0.0);
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn explicit_value_is_kept() {
        let cfg = RunConfig::from_toml_str("[synthesis]\nstyles_per_image = 5\n").unwrap();
        assert_eq!(cfg.synthesis.styles_per_image, 5);
        let cfg = RunConfig::from_toml_str("[synthesis]\nstyles_per_image = 2\n").unwrap();
        assert_eq!(cfg.synthesis.styles_per_image, 2);
    }

    #[test]
    fn invalid_values_name_their_key() {
        let err = RunConfig::from_toml_str("[segmenter]\nlambda = -1.0\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "segmenter.lambda"), "{err}");
        let err = RunConfig::from_toml_str("[preprocess]\ncrop_size = 63\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "preprocess.crop_size"));
        let err = RunConfig::from_toml_str("[synthesis]\nstyles_per_image = 0\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "synthesis.styles_per_image"));
        let err = RunConfig::from_toml_str("[segmenter]\nclass_weights = [0.2, 0.0, 0.3, 0.25]\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "segmenter.class_weights[1]"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[segmenter]\nlamda = 0.5\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "lamda"), "{err}");
        assert!(RunConfig::from_toml_str("sed = 3\n").is_err());
    }

    #[test]
    fn echo_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::from_toml_str("seed = 7\n[crf]\nw1 = 0.1\n[synthesis]\nseed = 11\n").unwrap();
        cfg.segmenter.lambda = 0.1 + 0.2;
        echo_config(&cfg, dir.path()).unwrap();
        let back = load_config(&dir.path().join("config.toml")).unwrap();
        assert_eq!(back, cfg);
        echo_config(&back, dir.path()).unwrap();
        assert_eq!(load_config(&dir.path().join("config.toml")).unwrap(), cfg);
    }
}
