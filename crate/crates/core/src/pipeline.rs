//! End-to-end experiment: phantom corpus, preprocessing, translation,
//! synthesis, curriculum training, post-processing, ensembling, evaluation.
//!
//! Each stage writes into its own directory under the output root and
//! finishes by writing `stage.json` with a hash of its configuration chained
//! with the hash of the stage before it. `run` skips stages whose recorded
//! hash is current; `resume` recomputes from a given stage onward.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use styleseg_nn::Checkpoint;

use crate::config::{echo_config, CrfParams, RunConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::manifest::{DatasetManifest, Split};
use crate::metrics::{evaluate_split, CaseResult, EvalReport};
use crate::phantom::generate_corpus;
use crate::plot;
use crate::postprocess::{crf_volume, morph_refine};
use crate::preprocess::{preprocess_manifest, resampled_pairs, Localizer};
use crate::segmenter::cascade::{ensemble_predict, stage_fit_config, CascadeModel, CurriculumStage};
use crate::segmenter::train::{LossCurve, Sample};
use crate::seed::child_seed;
use crate::translator::{reconstruction_l1, synthesize_dataset, train_translator, Domain, TranslatorModel};
use crate::volume::{LabelMap, Modality, ProbMap, Volume};

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Phantom,
    Preprocess,
    Translate,
    Synth,
    Segment,
    Postprocess,
    Ensemble,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Phantom,
        Stage::Preprocess,
        Stage::Translate,
        Stage::Synth,
        Stage::Segment,
        Stage::Postprocess,
        Stage::Ensemble,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Phantom => "phantom",
            Stage::Preprocess => "preprocess",
            Stage::Translate => "translate",
            Stage::Synth => "synth",
            Stage::Segment => "segment",
            Stage::Postprocess => "postprocess",
            Stage::Ensemble => "ensemble",
            Stage::Eval => "eval",
        }
    }

    /// Directory of the stage's artifacts, relative to the output root.
    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Eval => "report",
            s => s.name(),
        }
    }

    fn index(self) -> usize {
        Stage::ALL.iter().position(|s| *s == self).expect("listed")
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown stage `{s}`; expected one of {:?}", Stage::ALL.map(Stage::name))))
    }
}

/// Method rows of the comparison table, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    SourceOnly,
    UnetFt,
    CascadeFt,
    CascadeFtPp,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::SourceOnly, Method::UnetFt, Method::CascadeFt, Method::CascadeFtPp];

    pub fn key(self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::UnetFt => "unet_ft",
            Method::CascadeFt => "cascade_ft",
            Method::CascadeFtPp => "cascade_ft_pp",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::SourceOnly => "U-net (source only)",
            Method::UnetFt => "U-net (FT)",
            Method::CascadeFt => "Cascaded U-net (FT)",
            Method::CascadeFtPp => "Cascaded U-net (FT) + PP",
        }
    }

    fn enabled(self, cfg: &RunConfig) -> bool {
        let b = &cfg.experiment.baselines;
        match self {
            Method::SourceOnly => b.source_only,
            Method::UnetFt => b.unet_ft,
            Method::CascadeFt => b.cascade_ft,
            Method::CascadeFtPp => b.cascade_ft_pp,
        }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct StageMarker {
    pub stage: Stage,
    pub hash: String,
    /// Wall-clock duration of the stage's last execution.
    pub seconds: f64,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(v).expect("serializable"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn stage_err(stage: Stage) -> impl FnOnce(Error) -> Error {
    move |e| Error::Stage {
        stage: stage.name().to_string(),
        source: Box::new(e),
    }
}

fn require(stage: Stage, path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact {
            stage: stage.name().to_string(),
            path,
        })
    }
}

pub fn samples_of(manifest: &DatasetManifest, split: Split, modality: Modality) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for r in manifest.select(split, modality) {
        let (v, l) = manifest.load_pair(r)?;
        for z in 0..v.num_slices() {
            out.push(Sample {
                image: v.slice(z).to_owned(),
                label: l.slice(z).to_owned(),
            });
        }
    }
    Ok(out)
}

fn curves_plot(curves: &[LossCurve]) -> String {
    let series: Vec<(String, Vec<(f64, f64)>)> = curves
        .iter()
        .map(|c| {
            let pts = c.epoch_loss.iter().enumerate().map(|(i, l)| ((i + 1) as f64, *l)).collect();
            (c.stage.clone(), pts)
        })
        .collect();
    plot::line_plot("Segmentation training loss per epoch", &series)
}

/// Trains the curriculum for one ensemble member into `dir`. With `pretrained`,
/// stage 1 is taken from it instead of being trained.
fn train_member(
    cfg: &RunConfig,
    source: &[Sample],
    synth: &[Sample],
    seed: u64,
    dir: &Path,
    pretrained: Option<&CascadeModel>,
) -> Result<CascadeModel> {
    let seg = &cfg.segmenter;
    let mut model = match pretrained {
        Some(m) => {
            let mut fresh = CascadeModel::new(seg, seed);
            fresh.unet1 = m.unet1.clone();
            fresh
        }
        None => CascadeModel::new(seg, seed),
    };
    let mut curves = Vec::new();
    for stage in CurriculumStage::ALL {
        if stage == CurriculumStage::Unet1Pretrain && pretrained.is_some() {
            model.save(&dir.join(format!("{}.ckpt", stage.name())))?;
            continue;
        }
        let data = if stage.is_finetune() { synth } else { source };
        let curve = model.train_stage(stage, data, &stage_fit_config(seg, &cfg.augment, stage, seed))?;
        write_text(&dir.join(format!("{}_loss.csv", stage.name())), &curve.to_csv())?;
        model.save(&dir.join(format!("{}.ckpt", stage.name())))?;
        curves.push(curve);
    }
    write_text(&dir.join("loss_curves.svg"), &curves_plot(&curves))?;
    model.save(&dir.join("cascade.ckpt"))?;
    Ok(model)
}

fn save_prediction(dir: &Path, case_id: &str, l: &LabelMap) -> Result<()> {
    io::save_labelmap(l, &dir.join(format!("{case_id}.raw")))
}

/// Loaded preprocessed target volumes of one split with their case ids.
fn target_cases(m: &DatasetManifest, split: Split) -> Result<Vec<(String, Volume, LabelMap)>> {
    m.select(split, Modality::Target)
        .map(|r| {
            let (v, l) = m.load_pair(r)?;
            Ok((r.case_id.clone(), v, l))
        })
        .collect()
}

/// CRF settings tried when tuning on the validation split. The first keeps
/// only morphology.
fn crf_candidates(base: &CrfParams) -> Vec<CrfParams> {
    let mut out = vec![CrfParams {
        w1: 0.0,
        w2: 0.0,
        ..base.clone()
    }];
    out.push(base.clone());
    for w1 in [0.0, 3.0] {
        for w2 in [1.0, 3.0, 5.0, 10.0] {
            for sigma_beta in [0.25, 0.5, 1.0] {
                let c = CrfParams {
                    w1,
                    w2,
                    sigma_beta,
                    ..base.clone()
                };
                if !out.contains(&c) {
                    out.push(c);
                }
            }
        }
    }
    out
}

fn score_crf(cases: &[(String, Volume, LabelMap, ProbMap)], crf: &CrfParams, cfg: &RunConfig) -> Result<(f64, f64)> {
    let mut report = EvalReport { cases: Vec::new() };
    for (id, v, gt, p2) in cases {
        let pred = morph_refine(&crf_volume(p2, v, crf)?.argmax(), &cfg.morphology);
        report.cases.push(CaseResult::compute(id, &pred, gt, v.spacing(), cfg.eval.surface)?);
    }
    Ok((report.avg_asd().unwrap_or(f64::INFINITY), report.avg_dice()))
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, out: out.into() })
    }

    pub fn stage_dir(&self, s: Stage) -> PathBuf {
        self.out.join(s.dir_name())
    }

    fn phantom_seed(&self) -> u64 {
        self.cfg.phantom.seed.unwrap_or_else(|| child_seed(self.cfg.seed, "phantom"))
    }

    fn synthesis_seed(&self) -> u64 {
        self.cfg.synthesis.seed.unwrap_or_else(|| child_seed(self.cfg.seed, "synthesis"))
    }

    fn member_seed(&self, k: usize) -> u64 {
        child_seed(self.cfg.seed, &format!("segment/member{k}"))
    }

    fn member_synth_seed(&self, k: usize) -> u64 {
        if k == 0 {
            self.synthesis_seed()
        } else {
            child_seed(self.synthesis_seed(), &format!("member{k}"))
        }
    }

    fn stage_config(&self, s: Stage) -> serde_json::Value {
        let c = &self.cfg;
        match s {
            Stage::Phantom => json!({ "phantom": c.phantom, "seed": self.phantom_seed() }),
            Stage::Preprocess => json!({ "preprocess": c.preprocess, "augment": c.augment, "seed": c.seed }),
            Stage::Translate => json!({ "translator": c.translator, "seed": c.seed }),
            Stage::Synth => json!({ "k": c.synthesis.styles_per_image, "seed": self.synthesis_seed() }),
            Stage::Segment => json!({ "segmenter": c.segmenter, "augment": c.augment, "seed": c.seed }),
            Stage::Postprocess => json!({ "crf": c.crf, "morphology": c.morphology, "tune_crf": c.experiment.tune_crf }),
            Stage::Ensemble => json!({ "ensemble": c.ensemble }),
            Stage::Eval => json!({ "eval": c.eval, "baselines": c.experiment.baselines }),
        }
    }

    /// Chained configuration hashes of every stage, in order.
    pub fn stage_hashes(&self) -> Vec<(Stage, String)> {
        let mut parent = String::new();
        Stage::ALL
            .into_iter()
            .map(|s| {
                let mut h = Sha256::new();
                h.update(FORMAT_VERSION.to_le_bytes());
                h.update(s.name().as_bytes());
                h.update(serde_json::to_vec(&self.stage_config(s)).expect("config serializes"));
                h.update(parent.as_bytes());
                parent = format!("{:x}", h.finalize());
                (s, parent.clone())
            })
            .collect()
    }

    fn marker_path(&self, s: Stage) -> PathBuf {
        self.stage_dir(s).join("stage.json")
    }

    /// The completion record of stage `s`, if it has run.
    pub fn marker(&self, s: Stage) -> Result<StageMarker> {
        read_json(&require(s, self.marker_path(s))?)
    }

    fn is_current(&self, s: Stage, hash: &str) -> bool {
        read_json::<StageMarker>(&self.marker_path(s)).is_ok_and(|m| m.stage == s && m.hash == hash)
    }

    /// Runs every stage whose recorded hash is missing or stale (and all
    /// stages after the first such one).
    pub fn run(&self) -> Result<()> {
        let first_stale = self.stage_hashes().into_iter().find(|(s, h)| !self.is_current(*s, h)).map(|(s, _)| s);
        match first_stale {
            Some(s) => self.execute_from(s),
            None => {
                log::info!("all stages up to date");
                Ok(())
            }
        }
    }

    /// Recomputes `from` and every later stage. Earlier stages must have
    /// completed.
    pub fn resume(&self, from: Stage) -> Result<()> {
        for s in &Stage::ALL[..from.index()] {
            require(*s, self.marker_path(*s))?;
        }
        self.execute_from(from)
    }

    fn execute_from(&self, from: Stage) -> Result<()> {
        echo_config(&self.cfg, &self.out)?;
        let hashes = self.stage_hashes();
        for (s, hash) in &hashes[from.index()..] {
            let dir = self.stage_dir(*s);
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            log::info!("stage {}: start", s.name());
            let t = std::time::Instant::now();
            self.execute(*s).map_err(stage_err(*s))?;
            let seconds = t.elapsed().as_secs_f64();
            write_json(
                &self.marker_path(*s),
                &StageMarker {
                    stage: *s,
                    hash: hash.clone(),
                    seconds,
                },
            )?;
            log::info!("stage {}: done in {seconds:.1}s", s.name());
        }
        Ok(())
    }

    fn execute(&self, s: Stage) -> Result<()> {
        match s {
            Stage::Phantom => self.run_phantom(),
            Stage::Preprocess => self.run_preprocess(),
            Stage::Translate => self.run_translate(),
            Stage::Synth => self.run_synth(),
            Stage::Segment => self.run_segment(),
            Stage::Postprocess => self.run_postprocess(),
            Stage::Ensemble => self.run_ensemble(),
            Stage::Eval => self.run_eval(),
        }
    }

    fn load_manifest(&self, s: Stage, rel: &str) -> Result<DatasetManifest> {
        DatasetManifest::load(&require(s, self.stage_dir(s).join(rel))?)
    }

    pub fn preprocessed(&self) -> Result<DatasetManifest> {
        self.load_manifest(Stage::Preprocess, "data/manifest.json")
    }

    pub fn translator(&self) -> Result<TranslatorModel> {
        let path = require(Stage::Translate, self.stage_dir(Stage::Translate).join("translator.ckpt"))?;
        TranslatorModel::from_checkpoint(&Checkpoint::load(&path)?, Some(&(&self.cfg.translator).into()))
    }

    /// The synthetic manifest of ensemble member `k`.
    pub fn synth_manifest(&self, k: usize) -> Result<DatasetManifest> {
        if k == 0 {
            self.load_manifest(Stage::Synth, "manifest.json")
        } else {
            self.load_manifest(Stage::Ensemble, &format!("member{k}/synth/manifest.json"))
        }
    }

    fn member_dir(&self, k: usize) -> PathBuf {
        if k == 0 {
            self.stage_dir(Stage::Segment)
        } else {
            self.stage_dir(Stage::Ensemble).join(format!("member{k}"))
        }
    }

    /// The model of member `k` after `stage` (the final cascade for `None`).
    pub fn member_model(&self, k: usize, stage: Option<CurriculumStage>) -> Result<CascadeModel> {
        let name = stage.map_or("cascade".to_string(), |s| s.name().to_string());
        let owner = if k == 0 { Stage::Segment } else { Stage::Ensemble };
        CascadeModel::load(&require(owner, self.member_dir(k).join(format!("{name}.ckpt")))?)
    }

    pub fn predictions_dir(&self, name: &str) -> PathBuf {
        let owner = if name.starts_with("member") || name == "ensemble" {
            Stage::Ensemble
        } else {
            Stage::Postprocess
        };
        self.stage_dir(owner).join("predictions").join(name)
    }

    fn run_phantom(&self) -> Result<()> {
        generate_corpus(&self.cfg.phantom, self.phantom_seed(), &self.stage_dir(Stage::Phantom))?;
        Ok(())
    }

    fn run_preprocess(&self) -> Result<()> {
        let raw = self.load_manifest(Stage::Phantom, "manifest.json")?;
        let p = &self.cfg.preprocess;
        let dir = self.stage_dir(Stage::Preprocess);
        let pairs = resampled_pairs(&raw, Split::Train, Modality::Source, p.target_spacing)?;
        let (loc, curve) = Localizer::train(&pairs, &p.localizer, &self.cfg.augment, child_seed(self.cfg.seed, "localizer"))?;
        loc.save(&dir.join("localizer.ckpt"))?;
        write_text(&dir.join("localizer_loss.csv"), &curve.to_csv())?;
        preprocess_manifest(&raw, &loc, p, &dir.join("data"))?;
        Ok(())
    }

    fn translator_pools(&self, m: &DatasetManifest) -> Result<(Vec<Volume>, Vec<Volume>)> {
        let load = |modality| {
            m.select(Split::TranslatorTrain, modality)
                .map(|r| m.load_image(r))
                .collect::<Result<Vec<_>>>()
        };
        Ok((load(Modality::Source)?, load(Modality::Target)?))
    }

    fn run_translate(&self) -> Result<()> {
        let m = self.preprocessed()?;
        let (a, b) = self.translator_pools(&m)?;
        let dir = self.stage_dir(Stage::Translate);
        let (model, log) = train_translator(&a, &b, &self.cfg.translator, child_seed(self.cfg.seed, "translator"))?;
        model.to_checkpoint().save(&dir.join("translator.ckpt"))?;
        write_text(&dir.join("log.csv"), &log.to_csv())?;
        let series = |name: &str, f: fn(&crate::translator::train::StepLosses) -> f64| {
            (name.to_string(), log.intervals.iter().map(|(i, l)| (*i as f64, f(l))).collect::<Vec<_>>())
        };
        let svg = plot::line_plot(
            "Translator losses per logging interval",
            &[
                series("recon_x", |l| l.recon_x),
                series("gen_gan", |l| l.gen_gan),
                series("dis", |l| l.dis),
                series("recon_c", |l| l.recon_c),
            ],
        );
        write_text(&dir.join("losses.svg"), &svg)?;
        let recon = json!({
            "source_l1": reconstruction_l1(&model, &a, Domain::Source)?,
            "target_l1": reconstruction_l1(&model, &b, Domain::Target)?,
        });
        write_json(&dir.join("reconstruction.json"), &recon)
    }

    fn synthesize_member(&self, k: usize, out: &Path) -> Result<DatasetManifest> {
        let m = self.preprocessed()?;
        let t = self.translator()?;
        synthesize_dataset(&t, &m, self.cfg.synthesis.styles_per_image, self.member_synth_seed(k), out)
    }

    fn run_synth(&self) -> Result<()> {
        self.synthesize_member(0, &self.stage_dir(Stage::Synth))?;
        Ok(())
    }

    fn run_segment(&self) -> Result<()> {
        let m = self.preprocessed()?;
        let source = samples_of(&m, Split::Train, Modality::Source)?;
        let synth = samples_of(&self.synth_manifest(0)?, Split::Train, Modality::SynthTarget)?;
        train_member(&self.cfg, &source, &synth, self.member_seed(0), &self.stage_dir(Stage::Segment), None)?;
        Ok(())
    }

    fn predict_batch(&self) -> usize {
        self.cfg.segmenter.batch_size
    }

    fn run_postprocess(&self) -> Result<()> {
        let m = self.preprocessed()?;
        let dir = self.stage_dir(Stage::Postprocess);
        let final_model = self.member_model(0, None)?;
        let batch = self.predict_batch();

        let crf = if self.cfg.experiment.tune_crf {
            let val: Vec<_> = target_cases(&m, Split::Val)?
                .into_iter()
                .map(|(id, v, l)| final_model.predict_volume(&v, batch).map(|(_, p2)| (id, v, l, p2)))
                .collect::<Result<_>>()?;
            let mut best: Option<(CrfParams, f64, f64)> = None;
            let mut table = String::from("w1,w2,sigma_beta,val_avg_asd_mm,val_avg_dice\n");
            for c in crf_candidates(&self.cfg.crf) {
                let (asd, dice) = score_crf(&val, &c, &self.cfg)?;
                let _ = writeln!(table, "{},{},{},{asd:.6},{dice:.6}", c.w1, c.w2, c.sigma_beta);
                if best.as_ref().is_none_or(|b| asd < b.1 || (asd == b.1 && dice > b.2)) {
                    best = Some((c, asd, dice));
                }
            }
            write_text(&dir.join("crf_tuning.csv"), &table)?;
            best.expect("at least one candidate").0
        } else {
            self.cfg.crf.clone()
        };
        write_json(&dir.join("crf.json"), &crf)?;

        let source_only = self.member_model(0, Some(CurriculumStage::Unet1Pretrain))?;
        let unet_ft = self.member_model(0, Some(CurriculumStage::Unet1Finetune))?;
        for (id, v, _) in target_cases(&m, Split::Test)? {
            let (p1_src, _) = source_only.predict_volume(&v, batch)?;
            let (p1_ft, _) = unet_ft.predict_volume(&v, batch)?;
            let (_, p2) = final_model.predict_volume(&v, batch)?;
            let pp = morph_refine(&crf_volume(&p2, &v, &crf)?.argmax(), &self.cfg.morphology);
            for (method, labels) in [
                (Method::SourceOnly, p1_src.argmax()),
                (Method::UnetFt, p1_ft.argmax()),
                (Method::CascadeFt, p2.argmax()),
                (Method::CascadeFtPp, pp),
            ] {
                if method.enabled(&self.cfg) {
                    save_prediction(&self.predictions_dir(method.key()), &id, &labels)?;
                }
            }
        }
        Ok(())
    }

    fn run_ensemble(&self) -> Result<()> {
        let m = self.preprocessed()?;
        let source = samples_of(&m, Split::Train, Modality::Source)?;
        let size = self.cfg.ensemble.size;
        let shared = if self.cfg.ensemble.share_pretrain {
            Some(self.member_model(0, Some(CurriculumStage::Unet1Pretrain))?)
        } else {
            None
        };
        let mut members = vec![self.member_model(0, None)?];
        for k in 1..size {
            let dir = self.member_dir(k);
            log::info!("ensemble member {k}/{}", size - 1);
            let synth_m = self.synthesize_member(k, &dir.join("synth"))?;
            let synth = samples_of(&synth_m, Split::Train, Modality::SynthTarget)?;
            members.push(train_member(&self.cfg, &source, &synth, self.member_seed(k), &dir, shared.as_ref())?);
        }
        let batch = self.predict_batch();
        for (id, v, _) in target_cases(&m, Split::Test)? {
            for (k, member) in members.iter().enumerate() {
                let (_, p2) = member.predict_volume(&v, batch)?;
                save_prediction(&self.predictions_dir(&format!("member{k}")), &id, &p2.argmax())?;
            }
            let (_, labels) = ensemble_predict(&members, &v, batch)?;
            save_prediction(&self.predictions_dir("ensemble"), &id, &labels)?;
        }
        Ok(())
    }

    fn evaluate(&self, m: &DatasetManifest, name: &str) -> Result<EvalReport> {
        let dir = self.predictions_dir(name);
        evaluate_split(&dir, m, Split::Test, Modality::Target, self.cfg.eval.surface)
    }

    fn run_eval(&self) -> Result<()> {
        let m = self.preprocessed()?;
        let dir = self.stage_dir(Stage::Eval);
        let mut rows = Vec::new();
        for method in Method::ALL.into_iter().filter(|x| x.enabled(&self.cfg)) {
            let r = self.evaluate(&m, method.key())?;
            r.write(&dir.join(method.key()), method.label())?;
            rows.push((method.label().to_string(), r));
        }
        write_text(&dir.join("comparison.csv"), &comparison_csv(&rows))?;
        let mut ens_rows = Vec::new();
        for k in 0..self.cfg.ensemble.size {
            ens_rows.push((format!("member{k}"), self.evaluate(&m, &format!("member{k}"))?));
        }
        let ens = self.evaluate(&m, "ensemble")?;
        ens.write(&dir.join("ensemble"), "Ensemble")?;
        ens_rows.push(("ensemble".to_string(), ens));
        write_text(&dir.join("ensemble.csv"), &comparison_csv(&ens_rows))?;

        let cascade_val = self.cascade_validation(&m)?;
        write_text(&dir.join("cascade_val.csv"), &cascade_val)?;

        let categories: Vec<String> = ["LV", "MYO", "RV", "AVG"].iter().map(|s| s.to_string()).collect();
        let series: Vec<(String, Vec<f64>)> = rows
            .iter()
            .map(|(name, r)| (name.clone(), vec![r.mean_dice(0), r.mean_dice(1), r.mean_dice(2), r.avg_dice()]))
            .collect();
        write_text(
            &dir.join("comparison_dice.svg"),
            &plot::bar_chart("Target test Dice by method", &categories, &series, Some((0.0, 1.0))),
        )?;
        write_text(&dir.join("summary.txt"), &summary_text(&rows, &ens_rows))
    }

    /// Mean target-validation Dice of `p1` and `p2` of the first member.
    fn cascade_validation(&self, m: &DatasetManifest) -> Result<String> {
        let model = self.member_model(0, None)?;
        let (mut r1, mut r2) = (EvalReport { cases: Vec::new() }, EvalReport { cases: Vec::new() });
        for (id, v, gt) in target_cases(m, Split::Val)? {
            let (p1, p2) = model.predict_volume(&v, self.predict_batch())?;
            r1.cases.push(CaseResult::compute(&id, &p1.argmax(), &gt, v.spacing(), self.cfg.eval.surface)?);
            r2.cases.push(CaseResult::compute(&id, &p2.argmax(), &gt, v.spacing(), self.cfg.eval.surface)?);
        }
        Ok(comparison_csv(&[("p1".to_string(), r1), ("p2".to_string(), r2)]))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("NA".to_string(), |x| format!("{x:.6}"))
}

/// `method,dice_lv,dice_myo,dice_rv,dice_avg,asd_lv,asd_myo,asd_rv,asd_avg`.
pub fn comparison_csv(rows: &[(String, EvalReport)]) -> String {
    let mut s = String::from("method,dice_lv,dice_myo,dice_rv,dice_avg,asd_lv_mm,asd_myo_mm,asd_rv_mm,asd_avg_mm\n");
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{name},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            r.mean_dice(0),
            r.mean_dice(1),
            r.mean_dice(2),
            r.avg_dice(),
            fmt_opt(r.mean_asd(0)),
            fmt_opt(r.mean_asd(1)),
            fmt_opt(r.mean_asd(2)),
            fmt_opt(r.avg_asd())
        );
    }
    s
}

fn summary_text(rows: &[(String, EvalReport)], ens: &[(String, EvalReport)]) -> String {
    let mut s = String::from("Target-modality test split\n\n");
    let _ = writeln!(s, "{:<28} {:>9} {:>12}", "method", "mean Dice", "mean ASD mm");
    for (name, r) in rows.iter().chain(ens) {
        let _ = writeln!(s, "{name:<28} {:>9.4} {:>12}", r.avg_dice(), fmt_opt(r.avg_asd()));
    }
    s
}

/// Parses one row of a comparison CSV into `(method, dice_avg, asd_avg)`.
pub fn parse_comparison(csv: &str) -> Vec<(String, f64, Option<f64>)> {
    csv.lines()
        .skip(1)
        .filter_map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            (f.len() == 9).then(|| (f[0].to_string(), f[4].parse().unwrap_or(f64::NAN), f[8].parse().ok()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("bogus".parse::<Stage>().is_err());
    }

    #[test]
    fn hashes_only_change_downstream() {
        let base = Pipeline::new(RunConfig::default(), "/tmp/x").unwrap();
        let mut cfg = RunConfig::default();
        cfg.synthesis.seed = Some(7);
        let other = Pipeline::new(cfg, "/tmp/x").unwrap();
        let (a, b) = (base.stage_hashes(), other.stage_hashes());
        let synth = Stage::Synth.index();
        for i in 0..Stage::ALL.len() {
            assert_eq!(a[i].1 == b[i].1, i < synth, "stage {:?}", a[i].0);
        }
    }

    #[test]
    fn resume_requires_upstream_markers() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(RunConfig::default(), dir.path()).unwrap();
        match p.resume(Stage::Synth) {
            Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "phantom"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn comparison_csv_parses_back() {
        let csv = "method,dice_lv,dice_myo,dice_rv,dice_avg,asd_lv_mm,asd_myo_mm,asd_rv_mm,asd_avg_mm\nA,1,1,1,0.9,NA,NA,NA,NA\n";
        assert_eq!(parse_comparison(csv), vec![("A".to_string(), 0.9, None)]);
    }
}
