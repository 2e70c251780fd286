//! The artifact pipeline: data → pretraining → boosting → adapting → reports,
//! every step resumable from its files.
//!
//! Each step first looks for its own artifacts and loads them instead of
//! recomputing — so a boosting checkpoint trained once feeds any number of
//! adapting runs, and re-invoking any subcommand is cheap. All randomness is
//! derived from the config seed with per-purpose labels, making artifacts a
//! pure function of (config, seed).

use std::path::{Path, PathBuf};

use serde_json::json;

use crate::adapt::{
    eval_base_to_novel, run_adapt_phase, AdaptConfig, AdaptVariant, FewShotConfig,
};
use crate::boost::{run_boost_phase, KdConfig, UnlabeledSet};
use crate::domain::{fit_linear_probe, generate_domain, shift_domain, Dataset};
use crate::error::{Error, Result};
use crate::eval::{eval_zero_shot_with_boosting, file_sha256, EvalReport, ZeroShotReport};
use crate::model::MiniClip;
use crate::pretrain::{contrastive_pretrain, PairedCorpus, PretrainMetrics};
use crate::prompts::{load_prompt_sets, save_prompt_sets, Branch, PromptSet};
use crate::rng::derive_seed;
use crate::tokenizer::Vocab;

use super::config::RunConfig;
use super::report::{csv_document, read_json, write_json, write_text};
use super::svg::line_chart_svg;

/// Steps of the linear-probe witness fitted during data generation.
const PROBE_STEPS: usize = 200;
const PROBE_LR: f64 = 0.5;

/// An output directory. All artifact paths are relative to its root:
///
/// ```text
/// config.resolved.json      resolved configuration snapshot
/// data/source.{bin,json}    source dataset        data/probe.json
/// data/shifted.{bin,json}   shifted dataset
/// models/{student,teacher}.{bin,json}
/// prompts/boost[_tag].{bin,json}
/// metrics/*.csv             per-epoch curves
/// reports/*.json            evaluation reports
/// ablate/*.csv              ablation grids
/// plots/*.svg               optional charts
/// ```
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path of a workspace-relative artifact.
    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// Stable artifact label of one adapting run.
pub fn adapt_label(variant: AdaptVariant, shots: usize, run: usize, cascade: bool) -> String {
    let arm = if cascade { "cascade" } else { "plain" };
    format!("adapt_{variant}_k{shots}_{arm}_r{run}")
}

/// The pipeline: a config bound to a workspace. Creating it snapshots the
/// resolved configuration at the workspace root.
pub struct Pipeline<'a> {
    cfg: &'a RunConfig,
    ws: &'a Workspace,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a RunConfig, ws: &'a Workspace) -> Result<Self> {
        cfg.validate()?;
        for dir in ["data", "models", "prompts", "metrics", "reports", "ablate"] {
            let p = ws.path(dir);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(p, e))?;
        }
        write_json(&ws.path("config.resolved.json"), &cfg.resolved())?;
        Ok(Pipeline { cfg, ws })
    }

    pub fn config(&self) -> &RunConfig {
        self.cfg
    }

    pub fn workspace(&self) -> &Workspace {
        self.ws
    }

    fn pair(&self, stem: &str) -> (PathBuf, PathBuf) {
        (self.ws.path(&format!("{stem}.bin")), self.ws.path(&format!("{stem}.json")))
    }

    // ── data ─────────────────────────────────────────────────────────

    /// Source and shifted datasets. On first run this also fits the
    /// linear-probe witness (classes must be separable from raw pixels; a
    /// source-fit probe must lose accuracy on the shift) and records it in
    /// `data/probe.json`.
    pub fn gen_data(&self) -> Result<(Dataset, Dataset)> {
        let (src_bin, src_man) = self.pair("data/source");
        let (shf_bin, shf_man) = self.pair("data/shifted");
        let probe_path = self.ws.path("data/probe.json");
        if src_bin.exists() && shf_bin.exists() && probe_path.exists() {
            return Ok((Dataset::load(&src_bin, &src_man)?, Dataset::load(&shf_bin, &shf_man)?));
        }
        let spec = self.cfg.domain_spec();
        let source = generate_domain(&spec, derive_seed(self.cfg.seed, "data/source"))?;
        let shifted_spec = shift_domain(&spec, self.cfg.shift_magnitude)?;
        let shifted = generate_domain(&shifted_spec, derive_seed(self.cfg.seed, "data/shifted"))?;

        let probe = fit_linear_probe(&source, PROBE_STEPS, PROBE_LR)?;
        let witness = json!({
            "probe_steps": PROBE_STEPS,
            "source_acc": probe.accuracy(&source)?,
            "shifted_acc": probe.accuracy(&shifted)?,
            "mean_pixel_distance": Dataset::mean_pixel_distance(&source, &shifted)?,
        });
        source.save(&src_bin, &src_man)?;
        shifted.save(&shf_bin, &shf_man)?;
        write_json(&probe_path, &witness)?;
        Ok((source, shifted))
    }

    // ── pretraining ──────────────────────────────────────────────────

    /// Pretrained, frozen (student, teacher). Each encoder trains once and
    /// is reloaded from its checkpoint afterwards.
    pub fn pretrain(&self) -> Result<(MiniClip, MiniClip)> {
        let student = self.pretrain_role("student")?;
        let teacher = self.pretrain_role("teacher")?;
        Ok((student, teacher))
    }

    fn pretrain_role(&self, role: &str) -> Result<MiniClip> {
        let (bin, man) = self.pair(&format!("models/{role}"));
        if bin.exists() {
            return MiniClip::load(&bin, &man);
        }
        let (source, _) = self.gen_data()?;
        let corpus = PairedCorpus::from_dataset(&source, &Vocab::standard())?;
        let ecfg = if role == "teacher" { self.cfg.teacher_cfg() } else { self.cfg.student_cfg() };
        let mut model = MiniClip::init(
            ecfg,
            self.cfg.model.d_shared,
            derive_seed(self.cfg.seed, &format!("model/{role}")),
        )?;
        let metrics = contrastive_pretrain(&mut model, &corpus, &self.cfg.pretrain_cfg(role))?;
        model.freeze();
        model.save(&bin, &man)?;
        self.write_pretrain_metrics(role, &metrics)?;
        Ok(model)
    }

    fn write_pretrain_metrics(&self, role: &str, m: &PretrainMetrics) -> Result<()> {
        let rows: Vec<Vec<String>> = m
            .per_epoch
            .iter()
            .map(|e| {
                vec![
                    e.epoch.to_string(),
                    format!("{:.6}", e.loss),
                    format!("{:.6}", e.retrieval),
                    format!("{:.6}", e.temperature),
                ]
            })
            .collect();
        write_text(
            &self.ws.path(&format!("metrics/pretrain_{role}.csv")),
            &csv_document("epoch,loss,retrieval,temperature", &rows),
        )?;
        write_json(
            &self.ws.path(&format!("metrics/pretrain_{role}_init.json")),
            &json!({
                "first_batch_loss_i2t": m.first_batch_loss_i2t,
                "first_batch_loss_t2i": m.first_batch_loss_t2i,
            }),
        )?;
        if self.cfg.plots {
            let pts: Vec<(f64, f64)> =
                m.per_epoch.iter().map(|e| (e.epoch as f64, e.retrieval)).collect();
            line_chart_svg(
                &self.ws.path(&format!("plots/pretrain_{role}.svg")),
                &format!("{role} in-batch retrieval"),
                &[("retrieval", &pts)],
            )?;
        }
        Ok(())
    }

    // ── boosting (phase one) ─────────────────────────────────────────

    /// Boosting prompts at the config's geometry over the full unlabeled
    /// pool; the artifact every cascade run shares.
    pub fn boost(&self) -> Result<(PromptSet, PromptSet)> {
        self.boost_with("", &self.cfg.kd_cfg(), None)
    }

    /// Boosting prompts under an alternative distillation recipe and/or a
    /// reduced unlabeled pool (`per_class` images per class; `None` = full
    /// train split). `tag` keys the cached artifact; the ablation grids use
    /// this to train each distinct geometry exactly once.
    pub fn boost_with(
        &self,
        tag: &str,
        kd: &KdConfig,
        per_class: Option<usize>,
    ) -> Result<(PromptSet, PromptSet)> {
        let stem = if tag.is_empty() {
            "prompts/boost".to_string()
        } else {
            format!("prompts/boost_{tag}")
        };
        let (bin, man) = self.pair(&stem);
        if bin.exists() {
            let sets = load_prompt_sets(&bin, &man)?;
            return split_boost_pair(sets, &bin);
        }
        let (source, _) = self.gen_data()?;
        let (student, teacher) = self.pretrain()?;
        let pool = match per_class {
            None => UnlabeledSet::from_train_split(&source),
            Some(k) => UnlabeledSet::from_train_subset(
                &source,
                k,
                derive_seed(self.cfg.seed, "boost/pool"),
            )?,
        };
        let outcome = run_boost_phase(&student, &teacher, &pool, kd)?;

        let rows: Vec<Vec<String>> = outcome
            .epochs
            .iter()
            .map(|e| {
                vec![
                    e.epoch.to_string(),
                    format!("{:.6}", e.kd_loss),
                    format!("{:.6}", e.heldout_agreement),
                ]
            })
            .collect();
        let csv_name = if tag.is_empty() {
            "metrics/boost.csv".to_string()
        } else {
            format!("metrics/boost_{tag}.csv")
        };
        write_text(
            &self.ws.path(&csv_name),
            &csv_document("epoch,kd_loss,heldout_agreement", &rows),
        )?;
        if self.cfg.plots {
            let agree: Vec<(f64, f64)> = outcome
                .epochs
                .iter()
                .map(|e| (e.epoch as f64, e.heldout_agreement))
                .collect();
            let loss: Vec<(f64, f64)> =
                outcome.epochs.iter().map(|e| (e.epoch as f64, e.kd_loss)).collect();
            let svg_name = if tag.is_empty() {
                "plots/boost.svg".to_string()
            } else {
                format!("plots/boost_{tag}.svg")
            };
            line_chart_svg(
                &self.ws.path(&svg_name),
                "distillation: held-out agreement and KD loss",
                &[("agreement", &agree), ("kd_loss", &loss)],
            )?;
        }
        save_prompt_sets(
            &bin,
            &man,
            &[&outcome.text, &outcome.vision],
            json!({ "tag": tag, "kd": kd, "pool_per_class": per_class }),
        )?;
        Ok((outcome.text, outcome.vision))
    }

    // ── adapting (phase two) ─────────────────────────────────────────

    /// One adapting run under the config's variant settings: run index
    /// `run` picks the derived seed, `cascade` decides whether the frozen
    /// boosting prompts join the layout. Writes the per-epoch curve and the
    /// evaluation report; a finished run is loaded straight from its report.
    pub fn adapt(&self, variant: AdaptVariant, run: usize, cascade: bool) -> Result<EvalReport> {
        let label = adapt_label(variant, self.cfg.shots, run, cascade);
        let report_path = self.ws.path(&format!("reports/{label}.json"));
        if report_path.exists() {
            return read_json(&report_path);
        }
        let (source, _) = self.gen_data()?;
        let (student, _) = self.pretrain()?;
        let boosting = if cascade { Some(self.boost()?) } else { None };

        let seed = self.cfg.run_seed(run);
        let mut acfg = self.cfg.adapt_cfg(variant);
        acfg.seed = seed;
        let few = FewShotConfig { shots: self.cfg.shots, seed, base_only: true };
        let outcome = run_adapt_phase(
            &student,
            boosting.as_ref().map(|(t, v)| (t, v)),
            &source,
            &few,
            &acfg,
        )?;

        let rows: Vec<Vec<String>> = outcome
            .epochs
            .iter()
            .map(|e| {
                vec![
                    e.epoch.to_string(),
                    format!("{:.6}", e.train_loss),
                    format!("{:.6}", e.base_acc),
                    format!("{:.6}", e.novel_acc),
                ]
            })
            .collect();
        write_text(
            &self.ws.path(&format!("metrics/{label}.csv")),
            &csv_document("epoch,train_loss,base_acc,novel_acc", &rows),
        )?;

        let mut report = eval_base_to_novel(&student, &outcome, &source, seed)?;
        report.meta.config = json!({
            "label": label,
            "variant": variant,
            "shots": self.cfg.shots,
            "run": run,
            "cascade": cascade,
            "adapt": acfg,
        });
        report.meta.checkpoint_sha256 = self.artifact_hashes(cascade)?;
        write_json(&report_path, &report)?;
        Ok(report)
    }

    /// SHA-256 of the checkpoints feeding an evaluation, keyed by role.
    fn artifact_hashes(&self, with_boost: bool) -> Result<std::collections::BTreeMap<String, String>> {
        let mut map = std::collections::BTreeMap::new();
        for (role, rel) in
            [("data", "data/source.bin"), ("student", "models/student.bin")]
        {
            let p = self.ws.path(rel);
            if p.exists() {
                map.insert(role.to_string(), file_sha256(&p)?);
            }
        }
        if with_boost {
            let p = self.ws.path("prompts/boost.bin");
            if p.exists() {
                map.insert("boost".to_string(), file_sha256(&p)?);
            }
        }
        Ok(map)
    }

    // ── zero-shot evaluation ─────────────────────────────────────────

    /// Template-free zero-shot accuracy, plain vs boosted, on the source
    /// and the shifted domain (the domain-generalization analog).
    pub fn eval_zero_shot(&self) -> Result<(ZeroShotReport, ZeroShotReport)> {
        let src_path = self.ws.path("reports/zero_shot.json");
        let shf_path = self.ws.path("reports/zero_shot_shifted.json");
        if src_path.exists() && shf_path.exists() {
            return Ok((read_json(&src_path)?, read_json(&shf_path)?));
        }
        let (source, shifted) = self.gen_data()?;
        let (student, _) = self.pretrain()?;
        let (bt, bv) = self.boost()?;
        let seed = self.cfg.run_seed(0);
        let hashes = self.artifact_hashes(true)?;

        let mut on_source = eval_zero_shot_with_boosting(&student, Some((&bt, &bv)), &source, seed)?;
        on_source.meta.config = json!({ "domain": source.spec().id, "protocol": "zero-shot" });
        on_source.meta.checkpoint_sha256 = hashes.clone();
        write_json(&src_path, &on_source)?;

        let mut on_shifted =
            eval_zero_shot_with_boosting(&student, Some((&bt, &bv)), &shifted, seed)?;
        on_shifted.meta.config = json!({ "domain": shifted.spec().id, "protocol": "zero-shot" });
        on_shifted.meta.checkpoint_sha256 = hashes;
        write_json(&shf_path, &on_shifted)?;
        Ok((on_source, on_shifted))
    }
}

/// One in-memory adapting run + evaluation, no artifacts: the unit the
/// ablation grids repeat per seed.
pub(crate) fn adapt_once(
    student: &MiniClip,
    ds: &Dataset,
    boosting: Option<(&PromptSet, &PromptSet)>,
    acfg: &AdaptConfig,
    shots: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut acfg = acfg.clone();
    acfg.seed = seed;
    let few = FewShotConfig { shots, seed, base_only: true };
    let outcome = run_adapt_phase(student, boosting, ds, &few, &acfg)?;
    eval_base_to_novel(student, &outcome, ds, seed)
}

/// Splits a loaded boost bundle into (text, vision), whatever order it was
/// saved in.
fn split_boost_pair(sets: Vec<PromptSet>, src: &Path) -> Result<(PromptSet, PromptSet)> {
    let mut text = None;
    let mut vision = None;
    for s in sets {
        match s.branch() {
            Branch::Text => text = Some(s),
            Branch::Vision => vision = Some(s),
        }
    }
    match (text, vision) {
        (Some(t), Some(v)) => Ok((t, v)),
        _ => Err(Error::Io {
            path: src.to_path_buf(),
            detail: "boost bundle must contain one text and one vision set".into(),
        }),
    }
}
