//! The ablation grids: systematic sweeps over the cascade's knobs, each one
//! a CSV under `ablate/` with mean ± stddev over the configured seeds.
//!
//! Phase-one checkpoints are trained serially first (each distinct geometry
//! exactly once, cached in `prompts/`); the phase-two cells then run on a
//! bounded worker pool, each cell single-threaded, and are collected in grid
//! order so the CSV bytes never depend on the worker count.

use std::path::PathBuf;

use rayon::prelude::*;

use crate::adapt::{AdaptConfig, AdaptVariant};
use crate::domain::Dataset;
use crate::error::{Error, Result};
use crate::model::MiniClip;
use crate::prompts::{parameter_count, PromptSet};

use super::config::RunConfig;
use super::report::{csv_document, mean_std, write_text};
use super::runs::{adapt_once, Pipeline, Workspace};
use super::svg::heatmap_svg;

/// Boosting prompt lengths swept by the length grid (and the budget-matched
/// comparison, which pins length 4 against plain length 8).
const LENGTH_MENU: [usize; 5] = [1, 2, 4, 8, 16];

/// Unlabeled-pool sizes (images per class) swept before the full-pool row.
const UNLABELED_MENU: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// One ablation study. Each writes a single CSV and resumes from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateGrid {
    /// Boosting depth × adapting depth, independent-deep layout.
    DepthGrid,
    /// Boosting prompt length × {frozen, learnable} in phase two.
    Length,
    /// Unlabeled distillation pool size, plus the full-pool row.
    Unlabeled,
    /// Budget-matched arms: frozen boost 4 + adapt 4 vs plain adapt 8.
    EqualVlp,
    /// Every adapting variant with and without the cascaded boost.
    Cascade,
}

impl AblateGrid {
    pub const ALL: [AblateGrid; 5] = [
        AblateGrid::DepthGrid,
        AblateGrid::Length,
        AblateGrid::Unlabeled,
        AblateGrid::EqualVlp,
        AblateGrid::Cascade,
    ];

    pub fn id(self) -> &'static str {
        match self {
            AblateGrid::DepthGrid => "depth-grid",
            AblateGrid::Length => "length",
            AblateGrid::Unlabeled => "unlabeled",
            AblateGrid::EqualVlp => "equal-vlp",
            AblateGrid::Cascade => "cascade",
        }
    }

    fn file_stem(self) -> &'static str {
        match self {
            AblateGrid::DepthGrid => "depth_grid",
            AblateGrid::Length => "length",
            AblateGrid::Unlabeled => "unlabeled",
            AblateGrid::EqualVlp => "equal_vlp",
            AblateGrid::Cascade => "cascade",
        }
    }
}

impl std::fmt::Display for AblateGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for AblateGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblateGrid::ALL
            .into_iter()
            .find(|g| g.id() == s)
            .ok_or_else(|| {
                let ids: Vec<&str> = AblateGrid::ALL.iter().map(|g| g.id()).collect();
                Error::config(format!("unknown grid `{s}`; expected one of {}", ids.join(", ")))
            })
    }
}

/// Runs one ablation grid and returns the CSV path. An existing CSV is
/// returned as-is; upstream artifacts (data, encoders, boosting checkpoints)
/// resume from the workspace the same way.
pub fn run_ablate(
    cfg: &RunConfig,
    ws: &Workspace,
    grid: AblateGrid,
    workers: usize,
) -> Result<PathBuf> {
    let out = ws.path(&format!("ablate/{}.csv", grid.file_stem()));
    if out.exists() {
        return Ok(out);
    }
    let pipeline = Pipeline::new(cfg, ws)?;
    let (source, _) = pipeline.gen_data()?;
    let (student, _) = pipeline.pretrain()?;
    let csv = match grid {
        AblateGrid::DepthGrid => depth_grid(cfg, &pipeline, &student, &source, workers)?,
        AblateGrid::Length => length_grid(cfg, &pipeline, &student, &source, workers)?,
        AblateGrid::Unlabeled => unlabeled_grid(cfg, &pipeline, &student, &source, workers)?,
        AblateGrid::EqualVlp => equal_vlp(cfg, &pipeline, &student, &source, workers)?,
        AblateGrid::Cascade => cascade_grid(cfg, &pipeline, &student, &source, workers)?,
    };
    write_text(&out, &csv)?;
    Ok(out)
}

/// Headline numbers of one grid cell, aggregated over the run seeds.
struct CellStats {
    hm_mean: f64,
    hm_std: f64,
    base_mean: f64,
    novel_mean: f64,
}

impl CellStats {
    fn cells(&self) -> Vec<String> {
        [self.hm_mean, self.hm_std, self.base_mean, self.novel_mean]
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect()
    }
}

/// Trains and evaluates one cell once per configured seed.
fn seeded_stats(
    cfg: &RunConfig,
    student: &MiniClip,
    ds: &Dataset,
    boosting: Option<(&PromptSet, &PromptSet)>,
    acfg: &AdaptConfig,
) -> Result<CellStats> {
    let mut base = Vec::with_capacity(cfg.seeds);
    let mut novel = Vec::with_capacity(cfg.seeds);
    let mut hm = Vec::with_capacity(cfg.seeds);
    for i in 0..cfg.seeds {
        let report = adapt_once(student, ds, boosting, acfg, cfg.shots, cfg.run_seed(i))?;
        base.push(report.base_acc);
        novel.push(report.novel_acc);
        hm.push(report.harmonic_mean);
    }
    let (hm_mean, hm_std) = mean_std(&hm)?;
    Ok(CellStats { hm_mean, hm_std, base_mean: mean_std(&base)?.0, novel_mean: mean_std(&novel)?.0 })
}

/// Maps cells to rows on a pool of `workers` threads, preserving cell order.
fn par_cells<T, R, F>(workers: usize, cells: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::contract(format!("failed to build the worker pool: {e}")))?;
    pool.install(|| cells.par_iter().map(f).collect())
}

/// The depth menu: 1 (shallow), then a third, half, and three quarters of
/// the encoder depth (rounded, deduplicated), then the full depth.
fn depth_points(encoder_depth: usize) -> Vec<usize> {
    let d = encoder_depth as f64;
    let mut pts: Vec<usize> = [1.0, d / 3.0, d / 2.0, 0.75 * d, d]
        .iter()
        .map(|v| (v.round() as usize).clamp(1, encoder_depth))
        .collect();
    pts.sort_unstable();
    pts.dedup();
    pts
}

fn depth_grid(
    cfg: &RunConfig,
    pipeline: &Pipeline,
    student: &MiniClip,
    source: &Dataset,
    workers: usize,
) -> Result<String> {
    let pts = depth_points(cfg.model.student.depth);
    let mut boosted: Vec<(PromptSet, PromptSet)> = Vec::with_capacity(pts.len());
    for &db in &pts {
        let mut kd = cfg.kd_cfg();
        kd.prompt_depth = db;
        boosted.push(pipeline.boost_with(&format!("d{db}"), &kd, None)?);
    }

    let cells: Vec<(usize, usize)> = pts
        .iter()
        .enumerate()
        .flat_map(|(bi, _)| pts.iter().map(move |&da| (bi, da)))
        .collect();
    let stats = par_cells(workers, &cells, |&(bi, da)| {
        let mut acfg = cfg.adapt_cfg(AdaptVariant::IndependentDeep);
        acfg.depth = da;
        let (bt, bv) = &boosted[bi];
        seeded_stats(cfg, student, source, Some((bt, bv)), &acfg)
    })?;

    let rows: Vec<Vec<String>> = cells
        .iter()
        .zip(&stats)
        .map(|(&(bi, da), s)| {
            let mut row = vec![pts[bi].to_string(), da.to_string()];
            row.extend(s.cells());
            row
        })
        .collect();
    if cfg.plots {
        let labels: Vec<String> = pts.iter().map(usize::to_string).collect();
        let values: Vec<Vec<f64>> = stats
            .chunks(pts.len())
            .map(|chunk| chunk.iter().map(|s| s.hm_mean).collect())
            .collect();
        heatmap_svg(
            &pipeline.workspace().path("plots/depth_grid.svg"),
            "harmonic mean by boosting depth (rows) and adapting depth (columns)",
            &labels,
            &labels,
            &values,
        )?;
    }
    Ok(csv_document("boost_depth,adapt_depth,hm_mean,hm_std,base_mean,novel_mean", &rows))
}

fn length_grid(
    cfg: &RunConfig,
    pipeline: &Pipeline,
    student: &MiniClip,
    source: &Dataset,
    workers: usize,
) -> Result<String> {
    let mut boosted: Vec<(PromptSet, PromptSet)> = Vec::with_capacity(LENGTH_MENU.len());
    for &len in &LENGTH_MENU {
        let mut kd = cfg.kd_cfg();
        kd.prompt_length = len;
        boosted.push(pipeline.boost_with(&format!("len{len}"), &kd, None)?);
    }

    let cells: Vec<(usize, bool)> = LENGTH_MENU
        .iter()
        .enumerate()
        .flat_map(|(i, _)| [(i, false), (i, true)])
        .collect();
    let stats = par_cells(workers, &cells, |&(i, learnable)| {
        let mut acfg = cfg.adapt_cfg(AdaptVariant::IndependentDeep);
        acfg.train_boosting = learnable;
        let (bt, bv) = &boosted[i];
        seeded_stats(cfg, student, source, Some((bt, bv)), &acfg)
    })?;

    let rows: Vec<Vec<String>> = cells
        .iter()
        .zip(&stats)
        .map(|(&(i, learnable), s)| {
            let mode = if learnable { "learnable" } else { "frozen" };
            let mut row = vec![LENGTH_MENU[i].to_string(), mode.to_string()];
            row.extend(s.cells());
            row
        })
        .collect();
    Ok(csv_document("length,boosting_mode,hm_mean,hm_std,base_mean,novel_mean", &rows))
}

fn unlabeled_grid(
    cfg: &RunConfig,
    pipeline: &Pipeline,
    student: &MiniClip,
    source: &Dataset,
    workers: usize,
) -> Result<String> {
    // Pool sizes above the train split collapse into the full-pool row.
    let mut menu: Vec<Option<usize>> = UNLABELED_MENU
        .iter()
        .filter(|&&k| k < cfg.domain.train_per_class)
        .map(|&k| Some(k))
        .collect();
    menu.push(None);

    let mut boosted: Vec<(PromptSet, PromptSet)> = Vec::with_capacity(menu.len());
    for &per_class in &menu {
        boosted.push(match per_class {
            Some(k) => pipeline.boost_with(&format!("u{k}"), &cfg.kd_cfg(), Some(k))?,
            None => pipeline.boost()?,
        });
    }

    let cells: Vec<usize> = (0..menu.len()).collect();
    let stats = par_cells(workers, &cells, |&i| {
        let acfg = cfg.adapt_cfg(AdaptVariant::IndependentDeep);
        let (bt, bv) = &boosted[i];
        seeded_stats(cfg, student, source, Some((bt, bv)), &acfg)
    })?;

    let rows: Vec<Vec<String>> = menu
        .iter()
        .zip(&stats)
        .map(|(&per_class, s)| {
            let k = per_class.unwrap_or(cfg.domain.train_per_class);
            let label = match per_class {
                Some(k) => k.to_string(),
                None => "full".to_string(),
            };
            let mut row = vec![label, (k * cfg.domain.classes).to_string()];
            row.extend(s.cells());
            row
        })
        .collect();
    Ok(csv_document("per_class,pool_size,hm_mean,hm_std,base_mean,novel_mean", &rows))
}

/// Trainable prompt parameters of an adapting layout on a `width`-wide
/// encoder: every block is `length × width`, one block per injected layer.
fn adapt_param_count(acfg: &AdaptConfig, width: usize) -> usize {
    (acfg.text_length + acfg.vision_length) * width * acfg.depth
}

fn equal_vlp(
    cfg: &RunConfig,
    pipeline: &Pipeline,
    student: &MiniClip,
    source: &Dataset,
    workers: usize,
) -> Result<String> {
    let mut kd = cfg.kd_cfg();
    kd.prompt_length = 4;
    let (bt, bv) = pipeline.boost_with("len4", &kd, None)?;

    let mut half = cfg.adapt_cfg(AdaptVariant::IndependentDeep);
    half.text_length = 4;
    half.vision_length = 4;
    let mut full = half.clone();
    full.text_length = 8;
    full.vision_length = 8;

    let width = cfg.model.student.width;
    let boosted_params = parameter_count(&[&bt, &bv]) + adapt_param_count(&half, width);
    let plain_params = adapt_param_count(&full, width);
    if boosted_params != plain_params {
        return Err(Error::contract(format!(
            "budget-matched arms must carry identical prompt budgets; got {boosted_params} \
             (boost 4 + adapt 4) vs {plain_params} (adapt 8) — the boosting depth must equal \
             the adapting depth"
        )));
    }

    let arms = [
        ("boost4+adapt4", boosted_params, Some((&bt, &bv)), half),
        ("adapt8", plain_params, None, full),
    ];
    let stats = par_cells(workers, &arms, |(_, _, boosting, acfg)| {
        seeded_stats(cfg, student, source, *boosting, acfg)
    })?;

    let rows: Vec<Vec<String>> = arms
        .iter()
        .zip(&stats)
        .map(|((name, params, _, _), s)| {
            let mut row = vec![name.to_string(), params.to_string()];
            row.extend(s.cells());
            row
        })
        .collect();
    Ok(csv_document("arm,prompt_params,hm_mean,hm_std,base_mean,novel_mean", &rows))
}

fn cascade_grid(
    cfg: &RunConfig,
    pipeline: &Pipeline,
    student: &MiniClip,
    source: &Dataset,
    workers: usize,
) -> Result<String> {
    let (bt, bv) = pipeline.boost()?;
    let cells: Vec<(AdaptVariant, bool)> = AdaptVariant::ALL
        .into_iter()
        .flat_map(|v| [(v, false), (v, true)])
        .collect();
    let stats = par_cells(workers, &cells, |&(variant, cascade)| {
        let acfg = cfg.adapt_cfg(variant);
        let boosting = cascade.then_some((&bt, &bv));
        seeded_stats(cfg, student, source, boosting, &acfg)
    })?;

    let rows: Vec<Vec<String>> = cells
        .iter()
        .zip(&stats)
        .map(|(&(variant, cascade), s)| {
            let arm = if cascade { "cascade" } else { "baseline" };
            let mut row = vec![variant.to_string(), arm.to_string()];
            row.extend(s.cells());
            row
        })
        .collect();
    Ok(csv_document("variant,arm,hm_mean,hm_std,base_mean,novel_mean", &rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::runs::tests::tiny_config;

    fn parse_csv(path: &std::path::Path) -> (String, Vec<Vec<String>>) {
        let text = std::fs::read_to_string(path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap().to_string();
        let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        (header, rows)
    }

    #[test]
    fn grid_ids_round_trip_and_reject_unknowns() {
        for g in AblateGrid::ALL {
            assert_eq!(g.id().parse::<AblateGrid>().unwrap(), g);
        }
        let err = "depth".parse::<AblateGrid>().unwrap_err();
        assert!(err.to_string().contains("depth-grid"), "{err}");
    }

    #[test]
    fn depth_menu_spans_shallow_to_full() {
        assert_eq!(depth_points(6), [1, 2, 3, 5, 6]);
        assert_eq!(depth_points(2), [1, 2]);
        assert_eq!(depth_points(1), [1]);
    }

    #[test]
    fn depth_grid_covers_every_pair_and_resumes_from_its_csv() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let cfg = tiny_config();
        let path = run_ablate(&cfg, &ws, AblateGrid::DepthGrid, 2).unwrap();
        let (header, rows) = parse_csv(&path);
        assert_eq!(header, "boost_depth,adapt_depth,hm_mean,hm_std,base_mean,novel_mean");
        assert_eq!(rows.len(), 4, "2 boost depths × 2 adapt depths");
        for row in &rows {
            let hm: f64 = row[2].parse().unwrap();
            assert!((0.0..=100.0).contains(&hm), "harmonic mean out of range: {row:?}");
        }
        assert!(ws.path("prompts/boost_d1.bin").exists());
        assert!(ws.path("prompts/boost_d2.bin").exists());

        // Resuming returns the existing CSV untouched.
        let before = std::fs::read(&path).unwrap();
        let again = run_ablate(&cfg, &ws, AblateGrid::DepthGrid, 1).unwrap();
        assert_eq!(again, path);
        assert_eq!(before, std::fs::read(&path).unwrap());
    }

    #[test]
    fn equal_budget_arms_report_identical_prompt_parameter_counts() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let cfg = tiny_config();
        let path = run_ablate(&cfg, &ws, AblateGrid::EqualVlp, 2).unwrap();
        let (header, rows) = parse_csv(&path);
        assert_eq!(header, "arm,prompt_params,hm_mean,hm_std,base_mean,novel_mean");
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0][0], "boost4+adapt4");
        assert_eq!(rows[1][0], "adapt8");
        assert_eq!(rows[0][1], rows[1][1], "arms must carry equal prompt budgets");
        // Arithmetic check at this geometry: both arms hold 8 tokens × width
        // 8 × depth 2 on each branch.
        assert_eq!(rows[0][1], (2 * 8 * 8 * 2).to_string());
    }

    #[test]
    fn cascade_grid_covers_every_variant_and_both_arms() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let mut cfg = tiny_config();
        cfg.seeds = 1;
        let path = run_ablate(&cfg, &ws, AblateGrid::Cascade, 2).unwrap();
        let (header, rows) = parse_csv(&path);
        assert_eq!(header, "variant,arm,hm_mean,hm_std,base_mean,novel_mean");
        assert_eq!(rows.len(), 8, "4 variants × 2 arms");
        for (i, variant) in AdaptVariant::ALL.iter().enumerate() {
            assert_eq!(rows[2 * i][0], variant.to_string());
            assert_eq!(rows[2 * i][1], "baseline");
            assert_eq!(rows[2 * i + 1][1], "cascade");
            let std: f64 = rows[2 * i][3].parse().unwrap();
            assert_eq!(std, 0.0, "single seed has zero spread");
        }
    }

    #[test]
    fn unlabeled_menu_clips_to_the_pool_and_ends_with_the_full_row() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let mut cfg = tiny_config();
        cfg.seeds = 1;
        let path = run_ablate(&cfg, &ws, AblateGrid::Unlabeled, 2).unwrap();
        let (header, rows) = parse_csv(&path);
        assert_eq!(header, "per_class,pool_size,hm_mean,hm_std,base_mean,novel_mean");
        // train_per_class = 6 keeps 1, 2, 4 and the full row.
        let labels: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
        assert_eq!(labels, ["1", "2", "4", "full"]);
        let pools: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
        assert_eq!(pools, ["4", "8", "16", "24"]);
        assert!(ws.path("prompts/boost_u1.bin").exists());
        assert!(ws.path("prompts/boost.bin").exists(), "full row shares the main artifact");
    }

    #[test]
    fn length_grid_sweeps_both_boosting_modes() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let mut cfg = tiny_config();
        cfg.seeds = 1;
        // Length 16 needs sequence headroom beyond the tiny default.
        cfg.model.student.max_seq = 40;
        cfg.model.teacher.max_seq = 40;
        let path = run_ablate(&cfg, &ws, AblateGrid::Length, 2).unwrap();
        let (header, rows) = parse_csv(&path);
        assert_eq!(header, "length,boosting_mode,hm_mean,hm_std,base_mean,novel_mean");
        assert_eq!(rows.len(), 10, "5 lengths × 2 modes");
        assert_eq!((rows[0][0].as_str(), rows[0][1].as_str()), ("1", "frozen"));
        assert_eq!((rows[9][0].as_str(), rows[9][1].as_str()), ("16", "learnable"));
        for len in LENGTH_MENU {
            assert!(ws.path(&format!("prompts/boost_len{len}.bin")).exists());
        }
    }
}
