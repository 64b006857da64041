use std::path::{Path, PathBuf};

use hspi::io::{self, LatentRow};
use hspi::maxlp::{initial_model, maxlp_iteration, IterationLog};
use hspi::metrics::{align_global, rotation_candidates, Alignment, Resolution};
use hspi::object::{average_structure, model_to_density, sphere_subunit};
use hspi::phase::{difference_map, FourierConstraint, PhaseResult};
use hspi::simulate::{FrameSource, SimulationConfig};
use hspi::{
    density_to_model, frc, generate_dataset, latent_errors, random_blob_object, resolution_at_half, Assignment,
    BaselineConfig, ComplexModel, DensityGrid, DetectorGeometry, EmcConfig, FrcCurve, LatentParams, SparseDataset,
};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Stage};
use crate::error::CliError;

pub const OBJECT: &str = "object.f64";
pub const BASE: &str = "base.f64";
pub const SUBUNIT: &str = "subunit.f64";
pub const HOLO_DATA: &str = "holo.hspi";
pub const HOLO_LATENTS: &str = "holo_latents.csv";
pub const PLAIN_DATA: &str = "plain.hspi";
pub const PLAIN_LATENTS: &str = "plain_latents.csv";
pub const MAXLP_MODEL: &str = "maxlp/model.c128";
pub const MAXLP_ASSIGNMENT: &str = "maxlp/assignment.csv";
pub const MAXLP_LOG: &str = "maxlp/log.csv";
pub const MAXLP_CHECKPOINT: &str = "maxlp/checkpoint.json";
pub const PHASE_MODEL: &str = "phase/model.c128";
pub const PHASE_DENSITY: &str = "phase/density.f64";
pub const PHASE_SUPPORT: &str = "phase/support.mask";
pub const PHASE_LOG: &str = "phase/phase.json";
pub const BASELINE_INTENSITY: &str = "baseline/intensity.f64";
pub const BASELINE_MODEL: &str = "baseline/model.c128";
pub const BASELINE_DENSITY: &str = "baseline/density.f64";
pub const BASELINE_SUPPORT: &str = "baseline/support.mask";
pub const BASELINE_LOG: &str = "baseline/phase.json";
pub const EVAL_SIGMA: &str = "eval/sigma.json";
pub const EVAL_ERRORS: &str = "eval/latent_errors.csv";
pub const EVAL_SUMMARY: &str = "eval/summary.json";

/// Reconstruction arms the evaluator looks for, with their model files.
pub const ARMS: [(&str, &str); 3] = [
    ("maxlp", MAXLP_MODEL),
    ("phase", PHASE_MODEL),
    ("baseline", BASELINE_MODEL),
];

pub fn frc_file(arm: &str) -> String {
    format!("eval/frc_{arm}.csv")
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub force: bool,
}

impl Ctx {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.cfg.out_dir.join(rel)
    }

    /// Refuses to overwrite existing outputs unless forced; creates parent directories.
    fn claim(&self, rels: &[&str]) -> Result<(), CliError> {
        for rel in rels {
            let p = self.path(rel);
            if p.exists() && !self.force {
                return Err(CliError::Config(format!(
                    "{} already exists; pass --force to overwrite",
                    p.display()
                )));
            }
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
            }
        }
        Ok(())
    }

    fn geometry(&self) -> Result<DetectorGeometry, CliError> {
        self.cfg.geometry()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DensityMeta {
    side_px: usize,
    role: String,
    seed: u64,
    object: crate::config::ObjectSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    side_px: usize,
    scale: f64,
}

fn write_density(ctx: &Ctx, rel: &str, d: &DensityGrid, role: &str) -> Result<(), CliError> {
    let p = ctx.path(rel);
    io::write_f64_raw(&p, &d.data)?;
    let meta = DensityMeta {
        side_px: d.side(),
        role: role.to_string(),
        seed: ctx.cfg.seed,
        object: ctx.cfg.object.clone(),
    };
    io::write_json(&io::sidecar_path(&p), &meta)?;
    Ok(())
}

pub fn read_density(path: &Path, side: usize) -> Result<DensityGrid, CliError> {
    let data = io::read_f64_raw(path)?;
    if data.len() != side * side {
        return Err(CliError::Data(format!(
            "{} holds {} values, expected {side}x{side}",
            path.display(),
            data.len()
        )));
    }
    Ok(DensityGrid::from_vec(side, data)?)
}

fn mask_path(model: &Path) -> PathBuf {
    model.with_extension("mask")
}

fn write_model(path: &Path, m: &ComplexModel) -> Result<(), CliError> {
    io::write_complex_raw(path, &m.grid)?;
    io::write_mask(&mask_path(path), &m.reliable)?;
    io::write_json(
        &io::sidecar_path(path),
        &ModelMeta {
            side_px: m.side(),
            scale: m.scale,
        },
    )?;
    Ok(())
}

/// A complex model (`.c128`, with optional `.mask` and `.json` siblings) or a
/// real density (`.f64`), which is transformed.
pub fn read_model(path: &Path, side: usize) -> Result<ComplexModel, CliError> {
    if path.extension().is_some_and(|e| e == "f64") {
        return Ok(density_to_model(&read_density(path, side)?));
    }
    let grid = io::read_complex_raw(path)?;
    if grid.len() != side * side {
        return Err(CliError::Data(format!(
            "{} holds {} values, expected {side}x{side}",
            path.display(),
            grid.len()
        )));
    }
    let mp = mask_path(path);
    let reliable = if mp.exists() {
        io::read_mask(&mp)?
    } else {
        vec![true; side * side]
    };
    let meta = io::sidecar_path(path);
    let scale = if meta.exists() {
        io::read_json::<ModelMeta>(&meta)?.scale
    } else {
        1.0
    };
    Ok(ComplexModel::new(side, grid, reliable, scale)?)
}

pub fn make_object(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let geom = ctx.geometry()?;
    let base = random_blob_object(&cfg.target_spec()?)?;
    match cfg.heterogeneity() {
        None => {
            ctx.claim(&[OBJECT])?;
            write_density(ctx, OBJECT, &base, "homogeneous")?;
        }
        Some(mode) => {
            ctx.claim(&[OBJECT, BASE, SUBUNIT])?;
            let o = &cfg.object;
            let sub = sphere_subunit(geom.side(), o.subunit_radius_px, o.subunit_density);
            let avg = average_structure(&base, &sub, &mode)?;
            write_density(ctx, BASE, &base, "base")?;
            write_density(ctx, SUBUNIT, &sub, "subunit")?;
            write_density(ctx, OBJECT, &avg, "average")?;
        }
    }
    log::info!("object written to {}", ctx.path(OBJECT).display());
    Ok(())
}

fn frame_source(ctx: &Ctx, side: usize) -> Result<FrameSource, CliError> {
    Ok(match ctx.cfg.heterogeneity() {
        None => FrameSource::Static(density_to_model(&read_density(&ctx.path(OBJECT), side)?)),
        Some(mode) => FrameSource::Variant {
            base: read_density(&ctx.path(BASE), side)?,
            subunit: read_density(&ctx.path(SUBUNIT), side)?,
            mode,
        },
    })
}

fn write_simulation(
    ctx: &Ctx,
    source: &FrameSource,
    geom: &DetectorGeometry,
    with_reference: bool,
    stage: Stage,
) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let (data, latents) = if with_reference {
        (HOLO_DATA, HOLO_LATENTS)
    } else {
        (PLAIN_DATA, PLAIN_LATENTS)
    };
    let sim = SimulationConfig {
        n_frames: cfg.simulate.n_frames,
        target_photons: cfg.simulate.photons_per_frame,
        seed: cfg.seed_for(stage),
        with_reference,
        contrast: cfg.reference.contrast,
        latent: cfg.latent_config(),
        n_probe: cfg.simulate.n_probe,
    };
    let (ds, truth) = generate_dataset(source, geom, &sim)?;
    io::write_dataset(&ctx.path(data), &ds)?;
    let rows: Vec<LatentRow> = truth
        .iter()
        .enumerate()
        .map(|(frame, t)| LatentRow {
            frame,
            latent: t.latent,
            state: t.state.map(|s| s.label()).unwrap_or_default(),
        })
        .collect();
    io::write_latents_csv(&ctx.path(latents), &rows)?;
    log::info!(
        "{} frames, mean {:.1} photons/frame written to {}",
        ds.frames.len(),
        ds.mean_photons(),
        ctx.path(data).display()
    );
    Ok(())
}

pub fn simulate(ctx: &Ctx) -> Result<(), CliError> {
    let s = &ctx.cfg.simulate;
    let mut outputs = vec![];
    if s.with_reference {
        outputs.extend([HOLO_DATA, HOLO_LATENTS]);
    }
    if !s.with_reference || s.reference_free_copy {
        outputs.extend([PLAIN_DATA, PLAIN_LATENTS]);
    }
    ctx.claim(&outputs)?;
    let geom = ctx.geometry()?;
    let source = frame_source(ctx, geom.side())?;
    if s.with_reference {
        write_simulation(ctx, &source, &geom, true, Stage::Simulate)?;
    }
    if !s.with_reference || s.reference_free_copy {
        write_simulation(ctx, &source, &geom, false, Stage::SimulateReferenceFree)?;
    }
    Ok(())
}

fn load_dataset(ctx: &Ctx, rel: &str) -> Result<(SparseDataset, DetectorGeometry), CliError> {
    let ds = io::read_dataset(&ctx.path(rel))?;
    let geom = ds.validate()?;
    if geom.meta() != ctx.geometry()?.meta() {
        return Err(CliError::Config(format!(
            "{} was simulated on a different detector than the config describes",
            ctx.path(rel).display()
        )));
    }
    Ok((ds, geom))
}

/// Everything needed to continue a MaxLP run after `log.len()` iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    /// Settings the run depends on; a resume under different settings is refused.
    settings: String,
    scale: f64,
    grid: Vec<hspi::Complex64>,
    reliable: Vec<bool>,
    log: Vec<IterationLog>,
    assignment: Option<Assignment>,
}

/// The iteration count is left out so that a finished run can be extended.
fn checkpoint_settings(cfg: &RunConfig, ds: &SparseDataset) -> String {
    let mut maxlp = cfg.maxlp.clone();
    maxlp.n_iter = 0;
    format!(
        "{}|{}|{}|{}",
        toml::to_string(&maxlp).unwrap_or_default(),
        toml::to_string(&cfg.latent_grid).unwrap_or_default(),
        cfg.seed,
        ds.total_photons()
    )
}

fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CliError> {
    let tmp = path.with_extension("json.tmp");
    io::write_json(&tmp, ck)?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CliError::Data(format!("cannot move checkpoint to {}: {e}", path.display())))
}

pub fn reconstruct_maxlp(ctx: &Ctx, resume: bool) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let mcfg = cfg.maxlp_config()?;
    ctx.claim(&[MAXLP_MODEL, MAXLP_ASSIGNMENT, MAXLP_LOG])?;
    let (ds, geom) = load_dataset(ctx, HOLO_DATA)?;
    let reference = ds
        .reference()
        .ok_or_else(|| CliError::Data("dataset was simulated without a reference; use the baseline arm".into()))?;
    let grid = cfg.latent_grid()?;
    let settings = checkpoint_settings(cfg, &ds);
    let ck_path = ctx.path(MAXLP_CHECKPOINT);

    let (mut model, mut log, mut assignment) = if resume && ck_path.exists() {
        let ck: Checkpoint = io::read_json(&ck_path)?;
        if ck.settings != settings {
            return Err(CliError::Config(format!(
                "{} was written under different settings",
                ck_path.display()
            )));
        }
        log::info!("resuming after {} iterations", ck.log.len());
        (
            ComplexModel::new(geom.side(), ck.grid, ck.reliable, ck.scale)?,
            ck.log,
            ck.assignment,
        )
    } else {
        (initial_model(&ds, &geom, mcfg.seed, mcfg.friedel)?, Vec::new(), None)
    };

    for it in log.len()..mcfg.n_iter {
        let (next, a, entry) = maxlp_iteration(&ds, &model, &grid, &geom, &reference, &mcfg, it)?;
        model = next;
        assignment = Some(a);
        log.push(entry);
        write_checkpoint(
            &ck_path,
            &Checkpoint {
                settings: settings.clone(),
                scale: model.scale,
                grid: model.grid.clone(),
                reliable: model.reliable.clone(),
                log: log.clone(),
                assignment: assignment.clone(),
            },
        )?;
    }
    let assignment = match assignment {
        Some(a) => a,
        None => hspi::assign_latents(&ds, &model, &grid, &geom, &reference)?,
    };

    write_model(&ctx.path(MAXLP_MODEL), &model)?;
    let rows: Vec<LatentRow> = assignment
        .latents(&grid)
        .into_iter()
        .enumerate()
        .map(|(frame, latent)| LatentRow {
            frame,
            latent,
            state: String::new(),
        })
        .collect();
    io::write_latents_csv(&ctx.path(MAXLP_ASSIGNMENT), &rows)?;
    write_log_csv(&ctx.path(MAXLP_LOG), &log)?;
    Ok(())
}

fn write_log_csv(path: &Path, log: &[IterationLog]) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["iteration", "log_likelihood", "rms_change", "reliable_fraction"])
        .map_err(err)?;
    for l in log {
        w.write_record([
            l.iteration.to_string(),
            l.log_likelihood.to_string(),
            l.rms_change.to_string(),
            l.reliable_fraction.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PhaseLog {
    support_area_fraction: f64,
    best_iteration: usize,
    diverged: bool,
    errors: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmcLog {
    thetas: Vec<f64>,
    mutual_info: Vec<f64>,
    log_likelihood: Vec<f64>,
}

fn write_phase_outputs(
    ctx: &Ctx,
    result: &PhaseResult,
    support: &hspi::SupportMask,
    files: [&str; 4],
) -> Result<(), CliError> {
    let [model, density, mask, log] = files;
    write_model(&ctx.path(model), &result.model)?;
    write_density(ctx, density, &result.density, "reconstruction")?;
    io::write_mask(&ctx.path(mask), &support.mask)?;
    io::write_json(
        &ctx.path(log),
        &PhaseLog {
            support_area_fraction: support.area_fraction(),
            best_iteration: result.best_iteration,
            diverged: result.diverged,
            errors: result.errors.clone(),
        },
    )?;
    if result.diverged {
        log::warn!("difference map diverged; kept iteration {}", result.best_iteration);
    }
    Ok(())
}

pub fn reconstruct_baseline(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let files = [BASELINE_MODEL, BASELINE_DENSITY, BASELINE_SUPPORT, BASELINE_LOG];
    let mut outputs = vec![BASELINE_INTENSITY];
    outputs.extend(files);
    ctx.claim(&outputs)?;
    let (ds, geom) = load_dataset(ctx, PLAIN_DATA)?;
    if ds.meta.with_reference {
        return Err(CliError::Data("the baseline arm needs a reference-free dataset".into()));
    }
    let bcfg = BaselineConfig {
        emc: EmcConfig {
            n_iter: cfg.baseline.n_iter,
            seed: cfg.seed_for(Stage::Emc),
        },
        phase: cfg.phase_config(Stage::BaselinePhase),
    };
    let thetas = cfg.baseline_thetas();
    let r = hspi::baseline_reconstruct(&ds, &thetas, &geom, &bcfg)?;
    let ip = ctx.path(BASELINE_INTENSITY);
    io::write_f64_raw(&ip, &r.emc.model.values)?;
    io::write_mask(&mask_path(&ip), &r.emc.model.known)?;
    io::write_json(
        &io::sidecar_path(&ip),
        &EmcLog {
            thetas: r.emc.model.thetas.clone(),
            mutual_info: r.emc.mutual_info.clone(),
            log_likelihood: r.emc.log_likelihood.clone(),
        },
    )?;
    write_phase_outputs(ctx, &r.phased, &r.support, files)
}

/// Fills unreliable pixels of the MaxLP model and produces its real-space image.
pub fn phase(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let files = [PHASE_MODEL, PHASE_DENSITY, PHASE_SUPPORT, PHASE_LOG];
    ctx.claim(&files)?;
    let geom = ctx.geometry()?;
    let model = read_model(&ctx.path(MAXLP_MODEL), geom.side())?;
    let p = cfg.phase_config(Stage::Phase);
    let support = hspi::estimate_support(&model, &geom, p.q_band, p.threshold_frac)?;
    let r = difference_map(&FourierConstraint::Complex(model), &support, p.beta, p.n_iter, p.seed)?;
    write_phase_outputs(ctx, &r, &support, files)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub alignment: Alignment,
    pub resolution: Resolution,
}

fn write_frc_csv(path: &Path, curve: &FrcCurve) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["q", "radius_px", "frc", "pixels"]).map_err(err)?;
    for ((q, r), (v, n)) in curve
        .q
        .iter()
        .zip(curve.radius_px())
        .zip(curve.values.iter().zip(&curve.pixel_counts))
    {
        w.write_record([q.to_string(), r.to_string(), v.to_string(), n.to_string()])
            .map_err(err)?;
    }
    w.flush()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn evaluate_arm(
    ctx: &Ctx,
    arm: &str,
    recon: &ComplexModel,
    truth: &ComplexModel,
    geom: &DetectorGeometry,
) -> Result<ArmSummary, CliError> {
    let m = &ctx.cfg.metrics;
    let candidates = rotation_candidates(m.align_step_deg, 360.0);
    let (aligned, alignment) = align_global(recon, truth, geom, &candidates, true)?;
    let curve = frc(&aligned, truth, geom, m.ring_width_px)?;
    write_frc_csv(&ctx.path(&frc_file(arm)), &curve)?;
    let resolution = resolution_at_half(&curve)?;
    log::info!(
        "{arm}: rotation {:.2} deg, correlation {:.3}, FRC 0.5 at {:.1} px",
        alignment.theta.to_degrees(),
        alignment.correlation,
        resolution.radius_px
    );
    Ok(ArmSummary {
        arm: arm.to_string(),
        alignment,
        resolution,
    })
}

fn write_latent_errors(path: &Path, e: &hspi::metrics::LatentErrors) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["frame", "theta_deg", "diameter_px", "shift_x_px", "shift_y_px"])
        .map_err(err)?;
    for i in 0..e.theta.len() {
        w.write_record([
            i.to_string(),
            e.theta[i].to_degrees().to_string(),
            e.diameter[i].to_string(),
            e.shift_x[i].to_string(),
            e.shift_y[i].to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_latents(path: &Path) -> Result<Vec<LatentParams>, CliError> {
    Ok(io::read_latents_csv(path)?.into_iter().map(|r| r.latent).collect())
}

/// With `recon`, compares that one file against `truth` (default: the object).
/// Otherwise evaluates every arm whose output exists, plus the MaxLP latents.
pub fn evaluate(ctx: &Ctx, recon: Option<&Path>, truth: Option<&Path>) -> Result<(), CliError> {
    let geom = ctx.geometry()?;
    let side = geom.side();
    let truth_path = truth.map(Path::to_path_buf).unwrap_or_else(|| ctx.path(OBJECT));
    let truth = read_model(&truth_path, side)?;

    let mut summaries = Vec::new();
    if let Some(recon) = recon {
        ctx.claim(&[&frc_file("custom"), EVAL_SUMMARY])?;
        let model = read_model(recon, side)?;
        summaries.push(evaluate_arm(ctx, "custom", &model, &truth, &geom)?);
    } else {
        let present: Vec<(&str, PathBuf)> = ARMS
            .iter()
            .map(|&(arm, rel)| (arm, ctx.path(rel)))
            .filter(|(_, p)| p.exists())
            .collect();
        if present.is_empty() {
            return Err(CliError::Data(format!(
                "no reconstruction found under {}",
                ctx.cfg.out_dir.display()
            )));
        }
        let frc_files: Vec<String> = present.iter().map(|(arm, _)| frc_file(arm)).collect();
        let mut outputs: Vec<&str> = frc_files.iter().map(String::as_str).collect();
        outputs.push(EVAL_SUMMARY);
        let with_latents = ctx.path(MAXLP_ASSIGNMENT).exists();
        if with_latents {
            outputs.extend([EVAL_SIGMA, EVAL_ERRORS]);
        }
        ctx.claim(&outputs)?;
        for (arm, p) in &present {
            let model = read_model(p, side)?;
            summaries.push(evaluate_arm(ctx, arm, &model, &truth, &geom)?);
        }
        if with_latents {
            let alignment = summaries
                .iter()
                .find(|s| s.arm == "maxlp")
                .map(|s| s.alignment)
                .ok_or_else(|| CliError::Data("MaxLP assignment found without its model".into()))?;
            let predicted = read_latents(&ctx.path(MAXLP_ASSIGNMENT))?;
            let true_latents = read_latents(&ctx.path(HOLO_LATENTS))?;
            let e = latent_errors(&predicted, &true_latents, &alignment)?;
            write_latent_errors(&ctx.path(EVAL_ERRORS), &e)?;
            io::write_json(&ctx.path(EVAL_SIGMA), &e.summary)?;
            log::info!(
                "latent sigma: theta {:.2} deg, diameter {:.3} px, shift {:.3} px",
                e.summary.sigma_theta_deg,
                e.summary.sigma_diameter_px,
                e.summary.sigma_shift_px
            );
        }
    }
    io::write_json(&ctx.path(EVAL_SUMMARY), &summaries)?;
    Ok(())
}

/// Real-space image of a reconstruction: the phased density when present,
/// otherwise the inverse transform of the model.
pub fn density_of(ctx: &Ctx, arm: &str, side: usize) -> Result<Option<DensityGrid>, CliError> {
    let (density, model) = match arm {
        "phase" => (PHASE_DENSITY, PHASE_MODEL),
        "baseline" => (BASELINE_DENSITY, BASELINE_MODEL),
        _ => ("", MAXLP_MODEL),
    };
    if !density.is_empty() && ctx.path(density).exists() {
        return read_density(&ctx.path(density), side).map(Some);
    }
    if ctx.path(model).exists() {
        return Ok(Some(model_to_density(&read_model(&ctx.path(model), side)?)));
    }
    Ok(None)
}
