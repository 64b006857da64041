use std::path::{Path, PathBuf};

use hspi::metrics::histogram;
use hspi::{ComplexModel, DensityGrid};
use image::GrayImage;
use plotters::prelude::*;

use crate::commands::{self, Ctx, ARMS};
use crate::error::CliError;

const SIZE: (u32, u32) = (720, 480);
const COLORS: [RGBColor; 4] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
];

fn draw_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Data(format!("cannot draw {}: {e}", path.display()))
}

/// Columns of a CSV with a header row. An input without data rows is an error.
fn read_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let err = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let header: Vec<String> = r.headers().map_err(err)?.iter().map(str::to_string).collect();
    let mut cols = vec![Vec::new(); header.len()];
    for rec in r.records() {
        let rec = rec.map_err(err)?;
        for (c, field) in cols.iter_mut().zip(rec.iter()) {
            c.push(
                field
                    .parse()
                    .map_err(|_| CliError::Data(format!("non-numeric field '{field}' in {}", path.display())))?,
            );
        }
    }
    if header.is_empty() || cols[0].is_empty() {
        return Err(CliError::Data(format!("{} has no data rows", path.display())));
    }
    Ok((header, cols))
}

fn column<'a>(path: &Path, header: &[String], cols: &'a [Vec<f64>], name: &str) -> Result<&'a [f64], CliError> {
    header
        .iter()
        .position(|h| h == name)
        .map(|i| cols[i].as_slice())
        .ok_or_else(|| CliError::Data(format!("{} has no '{name}' column", path.display())))
}

fn plot_frc(out: &Path, curves: &[(String, Vec<f64>, Vec<f64>)]) -> Result<(), CliError> {
    let e = draw_err(out);
    let x_max = curves
        .iter()
        .flat_map(|(_, x, _)| x.iter().copied())
        .fold(1.0, f64::max);
    let root = SVGBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&e)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Fourier ring correlation", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..x_max, -0.2..1.05)
        .map_err(&e)?;
    chart
        .configure_mesh()
        .x_desc("ring radius (px)")
        .y_desc("FRC")
        .draw()
        .map_err(&e)?;
    chart
        .draw_series(LineSeries::new([(0.0, 0.5), (x_max, 0.5)], BLACK.mix(0.4)))
        .map_err(&e)?;
    for (i, (name, x, y)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series(LineSeries::new(
                x.iter().copied().zip(y.iter().copied()),
                color.stroke_width(2),
            ))
            .map_err(&e)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(&e)?;
    root.present().map_err(&e)
}

fn plot_histogram(out: &Path, values: &[f64], label: &str) -> Result<(), CliError> {
    let e = draw_err(out);
    let span = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6) * 1.05;
    let bins = 41;
    let counts = histogram(values, -span, span, bins);
    let width = 2.0 * span / bins as f64;
    let top = counts.iter().copied().max().unwrap_or(1).max(1) as f64 * 1.1;
    let root = SVGBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&e)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{label} error"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(-span..span, 0.0..top)
        .map_err(&e)?;
    chart
        .configure_mesh()
        .x_desc(label)
        .y_desc("frames")
        .draw()
        .map_err(&e)?;
    chart
        .draw_series(counts.iter().enumerate().map(|(i, &c)| {
            let x0 = -span + i as f64 * width;
            Rectangle::new([(x0, 0.0), (x0 + width, c as f64)], COLORS[0].filled())
        }))
        .map_err(&e)?;
    root.present().map_err(&e)
}

fn save_gray(out: &Path, side: usize, pixels: Vec<u8>) -> Result<(), CliError> {
    let img = GrayImage::from_raw(side as u32, side as u32, pixels)
        .ok_or_else(|| CliError::Data("image buffer has the wrong size".into()))?;
    img.save(out)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", out.display())))
}

/// `log10 |F|` over reliable pixels, spanning four decades below the maximum.
fn magnitude_image(out: &Path, model: &ComplexModel) -> Result<(), CliError> {
    let mags: Vec<Option<f64>> = model
        .grid
        .iter()
        .zip(&model.reliable)
        .map(|(v, &r)| (r && v.norm() > 0.0).then(|| v.norm().log10()))
        .collect();
    let hi = mags.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !hi.is_finite() {
        return Err(CliError::Data(format!("nothing to draw in {}", out.display())));
    }
    let lo = hi - 4.0;
    let px = mags
        .iter()
        .map(|m| m.map_or(0, |v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    save_gray(out, model.side(), px)
}

fn density_image(out: &Path, d: &DensityGrid) -> Result<(), CliError> {
    let hi = d.data.iter().fold(0.0f64, |a, &b| a.max(b));
    if !(hi > 0.0) {
        return Err(CliError::Data(format!("density for {} is empty", out.display())));
    }
    let px = d
        .data
        .iter()
        .map(|v| ((v / hi).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    save_gray(out, d.side(), px)
}

/// Renders every figure whose inputs exist under the output directory.
pub fn plot(ctx: &Ctx) -> Result<Vec<PathBuf>, CliError> {
    let geom = ctx.cfg.geometry()?;
    let side = geom.side();
    let dir = ctx.path("plots");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    let mut written = Vec::new();
    let mut target = |name: &str| -> Result<PathBuf, CliError> {
        let p = dir.join(name);
        if p.exists() && !ctx.force {
            return Err(CliError::Config(format!(
                "{} already exists; pass --force to overwrite",
                p.display()
            )));
        }
        written.push(p.clone());
        Ok(p)
    };

    let mut curves = Vec::new();
    for arm in ARMS.iter().map(|a| a.0).chain(["custom"]) {
        let p = ctx.path(&commands::frc_file(arm));
        if p.exists() {
            let (h, cols) = read_columns(&p)?;
            let x = column(&p, &h, &cols, "radius_px")?.to_vec();
            let y = column(&p, &h, &cols, "frc")?.to_vec();
            curves.push((arm.to_string(), x, y));
        }
    }
    if !curves.is_empty() {
        plot_frc(&target("frc.svg")?, &curves)?;
    }

    let errors = ctx.path(commands::EVAL_ERRORS);
    if errors.exists() {
        let (h, cols) = read_columns(&errors)?;
        for (col, label, file) in [
            ("theta_deg", "rotation (deg)", "errors_theta.svg"),
            ("diameter_px", "diameter (px)", "errors_diameter.svg"),
            ("shift_x_px", "shift x (px)", "errors_shift_x.svg"),
            ("shift_y_px", "shift y (px)", "errors_shift_y.svg"),
        ] {
            plot_histogram(&target(file)?, column(&errors, &h, &cols, col)?, label)?;
        }
    }

    let object = ctx.path(commands::OBJECT);
    if object.exists() {
        let d = commands::read_density(&object, side)?;
        density_image(&target("truth_density.png")?, &d)?;
        let mut m = hspi::density_to_model(&d);
        m.mask_to(&geom);
        magnitude_image(&target("truth_magnitude.png")?, &m)?;
    }
    for (arm, rel) in ARMS {
        let p = ctx.path(rel);
        if p.exists() {
            let m = commands::read_model(&p, side)?;
            magnitude_image(&target(&format!("{arm}_magnitude.png"))?, &m)?;
            if let Some(d) = commands::density_of(ctx, arm, side)? {
                density_image(&target(&format!("{arm}_density.png"))?, &d)?;
            }
        }
    }
    if written.is_empty() {
        return Err(CliError::Data(format!(
            "nothing to plot under {}",
            ctx.cfg.out_dir.display()
        )));
    }
    Ok(written)
}
