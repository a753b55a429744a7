use std::fmt::Write as _;
use std::path::Path;

use plotters::prelude::*;

use super::artifacts::{atomic_write, Envelope, SCHEMA_VERSION};
use super::metrics::{AttackMetrics, MetricsReport};
use crate::attacks::AttackKind;
use crate::error::{FmError, Result};

const METRICS_KIND: &str = "metrics";

/// Published MNIST accuracies (%) of other defenses, shown next to ours
/// but never recomputed: (attack, Defense-GAN, MagNet, FBGAN).
pub const REPORTED_BASELINES: [(AttackKind, Option<f64>, Option<f64>, Option<f64>); 3] = [
    (AttackKind::Fgsm, Some(83.21), Some(74.6), Some(80.43)),
    (AttackKind::Cw, Some(80.11), Some(19.6), Some(90.8)),
    (AttackKind::Deepfool, Some(81.14), Some(49.4), None),
];

/// The metrics file: pretty JSON inside the versioned envelope.
pub fn render_metrics(report: &MetricsReport) -> String {
    let env = Envelope {
        schema_version: SCHEMA_VERSION,
        config_hash: report.config_hash.clone(),
        kind: METRICS_KIND.to_string(),
        payload: report,
    };
    let mut s = serde_json::to_string_pretty(&env).expect("metrics serialize");
    s.push('\n');
    s
}

pub fn parse_metrics(text: &str) -> Result<MetricsReport> {
    let env: Envelope<MetricsReport> =
        serde_json::from_str(text).map_err(|e| FmError::Contract(format!("metrics file: {e}")))?;
    if env.schema_version != SCHEMA_VERSION || env.kind != METRICS_KIND {
        return Err(FmError::State(format!("metrics schema {} kind {:?}", env.schema_version, env.kind)));
    }
    if env.config_hash != env.payload.config_hash {
        return Err(FmError::State("metrics envelope and payload disagree on the config hash".into()));
    }
    Ok(env.payload)
}

fn pct(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{:.1}", 100.0 * v))
}

fn final_all(a: &AttackMetrics) -> Option<f64> {
    a.purification.last().and_then(|p| p.outcome.final_accuracy.adv)
}

/// Human-readable summary: an accuracy table with the published baselines
/// and per-attack detection and purification details.
pub fn render_table(r: &MetricsReport) -> String {
    let mut s = String::new();
    let tc = &r.calibration.thresholds;
    let _ = writeln!(s, "# {} results (config {})\n", r.dataset, &r.config_hash[..12.min(r.config_hash.len())]);
    let _ = writeln!(
        s,
        "Classifier: {} training images, CLE accuracy {}%, VAL accuracy {}%.\n",
        r.classifier.train_size,
        pct(Some(r.classifier.clean_accuracy)),
        pct(Some(r.classifier.val_accuracy))
    );
    let _ = writeln!(s, "## Accuracy under attack (%)\n");
    let _ =
        writeln!(s, "Defense-GAN, MagNet and FBGAN columns are reported, not reproduced (published MNIST figures).\n");
    let _ = writeln!(
        s,
        "| attack | instances | no defense | calibrated | all salvageable purified | Defense-GAN | MagNet | FBGAN |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
    let base = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v}"));
    for a in &r.attacks {
        let b = REPORTED_BASELINES.iter().find(|b| b.0 == a.kind);
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            a.kind,
            a.attacked,
            pct(Some(a.undefended_accuracy)),
            pct(a.calibrated.final_accuracy.adv),
            pct(final_all(a)),
            base(b.and_then(|b| b.1)),
            base(b.and_then(|b| b.2)),
            base(b.and_then(|b| b.3)),
        );
    }
    let _ = writeln!(
        s,
        "| clean | {} | {} | {} | {} | | | |\n",
        r.clean_instances,
        pct(Some(r.classifier.clean_accuracy)),
        pct(r.clean_calibrated.final_accuracy.clean),
        pct(r.clean_purified.final_accuracy.clean),
    );
    let _ = writeln!(
        s,
        "Calibrated: {:?} thresholds at rho {} (VAL joint FP {}%, worst code {}%), theta_d {} at eta {}. \
         Purification curves use unified threshold {}.\n",
        tc.mode,
        tc.rho.map_or("-".into(), |v| v.to_string()),
        pct(Some(r.calibration.val_joint_false_positive)),
        pct(Some(r.calibration.val_max_code_false_positive)),
        tc.theta_d.map_or("-".into(), |v| format!("{v:.1}")),
        tc.eta.map_or("-".into(), |v| v.to_string()),
        r.curve_theta,
    );
    let _ =
        writeln!(s, "Mean resistance on CLE: {}.", r.mean_resistance_clean.map_or("n/a".into(), |v| format!("{v:.2}")));
    let _ = writeln!(
        s,
        "Reconstruction keeps the label of {}% of CLE; a second reconstruction keeps {}%.\n",
        pct(r.label_preservation),
        pct(r.purification_stability)
    );
    let d = &r.diagnostics;
    let span = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if v.is_empty() {
            "n/a".to_string()
        } else {
            format!("[{lo:.2}, {hi:.2}]")
        }
    };
    let lo = d.ranges.lo.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = d.ranges.hi.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let _ = writeln!(
        s,
        "Model diagnostics on VAL: DGMM accuracy {}%, z_u class means nearest their own component for {}/10 classes, \
         latent means in {}, latent stds in {}, normal ranges within [{lo:.2}, {hi:.2}], \
         held-out median L_R by epoch {}.\n",
        pct(d.dgmm_accuracy),
        d.zu_clustered_classes,
        span(&d.latent_mean),
        span(&d.latent_std),
        span(&d.heldout_reconstruction),
    );
    for a in &r.attacks {
        let _ = writeln!(s, "## {}\n", a.kind);
        let _ = writeln!(
            s,
            "{} attacked, {} in ADV, success rate {}%, mean Linf {:.3}, mean L2 {:.3}, median ADV Linf {} and L2 {}, \
             mean ADV resistance {}.\n",
            a.attacked,
            a.adv_size,
            pct(Some(a.success_rate)),
            a.mean_linf,
            a.mean_l2,
            a.median_linf.map_or("n/a".into(), |v| format!("{v:.3}")),
            a.median_l2.map_or("n/a".into(), |v| format!("{v:.3}")),
            a.mean_resistance_adv.map_or("n/a".into(), |v| format!("{v:.2}"))
        );
        let _ = writeln!(s, "| theta | clean kept | adv flagged | overall |\n|---|---|---|---|");
        for p in &a.sweep {
            let _ = writeln!(s, "| {} | {} | {} | {} |", p.theta, pct(p.clean), pct(p.adv), pct(p.overall));
        }
        let _ = writeln!(s, "\n| eta | theta_d | clean recall | adv recall | overall recall | final accuracy |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for p in &a.purification {
            let o = &p.outcome;
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} |",
                p.eta.map_or("all".into(), |e| e.to_string()),
                o.theta_d.map_or("inf".into(), |d| format!("{d:.1}")),
                pct(o.recall.clean),
                pct(o.recall.adv),
                pct(o.recall.overall),
                pct(o.final_accuracy.overall),
            );
        }
        let _ = writeln!(s);
    }
    s
}

fn plot_err(e: impl std::fmt::Display) -> FmError {
    FmError::Numeric(format!("plot: {e}"))
}

type Series<'a> = (&'a str, RGBColor, Vec<(f64, f64)>);

fn line_plot(path: &Path, title: &str, x_label: &str, x_range: (f64, f64), series: &[Series]) -> Result<()> {
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (lo, hi) = if x_range.0 < x_range.1 { x_range } else { (x_range.0 - 1.0, x_range.1 + 1.0) };
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(lo..hi, 0.0..1.0)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_label).y_desc("rate").draw().map_err(plot_err)?;
    for (name, color, pts) in series {
        let color = *color;
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(plot_err)?;
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn points(xs: impl Iterator<Item = (f64, Option<f64>)>) -> Vec<(f64, f64)> {
    xs.filter_map(|(x, y)| y.map(|y| (x, y))).collect()
}

/// Write `metrics.json`, `table.md`, and per-attack sweep and purification
/// plots into `outdir`.
pub fn emit_report(report: &MetricsReport, outdir: &Path) -> Result<()> {
    std::fs::create_dir_all(outdir).map_err(|e| FmError::io(outdir, e))?;
    atomic_write(&outdir.join("metrics.json"), render_metrics(report).as_bytes())?;
    atomic_write(&outdir.join("table.md"), render_table(report).as_bytes())?;
    for a in &report.attacks {
        let xs: Vec<f64> = a.sweep.iter().map(|p| p.theta).collect();
        let range =
            (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        line_plot(
            &outdir.join(format!("sweep-{}.svg", a.kind)),
            &format!("{} detection vs unified threshold", a.kind),
            "resistance threshold",
            range,
            &[
                ("clean kept", BLUE, points(a.sweep.iter().map(|p| (p.theta, p.clean)))),
                ("adversarial flagged", RED, points(a.sweep.iter().map(|p| (p.theta, p.adv)))),
                ("overall", BLACK, points(a.sweep.iter().map(|p| (p.theta, p.overall)))),
            ],
        )?;
        // The all-salvageable endpoint is drawn at eta = 100 + one grid step.
        let etas: Vec<f64> = a.purification.iter().filter_map(|p| p.eta).collect();
        let step = if etas.len() > 1 { etas[1] - etas[0] } else { 10.0 };
        let last = etas.last().copied().unwrap_or(100.0);
        let x = |e: Option<f64>| e.unwrap_or(last + step);
        let curve = |f: &dyn Fn(&super::metrics::Outcome) -> Option<f64>| {
            points(a.purification.iter().map(|p| (x(p.eta), f(&p.outcome))))
        };
        line_plot(
            &outdir.join(format!("purification-{}.svg", a.kind)),
            &format!("{} purification vs eta (last point: all purified)", a.kind),
            "eta",
            (etas.first().copied().unwrap_or(0.0), last + step),
            &[
                ("clean recall", BLUE, curve(&|o| o.recall.clean)),
                ("adversarial recall", RED, curve(&|o| o.recall.adv)),
                ("overall recall", GREEN, curve(&|o| o.recall.overall)),
                ("final accuracy", BLACK, curve(&|o| o.final_accuracy.overall)),
            ],
        )?;
    }
    Ok(())
}
