//! One pass/fail line per acceptance criterion.
//!
//! Criteria 7 and 8 run live. The others read the committed desk-scale
//! results in `results/<dataset>/` (metrics plus the run log), produced by
//! `fmdefense evaluate` with `configs/<dataset>-desk.toml`. Empirical
//! criteria report FAIL without failing the test; the live ones must pass.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use common::*;
use fm_defense::attacks::AttackKind;
use fm_defense::pipeline::{parse_metrics, MetricsReport};

struct Line {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn results_dir(dataset: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../results").join(dataset)
}

fn load(dataset: &str) -> Result<(MetricsReport, String), String> {
    let dir = results_dir(dataset);
    let text = std::fs::read_to_string(dir.join("metrics.json")).map_err(|e| format!("no {dataset} metrics: {e}"))?;
    let report = parse_metrics(&text).map_err(|e| e.to_string())?;
    let log = std::fs::read_to_string(dir.join("run.log")).unwrap_or_default();
    Ok((report, log))
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

fn opt(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

/// Seconds from the run log's `classifier trained on N images in Ss` line.
fn classifier_seconds(log: &str) -> Option<f64> {
    let line = log.lines().find(|l| l.contains("classifier trained on"))?;
    line.rsplit(" in ").next()?.trim().trim_end_matches('s').parse().ok()
}

fn criterion_1(r: &MetricsReport, log: &str) -> (bool, String) {
    let acc = r.classifier.clean_accuracy;
    let secs = classifier_seconds(log);
    let pass = acc >= 0.97 && secs.is_some_and(|s| s <= 1800.0);
    let time = secs.map_or("unknown training time".into(), |s| format!("trained in {:.1} min", s / 60.0));
    (pass, format!("desk CLE accuracy {} (need >= 97%), {time} (need <= 30 min)", pct(acc)))
}

/// `slack` loosens every bound (FMNIST).
fn criterion_2(r: &MetricsReport, slack: f64) -> (bool, String) {
    let mut pass = true;
    let mut parts = Vec::new();
    for (kind, limit) in [(AttackKind::Fgsm, 0.40), (AttackKind::Cw, 0.02), (AttackKind::Deepfool, 0.20)] {
        match r.attack(kind) {
            Some(a) => {
                let ok = a.undefended_accuracy <= limit + slack && a.attacked >= 500;
                pass &= ok;
                parts.push(format!(
                    "{kind} {} on {} (need <= {})",
                    pct(a.undefended_accuracy),
                    a.attacked,
                    pct(limit + slack)
                ));
            }
            None => {
                pass = false;
                parts.push(format!("{kind} missing"));
            }
        }
    }
    (pass, format!("undefended accuracy: {}", parts.join(", ")))
}

fn criterion_3(r: &MetricsReport, slack: f64) -> (bool, String) {
    let Some(cw) = r.attack(AttackKind::Cw) else { return (false, "no CW results".into()) };
    let at = |t: f64| cw.sweep.iter().find(|p| p.theta == t);
    let (Some(p85), Some(p5)) = (at(85.0), at(5.0)) else { return (false, "sweep lacks thresholds 5 and 85".into()) };
    let tol = 0.06 + slack;
    let (adv85, adv5, clean5) = (opt(p85.adv), opt(p5.adv), opt(p5.clean));
    let pass = adv85 >= 0.99 - tol && adv5 > 0.70 - tol && clean5 >= 0.75 - tol;
    (
        pass,
        format!(
            "CW adv detection {} at theta 85 (need >= {}); at theta 5 adv {} (need > {}), clean {} (need >= {})",
            pct(adv85),
            pct(0.99 - tol),
            pct(adv5),
            pct(0.70 - tol),
            pct(clean5),
            pct(0.75 - tol)
        ),
    )
}

fn criterion_4(r: &MetricsReport, slack: f64) -> (bool, String) {
    let Some(cw) = r.attack(AttackKind::Cw) else { return (false, "no CW results".into()) };
    let s = &cw.sweep;
    let clean_ok = s.windows(2).all(|w| opt(w[1].clean) <= opt(w[0].clean));
    let adv_ok = s.windows(2).all(|w| opt(w[1].adv) >= opt(w[0].adv));
    let best = s.iter().enumerate().max_by(|a, b| opt(a.1.overall).total_cmp(&opt(b.1.overall))).map(|(i, p)| (i, *p));
    let Some((i, peak)) = best else { return (false, "empty sweep".into()) };
    let interior = i > 0 && i + 1 < s.len() && (20.0..=50.0).contains(&peak.theta);
    let pass = clean_ok && adv_ok && interior && opt(peak.overall) >= 0.72 - slack;
    (
        pass,
        format!(
            "CW sweep: clean non-increasing {clean_ok}, adv non-decreasing {adv_ok}, overall peak {} at theta {} \
             (need interior peak in [20, 50] and >= {})",
            pct(opt(peak.overall)),
            peak.theta,
            pct(0.72 - slack)
        ),
    )
}

fn criterion_5(r: &MetricsReport, slack: f64) -> (bool, String) {
    let (Some(cw), Some(fgsm)) = (r.attack(AttackKind::Cw), r.attack(AttackKind::Fgsm)) else {
        return (false, "CW or FGSM results missing".into());
    };
    let Some(eta10) = cw.purification.iter().find(|p| p.eta == Some(10.0)) else {
        return (false, "no eta = 10 point".into());
    };
    let final_all = |a: &fm_defense::pipeline::AttackMetrics| {
        a.purification.last().filter(|p| p.eta.is_none()).and_then(|p| p.outcome.final_accuracy.adv)
    };
    let clean_rec = opt(eta10.outcome.recall.clean);
    let adv_rec = opt(eta10.outcome.recall.adv);
    let (cw_final, fgsm_final) = (opt(final_all(cw)), opt(final_all(fgsm)));
    let pass = clean_rec >= 0.95 - slack
        && adv_rec >= 0.80 - slack
        && cw_final >= 0.93 - slack
        && fgsm_final >= 0.95 - slack
        && cw.adv_size >= 500
        && fgsm.adv_size >= 500;
    (
        pass,
        format!(
            "eta 10: clean recovery {} of {} salvageable (need >= {}), CW recovery {} of {} (need >= {}); \
             all purified: CW {} on {} (need >= {}), FGSM {} on {} (need >= {})",
            pct(clean_rec),
            eta10.outcome.clean.salvageable,
            pct(0.95 - slack),
            pct(adv_rec),
            eta10.outcome.adv.salvageable,
            pct(0.80 - slack),
            pct(cw_final),
            cw.adv_size,
            pct(0.93 - slack),
            pct(fgsm_final),
            fgsm.adv_size,
            pct(0.95 - slack)
        ),
    )
}

fn criterion_6(r: &MetricsReport) -> (bool, String) {
    let before = r.classifier.clean_accuracy;
    let after = opt(r.clean_purified.final_accuracy.clean);
    let calibrated = opt(r.clean_calibrated.final_accuracy.clean);
    (
        (before - after).abs() <= 0.02,
        format!(
            "clean accuracy {} undefended, {} with every suspicious input purified (need within 2 points); \
             {} at the calibrated thresholds",
            pct(before),
            pct(after),
            pct(calibrated)
        ),
    )
}

fn criterion_7() -> (bool, String) {
    let t = Instant::now();
    let checks: [(&str, Check); 8] = [
        ("distance", distance_vs_bruteforce(1000, 71)),
        ("KL", kl_vs_monte_carlo(3, 1_000_000, 72)),
        ("gm_losses", gm_losses_vs_density_ratio(100, 73)),
        ("permute_dims", permute_dims_preserves_columns(200, 74)),
        ("monotonicity", monotonicity(20, 75)),
        ("resistance recount", resistance_recount(4, 76)),
        ("triage partition", triage_partition(5000, 77)),
        ("metric recount", metric_recount(300, 78)),
    ];
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<String> =
        checks.iter().filter_map(|(n, c)| c.as_ref().err().map(|e| format!("{n}: {e}"))).collect();
    let pass = failed.is_empty() && secs < 60.0;
    let detail = if failed.is_empty() {
        checks.iter().map(|(n, c)| format!("{n} ok ({})", c.as_ref().unwrap())).collect::<Vec<_>>().join("; ")
    } else {
        failed.join("; ")
    };
    (pass, format!("{detail}; {secs:.1}s (need < 60s)"))
}

fn criterion_8() -> (bool, String) {
    let independent = tc_discriminator_accuracy(factorized_gaussian, 81);
    let duplicated = tc_discriminator_accuracy(duplicated_gaussian, 82);
    (
        independent <= 0.55 && duplicated >= 0.9,
        format!(
            "discriminator accuracy {} on factorized data (need <= 55%), {} with duplicated dimensions (need >= 90%)",
            pct(independent),
            pct(duplicated)
        ),
    )
}

fn empirical(lines: &mut Vec<Line>, id: &'static str, result: Result<(bool, String), String>) {
    let (pass, detail) = result.unwrap_or_else(|e| (false, e));
    lines.push(Line { id, pass, detail });
}

#[test]
fn acceptance() {
    let mut lines = Vec::new();
    let mnist = load("mnist");
    let fmnist = load("fmnist");
    let m =
        |f: &dyn Fn(&MetricsReport, &str) -> (bool, String)| mnist.as_ref().map(|(r, l)| f(r, l)).map_err(Clone::clone);
    empirical(&mut lines, "1", m(&|r, l| criterion_1(r, l)));
    empirical(&mut lines, "2", m(&|r, _| criterion_2(r, 0.0)));
    empirical(&mut lines, "3", m(&|r, _| criterion_3(r, 0.0)));
    empirical(&mut lines, "4", m(&|r, _| criterion_4(r, 0.0)));
    empirical(&mut lines, "5", m(&|r, _| criterion_5(r, 0.0)));
    empirical(&mut lines, "6", m(&|r, _| criterion_6(r)));
    let (p7, d7) = criterion_7();
    lines.push(Line { id: "7", pass: p7, detail: d7 });
    let (p8, d8) = criterion_8();
    lines.push(Line { id: "8", pass: p8, detail: d8 });
    for (id, f) in [
        ("9.2", criterion_2 as fn(&MetricsReport, f64) -> (bool, String)),
        ("9.3", criterion_3),
        ("9.4", criterion_4),
        ("9.5", criterion_5),
    ] {
        empirical(&mut lines, id, fmnist.as_ref().map(|(r, _)| f(r, 0.05)).map_err(Clone::clone));
    }

    println!();
    for l in &lines {
        println!("criterion {:<4} {}  {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.detail);
    }
    let passed = lines.iter().filter(|l| l.pass).count();
    println!("{passed}/{} criteria pass", lines.len());

    assert!(p7 && p8, "the live criteria must pass");
    assert!(mnist.is_ok() && fmnist.is_ok(), "committed results are missing");
}
