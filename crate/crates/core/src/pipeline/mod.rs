//! Orchestration of a full run: data, classifier, combo-VAE, attacks,
//! calibration, detection, triage, purification, metrics and report.
//!
//! Every stage writes its artifacts into the run directory, stamped with
//! the config hash, and is skipped when a matching artifact already exists.

mod artifacts;
mod config;
mod metrics;
mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

pub use artifacts::{
    atomic_write, image_set_archive, image_set_from_archive, load_stamped, read_json, save_stamped, write_json,
    Envelope, ResistanceLog, ResistanceRecord, SCHEMA_VERSION,
};
pub use config::{
    artifact_root, resolve, ClassifierData, DetectorSettings, ExperimentConfig, PurifierSettings, Seeds, ROOT_ENV,
};
pub use metrics::{
    compute_metrics, evaluate_outcome, model_diagnostics, val_distances, val_false_positive, AttackMetrics,
    CalibrationSummary, ClassifierMetrics, CurvePoint, GroupCounts, InstanceOutcome, MetricsReport, MetricsSettings,
    ModelDiagnostics, Outcome, Rates, RunLogs,
};
pub use report::{emit_report, parse_metrics, render_metrics, render_table, REPORTED_BASELINES};

use crate::attacks::{build_adv_set, AdversarialRecord, AttackKind};
use crate::classifier::{train_classifier, TargetClassifier};
use crate::combo_vae::{ComboVae, Stage, Stage1Report, Stage2Report};
use crate::datasets::{load_dataset, make_splits, Corpus, ImageSet, Role, Splits};
use crate::detector::{
    calibrate_thresholds, compute_normal_ranges, parse_grid, NormalRanges, ResistanceEngine, ThresholdConfig,
};
use crate::error::{FmError, Result};
use crate::purifier::{calibrate_distance_threshold, purify};

/// Run `f` and tag any failure with the stage name.
pub fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        FmError::Stage { .. } => e,
        e => FmError::Stage { stage: name, source: Box::new(e) },
    })
}

/// RNG stream of an image group, so every instance draws from its own
/// stream regardless of which groups are evaluated.
pub fn group_stream(group: &str, index: usize) -> u64 {
    let g: u64 = match group {
        "val" => 0,
        "cle" => 1,
        "adv-fgsm" => 2,
        "adv-deepfool" => 3,
        "adv-cw" => 4,
        other => 16 + other.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)) % 1024,
    };
    (g << 32) | index as u64
}

/// A run directory bound to one config.
pub struct Run {
    pub config: ExperimentConfig,
    pub hash: String,
    pub dir: PathBuf,
    pub data_dir: PathBuf,
}

impl Run {
    /// Open (or create) the run directory. A directory created by a
    /// different config is refused.
    pub fn open(config: ExperimentConfig, root: &Path) -> Result<Self> {
        config.validate()?;
        let dir = resolve(root, &config.output_dir);
        let data_dir = resolve(root, &config.data_dir);
        let hash = config.hash();
        std::fs::create_dir_all(&dir).map_err(|e| FmError::io(&dir, e))?;
        let stored = dir.join("config.toml");
        if stored.exists() {
            let prev = ExperimentConfig::load(&stored)?;
            if prev.hash() != hash {
                return Err(FmError::State(format!("{} belongs to config {}, not {hash}", dir.display(), prev.hash())));
            }
        } else {
            atomic_write(&stored, config.to_toml().as_bytes())?;
        }
        Ok(Run { config, hash, dir, data_dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn corpus(&self) -> Result<Corpus> {
        load_dataset(self.config.dataset, &self.data_dir)
    }

    pub fn splits(&self, corpus: &Corpus) -> Result<Splits> {
        let path = self.path("splits.txt");
        let header = format!("# config {}\n", self.hash);
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| FmError::io(&path, e))?;
            if !text.starts_with(&header) {
                return Err(FmError::State(format!("{} was written by another config", path.display())));
            }
            return Splits::from_manifest(&text);
        }
        let s = make_splits(corpus, self.config.splits, self.config.seeds.split)?;
        atomic_write(&path, format!("{header}{}", s.to_manifest()).as_bytes())?;
        Ok(s)
    }

    pub fn classifier(&self, corpus: &Corpus, splits: &Splits) -> Result<TargetClassifier> {
        let path = self.path("classifier.fmd");
        if path.exists() {
            return TargetClassifier::from_archive(&load_stamped(&path, &self.hash)?);
        }
        let train = match self.config.classifier_data {
            ClassifierData::TrainSplit => corpus.select(&splits.train, Role::Train),
            ClassifierData::TrainPartition => corpus.train_partition_excluding(&splits.val),
        };
        let val = corpus.select(&splits.val, Role::Val);
        let t = Instant::now();
        let clf = train_classifier(&train, Some(&val), &self.config.classifier, self.config.seeds.classifier)?;
        log::info!("classifier trained on {} images in {:.0}s", train.len(), t.elapsed().as_secs_f64());
        save_stamped(clf.to_archive(), &path, &self.hash)?;
        Ok(clf)
    }

    pub fn vae(&self, train: &ImageSet, val: &ImageSet) -> Result<ComboVae> {
        let full = self.path("vae.fmd");
        if full.exists() {
            return ComboVae::from_archive(&load_stamped(&full, &self.hash)?);
        }
        let s1 = self.path("vae-stage1.fmd");
        let mut vae = if s1.exists() {
            ComboVae::from_archive(&load_stamped(&s1, &self.hash)?)?
        } else {
            let mut vae = ComboVae::new(self.config.vae.clone(), self.config.seeds.vae)?;
            let t = Instant::now();
            let report = vae.train_stage1_dgmm(train, Some(val), self.config.seeds.vae)?;
            log::info!("DGMM trained in {:.0}s: {report:?}", t.elapsed().as_secs_f64());
            write_json(&self.path("vae-stage1.json"), &self.hash, "stage1-report", &report)?;
            save_stamped(vae.to_archive(), &s1, &self.hash)?;
            vae
        };
        if vae.stage != Stage::Dgmm {
            return Err(FmError::State(format!("{} holds a {:?} model", s1.display(), vae.stage)));
        }
        let t = Instant::now();
        let report = vae.train_stage2(train, Some(val), self.config.seeds.vae.wrapping_add(1))?;
        log::info!("combo-VAE trained in {:.0}s", t.elapsed().as_secs_f64());
        write_json(&self.path("vae-stage2.json"), &self.hash, "stage2-report", &report)?;
        save_stamped(vae.to_archive(), &full, &self.hash)?;
        Ok(vae)
    }

    pub fn stage1_report(&self) -> Result<Stage1Report> {
        read_json(&self.path("vae-stage1.json"), &self.hash, "stage1-report")
    }

    pub fn stage2_report(&self) -> Result<Stage2Report> {
        read_json(&self.path("vae-stage2.json"), &self.hash, "stage2-report")
    }

    /// Attack records and the ADV set for one attack kind.
    pub fn attack(
        &self,
        clf: &TargetClassifier,
        cle: &ImageSet,
        kind: AttackKind,
    ) -> Result<(Vec<AdversarialRecord>, ImageSet)> {
        let set_path = self.path(&format!("adv-{kind}.fmd"));
        let rec_path = self.path(&format!("attack-{kind}.json"));
        if set_path.exists() && rec_path.exists() {
            let set = image_set_from_archive(&load_stamped(&set_path, &self.hash)?)?;
            return Ok((read_json(&rec_path, &self.hash, "attack-records")?, set));
        }
        let t = Instant::now();
        let (records, adv) = build_adv_set(clf, cle, &self.config.attack_spec(kind))?;
        log::info!("{kind}: {} of {} kept in ADV, {:.0}s", adv.len(), records.len(), t.elapsed().as_secs_f64());
        write_json(&rec_path, &self.hash, "attack-records", &records)?;
        save_stamped(image_set_archive(&adv), &set_path, &self.hash)?;
        Ok((records, adv))
    }

    pub fn ranges(&self, vae: &ComboVae, val: &ImageSet) -> Result<NormalRanges> {
        let path = self.path("ranges.json");
        if path.exists() {
            return read_json(&path, &self.hash, "normal-ranges");
        }
        let r = compute_normal_ranges(vae, val)?;
        write_json(&path, &self.hash, "normal-ranges", &r)?;
        Ok(r)
    }

    /// Resistance vectors of every image in `set`, resuming a partial log.
    pub fn resistance(&self, group: &str, set: &ImageSet, engine: &ResistanceEngine) -> Result<Vec<ResistanceRecord>> {
        let log = ResistanceLog::new(&self.dir, group, &self.hash);
        if log.is_complete() {
            let recs = log.read()?;
            if recs.len() != set.len() {
                return Err(FmError::State(format!(
                    "{} has {} of {} records",
                    log.done.display(),
                    recs.len(),
                    set.len()
                )));
            }
            return Ok(recs);
        }
        engine.validate()?;
        let mut recs = log.resume()?;
        recs.truncate(set.len());
        let mut out = log.appender(&recs)?;
        let t = Instant::now();
        let start = recs.len();
        for i in start..set.len() {
            let rv = engine.evaluate(set.image(i), group_stream(group, i))?;
            let r = ResistanceRecord { index: i, source: set.source[i], label: set.labels[i], rv };
            out.push(&r)?;
            recs.push(r);
            if (i + 1) % 100 == 0 {
                let rate = t.elapsed().as_secs_f64() / (i + 1 - start) as f64;
                log::info!("{group}: {}/{} ({rate:.2}s per instance)", i + 1, set.len());
            }
        }
        drop(out);
        log.finish()?;
        Ok(recs)
    }

    /// Per-code thresholds at the configured `rho`, plus `θ_d` at `eta`.
    pub fn thresholds(&self, val: &[InstanceOutcome]) -> Result<ThresholdConfig> {
        let path = self.path("thresholds.json");
        if path.exists() {
            return read_json(&path, &self.hash, "thresholds");
        }
        let d = &self.config.detector;
        let rvs: Vec<_> = val.iter().map(|o| o.rv.clone()).collect();
        let mut tc = calibrate_thresholds(&rvs, d.rho, d.mode)?;
        let eta = self.config.purifier.eta;
        tc.theta_d = Some(calibrate_distance_threshold(&val_distances(val, &tc)?, eta)?);
        tc.eta = Some(eta);
        write_json(&path, &self.hash, "thresholds", &tc)?;
        Ok(tc)
    }

    /// Labels of the reconstructions of `set`; with `twice`, also the labels
    /// after reconstructing the reconstructions.
    pub fn purified(
        &self,
        group: &str,
        set: &ImageSet,
        vae: &ComboVae,
        clf: &TargetClassifier,
        twice: bool,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        let path = self.path(&format!("purified-{group}.json"));
        if path.exists() {
            return read_json(&path, &self.hash, "purified-labels");
        }
        let (x1, once) = purify(vae, clf, &set.images)?;
        let again = if twice { purify(vae, clf, &x1)?.1 } else { Vec::new() };
        write_json(&path, &self.hash, "purified-labels", &(&once, &again))?;
        Ok((once, again))
    }
}

fn outcomes(recs: &[ResistanceRecord], purified: &[usize]) -> Vec<InstanceOutcome> {
    recs.iter()
        .zip(purified)
        .map(|(r, &p)| InstanceOutcome { label: r.label, rv: r.rv.clone(), purified_label: p })
        .collect()
}

/// Execute (or resume) every stage and write the report into the run
/// directory.
pub fn run_experiment(config: ExperimentConfig, root: &Path) -> Result<MetricsReport> {
    let run = stage("setup", || Run::open(config, root))?;
    let cfg = run.config.clone();
    log::info!("run {} in {}", &run.hash[..12], run.dir.display());
    let corpus = stage("data", || run.corpus())?;
    let splits = stage("data", || run.splits(&corpus))?;
    let train = corpus.select(&splits.train, Role::Train);
    let val = corpus.select(&splits.val, Role::Val);
    let cle = corpus.select(&splits.cle, Role::Cle);

    let clf = stage("classifier", || run.classifier(&corpus, &splits))?;
    let vae = stage("vae", || run.vae(&train, &val))?;
    let mut attacks = Vec::new();
    for &kind in &cfg.attacks {
        attacks.push((kind, stage("attacks", || run.attack(&clf, &cle, kind))?));
    }

    let ranges = stage("ranges", || run.ranges(&vae, &val))?;
    let engine = ResistanceEngine {
        clf: &clf,
        vae: &vae,
        ranges: &ranges,
        morph: &cfg.detector.morph,
        codes: cfg.codes(),
        seed: cfg.seeds.detector,
    };
    let val_rec = stage("resistance", || run.resistance("val", &val, &engine))?;
    let cle_rec = stage("resistance", || run.resistance("cle", &cle, &engine))?;
    let mut adv_rec = Vec::new();
    for (kind, (_, set)) in &attacks {
        adv_rec.push(stage("resistance", || run.resistance(&format!("adv-{kind}"), set, &engine))?);
    }

    let (val_p, _) = stage("purify", || run.purified("val", &val, &vae, &clf, false))?;
    let (cle_p, cle_pp) = stage("purify", || run.purified("cle", &cle, &vae, &clf, true))?;
    let val_out = outcomes(&val_rec, &val_p);
    let tc = stage("calibrate", || run.thresholds(&val_out))?;

    let mut logs = RunLogs { val: val_out, cle_repurified: cle_pp, cle: outcomes(&cle_rec, &cle_p), adv: Vec::new() };
    for ((kind, (records, set)), recs) in attacks.into_iter().zip(&adv_rec) {
        let (p, _) = stage("purify", || run.purified(&format!("adv-{kind}"), &set, &vae, &clf, false))?;
        logs.adv.push((kind, records, outcomes(recs, &p)));
    }

    let report = stage("metrics", || {
        let train_size = match cfg.classifier_data {
            ClassifierData::TrainSplit => splits.train.len(),
            ClassifierData::TrainPartition => corpus.train_len - splits.val.len(),
        };
        let classifier =
            ClassifierMetrics { train_size, clean_accuracy: clf.accuracy(&cle)?, val_accuracy: clf.accuracy(&val)? };
        let thetas = parse_grid(&cfg.detector.sweep)?;
        let settings = MetricsSettings {
            dataset: cfg.dataset,
            config_hash: &run.hash,
            thresholds: &tc,
            sweep_thetas: &thetas,
            curve_theta: cfg.purifier.curve_theta,
            eta_grid: &cfg.purifier.eta_grid,
        };
        let diagnostics = model_diagnostics(
            &vae,
            &val,
            &ranges,
            run.stage1_report().ok().as_ref(),
            run.stage2_report().ok().as_ref(),
        )?;
        compute_metrics(&settings, &logs, classifier, diagnostics)
    })?;
    stage("report", || emit_report(&report, &run.dir))?;
    Ok(report)
}
