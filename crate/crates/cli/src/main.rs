use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fm_defense::attacks::{build_adv_set, undefended_accuracy, AttackKind};
use fm_defense::classifier::{train_classifier, TargetClassifier};
use fm_defense::combo_vae::{ComboVae, Stage};
use fm_defense::datasets::{
    fetch_dataset, import_dataset, load_dataset, make_splits, DatasetId, ImageSet, Role, SplitSizes, PIXELS, SIDE,
};
use fm_defense::detector::{
    calibrate_thresholds, detect, parse_grid, sweep, NormalRanges, ResistanceEngine, ThresholdConfig, ThresholdMode,
};
use fm_defense::pipeline::{
    emit_report, group_stream, image_set_archive, image_set_from_archive, load_stamped, parse_metrics, read_json,
    render_table, run_experiment, save_stamped, stage, write_json, ClassifierData, ExperimentConfig, ResistanceRecord,
    Run, ROOT_ENV,
};
use fm_defense::purifier::{calibrate_distance_threshold, distance, Defense, TriageDecision};
use fm_defense::FmError;
use fmd_nn::io::Archive;
use ndarray::Array2;

#[derive(Parser)]
#[command(name = "fmdefense", version, about = "Detect and purify adversarial examples by latent feature manipulation")]
struct Cli {
    /// Artifact root; relative paths resolve against it.
    #[arg(long, env = ROOT_ENV, default_value = ".", global = true)]
    root: PathBuf,
    /// Experiment config (TOML). Defaults to the built-in config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Install and split datasets.
    #[command(subcommand)]
    Data(DataCmd),
    /// Train or evaluate the target classifier.
    #[command(subcommand)]
    Clf(ClfCmd),
    /// Train and inspect the combo-VAE.
    #[command(subcommand)]
    Vae(VaeCmd),
    /// Craft adversarial examples.
    #[command(subcommand)]
    Attack(AttackCmd),
    /// Resistance-based detection.
    #[command(subcommand)]
    Detect(DetectCmd),
    /// Distance-threshold calibration.
    #[command(subcommand)]
    Purify(PurifyCmd),
    /// Run the full defense on a set of images.
    #[command(subcommand)]
    Defend(DefendCmd),
    /// Run (or resume) every stage of the configured experiment.
    Evaluate,
    /// Re-render the table and plots from a metrics file.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a config as TOML (the built-in one, or the desk profile).
    Config {
        #[arg(long)]
        desk: Option<DatasetId>,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Download the IDX files.
    Fetch {
        #[arg(long)]
        dataset: DatasetId,
        #[arg(long)]
        mirror: Option<String>,
    },
    /// Install from a local directory (IDX files or per-class JSON).
    Import {
        #[arg(long)]
        dataset: DatasetId,
        #[arg(long)]
        from: PathBuf,
    },
    /// Write a split manifest.
    Split {
        /// `train,cle,val`; the config's sizes when absent.
        #[arg(long)]
        sizes: Option<SplitSizes>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Image-set argument: `train`, `val`, `cle`, `adv-<kind>` in the run
/// directory, or a path to an image-set archive.
#[derive(Args, Clone)]
struct Input {
    #[arg(long = "in", default_value = "cle")]
    input: String,
}

#[derive(Subcommand)]
enum ClfCmd {
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        input: Input,
    },
}

#[derive(Subcommand)]
enum VaeCmd {
    /// Stage 1: the DGMM.
    TrainDgmm {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 2 on top of a stage-1 checkpoint.
    Train {
        #[arg(long)]
        stage2: bool,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Originals above reconstructions, as a PNG grid.
    Reconstruct {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        input: Input,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Traverse one latent code for one image, as a PNG strip.
    Inspect {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        input: Input,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        code: usize,
        /// `lo:hi:steps`.
        #[arg(long, default_value = "-3:3:9")]
        sweep: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum AttackCmd {
    Run {
        #[arg(long)]
        kind: AttackKind,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        out: PathBuf,
        /// Accepted for interface stability; every implemented attack is deterministic.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        eps: Option<f32>,
    },
}

#[derive(Subcommand)]
enum DetectCmd {
    /// Resistance thresholds from VAL.
    Calibrate {
        #[arg(long, default_value = "val")]
        val: String,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        mode: Option<ThresholdMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-instance resistance vectors and verdicts.
    Run {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        thresh: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unified-threshold accuracy curves for CLE against one ADV set.
    Sweep {
        #[arg(long, default_value = "5:100:5")]
        thetas: String,
        #[arg(long, default_value = "cle")]
        clean: String,
        #[arg(long, default_value = "adv-cw")]
        adv: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PurifyCmd {
    /// Add `θ_d` at fractile `eta` to a threshold file.
    Calibrate {
        #[arg(long, default_value_t = 90.0)]
        eta: f64,
        #[arg(long, default_value = "val")]
        val: String,
        #[arg(long)]
        thresh: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DefendCmd {
    Run {
        #[command(flatten)]
        input: Input,
        /// Thresholds with `θ_d`; the run's calibrated file when absent.
        #[arg(long)]
        thresh: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Ctx {
    run: Run,
}

impl Ctx {
    fn open(cli: &Cli) -> anyhow::Result<Self> {
        let config = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        Ok(Ctx { run: Run::open(config, &cli.root)? })
    }

    fn cfg(&self) -> &ExperimentConfig {
        &self.run.config
    }

    fn path_or(&self, p: &Option<PathBuf>, default: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.run.path(default))
    }

    fn set(&self, spec: &str) -> anyhow::Result<ImageSet> {
        let role = match spec {
            "train" => Some(Role::Train),
            "val" => Some(Role::Val),
            "cle" => Some(Role::Cle),
            _ => None,
        };
        if let Some(role) = role {
            let corpus = self.run.corpus()?;
            let splits = self.run.splits(&corpus)?;
            return Ok(corpus.select(splits.indices(role), role));
        }
        let path = if spec.starts_with("adv-") && !spec.ends_with(".fmd") {
            self.run.path(&format!("{spec}.fmd"))
        } else {
            PathBuf::from(spec)
        };
        Ok(image_set_from_archive(&load_stamped(&path, &self.run.hash)?)?)
    }

    fn group_name(spec: &str) -> String {
        Path::new(spec).file_stem().and_then(|s| s.to_str()).unwrap_or(spec).to_string()
    }

    fn clf(&self, p: &Option<PathBuf>) -> anyhow::Result<TargetClassifier> {
        let path = self.path_or(p, "classifier.fmd");
        Ok(TargetClassifier::from_archive(&load_stamped(&path, &self.run.hash)?)
            .with_context(|| format!("loading {}", path.display()))?)
    }

    fn vae(&self, p: &Option<PathBuf>) -> anyhow::Result<ComboVae> {
        let path = self.path_or(p, "vae.fmd");
        Ok(ComboVae::from_archive(&load_stamped(&path, &self.run.hash)?)?)
    }

    fn ranges(&self, vae: &ComboVae) -> anyhow::Result<NormalRanges> {
        Ok(self.run.ranges(vae, &self.set("val")?)?)
    }

    fn resistance(&self, spec: &str) -> anyhow::Result<Vec<ResistanceRecord>> {
        let (clf, vae) = (self.clf(&None)?, self.vae(&None)?);
        let ranges = self.ranges(&vae)?;
        let engine = ResistanceEngine {
            clf: &clf,
            vae: &vae,
            ranges: &ranges,
            morph: &self.cfg().detector.morph,
            codes: self.cfg().codes(),
            seed: self.cfg().seeds.detector,
        };
        Ok(self.run.resistance(&Self::group_name(spec), &self.set(spec)?, &engine)?)
    }
}

fn write_lines(path: &Path, items: impl IntoIterator<Item = serde_json::Value>) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| path.display().to_string())?);
    for it in items {
        writeln!(w, "{}", serde_json::to_string(&it)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows of 28x28 tiles, `cols` per row, as an 8-bit grayscale PNG.
fn png_grid(images: &Array2<f32>, cols: usize, path: &Path) -> anyhow::Result<()> {
    let n = images.nrows();
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols);
    let (w, h) = ((cols * SIDE) as u32, (rows * SIDE) as u32);
    let mut img = image::GrayImage::new(w, h);
    for (i, row) in images.rows().into_iter().enumerate() {
        let (ty, tx) = (i / cols, i % cols);
        for p in 0..PIXELS {
            let v = (row[p].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel((tx * SIDE + p % SIDE) as u32, (ty * SIDE + p / SIDE) as u32, image::Luma([v]));
        }
    }
    img.save(path).with_context(|| path.display().to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<FmError>().map_or(1, FmError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.cmd {
        Cmd::Config { desk } => {
            let c = desk.map_or_else(ExperimentConfig::default, ExperimentConfig::desk);
            print!("{}", c.to_toml());
            Ok(())
        }
        Cmd::Data(DataCmd::Fetch { dataset, mirror }) => {
            let root = data_root(cli)?;
            Ok(fetch_dataset(*dataset, &root, mirror.as_deref())?)
        }
        Cmd::Data(DataCmd::Import { dataset, from }) => {
            let root = data_root(cli)?;
            import_dataset(*dataset, from, &root)?;
            let c = load_dataset(*dataset, &root)?;
            println!("{dataset}: {} train, {} test images", c.train_len, c.test_len());
            Ok(())
        }
        Cmd::Data(DataCmd::Split { sizes, seed, out }) => {
            let ctx = Ctx::open(cli)?;
            let corpus = ctx.run.corpus()?;
            let s = make_splits(&corpus, sizes.unwrap_or(ctx.cfg().splits), seed.unwrap_or(ctx.cfg().seeds.split))?;
            s.save(out)?;
            Ok(())
        }
        Cmd::Clf(ClfCmd::Train { out }) => {
            let ctx = Ctx::open(cli)?;
            let out = ctx.path_or(out, "classifier.fmd");
            let corpus = ctx.run.corpus()?;
            let splits = ctx.run.splits(&corpus)?;
            let val = corpus.select(&splits.val, Role::Val);
            let train = match ctx.cfg().classifier_data {
                ClassifierData::TrainSplit => corpus.select(&splits.train, Role::Train),
                ClassifierData::TrainPartition => corpus.train_partition_excluding(&splits.val),
            };
            let clf = train_classifier(&train, Some(&val), &ctx.cfg().classifier, ctx.cfg().seeds.classifier)?;
            save_stamped(clf.to_archive(), &out, &ctx.run.hash)?;
            println!("VAL accuracy {:.4}", clf.accuracy(&val)?);
            Ok(())
        }
        Cmd::Clf(ClfCmd::Eval { ckpt, input }) => {
            let ctx = Ctx::open(cli)?;
            let acc = ctx.clf(ckpt)?.accuracy(&ctx.set(&input.input)?)?;
            println!("{acc:.4}");
            Ok(())
        }
        Cmd::Vae(VaeCmd::TrainDgmm { out }) => {
            let ctx = Ctx::open(cli)?;
            let out = ctx.path_or(out, "vae-stage1.fmd");
            let (train, val) = (ctx.set("train")?, ctx.set("val")?);
            let mut vae = ComboVae::new(ctx.cfg().vae.clone(), ctx.cfg().seeds.vae)?;
            let report = vae.train_stage1_dgmm(&train, Some(&val), ctx.cfg().seeds.vae)?;
            save_stamped(vae.to_archive(), &out, &ctx.run.hash)?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(())
        }
        Cmd::Vae(VaeCmd::Train { stage2, from, out }) => {
            if !stage2 {
                bail!("`vae train` runs stage 2; pass --stage2 (stage 1 is `vae train-dgmm`)");
            }
            let ctx = Ctx::open(cli)?;
            let from = ctx.path_or(from, "vae-stage1.fmd");
            let out = ctx.path_or(out, "vae.fmd");
            let mut vae = ComboVae::from_archive(&load_stamped(&from, &ctx.run.hash)?)?;
            if vae.stage != Stage::Dgmm {
                return Err(FmError::State(format!("{} is not a stage-1 checkpoint", from.display())).into());
            }
            let (train, val) = (ctx.set("train")?, ctx.set("val")?);
            let report = vae.train_stage2(&train, Some(&val), ctx.cfg().seeds.vae.wrapping_add(1))?;
            save_stamped(vae.to_archive(), &out, &ctx.run.hash)?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(())
        }
        Cmd::Vae(VaeCmd::Reconstruct { ckpt, input, count, out }) => {
            let ctx = Ctx::open(cli)?;
            let vae = ctx.vae(ckpt)?;
            let set = ctx.set(&input.input)?;
            let rows: Vec<usize> = (0..(*count).min(set.len())).collect();
            let x = set.subset(&rows).images;
            let rec = vae.reconstruct(&x)?;
            let both = ndarray::concatenate(ndarray::Axis(0), &[x.view(), rec.view()])?;
            png_grid(&both, rows.len(), out)
        }
        Cmd::Vae(VaeCmd::Inspect { ckpt, input, index, code, sweep, out }) => {
            let ctx = Ctx::open(cli)?;
            let vae = ctx.vae(ckpt)?;
            let set = ctx.set(&input.input)?;
            if *index >= set.len() {
                bail!("index {index} outside a set of {}", set.len());
            }
            let parts: Vec<f32> =
                sweep.split(':').map(str::parse).collect::<Result<_, _>>().context("--sweep lo:hi:steps")?;
            let [lo, hi, steps] = parts[..] else { bail!("--sweep expects lo:hi:steps") };
            let steps = (steps as usize).max(2);
            let values: Vec<f32> = (0..steps).map(|i| lo + (hi - lo) * i as f32 / (steps - 1) as f32).collect();
            png_grid(&vae.traversal(set.image(*index), *code, &values)?, steps, out)
        }
        Cmd::Attack(AttackCmd::Run { kind, ckpt, input, out, seed: _, eps }) => {
            let ctx = Ctx::open(cli)?;
            let clf = ctx.clf(ckpt)?;
            let mut spec = ctx.cfg().attack_spec(*kind);
            if let Some(e) = eps {
                spec.epsilon = *e;
            }
            let (records, adv) = build_adv_set(&clf, &ctx.set(&input.input)?, &spec)?;
            save_stamped(image_set_archive(&adv), out, &ctx.run.hash)?;
            write_json(&out.with_extension("json"), &ctx.run.hash, "attack-records", &records)?;
            println!("{kind}: undefended accuracy {:.4}, {} in ADV", undefended_accuracy(&records), adv.len());
            Ok(())
        }
        Cmd::Detect(DetectCmd::Calibrate { val, rho, mode, out }) => {
            let ctx = Ctx::open(cli)?;
            let recs = ctx.resistance(val)?;
            let rvs: Vec<_> = recs.into_iter().map(|r| r.rv).collect();
            let tc = calibrate_thresholds(
                &rvs,
                rho.unwrap_or(ctx.cfg().detector.rho),
                mode.unwrap_or(ctx.cfg().detector.mode),
            )?;
            write_json(out, &ctx.run.hash, "thresholds", &tc)?;
            println!("{}", serde_json::to_string(&tc.theta_r)?);
            Ok(())
        }
        Cmd::Detect(DetectCmd::Run { input, thresh, out }) => {
            let ctx = Ctx::open(cli)?;
            let tc: ThresholdConfig = read_json(thresh, &ctx.run.hash, "thresholds")?;
            let recs = ctx.resistance(&input.input)?;
            let seed = ctx.cfg().seeds.detector;
            let group = Ctx::group_name(&input.input);
            let rows = recs
                .iter()
                .map(|r| {
                    let v = detect(&r.rv, &tc)?;
                    Ok(serde_json::json!({
                        "index": r.index, "source": r.source, "label": r.label, "verdict": v,
                        "resistance": r.rv.r, "prediction": r.rv.prediction,
                        "seed": seed, "stream": group_stream(&group, r.index),
                    }))
                })
                .collect::<Result<Vec<_>, FmError>>()?;
            write_lines(out, rows)
        }
        Cmd::Detect(DetectCmd::Sweep { thetas, clean, adv, out }) => {
            let ctx = Ctx::open(cli)?;
            let grid = parse_grid(thetas)?;
            let cmin: Vec<f64> = ctx.resistance(clean)?.iter().map(|r| r.rv.min()).collect();
            let amin: Vec<f64> = ctx.resistance(adv)?.iter().map(|r| r.rv.min()).collect();
            let pts = sweep(&cmin, &amin, &grid);
            let mut text = String::from("theta\tclean\tadv\toverall\n");
            let f = |v: Option<f64>| v.map_or("nan".into(), |v| format!("{v:.4}"));
            for p in &pts {
                text.push_str(&format!("{}\t{}\t{}\t{}\n", p.theta, f(p.clean), f(p.adv), f(p.overall)));
            }
            std::fs::write(out, text).with_context(|| out.display().to_string())?;
            Ok(())
        }
        Cmd::Purify(PurifyCmd::Calibrate { eta, val, thresh, out }) => {
            let ctx = Ctx::open(cli)?;
            let mut tc: ThresholdConfig = read_json(thresh, &ctx.run.hash, "thresholds")?;
            let d = ctx.resistance(val)?.iter().map(|r| distance(&r.rv, &tc)).collect::<Result<Vec<_>, _>>()?;
            tc.theta_d = Some(calibrate_distance_threshold(&d, *eta)?);
            tc.eta = Some(*eta);
            write_json(out, &ctx.run.hash, "thresholds", &tc)?;
            println!("theta_d {}", tc.theta_d.unwrap());
            Ok(())
        }
        Cmd::Defend(DefendCmd::Run { input, thresh, out }) => {
            let ctx = Ctx::open(cli)?;
            let tpath = ctx.path_or(thresh, "thresholds.json");
            let tc: ThresholdConfig = read_json(&tpath, &ctx.run.hash, "thresholds")?;
            let (clf, vae) = (ctx.clf(&None)?, ctx.vae(&None)?);
            let ranges = ctx.ranges(&vae)?;
            let defense = Defense {
                engine: ResistanceEngine {
                    clf: &clf,
                    vae: &vae,
                    ranges: &ranges,
                    morph: &ctx.cfg().detector.morph,
                    codes: tc.codes.clone(),
                    seed: ctx.cfg().seeds.detector,
                },
                thresholds: &tc,
            };
            let set = ctx.set(&input.input)?;
            let group = Ctx::group_name(&input.input);
            let mut purified = Vec::new();
            let mut rows = Vec::new();
            for i in 0..set.len() {
                let (rv, d): (_, TriageDecision) = defense.decide(set.image(i), group_stream(&group, i))?;
                let image_ref = d.purified.as_ref().map(|img| {
                    purified.push((i, img.clone()));
                    purified.len() - 1
                });
                rows.push(serde_json::json!({
                    "index": i, "source": set.source[i], "original_label": set.labels[i],
                    "prediction": rv.prediction, "verdict": d.verdict, "distance": d.distance,
                    "final_label": d.final_label, "resistance": rv.r, "purified_image": image_ref,
                }));
            }
            write_lines(out, rows)?;
            if !purified.is_empty() {
                let mut a = Archive::new();
                let flat: Vec<f32> = purified.iter().flat_map(|(_, img)| img.iter().copied()).collect();
                a.insert("images", vec![purified.len(), PIXELS], flat);
                a.insert("index", vec![purified.len()], purified.iter().map(|(i, _)| *i as f32).collect());
                save_stamped(a, &out.with_extension("purified.fmd"), &ctx.run.hash)?;
            }
            Ok(())
        }
        Cmd::Evaluate => {
            let ctx = Ctx::open(cli)?;
            let report = run_experiment(ctx.run.config.clone(), &cli.root)?;
            print!("{}", render_table(&report));
            Ok(())
        }
        Cmd::Report { metrics, out } => {
            let text = std::fs::read_to_string(metrics).map_err(|e| FmError::io(metrics, e))?;
            let report = parse_metrics(&text)?;
            stage("report", || emit_report(&report, out))?;
            Ok(())
        }
    }
}

fn data_root(cli: &Cli) -> anyhow::Result<PathBuf> {
    let config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(fm_defense::pipeline::resolve(&cli.root, &config.data_dir))
}
