use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};

use vvb_core::cnn::{cnn_train, CnnModel, TrainParams};
use vvb_core::dataset::{self, Dataset, LabelSpec, Task};
use vvb_core::metrics::{confusion_matrix, ConfusionMatrix};
use vvb_core::model_io::Model;
use vvb_core::noise::{self, NoiseConfig};
use vvb_core::optics::{to_rgb, GridSpec, VvbState};
use vvb_core::pca::{self, pca_fit, FeatureSet};
use vvb_core::reconstruct;
use vvb_core::svm::{svm_train, PcaSvm, SvmParams};

use crate::config::{pick, RunConfig};
use crate::output::{ensure_dir, sha256_file, write_atomic, CsvStream};
use crate::{
    CliError, Common, EvalArgs, GenerateArgs, GridArgs, NoiseArgs, PcaReportArgs,
    ReconstructArgs, RenderArgs, TrainArgs,
};

const DEFAULT_SEED: u64 = 0;

/// Loads the config, sizes the thread pool and fills the `[run]` section.
fn start(common: &Common, command: &str) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load_opt(common.config.as_deref())?;
    if let Some(c) = &cfg.run.command {
        if c != command {
            return Err(CliError::Config(format!(
                "config was written for `{c}`, not `{command}`"
            )));
        }
    }
    let deterministic = common.deterministic || cfg.run.deterministic.unwrap_or(false);
    let jobs = if deterministic {
        1
    } else {
        pick(common.jobs, cfg.run.jobs, 0)
    };
    // a pool can only be installed once per process; later calls keep the first
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    cfg.run.command = Some(command.to_string());
    cfg.run.seed = Some(pick(common.seed, cfg.run.seed, DEFAULT_SEED));
    cfg.run.jobs = Some(jobs);
    cfg.run.deterministic = Some(deterministic);
    Ok(cfg)
}

fn seed(cfg: &RunConfig) -> u64 {
    cfg.run.seed.unwrap_or(DEFAULT_SEED)
}

fn resolve_grid(args: &GridArgs, cfg: &mut RunConfig) -> Result<GridSpec, CliError> {
    let d = GridSpec::default();
    let res = pick(args.resolution, cfg.grid.resolution, d.resolution());
    let half = pick(args.half_extent, cfg.grid.half_extent, d.half_extent());
    let waist = pick(args.waist, cfg.grid.waist, d.waist());
    cfg.grid.resolution = Some(res);
    cfg.grid.half_extent = Some(half);
    cfg.grid.waist = Some(waist);
    Ok(GridSpec::new(res, half, waist)?)
}

fn resolve_noise(args: &NoiseArgs, cfg: &mut RunConfig) -> Result<NoiseConfig, CliError> {
    let preset = pick(args.noise.clone(), cfg.noise.preset.clone(), "none".into());
    let mut n = NoiseConfig::preset(&preset, seed(cfg)).ok_or_else(|| {
        CliError::Config(format!(
            "unknown noise preset {preset:?} (known: {})",
            NoiseConfig::PRESET_NAMES.join(", ")
        ))
    })?;
    let s = &mut cfg.noise;
    for (field, value) in [
        (&mut n.center_jitter_sigma, &mut s.center_jitter_sigma),
        (&mut n.waist_jitter_rel, &mut s.waist_jitter_rel),
        (&mut n.impurity_eps, &mut s.impurity_eps),
        (&mut n.pol_crosstalk_rad, &mut s.pol_crosstalk_rad),
        (&mut n.intensity_noise_rel, &mut s.intensity_noise_rel),
        (&mut n.background_rel, &mut s.background_rel),
    ] {
        if let Some(v) = *value {
            *field = v;
        }
        *value = Some(*field);
    }
    s.preset = Some(preset);
    n.validate()?;
    Ok(n)
}

fn required(path: Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    path.ok_or_else(|| CliError::Config(format!("--{flag} is required")))
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    write_atomic(&dir.join("resolved.toml"), cfg.to_toml().as_bytes())
}

fn parse_features(name: &str) -> Result<FeatureSet, CliError> {
    FeatureSet::parse(name).ok_or_else(|| {
        CliError::Config(format!(
            "unknown feature set {name:?} (known: stokes, stokes+intensity)"
        ))
    })
}

pub fn generate(args: &GenerateArgs, common: &Common) -> Result<(), CliError> {
    let mut cfg = start(common, "generate")?;
    let task_name = pick(args.task.clone(), cfg.data.task.clone(), "class15".into());
    let task = match task_name.as_str() {
        "sphere" => Task::Regression,
        other => Task::parse(other).ok_or_else(|| {
            CliError::Config(format!(
                "unknown task {other:?} (known: class15, sector26, sphere)"
            ))
        })?,
    };
    let grid = resolve_grid(&args.grid, &mut cfg)?;
    let noise = resolve_noise(&args.noise, &mut cfg)?;
    let out = pick(args.out.clone(), cfg.paths.out.clone(), "vvb-data".into());
    cfg.data.task = Some(task_name);
    cfg.paths.out = Some(out.clone());
    let seed = seed(&cfg);

    let files: Vec<(&str, Dataset)> = if task == Task::Regression {
        let count = pick(args.count, cfg.data.count, 1000);
        cfg.data.count = Some(count);
        vec![("data.vvbd", dataset::generate_sphere(count, &noise, &grid, seed)?)]
    } else {
        let n_train = pick(args.per_class, cfg.data.per_class, 400);
        let n_val = pick(args.val_per_class, cfg.data.val_per_class, 100);
        cfg.data.per_class = Some(n_train);
        cfg.data.val_per_class = Some(n_val);
        let (train, val) = if task == Task::Class15 {
            dataset::generate_class15(n_train, n_val, &noise, &grid, seed)?
        } else {
            dataset::generate_sector26(n_train, n_val, &noise, &grid, seed)?
        };
        vec![("train.vvbd", train), ("val.vvbd", val)]
    };

    ensure_dir(&out)?;
    let mut manifest = String::from("file,images,sha256\n");
    for (name, ds) in &files {
        let path = out.join(name);
        ds.save(&path)?;
        let sum = sha256_file(&path)?;
        manifest.push_str(&format!("{name},{},{sum}\n", ds.len()));
        println!("{}: {} images, sha256 {sum}", path.display(), ds.len());
    }
    write_atomic(&out.join("manifest.csv"), manifest.as_bytes())?;
    write_resolved(&out, &cfg)
}

fn load(path: &Path) -> Result<Dataset, CliError> {
    Ok(Dataset::load(path)?)
}

pub fn train(args: &TrainArgs, common: &Common) -> Result<(), CliError> {
    let mut cfg = start(common, "train")?;
    let kind = pick(args.model.clone(), cfg.run.model.clone(), "svm".into());
    if kind != "svm" && kind != "cnn" {
        return Err(CliError::Config(format!("unknown model {kind:?} (known: svm, cnn)")));
    }
    cfg.run.model = Some(kind.clone());
    let out = pick(args.out.clone(), cfg.paths.out.clone(), "vvb-model".into());
    cfg.paths.out = Some(out.clone());
    let train_path = required(args.train.clone().or(cfg.paths.train.clone()), "train")?;
    cfg.paths.train = Some(train_path.clone());
    let val_path = args.val.clone().or(cfg.paths.val.clone());
    cfg.paths.val = val_path.clone();
    let seed = seed(&cfg);

    if kind == "svm" {
        let ncomp = pick(args.ncomp, cfg.svm.ncomp, 40);
        if ncomp == 0 {
            return Err(CliError::Config("--ncomp must be at least 1".into()));
        }
        let features = pick(args.features.clone(), cfg.svm.features.clone(), "stokes".into());
        let feature_set = parse_features(&features)?;
        let params = SvmParams {
            lambda: pick(args.lambda, cfg.svm.lambda, SvmParams::default().lambda),
            epochs: pick(args.epochs, cfg.svm.epochs, SvmParams::default().epochs),
            seed,
        };
        if !(params.lambda > 0.0) || params.epochs == 0 {
            return Err(CliError::Config("--lambda must be > 0 and --epochs >= 1".into()));
        }
        cfg.svm.ncomp = Some(ncomp);
        cfg.svm.features = Some(features);
        cfg.svm.lambda = Some(params.lambda);
        cfg.svm.epochs = Some(params.epochs);

        let full = load(&train_path)?;
        let (train, test) = match &val_path {
            Some(p) => (full, load(p)?),
            None => full.split_half(seed),
        };
        check_classification(&train)?;
        let pca = pca_fit(&train, ncomp, feature_set)?;
        let xs = pca.transform_dataset(&train)?;
        let (svm, trace) = svm_train(&xs, &train.labels(), train.class_count(), params)?;
        let svm = svm.with_label_spec(train.label_spec().clone())?;
        let model = PcaSvm::new(pca, svm)?;
        let cm = confusion_matrix(&model, &test)?;

        ensure_dir(&out)?;
        let mut csv = String::from("epoch,objective,train_acc\n");
        for e in &trace {
            csv.push_str(&format!("{},{},{}\n", e.epoch, e.objective, e.train_accuracy));
        }
        write_atomic(&out.join("metrics.csv"), csv.as_bytes())?;
        write_confusion(&out, &cm, Some(train.label_spec()))?;
        Model::Svm(model).save(&out.join("model.vvbm"))?;
        write_resolved(&out, &cfg)?;
        println!(
            "svm: {ncomp} components, held-out average accuracy {:.6} on {} images",
            cm.average_accuracy(),
            test.len()
        );
        return Ok(());
    }

    let d = TrainParams::default();
    let params = TrainParams {
        epochs: pick(args.epochs, cfg.cnn.epochs, d.epochs),
        batch_size: pick(args.batch_size, cfg.cnn.batch_size, d.batch_size),
        learning_rate: pick(args.learning_rate, cfg.cnn.learning_rate, d.learning_rate),
        momentum: pick(args.momentum, cfg.cnn.momentum, d.momentum),
        seed,
        deterministic: cfg.run.deterministic.unwrap_or(false),
    };
    params.validate()?;
    cfg.cnn.epochs = Some(params.epochs);
    cfg.cnn.batch_size = Some(params.batch_size);
    cfg.cnn.learning_rate = Some(params.learning_rate);
    cfg.cnn.momentum = Some(params.momentum);

    let full = load(&train_path)?;
    let (train, val) = match &val_path {
        Some(p) => (full, load(p)?),
        None => full.split_half(seed),
    };
    check_classification(&train)?;
    let net = CnnModel::standard(train.resolution(), train.class_count(), seed)?
        .with_label_spec(train.label_spec().clone())?;
    ensure_dir(&out)?;
    let mut csv = CsvStream::create(&out.join("metrics.csv"), vvb_core::cnn::EpochMetrics::CSV_HEADER)?;
    let (net, history) = cnn_train(&net, &train, &val, &params, |m| {
        println!(
            "epoch {:>3}  loss {:.5}  train {:.4}  val {:.4}",
            m.epoch, m.train_loss, m.train_acc, m.val_acc
        );
        csv.line(&m.csv_row())
            .map_err(|e| vvb_core::Error::Format(e.to_string()))
    })?;
    csv.finish()?;
    let cm = confusion_matrix(&net, &val)?;
    write_confusion(&out, &cm, Some(train.label_spec()))?;
    Model::Cnn(net).save(&out.join("model.vvbm"))?;
    write_resolved(&out, &cfg)?;
    println!(
        "cnn: {} epochs, validation average accuracy {:.6} (last epoch accuracy {:.6})",
        params.epochs,
        cm.average_accuracy(),
        history.last().map_or(0.0, |m| m.val_acc)
    );
    Ok(())
}

fn check_classification(data: &Dataset) -> Result<(), CliError> {
    if data.label_spec().task() == Task::Regression {
        return Err(CliError::Config(
            "classifiers need a class15 or sector26 dataset".into(),
        ));
    }
    Ok(())
}

fn write_confusion(dir: &Path, cm: &ConfusionMatrix, spec: Option<&LabelSpec>) -> Result<(), CliError> {
    write_atomic(&dir.join("confusion.txt"), cm.to_text(spec).as_bytes())?;
    write_atomic(&dir.join("confusion.csv"), cm.to_csv(spec).as_bytes())
}

pub fn eval(args: &EvalArgs, common: &Common) -> Result<(), CliError> {
    let mut cfg = start(common, "eval")?;
    let model_path = required(args.model.clone().or(cfg.paths.model.clone()), "model")?;
    let data_path = required(args.data.clone().or(cfg.paths.data.clone()), "data")?;
    cfg.paths.model = Some(model_path.clone());
    cfg.paths.data = Some(data_path.clone());
    let model = Model::load(&model_path)?;
    let classifier = model.classifier().ok_or_else(|| {
        CliError::Config(format!("a {} model cannot classify", model.kind().name()))
    })?;
    let data = load(&data_path)?;
    if let Some(spec) = model.label_spec() {
        if spec.task() != data.label_spec().task() {
            return Err(vvb_core::Error::Shape {
                expected: format!("{} dataset", spec.task().name()),
                found: data.label_spec().task().name().to_string(),
            }
            .into());
        }
    }
    let cm = confusion_matrix(classifier, &data)?;
    let spec = data.label_spec();
    print!("{}", cm.to_text(Some(spec)));
    if let Some(out) = args.out.clone().or(cfg.paths.out.clone()) {
        ensure_dir(&out)?;
        write_confusion(&out, &cm, Some(spec))?;
        let summary = format!(
            "images={}\naverage_accuracy={}\noverall_accuracy={}\n",
            cm.total(),
            cm.average_accuracy(),
            cm.overall_accuracy()
        );
        write_atomic(&out.join("summary.txt"), summary.as_bytes())?;
        cfg.paths.out = Some(out.clone());
        write_resolved(&out, &cfg)?;
    }
    Ok(())
}

pub fn reconstruct(args: &ReconstructArgs, common: &Common) -> Result<(), CliError> {
    let mut cfg = start(common, "reconstruct")?;
    let model_path = required(args.model.clone().or(cfg.paths.model.clone()), "model")?;
    let data_path = required(args.data.clone().or(cfg.paths.data.clone()), "data")?;
    let calib_path = args.calibration.clone().or(cfg.paths.calibration.clone());
    let out = pick(args.out.clone(), cfg.paths.out.clone(), "vvb-reconstruct".into());
    let bins = pick(args.bins, cfg.report.bins, pca::DEFAULT_RADII_BINS);
    cfg.paths.model = Some(model_path.clone());
    cfg.paths.data = Some(data_path.clone());
    cfg.paths.calibration = calib_path.clone();
    cfg.paths.out = Some(out.clone());
    cfg.report.bins = Some(bins);

    let (pca, stored) = match Model::load(&model_path)? {
        Model::Pca { pca, alignment } => (pca, alignment),
        other => {
            return Err(CliError::Config(format!(
                "reconstruction needs a pca model, got {}",
                other.kind().name()
            )))
        }
    };
    let alignment = match (&calib_path, stored) {
        (Some(p), _) => reconstruct::calibrate(&pca, &load(p)?)?,
        (None, Some(a)) => a,
        (None, None) => {
            return Err(CliError::Config(
                "the model carries no alignment; pass --calibration".into(),
            ))
        }
    };
    let data = load(&data_path)?;
    if !data.label_spec().task().has_angles() {
        return Err(CliError::Config(
            "reconstruction needs a dataset with (θ, φ) labels".into(),
        ));
    }
    let r = reconstruct::reconstruct(&pca, &alignment, &data)?;
    ensure_dir(&out)?;
    write_atomic(&out.join("estimates.csv"), r.to_csv(&data).as_bytes())?;
    write_atomic(&out.join("fidelity_hist.csv"), r.histogram(bins).to_csv().as_bytes())?;
    let summary = format!(
        "images={}\nmean_fidelity={}\nstd_fidelity={}\n",
        r.fidelities.len(),
        r.mean_fidelity(),
        r.std_fidelity()
    );
    write_atomic(&out.join("summary.txt"), summary.as_bytes())?;
    write_resolved(&out, &cfg)?;
    println!(
        "{} images: mean fidelity {:.6}, std {:.6}",
        r.fidelities.len(),
        r.mean_fidelity(),
        r.std_fidelity()
    );
    Ok(())
}

pub fn render(args: &RenderArgs, common: &Common) -> Result<(), CliError> {
    let mut cfg = start(common, "render")?;
    let m1 = pick(args.m1, cfg.render.m1, -1);
    let m2 = pick(args.m2, cfg.render.m2, 1);
    let theta = pick(args.theta, cfg.render.theta, FRAC_PI_2);
    let phi = pick(args.phi, cfg.render.phi, 0.0);
    let grid = resolve_grid(&args.grid, &mut cfg)?;
    let noise = resolve_noise(&args.noise, &mut cfg)?;
    let out = pick(args.out.clone(), cfg.paths.out.clone(), "beam.ppm".into());
    cfg.render.m1 = Some(m1);
    cfg.render.m2 = Some(m2);
    cfg.render.theta = Some(theta);
    cfg.render.phi = Some(phi);
    cfg.paths.out = Some(out.clone());

    let state = VvbState::new(m1, m2, theta, phi)?;
    let img = noise::observe(&state, &grid, &noise, 0)?;
    write_atomic(&out, &to_rgb(&img).to_ppm())?;
    write_atomic(&out.with_extension("toml"), cfg.to_toml().as_bytes())?;
    println!("{}: {}×{} P6", out.display(), grid.resolution(), grid.resolution());
    Ok(())
}

pub fn pca_report(args: &PcaReportArgs, common: &Common) -> Result<(), CliError> {
    let mut cfg = start(common, "pca-report")?;
    let data_path = required(args.data.clone().or(cfg.paths.data.clone()), "data")?;
    let ncomp = pick(args.ncomp, cfg.report.ncomp, 8);
    if ncomp < 3 {
        return Err(CliError::Config("--ncomp must be at least 3".into()));
    }
    let features = pick(args.features.clone(), cfg.svm.features.clone(), "stokes".into());
    let feature_set = parse_features(&features)?;
    let bins = pick(args.bins, cfg.report.bins, pca::DEFAULT_RADII_BINS);
    let out = pick(args.out.clone(), cfg.paths.out.clone(), "vvb-pca".into());
    cfg.paths.data = Some(data_path.clone());
    cfg.paths.out = Some(out.clone());
    cfg.report.ncomp = Some(ncomp);
    cfg.report.bins = Some(bins);
    cfg.svm.features = Some(features);

    let data = load(&data_path)?;
    let model = pca_fit(&data, ncomp, feature_set)?;
    let ratios = model.explained_variance_ratio();
    let mut table = String::from("component,variance,ratio,cumulative\n");
    let mut cumulative = 0.0;
    println!("component  ratio     cumulative");
    for (k, (v, r)) in model.explained_variance().iter().zip(&ratios).enumerate() {
        cumulative += r;
        table.push_str(&format!("{},{v},{r},{cumulative}\n", k + 1));
        println!("{:>9}  {r:.6}  {cumulative:.6}", k + 1);
    }
    let points = reconstruct::sphere_points(&model, &data)?;
    let alignment = if data.label_spec().task().has_angles() {
        Some(reconstruct::calibrate(&model, &data)?)
    } else {
        None
    };
    // the fitted sphere centre, when labels allow one, beats the sample mean
    let radii = pca::radii_stats(&points, alignment.map(|a| a.offset), bins)?;
    let mut summary = format!(
        "images={}\ntop3_share={}\nradius_mean={}\nradius_std={}\nradius_rel_spread={}\n",
        data.len(),
        model.cumulative_share(3),
        radii.mean,
        radii.std,
        radii.relative_spread()
    );
    if let Some(a) = &alignment {
        summary.push_str(&format!("alignment_scale={}\n", a.scale));
    }
    print!("{summary}");

    ensure_dir(&out)?;
    write_atomic(&out.join("explained_variance.csv"), table.as_bytes())?;
    write_atomic(&out.join("radii_hist.csv"), radii.histogram.to_csv().as_bytes())?;
    write_atomic(&out.join("summary.txt"), summary.as_bytes())?;
    Model::Pca {
        pca: model,
        alignment,
    }
    .save(&out.join("pca.vvbm"))?;
    write_resolved(&out, &cfg)
}
