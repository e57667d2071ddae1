use crate::config::RunConfig;
use crate::{
    CleanArgs, EvaluateArgs, ExtractArgs, Failure, GenerateArgs, ProbeArgs, SynthDataArgs, TrainArgs, TrainClfArgs,
};
use soundgan::audio::{FeatureConfig, Waveform};
use soundgan::data::{
    self, apply_labels, load_class_counts, ConditionSource, LabelProvider, Manifest, SidecarLabels, Split, SynthSpec,
    TrainingSet, MANIFEST_FILE,
};
use soundgan::eval::{
    conditional_accuracy, generate_images, inception_score, per_class_scores, train_eval_classifier, ClassifierConfig,
    EvalClassifier, LabeledImages, NormalizedGenerator,
};
use soundgan::image::{self, write_png};
use soundgan::train::{self as training, LoadedModels, LossConfig, ModelSpec, RunLayout, Trainer};
use soundgan::Tensor;
use std::fs;
use std::path::{Path, PathBuf};

type CmdResult = Result<(), Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| io_failure(path, e))
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Failure::Usage(format!("unknown split {other:?}; expected train or test"))),
    }
}

fn condition_source(features: &FeatureConfig, dir: &Path) -> ConditionSource {
    if dir.as_os_str().is_empty() {
        ConditionSource::Extract(features.clone())
    } else {
        ConditionSource::Directory(dir.to_path_buf(), features.kind)
    }
}

fn run_dir(out: &Path, run_id: &Option<String>, default: String) -> Result<PathBuf, Failure> {
    let dir = out.join(run_id.clone().unwrap_or(default));
    create_dir(&dir)?;
    Ok(dir)
}

fn load_classifier(path: &Path, m: &Manifest) -> Result<EvalClassifier, Failure> {
    let clf = EvalClassifier::load(path)?;
    if clf.classes != m.classes.names() {
        return Err(Failure::Usage(format!(
            "classifier classes {:?} differ from the manifest's {:?}",
            clf.classes,
            m.classes.names()
        )));
    }
    Ok(clf)
}

pub fn synth_data(a: &SynthDataArgs) -> CmdResult {
    let spec = match (&a.spec, a.two_class) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        (None, Some(n)) => SynthSpec::two_class(n),
        (None, None) => SynthSpec::default(),
    };
    spec.validate()?;
    let m = data::synthesize_dataset(&spec, a.seed, &a.out)?;
    let probes = data::write_probe_sounds(&spec, a.seed, a.probe_sounds, a.out.join("probe"))?;
    println!("manifest: {}", a.out.join(MANIFEST_FILE).display());
    for (name, count) in m.classes.names().iter().zip(load_class_counts(&m)?) {
        println!("  {name:<10} {count}");
    }
    println!("examples: {} ({} test)", m.len(), m.split(Split::Test).len());
    println!("probe sounds: {}", probes.len());
    Ok(())
}

/// Copy of `m` whose paths resolve the same from `new_root`.
fn rebase(mut m: Manifest, new_root: &Path) -> Manifest {
    let same = match (fs::canonicalize(&m.root), fs::canonicalize(new_root)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if !same {
        let old = fs::canonicalize(&m.root).unwrap_or_else(|_| m.root.clone());
        for ex in &mut m.examples {
            ex.audio_path = old.join(&ex.audio_path);
            ex.image_path = old.join(&ex.image_path);
        }
    }
    m.root = new_root.to_path_buf();
    m
}

pub fn clean(a: &CleanArgs) -> CmdResult {
    let mut m = Manifest::load(&a.manifest)?;
    let sound = a.sound_labels.as_ref().map(|p| SidecarLabels::load(p, &m.classes)).transpose()?;
    let image = a.image_labels.as_ref().map(|p| SidecarLabels::load(p, &m.classes)).transpose()?;
    apply_labels(
        &mut m,
        sound.as_ref().map(|s| s as &dyn LabelProvider),
        image.as_ref().map(|s| s as &dyn LabelProvider),
    );
    let (kept, r) = data::clean(&m);
    let parent = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(parent)?;
    rebase(kept, parent).save(&a.out)?;
    if r.undefined {
        println!("kept 0 of 0; discard fraction undefined for an empty manifest");
    } else {
        println!(
            "kept {} of {}, discarded {} ({:.1}%)",
            r.kept,
            r.total,
            r.discarded,
            100.0 * r.discard_fraction
        );
    }
    Ok(())
}

pub fn extract_features(a: &ExtractArgs) -> CmdResult {
    let m = Manifest::load(&a.manifest)?;
    let cfg = FeatureConfig {
        kind: a.kind,
        ..Default::default()
    };
    let failures = data::write_conditions(&m, &cfg, &a.out)?;
    println!("wrote {} of {} {} conditions to {}", m.len() - failures.len(), m.len(), a.kind, a.out.display());
    if failures.is_empty() {
        return Ok(());
    }
    for (id, e) in &failures {
        eprintln!("  {id}: {e}");
    }
    Err(Failure::Runtime(format!("{} examples could not be featurized", failures.len())))
}

fn merged_config(a: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &a.manifest {
        cfg.data.manifest = p.clone();
    }
    if let Some(p) = &a.conditions {
        cfg.data.conditions = p.clone();
    }
    if let Some(name) = &a.loss_preset {
        cfg.loss = LossConfig {
            gp_lambda: cfg.loss.gp_lambda,
            aux_weight: cfg.loss.aux_weight,
            ..LossConfig::preset(name)?
        };
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = a.iters {
        cfg.train.max_iters = n;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(o) = &a.out {
        cfg.output.dir = o.clone();
    }
    if let Some(id) = &a.run_id {
        cfg.output.run_id = id.clone();
    }
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let mut cfg = merged_config(a)?;
    if a.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let mut problems = cfg.problems();
    if let Some(p) = a.clf.as_ref().filter(|p| !p.is_file()) {
        problems.push(format!("classifier {} does not exist", p.display()));
    }
    if !problems.is_empty() {
        return Err(Failure::Usage(problems.join("; ")));
    }
    let manifest = Manifest::load(&cfg.data.manifest)?;
    let clf = a.clf.as_ref().map(|p| load_classifier(p, &manifest)).transpose()?;
    let source = condition_source(&cfg.features, &cfg.data.conditions);
    let data = TrainingSet::from_manifest(&manifest.split(Split::Train), &source)?;
    let shape = data.image_shape().to_vec();
    cfg.generator.image_channels = shape[0];
    cfg.generator.image_size = shape[1];
    cfg.discriminator.image_channels = shape[0];
    cfg.discriminator.image_size = shape[1];
    let dir = cfg.run_dir();
    let spec = ModelSpec {
        generator: cfg.generator.clone(),
        discriminator: cfg.discriminator.clone(),
        features: cfg.features.clone(),
        classes: manifest.classes.names().to_vec(),
    };
    let mut trainer = Trainer::new(spec, cfg.train.clone(), cfg.loss.clone(), data)?;
    cfg.generator = trainer.spec.generator.clone();
    cfg.discriminator = trainer.spec.discriminator.clone();
    let layout = RunLayout::new(&dir)?;
    write_text(&dir.join("config.txt"), &cfg.to_text())?;
    training::reset_metrics(&layout)?;
    println!("run: {}", dir.display());
    let every = cfg.output.log_every;
    let total = trainer.total_iterations();
    training::run(&mut trainer, &layout, |m| {
        if every > 0 && (m.iter + 1) % every == 0 {
            eprintln!("iter {}/{total}  d {:.4}  g {:.4}", m.iter + 1, m.d_loss, m.g_loss);
        }
    })?;
    let mut report = format!("iterations: {}\n", trainer.iteration());
    if let Some(clf) = &clf {
        let test = TrainingSet::from_manifest(&manifest.split(Split::Test), &source)?;
        let sampler = NormalizedGenerator::from(&trainer);
        report.push_str(&score_lines(&sampler, &test, clf, cfg.output.eval_folds, cfg.train.seed)?);
    }
    write_text(&dir.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn score_lines(
    sampler: &NormalizedGenerator,
    set: &TrainingSet,
    clf: &EvalClassifier,
    folds: usize,
    seed: u64,
) -> Result<String, Failure> {
    let images = generate_images(sampler, &set.conditions, seed)?;
    let score = inception_score(&images, clf, folds, seed)?;
    let acc = conditional_accuracy(sampler, &set.conditions, &set.sound_labels, clf, seed)?;
    let per_class = per_class_scores(&clf.posteriors(&images)?, &set.sound_labels, clf.classes.len());
    Ok(format!(
        "conditional_accuracy: {acc}\ninception_score: {}\nper_class_score: {}\n",
        score.to_record(),
        serde_json::to_string(&per_class).expect("serializable")
    ))
}

pub fn generate(a: &GenerateArgs) -> CmdResult {
    let split = parse_split(&a.split)?;
    let models = LoadedModels::load(&a.ckpt)?;
    let m = Manifest::load(&a.manifest)?.split(split);
    let set = TrainingSet::from_manifest(&m, &ConditionSource::Extract(models.spec.features.clone()))?;
    let images = generate_images(&NormalizedGenerator::from(&models), &set.conditions, a.seed)?;
    let dir = run_dir(&a.out, &a.run_id, format!("generate-s{}", a.seed))?;
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("grids"))?;
    for (i, id) in set.ids.iter().enumerate() {
        write_png(dir.join("images").join(format!("{id}.png")), &images.index0(i))?;
    }
    let shown: Vec<Tensor> = (0..set.len().min(64)).map(|i| images.index0(i)).collect();
    let rows: Vec<Vec<Tensor>> = shown.chunks(8).map(<[Tensor]>::to_vec).collect();
    write_png(
        dir.join("grids").join(format!("grid_generate_{}.png", models.iter)),
        &image::grid(&rows)?,
    )?;
    println!("wrote {} images to {}", set.len(), dir.display());
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> CmdResult {
    let split = parse_split(&a.split)?;
    let m = Manifest::load(&a.manifest)?;
    let clf = load_classifier(&a.clf, &m)?;
    let report = match &a.ckpt {
        None => {
            let real = LabeledImages::from_manifest(&m, split)?;
            let score = inception_score(&real.images, &clf, a.folds, a.seed)?;
            format!("source: real {}\ninception_score: {}\n", a.split, score.to_record())
        }
        Some(ckpt) => {
            let models = LoadedModels::load(ckpt)?;
            let set = TrainingSet::from_manifest(&m.split(split), &ConditionSource::Extract(models.spec.features.clone()))?;
            let sampler = NormalizedGenerator::from(&models);
            format!(
                "source: {} at iteration {}\n{}",
                ckpt.display(),
                models.iter,
                score_lines(&sampler, &set, &clf, a.folds, a.seed)?
            )
        }
    };
    print!("{report}");
    if let Some(out) = &a.out {
        let dir = run_dir(out, &a.run_id, format!("evaluate-s{}", a.seed))?;
        write_text(&dir.join("report.txt"), &report)?;
    }
    Ok(())
}

fn wav_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| io_failure(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Failure::Usage("no WAV files found for the volume probe".into()));
    }
    Ok(out)
}

pub fn volume_probe(a: &ProbeArgs) -> CmdResult {
    let models = LoadedModels::load(&a.ckpt)?;
    if a.background.len() != models.spec.generator.image_channels {
        return Err(Failure::Usage(format!(
            "background has {} channels, images have {}",
            a.background.len(),
            models.spec.generator.image_channels
        )));
    }
    let files = wav_files(&a.audio)?;
    let sounds = files
        .iter()
        .map(|f| Waveform::read_wav(f).map_err(|e| Failure::Runtime(format!("{}: {e}", f.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    let r = soundgan::eval::volume_probe(&models, &sounds, &a.factors, &a.background, a.seed)?;
    let dir = run_dir(&a.out, &a.run_id, format!("probe-s{}", a.seed))?;
    create_dir(&dir.join("grids"))?;
    write_png(dir.join("grids").join(format!("grid_probe_{}.png", models.iter)), &r.grid)?;
    let record = serde_json::to_string(&r).expect("serializable");
    write_text(&dir.join("report.txt"), &format!("{record}\n"))?;
    println!("sounds: {}", sounds.len());
    for ((f, med), clip) in r.factors.iter().zip(&r.median_area).zip(&r.max_clipped) {
        println!("  factor {f:<4} median area {med:>7.1}  max clipped {clip:.4}");
    }
    println!("non-decreasing: {}", if r.is_non_decreasing() { "yes" } else { "no" });
    Ok(())
}

pub fn train_clf(a: &TrainClfArgs) -> CmdResult {
    let m = Manifest::load(&a.manifest)?;
    let train = LabeledImages::from_manifest(&m, Split::Train)?;
    let held_out = LabeledImages::from_manifest(&m, Split::Test)?;
    let defaults = ClassifierConfig::default();
    let cfg = ClassifierConfig {
        seed: a.seed,
        epochs: a.epochs.unwrap_or(defaults.epochs),
        ..defaults
    };
    let clf = train_eval_classifier(&train, &held_out, m.classes.names(), &cfg)?;
    let dir = run_dir(&a.out, &a.run_id, format!("clf-s{}", a.seed))?;
    let path = dir.join("classifier.sgck");
    clf.save(&path)?;
    let report = format!(
        "held_out_accuracy: {}\nhash: {}\nclassifier: {}\n",
        clf.held_out_accuracy,
        clf.hash,
        path.display()
    );
    write_text(&dir.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}
