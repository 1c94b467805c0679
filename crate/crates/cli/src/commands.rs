use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use smdm::config::RunConfig;
use smdm::diffusion::{make_schedule, p_sample_loop, prepare_examples, SamplerConfig, Trainer};
use smdm::eval::{condition_fidelity, diversity, ees, frechet_distance, FeatureStats, Featurizer};
use smdm::io::{encode_checkpoint, encode_dataset, read_checkpoint, read_dataset, write_file, Checkpoint};
use smdm::keyframes::{build_frame_features, select_from_priority, vw_priority};
use smdm::model::DenoiserParams;
use smdm::motion::{make_dataset, Dataset, MotionSequence, SkeletonLayout, Split};
use smdm::parallel::{par_map, worker_count};
use smdm::rng::{stream_rng, Stream};

use crate::error::{CliError, Result};
use crate::metrics::{self, MetricRow};
use crate::svg::{self, Series};
use crate::Command;

pub fn dispatch(config: &RunConfig, command: Command) -> Result<()> {
    match command {
        Command::GenData { .. } => gen_data(config),
        Command::Train { run_id, .. } => train(config, &run_id),
        Command::Sample { checkpoint, class, count, dump_masks, .. } => sample(config, checkpoint, class, count, dump_masks),
        Command::Eval { samples, run_id, .. } => evaluate(config, samples, &run_id),
        Command::Keyframes { motion, index, rate, .. } => keyframes(config, &motion, index, rate),
        Command::Plot { inputs, metric, .. } => plot(config, inputs, metric.as_deref()),
    }
}

fn metrics_path(config: &RunConfig) -> PathBuf {
    config.out_dir.join("metrics.csv")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(write_file(path, text.as_bytes())?)
}

fn row(config: &RunConfig, run_id: String, metric: &str, value: f64) -> MetricRow {
    MetricRow { run_id, metric: metric.into(), value, seed: config.seed, config_hash: config.hash() }
}

fn gen_data(config: &RunConfig) -> Result<()> {
    let d = &config.data;
    let ds = make_dataset(d.n_per_class, d.n_frames, &SkeletonLayout::default(), &d.gen_options(), config.seed)?;
    let path = config.dataset_path();
    write_file(&path, &encode_dataset(&ds))?;
    let n_train = ds.train().count();
    println!("wrote {} ({} sequences, {} train, {} val)", path.display(), ds.sequences.len(), n_train, ds.sequences.len() - n_train);
    Ok(())
}

fn checkpoint_of(config: &RunConfig, ds: &Dataset, params: &DenoiserParams, n_frames: usize, step: usize) -> Checkpoint {
    Checkpoint {
        params: params.clone(),
        n_frames,
        fps: ds.fps,
        layout: ds.layout.clone(),
        classes: ds.classes.clone(),
        stats: ds.stats.clone(),
        schedule: config.diffusion.schedule,
        diffusion_steps: config.diffusion.steps,
        train_step: step,
    }
}

fn train(config: &RunConfig, run_id: &str) -> Result<()> {
    let ds = read_dataset(&config.dataset_path())?;
    if config.model.n_classes != ds.n_classes() {
        return Err(CliError::Invalid(format!(
            "model.n_classes = {} but the dataset has {} classes",
            config.model.n_classes,
            ds.n_classes()
        )));
    }
    let n_frames = ds.sequences.first().map_or(0, MotionSequence::n_frames);
    let examples = prepare_examples(&ds)?;
    let params = DenoiserParams::init(&config.model, ds.dim(), config.seed)?;
    let sched = make_schedule(config.diffusion.steps, config.diffusion.schedule)?;
    let threads = worker_count();
    let mut trainer = Trainer::new(params, examples, sched, config.train.clone(), config.seed, threads)?;
    write_text(&config.out_dir.join("config.toml"), &config.to_toml())?;

    let loss_path = config.out_dir.join("loss.csv");
    if loss_path.exists() {
        std::fs::remove_file(&loss_path).map_err(|e| CliError::io(&loss_path, e))?;
    }
    let start = Instant::now();
    let every = config.train.checkpoint_every;
    let mut rows = Vec::new();
    for _ in 0..config.train.steps {
        let report = trainer.step()?;
        rows.push(row(config, format!("{run_id}@{}", report.step), "loss", report.loss));
        rows.push(row(config, format!("{run_id}@{}", report.step), "keyframes_mean", report.keyframes_mean));
        if report.step % 100 == 0 || report.step == config.train.steps {
            eprintln!(
                "step {:>6}  loss {:.5}  keyframes {:.1}  {:.1}s",
                report.step,
                report.loss,
                report.keyframes_mean,
                start.elapsed().as_secs_f64()
            );
        }
        if every > 0 && report.step % every == 0 {
            let path = config.out_dir.join("checkpoints").join(format!("step_{:06}.smdm", report.step));
            write_file(&path, &encode_checkpoint(&checkpoint_of(config, &ds, &trainer.params, n_frames, report.step)))?;
            metrics::append(&loss_path, &std::mem::take(&mut rows))?;
        }
    }
    metrics::append(&loss_path, &rows)?;
    let path = config.out_dir.join("model.smdm");
    write_file(&path, &encode_checkpoint(&checkpoint_of(config, &ds, &trainer.params, n_frames, trainer.steps_taken())))?;
    println!("wrote {} after {} steps", path.display(), trainer.steps_taken());
    Ok(())
}

#[derive(Serialize)]
struct MaskDump {
    sample: usize,
    class: String,
    /// Keyframe indices per denoising step, from t = T down to t = 1.
    steps: Vec<StepMask>,
}

#[derive(Serialize)]
struct StepMask {
    t: usize,
    keyframes: Vec<usize>,
}

/// Config fields that disagree with what the checkpoint was trained with.
fn incompatible_fields(config: &RunConfig, ck: &Checkpoint) -> Vec<String> {
    let mut out = Vec::new();
    let as_map = |m: &smdm::model::DenoiserConfig| match serde_json::to_value(m).expect("config serializes") {
        serde_json::Value::Object(map) => map,
        _ => unreachable!("struct serializes to an object"),
    };
    let (ours, theirs) = (as_map(&config.model), as_map(&ck.params.config));
    // guidance is a sampling-time choice
    for (key, value) in ours.iter().filter(|(k, _)| *k != "guidance_scale") {
        if theirs.get(key) != Some(value) {
            out.push(format!("model.{key}"));
        }
    }
    if config.diffusion.steps != ck.diffusion_steps {
        out.push("diffusion.steps".into());
    }
    if config.diffusion.schedule != ck.schedule {
        out.push("diffusion.schedule".into());
    }
    out
}

fn sample(
    config: &RunConfig,
    checkpoint: Option<PathBuf>,
    class: Option<String>,
    count: Option<usize>,
    dump_masks: bool,
) -> Result<()> {
    let path = checkpoint.unwrap_or_else(|| config.out_dir.join("model.smdm"));
    let ck = read_checkpoint(&path)?;
    let mismatched = incompatible_fields(config, &ck);
    if !mismatched.is_empty() {
        return Err(CliError::Invalid(format!(
            "{} was trained with a different config; mismatched fields: {}",
            path.display(),
            mismatched.join(", ")
        )));
    }
    let count = count.unwrap_or(config.sample.count);
    if count == 0 {
        return Err(CliError::Invalid("--count must be at least 1".into()));
    }
    let fixed_class = match class.or_else(|| config.sample.class.clone()) {
        Some(name) => Some(
            ck.classes
                .iter()
                .position(|c| *c == name)
                .ok_or_else(|| CliError::Invalid(format!("unknown class `{name}`; valid classes: {}", ck.classes.join(", "))))?,
        ),
        None => None,
    };
    let sampler = SamplerConfig {
        gamma: config.sample.gamma,
        reduction_rate: config.model.reduction_rate,
        guidance_scale: config.model.guidance_scale,
        clamp: config.sample.clamp_x0.then_some(config.sample.clamp),
    };
    let sched = make_schedule(ck.diffusion_steps, ck.schedule)?;
    let jobs: Vec<usize> = (0..count).collect();
    let start = Instant::now();
    let results = par_map(&jobs, worker_count(), |_, &i| {
        let class = fixed_class.unwrap_or(i % ck.classes.len());
        let mut rng = stream_rng(config.seed, Stream::Sample, i as u64);
        let mut masks = Vec::new();
        let x = p_sample_loop(&ck.params, &sched, Some(class), ck.n_frames, &sampler, &mut rng, |t, m| {
            if dump_masks {
                masks.push(StepMask { t, keyframes: m.indices() });
            }
        })?;
        let seq = MotionSequence::new(ck.stats.denormalize(&x), ck.fps, class)?.with_name(format!("sample_{i:03}"));
        Ok::<_, CliError>((seq, MaskDump { sample: i, class: ck.classes[class].clone(), steps: masks }))
    });
    let (sequences, dumps): (Vec<_>, Vec<_>) = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let out = Dataset {
        layout: ck.layout.clone(),
        fps: ck.fps,
        classes: ck.classes.clone(),
        stats: ck.stats.clone(),
        splits: vec![Split::Val; sequences.len()],
        sequences,
    };
    let samples_path = config.out_dir.join("samples.smdm");
    write_file(&samples_path, &encode_dataset(&out))?;
    if dump_masks {
        let json = serde_json::to_string_pretty(&dumps).expect("mask dump serializes");
        write_text(&config.out_dir.join("masks.json"), &json)?;
    }
    println!("wrote {} ({count} samples, {:.1}s)", samples_path.display(), start.elapsed().as_secs_f64());
    Ok(())
}

fn evaluate(config: &RunConfig, samples: Option<PathBuf>, run_id: &str) -> Result<()> {
    let reference = read_dataset(&config.dataset_path())?;
    let samples = read_dataset(&samples.unwrap_or_else(|| config.out_dir.join("samples.smdm")))?;
    if samples.dim() != reference.dim() {
        return Err(CliError::Invalid(format!("samples have {} channels, dataset has {}", samples.dim(), reference.dim())));
    }
    let featurizer = Featurizer::new(Some(reference.stats.clone()));
    let fit = |seqs: &[MotionSequence]| {
        let feats: Vec<Vec<f64>> = seqs.iter().map(|s| featurizer.features(s)).collect();
        FeatureStats::fit(&feats)
    };
    let fd = frechet_distance(&fit(&samples.sequences)?, &fit(&reference.sequences)?)?;
    let sample_refs: Vec<&MotionSequence> = samples.sequences.iter().collect();
    let ref_refs: Vec<&MotionSequence> = reference.sequences.iter().collect();
    let pairs = sample_refs.len().max(2);
    let div = diversity(&sample_refs, pairs, &featurizer, &mut stream_rng(config.seed, Stream::Eval, 0))?;
    let ref_div = diversity(&ref_refs, pairs, &featurizer, &mut stream_rng(config.seed, Stream::Eval, 1))?;
    let fidelity = condition_fidelity(&sample_refs, &ref_refs, reference.n_classes(), &featurizer)?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let speed = mean(samples.sequences.iter().map(|s| ees(s, &samples.layout)).collect());
    let ref_speed = mean(reference.sequences.iter().map(|s| ees(s, &reference.layout)).collect());
    let values = [
        ("fd", fd),
        ("diversity", div),
        ("diversity_ref", ref_div),
        ("fidelity", fidelity),
        ("ees", speed),
        ("ees_ref", ref_speed),
    ];
    if let Some((name, _)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(CliError::Numeric(format!("metric `{name}` is not finite")));
    }
    let rows: Vec<MetricRow> = values.iter().map(|&(m, v)| row(config, run_id.to_string(), m, v)).collect();
    metrics::append(&metrics_path(config), &rows)?;
    let summary: BTreeMap<&str, f64> = values.into_iter().collect();
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

#[derive(Serialize)]
struct KeyframeReport {
    name: Option<String>,
    class: String,
    n_frames: usize,
    rate: f64,
    keyframes: Vec<usize>,
    /// Removal order of interior frames, least important first.
    order: Vec<usize>,
    areas: Vec<f64>,
}

fn keyframes(config: &RunConfig, motion: &Path, index: usize, rate: Option<f64>) -> Result<()> {
    let ds = read_dataset(motion)?;
    let seq = ds.sequences.get(index).ok_or_else(|| {
        CliError::Invalid(format!("--index {index} out of range for {} sequences", ds.sequences.len()))
    })?;
    let rate = rate.unwrap_or(config.model.reduction_rate);
    let normalized = MotionSequence::new(ds.stats.normalize(seq.frames()), seq.fps, seq.class_id)?;
    let priority = vw_priority(&build_frame_features(&normalized))?;
    let mask = select_from_priority(&priority, rate)?;
    let class = ds.classes.get(seq.class_id).cloned().unwrap_or_else(|| seq.class_id.to_string());
    let report = KeyframeReport {
        name: seq.name.clone(),
        class,
        n_frames: seq.n_frames(),
        rate,
        keyframes: mask.indices(),
        order: priority.order.clone(),
        areas: priority.areas.clone(),
    };
    write_text(&config.out_dir.join("keyframes.json"), &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    let frames = normalized.frames();
    let channels: Vec<Vec<f64>> =
        (0..frames.shape()[1]).map(|c| (0..frames.shape()[0]).map(|n| frames.get(n, c)).collect()).collect();
    let title = format!("{} keyframes of {} frames", report.keyframes.len(), report.n_frames);
    write_text(&config.out_dir.join("keyframes.svg"), &svg::keyframe_chart(&title, &channels, &report.keyframes))?;
    println!("{}", report.keyframes.iter().map(usize::to_string).collect::<Vec<_>>().join(" "));
    Ok(())
}

fn plot(config: &RunConfig, inputs: Vec<PathBuf>, only: Option<&str>) -> Result<()> {
    let inputs = if inputs.is_empty() {
        let found: Vec<PathBuf> =
            [config.out_dir.join("loss.csv"), metrics_path(config)].into_iter().filter(|p| p.is_file()).collect();
        if found.is_empty() {
            return Err(CliError::Invalid(format!("no loss.csv or metrics.csv in {}", config.out_dir.display())));
        }
        found
    } else {
        inputs
    };
    // metric -> series -> points, in first-seen order within each series
    let mut charts: BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for path in &inputs {
        for r in metrics::read(path)? {
            if only.is_some_and(|m| m != r.metric) {
                continue;
            }
            let (series, x) = r.series();
            let points = charts.entry(r.metric.clone()).or_default().entry(series.to_string()).or_default();
            let x = x.unwrap_or(points.len() as f64);
            points.push((x, r.value));
        }
    }
    if charts.is_empty() {
        return Err(CliError::Invalid("no matching metric rows to plot".into()));
    }
    for (metric, series) in charts {
        let series: Vec<Series> = series
            .into_iter()
            .map(|(name, mut points)| {
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series { name, points }
            })
            .collect();
        let path = config.out_dir.join("plots").join(format!("{}.svg", sanitize(&metric)));
        write_text(&path, &svg::line_chart(&metric, "x", &metric, &series))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}
