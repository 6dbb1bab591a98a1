use std::fmt::Write as _;
use std::path::Path;

use halc_core::dataset::{
    read_feature_file, synth_clusters, synth_factor_images, write_feature_file, ClusterSpec, FactorSpec, Split,
};
use halc_core::eval::{evaluate, render_table, EvalInputs, MethodTag};
use halc_core::gradcheck::{full_suite, TOLERANCE};
use halc_core::halluc_train::{train_hallucinator, TrainOutputs};
use halc_core::models::checkpoint::{load_embedding, load_hallucinator, save_embedding, save_hallucinator};
use halc_core::models::{EmbeddingNet, HallucinatorModel, HallucinatorVariant};
use halc_core::representation::{accuracy, export_features, train_stage1, train_stage2_distill};
use halc_core::rng::derived;

use crate::config::{RunConfig, SynthKind};
use crate::{Cli, CliError, Command, EvalArgs, ExportArgs, SynthArgs, TrainBackboneArgs, TrainHallucArgs};

// Streams for model initialisation, kept apart from the training streams.
const STAGE1_INIT: u64 = 0x5101;
const STAGE2_INIT: u64 = 0x5102;
const HALLUC_INIT: u64 = 0x4a11;

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.precision.is_some() {
        cfg.precision = cli.precision;
    }
    match cli.command {
        Command::SynthData(args) => {
            apply_synth(&mut cfg, &args);
            if finish_config(&mut cfg, cli.print_config) {
                synth_data(&cfg, &args.out)?;
            }
        }
        Command::TrainBackbone(args) => {
            apply_backbone(&mut cfg, &args);
            if finish_config(&mut cfg, cli.print_config) {
                train_backbone(&cfg, &args)?;
            }
        }
        Command::ExportFeatures(args) => {
            if finish_config(&mut cfg, cli.print_config) {
                export(&args)?;
            }
        }
        Command::TrainHallucinator(args) => {
            apply_halluc(&mut cfg, &args);
            if finish_config(&mut cfg, cli.print_config) {
                train_halluc(&cfg, &args)?;
            }
        }
        Command::Eval(args) => {
            apply_eval(&mut cfg, &args);
            if finish_config(&mut cfg, cli.print_config) {
                eval(&cfg, &args)?;
            }
        }
        Command::Gradcheck => {
            if finish_config(&mut cfg, cli.print_config) {
                gradcheck(&cfg)?;
            }
        }
    }
    Ok(())
}

/// Propagates seed and precision, echoes the effective config and tells the
/// caller whether to go on running.
fn finish_config(cfg: &mut RunConfig, print_only: bool) -> bool {
    cfg.propagate();
    let json = cfg.to_json();
    log::info!("effective config: {json}");
    if print_only {
        println!("{json}");
    }
    !print_only
}

fn apply_synth(cfg: &mut RunConfig, a: &SynthArgs) {
    let s = &mut cfg.synth;
    if let Some(k) = a.kind {
        s.kind = k;
    }
    if let Some(v) = a.classes {
        s.classes = v;
    }
    if let Some(v) = a.per_class {
        s.per_class = v;
    }
    if let Some(v) = a.shape {
        s.shape = v;
    }
    if a.std.is_some() {
        s.std = a.std;
    }
    if let Some(v) = a.rank {
        s.rank = v;
    }
    if let Some(v) = a.loading_scale {
        s.loading_scale = v;
    }
    if a.splits.is_some() {
        s.splits = a.splits;
    }
}

fn apply_backbone(cfg: &mut RunConfig, a: &TrainBackboneArgs) {
    if let Some(v) = a.feature {
        cfg.backbone.feature = v;
    }
    if let Some(v) = a.hidden {
        cfg.backbone.hidden = v;
    }
    let r = &mut cfg.representation;
    if let Some(v) = a.epochs {
        r.epochs = v;
    }
    if let Some(v) = a.batch_size {
        r.batch_size = v;
    }
    if let Some(v) = a.lr {
        r.learning_rate = v;
    }
    if let Some(v) = a.alpha {
        r.alpha = v;
    }
    if let Some(v) = a.beta {
        r.beta = v;
    }
}

fn apply_halluc(cfg: &mut RunConfig, a: &TrainHallucArgs) {
    let h = &mut cfg.hallucinator;
    if a.variant.is_some() {
        h.variant = a.variant;
    }
    if a.noise_dim.is_some() {
        h.noise_dim = a.noise_dim;
    }
    if a.cond_dim.is_some() {
        h.cond_dim = a.cond_dim;
    }
    if a.width.is_some() {
        h.width = a.width;
    }
    let t = &mut cfg.halluc_train;
    if let Some(v) = a.ways {
        t.n_way = v;
    }
    if let Some(v) = a.shots {
        t.k_shot = v;
    }
    if let Some(v) = a.generated {
        t.generated = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.tasks_per_epoch {
        t.tasks_per_epoch = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
}

fn apply_eval(cfg: &mut RunConfig, a: &EvalArgs) {
    let e = &mut cfg.eval;
    if let Some(v) = a.ways {
        e.n_way = v;
    }
    if let Some(v) = a.shots {
        e.k_shot = v;
    }
    if let Some(v) = a.queries {
        e.queries_per_class = v;
    }
    if let Some(v) = a.tasks {
        e.task_count = v;
    }
    if let Some(v) = a.m_test {
        e.m_test = v;
    }
    if let Some(v) = a.finetune_steps {
        e.finetune_steps = v;
    }
}

fn at(path: &Path) -> impl FnOnce(halc_core::Error) -> CliError + '_ {
    move |e| match e {
        halc_core::Error::InvalidConfig(m) => CliError::Usage(m),
        other => CliError::File(path.to_path_buf(), other),
    }
}

fn require<'a>(value: &'a Option<std::path::PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn synth_data(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let s = &cfg.synth;
    let seed = cfg.seed.unwrap_or(0);
    let ds = match s.kind {
        SynthKind::Clusters => synth_clusters(&ClusterSpec {
            num_classes: s.classes,
            examples_per_class: s.per_class,
            feature_shape: s.shape,
            intra_class_std: s.effective_std(),
            seed,
            splits: s.splits,
        })?,
        SynthKind::Factor => synth_factor_images(&FactorSpec {
            num_classes: s.classes,
            examples_per_class: s.per_class,
            image_shape: s.shape,
            rank: s.rank,
            loading_scale: s.loading_scale,
            noise_std: s.effective_std(),
            seed,
            splits: s.splits,
        })?,
    };
    write_feature_file(out, &ds).map_err(at(out))?;
    println!(
        "wrote {} examples of shape {} ({} base / {} val / {} novel classes) to {}",
        ds.len(),
        ds.shape(),
        ds.splits().base.len(),
        ds.splits().val.len(),
        ds.splits().novel.len(),
        out.display()
    );
    Ok(())
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<(), CliError> {
    let mut text = format!("{header}\n");
    for row in rows {
        text.push_str(&row);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| CliError::File(path.to_path_buf(), e.into()))
}

fn train_backbone(cfg: &RunConfig, a: &TrainBackboneArgs) -> Result<(), CliError> {
    let raw = read_feature_file(&a.data).map_err(at(&a.data))?;
    let image = raw.shape().as_array();
    let num_classes = raw.classes(Split::Base).len();
    let seed = cfg.seed.unwrap_or(0);
    let (net, history) = if a.stage == 1 {
        let mut rng = derived(seed, STAGE1_INIT);
        let mut net = EmbeddingNet::new(image, cfg.backbone.feature, cfg.backbone.hidden, num_classes, &mut rng)?;
        let history = train_stage1(&raw, &mut net, &cfg.representation)?;
        (net, history)
    } else {
        let teacher_path = require(&a.teacher, "teacher")?;
        let teacher = load_embedding(teacher_path).map_err(at(teacher_path))?;
        let b = &teacher.backbone;
        let mut rng = derived(seed, STAGE2_INIT);
        let mut student = EmbeddingNet::new(
            b.input_shape(),
            b.feature_shape(),
            b.hidden(),
            teacher.classifier.num_classes(),
            &mut rng,
        )?;
        let history = train_stage2_distill(&raw, &teacher, &mut student, &cfg.representation)?;
        (student, history)
    };
    save_embedding(&net, &a.out).map_err(at(&a.out))?;
    if let Some(log_path) = &a.loss_log {
        let rows = history.iter().enumerate().map(|(i, l)| format!("{},{l}", i + 1));
        write_csv(log_path, "epoch,mean_loss", rows)?;
    }
    let acc = accuracy(&net, &raw, Split::Base)?;
    println!(
        "stage {} done: final loss {:.6}, base accuracy {:.2} %, checkpoint {}",
        a.stage,
        history.last().copied().unwrap_or(f64::NAN),
        100.0 * acc,
        a.out.display()
    );
    Ok(())
}

fn export(a: &ExportArgs) -> Result<(), CliError> {
    let raw = read_feature_file(&a.data).map_err(at(&a.data))?;
    let net = load_embedding(&a.backbone).map_err(at(&a.backbone))?;
    let ds = export_features(&net.backbone, &raw, &a.out).map_err(at(&a.out))?;
    println!("wrote {} features of shape {} to {}", ds.len(), ds.shape(), a.out.display());
    Ok(())
}

fn train_halluc(cfg: &RunConfig, a: &TrainHallucArgs) -> Result<(), CliError> {
    let features = require(&a.features, "features")?;
    let out = require(&a.out, "out")?;
    let ds = read_feature_file(features).map_err(at(features))?;
    let dims = cfg.hallucinator.dims(ds.shape());
    let variant = cfg.hallucinator.variant.unwrap_or(HallucinatorVariant::Tensor);
    let mut rng = derived(cfg.seed.unwrap_or(0), HALLUC_INIT);
    let mut model = HallucinatorModel::new(variant, dims, &mut rng)?;
    let outputs = TrainOutputs {
        checkpoint: Some(out.to_path_buf()),
        loss_log: a.loss_log.clone(),
    };
    let report = train_hallucinator(&ds, &mut model, &cfg.halluc_train, &outputs)?;
    save_hallucinator(&model, out).map_err(at(out))?;
    println!(
        "trained {variant:?} hallucinator for {} epochs: loss {:.6} -> {:.6}, checkpoint {}",
        report.loss_history.len(),
        report.loss_history.first().copied().unwrap_or(f64::NAN),
        report.loss_history.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn parse_variants(spec: &str) -> Result<Vec<MethodTag>, CliError> {
    if spec.trim() == "all" {
        return Ok(MethodTag::ALL.to_vec());
    }
    spec.split(',')
        .map(|s| s.trim().parse::<MethodTag>().map_err(|e| CliError::Usage(e.to_string())))
        .collect()
}

fn eval(cfg: &RunConfig, a: &EvalArgs) -> Result<(), CliError> {
    let variants = parse_variants(&a.variant)?;
    let needs_tfh = variants.iter().any(|v| matches!(v, MethodTag::Tfh | MethodTag::TfhFt));
    let needs_vfh = variants.contains(&MethodTag::Vfh);
    if needs_tfh && a.tfh.is_none() {
        return Err(CliError::Usage("tfh and tfh_ft need --tfh".into()));
    }
    if needs_vfh && a.vfh.is_none() {
        return Err(CliError::Usage("vfh needs --vfh".into()));
    }
    let features = read_feature_file(&a.features).map_err(at(&a.features))?;
    let teacher = match &a.teacher_features {
        Some(p) => Some(read_feature_file(p).map_err(at(p))?),
        None => None,
    };
    let tfh = match &a.tfh {
        Some(p) => Some(load_hallucinator(p).map_err(at(p))?),
        None => None,
    };
    let vfh = match &a.vfh {
        Some(p) => Some(load_hallucinator(p).map_err(at(p))?),
        None => None,
    };
    let inputs = EvalInputs {
        features: &features,
        teacher_features: teacher.as_ref(),
        tfh: tfh.as_ref(),
        vfh: vfh.as_ref(),
    };
    let jobs = a.jobs.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("--jobs: {e}")))?;
    let report = pool.install(|| evaluate(inputs, &variants, &cfg.eval))?;
    print!("{}", render_table(std::slice::from_ref(&report)));
    if let Some(path) = &a.report {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(path, json).map_err(|e| CliError::File(path.clone(), e.into()))?;
    }
    Ok(())
}

fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let results = full_suite(cfg.seed.unwrap_or(0))?;
    let mut failed = String::new();
    for r in &results {
        println!(
            "{:<4} {:<40} max rel error {:.3e} over {} entries",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.entries
        );
        if !r.passed {
            let _ = write!(failed, " {}", r.name);
        }
    }
    if failed.is_empty() {
        println!("all {} checks within {TOLERANCE:e}", results.len());
        Ok(())
    } else {
        Err(CliError::Check(format!("over {TOLERANCE:e}:{failed}")))
    }
}
