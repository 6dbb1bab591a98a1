//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use halc_core::dataset::{
    sample_episode, synth_clusters, synth_factor_images, ClusterSpec, EpisodeSpec, FactorSpec, FeatureDataset,
    FeatureShape, Split, SplitCounts,
};
use halc_core::eval::{
    classify_episode, evaluate, finetune_on_support, render_table, Augmentation, EvalConfig, EvalInputs, MethodTag,
    PrototypeCopies,
};
use halc_core::gradcheck::full_suite;
use halc_core::halluc_train::{episode_loss_value, train_hallucinator, HallucTrainConfig, TrainOutputs};
use halc_core::models::{EmbeddingNet, HallucinatorDims, HallucinatorModel, Layer, NoiseSampler};
use halc_core::representation::{
    base_label_map, batch, extract_features, stage1_loss, stage2_loss, train_stage1, train_stage2_distill, ReprConfig,
};
use halc_core::rng::{derive_seed, derived, seeded};
use halc_core::{Tape, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let results = full_suite(7).map_err(err)?;
    let elapsed = start.elapsed();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    ensure(failed.is_empty(), || format!("failed checks: {failed:?}"))?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("{} checks, worst rel error {worst:.2e}, {elapsed:.1?}", results.len()))
}

/// Per-sample output shapes of the non-activation layers, with the input
/// shape first and consecutive repeats collapsed.
fn chain(input: Vec<usize>, outputs: &[(Layer, Vec<usize>)]) -> Vec<Vec<usize>> {
    let mut chain = vec![input];
    for (layer, shape) in outputs {
        if !matches!(layer, Layer::Relu | Layer::Sigmoid) && chain.last() != Some(shape) {
            chain.push(shape.clone());
        }
    }
    chain
}

fn criterion_2() -> Outcome {
    let model = HallucinatorModel::tensor(HallucinatorDims::reference(), &mut seeded(2)).map_err(err)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let vars = bound.vars();
    let n_cond = model.conditioner().params().len();

    let proto = tape.constant(Tensor::full(&[1, 512, 7, 7], 0.5));
    let mut outs = Vec::new();
    let cond = model
        .conditioner()
        .forward_traced(&mut tape, &vars[..n_cond], proto, |layer, v| outs.push((layer.clone(), v)))
        .map_err(err)?;
    let outs: Vec<(Layer, Vec<usize>)> = outs.into_iter().map(|(l, v)| (l, tape.shape(v)[1..].to_vec())).collect();
    let cond_chain = chain(vec![512, 7, 7], &outs);
    let expected = vec![vec![512, 7, 7], vec![256, 5, 5], vec![6400], vec![1024]];
    ensure(cond_chain == expected, || format!("conditioner chain {cond_chain:?}"))?;

    let noise = tape.constant(NoiseSampler::new(1024, 3).sample(1));
    let mut outs = Vec::new();
    bound
        .generate_traced(&mut tape, cond, noise, 1, |layer, v| outs.push((layer.clone(), v)))
        .map_err(err)?;
    let outs: Vec<(Layer, Vec<usize>)> = outs.into_iter().map(|(l, v)| (l, tape.shape(v)[1..].to_vec())).collect();
    let gen_chain = chain(vec![2048], &outs)[1..].to_vec();
    let expected = vec![vec![2048, 1, 1], vec![512, 3, 3], vec![512, 5, 5], vec![512, 7, 7]];
    ensure(gen_chain == expected, || format!("generator chain {gen_chain:?}"))?;
    Ok("conditioner 512×7×7 → 256×5×5 → 6400 → 1024; generator 2048×1×1 → 512×3×3 → 512×5×5 → 512×7×7".into())
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let ds = synth_clusters(&ClusterSpec {
        num_classes: 20,
        examples_per_class: 60,
        feature_shape: FeatureShape::new(16, 7, 7),
        intra_class_std: 0.05,
        seed: 1,
        splits: Some(SplitCounts {
            base: 20,
            val: 0,
            novel: 0,
        }),
    })
    .map_err(err)?;
    let mut model =
        HallucinatorModel::tensor(HallucinatorDims::proportional(ds.shape()), &mut seeded(1)).map_err(err)?;
    let cfg = HallucTrainConfig {
        epochs: 5,
        learning_rate: 1e-4,
        seed: 1,
        ..Default::default()
    };
    let report = train_hallucinator(&ds, &mut model, &cfg, &TrainOutputs::default()).map_err(err)?;
    let elapsed = start.elapsed();
    let h = &report.loss_history;
    let ratio = h[4] / h[0];
    ensure(ratio < 0.5, || format!("epoch-5/epoch-1 loss ratio {ratio:.3} ({h:?})"))?;
    ensure(elapsed < Duration::from_secs(600), || format!("took {elapsed:?}"))?;
    Ok(format!("loss {:.3} → {:.3}, ratio {ratio:.3}, {elapsed:.1?}", h[0], h[4]))
}

fn small_clusters(seed: u64) -> Result<FeatureDataset, String> {
    synth_clusters(&ClusterSpec {
        num_classes: 30,
        examples_per_class: 25,
        feature_shape: FeatureShape::new(6, 3, 3),
        intra_class_std: 0.2,
        seed,
        splits: None,
    })
    .map_err(err)
}

/// Prototypical classifier written from scratch: pool by hand, average per
/// class, squared Euclidean distance, first minimum wins.
fn brute_force(support: &[Vec<&Tensor>], queries: &[&Tensor]) -> Vec<usize> {
    let pool = |t: &Tensor| -> Vec<f64> {
        let [c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2]];
        (0..c)
            .map(|ch| t.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
            .collect()
    };
    let protos: Vec<Vec<f64>> = support
        .iter()
        .map(|class| {
            let pooled: Vec<Vec<f64>> = class.iter().map(|t| pool(t)).collect();
            (0..pooled[0].len())
                .map(|i| pooled.iter().map(|v| v[i]).sum::<f64>() / pooled.len() as f64)
                .collect()
        })
        .collect();
    queries
        .iter()
        .map(|q| {
            let v = pool(q);
            let mut best = (0, f64::INFINITY);
            for (j, p) in protos.iter().enumerate() {
                let d: f64 = p.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let ds = small_clusters(4)?;
    let mut checked = 0;
    for t in 0..100u64 {
        let spec = EpisodeSpec {
            n_way: 5,
            k_shot: 1 + (t as usize % 5),
            queries_per_class: 10,
            generated_count: 0,
            seed: t,
        };
        let ep = sample_episode(&ds, Split::Base, &spec, &mut derived(40, t)).map_err(err)?;
        let support = ep.support_features(&ds);
        let queries: Vec<&Tensor> = ep.query_features(&ds).into_iter().flatten().collect();
        let ours = classify_episode(&support, &queries, None).map_err(err)?;
        let oracle = brute_force(&support, &queries);
        ensure(ours == oracle, || format!("episode {t} differs"))?;
        checked += ours.len();
    }
    Ok(format!("100 episodes, {checked} predictions identical"))
}

fn criterion_5() -> Outcome {
    let ds = small_clusters(5)?;
    for t in 0..100u64 {
        let spec = EpisodeSpec {
            n_way: 5,
            k_shot: if t % 2 == 0 { 1 } else { 5 },
            queries_per_class: 10,
            generated_count: 50,
            seed: t,
        };
        let ep = sample_episode(&ds, Split::Base, &spec, &mut derived(50, t)).map_err(err)?;
        let support = ep.support_features(&ds);
        let queries: Vec<&Tensor> = ep.query_features(&ds).into_iter().flatten().collect();
        let plain = classify_episode(&support, &queries, None).map_err(err)?;
        let augment = Augmentation {
            generator: &PrototypeCopies,
            count: 50,
            noise_seed: t,
        };
        let copied = classify_episode(&support, &queries, Some(augment)).map_err(err)?;
        ensure(plain == copied, || format!("episode {t} differs"))?;
    }
    Ok("100 episodes (1- and 5-shot, M = 50), predictions identical".into())
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let raw = synth_factor_images(&FactorSpec::desk(3)).map_err(err)?;
    let feature = FeatureShape::new(16, 4, 4);
    let classes = raw.classes(Split::Base).len();
    let repr = ReprConfig {
        epochs: 15,
        seed: 1,
        ..Default::default()
    };
    let mut teacher = EmbeddingNet::new([3, 16, 16], feature, 32, classes, &mut seeded(10)).map_err(err)?;
    train_stage1(&raw, &mut teacher, &repr).map_err(err)?;
    let mut student = EmbeddingNet::new([3, 16, 16], feature, 32, classes, &mut seeded(11)).map_err(err)?;
    train_stage2_distill(&raw, &teacher, &mut student, &repr).map_err(err)?;
    let teacher_features = extract_features(&teacher.backbone, &raw).map_err(err)?;
    let student_features = extract_features(&student.backbone, &raw).map_err(err)?;

    let mut tfh = HallucinatorModel::tensor(HallucinatorDims::proportional(feature), &mut seeded(12)).map_err(err)?;
    let halluc = HallucTrainConfig {
        epochs: 20,
        learning_rate: 3e-3,
        seed: 2,
        ..Default::default()
    };
    train_hallucinator(&student_features, &mut tfh, &halluc, &TrainOutputs::default()).map_err(err)?;

    let cfg = EvalConfig {
        seed: 5,
        ..Default::default()
    };
    let inputs = EvalInputs {
        features: &student_features,
        teacher_features: Some(&teacher_features),
        tfh: Some(&tfh),
        vfh: None,
    };
    let report = evaluate(inputs, &[MethodTag::Baseline, MethodTag::BaselineKd, MethodTag::Tfh], &cfg).map_err(err)?;
    for line in render_table(std::slice::from_ref(&report)).lines() {
        println!("    {line}");
    }
    let acc = |tag| report.result(tag).map(|r| r.mean_accuracy).unwrap_or(f64::NAN);
    let (base, kd, tfh_acc) = (acc(MethodTag::Baseline), acc(MethodTag::BaselineKd), acc(MethodTag::Tfh));
    ensure(report.task_count == 600 && report.k_shot == 1 && report.n_way == 5, || {
        "wrong protocol".into()
    })?;
    ensure(tfh_acc >= base - 0.5, || format!("TFH {tfh_acc:.2} < Baseline {base:.2} − 0.5"))?;
    ensure(kd >= base - 0.5, || format!("Baseline-KD {kd:.2} < Baseline {base:.2} − 0.5"))?;
    Ok(format!(
        "Baseline {base:.2}, Baseline-KD {kd:.2}, TFH {tfh_acc:.2} over 600 paired tasks, {:.1?}",
        start.elapsed()
    ))
}

fn criterion_7() -> Outcome {
    let ds = synth_clusters(&ClusterSpec {
        num_classes: 40,
        examples_per_class: 30,
        feature_shape: FeatureShape::new(8, 5, 5),
        intra_class_std: 0.05,
        seed: 3,
        splits: None,
    })
    .map_err(err)?;
    let mut model =
        HallucinatorModel::tensor(HallucinatorDims::proportional(ds.shape()), &mut seeded(4)).map_err(err)?;
    let train = HallucTrainConfig {
        epochs: 2,
        tasks_per_epoch: 200,
        learning_rate: 1e-3,
        ..Default::default()
    };
    train_hallucinator(&ds, &mut model, &train, &TrainOutputs::default()).map_err(err)?;
    let bits = |m: &HallucinatorModel| -> Vec<u64> { m.params().flat_map(|p| p.data().iter().map(|x| x.to_bits())).collect() };
    let original = bits(&model);

    let ds = ds.scaled();
    let cfg = EvalConfig::default();
    let spec = cfg.episode_spec();
    let k = model.dims().noise_dim;
    let mut reduced = 0;
    for t in 0..100u64 {
        let ep = sample_episode(&ds, Split::Novel, &spec, &mut derived(70, t)).map_err(err)?;
        let support = ep.support_features(&ds);
        let probe = derive_seed(71, t);
        let before = episode_loss_value(&model, &support, cfg.finetune_m, &mut NoiseSampler::new(k, probe))
            .map_err(err)?;
        let tuned = finetune_on_support(
            &model,
            &support,
            cfg.finetune_steps,
            cfg.finetune_lr,
            cfg.finetune_m,
            derive_seed(72, t),
            cfg.precision,
        )
        .map_err(err)?;
        let after =
            episode_loss_value(&tuned, &support, cfg.finetune_m, &mut NoiseSampler::new(k, probe)).map_err(err)?;
        if after < before {
            reduced += 1;
        }
        ensure(bits(&model) == original, || format!("shared model changed during task {t}"))?;
    }
    ensure(reduced >= 90, || format!("loss reduced in only {reduced}/100 tasks"))?;
    Ok(format!("support loss reduced in {reduced}/100 tasks; shared model bit-identical"))
}

fn halc(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_halc"))
        .current_dir(dir)
        .env("HALC_LOG", "warn")
        .args(args)
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!("halc {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

/// Runs every command once in `dir` and returns (name, bytes) for each
/// artifact and report.
fn pipeline(dir: &Path, jobs: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let seed = ["--seed", "11"];
    let mut outputs = Vec::new();
    let mut run = |name: &str, args: &[&str]| -> Result<(), String> {
        let mut full: Vec<&str> = args.to_vec();
        full.extend_from_slice(&seed);
        outputs.push((format!("stdout of {name}"), halc(dir, &full)?));
        Ok(())
    };
    run("synth clusters", &["synth-data", "--out", "clusters.fth", "--classes", "12", "--per-class", "25", "--shape", "4,3,3"])?;
    run("synth factor", &[
        "synth-data", "--out", "raw.fth", "--kind", "factor", "--classes", "12", "--per-class", "20", "--shape", "3,8,8",
        "--splits", "7,0,5",
    ])?;
    run("stage 1", &[
        "train-backbone", "--data", "raw.fth", "--out", "teacher.halc", "--feature", "4,4,4", "--hidden", "6",
        "--epochs", "2", "--loss-log", "stage1.csv",
    ])?;
    run("stage 2", &[
        "train-backbone", "--data", "raw.fth", "--out", "student.halc", "--stage", "2", "--teacher", "teacher.halc",
        "--epochs", "2",
    ])?;
    run("export teacher", &["export-features", "--data", "raw.fth", "--backbone", "teacher.halc", "--out", "tf.fth"])?;
    run("export student", &["export-features", "--data", "raw.fth", "--backbone", "student.halc", "--out", "sf.fth"])?;
    run("tfh", &[
        "train-hallucinator", "--features", "sf.fth", "--out", "tfh.halc", "--epochs", "2", "--tasks-per-epoch", "20",
        "--shots", "5", "--loss-log", "tfh.csv",
    ])?;
    run("vfh", &[
        "train-hallucinator", "--features", "sf.fth", "--out", "vfh.halc", "--variant", "vector", "--epochs", "2",
        "--tasks-per-epoch", "20", "--shots", "5",
    ])?;
    run("eval", &[
        "eval", "--features", "sf.fth", "--teacher-features", "tf.fth", "--tfh", "tfh.halc", "--vfh", "vfh.halc",
        "--variant", "all", "--tasks", "30", "--m-test", "20", "--queries", "5", "--jobs", jobs, "--report",
        "report.json",
    ])?;
    run("gradcheck", &["gradcheck"])?;
    let files = [
        "clusters.fth", "clusters.fth.json", "raw.fth", "raw.fth.json", "teacher.halc", "student.halc", "stage1.csv",
        "tf.fth", "tf.fth.json", "sf.fth", "sf.fth.json", "tfh.halc", "tfh.csv", "vfh.halc", "report.json",
    ];
    for f in files {
        outputs.push((f.to_string(), std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"))?));
    }
    Ok(outputs)
}

fn criterion_8() -> Outcome {
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    let first = pipeline(a.path(), "1")?;
    let second = pipeline(b.path(), "4")?;
    ensure(first.len() == second.len(), || "different artifact sets".into())?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        ensure(x == y, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} artifacts and reports bit-identical across two runs (1 vs 4 eval jobs)", first.len()))
}

fn criterion_9() -> Outcome {
    let raw = synth_factor_images(&FactorSpec {
        num_classes: 6,
        examples_per_class: 4,
        image_shape: FeatureShape::new(3, 8, 8),
        rank: 3,
        loading_scale: 1.0,
        noise_std: 0.15,
        seed: 9,
        splits: Some(SplitCounts {
            base: 6,
            val: 0,
            novel: 0,
        }),
    })
    .map_err(err)?;
    let labels = base_label_map(&raw).map_err(err)?;
    let indices: Vec<usize> = (0..raw.len()).collect();
    let (images, y) = batch(&raw, &indices, &labels).map_err(err)?;
    let feature = FeatureShape::new(4, 4, 4);
    let student = EmbeddingNet::new([3, 8, 8], feature, 5, 6, &mut seeded(1)).map_err(err)?;
    let teacher = EmbeddingNet::new([3, 8, 8], feature, 5, 6, &mut seeded(2)).map_err(err)?;
    let plain = ReprConfig {
        alpha: 1.0,
        beta: 0.0,
        ..Default::default()
    };
    let s1 = stage1_loss(&student, &images, &y, plain.regularizer_weight).map_err(err)?;
    let s2 = stage2_loss(&student, &teacher, &images, &y, &plain).map_err(err)?;
    let gap = (s1 - s2.total).abs();
    ensure(gap <= 4.0 * f64::EPSILON * s1.abs().max(1.0), || format!("stage-1 {s1} vs stage-2 {}", s2.total))?;
    let same = stage2_loss(&student, &student.clone(), &images, &y, &ReprConfig::default()).map_err(err)?;
    ensure(same.kl == 0.0, || format!("KL(student‖student) = {:e}", same.kl))?;
    Ok(format!("|stage-1 − stage-2| = {gap:.1e} at loss {s1:.6}; KL(student‖student) = 0"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", criterion_1),
        ("shape fidelity", criterion_2),
        ("training descent", criterion_3),
        ("oracle equivalence", criterion_4),
        ("mean-preserving augmentation", criterion_5),
        ("ordering on factor-model benchmark", criterion_6),
        ("fine-tune contract", criterion_7),
        ("determinism", criterion_8),
        ("distillation reduction", criterion_9),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {}: FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
