use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::time::Instant;

use anyhow::Context;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::io::{
    check_defined, create_dir, load_classifier, load_prototypes, load_set, write_file, write_json,
    Inputs, RunManifest,
};
use super::{
    BreakdownArgs, CliError, EvalArgs, FitArgs, InferArgs, InspectArgs, RunArgs, SweepArgs,
    SynthArgs,
};
use crate::config::PipelineConfig;
use crate::eval::report::{
    write_ablation_csv, write_breakdown_csv, write_eval_csv, write_patch_dump, write_scores_csv,
    write_scores_jsonl, write_sweep_csv, EvalReport,
};
use crate::eval::{ablation_grid_with, scale_breakdown_with, sweep as run_sweep, SweepParam};
use crate::paa::infer_batch;
use crate::pipeline::{adaptation_view, evaluate_scores, fit as run_fit, scorer, ScoreField};
use crate::pvcl::io::{read_classifier, write_classifier_file, CLASSIFIER_MAGIC};
use crate::pvcl::{GdaClassifier, PvclOutput};
use crate::store::{
    read_embeddings, read_text_prototypes, EmbeddingSet, Header, Normalization, TextPrototypeSet,
    MAGIC,
};
use crate::synth::{SynthModel, SynthSpec};

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn fit_metadata(cfg: &PipelineConfig, protos: &TextPrototypeSet, fitted: &PvclOutput) -> Value {
    json!({
        "config": cfg,
        "config_digest": cfg.digest(),
        "class_names": protos.class_names(),
        "fit_report": fitted.report,
    })
}

pub fn synth(a: &SynthArgs, threads: usize) -> Result<(), CliError> {
    let start = Instant::now();
    let mut spec = match &a.spec {
        Some(p) => SynthSpec::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if let Some(n) = a.images {
        spec.images = n;
    }
    spec.validate()?;
    create_dir(&a.out_dir)?;

    let model = SynthModel::new(&spec)?;
    let adapt = model.sample_split(0)?;
    let eval = model.sample_split(1)?;
    let dir = &a.out_dir;
    write_file(&dir.join("adapt.piaa"), |w| {
        crate::store::write_embeddings(&adapt.embeddings, w)
    })?;
    write_file(&dir.join("eval.piaa"), |w| {
        crate::store::write_embeddings(&eval.embeddings, w)
    })?;
    write_file(&dir.join("prototypes.piaa"), |w| {
        crate::store::write_text_prototypes(model.prototypes(), w)
    })?;
    let meta = json!({ "kind": "ground_truth", "class_names": model.prototypes().class_names() });
    write_classifier_file(model.ground_truth(), &meta, dir.join("ground_truth.piac"))
        .context("writing ground_truth.piac")?;
    let spec_toml = toml::to_string(&spec).context("serializing spec")?;
    std::fs::write(dir.join("spec.toml"), &spec_toml).context("writing spec.toml")?;

    let mut manifest = RunManifest::new("synth", None, threads);
    manifest.config_digest = Sha256::digest(spec_toml.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect();
    manifest.outputs = [
        "adapt.piaa",
        "eval.piaa",
        "prototypes.piaa",
        "ground_truth.piac",
        "spec.toml",
    ]
    .map(String::from)
    .to_vec();
    manifest.timings.total_ms = ms(start);
    manifest.details = json!({ "spec": spec });
    manifest.write(dir)
}

pub fn fit(a: &FitArgs, threads: usize) -> Result<(), CliError> {
    let start = Instant::now();
    let cfg = a.config.resolve()?;
    let inputs = Inputs::resolve(&a.inputs)?;
    let protos = load_prototypes(
        inputs.require(&inputs.prototypes, "prototypes")?,
        &cfg,
        inputs.class_names.as_deref(),
    )?
    .prototypes;
    let source = inputs.adapt.clone().or(inputs.embeddings.clone());
    let set = load_set(inputs.require(&source, "adapt")?, &cfg)?;

    let (out, out_dir) = match (&a.out, &a.out_dir) {
        (Some(out), Some(dir)) => (out.clone(), dir.clone()),
        (Some(out), None) => {
            let dir = out.parent().map(|p| p.to_path_buf()).unwrap_or_default();
            (out.clone(), dir)
        }
        (None, Some(dir)) => (dir.join("classifier.piac"), dir.clone()),
        (None, None) => return Err(CliError::usage("fit needs --out or --out-dir")),
    };
    if !out_dir.as_os_str().is_empty() {
        create_dir(&out_dir)?;
    }

    let t = Instant::now();
    let fitted = run_fit(&set.view(), &protos, &cfg)?;
    let acquisition = ms(t);
    write_classifier_file(
        &fitted.classifier,
        &fit_metadata(&cfg, &protos, &fitted),
        &out,
    )
    .with_context(|| format!("writing {}", out.display()))?;

    let mut manifest = RunManifest::new("fit", Some(&cfg), threads);
    manifest.inputs = serde_json::to_value(&inputs).unwrap_or_default();
    manifest.outputs = vec![out.display().to_string()];
    manifest.timings.acquisition_ms = Some(acquisition);
    manifest.timings.total_ms = ms(start);
    manifest.details = json!({ "fit_report": fitted.report, "stage_timings_ms": fitted.timings });
    manifest.write(&out_dir)
}

/// Classifier used for scoring: loaded from a file, fitted on the adaptation
/// split (or the evaluation images when transductive), or none.
struct Acquired {
    classifier: Option<GdaClassifier>,
    acquisition_ms: Option<f64>,
    report: Value,
}

fn acquire(
    inputs: &Inputs,
    cfg: &PipelineConfig,
    eval: &EmbeddingSet,
    protos: &TextPrototypeSet,
    text_only: bool,
) -> Result<Acquired, CliError> {
    if text_only {
        return Ok(Acquired {
            classifier: None,
            acquisition_ms: None,
            report: Value::Null,
        });
    }
    if let Some(path) = &inputs.classifier {
        return Ok(Acquired {
            classifier: Some(load_classifier(path, protos)?),
            acquisition_ms: None,
            report: Value::Null,
        });
    }
    let adapt = match (&inputs.adapt, cfg.transductive) {
        (Some(path), false) => Some(load_set(path, cfg)?),
        _ => None,
    };
    let view = adaptation_view(adapt.as_ref(), eval, cfg.transductive)?;
    let t = Instant::now();
    let fitted = run_fit(&view, protos, cfg)?;
    Ok(Acquired {
        acquisition_ms: Some(ms(t)),
        report: serde_json::to_value(&fitted.report).unwrap_or_default(),
        classifier: Some(fitted.classifier),
    })
}

struct Loaded {
    cfg: PipelineConfig,
    inputs: Inputs,
    protos: TextPrototypeSet,
    set: EmbeddingSet,
}

fn load_common(run: &RunArgs) -> Result<Loaded, CliError> {
    let cfg = run.config.resolve()?;
    let inputs = Inputs::resolve(&run.inputs)?;
    let loaded = load_prototypes(
        inputs.require(&inputs.prototypes, "prototypes")?,
        &cfg,
        inputs.class_names.as_deref(),
    )?;
    let mut set = load_set(inputs.require(&inputs.embeddings, "embeddings")?, &cfg)?;
    loaded.align_labels(&mut set)?;
    let protos = loaded.prototypes;
    create_dir(&run.out_dir)?;
    Ok(Loaded {
        cfg,
        inputs,
        protos,
        set,
    })
}

pub fn infer(a: &InferArgs, threads: usize) -> Result<(), CliError> {
    let start = Instant::now();
    let run = RunArgs {
        inputs: a.inputs.clone(),
        config: a.config.clone(),
        out_dir: a.out_dir.clone(),
    };
    let Loaded {
        cfg,
        inputs,
        protos,
        set,
    } = load_common(&run)?;
    let fit_wanted = inputs.classifier.is_some() || inputs.adapt.is_some() || cfg.transductive;
    let acquired = acquire(&inputs, &cfg, &set, &protos, !fit_wanted)?;

    let t = Instant::now();
    let s = scorer(acquired.classifier.as_ref(), &protos, cfg.logit_scale);
    let out = infer_batch(
        &s,
        &set.view(),
        &protos,
        &cfg.infer_options(),
        a.dump_patches,
    )?;
    let inference = ms(t);

    let dir = &a.out_dir;
    let names = protos.class_names();
    write_file(&dir.join("scores.csv"), |w| {
        write_scores_csv(set.image_ids(), &out.scores, names, w)
    })?;
    write_file(&dir.join("scores.jsonl"), |w| {
        write_scores_jsonl(set.image_ids(), &out.scores, w)
    })?;
    let mut outputs = vec!["scores.csv".to_string(), "scores.jsonl".to_string()];
    if let Some(probs) = &out.patch_probs {
        write_file(&dir.join("patches.csv"), |w| {
            write_patch_dump(set.image_ids(), probs, names, w)
        })?;
        outputs.push("patches.csv".into());
    }

    let mut manifest = RunManifest::new("infer", Some(&cfg), threads);
    manifest.inputs = serde_json::to_value(&inputs).unwrap_or_default();
    manifest.outputs = outputs;
    manifest.timings.acquisition_ms = acquired.acquisition_ms;
    manifest.timings.inference_ms = Some(inference);
    manifest.timings.total_ms = ms(start);
    manifest.details = json!({
        "scorer": if acquired.classifier.is_some() { "gda" } else { "text" },
        "patch_evaluations": out.patch_evaluations,
        "fit_report": acquired.report,
    });
    manifest.write(dir)
}

pub fn eval(a: &EvalArgs, threads: usize) -> Result<(), CliError> {
    let start = Instant::now();
    let Loaded {
        cfg,
        inputs,
        protos,
        set,
    } = load_common(&a.run)?;
    let acquired = acquire(&inputs, &cfg, &set, &protos, a.no_pvcl)?;

    let t = Instant::now();
    let s = scorer(acquired.classifier.as_ref(), &protos, cfg.logit_scale);
    let out = infer_batch(&s, &set.view(), &protos, &cfg.infer_options(), false)?;
    let result = evaluate_scores(&set, &out.scores, ScoreField::Fused, &cfg.digest())?;
    let inference = ms(t);

    let dir = &a.run.out_dir;
    let names = protos.class_names();
    write_file(&dir.join("eval.csv"), |w| write_eval_csv(&result, names, w))?;
    write_json(&dir.join("eval.json"), &EvalReport::new(&result, names))?;

    let mut manifest = RunManifest::new("eval", Some(&cfg), threads);
    manifest.inputs = serde_json::to_value(&inputs).unwrap_or_default();
    manifest.outputs = vec!["eval.csv".into(), "eval.json".into()];
    manifest.timings.acquisition_ms = acquired.acquisition_ms;
    manifest.timings.inference_ms = Some(inference);
    manifest.timings.total_ms = ms(start);
    manifest.details = json!({
        "map": result.map,
        "scorer": if acquired.classifier.is_some() { "gda" } else { "text" },
        "fit_report": acquired.report,
    });
    manifest.write(dir)?;
    check_defined(&result, names, a.run.config.allow_empty_classes)
}

pub fn ablate(a: &RunArgs, threads: usize) -> Result<(), CliError> {
    let start = Instant::now();
    let Loaded {
        cfg,
        inputs,
        protos,
        set,
    } = load_common(a)?;
    let acquired = acquire(&inputs, &cfg, &set, &protos, false)?;
    let classifier = acquired.classifier.as_ref().expect("acquired a classifier");

    let t = Instant::now();
    let table = ablation_grid_with(classifier, &set, &protos, &cfg)?;
    let inference = ms(t);

    let dir = &a.out_dir;
    write_file(&dir.join("ablation.csv"), |w| write_ablation_csv(&table, w))?;
    write_json(&dir.join("ablation.json"), &table)?;

    let mut manifest = RunManifest::new("ablate", Some(&cfg), threads);
    manifest.inputs = serde_json::to_value(&inputs).unwrap_or_default();
    manifest.outputs = vec!["ablation.csv".into(), "ablation.json".into()];
    manifest.timings.acquisition_ms = acquired.acquisition_ms;
    manifest.timings.inference_ms = Some(inference);
    manifest.timings.total_ms = ms(start);
    manifest.details = json!({ "fit_report": acquired.report });
    manifest.write(dir)?;
    check_defined(
        &table.rows[0].result,
        protos.class_names(),
        a.config.allow_empty_classes,
    )
}

pub fn sweep(a: &SweepArgs, threads: usize) -> Result<(), CliError> {
    let start = Instant::now();
    let Loaded {
        cfg,
        inputs,
        protos,
        set,
    } = load_common(&a.run)?;
    if inputs.classifier.is_some() {
        return Err(CliError::usage(
            "sweep refits; pass --adapt or --transductive instead of --classifier",
        ));
    }
    let adapt = match (&inputs.adapt, cfg.transductive) {
        (Some(path), false) => Some(load_set(path, &cfg)?),
        _ => None,
    };
    let view = adaptation_view(adapt.as_ref(), &set, cfg.transductive)?;
    let points = run_sweep(&view, &set, &protos, &cfg, a.param, &a.values)?;

    let dir = &a.run.out_dir;
    write_file(&dir.join("sweep.csv"), |w| write_sweep_csv(&points, w))?;
    write_json(&dir.join("sweep.json"), &points)?;

    let mut manifest = RunManifest::new("sweep", Some(&cfg), threads);
    manifest.inputs = serde_json::to_value(&inputs).unwrap_or_default();
    manifest.outputs = vec!["sweep.csv".into(), "sweep.json".into()];
    manifest.timings.total_ms = ms(start);
    manifest.details = json!({
        "param": a.param,
        "values": a.values,
        "refits": if a.param == SweepParam::K { a.values.len() } else { 1 },
    });
    manifest.write(dir)?;
    match points.first() {
        Some(p) => check_defined(
            &p.result,
            protos.class_names(),
            a.run.config.allow_empty_classes,
        ),
        None => Ok(()),
    }
}

pub fn breakdown(a: &BreakdownArgs, threads: usize) -> Result<(), CliError> {
    let start = Instant::now();
    let Loaded {
        cfg,
        inputs,
        protos,
        set,
    } = load_common(&a.run)?;
    for name in &a.classes {
        protos.class_index(name)?;
    }
    let acquired = acquire(&inputs, &cfg, &set, &protos, false)?;
    let classifier = acquired.classifier.as_ref().expect("acquired a classifier");

    let t = Instant::now();
    let rows = scale_breakdown_with(classifier, &set, &protos, &cfg, &a.classes)?;
    let inference = ms(t);

    let dir = &a.run.out_dir;
    write_file(&dir.join("breakdown.csv"), |w| {
        write_breakdown_csv(&rows, w)
    })?;
    write_json(&dir.join("breakdown.json"), &rows)?;

    let mut manifest = RunManifest::new("breakdown", Some(&cfg), threads);
    manifest.inputs = serde_json::to_value(&inputs).unwrap_or_default();
    manifest.outputs = vec!["breakdown.csv".into(), "breakdown.json".into()];
    manifest.timings.acquisition_ms = acquired.acquisition_ms;
    manifest.timings.inference_ms = Some(inference);
    manifest.timings.total_ms = ms(start);
    manifest.write(dir)?;
    let undefined: Vec<&str> = rows
        .iter()
        .filter(|r| r.ap_fused.is_none())
        .map(|r| r.class_name.as_str())
        .collect();
    if undefined.is_empty() || a.run.config.allow_empty_classes {
        Ok(())
    } else {
        Err(anyhow::anyhow!(
            "AP undefined for classes without positives: {} (pass --allow-empty-classes to accept)",
            undefined.join(", ")
        )
        .into())
    }
}

pub fn inspect(a: &InspectArgs) -> Result<(), CliError> {
    let path = &a.path;
    let open = || -> Result<BufReader<File>, CliError> {
        Ok(BufReader::new(
            File::open(path).with_context(|| format!("opening {}", path.display()))?,
        ))
    };
    let mut magic = [0u8; 4];
    open()?
        .read_exact(&mut magic)
        .with_context(|| format!("reading {}", path.display()))?;

    let summary = if magic == MAGIC {
        let header = Header::read_from(&mut open()?)?;
        if header.is_text() {
            let protos = read_text_prototypes(&mut open()?, Normalization::Disabled)?;
            json!({
                "kind": "text_prototypes",
                "dim": protos.dim(),
                "classes": protos.num_classes(),
                "class_names": protos.class_names(),
            })
        } else {
            let set = read_embeddings(&mut open()?, Normalization::Disabled)?;
            let counts = set.patch_offsets().iter().map(|o| o.1);
            json!({
                "kind": "embeddings",
                "dim": set.dim(),
                "images": set.num_images(),
                "patches": set.num_patches(),
                "min_patches_per_image": counts.clone().min(),
                "max_patches_per_image": counts.max(),
                "labels": set.labels().map(|l| l.num_classes()),
            })
        }
    } else if magic == CLASSIFIER_MAGIC {
        let (c, meta) = read_classifier(&mut open()?)?;
        json!({
            "kind": "classifier",
            "dim": c.dim(),
            "classes": c.num_classes(),
            "provenance": c.provenance(),
            "fallback_classes": c.fallback_classes(),
            "metadata": meta,
        })
    } else {
        return Err(anyhow::Error::from(crate::PiaaError::BadMagic {
            expected: MAGIC,
            found: magic,
        })
        .context(format!("{} is not a PIAA or PIAC file", path.display()))
        .into());
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(anyhow::Error::from(e).into()),
        _ => Ok(()),
    }
}
