//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on failure.
//!
//! Arguments that do not start with `-` filter criteria by substring.

use std::path::Path;
use std::time::{Duration, Instant};

use piaa::config::PipelineConfig;
use piaa::eval::{ablation_grid, average_precision};
use piaa::paa::{fuse, infer_batch, ImageScores, InferOptions, PatchScorer};
use piaa::pipeline::scorer;
use piaa::pvcl::{
    fit_final, purify_banks, run_pvcl, BankStage, EstimatorOptions, FitOptions, GdaClassifier,
    MemoryBank, PatchScores,
};
use piaa::store::{EmbeddingSet, Normalization, TextPrototypeSet};
use piaa::synth::oracle::{argmax_agreement, oracle_ap, oracle_gda};
use piaa::synth::{SynthModel, SynthSpec};
use piaa::zeroshot::{predictive_entropy, softmax, text_align_probs, ProbMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Largest entrywise difference relative to the largest reference magnitude.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

fn classifier_rel_err(a: &GdaClassifier, b: &GdaClassifier) -> f64 {
    rel_err(a.weights(), b.weights())
        .max(rel_err(a.biases(), b.biases()))
        .max(rel_err(a.precision(), b.precision()))
        .max(rel_err(a.means(), b.means()))
}

fn single_image_set(rows: &[Vec<f64>]) -> EmbeddingSet {
    let d = rows[0].len();
    let flat: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
    let cls = flat[..d].to_vec();
    EmbeddingSet::new(
        d,
        &[rows.len()],
        flat,
        cls,
        vec!["img".into()],
        None,
        Normalization::Disabled,
    )
    .expect("valid set")
}

fn unit_prototypes(c: usize, d: usize, rng: &mut ChaCha8Rng) -> TextPrototypeSet {
    let flat: Vec<f32> = (0..c * d)
        .map(|_| rng.gen_range(-1.0f32..1.0) + 1e-3)
        .collect();
    let names = (0..c).map(|k| format!("c{k}")).collect();
    TextPrototypeSet::new(d, flat, names, Normalization::L2).expect("valid prototypes")
}

fn gda_oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    let instances = 1000;
    for inst in 0..instances {
        let c = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=16);
        let n = rng.gen_range(c.max(2)..=256);
        let degenerate = inst % 100 == 99;
        let labels: Vec<usize> = (0..n)
            .map(|i| if i < c { i } else { rng.gen_range(0..c) })
            .collect();
        let offsets: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| {
                if degenerate {
                    vec![0.5; d]
                } else {
                    offsets[y]
                        .iter()
                        .map(|o| o + rng.gen_range(-1.0..1.0))
                        .collect()
                }
            })
            .collect();
        // store through f32 so both paths see identical inputs
        let rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| f64::from(v as f32)).collect())
            .collect();
        let q_rows: Vec<f64> = (0..n)
            .flat_map(|_| {
                softmax(
                    &(0..c)
                        .map(|_| rng.gen_range(-3.0..3.0))
                        .collect::<Vec<f64>>(),
                )
            })
            .collect();
        let weights: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| q_rows[i * c + y])
            .collect();

        let set = single_image_set(&rows);
        let mut members = vec![Vec::new(); c];
        for (i, &y) in labels.iter().enumerate() {
            members[y].push(i);
        }
        let bank = MemoryBank::from_members(256, BankStage::Purified, members);
        let q = PatchScores::new(
            (0..n).collect(),
            ProbMatrix::new(c, q_rows).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        let protos = unit_prototypes(c, d, &mut rng);
        let fitted = fit_final(
            &set.view(),
            &bank,
            &q,
            &protos,
            &EstimatorOptions::default(),
        )
        .map_err(|e| format!("instance {inst}: {e}"))?;
        let oracle = oracle_gda(&rows, &labels, Some(&weights), c).map_err(|e| e.to_string())?;
        worst = worst.max(classifier_rel_err(&fitted, &oracle));
    }

    // the d = 2 worked case
    let rows = vec![
        vec![1.0, 1.0],
        vec![1.0, -1.0],
        vec![-1.0, 1.0],
        vec![-1.0, -1.0],
    ];
    let set = single_image_set(&rows);
    let bank = MemoryBank::from_members(4, BankStage::Purified, vec![vec![0, 1], vec![2, 3]]);
    let q = PatchScores::new(
        vec![0, 1, 2, 3],
        ProbMatrix::new(2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0])
            .map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let protos = TextPrototypeSet::new(
        2,
        vec![1.0, 0.0, 0.0, 1.0],
        vec!["a".into(), "b".into()],
        Normalization::L2,
    )
    .map_err(|e| e.to_string())?;
    let g = fit_final(
        &set.view(),
        &bank,
        &q,
        &protos,
        &EstimatorOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let expected_w = [2.0, 0.0, -2.0, 0.0];
    let worked = rel_err(g.weights(), &expected_w) * 2.0;
    let worked = worked.max(
        g.biases()
            .iter()
            .fold(0.0f64, |m, b| m.max((b + 1.0).abs())),
    );

    ensure(
        worst <= 1e-8 && worked <= 1e-12,
        format!("{instances} instances, max relative error {worst:.2e} (limit 1e-8); worked case error {worked:.2e} (limit 1e-12)"),
    )
}

fn bayes_recovery() -> Check {
    let spec = SynthSpec {
        classes: 5,
        dim: 16,
        separation: 6.0,
        normalize: false,
        seed: 2024,
        ..SynthSpec::default()
    };
    let model = SynthModel::new(&spec).map_err(|e| e.to_string())?;
    let (train, labels) = model.sample_labeled(500, 0);
    let (held_out, _) = model.sample_labeled(2000, 1);

    let set = single_image_set(&train);
    let mut members = vec![Vec::new(); spec.classes];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    let bank = MemoryBank::from_members(500, BankStage::Purified, members);
    let one_hot: Vec<f64> = labels
        .iter()
        .flat_map(|&y| (0..spec.classes).map(move |k| f64::from(u8::from(k == y))))
        .collect();
    let q = PatchScores::new(
        (0..train.len()).collect(),
        ProbMatrix::new(spec.classes, one_hot).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let fitted = fit_final(
        &set.view(),
        &bank,
        &q,
        model.prototypes(),
        &EstimatorOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let agreement = argmax_agreement(&fitted, model.ground_truth(), &held_out);
    ensure(
        agreement >= 0.99,
        format!(
            "agreement {:.4} on {} held-out patches (need >= 0.99)",
            agreement,
            held_out.len()
        ),
    )
}

fn gap_spec(angle: f64, seed: u64) -> SynthSpec {
    SynthSpec {
        classes: 10,
        dim: 64,
        images: 300,
        patches_per_image: 32,
        separation: 4.0,
        cov_rank: 4,
        cov_strength: 4.0,
        gap_angle_deg: angle,
        gap_offset: if angle > 0.0 { 0.3 } else { 0.0 },
        seed,
        ..SynthSpec::default()
    }
}

/// PIAA and text-prototype scoring under the same aggregation.
fn piaa_vs_text(spec: &SynthSpec) -> Result<(f64, f64), String> {
    let model = SynthModel::new(spec).map_err(|e| e.to_string())?;
    let adapt = model.sample_split(0).map_err(|e| e.to_string())?;
    let eval = model.sample_split(1).map_err(|e| e.to_string())?;
    let table = ablation_grid(
        &adapt.embeddings.view(),
        &eval.embeddings,
        model.prototypes(),
        &PipelineConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    Ok((
        table.get(true, true).result.map,
        table.get(false, true).result.map,
    ))
}

fn modality_gap() -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 1..=3 {
        let (piaa, text) = piaa_vs_text(&gap_spec(30.0, seed))?;
        ok &= piaa > text;
        lines.push(format!("gap30 seed{seed}: {piaa:.4} vs {text:.4}"));
        let (piaa0, text0) = piaa_vs_text(&gap_spec(0.0, seed))?;
        ok &= (piaa0 - text0).abs() <= 0.02;
        lines.push(format!("gap0 seed{seed}: |d|={:.4}", (piaa0 - text0).abs()));
    }
    ensure(ok, lines.join("; "))
}

fn scale_invariance() -> Check {
    let spec = SynthSpec {
        classes: 6,
        dim: 24,
        images: 80,
        patches_per_image: 20,
        normalize: false,
        gap_angle_deg: 20.0,
        seed: 77,
        ..SynthSpec::default()
    };
    let data = piaa::synth::generate(&spec).map_err(|e| e.to_string())?;
    let protos = &data.prototypes;
    let options = FitOptions {
        k: 64,
        ..FitOptions::default()
    };
    let base_view = data.embeddings.view();
    let base = run_pvcl(&base_view, protos, &options).map_err(|e| e.to_string())?;
    let infer = InferOptions::default();
    let base_scores = infer_batch(
        &PatchScorer::Gda(&base.classifier),
        &base_view,
        protos,
        &infer,
        false,
    )
    .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for s in [0.1, 10.0] {
        let view = base_view.scaled(s);
        let out = run_pvcl(&view, protos, &options).map_err(|e| e.to_string())?;
        if out.bootstrap != base.bootstrap || out.purified != base.purified {
            return Err(format!("banks changed at s={s}"));
        }
        for i in 0..view.num_patches() {
            let a = base.classifier.logits(&base_view.patch(i));
            let b = out.classifier.logits(&view.patch(i));
            let pa = base.preliminary.logits(&base_view.patch(i));
            let pb = out.preliminary.logits(&view.patch(i));
            worst = worst.max(rel_err(&b, &a)).max(rel_err(&pb, &pa));
        }
        let scores = infer_batch(
            &PatchScorer::Gda(&out.classifier),
            &view,
            protos,
            &infer,
            false,
        )
        .map_err(|e| e.to_string())?;
        for (x, y) in scores.scores.iter().zip(&base_scores.scores) {
            worst = worst
                .max(rel_err(&x.s_fused, &y.s_fused))
                .max(rel_err(&x.s_patch, &y.s_patch));
        }
    }
    ensure(
        worst <= 1e-9,
        format!(
            "s in {{0.1, 10}}: banks identical, max relative deviation {worst:.2e} (limit 1e-9)"
        ),
    )
}

fn ap_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatches = 0;
    let mut defined = 0;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=200);
        let levels = rng.gen_range(1..=20);
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.gen_range(0..levels)) / 7.0)
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let fast = average_precision(&scores, &labels);
        let slow = oracle_ap(&scores, &labels);
        defined += usize::from(fast.is_some());
        if fast != slow {
            mismatches += 1;
        }
    }
    let hand = average_precision(&[0.9, 0.5, 0.1], &[true, false, true]).unwrap_or(f64::NAN);
    ensure(
        mismatches == 0 && (hand - 0.833333).abs() <= 1e-6 && (hand - 5.0 / 6.0).abs() <= 1e-9,
        format!("10000 instances ({defined} with positives), {mismatches} mismatches; hand case {hand:.9}"),
    )
}

fn structural_invariants() -> Check {
    let mut failures = Vec::new();
    let mut checks = 0usize;
    let mut check = |ok: bool, what: &str| {
        checks += 1;
        if !ok {
            failures.push(what.to_string());
        }
    };

    let spec = SynthSpec {
        classes: 6,
        dim: 32,
        images: 120,
        patches_per_image: 24,
        gap_angle_deg: 25.0,
        clutter_fraction: 0.1,
        seed: 5,
        ..SynthSpec::default()
    };
    let data = piaa::synth::generate(&spec).map_err(|e| e.to_string())?;
    let view = data.embeddings.view();
    let protos = &data.prototypes;
    let k = 100;
    let out = run_pvcl(
        &view,
        protos,
        &FitOptions {
            k,
            ..FitOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;

    // softmax rows and entropy bounds
    let probs = text_align_probs(&view, protos, 100.0).map_err(|e| e.to_string())?;
    let entropy = predictive_entropy(&probs);
    let ln_c = (spec.classes as f64).ln();
    check(
        probs
            .iter_rows()
            .all(|r| (r.iter().sum::<f64>() - 1.0).abs() <= 1e-12),
        "text softmax rows sum to 1",
    );
    check(
        entropy.values().iter().all(|&h| (0.0..=ln_c).contains(&h)),
        "entropy within [0, ln C]",
    );

    // bank chain: purified within bootstrap within argmax-class candidates, sizes within K
    for c in 0..spec.classes {
        let boot = out.bootstrap.class(c);
        let pure = out.purified.class(c);
        check(boot.len() <= k, "bootstrap size <= K");
        check(
            boot.iter().all(|&i| probs.argmax(i) == c),
            "bootstrap members have argmax c",
        );
        check(
            pure.iter().all(|i| boot.contains(i)),
            "purified subset of bootstrap",
        );
        check(
            !boot.is_empty() <= !pure.is_empty(),
            "nonempty bootstrap keeps a member",
        );
        let worst_in = boot
            .iter()
            .map(|&i| entropy.get(i))
            .fold(f64::NEG_INFINITY, f64::max);
        let best_out = (0..probs.rows())
            .filter(|&i| probs.argmax(i) == c && !boot.contains(&i))
            .map(|i| entropy.get(i))
            .fold(f64::INFINITY, f64::min);
        check(
            worst_in <= best_out,
            "bootstrap holds the lowest-entropy candidates",
        );
    }

    // purification threshold: {0.1, 0.1, 0.9} keeps exactly the 0.9 member
    let bank = MemoryBank::from_members(3, BankStage::Bootstrap, vec![vec![0, 1, 2]]);
    let q = PatchScores::new(
        vec![0, 1, 2],
        ProbMatrix::new(2, vec![0.1, 0.9, 0.1, 0.9, 0.9, 0.1]).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let kept = purify_banks(
        &MemoryBank::from_members(3, BankStage::Bootstrap, vec![vec![0, 1, 2], vec![]]),
        &q,
    )
    .map_err(|e| e.to_string())?;
    let _ = bank;
    check(
        kept.class(0) == [2],
        "purification keeps exactly the 0.9 member",
    );

    // fusion boundaries and convex bounds
    let s = scorer(Some(&out.classifier), protos, 100.0);
    let batch = infer_batch(&s, &view, protos, &InferOptions::default(), false)
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for img in &batch.scores {
        let at0 = fuse(&img.s_patch, &img.s_cls, 0.0).map_err(|e| e.to_string())?;
        let at1 = fuse(&img.s_patch, &img.s_cls, 1.0).map_err(|e| e.to_string())?;
        check(at0.s_fused == img.s_cls, "alpha = 0 gives the CLS scores");
        check(
            at1.s_fused == img.s_patch,
            "alpha = 1 gives the patch scores",
        );
        let a = rng.gen_range(0.0..=1.0);
        let f = fuse(&img.s_patch, &img.s_cls, a).map_err(|e| e.to_string())?;
        let bounded = f
            .s_fused
            .iter()
            .zip(img.s_patch.iter().zip(&img.s_cls))
            .all(|(v, (p, c))| *v >= p.min(*c) - 1e-15 && *v <= p.max(*c) + 1e-15);
        check(bounded, "fused scores within elementwise bounds");
        for v in [&img.s_patch, &img.s_cls, &img.s_fused] {
            check(
                (v.iter().sum::<f64>() - 1.0).abs() <= 1e-12,
                "image score vectors sum to 1",
            );
        }
    }

    // permuting and duplicating patches inside an image leaves its scores unchanged
    let d = spec.dim;
    let mut patches = Vec::new();
    let mut counts = Vec::new();
    for img in 0..view.num_images() {
        let mut order: Vec<usize> = view.image_patches(img).collect();
        order.reverse();
        order.push(order[0]);
        counts.push(order.len());
        for i in order {
            patches.extend_from_slice(view.raw_patch(i));
        }
    }
    let shuffled = EmbeddingSet::new(
        d,
        &counts,
        patches,
        data.embeddings.cls().to_vec(),
        data.embeddings.image_ids().to_vec(),
        None,
        Normalization::Disabled,
    )
    .map_err(|e| e.to_string())?;
    let again = infer_batch(
        &s,
        &shuffled.view(),
        protos,
        &InferOptions::default(),
        false,
    )
    .map_err(|e| e.to_string())?;
    let same = again
        .scores
        .iter()
        .zip(&batch.scores)
        .all(|(a, b): (&ImageScores, &ImageScores)| a == b);
    check(same, "patch permutation and duplication invariance");

    ensure(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{checks} checks passed")
        } else {
            failures.sort();
            failures.dedup();
            format!(
                "{} of {checks} checks failed: {}",
                failures.len(),
                failures.join("; ")
            )
        },
    )
}

fn ablation_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        classes: 10,
        dim: 64,
        images: 300,
        patches_per_image: 32,
        separation: 3.0,
        cov_rank: 4,
        cov_strength: 4.0,
        gap_angle_deg: 30.0,
        gap_offset: 0.3,
        small_object_classes: vec![0, 1],
        large_object_classes: vec![5, 6, 7, 8, 9],
        large_object_signal: 0.4,
        clutter_fraction: 0.1,
        clutter_strength: 0.6,
        seed,
        ..SynthSpec::default()
    }
}

fn ablation_direction() -> Check {
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in 1..=3 {
        let model = SynthModel::new(&ablation_spec(seed)).map_err(|e| e.to_string())?;
        let adapt = model.sample_split(0).map_err(|e| e.to_string())?;
        let eval = model.sample_split(1).map_err(|e| e.to_string())?;
        let t = ablation_grid(
            &adapt.embeddings.view(),
            &eval.embeddings,
            model.prototypes(),
            &PipelineConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        let full = t.get(true, true).result.map;
        ok &= t.rows.iter().all(|r| full >= r.result.map);
        let m: Vec<String> = t
            .rows
            .iter()
            .map(|r| format!("{:.4}", r.result.map))
            .collect();
        lines.push(format!(
            "seed{seed} [-,-|-,PAA|PVCL,-|PVCL,PAA] = [{}]",
            m.join(" ")
        ));
    }
    ensure(ok, lines.join("; "))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let mut full = vec!["piaa"];
    full.extend_from_slice(args);
    match piaa::cli::run(full) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", args.join(" "))),
    }
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let p = |s: &str| root.join(s).display().to_string();
    std::fs::write(root.join("spec.toml"), "classes = 6\ndim = 32\nimages = 150\npatches_per_image = 24\ngap_angle_deg = 25.0\nclutter_fraction = 0.1\nseed = 17\n")
        .map_err(|e| e.to_string())?;
    run_cli(&["synth", "--spec", &p("spec.toml"), "--out-dir", &p("data")])?;
    let protos = p("data/prototypes.piaa");
    let mut outputs = Vec::new();
    for (run, threads) in [("a", "1"), ("b", "4"), ("c", "4")] {
        let out = |s: &str| root.join(run).join(s).display().to_string();
        run_cli(&[
            "--threads",
            threads,
            "fit",
            "--adapt",
            &p("data/adapt.piaa"),
            "--prototypes",
            &protos,
            "--k",
            "128",
            "--out-dir",
            &out("fit"),
        ])?;
        run_cli(&[
            "--threads",
            threads,
            "eval",
            "--embeddings",
            &p("data/eval.piaa"),
            "--prototypes",
            &protos,
            "--classifier",
            &out("fit/classifier.piac"),
            "--out-dir",
            &out("eval"),
        ])?;
        run_cli(&[
            "--threads",
            threads,
            "ablate",
            "--embeddings",
            &p("data/eval.piaa"),
            "--prototypes",
            &protos,
            "--adapt",
            &p("data/adapt.piaa"),
            "--k",
            "128",
            "--out-dir",
            &out("ablate"),
        ])?;
        run_cli(&[
            "--threads",
            threads,
            "infer",
            "--embeddings",
            &p("data/eval.piaa"),
            "--prototypes",
            &protos,
            "--classifier",
            &out("fit/classifier.piac"),
            "--out-dir",
            &out("infer"),
        ])?;
        outputs.push(root.join(run));
    }
    let files = [
        "fit/classifier.piac",
        "eval/eval.csv",
        "eval/eval.json",
        "ablate/ablation.csv",
        "ablate/ablation.json",
        "infer/scores.csv",
        "infer/scores.jsonl",
    ];
    let read = |base: &Path, f: &str| std::fs::read(base.join(f)).map_err(|e| format!("{f}: {e}"));
    let mut differing = Vec::new();
    for f in files {
        let reference = read(&outputs[0], f)?;
        for other in &outputs[1..] {
            if read(other, f)? != reference {
                differing.push(f);
            }
        }
    }
    let digests: Vec<String> = outputs
        .iter()
        .map(|o| {
            let m: serde_json::Value = serde_json::from_slice(
                &std::fs::read(o.join("eval/manifest.json")).unwrap_or_default(),
            )
            .unwrap_or_default();
            m["config_digest"].as_str().unwrap_or("").to_string()
        })
        .collect();
    let digests_equal = digests.windows(2).all(|w| w[0] == w[1]) && !digests[0].is_empty();
    ensure(
        differing.is_empty() && digests_equal,
        format!(
            "{} files compared across threads 1/4/4: {}; manifest digests {}",
            files.len(),
            if differing.is_empty() {
                "bit-identical".to_string()
            } else {
                format!("differ: {}", differing.join(", "))
            },
            if digests_equal { "stable" } else { "unstable" },
        ),
    )
}

fn acquisition_efficiency() -> Check {
    let spec = SynthSpec {
        classes: 20,
        dim: 512,
        images: 5102,
        patches_per_image: 196,
        min_labels: 1,
        max_labels: 3,
        separation: 4.0,
        gap_angle_deg: 20.0,
        seed: 512,
        ..SynthSpec::default()
    };
    let t = Instant::now();
    let data = piaa::synth::generate(&spec).map_err(|e| e.to_string())?;
    let generation = t.elapsed();
    let view = data.embeddings.view();
    let t = Instant::now();
    let out =
        run_pvcl(&view, &data.prototypes, &FitOptions::default()).map_err(|e| e.to_string())?;
    let fit = t.elapsed();
    ensure(
        fit < Duration::from_secs(300),
        format!(
            "{} patches, d=512, C=20, K=512: fit {:.1} s (limit 300 s; text scoring {:.1} s, final {:.1} s), bank total {}, generation {:.1} s",
            view.num_patches(),
            secs(fit),
            out.timings.text_scoring_ms / 1e3,
            out.timings.final_ms / 1e3,
            out.purified.total(),
            secs(generation),
        ),
    )
}

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Check,
}

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria = [
        Criterion {
            name: "gda-oracle-equivalence",
            limit: Some(Duration::from_secs(30)),
            run: gda_oracle_equivalence,
        },
        Criterion {
            name: "bayes-recovery",
            limit: Some(Duration::from_secs(10)),
            run: bayes_recovery,
        },
        Criterion {
            name: "modality-gap-correction",
            limit: Some(Duration::from_secs(60)),
            run: modality_gap,
        },
        Criterion {
            name: "scale-invariance",
            limit: None,
            run: scale_invariance,
        },
        Criterion {
            name: "ap-oracle",
            limit: None,
            run: ap_oracle,
        },
        Criterion {
            name: "structural-invariants",
            limit: None,
            run: structural_invariants,
        },
        Criterion {
            name: "ablation-direction",
            limit: None,
            run: ablation_direction,
        },
        Criterion {
            name: "determinism",
            limit: None,
            run: determinism,
        },
        Criterion {
            name: "acquisition-efficiency",
            limit: None,
            run: acquisition_efficiency,
        },
    ];
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let late = c.limit.is_some_and(|l| elapsed > l);
        let (pass, detail) = match result {
            Ok(d) if !late => (true, d),
            Ok(d) => (
                false,
                format!(
                    "{d}; over the {:.0} s limit",
                    secs(c.limit.unwrap_or_default())
                ),
            ),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!(
            "{} {:<26} {:>7.2}s  {}",
            if pass { "PASS" } else { "FAIL" },
            c.name,
            secs(elapsed),
            detail
        );
    }
    println!("acceptance: {} passed, {} failed", ran - failed, failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
