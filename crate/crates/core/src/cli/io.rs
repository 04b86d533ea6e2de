//! Input resolution, file loading and the run manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{CliError, InputArgs};
use crate::config::PipelineConfig;
use crate::error::PiaaError;
use crate::eval::EvalResult;
use crate::pvcl::io::read_classifier_file;
use crate::pvcl::GdaClassifier;
use crate::store::{
    read_embedding_file, read_text_prototype_file, EmbeddingSet, LabelMatrix, Normalization,
    TextPrototypeSet,
};

/// The optional JSON input manifest. Relative paths resolve against its directory.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct InputManifest {
    embeddings: Option<PathBuf>,
    adapt: Option<PathBuf>,
    prototypes: Option<PathBuf>,
    classifier: Option<PathBuf>,
    class_names: Option<Vec<String>>,
    split: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Inputs {
    pub embeddings: Option<PathBuf>,
    pub adapt: Option<PathBuf>,
    pub prototypes: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    pub class_names: Option<Vec<String>>,
    pub split: Option<String>,
}

impl Inputs {
    pub fn resolve(args: &InputArgs) -> Result<Self, CliError> {
        let manifest = match &args.inputs {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let m: InputManifest = serde_json::from_str(&text)
                    .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
                let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
                let rebase = |p: Option<PathBuf>| p.map(|p| base.join(p));
                InputManifest {
                    embeddings: rebase(m.embeddings),
                    adapt: rebase(m.adapt),
                    prototypes: rebase(m.prototypes),
                    classifier: rebase(m.classifier),
                    ..m
                }
            }
            None => InputManifest::default(),
        };
        Ok(Self {
            embeddings: args.embeddings.clone().or(manifest.embeddings),
            adapt: args.adapt.clone().or(manifest.adapt),
            prototypes: args.prototypes.clone().or(manifest.prototypes),
            classifier: args.classifier.clone().or(manifest.classifier),
            class_names: manifest.class_names,
            split: manifest.split,
        })
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
        path.as_deref()
            .ok_or_else(|| CliError::usage(format!("missing required input --{flag}")))
    }
}

fn normalization(cfg: &PipelineConfig) -> Normalization {
    if cfg.normalize {
        Normalization::L2
    } else {
        Normalization::Disabled
    }
}

pub fn load_set(path: &Path, cfg: &PipelineConfig) -> Result<EmbeddingSet, CliError> {
    Ok(read_embedding_file(path, normalization(cfg))
        .with_context(|| format!("reading {}", path.display()))?)
}

/// Prototypes in file order, or reordered to `class_names` with the order applied.
pub struct LoadedPrototypes {
    pub prototypes: TextPrototypeSet,
    pub order: Option<Vec<usize>>,
}

impl LoadedPrototypes {
    /// Reorders label columns to match the prototypes. Labels follow the prototype file order.
    pub fn align_labels(&self, set: &mut EmbeddingSet) -> Result<(), CliError> {
        let (Some(order), Some(labels)) = (&self.order, set.labels()) else {
            return Ok(());
        };
        if labels.num_classes() != order.len() {
            return Err(anyhow::Error::from(PiaaError::InvalidData(format!(
                "labels have {} classes, prototypes have {}",
                labels.num_classes(),
                order.len()
            )))
            .into());
        }
        let values: Vec<u8> = (0..labels.num_images())
            .flat_map(|i| order.iter().map(move |&c| labels.row(i)[c]))
            .collect();
        let aligned = LabelMatrix::new(order.len(), values)?;
        set.set_labels(Some(aligned))?;
        Ok(())
    }
}

/// Loads prototypes, reordered to `class_names` when the manifest lists them.
pub fn load_prototypes(
    path: &Path,
    cfg: &PipelineConfig,
    class_names: Option<&[String]>,
) -> Result<LoadedPrototypes, CliError> {
    let protos = read_text_prototype_file(path, normalization(cfg))
        .with_context(|| format!("reading {}", path.display()))?;
    let Some(names) = class_names else {
        return Ok(LoadedPrototypes {
            prototypes: protos,
            order: None,
        });
    };
    if names.len() != protos.num_classes() {
        return Err(anyhow::Error::from(PiaaError::InvalidData(format!(
            "manifest lists {} classes, prototypes have {}",
            names.len(),
            protos.num_classes()
        )))
        .into());
    }
    let order = names
        .iter()
        .map(|n| protos.class_index(n))
        .collect::<crate::Result<Vec<usize>>>()?;
    Ok(LoadedPrototypes {
        prototypes: protos.permuted(&order)?,
        order: Some(order),
    })
}

/// Loads a classifier and checks it against the prototypes' dimension and classes.
pub fn load_classifier(path: &Path, protos: &TextPrototypeSet) -> Result<GdaClassifier, CliError> {
    let (classifier, meta) =
        read_classifier_file(path).with_context(|| format!("reading {}", path.display()))?;
    if classifier.dim() != protos.dim() || classifier.num_classes() != protos.num_classes() {
        return Err(anyhow::Error::from(PiaaError::InvalidData(format!(
            "classifier is {} classes x {} dims, prototypes are {} x {}",
            classifier.num_classes(),
            classifier.dim(),
            protos.num_classes(),
            protos.dim()
        )))
        .into());
    }
    if let Some(names) = meta.get("class_names").and_then(Value::as_array) {
        let same = names.len() == protos.num_classes()
            && names
                .iter()
                .zip(protos.class_names())
                .all(|(a, b)| a.as_str() == Some(b.as_str()));
        if !same {
            return Err(anyhow::Error::from(PiaaError::InvalidData(
                "classifier class names differ from the prototypes".into(),
            ))
            .into());
        }
    }
    Ok(classifier)
}

/// Writes with a buffered file, attaching the path to errors.
pub fn write_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> crate::Result<()>,
) -> Result<(), CliError> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    f(&mut w).with_context(|| format!("writing {}", path.display()))?;
    w.flush()
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)
            .map_err(|e| PiaaError::InvalidData(e.to_string()))?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Timings {
    pub acquisition_ms: Option<f64>,
    pub inference_ms: Option<f64>,
    pub total_ms: f64,
}

/// Summary of one invocation, written as `manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub config: Option<&'a PipelineConfig>,
    pub config_digest: String,
    pub threads: usize,
    pub inputs: Value,
    pub outputs: Vec<String>,
    pub timings: Timings,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub details: Value,
}

impl<'a> RunManifest<'a> {
    pub fn new(command: &'a str, config: Option<&'a PipelineConfig>, threads: usize) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config,
            config_digest: config.map(PipelineConfig::digest).unwrap_or_default(),
            threads,
            inputs: json!({}),
            outputs: Vec::new(),
            timings: Timings::default(),
            details: Value::Null,
        }
    }

    pub fn write(&self, out_dir: &Path) -> Result<(), CliError> {
        write_json(&out_dir.join("manifest.json"), self)
    }
}

/// Fails with a data error when a class has no positives, unless allowed.
pub fn check_defined(
    result: &EvalResult,
    class_names: &[String],
    allow_empty: bool,
) -> Result<(), CliError> {
    if allow_empty || result.undefined_classes.is_empty() {
        return Ok(());
    }
    let names: Vec<&str> = result
        .undefined_classes
        .iter()
        .map(|&c| class_names[c].as_str())
        .collect();
    Err(anyhow::anyhow!(
        "AP undefined for classes without positives: {} (pass --allow-empty-classes to accept)",
        names.join(", ")
    )
    .into())
}
