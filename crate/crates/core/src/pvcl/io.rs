//! PIAC classifier files.
//!
//! ```text
//! magic "PIAC" | u32 version | u32 flags (bit 0 = final) | u32 d | u32 C
//! W  C x d f64 | b  C f64 | mu  C x d f64 | precision  d x d f64
//! fallback bitmap  ceil(C / 8) bytes, class c at bit (c % 8) of byte c / 8
//! u64 metadata length | metadata JSON (UTF-8)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{PiaaError, Result};
use crate::pvcl::gda::{GdaClassifier, Provenance};
use crate::store::{map_eof, read_array, read_u32, read_u64};

pub const CLASSIFIER_MAGIC: [u8; 4] = *b"PIAC";
pub const CLASSIFIER_VERSION: u32 = 1;

fn write_f64s<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, len: usize, section: &'static str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes).map_err(map_eof(section))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect())
}

pub fn write_classifier<W: Write>(
    classifier: &GdaClassifier,
    metadata: &serde_json::Value,
    w: &mut W,
) -> Result<()> {
    let d = u32::try_from(classifier.dim())
        .map_err(|_| PiaaError::DimensionOverflow("classifier dimension".into()))?;
    let c = u32::try_from(classifier.num_classes())
        .map_err(|_| PiaaError::DimensionOverflow("classifier classes".into()))?;
    let flags = u32::from(classifier.provenance() == Provenance::Final);
    w.write_all(&CLASSIFIER_MAGIC)?;
    w.write_all(&CLASSIFIER_VERSION.to_le_bytes())?;
    w.write_all(&flags.to_le_bytes())?;
    w.write_all(&d.to_le_bytes())?;
    w.write_all(&c.to_le_bytes())?;
    write_f64s(w, classifier.weights())?;
    write_f64s(w, classifier.biases())?;
    write_f64s(w, classifier.means())?;
    write_f64s(w, classifier.precision())?;
    let mut bitmap = vec![0u8; classifier.num_classes().div_ceil(8)];
    for &class in classifier.fallback_classes() {
        bitmap[class / 8] |= 1 << (class % 8);
    }
    w.write_all(&bitmap)?;
    let json = serde_json::to_vec(metadata)
        .map_err(|e| PiaaError::InvalidData(format!("metadata: {e}")))?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(())
}

pub fn read_classifier<R: Read>(r: &mut R) -> Result<(GdaClassifier, serde_json::Value)> {
    let magic: [u8; 4] = read_array(r, "classifier header")?;
    if magic != CLASSIFIER_MAGIC {
        return Err(PiaaError::BadMagic {
            expected: CLASSIFIER_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(r, "classifier header")?;
    if version != CLASSIFIER_VERSION {
        return Err(PiaaError::VersionMismatch {
            expected: CLASSIFIER_VERSION,
            found: version,
        });
    }
    let flags = read_u32(r, "classifier header")?;
    let d = read_u32(r, "classifier header")? as usize;
    let c = read_u32(r, "classifier header")? as usize;
    let weights = read_f64s(r, c * d, "weights")?;
    let biases = read_f64s(r, c, "biases")?;
    let means = read_f64s(r, c * d, "means")?;
    let precision = read_f64s(r, d * d, "precision")?;
    let mut bitmap = vec![0u8; c.div_ceil(8)];
    r.read_exact(&mut bitmap)
        .map_err(map_eof("fallback bitmap"))?;
    let fallback = (0..c)
        .filter(|&k| bitmap[k / 8] & (1 << (k % 8)) != 0)
        .collect();
    let len = read_u64(r, "metadata")? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(map_eof("metadata"))?;
    let metadata = serde_json::from_slice(&json)
        .map_err(|e| PiaaError::InvalidData(format!("metadata: {e}")))?;
    let provenance = if flags & 1 != 0 {
        Provenance::Final
    } else {
        Provenance::Preliminary
    };
    let classifier =
        GdaClassifier::from_parts(d, weights, biases, means, precision, provenance, fallback)?;
    Ok((classifier, metadata))
}

pub fn write_classifier_file(
    classifier: &GdaClassifier,
    metadata: &serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_classifier(classifier, metadata, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_classifier_file(path: impl AsRef<Path>) -> Result<(GdaClassifier, serde_json::Value)> {
    read_classifier(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GdaClassifier {
        GdaClassifier::from_parts(
            2,
            vec![2.0, 0.0, -2.0, 0.0, 0.5, 0.5],
            vec![-1.0, -1.0, -0.25],
            vec![1.0, 0.0, -1.0, 0.0, 0.1, 0.1],
            vec![2.0, 0.0, 0.0, 0.5],
            Provenance::Final,
            vec![2],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let cls = sample();
        let meta = serde_json::json!({"class_names": ["a", "b", "c"], "k": 512});
        let mut buf = Vec::new();
        write_classifier(&cls, &meta, &mut buf).unwrap();
        let (back, meta_back) = read_classifier(&mut buf.as_slice()).unwrap();
        assert_eq!(back, cls);
        assert_eq!(meta_back, meta);
    }

    #[test]
    fn rejects_embedding_magic() {
        let mut buf = Vec::new();
        write_classifier(&sample(), &serde_json::Value::Null, &mut buf).unwrap();
        buf[3] = b'A';
        assert!(matches!(
            read_classifier(&mut buf.as_slice()),
            Err(PiaaError::BadMagic { .. })
        ));
    }
}
