//! Embedding containers and the PIAA binary format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PIAA" | u32 version | u32 flags | u32 d | u32 C | u64 num_images | u64 M
//! embedding files: u32 patch count per image
//!                  patches  M x d f32, row-major
//!                  cls      num_images x d f32, row-major
//!                  labels   num_images x C u8 (only when flags bit 0 is set)
//!                  ids      num_images x (u32 byte length, UTF-8 bytes)
//! prototype files: prototypes C x d f32, row-major
//!                  names    C x (u32 byte length, UTF-8 bytes)
//! ```
//!
//! Flags: bit 0 = labels present, bit 1 = text prototype file. For embedding
//! files `C` is the label column count (0 when unlabeled).

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{PiaaError, Result};

pub const MAGIC: [u8; 4] = *b"PIAA";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 36;

const FLAG_LABELS: u32 = 1;
const FLAG_TEXT: u32 = 1 << 1;

/// Rows closer than this to unit norm are left bit-for-bit untouched, which
/// keeps ingestion idempotent.
const UNIT_NORM_SLACK: f64 = 1e-6;

/// Whether rows are L2-normalized on ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    #[default]
    L2,
    Disabled,
}

/// Binary image-level labels, `num_images x num_classes`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    num_classes: usize,
    values: Vec<u8>,
}

impl LabelMatrix {
    pub fn new(num_classes: usize, values: Vec<u8>) -> Result<Self> {
        if num_classes == 0 {
            return Err(PiaaError::InvalidData(
                "label matrix with zero classes".into(),
            ));
        }
        if !values.len().is_multiple_of(num_classes) {
            return Err(PiaaError::InvalidData(format!(
                "label buffer of {} entries is not a multiple of {num_classes} classes",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(PiaaError::InvalidData(format!(
                "label value {v} is not 0 or 1"
            )));
        }
        Ok(Self {
            num_classes,
            values,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_images(&self) -> usize {
        self.values.len() / self.num_classes
    }

    pub fn row(&self, image: usize) -> &[u8] {
        &self.values[image * self.num_classes..(image + 1) * self.num_classes]
    }

    pub fn get(&self, image: usize, class: usize) -> bool {
        self.values[image * self.num_classes + class] == 1
    }

    pub fn set(&mut self, image: usize, class: usize, value: bool) {
        self.values[image * self.num_classes + class] = u8::from(value);
    }

    /// Labels of one class across all images.
    pub fn column(&self, class: usize) -> Vec<bool> {
        (0..self.num_images()).map(|i| self.get(i, class)).collect()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.values
    }
}

/// Patch and CLS embeddings for a collection of images.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    patch_offsets: Vec<(usize, usize)>,
    patches: Vec<f32>,
    cls: Vec<f32>,
    image_ids: Vec<String>,
    labels: Option<LabelMatrix>,
}

impl EmbeddingSet {
    /// Builds a set from raw buffers, validating shapes and normalizing rows.
    pub fn new(
        dim: usize,
        patch_counts: &[usize],
        mut patches: Vec<f32>,
        mut cls: Vec<f32>,
        image_ids: Vec<String>,
        labels: Option<LabelMatrix>,
        normalization: Normalization,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(PiaaError::InvalidData(
                "embedding dimension must be positive".into(),
            ));
        }
        let num_images = patch_counts.len();
        let total: usize = patch_counts.iter().sum();
        check_len(patches.len(), total, dim)?;
        check_len(cls.len(), num_images, dim)?;
        if image_ids.len() != num_images {
            return Err(PiaaError::DimensionMismatch {
                expected: num_images,
                actual: image_ids.len(),
            });
        }
        if let Some(labels) = &labels {
            if labels.num_images() != num_images {
                return Err(PiaaError::DimensionMismatch {
                    expected: num_images,
                    actual: labels.num_images(),
                });
            }
        }
        normalize_rows(&mut patches, dim, "patches", normalization)?;
        normalize_rows(&mut cls, dim, "cls", normalization)?;

        let mut patch_offsets = Vec::with_capacity(num_images);
        let mut start = 0;
        for &count in patch_counts {
            patch_offsets.push((start, count));
            start += count;
        }
        Ok(Self {
            dim,
            patch_offsets,
            patches,
            cls,
            image_ids,
            labels,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_images(&self) -> usize {
        self.patch_offsets.len()
    }

    pub fn num_patches(&self) -> usize {
        self.patches.len() / self.dim
    }

    pub fn patch_offsets(&self) -> &[(usize, usize)] {
        &self.patch_offsets
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn patches(&self) -> &[f32] {
        &self.patches
    }

    pub fn cls(&self) -> &[f32] {
        &self.cls
    }

    pub fn labels(&self) -> Option<&LabelMatrix> {
        self.labels.as_ref()
    }

    pub fn labels_mut(&mut self) -> Option<&mut LabelMatrix> {
        self.labels.as_mut()
    }

    pub fn set_labels(&mut self, labels: Option<LabelMatrix>) -> Result<()> {
        if let Some(l) = &labels {
            if l.num_images() != self.num_images() {
                return Err(PiaaError::DimensionMismatch {
                    expected: self.num_images(),
                    actual: l.num_images(),
                });
            }
        }
        self.labels = labels;
        Ok(())
    }

    /// Label-free view consumed by scoring, fitting and aggregation.
    pub fn view(&self) -> FeatureView<'_> {
        FeatureView {
            dim: self.dim,
            patch_offsets: &self.patch_offsets,
            patches: &self.patches,
            cls: &self.cls,
            image_ids: &self.image_ids,
            scale: 1.0,
        }
    }

    /// A new set holding only the listed images, in the given order.
    pub fn select_images(&self, images: &[usize]) -> Result<Self> {
        let d = self.dim;
        let mut counts = Vec::with_capacity(images.len());
        let mut patches = Vec::new();
        let mut cls = Vec::with_capacity(images.len() * d);
        let mut ids = Vec::with_capacity(images.len());
        let mut labels = self.labels.as_ref().map(|l| {
            (
                l.num_classes(),
                Vec::with_capacity(images.len() * l.num_classes()),
            )
        });
        for &img in images {
            let (start, count) = *self.patch_offsets.get(img).ok_or_else(|| {
                PiaaError::InvalidParameter(format!("image index {img} out of range"))
            })?;
            counts.push(count);
            patches.extend_from_slice(&self.patches[start * d..(start + count) * d]);
            cls.extend_from_slice(&self.cls[img * d..(img + 1) * d]);
            ids.push(self.image_ids[img].clone());
            if let (Some((_, buf)), Some(l)) = (labels.as_mut(), self.labels.as_ref()) {
                buf.extend_from_slice(l.row(img));
            }
        }
        let labels = labels.map(|(c, v)| LabelMatrix::new(c, v)).transpose()?;
        Self::new(
            d,
            &counts,
            patches,
            cls,
            ids,
            labels,
            Normalization::Disabled,
        )
    }
}

/// Read-only, label-free access to an [`EmbeddingSet`].
///
/// `scale` multiplies every patch and CLS row on access (in 64-bit), which
/// lets analyses apply a global rescaling without touching stored bits.
#[derive(Debug, Clone, Copy)]
pub struct FeatureView<'a> {
    dim: usize,
    patch_offsets: &'a [(usize, usize)],
    patches: &'a [f32],
    cls: &'a [f32],
    image_ids: &'a [String],
    scale: f64,
}

impl<'a> FeatureView<'a> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_images(&self) -> usize {
        self.patch_offsets.len()
    }

    pub fn num_patches(&self) -> usize {
        self.patches.len() / self.dim
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self {
            scale: self.scale * factor,
            ..self
        }
    }

    pub fn image_ids(&self) -> &'a [String] {
        self.image_ids
    }

    /// Global patch indices belonging to `image`.
    pub fn image_patches(&self, image: usize) -> Range<usize> {
        let (start, count) = self.patch_offsets[image];
        start..start + count
    }

    /// Stored (unscaled) patch row.
    pub fn raw_patch(&self, index: usize) -> &'a [f32] {
        &self.patches[index * self.dim..(index + 1) * self.dim]
    }

    pub fn raw_cls(&self, image: usize) -> &'a [f32] {
        &self.cls[image * self.dim..(image + 1) * self.dim]
    }

    /// Scaled patch row written into `out`.
    pub fn patch_into(&self, index: usize, out: &mut [f64]) {
        let s = self.scale;
        for (o, &x) in out.iter_mut().zip(self.raw_patch(index)) {
            *o = f64::from(x) * s;
        }
    }

    pub fn patch(&self, index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.patch_into(index, &mut out);
        out
    }

    pub fn cls(&self, image: usize) -> Vec<f64> {
        let s = self.scale;
        self.raw_cls(image)
            .iter()
            .map(|&x| f64::from(x) * s)
            .collect()
    }
}

/// Class-name prompt embeddings in the shared vision-language space.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPrototypeSet {
    dim: usize,
    prototypes: Vec<f32>,
    class_names: Vec<String>,
}

impl TextPrototypeSet {
    pub fn new(
        dim: usize,
        mut prototypes: Vec<f32>,
        class_names: Vec<String>,
        normalization: Normalization,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(PiaaError::InvalidData(
                "embedding dimension must be positive".into(),
            ));
        }
        if class_names.is_empty() {
            return Err(PiaaError::InvalidData(
                "prototype set with zero classes".into(),
            ));
        }
        check_len(prototypes.len(), class_names.len(), dim)?;
        let mut seen = HashSet::with_capacity(class_names.len());
        for name in &class_names {
            if !seen.insert(name.as_str()) {
                return Err(PiaaError::DuplicateClassName(name.clone()));
            }
        }
        normalize_rows(&mut prototypes, dim, "prototypes", normalization)?;
        Ok(Self {
            dim,
            prototypes,
            class_names,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.class_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| PiaaError::UnknownClass(name.to_string()))
    }

    pub fn prototype(&self, class: usize) -> &[f32] {
        &self.prototypes[class * self.dim..(class + 1) * self.dim]
    }

    pub fn prototypes(&self) -> &[f32] {
        &self.prototypes
    }

    /// Reorders classes: row `i` of the result is row `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut protos = Vec::with_capacity(self.prototypes.len());
        let mut names = Vec::with_capacity(order.len());
        for &c in order {
            protos.extend_from_slice(self.prototype(c));
            names.push(self.class_names[c].clone());
        }
        Self::new(self.dim, protos, names, Normalization::Disabled)
    }
}

fn check_len(actual: usize, rows: usize, dim: usize) -> Result<()> {
    let expected = rows
        .checked_mul(dim)
        .ok_or_else(|| PiaaError::DimensionOverflow(format!("{rows} rows x {dim} dims")))?;
    if actual != expected {
        return Err(PiaaError::DimensionMismatch { expected, actual });
    }
    Ok(())
}

fn normalize_rows(
    data: &mut [f32],
    dim: usize,
    section: &'static str,
    normalization: Normalization,
) -> Result<()> {
    for (row, chunk) in data.chunks_exact_mut(dim).enumerate() {
        let norm = chunk
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(PiaaError::NonFinite(section));
        }
        if norm == 0.0 {
            return Err(PiaaError::ZeroNorm { section, row });
        }
        if normalization == Normalization::L2 && (norm - 1.0).abs() > UNIT_NORM_SLACK {
            for x in chunk.iter_mut() {
                *x = (f64::from(*x) / norm) as f32;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Binary I/O
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub flags: u32,
    pub dim: u32,
    pub num_classes: u32,
    pub num_images: u64,
    pub num_patches: u64,
}

impl Header {
    pub fn has_labels(&self) -> bool {
        self.flags & FLAG_LABELS != 0
    }

    pub fn is_text(&self) -> bool {
        self.flags & FLAG_TEXT != 0
    }

    fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.flags.to_le_bytes())?;
        w.write_all(&self.dim.to_le_bytes())?;
        w.write_all(&self.num_classes.to_le_bytes())?;
        w.write_all(&self.num_images.to_le_bytes())?;
        w.write_all(&self.num_patches.to_le_bytes())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let magic: [u8; 4] = read_array(r, "header")?;
        if magic != MAGIC {
            return Err(PiaaError::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = read_u32(r, "header")?;
        if version != VERSION {
            return Err(PiaaError::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        Ok(Self {
            flags: read_u32(r, "header")?,
            dim: read_u32(r, "header")?,
            num_classes: read_u32(r, "header")?,
            num_images: read_u64(r, "header")?,
            num_patches: read_u64(r, "header")?,
        })
    }
}

fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| PiaaError::DimensionOverflow(format!("{what} = {value}")))
}

fn to_usize(value: u64, what: &str) -> Result<usize> {
    usize::try_from(value).map_err(|_| PiaaError::DimensionOverflow(format!("{what} = {value}")))
}

pub(crate) fn map_eof(section: &'static str) -> impl Fn(io::Error) -> PiaaError {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            PiaaError::Truncated(section)
        } else {
            PiaaError::Io(e)
        }
    }
}

pub(crate) fn read_array<R: Read, const N: usize>(
    r: &mut R,
    section: &'static str,
) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(map_eof(section))?;
    Ok(buf)
}

pub(crate) fn read_u32<R: Read>(r: &mut R, section: &'static str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r, section)?))
}

pub(crate) fn read_u64<R: Read>(r: &mut R, section: &'static str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r, section)?))
}

fn read_f32s<R: Read>(r: &mut R, len: usize, section: &'static str) -> Result<Vec<f32>> {
    const CHUNK: usize = 1 << 16;
    let mut out = Vec::with_capacity(len.min(1 << 24));
    let mut buf = vec![0u8; CHUNK * 4];
    let mut remaining = len;
    while remaining > 0 {
        let n = remaining.min(CHUNK);
        let bytes = &mut buf[..n * 4];
        r.read_exact(bytes).map_err(map_eof(section))?;
        out.extend(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        );
        remaining -= n;
    }
    Ok(out)
}

fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(data.len().min(1 << 16) * 4);
    for chunk in data.chunks(1 << 16) {
        buf.clear();
        for x in chunk {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub(crate) fn read_string<R: Read>(r: &mut R, section: &'static str) -> Result<String> {
    let len = read_u32(r, section)? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes).map_err(map_eof(section))?;
    String::from_utf8(bytes).map_err(|e| PiaaError::InvalidData(format!("{section}: {e}")))
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&to_u32(s.len(), "string length")?.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(PiaaError::InvalidData(
            "trailing bytes after payload".into(),
        )),
    }
}

/// Serializes an embedding set to any writer.
pub fn write_embeddings<W: Write>(set: &EmbeddingSet, w: &mut W) -> Result<()> {
    let header = Header {
        flags: if set.labels.is_some() { FLAG_LABELS } else { 0 },
        dim: to_u32(set.dim, "d")?,
        num_classes: to_u32(set.labels.as_ref().map_or(0, |l| l.num_classes()), "C")?,
        num_images: set.num_images() as u64,
        num_patches: set.num_patches() as u64,
    };
    header.write_to(w)?;
    for &(_, count) in &set.patch_offsets {
        w.write_all(&to_u32(count, "patch count")?.to_le_bytes())?;
    }
    write_f32s(w, &set.patches)?;
    write_f32s(w, &set.cls)?;
    if let Some(labels) = &set.labels {
        w.write_all(labels.as_bytes())?;
    }
    for id in &set.image_ids {
        write_string(w, id)?;
    }
    Ok(())
}

/// Parses an embedding set from any reader.
pub fn read_embeddings<R: Read>(r: &mut R, normalization: Normalization) -> Result<EmbeddingSet> {
    let header = Header::read_from(r)?;
    if header.is_text() {
        return Err(PiaaError::InvalidData(
            "expected an embedding file, found a text prototype file".into(),
        ));
    }
    let d = header.dim as usize;
    let num_images = to_usize(header.num_images, "num_images")?;
    let m = to_usize(header.num_patches, "M")?;
    let mut counts = Vec::with_capacity(num_images.min(1 << 20));
    for _ in 0..num_images {
        counts.push(read_u32(r, "patch counts")? as usize);
    }
    if counts.iter().sum::<usize>() != m {
        return Err(PiaaError::InvalidData(format!(
            "patch counts sum to {} but header declares M = {m}",
            counts.iter().sum::<usize>()
        )));
    }
    let patch_len = m
        .checked_mul(d)
        .ok_or_else(|| PiaaError::DimensionOverflow(format!("M={m} x d={d}")))?;
    let patches = read_f32s(r, patch_len, "patches")?;
    let cls = read_f32s(r, num_images * d, "cls")?;
    let labels = if header.has_labels() {
        let c = header.num_classes as usize;
        let mut bytes = vec![0u8; num_images * c];
        r.read_exact(&mut bytes).map_err(map_eof("labels"))?;
        Some(LabelMatrix::new(c, bytes)?)
    } else {
        None
    };
    let mut ids = Vec::with_capacity(num_images.min(1 << 20));
    for _ in 0..num_images {
        ids.push(read_string(r, "image ids")?);
    }
    expect_eof(r)?;
    EmbeddingSet::new(d, &counts, patches, cls, ids, labels, normalization)
}

pub fn write_embedding_file(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_embeddings(set, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_embedding_file(
    path: impl AsRef<Path>,
    normalization: Normalization,
) -> Result<EmbeddingSet> {
    let mut r = BufReader::new(File::open(path)?);
    read_embeddings(&mut r, normalization)
}

pub fn write_text_prototypes<W: Write>(set: &TextPrototypeSet, w: &mut W) -> Result<()> {
    let header = Header {
        flags: FLAG_TEXT,
        dim: to_u32(set.dim, "d")?,
        num_classes: to_u32(set.num_classes(), "C")?,
        num_images: 0,
        num_patches: 0,
    };
    header.write_to(w)?;
    write_f32s(w, &set.prototypes)?;
    for name in &set.class_names {
        write_string(w, name)?;
    }
    Ok(())
}

pub fn read_text_prototypes<R: Read>(
    r: &mut R,
    normalization: Normalization,
) -> Result<TextPrototypeSet> {
    let header = Header::read_from(r)?;
    if !header.is_text() || header.num_classes == 0 {
        return Err(PiaaError::InvalidData(
            "expected a text prototype file (flag bit 1, C > 0)".into(),
        ));
    }
    let d = header.dim as usize;
    let c = header.num_classes as usize;
    let prototypes = read_f32s(r, c * d, "prototypes")?;
    let mut names = Vec::with_capacity(c);
    for _ in 0..c {
        names.push(read_string(r, "class names")?);
    }
    expect_eof(r)?;
    TextPrototypeSet::new(d, prototypes, names, normalization)
}

pub fn write_text_prototype_file(set: &TextPrototypeSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_text_prototypes(set, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_text_prototype_file(
    path: impl AsRef<Path>,
    normalization: Normalization,
) -> Result<TextPrototypeSet> {
    let mut r = BufReader::new(File::open(path)?);
    read_text_prototypes(&mut r, normalization)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_image_set() -> EmbeddingSet {
        EmbeddingSet::new(
            2,
            &[4],
            vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0],
            vec![1.0, 0.0],
            vec!["img0".into()],
            None,
            Normalization::L2,
        )
        .unwrap()
    }

    fn to_bytes(set: &EmbeddingSet) -> Vec<u8> {
        let mut buf = Vec::new();
        write_embeddings(set, &mut buf).unwrap();
        buf
    }

    #[test]
    fn empty_set_round_trips() {
        let set =
            EmbeddingSet::new(3, &[], vec![], vec![], vec![], None, Normalization::L2).unwrap();
        let bytes = to_bytes(&set);
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = read_embeddings(&mut bytes.as_slice(), Normalization::L2).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.num_images(), 0);
    }

    #[test]
    fn byte_count_matches_layout() {
        let bytes = to_bytes(&one_image_set());
        let counts = 4;
        let patches = 4 * 2 * 4;
        let cls = 2 * 4;
        let ids = 4 + "img0".len();
        assert_eq!(bytes.len(), HEADER_LEN + counts + patches + cls + ids);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = to_bytes(&one_image_set());
        bytes[0] = b'X';
        let err = read_embeddings(&mut bytes.as_slice(), Normalization::L2).unwrap_err();
        assert!(matches!(err, PiaaError::BadMagic { .. }), "{err}");
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn version_and_truncation_errors() {
        let mut bytes = to_bytes(&one_image_set());
        bytes[4] = 9;
        assert!(matches!(
            read_embeddings(&mut bytes.as_slice(), Normalization::L2),
            Err(PiaaError::VersionMismatch { found: 9, .. })
        ));
        let bytes = to_bytes(&one_image_set());
        let cut = &bytes[..bytes.len() - 20];
        assert!(matches!(
            read_embeddings(&mut &cut[..], Normalization::L2),
            Err(PiaaError::Truncated(_))
        ));
    }

    #[test]
    fn rows_are_renormalized_and_zero_rows_rejected() {
        let set = EmbeddingSet::new(
            2,
            &[1],
            vec![2.0, 0.0],
            vec![0.0, 3.0],
            vec!["a".into()],
            None,
            Normalization::L2,
        )
        .unwrap();
        assert_eq!(set.view().raw_patch(0), &[1.0, 0.0]);
        assert_eq!(set.view().raw_cls(0), &[0.0, 1.0]);

        let err = EmbeddingSet::new(
            2,
            &[1],
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec!["a".into()],
            None,
            Normalization::L2,
        )
        .unwrap_err();
        assert!(err.to_string().contains("zero-norm vector"), "{err}");
    }

    #[test]
    fn disabled_normalization_keeps_scale() {
        let set = EmbeddingSet::new(
            2,
            &[1],
            vec![2.0, 0.0],
            vec![1.0, 0.0],
            vec!["a".into()],
            None,
            Normalization::Disabled,
        )
        .unwrap();
        assert_eq!(set.view().raw_patch(0), &[2.0, 0.0]);
    }

    #[test]
    fn labels_must_be_binary() {
        assert!(LabelMatrix::new(2, vec![0, 1, 1, 0]).is_ok());
        assert!(LabelMatrix::new(2, vec![0, 2]).is_err());
    }

    #[test]
    fn text_prototypes_round_trip_and_reject_duplicates() {
        let set = TextPrototypeSet::new(
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            vec!["cat".into(), "dog".into()],
            Normalization::L2,
        )
        .unwrap();
        let dot: f32 = set
            .prototype(0)
            .iter()
            .zip(set.prototype(1))
            .map(|(a, b)| a * b)
            .sum();
        assert_eq!(dot, 0.0);
        let mut buf = Vec::new();
        write_text_prototypes(&set, &mut buf).unwrap();
        let back = read_text_prototypes(&mut buf.as_slice(), Normalization::L2).unwrap();
        assert_eq!(back, set);

        let err = TextPrototypeSet::new(
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            vec!["cat".into(), "cat".into()],
            Normalization::L2,
        )
        .unwrap_err();
        assert!(matches!(err, PiaaError::DuplicateClassName(_)));
    }

    #[test]
    fn file_kinds_are_not_interchangeable() {
        let set =
            TextPrototypeSet::new(2, vec![1.0, 0.0], vec!["a".into()], Normalization::L2).unwrap();
        let mut buf = Vec::new();
        write_text_prototypes(&set, &mut buf).unwrap();
        assert!(read_embeddings(&mut buf.as_slice(), Normalization::L2).is_err());
        let bytes = to_bytes(&one_image_set());
        assert!(read_text_prototypes(&mut bytes.as_slice(), Normalization::L2).is_err());
    }

    fn arb_set() -> impl Strategy<Value = EmbeddingSet> {
        (
            1usize..6,
            prop::collection::vec(0usize..5, 0..5),
            any::<bool>(),
        )
            .prop_flat_map(|(d, counts, with_labels)| {
                let m: usize = counts.iter().sum();
                let n = counts.len();
                (
                    Just(d),
                    Just(counts),
                    prop::collection::vec(0.1f32..2.0, m * d),
                    prop::collection::vec(-2.0f32..-0.1, n * d),
                    prop::collection::vec(0u8..2, if with_labels { n * 3 } else { 0 }),
                    Just(with_labels),
                )
            })
            .prop_map(|(d, counts, patches, cls, labels, with_labels)| {
                let ids = (0..counts.len()).map(|i| format!("image-{i}")).collect();
                let labels = with_labels.then(|| LabelMatrix::new(3, labels).unwrap());
                EmbeddingSet::new(d, &counts, patches, cls, ids, labels, Normalization::L2).unwrap()
            })
    }

    proptest! {
        #[test]
        fn write_read_is_identity(set in arb_set()) {
            let bytes = to_bytes(&set);
            let back = read_embeddings(&mut bytes.as_slice(), Normalization::L2).unwrap();
            prop_assert_eq!(&back, &set);
            for row in back.patches().chunks_exact(back.dim()) {
                let n: f64 = row.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() <= 1e-4);
            }
            let offsets = back.patch_offsets();
            let mut next = 0;
            for &(start, count) in offsets {
                prop_assert_eq!(start, next);
                next += count;
            }
            prop_assert_eq!(next, back.num_patches());
        }

        #[test]
        fn normalization_is_idempotent(rows in prop::collection::vec(-3.0f32..3.0, 4..40)) {
            let d = 4;
            let n = rows.len() / d;
            let mut data = rows[..n * d].to_vec();
            prop_assume!(data.chunks_exact(d).all(|r| r.iter().any(|&x| x.abs() > 1e-3)));
            normalize_rows(&mut data, d, "t", Normalization::L2).unwrap();
            let once = data.clone();
            normalize_rows(&mut data, d, "t", Normalization::L2).unwrap();
            prop_assert_eq!(once, data);
        }
    }
}
