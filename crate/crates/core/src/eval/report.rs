//! CSV and JSON renderings with fixed column order.

use std::io::Write;

use serde::Serialize;

use crate::error::{PiaaError, Result};
use crate::eval::{AblationTable, BreakdownRow, EvalResult, SweepPoint};
use crate::paa::ImageScores;
use crate::zeroshot::ProbMatrix;

fn csv_err(e: csv::Error) -> PiaaError {
    PiaaError::Io(std::io::Error::other(e))
}

fn fmt_ap(ap: Option<f64>) -> String {
    ap.map_or_else(|| "undefined".to_string(), |v| v.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassEntry {
    pub class: String,
    pub ap: Option<f64>,
    pub num_pos: usize,
}

/// JSON form of an [`EvalResult`] with class names attached.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub map: f64,
    pub classes: Vec<ClassEntry>,
    pub undefined_classes: Vec<String>,
}

impl EvalReport {
    pub fn new(result: &EvalResult, class_names: &[String]) -> Self {
        Self {
            config_digest: result.config_digest.clone(),
            map: result.map,
            classes: class_names
                .iter()
                .zip(&result.per_class_ap)
                .zip(&result.num_pos)
                .map(|((name, &ap), &num_pos)| ClassEntry {
                    class: name.clone(),
                    ap,
                    num_pos,
                })
                .collect(),
            undefined_classes: result
                .undefined_classes
                .iter()
                .map(|&c| class_names[c].clone())
                .collect(),
        }
    }
}

/// `class,ap,num_pos`
pub fn write_eval_csv<W: Write>(result: &EvalResult, class_names: &[String], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["class", "ap", "num_pos"])
        .map_err(csv_err)?;
    for ((name, &ap), n) in class_names
        .iter()
        .zip(&result.per_class_ap)
        .zip(&result.num_pos)
    {
        out.write_record([name.clone(), fmt_ap(ap), n.to_string()])
            .map_err(csv_err)?;
    }
    out.write_record(["mAP".to_string(), result.map.to_string(), String::new()])
        .map_err(csv_err)?;
    out.flush()?;
    Ok(())
}

/// `pvcl,paa,map`
pub fn write_ablation_csv<W: Write>(table: &AblationTable, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["pvcl", "paa", "map"]).map_err(csv_err)?;
    for row in &table.rows {
        out.write_record([
            row.pvcl.to_string(),
            row.paa.to_string(),
            row.result.map.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// `param,value,map`
pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["param", "value", "map"])
        .map_err(csv_err)?;
    for p in points {
        out.write_record([
            p.param.to_string(),
            p.value.to_string(),
            p.result.map.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// `class,ap_cls_only,ap_patch_only,ap_fused`
pub fn write_breakdown_csv<W: Write>(rows: &[BreakdownRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["class", "ap_cls_only", "ap_patch_only", "ap_fused"])
        .map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.class_name.clone(),
            fmt_ap(r.ap_cls_only),
            fmt_ap(r.ap_patch_only),
            fmt_ap(r.ap_fused),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// `image_id, s_patch:<class>..., s_cls:<class>..., s_fused:<class>...`
pub fn write_scores_csv<W: Write>(
    ids: &[String],
    scores: &[ImageScores],
    class_names: &[String],
    w: W,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["image_id".to_string()];
    for prefix in ["s_patch", "s_cls", "s_fused"] {
        header.extend(class_names.iter().map(|c| format!("{prefix}:{c}")));
    }
    out.write_record(&header).map_err(csv_err)?;
    for (id, s) in ids.iter().zip(scores) {
        let mut rec = vec![id.clone()];
        rec.extend(
            s.s_patch
                .iter()
                .chain(&s.s_cls)
                .chain(&s.s_fused)
                .map(|v| v.to_string()),
        );
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    image_id: &'a str,
    s_patch: &'a [f64],
    s_cls: &'a [f64],
    s_fused: &'a [f64],
}

/// One JSON object per image.
pub fn write_scores_jsonl<W: Write>(
    ids: &[String],
    scores: &[ImageScores],
    mut w: W,
) -> Result<()> {
    for (id, s) in ids.iter().zip(scores) {
        let line = ScoreLine {
            image_id: id,
            s_patch: &s.s_patch,
            s_cls: &s.s_cls,
            s_fused: &s.s_fused,
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| PiaaError::InvalidData(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// `image_id,patch,<class>...` with one row per patch.
pub fn write_patch_dump<W: Write>(
    ids: &[String],
    probs: &[Option<ProbMatrix>],
    class_names: &[String],
    w: W,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["image_id".to_string(), "patch".to_string()];
    header.extend(class_names.iter().cloned());
    out.write_record(&header).map_err(csv_err)?;
    for (id, p) in ids.iter().zip(probs) {
        let Some(p) = p else { continue };
        for (k, row) in p.iter_rows().enumerate() {
            let mut rec = vec![id.clone(), k.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            out.write_record(&rec).map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_csv_has_fixed_columns() {
        let r = EvalResult {
            per_class_ap: vec![Some(0.5), None],
            map: 0.5,
            num_pos: vec![2, 0],
            undefined_classes: vec![1],
            config_digest: "abc".into(),
        };
        let names = vec!["cat".to_string(), "dog".to_string()];
        let mut buf = Vec::new();
        write_eval_csv(&r, &names, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "class,ap,num_pos\ncat,0.5,2\ndog,undefined,0\nmAP,0.5,\n"
        );
        let json = serde_json::to_value(EvalReport::new(&r, &names)).unwrap();
        assert_eq!(json["undefined_classes"][0], "dog");
    }

    #[test]
    fn score_exports() {
        let s = ImageScores {
            s_patch: vec![0.25, 0.75],
            s_cls: vec![0.5, 0.5],
            s_fused: vec![0.275, 0.725],
            alpha: 0.9,
        };
        let names = vec!["a".to_string(), "b".to_string()];
        let ids = vec!["img".to_string()];
        let mut buf = Vec::new();
        write_scores_csv(&ids, std::slice::from_ref(&s), &names, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(
            text.starts_with("image_id,s_patch:a,s_patch:b,s_cls:a,s_cls:b,s_fused:a,s_fused:b\n")
        );
        let mut buf = Vec::new();
        write_scores_jsonl(&ids, &[s], &mut buf).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["image_id"], "img");
        assert_eq!(v["s_fused"][1], 0.725);
    }
}
