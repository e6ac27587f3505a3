//! Instance-level accuracy, confusion matrices, ROC/AUC, and result and embedding exports.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::data::{stack, ImageInstance};
use crate::error::{Error, Result};
use crate::models::{CnnModel, VaeModel};

const EVAL_BATCH: usize = 256;

pub fn accuracy(predictions: &[usize], truths: &[usize]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::shape("predictions", truths.len(), predictions.len()));
    }
    if truths.is_empty() {
        return Err(Error::Parameter("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truths.len() as f64)
}

/// `matrix[truth][prediction]` counts.
pub fn confusion(predictions: &[usize], truths: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != truths.len() {
        return Err(Error::shape("predictions", truths.len(), predictions.len()));
    }
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        for label in [p, t] {
            if label >= classes {
                return Err(Error::LabelRange { label, classes });
            }
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Score threshold of each point (`score >= threshold` is positive); the first is `+inf`.
    #[serde(with = "thresholds_serde")]
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

/// JSON has no infinity, so thresholds are written as numbers or the string `"inf"`.
mod thresholds_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let reprs: Vec<Repr> = values
            .iter()
            .map(|&v| if v.is_finite() { Repr::Number(v) } else { Repr::Text(v.to_string()) })
            .collect();
        reprs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?
            .into_iter()
            .map(|r| match r {
                Repr::Number(v) => Ok(v),
                Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
            })
            .collect()
    }
}

/// Exact ROC over every distinct score, with tied scores entering as one step, and the
/// trapezoidal area under it.
pub fn roc_auc(scores: &[f64], truths: &[bool]) -> Result<RocCurve> {
    if scores.len() != truths.len() {
        return Err(Error::shape("roc scores", truths.len(), scores.len()));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("roc score {s}")));
    }
    let positives = truths.iter().filter(|&&t| t).count();
    let negatives = truths.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Degenerate(format!(
            "roc needs both classes, got {positives} positive and {negatives} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if truths[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let point = (fp as f64 / negatives as f64, tp as f64 / positives as f64);
        let last = *points.last().expect("non-empty");
        auc += (point.0 - last.0) * (point.1 + last.1) / 2.0;
        points.push(point);
        thresholds.push(threshold);
    }
    Ok(RocCurve {
        points,
        thresholds,
        auc,
    })
}

pub fn write_roc_csv(curve: &RocCurve, mut w: impl Write) -> Result<()> {
    let mut s = String::from("threshold,fpr,tpr\n");
    for (t, (fpr, tpr)) in curve.thresholds.iter().zip(&curve.points) {
        s.push_str(&format!("{t},{fpr},{tpr}\n"));
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// Class predictions and probability rows for `instances`, in order.
pub fn predict_instances(model: &CnnModel, instances: &[ImageInstance]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut preds = Vec::with_capacity(instances.len());
    let mut probs = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(EVAL_BATCH) {
        let refs: Vec<&ImageInstance> = chunk.iter().collect();
        let (p, t) = model.predict(&stack(model.arch.input, &refs)?)?;
        preds.extend(p);
        probs.extend((0..t.batch()).map(|i| t.item(i).to_vec()));
    }
    Ok((preds, probs))
}

fn true_labels(instances: &[ImageInstance]) -> Result<Vec<usize>> {
    instances
        .iter()
        .map(|i| {
            i.true_label
                .ok_or_else(|| Error::Parameter(format!("instance {} has no true label", i.id)))
        })
        .collect()
}

/// Instance-level accuracy against true labels.
pub fn evaluate_accuracy(model: &CnnModel, instances: &[ImageInstance]) -> Result<f64> {
    let truths = true_labels(instances)?;
    let (preds, _) = predict_instances(model, instances)?;
    accuracy(&preds, &truths)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub instances: usize,
    pub confusion: Vec<Vec<usize>>,
    /// One-vs-rest class whose probability drives the ROC.
    pub positive_class: usize,
    pub roc: Option<RocCurve>,
    pub auc: Option<f64>,
    pub config_hash: String,
}

impl EvalReport {
    pub fn write_json(&self, mut w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, self).map_err(|e| Error::format("eval report", e.to_string()))?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn read_json(r: impl std::io::Read) -> Result<Self> {
        serde_json::from_reader(r).map_err(|e| Error::format("eval report", e.to_string()))
    }
}

/// Accuracy, confusion and a one-vs-rest ROC for `positive_class`. The ROC is omitted when
/// the evaluated set lacks either positives or negatives.
pub fn evaluate(
    model: &CnnModel,
    instances: &[ImageInstance],
    positive_class: usize,
    config_hash: &str,
) -> Result<EvalReport> {
    let classes = model.arch.classes;
    if positive_class >= classes {
        return Err(Error::LabelRange {
            label: positive_class,
            classes,
        });
    }
    let truths = true_labels(instances)?;
    let (preds, probs) = predict_instances(model, instances)?;
    let scores: Vec<f64> = probs.iter().map(|p| p[positive_class]).collect();
    let binary: Vec<bool> = truths.iter().map(|&t| t == positive_class).collect();
    let roc = match roc_auc(&scores, &binary) {
        Ok(c) => Some(c),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        accuracy: accuracy(&preds, &truths)?,
        instances: truths.len(),
        confusion: confusion(&preds, &truths, classes)?,
        positive_class,
        auc: roc.as_ref().map(|c| c.auc),
        roc,
        config_hash: config_hash.to_owned(),
    })
}

pub fn write_confusion_csv(confusion: &[Vec<usize>], mut w: impl Write) -> Result<()> {
    let classes = confusion.len();
    let mut s = String::from("truth");
    for c in 0..classes {
        s.push_str(&format!(",pred_{c}"));
    }
    s.push('\n');
    for (t, row) in confusion.iter().enumerate() {
        s.push_str(&t.to_string());
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// One exported latent row.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentRow {
    pub id: usize,
    pub weak_label: Option<usize>,
    pub true_label: Option<usize>,
    pub coordinates: Vec<f64>,
}

/// Writes `id,weak_label,true_label,z0..` rows of posterior means. Unknown labels are empty.
pub fn export_latents(
    vae: &VaeModel,
    instances: &[&ImageInstance],
    weak_labels: &[Option<usize>],
    mut w: impl Write,
) -> Result<usize> {
    if weak_labels.len() != instances.len() {
        return Err(Error::shape("weak labels", instances.len(), weak_labels.len()));
    }
    let latent = vae.arch.latent;
    let mut header = String::from("id,weak_label,true_label");
    for j in 0..latent {
        header.push_str(&format!(",z{j}"));
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    let opt = |v: Option<usize>| v.map_or_else(String::new, |v| v.to_string());
    for (chunk, weak) in instances.chunks(EVAL_BATCH).zip(weak_labels.chunks(EVAL_BATCH)) {
        let means = vae.encode_means(&stack(vae.arch.input, chunk)?)?;
        let mut s = String::new();
        for ((inst, weak), mean) in chunk.iter().zip(weak).zip(&means) {
            s.push_str(&format!("{},{},{}", inst.id, opt(*weak), opt(inst.true_label)));
            for v in mean {
                // `{}` on f64 prints the shortest representation that round-trips.
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        w.write_all(s.as_bytes())?;
    }
    w.flush()?;
    Ok(instances.len())
}

pub fn read_latents(r: impl BufRead) -> Result<Vec<LatentRow>> {
    let mut rows = Vec::new();
    for (n, line) in r.lines().enumerate().skip(1) {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = || Error::format("latent export", format!("line {}", n + 1));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 3 {
            return Err(bad());
        }
        let opt = |s: &str| -> Result<Option<usize>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad())
            }
        };
        rows.push(LatentRow {
            id: cols[0].parse().map_err(|_| bad())?,
            weak_label: opt(cols[1])?,
            true_label: opt(cols[2])?,
            coordinates: cols[3..]
                .iter()
                .map(|s| s.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        let t = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];
        let p = [0, 1, 2, 3, 4, 5, 6, 0, 0, 0];
        assert!((accuracy(&p, &t).unwrap() - 0.7).abs() < 1e-15);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn confusion_sums_to_count() {
        let m = confusion(&[0, 1, 1, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(m, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 1, 1]]);
        assert!(confusion(&[3], &[0], 3).is_err());
    }

    #[test]
    fn roc_examples() {
        let perfect = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(perfect.auc, 1.0);
        assert_eq!(perfect.points, vec![(0.0, 0.0), (0.0, 0.5), (0.0, 1.0), (0.5, 1.0), (1.0, 1.0)]);
        let flat = roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(flat.auc, 0.5);
        assert_eq!(flat.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::Degenerate(_))));
        assert!(roc_auc(&[f64::NAN, 0.2], &[true, false]).is_err());
    }

    #[test]
    fn roc_csv_layout() {
        let c = roc_auc(&[0.9, 0.1], &[true, false]).unwrap();
        let mut buf = Vec::new();
        write_roc_csv(&c, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "threshold,fpr,tpr\ninf,0,0\n0.9,0,1\n0.1,1,1\n");
    }
}
