//! IoU tables, Phase-I detection metrics and per-task curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::synth::LabelMap;

/// Exact pixel counts for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn union(&self) -> u64 {
        self.tp + self.fp + self.fn_
    }

    pub fn iou(&self) -> Option<f64> {
        (self.union() > 0).then(|| self.tp as f64 / self.union() as f64)
    }

    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Integer confusion counts per class, accumulated over images. Addition
/// is order-independent, so parallel and sequential evaluation agree.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IouTable {
    pub counts: BTreeMap<u16, Counts>,
}

impl IouTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.height != truth.height || pred.width != truth.width {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height, pred.width, truth.height, truth.width
            )));
        }
        for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
            if p == t {
                self.counts.entry(p).or_default().tp += 1;
            } else {
                self.counts.entry(p).or_default().fp += 1;
                self.counts.entry(t).or_default().fn_ += 1;
            }
        }
        Ok(())
    }

    /// Counts of a one-class prediction: `mask[p]` claims class `class`.
    pub fn accumulate_binary(&mut self, class: u16, mask: &[bool], truth: &LabelMap) -> Result<()> {
        if mask.len() != truth.labels.len() {
            return Err(Error::Shape(format!("mask of {} for {} pixels", mask.len(), truth.labels.len())));
        }
        let mut c = Counts::default();
        for (&m, &t) in mask.iter().zip(&truth.labels) {
            match (m, t == class) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        self.counts.entry(class).or_default().add(c);
        Ok(())
    }

    pub fn merge(&mut self, other: &IouTable) {
        for (&c, &k) in &other.counts {
            self.counts.entry(c).or_default().add(k);
        }
    }

    pub fn iou(&self, class: u16) -> Option<f64> {
        self.counts.get(&class).and_then(Counts::iou)
    }

    /// Unweighted mean IoU over `classes`, skipping classes with an empty
    /// union. `None` when nothing is left.
    pub fn mean(&self, classes: &[u16]) -> Option<f64> {
        let vals: Vec<f64> = classes.iter().filter_map(|&c| self.iou(c)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// mIoU over a set of images.
pub fn miou(preds: &[LabelMap], truths: &[LabelMap], classes: &[u16]) -> Result<(IouTable, Option<f64>)> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!("{} predictions, {} truths", preds.len(), truths.len())));
    }
    let mut table = IouTable::new();
    for (p, t) in preds.iter().zip(truths) {
        table.accumulate(p, t)?;
    }
    let m = table.mean(classes);
    Ok((table, m))
}

/// Average precision with all-points interpolation: the area under the
/// precision envelope `p(r) = max_{r' ≥ r} precision(r')`. Tied scores
/// enter the curve together. `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(labels[order[i]]);
            seen += 1;
            i += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / seen as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..points.len() {
        let envelope = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (points[k].0 - prev_recall) * envelope;
        prev_recall = points[k].0;
    }
    Some(ap)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phase1Metrics {
    pub map: f64,
    pub per_class_ap: Vec<(u16, f64)>,
    /// Micro-averaged over every (image, class) decision at the threshold.
    pub precision: f64,
    pub recall: f64,
}

/// `scores[i][k]` and `truth[i][k]` are image `i`, class `classes[k]`.
pub fn phase1_metrics(classes: &[u16], scores: &[Vec<f64>], truth: &[Vec<bool>], alpha: f64) -> Result<Phase1Metrics> {
    if scores.len() != truth.len()
        || scores.iter().any(|s| s.len() != classes.len())
        || truth.iter().any(|t| t.len() != classes.len())
    {
        return Err(Error::Shape("score and truth tables disagree".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Threshold(alpha));
    }
    let mut per_class_ap = Vec::new();
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (k, &c) in classes.iter().enumerate() {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let t: Vec<bool> = truth.iter().map(|r| r[k]).collect();
        if let Some(ap) = average_precision(&s, &t) {
            per_class_ap.push((c, ap));
        }
        for (&si, &ti) in s.iter().zip(&t) {
            match (si >= alpha, ti) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let map = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.iter().map(|a| a.1).sum::<f64>() / per_class_ap.len() as f64
    };
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Phase1Metrics {
        map,
        per_class_ap,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
    })
}

/// `rows[k][j]`: mIoU of the classes introduced by task `k + 1`, evaluated
/// after task `j + 1` (for `j ≥ k`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskCurve {
    pub rows: Vec<Vec<f64>>,
}

impl TaskCurve {
    /// Builds the curve from one IoU table per checkpoint.
    pub fn from_tables(tables: &[IouTable], task_classes: &[Vec<u16>]) -> Result<Self> {
        if tables.len() != task_classes.len() {
            return Err(Error::Precondition(format!(
                "{} checkpoints for {} tasks",
                tables.len(),
                task_classes.len()
            )));
        }
        let rows = task_classes
            .iter()
            .enumerate()
            .map(|(k, classes)| {
                tables[k..]
                    .iter()
                    .map(|t| t.mean(classes).unwrap_or(0.0))
                    .collect()
            })
            .collect();
        Ok(Self { rows })
    }

    /// Largest absolute difference within any row.
    pub fn max_row_spread(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| {
                let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
                if r.is_empty() { 0.0 } else { hi - lo }
            })
            .fold(0.0, f64::max)
    }

    /// Whether every row repeats its first value bit for bit.
    pub fn rows_constant(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.iter().all(|v| v.to_bits() == r[0].to_bits()))
    }

    /// `(x, y, series)` triples, x = evaluated-after task.
    pub fn to_series(&self, series: &str) -> String {
        let mut out = String::new();
        for (k, row) in self.rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let _ = writeln!(out, "{},{v:.6},{series}.task{}", k + j + 1, k + 1);
            }
        }
        out
    }
}

/// Grouped IoU summary of one evaluated configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub table: IouTable,
    pub old: Option<f64>,
    pub new: Option<f64>,
    pub all: Option<f64>,
}

impl MetricsTable {
    /// `old` = first task's classes, `new` = later classes. `all` covers
    /// both, plus background when `with_background` is set.
    pub fn build(table: IouTable, old: &[u16], new: &[u16], with_background: bool) -> Self {
        let mut all: Vec<u16> = Vec::new();
        if with_background {
            all.push(0);
        }
        all.extend_from_slice(old);
        all.extend_from_slice(new);
        Self {
            old: table.mean(old),
            new: table.mean(new),
            all: table.mean(&all),
            table,
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{:.6}", 100.0 * v))
}

/// Column order: method,mode,strategy,old,new,all then one IoU column per
/// class id (background first). Values are percentages.
pub fn metrics_csv(rows: &[(String, String, String, MetricsTable)], classes: &[u16]) -> String {
    let mut out = String::from("method,mode,strategy,old,new,all");
    let mut cols = vec![0u16];
    cols.extend_from_slice(classes);
    for c in &cols {
        let _ = write!(out, ",iou_c{c}");
    }
    out.push('\n');
    for (method, mode, strategy, m) in rows {
        let _ = write!(out, "{method},{mode},{strategy},{},{},{}", fmt_opt(m.old), fmt_opt(m.new), fmt_opt(m.all));
        for &c in &cols {
            let _ = write!(out, ",{}", fmt_opt(m.table.iou(c)));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(labels: Vec<u16>) -> LabelMap {
        LabelMap::new(1, labels.len(), labels).unwrap()
    }

    #[test]
    fn iou_cases() {
        let t = map(vec![1, 1, 0, 2]);
        let (table, m) = miou(&[t.clone()], &[t.clone()], &[0, 1, 2]).unwrap();
        assert_eq!(m, Some(1.0));
        assert_eq!(table.iou(1), Some(1.0));
        let (table, _) = miou(&[map(vec![0, 0, 1, 1])], &[map(vec![1, 1, 0, 0])], &[1]).unwrap();
        assert_eq!(table.iou(1), Some(0.0));
        let (table, _) = miou(&[map(vec![3, 0])], &[map(vec![3, 3])], &[3]).unwrap();
        assert_eq!(table.iou(3), Some(0.5));
        assert_eq!(table.iou(7), None);
        assert!(miou(&[map(vec![1])], &[map(vec![1, 1])], &[1]).is_err());
    }

    #[test]
    fn absent_classes_leave_the_mean() {
        let (_, m) = miou(&[map(vec![1, 1])], &[map(vec![1, 1])], &[1, 5]).unwrap();
        assert_eq!(m, Some(1.0));
    }

    #[test]
    fn binary_counts_match_multiclass() {
        let pred = map(vec![2, 2, 0, 2]);
        let truth = map(vec![2, 0, 2, 2]);
        let mut a = IouTable::new();
        a.accumulate(&pred, &truth).unwrap();
        let mut b = IouTable::new();
        let mask: Vec<bool> = pred.labels.iter().map(|&l| l == 2).collect();
        b.accumulate_binary(2, &mask, &truth).unwrap();
        assert_eq!(a.counts[&2], b.counts[&2]);
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[0.9, 0.1], &[true, false]), Some(1.0));
        // ranks: +, -, + → precision 1 at r=.5, 2/3 at r=1
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        // all tied: one point at recall 1 with precision = positive rate
        let ap = average_precision(&[0.5; 4], &[true, false, false, true]).unwrap();
        assert_eq!(ap, 0.5);
        assert_eq!(average_precision(&[0.3], &[false]), None);
    }

    #[test]
    fn phase1_single_class() {
        let m = phase1_metrics(&[1], &[vec![0.9], vec![0.1]], &[vec![true], vec![false]], 0.5).unwrap();
        assert_eq!((m.map, m.precision, m.recall), (1.0, 1.0, 1.0));
    }

    #[test]
    fn curve_rows() {
        let mut t1 = IouTable::new();
        t1.accumulate(&map(vec![1, 1]), &map(vec![1, 1])).unwrap();
        let mut t2 = t1.clone();
        t2.accumulate(&map(vec![0, 2]), &map(vec![1, 2])).unwrap();
        let curve = TaskCurve::from_tables(&[t1, t2], &[vec![1], vec![2]]).unwrap();
        assert_eq!(curve.rows, vec![vec![1.0, 2.0 / 3.0], vec![1.0]]);
        assert!(!curve.rows_constant());
        assert!((curve.max_row_spread() - 1.0 / 3.0).abs() < 1e-15);
    }
}
