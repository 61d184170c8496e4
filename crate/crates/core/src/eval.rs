//! Classification accuracy, leave-one-out retrieval, average precision and
//! precision-recall curves over descriptor sets.

use std::fmt::Write as _;

use crate::error::{CoreError, Result};
use crate::network::{Descriptor, Model};
use crate::train::Example;

/// Recall levels of the interpolated curve.
pub const RECALL_LEVELS: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Class in `1..=n_classes`: argmax over the first `n_classes` logits (any
/// adversarial logit after them is ignored), ties to the lowest index.
pub fn classify(logits: &[f64], n_classes: usize) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().take(n_classes) {
        if v > logits[best] {
            best = i;
        }
    }
    best + 1
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(CoreError::Mismatch(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(CoreError::Mismatch("accuracy of an empty set".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / predictions.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Metric {
    #[default]
    Euclidean,
    /// `1 − cos θ`; zero vectors are at distance 1 from everything.
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(format!("metric must be euclidean or cosine, got `{other}`")),
        }
    }
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDescriptor {
    pub id: String,
    pub label: usize,
    pub descriptor: Descriptor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub query: String,
    /// Gallery ids by ascending distance, ties by ascending id.
    pub ranked: Vec<String>,
    /// Same-class flags, aligned with `ranked`.
    pub relevant: Vec<bool>,
}

impl RetrievalResult {
    pub fn relevant_count(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }
}

/// Ranks `gallery` against `query`; a gallery entry with the query's id is
/// skipped.
pub fn retrieve(query: &LabeledDescriptor, gallery: &[LabeledDescriptor], metric: Metric) -> Result<RetrievalResult> {
    let dim = query.descriptor.len();
    let mut scored = Vec::with_capacity(gallery.len());
    for g in gallery.iter().filter(|g| g.id != query.id) {
        if g.descriptor.len() != dim {
            return Err(CoreError::Mismatch(format!(
                "descriptor {} has dimension {}, query {} has {dim}",
                g.id,
                g.descriptor.len(),
                query.id
            )));
        }
        scored.push((metric.distance(query.descriptor.as_slice(), g.descriptor.as_slice()), g));
    }
    if scored.is_empty() {
        return Err(CoreError::Mismatch(format!("empty gallery for query {}", query.id)));
    }
    scored.sort_by(|(da, a), (db, b)| da.total_cmp(db).then_with(|| a.id.cmp(&b.id)));
    Ok(RetrievalResult {
        query: query.id.clone(),
        ranked: scored.iter().map(|(_, g)| g.id.clone()).collect(),
        relevant: scored.iter().map(|(_, g)| g.label == query.label).collect(),
    })
}

/// Mean over relevant ranks `r` of precision at `r`; `None` without any
/// relevant item.
pub fn average_precision(result: &RetrievalResult) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in result.relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapSummary {
    /// `None` if every query was excluded.
    pub map: Option<f64>,
    pub evaluated: usize,
    /// Queries with no relevant gallery item.
    pub excluded: usize,
    pub results: Vec<RetrievalResult>,
}

/// Leave-one-out mAP: every item queries all the others.
pub fn mean_ap(set: &[LabeledDescriptor], metric: Metric) -> Result<MapSummary> {
    let mut results = Vec::with_capacity(set.len());
    let mut sum = 0.0;
    let mut evaluated = 0;
    for q in set {
        let r = retrieve(q, set, metric)?;
        if let Some(ap) = average_precision(&r) {
            sum += ap;
            evaluated += 1;
        }
        results.push(r);
    }
    Ok(MapSummary {
        map: (evaluated > 0).then(|| sum / evaluated as f64),
        evaluated,
        excluded: set.len() - evaluated,
        results,
    })
}

/// `(recall, precision)` at every rank.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub points: Vec<(f64, f64)>,
}

pub fn pr_curve(result: &RetrievalResult) -> Option<PrCurve> {
    let total = result.relevant_count();
    if total == 0 {
        return None;
    }
    let mut hits = 0;
    let points = result
        .relevant
        .iter()
        .enumerate()
        .map(|(r, &rel)| {
            hits += usize::from(rel);
            (hits as f64 / total as f64, hits as f64 / (r + 1) as f64)
        })
        .collect();
    Some(PrCurve { points })
}

impl PrCurve {
    /// Interpolated precision at [`RECALL_LEVELS`]: the best precision at
    /// any recall at or above the level.
    pub fn interpolated(&self) -> [f64; 11] {
        RECALL_LEVELS.map(|level| {
            self.points
                .iter()
                .filter(|(r, _)| *r >= level - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
    }
}

/// Macro average of the interpolated curves; NaN when there are none.
pub fn macro_interpolated(curves: &[PrCurve]) -> [f64; 11] {
    let mut out = [0.0; 11];
    if curves.is_empty() {
        return [f64::NAN; 11];
    }
    for c in curves {
        for (o, p) in out.iter_mut().zip(c.interpolated()) {
            *o += p;
        }
    }
    out.map(|s| s / curves.len() as f64)
}

/// `rank,recall,precision`, averaged over the curves that reach each rank.
pub fn per_rank_csv(curves: &[PrCurve]) -> String {
    let mut out = String::from("rank,recall,precision\n");
    let longest = curves.iter().map(|c| c.points.len()).max().unwrap_or(0);
    for r in 0..longest {
        let at: Vec<(f64, f64)> = curves.iter().filter_map(|c| c.points.get(r).copied()).collect();
        let n = at.len() as f64;
        let recall = at.iter().map(|p| p.0).sum::<f64>() / n;
        let precision = at.iter().map(|p| p.1).sum::<f64>() / n;
        writeln!(out, "{},{recall:.6},{precision:.6}", r + 1).unwrap();
    }
    out
}

/// `recall,precision` at the 11 standard levels.
pub fn interpolated_csv(levels: &[f64; 11]) -> String {
    let mut out = String::from("recall,precision\n");
    for (r, p) in RECALL_LEVELS.iter().zip(levels) {
        writeln!(out, "{r:.1},{p:.6}").unwrap();
    }
    out
}

/// `metric = value` lines; accuracy is omitted when not measured.
pub fn summary_text(accuracy: Option<f64>, map: Option<f64>, excluded: usize) -> String {
    let mut out = String::new();
    if let Some(a) = accuracy {
        writeln!(out, "accuracy = {a:.6}").unwrap();
    }
    match map {
        Some(m) => writeln!(out, "map = {m:.6}").unwrap(),
        None => out.push_str("map = nan\n"),
    }
    writeln!(out, "excluded_queries = {excluded}").unwrap();
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelEvaluation {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    pub retrieval: MapSummary,
    pub descriptors: Vec<LabeledDescriptor>,
}

/// Test-time route: descriptors from the generator, classes from the head,
/// leave-one-out retrieval over the same examples.
pub fn evaluate_model(model: &Model, examples: &[Example], metric: Metric) -> Result<ModelEvaluation> {
    let mdrs: Vec<_> = examples.iter().map(|e| &e.mdr).collect();
    let descriptors = model.descriptors(&mdrs)?;
    let predictions = descriptors
        .iter()
        .map(|d| Ok(classify(model.logits(d)?.data(), model.n_classes)))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let accuracy = accuracy(&predictions, &labels)?;
    let descriptors: Vec<LabeledDescriptor> = examples
        .iter()
        .zip(descriptors)
        .map(|(e, d)| LabeledDescriptor {
            id: e.id.clone(),
            label: e.label,
            descriptor: d,
        })
        .collect();
    let retrieval = mean_ap(&descriptors, metric)?;
    Ok(ModelEvaluation {
        predictions,
        accuracy,
        retrieval,
        descriptors,
    })
}

/// Descriptor file: header `DDSD n=<count> dim=<dim>`, then one
/// `<id>\t<v1> <v2> ...` line per shape with values that round-trip exactly.
pub fn format_descriptors(items: &[(String, Descriptor)]) -> String {
    let dim = items.first().map_or(0, |(_, d)| d.len());
    let mut out = format!("DDSD n={} dim={dim}\n", items.len());
    for (id, d) in items {
        out.push_str(id);
        out.push('\t');
        for (i, v) in d.as_slice().iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{v:.16e}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_descriptors(text: &str) -> Result<Vec<(String, Descriptor)>> {
    let bad = |m: String| CoreError::format("descriptor file", m);
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let mut words = header.split_whitespace();
    let field = |w: Option<&str>, key: &str| {
        w.and_then(|w| w.strip_prefix(key))
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| bad(format!("header needs `{key}<int>`")))
    };
    if words.next() != Some("DDSD") {
        return Err(bad("missing `DDSD` header".into()));
    }
    let n = field(words.next(), "n=")?;
    let dim = field(words.next(), "dim=")?;
    let mut out = Vec::with_capacity(n);
    for line in lines.filter(|l| !l.is_empty()) {
        let (id, values) = line
            .split_once('\t')
            .ok_or_else(|| bad(format!("line without a tab: `{line}`")))?;
        let values = values
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad value `{v}` for {id}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != dim {
            return Err(bad(format!("{id} has {} values, header says {dim}", values.len())));
        }
        out.push((id.to_string(), Descriptor::new(values)));
    }
    if out.len() != n {
        return Err(bad(format!("{} rows, header says {n}", out.len())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(flags: &[bool]) -> RetrievalResult {
        RetrievalResult {
            query: "q".into(),
            ranked: (0..flags.len()).map(|i| i.to_string()).collect(),
            relevant: flags.to_vec(),
        }
    }

    #[test]
    fn classify_ignores_adversarial_logit() {
        assert_eq!(classify(&[2.0, 1.0, 0.5, 0.1, 9.9], 4), 1);
        assert_eq!(classify(&[0.3; 5], 4), 1);
        assert_eq!(classify(&[0.0, 3.0, 3.0, 1.0], 4), 2);
    }

    #[test]
    fn accuracy_arithmetic() {
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 1]).unwrap(), 0.75);
        assert_eq!(accuracy(&[1, 1], &[2, 2]).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&result(&[true, false, true])).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&result(&[true, true, true])), Some(1.0));
        assert_eq!(
            average_precision(&result(&[false, false, true, false])),
            Some(1.0 / 3.0)
        );
        assert_eq!(average_precision(&result(&[false, false])), None);
    }

    #[test]
    fn pr_examples() {
        assert_eq!(
            pr_curve(&result(&[true, true])).unwrap().points,
            vec![(0.5, 1.0), (1.0, 1.0)]
        );
        assert_eq!(
            pr_curve(&result(&[false, true])).unwrap().points,
            vec![(0.0, 0.0), (1.0, 0.5)]
        );
        let c = pr_curve(&result(&[false, true, true, false, true])).unwrap();
        let interp = c.interpolated();
        assert!(interp.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(interp[10], 0.6);
    }

    #[test]
    fn descriptor_file_round_trip() {
        let items = vec![
            ("a/1".to_string(), Descriptor::new(vec![0.1, -2.5e-300, 1.0 / 3.0])),
            ("b/2".to_string(), Descriptor::new(vec![f64::MAX, 0.0, -0.0])),
        ];
        let text = format_descriptors(&items);
        assert!(text.starts_with("DDSD n=2 dim=3\n"));
        let back = parse_descriptors(&text).unwrap();
        assert_eq!(back, items);
        assert!(parse_descriptors("DDSD n=1 dim=2\nx\t1 2 3\n").is_err());
    }

    #[test]
    fn summary_lines() {
        assert_eq!(
            summary_text(Some(0.5), Some(0.25), 1),
            "accuracy = 0.500000\nmap = 0.250000\nexcluded_queries = 1\n"
        );
        assert_eq!(summary_text(None, None, 3), "map = nan\nexcluded_queries = 3\n");
    }
}
