//! Consistency statistics over entity placement, plus kernel density
//! profiles that contrast a human corpus with a machine corpus.
//!
//! Both counts slide a window of `w` following sentences. Entity identity is
//! exact match on the normalized surface.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use crate::entity::{extract_mentions, EntityMention};
use crate::error::{Error, Result};
use crate::text::{Document, Label};

fn sentence_entity_sets<'a>(
    doc: &Document,
    mentions: &'a [EntityMention],
) -> Vec<BTreeSet<&'a str>> {
    let mut sets: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); doc.sentences.len()];
    for m in mentions {
        sets[m.sentence].insert(m.normalized.as_str());
    }
    sets
}

/// Number of distinct entities that recur within `w` sentences: an entity
/// counts once if some sentence `i` contains it and some sentence in
/// `(i, i+w]` contains it again.
pub fn entity_consistency_count(doc: &Document, mentions: &[EntityMention], w: usize) -> usize {
    let sets = sentence_entity_sets(doc, mentions);
    let mut counted: BTreeSet<&str> = BTreeSet::new();
    for i in 0..sets.len() {
        for &e in &sets[i] {
            if counted.contains(e) {
                continue;
            }
            let hi = (i + w).min(sets.len().saturating_sub(1));
            if (i + 1..=hi).any(|j| sets[j].contains(e)) {
                counted.insert(e);
            }
        }
    }
    counted.len()
}

/// Number of sentences that share at least one entity with a sentence in
/// `(i, i+w]`.
pub fn sentence_consistency_count(doc: &Document, mentions: &[EntityMention], w: usize) -> usize {
    let sets = sentence_entity_sets(doc, mentions);
    (0..sets.len())
        .filter(|&i| {
            let hi = (i + w).min(sets.len().saturating_sub(1));
            (i + 1..=hi).any(|j| !sets[i].is_disjoint(&sets[j]))
        })
        .count()
}

/// Gaussian kernel density over a fixed 256-point grid spanning
/// `[min - 3h, max + 3h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityCurve {
    pub bandwidth: f64,
    pub points: Vec<(f64, f64)>,
}

pub const KDE_GRID_POINTS: usize = 256;

fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    if sd > 0.0 {
        1.06 * sd * n.powf(-0.2)
    } else {
        0.1
    }
}

/// Gaussian mixture density of `values` with bandwidth `h`, evaluated at `x`.
pub fn density_at(values: &[f64], h: f64, x: f64) -> f64 {
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    values
        .iter()
        .map(|v| {
            let u = (x - v) / h;
            (-0.5 * u * u).exp()
        })
        .sum::<f64>()
        * norm
}

/// Estimates a density curve. `bandwidth` of `None` selects the Silverman
/// rule, with a floor of 0.1 when the sample variance is zero.
pub fn kernel_density(values: &[f64], bandwidth: Option<f64>) -> Result<DensityCurve> {
    if values.is_empty() {
        return Err(Error::invalid("kernel density requires at least one value"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "kernel density input".to_string(),
        });
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => {
            return Err(Error::invalid(format!("bandwidth {h} must be positive")));
        }
        None => silverman_bandwidth(values),
    };
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = min - 3.0 * h;
    let hi = max + 3.0 * h;
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let points = (0..KDE_GRID_POINTS)
        .map(|k| {
            let x = lo + step * k as f64;
            (x, density_at(values, h, x))
        })
        .collect();
    Ok(DensityCurve {
        bandwidth: h,
        points,
    })
}

#[derive(Debug, Clone)]
pub struct DocCounts {
    pub id: String,
    pub label: Label,
    pub ecc: usize,
    pub scc: usize,
}

#[derive(Debug, Clone)]
pub struct KdePair {
    pub human: DensityCurve,
    pub machine: DensityCurve,
}

#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    pub window: usize,
    pub per_document: Vec<DocCounts>,
    pub ecc_kde: KdePair,
    pub scc_kde: KdePair,
}

/// Computes per-document counts and per-label density curves for each
/// window size. Documents take their label from the corpus they arrive in.
pub fn profile_corpus(
    human: &[Document],
    machine: &[Document],
    windows: &[usize],
) -> Result<Vec<ConsistencyReport>> {
    if human.is_empty() || machine.is_empty() {
        return Err(Error::invalid(
            "profiling requires at least one document per corpus",
        ));
    }
    if windows.is_empty() {
        return Err(Error::invalid("profiling requires at least one window size"));
    }
    let mentions: Vec<(usize, &Document, Label, Vec<EntityMention>)> = human
        .iter()
        .map(|d| (Label::Human, d))
        .chain(machine.iter().map(|d| (Label::Machine, d)))
        .enumerate()
        .map(|(i, (label, d))| (i, d, label, extract_mentions(d)))
        .collect();

    let mut reports = Vec::with_capacity(windows.len());
    for &w in windows {
        let per_document: Vec<DocCounts> = mentions
            .iter()
            .map(|(_, doc, label, ms)| DocCounts {
                id: doc.id.clone(),
                label: *label,
                ecc: entity_consistency_count(doc, ms, w),
                scc: sentence_consistency_count(doc, ms, w),
            })
            .collect();
        let collect = |label: Label, pick: fn(&DocCounts) -> usize| -> Vec<f64> {
            per_document
                .iter()
                .filter(|c| c.label == label)
                .map(|c| pick(c) as f64)
                .collect()
        };
        let ecc_kde = KdePair {
            human: kernel_density(&collect(Label::Human, |c| c.ecc), None)?,
            machine: kernel_density(&collect(Label::Machine, |c| c.ecc), None)?,
        };
        let scc_kde = KdePair {
            human: kernel_density(&collect(Label::Human, |c| c.scc), None)?,
            machine: kernel_density(&collect(Label::Machine, |c| c.scc), None)?,
        };
        reports.push(ConsistencyReport {
            window: w,
            per_document,
            ecc_kde,
            scc_kde,
        });
    }
    Ok(reports)
}

/// Which statistic a density CSV or plot describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stat {
    Ecc,
    Scc,
}

impl ConsistencyReport {
    pub fn kde(&self, stat: Stat) -> &KdePair {
        match stat {
            Stat::Ecc => &self.ecc_kde,
            Stat::Scc => &self.scc_kde,
        }
    }
}

/// `doc_id,label,w,ecc,scc` with one row per document per window.
pub fn write_counts_csv(path: impl AsRef<Path>, reports: &[ConsistencyReport]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("doc_id,label,w,ecc,scc\n");
    for report in reports {
        for c in &report.per_document {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.id, c.label, report.window, c.ecc, c.scc
            ));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `label,w,x,density` rows for every grid point of every window.
pub fn write_kde_csv(
    path: impl AsRef<Path>,
    reports: &[ConsistencyReport],
    stat: Stat,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("label,w,x,density\n");
    for report in reports {
        let pair = report.kde(stat);
        for (label, curve) in [("human", &pair.human), ("machine", &pair.machine)] {
            for &(x, d) in &curve.points {
                out.push_str(&format!("{label},{},{x},{d}\n", report.window));
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Minimal line plot of the two density curves for one window. Best-effort
/// output for eyeballing; the CSV files are the real interface.
pub fn write_kde_svg(path: impl AsRef<Path>, report: &ConsistencyReport, stat: Stat) -> Result<()> {
    let path = path.as_ref();
    let pair = report.kde(stat);
    let (w, h, pad) = (640.0, 400.0, 40.0);
    let curves = [(&pair.human.points, "#3366cc"), (&pair.machine.points, "#cc6633")];
    let all: Vec<(f64, f64)> = curves.iter().flat_map(|(c, _)| c.iter().cloned()).collect();
    let (mut x0, mut x1, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if y1 <= 0.0 {
        y1 = 1.0;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - y / y1 * (h - 2.0 * pad);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"#333\"/>\n",
        h - pad,
        w - pad,
        h - pad,
        h - pad,
    );
    for (points, color) in curves {
        let path_points: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path_points.join(" ")
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" font-size=\"13\" fill=\"#3366cc\">human</text>\n\
         <text x=\"{}\" y=\"20\" font-size=\"13\" fill=\"#cc6633\">machine</text>\n\
         <text x=\"{pad}\" y=\"20\" font-size=\"13\" fill=\"#333\">w = {}</text>\n</svg>\n",
        w / 2.0,
        w / 2.0 + 70.0,
        report.window,
    ));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(svg.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Document;

    /// Three sentences with entity pattern "A and B; A; B".
    fn fixture() -> Document {
        Document::from_text(
            "fixture",
            "she saw Alpha and Bravo . then Alpha spoke . later Bravo left .",
        )
    }

    fn counts(doc: &Document, w: usize) -> (usize, usize) {
        let mentions = extract_mentions(doc);
        (
            entity_consistency_count(doc, &mentions, w),
            sentence_consistency_count(doc, &mentions, w),
        )
    }

    #[test]
    fn window_two_counts_both_entities_once() {
        // Alpha recurs at distance 1, Bravo at distance 2: ECC 2. Only the
        // first sentence shares an entity with a later sentence in range:
        // SCC 1 at w=2 (sentence 1 and 2 share nothing).
        assert_eq!(counts(&fixture(), 2), (2, 1));
    }

    #[test]
    fn window_one_misses_the_long_gap() {
        let (ecc, scc) = counts(&fixture(), 1);
        assert_eq!(ecc, 1);
        assert_eq!(scc, 1);
    }

    #[test]
    fn repeated_entity_counts_once() {
        let doc = Document::from_text("d", "so Alpha . then Alpha . more Alpha .");
        assert_eq!(counts(&doc, 1), (1, 2));
    }

    #[test]
    fn no_repetition_no_counts() {
        let doc = Document::from_text("d", "so Alpha . then Bravo . more Carol .");
        assert_eq!(counts(&doc, 3), (0, 0));
        let empty = Document::from_text("d", "");
        assert_eq!(counts(&empty, 2), (0, 0));
    }

    #[test]
    fn window_zero_is_vacuous() {
        assert_eq!(counts(&fixture(), 0), (0, 0));
    }

    #[test]
    fn counts_are_monotone_in_window() {
        let doc = Document::from_text(
            "d",
            "so Alpha met Bravo . then Carol . and Alpha . also Bravo with Carol .",
        );
        let mentions = extract_mentions(&doc);
        let mut prev = (0, 0);
        for w in 0..6 {
            let cur = (
                entity_consistency_count(&doc, &mentions, w),
                sentence_consistency_count(&doc, &mentions, w),
            );
            assert!(cur.0 >= prev.0 && cur.1 >= prev.1, "w={w}: {cur:?} < {prev:?}");
            prev = cur;
        }
    }

    #[test]
    fn kde_standard_normal_heights() {
        // One value at the origin gives the standard normal peak there.
        assert!((density_at(&[0.0], 1.0, 0.0) - 0.3989422804014327).abs() < 1e-12);
        // A second value far away halves the local height.
        assert!((density_at(&[0.0, 10.0], 1.0, 0.0) - 0.19947).abs() < 1e-5);
    }

    #[test]
    fn kde_single_value_peak() {
        let curve = kernel_density(&[0.0], Some(1.0)).unwrap();
        // The grid spans [-3, 3]; the peak sits at the grid point nearest 0.
        let peak = curve
            .points
            .iter()
            .cloned()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert!((peak.1 - 0.3989422804014327).abs() < 1e-4, "{peak:?}");
        assert!(peak.0.abs() < 0.02);
        assert_eq!(curve.points.len(), KDE_GRID_POINTS);
        assert_eq!(curve.points[0].0, -3.0);
        assert_eq!(curve.points[KDE_GRID_POINTS - 1].0, 3.0);
        // Repeating the value changes nothing: the mixture renormalizes.
        let tripled = kernel_density(&[0.0, 0.0, 0.0], Some(1.0)).unwrap();
        for (a, b) in curve.points.iter().zip(&tripled.points) {
            assert_eq!(a.0, b.0);
            assert!((a.1 - b.1).abs() < 1e-14);
        }
    }

    #[test]
    fn kde_integrates_to_one() {
        for values in [vec![1.0], vec![0.0, 1.0, 1.0, 4.0], vec![2.0; 7]] {
            let curve = kernel_density(&values, None).unwrap();
            let mut integral = 0.0;
            for pair in curve.points.windows(2) {
                let (x0, y0) = pair[0];
                let (x1, y1) = pair[1];
                integral += 0.5 * (y0 + y1) * (x1 - x0);
            }
            assert!((integral - 1.0).abs() <= 0.01, "integral {integral} for {values:?}");
        }
    }

    #[test]
    fn kde_silverman_floor_on_constant_sample() {
        let curve = kernel_density(&[3.0, 3.0, 3.0], None).unwrap();
        assert_eq!(curve.bandwidth, 0.1);
        let curve = kernel_density(&[5.0], None).unwrap();
        assert_eq!(curve.bandwidth, 0.1);
    }

    #[test]
    fn kde_rejects_bad_input() {
        assert!(kernel_density(&[], None).is_err());
        assert!(kernel_density(&[1.0], Some(0.0)).is_err());
        assert!(kernel_density(&[1.0], Some(-2.0)).is_err());
    }

    #[test]
    fn profile_produces_one_report_per_window() {
        let human = vec![fixture()];
        let machine = vec![Document::from_text("m", "so Alpha . then Bravo .")];
        let reports = profile_corpus(&human, &machine, &[1, 2]).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].window, 1);
        assert_eq!(reports[0].per_document.len(), 2);
        assert_eq!(reports[1].per_document[0].ecc, 2);
    }

    #[test]
    fn profile_identical_corpora_identical_curves() {
        let docs = vec![fixture(), Document::from_text("x", "so Alpha . then Alpha .")];
        let reports = profile_corpus(&docs, &docs, &[1]).unwrap();
        assert_eq!(reports[0].ecc_kde.human.points, reports[0].ecc_kde.machine.points);
        assert_eq!(reports[0].scc_kde.human.points, reports[0].scc_kde.machine.points);
    }

    #[test]
    fn profile_rejects_empty_corpus() {
        let docs = vec![fixture()];
        assert!(profile_corpus(&docs, &[], &[1]).is_err());
        assert!(profile_corpus(&docs, &docs, &[]).is_err());
    }

    #[test]
    fn csv_writers_emit_expected_headers() {
        let dir = tempfile::tempdir().unwrap();
        let human = vec![fixture()];
        let machine = vec![Document::from_text("m", "so Alpha . then Bravo .")];
        let reports = profile_corpus(&human, &machine, &[2]).unwrap();

        let counts_path = dir.path().join("ecc_scc.csv");
        write_counts_csv(&counts_path, &reports).unwrap();
        let text = std::fs::read_to_string(&counts_path).unwrap();
        assert!(text.starts_with("doc_id,label,w,ecc,scc\n"));
        assert!(text.contains("fixture,human,2,2,1"), "{text}");

        let kde_path = dir.path().join("kde.csv");
        write_kde_csv(&kde_path, &reports, Stat::Ecc).unwrap();
        let text = std::fs::read_to_string(&kde_path).unwrap();
        assert!(text.starts_with("label,w,x,density\n"));
        assert_eq!(text.lines().count(), 1 + 2 * KDE_GRID_POINTS);

        let svg_path = dir.path().join("kde_w2.svg");
        write_kde_svg(&svg_path, &reports[0], Stat::Ecc).unwrap();
        let svg = std::fs::read_to_string(&svg_path).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }
}
