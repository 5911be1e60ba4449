//! UCR-format loading, stratified re-splitting, z-normalization and synthetic data.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nmvq_autodiff::rng::{self, Rng};
use nmvq_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{io_err, Error, Result};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSeries {
    pub values: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledSeries>,
    pub test: Vec<LabeledSeries>,
    pub num_classes: usize,
    pub length: usize,
}

impl Dataset {
    pub fn train_tensor(&self) -> Tensor<f32> {
        to_tensor(&self.train)
    }

    pub fn test_tensor(&self) -> Tensor<f32> {
        to_tensor(&self.test)
    }

    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|s| s.label).collect()
    }

    pub fn test_labels(&self) -> Vec<usize> {
        self.test.iter().map(|s| s.label).collect()
    }

    pub fn class_histogram(&self) -> Vec<(usize, usize)> {
        let mut h = vec![(0, 0); self.num_classes];
        for s in &self.train {
            h[s.label].0 += 1;
        }
        for s in &self.test {
            h[s.label].1 += 1;
        }
        h
    }
}

/// Stacks equal-length series into a `[n, 1, L]` tensor.
pub fn to_tensor(series: &[LabeledSeries]) -> Tensor<f32> {
    let len = series.first().map_or(0, |s| s.values.len());
    let data = series.iter().flat_map(|s| s.values.iter().map(|&v| v as f32)).collect();
    Tensor::new([series.len(), 1, len], data).expect("equal-length series")
}

/// Inverse of [`to_tensor`]; `labels` defaults to 0.
pub fn from_tensor(x: &Tensor<f32>, labels: Option<&[usize]>) -> Vec<LabeledSeries> {
    let n = x.dim(0);
    let len = if n == 0 { 0 } else { x.numel() / n };
    (0..n)
        .map(|i| LabeledSeries {
            values: x.data()[i * len..(i + 1) * len].iter().map(|&v| f64::from(v)).collect(),
            label: labels.map_or(0, |l| l[i]),
        })
        .collect()
}

/// Parses UCR text: one series per line, a label followed by tab- or
/// whitespace-separated values. Lines starting with `#` are comments.
/// Labels are remapped to `0..C` in order of first appearance.
pub fn parse_ucr(text: &str, path: &Path) -> Result<Vec<LabeledSeries>> {
    parse_records(text, path, true)
}

/// Like [`parse_ucr`] but labels are taken verbatim and must be
/// non-negative integers. Used to read back files written by [`write_tsv`].
pub fn parse_labeled(text: &str, path: &Path) -> Result<Vec<LabeledSeries>> {
    parse_records(text, path, false)
}

fn parse_records(text: &str, path: &Path, remap_labels: bool) -> Result<Vec<LabeledSeries>> {
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut remap: HashMap<u64, usize> = HashMap::new();
    let mut out = Vec::new();
    let mut length = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split(|c: char| c == '\t' || c == ',' || c.is_whitespace()).filter(|t| !t.is_empty());
        let label_tok = tokens.next().unwrap_or_default();
        let raw: f64 = label_tok
            .parse()
            .map_err(|_| parse_err(lineno, format!("label {label_tok:?} is not numeric")))?;
        let values = tokens
            .map(|t| match t.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(lineno, format!("value {t:?} is not a finite number"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(parse_err(lineno, "record has no values".into()));
        }
        match length {
            None => length = Some(values.len()),
            Some(l) if l != values.len() => {
                return Err(parse_err(lineno, format!("record has {} values, expected {l}", values.len())))
            }
            _ => {}
        }
        let label = if remap_labels {
            let next = remap.len();
            *remap.entry((raw + 0.0).to_bits()).or_insert(next)
        } else if raw >= 0.0 && raw.fract() == 0.0 && raw < u32::MAX as f64 {
            raw as usize
        } else {
            return Err(parse_err(lineno, format!("label {label_tok:?} is not a class index")));
        };
        out.push(LabeledSeries { values, label });
    }
    if out.is_empty() {
        return Err(parse_err(0, "no records".into()));
    }
    Ok(out)
}

pub fn load_ucr_tsv(path: &Path) -> Result<Vec<LabeledSeries>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_ucr(&text, path)
}

pub fn load_labeled_tsv(path: &Path) -> Result<Vec<LabeledSeries>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_labeled(&text, path)
}

/// UCR text for `series`, preceded by `#` comment lines from `header`.
pub fn format_tsv(series: &[LabeledSeries], header: &[String]) -> String {
    let mut s = String::new();
    for h in header {
        s.push_str("# ");
        s.push_str(h);
        s.push('\n');
    }
    for item in series {
        s.push_str(&item.label.to_string());
        for v in &item.values {
            s.push('\t');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    s
}

pub fn write_tsv(path: &Path, series: &[LabeledSeries], header: &[String]) -> Result<()> {
    std::fs::write(path, format_tsv(series, header)).map_err(io_err(path))
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Per-class stratified split. Each class contributes `round(fraction * n_c)`
/// training samples (half rounds up); any difference from `round(fraction * n)`
/// overall is then absorbed starting with the largest class.
pub fn stratified_resplit(all: &[LabeledSeries], train_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Usage(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let length = all.first().ok_or_else(|| Error::Usage("no records to split".into()))?.values.len();
    let num_classes = all.iter().map(|s| s.label).max().unwrap() + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, s) in all.iter().enumerate() {
        if s.values.len() != length {
            return Err(Error::Usage(format!("series {i} has length {}, expected {length}", s.values.len())));
        }
        by_class[s.label].push(i);
    }
    if let Some(c) = by_class.iter().position(|m| m.len() < 2) {
        return Err(Error::Usage(format!("class {c} has {} samples; stratification needs at least 2", by_class[c].len())));
    }
    let bounded = |c: usize, t: usize| t.clamp(1, by_class[c].len() - 1);
    let mut counts: Vec<usize> =
        (0..num_classes).map(|c| bounded(c, round_half_up(train_fraction * by_class[c].len() as f64))).collect();
    let target = round_half_up(train_fraction * all.len() as f64) as i64;
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by_key(|&c| (std::cmp::Reverse(by_class[c].len()), c));
    let mut diff = target - counts.iter().sum::<usize>() as i64;
    // hand the remainder out one sample at a time, largest class first, never
    // moving a class more than one sample away from its ideal share
    while diff != 0 {
        let step = diff.signum();
        let pick = order.iter().copied().find(|&c| {
            let next = counts[c] as i64 + step;
            let ideal = train_fraction * by_class[c].len() as f64;
            next >= 1 && next < by_class[c].len() as i64 && (next as f64 - ideal).abs() <= 1.0
        });
        let Some(c) = pick else { break };
        counts[c] = (counts[c] as i64 + step) as usize;
        diff -= step;
        let at = order.iter().position(|&o| o == c).unwrap();
        order.rotate_left(at + 1);
    }

    let mut rng = rng::stream(seed, "stratified_resplit");
    let mut in_train = vec![false; all.len()];
    for (members, &count) in by_class.iter_mut().zip(&counts) {
        members.shuffle(&mut rng);
        for &i in &members[..count] {
            in_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, &t) in all.iter().zip(&in_train) {
        if t { train.push(s.clone()) } else { test.push(s.clone()) }
    }
    Ok(Dataset { train, test, num_classes, length })
}

/// Scales a series to zero mean and unit (population) deviation; a constant
/// series becomes all zeros.
pub fn znormalize_series(values: &mut [f64]) {
    let n = values.len() as f64;
    if values.is_empty() {
        return;
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v = if std > 1e-12 { (*v - mean) / std } else { 0.0 };
    }
}

pub fn znormalize(mut dataset: Dataset) -> Dataset {
    for s in dataset.train.iter_mut().chain(dataset.test.iter_mut()) {
        znormalize_series(&mut s.values);
    }
    dataset
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Sine,
    Square,
    TwoPatterns,
}

impl SyntheticKind {
    pub fn num_classes(self) -> usize {
        match self {
            SyntheticKind::Sine | SyntheticKind::Square => 1,
            SyntheticKind::TwoPatterns => 2,
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(SyntheticKind::Sine),
            "square" => Ok(SyntheticKind::Square),
            "two_patterns" => Ok(SyntheticKind::TwoPatterns),
            other => Err(Error::Usage(format!("unknown synthetic kind {other:?} (sine, square, two_patterns)"))),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::Sine => "sine",
            SyntheticKind::Square => "square",
            SyntheticKind::TwoPatterns => "two_patterns",
        })
    }
}

fn periodic(rng: &mut Rng, length: usize, square: bool) -> Vec<f64> {
    let freq = rng.random_range(1.0..3.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    (0..length)
        .map(|t| {
            let v = (std::f64::consts::TAU * freq * t as f64 / length as f64 + phase).sin();
            if square { if v >= 0.0 { 1.0 } else { -1.0 } } else { v }
        })
        .collect()
}

/// A step-pair series: class 0 holds two up-steps, class 1 two down-steps.
/// Each step is a window whose first half sits at one level and second half at
/// the other; one window falls in each half of the series.
fn two_patterns(rng: &mut Rng, length: usize, label: usize) -> Vec<f64> {
    let mut v = vec![0.0; length];
    let width = rng.random_range(length / 8..=length / 4).max(2);
    let first = rng.random_range(0..=length / 2 - width);
    let second = rng.random_range(length / 2..=length - width);
    let up = label == 0;
    for start in [first, second] {
        let half = width / 2;
        for (j, slot) in v[start..start + width].iter_mut().enumerate() {
            let low = j < half;
            *slot = if low == up { -1.0 } else { 1.0 };
        }
    }
    v
}

/// Class-balanced synthetic series (label `i % C` for series `i`), not normalized.
pub fn synthesize_series(
    kind: SyntheticKind,
    n: usize,
    length: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<LabeledSeries>> {
    if n < 4 || length < 16 {
        return Err(Error::Usage(format!("synthetic data needs n >= 4 and length >= 16, got {n}, {length}")));
    }
    let noise = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| Error::Usage(format!("noise: {e}")))?;
    let mut rng = rng::stream(seed, "synthetic");
    let classes = kind.num_classes();
    Ok((0..n)
        .map(|i| {
            let label = i % classes;
            let mut values = match kind {
                SyntheticKind::Sine => periodic(&mut rng, length, false),
                SyntheticKind::Square => periodic(&mut rng, length, true),
                SyntheticKind::TwoPatterns => two_patterns(&mut rng, length, label),
            };
            if noise_std > 0.0 {
                values.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            LabeledSeries { values, label }
        })
        .collect())
}

/// Synthetic series split 80/20 with [`stratified_resplit`].
pub fn make_synthetic(kind: SyntheticKind, n: usize, length: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    let all = synthesize_series(kind, n, length, noise_std, seed)?;
    stratified_resplit(&all, DEFAULT_TRAIN_FRACTION, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem.tsv")
    }

    #[test]
    fn minimal_record_and_empty_file() {
        let s = parse_ucr("1\t0.0\t1.0\n", p()).unwrap();
        assert_eq!(s, vec![LabeledSeries { values: vec![0.0, 1.0], label: 0 }]);
        let err = parse_ucr("", p()).unwrap_err().to_string();
        assert!(err.contains("no records"), "{err}");
    }

    #[test]
    fn labels_remap_in_first_appearance_order() {
        let s = parse_ucr("1 0.5 0.5\n-1 1 2\n1.0 3 4\n", p()).unwrap();
        assert_eq!(s.iter().map(|r| r.label).collect::<Vec<_>>(), vec![0, 1, 0]);
        let s = parse_ucr("-1 0.5 0.5\n1 1 2\n", p()).unwrap();
        assert_eq!(s.iter().map(|r| r.label).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn verbatim_labels() {
        let s = parse_labeled("1 0.5\n0 1\n", p()).unwrap();
        assert_eq!(s.iter().map(|r| r.label).collect::<Vec<_>>(), vec![1, 0]);
        assert!(parse_labeled("-1 0.5\n", p()).is_err());
        assert!(parse_labeled("0.5 0.5\n", p()).is_err());
    }

    #[test]
    fn ragged_and_non_numeric_lines_are_named() {
        match parse_ucr("0 1 2\n0 1\n", p()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_ucr("0 1 2\n0 1 x\n", p()) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("\"x\""));
            }
            other => panic!("{other:?}"),
        }
    }

    fn per_class(n: usize, classes: usize) -> Vec<LabeledSeries> {
        (0..n * classes).map(|i| LabeledSeries { values: vec![i as f64; 3], label: i % classes }).collect()
    }

    #[test]
    fn resplit_counts_and_determinism() {
        let ds = stratified_resplit(&per_class(10, 3), 0.8, 4).unwrap();
        for (c, (tr, te)) in ds.class_histogram().into_iter().enumerate() {
            assert_eq!((tr, te), (8, 2), "class {c}");
        }
        let ds = stratified_resplit(&per_class(2, 2), 0.5, 0).unwrap();
        assert_eq!(ds.class_histogram(), vec![(1, 1), (1, 1)]);
        let again = stratified_resplit(&per_class(10, 3), 0.8, 4).unwrap();
        assert_eq!(stratified_resplit(&per_class(10, 3), 0.8, 4).unwrap(), again);
        let other = stratified_resplit(&per_class(10, 3), 0.8, 5).unwrap();
        assert_ne!(other.train, again.train);
    }

    #[test]
    fn singleton_class_cannot_be_stratified() {
        let mut all = per_class(3, 2);
        all.push(LabeledSeries { values: vec![0.0; 3], label: 2 });
        assert!(stratified_resplit(&all, 0.8, 0).is_err());
    }

    #[test]
    fn znormalize_examples() {
        let mut v = vec![1.0, 2.0, 3.0];
        znormalize_series(&mut v);
        let e = (1.5f64).sqrt();
        for (a, b) in v.iter().zip([-e, 0.0, e]) {
            assert!((a - b).abs() < 1e-12);
        }
        let before = v.clone();
        znormalize_series(&mut v);
        for (a, b) in v.iter().zip(&before) {
            assert!((a - b).abs() < 1e-6);
        }
        let mut c = vec![5.0; 3];
        znormalize_series(&mut c);
        assert_eq!(c, vec![0.0; 3]);
    }

    #[test]
    fn synthetic_examples() {
        let s = synthesize_series(SyntheticKind::Sine, 8, 32, 0.0, 1).unwrap();
        for item in &s {
            assert_eq!(item.label, 0);
            assert!(item.values.iter().all(|v| v.abs() <= 1.0));
        }
        let s = synthesize_series(SyntheticKind::TwoPatterns, 600, 128, 0.1, 1).unwrap();
        assert_eq!(s.iter().filter(|x| x.label == 0).count(), 300);
        assert_eq!(s.iter().filter(|x| x.label == 1).count(), 300);
        let a = make_synthetic(SyntheticKind::TwoPatterns, 600, 128, 0.1, 9).unwrap();
        let b = make_synthetic(SyntheticKind::TwoPatterns, 600, 128, 0.1, 9).unwrap();
        assert_eq!(format_tsv(&a.train, &[]), format_tsv(&b.train, &[]));
        assert_eq!((a.train.len(), a.test.len()), (480, 120));
        assert!("triangle".parse::<SyntheticKind>().is_err());
    }

    #[test]
    fn two_patterns_classes_differ_in_step_direction() {
        let s = synthesize_series(SyntheticKind::TwoPatterns, 6, 64, 0.0, 2).unwrap();
        for item in &s {
            let expect = if item.label == 0 { -1.0 } else { 1.0 };
            let first = item.values.iter().position(|&v| v != 0.0).unwrap();
            let second = (32..64).find(|&i| item.values[i] != 0.0 && item.values[i - 1] == 0.0).unwrap();
            assert_eq!(item.values[first], expect);
            assert_eq!(item.values[second], expect);
        }
    }

    proptest! {
        #[test]
        fn tsv_round_trip(rows in prop::collection::vec(
            (0usize..4, prop::collection::vec(-1e6f64..1e6, 5)), 1..20)) {
            let series: Vec<_> = rows.into_iter().map(|(label, values)| LabeledSeries { values, label }).collect();
            let text = format_tsv(&series, &["provenance=generated".into()]);
            let back = parse_ucr(&text, p()).unwrap();
            // labels come back remapped in first-appearance order
            let mut order = Vec::new();
            for s in &series {
                if !order.contains(&s.label) { order.push(s.label); }
            }
            for (a, b) in series.iter().zip(&back) {
                prop_assert_eq!(order.iter().position(|&l| l == a.label).unwrap(), b.label);
                for (x, y) in a.values.iter().zip(&b.values) {
                    prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
                }
            }
        }

        #[test]
        fn resplit_preserves_proportions(sizes in prop::collection::vec(2usize..30, 1..5), seed in 0u64..100) {
            let mut all = Vec::new();
            for (c, &n) in sizes.iter().enumerate() {
                for _ in 0..n { all.push(LabeledSeries { values: vec![0.0], label: c }); }
            }
            let ds = stratified_resplit(&all, 0.8, seed).unwrap();
            for (c, (tr, te)) in ds.class_histogram().into_iter().enumerate() {
                prop_assert_eq!(tr + te, sizes[c]);
                let ideal = 0.8 * sizes[c] as f64;
                prop_assert!((tr as f64 - ideal).abs() <= 1.5, "class {} {} vs {}", c, tr, ideal);
                prop_assert!(tr >= 1 && te >= 1);
            }
        }
    }
}
