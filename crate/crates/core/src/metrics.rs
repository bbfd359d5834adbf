//! Visual-search metrics, hazard-recognition indices, correlation analysis
//! and validation-accuracy arithmetic.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::{AoiDwell, Fixation};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("total hazard count must be at least 1")]
    ZeroTotal,
    #[error("identified count {identified} exceeds total {total}")]
    CountExceedsTotal { identified: u32, total: u32 },
    #[error("empty list")]
    EmptyList,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("series has zero variance")]
    ZeroVariance,
    #[error("degenerate sample: r = {r}, n = {n}")]
    DegenerateSample { r: f64, n: usize },
    #[error("need at least 3 workers, got {0}")]
    TooFewWorkers(usize),
    #[error("AOI key sets differ: {0}")]
    KeyMismatch(String),
    #[error("system dwell for {0} is zero")]
    ZeroSystemDwell(String),
    #[error("session span must be positive, got {0}")]
    NonPositiveSpan(f64),
    #[error("mean fixation duration must be positive, got {0}")]
    NonPositiveMfd(f64),
    #[error("line {line}: {message}")]
    MalformedRow { line: u64, message: String },
    #[error("{0}")]
    Schema(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Compensated (Neumaier) summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = NeumaierSum::default();
    for v in values {
        s.add(v);
    }
    s.total()
}

/// Rounds half away from zero to `dp` decimals.
pub fn round_to(v: f64, dp: i32) -> f64 {
    let f = 10f64.powi(dp);
    (v * f).round() / f
}

/// Half-up rounding to an integer percent.
pub fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

pub fn compute_hri(identified: u32, total: u32) -> Result<f64, MetricsError> {
    if total == 0 {
        return Err(MetricsError::ZeroTotal);
    }
    if identified > total {
        return Err(MetricsError::CountExceedsTotal { identified, total });
    }
    Ok(identified as f64 / total as f64)
}

pub fn compute_av_hri(hri: &[f64]) -> Result<f64, MetricsError> {
    if hri.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    Ok(compensated_sum(hri.iter().copied()) / hri.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardRecognitionRecord {
    pub worker_id: String,
    /// `(identified, total)` per image.
    pub images: Vec<(u32, u32)>,
    pub hri: Vec<f64>,
    pub av_hri: f64,
}

impl HazardRecognitionRecord {
    pub fn new(worker_id: impl Into<String>, images: Vec<(u32, u32)>) -> Result<Self, MetricsError> {
        let hri = images
            .iter()
            .map(|&(i, t)| compute_hri(i, t))
            .collect::<Result<Vec<_>, _>>()?;
        let av_hri = compute_av_hri(&hri)?;
        Ok(Self {
            worker_id: worker_id.into(),
            images,
            hri,
            av_hri,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sd_ms: f64,
    pub fc: usize,
    pub ft_ms: f64,
    /// FT / FC; absent when there are no fixations.
    pub mfd_ms: Option<f64>,
    /// MFD rounded to two decimals for presentation.
    pub mfd_ms_2dp: Option<f64>,
    pub roaft: Option<f64>,
    pub fr: Option<f64>,
    /// Share of the search duration spent fixating (FT / SD).
    pub ft_sd_ratio: f64,
    pub dwell_ms: BTreeMap<String, f64>,
}

/// Aggregates fixations and AOI dwells over a session of `span_ms`.
///
/// A fixation counts as on-target when its centroid hit-tested into an AOI.
pub fn compute_metrics(
    fixations: &[Fixation],
    dwells: &[AoiDwell],
    span_ms: f64,
) -> Result<MetricsReport, MetricsError> {
    if !(span_ms > 0.0) || !span_ms.is_finite() {
        return Err(MetricsError::NonPositiveSpan(span_ms));
    }
    let fc = fixations.len();
    let ft = compensated_sum(fixations.iter().map(|f| f.duration_ms()));
    let on_target = compensated_sum(
        fixations
            .iter()
            .filter(|f| f.aoi_id.is_some())
            .map(|f| f.duration_ms()),
    );
    let in_aoi = fixations.iter().filter(|f| f.aoi_id.is_some()).count();
    let mfd = (fc > 0).then(|| ft / fc as f64);
    let mut dwell_ms = BTreeMap::new();
    for d in dwells {
        *dwell_ms.entry(d.aoi_id.clone()).or_insert(0.0) += d.duration_ms;
    }
    Ok(MetricsReport {
        sd_ms: span_ms,
        fc,
        ft_ms: ft,
        mfd_ms: mfd,
        mfd_ms_2dp: mfd.map(|m| round_to(m, 2)),
        roaft: (fc > 0 && ft > 0.0).then(|| on_target / ft),
        fr: (fc > 0).then(|| in_aoi as f64 / fc as f64),
        ft_sd_ratio: ft / span_ms,
        dwell_ms,
    })
}

/// Pearson product-moment correlation with compensated sums.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricsError::EmptyList);
    }
    let n = x.len() as f64;
    let mx = compensated_sum(x.iter().copied()) / n;
    let my = compensated_sum(y.iter().copied()) / n;
    let mut sxy = NeumaierSum::default();
    let mut sxx = NeumaierSum::default();
    let mut syy = NeumaierSum::default();
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy.add(dx * dy);
        sxx.add(dx * dx);
        syy.add(dy * dy);
    }
    let (sxx, syy) = (sxx.total(), syy.total());
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((sxy.total() / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Lanczos approximation of ln Γ(x) for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta, modified Lentz.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-tailed p-value of a Pearson `r` over `n` pairs, via the t statistic
/// with `n - 2` degrees of freedom.
pub fn p_value_two_tailed(r: f64, n: usize) -> Result<f64, MetricsError> {
    if n < 3 || !r.is_finite() || r.abs() > 1.0 {
        return Err(MetricsError::DegenerateSample { r, n });
    }
    if r.abs() == 1.0 {
        return Ok(0.0);
    }
    let df = (n - 2) as f64;
    let p = incomplete_beta(df / 2.0, 0.5, 1.0 - r * r);
    Ok(p.clamp(0.0, 1.0))
}

/// Per-worker averages used for the correlation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerMetrics {
    pub worker_id: String,
    pub av_hri: f64,
    pub sd_ms: Option<f64>,
    pub ft_ms: Option<f64>,
    pub fc: Option<f64>,
    pub mfd_ms: Option<f64>,
    pub roaft: Option<f64>,
    pub fr: Option<f64>,
}

pub const METRIC_NAMES: [&str; 6] = ["SD", "FT", "FC", "MFD", "ROAFT", "FR"];

impl WorkerMetrics {
    fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "SD" => self.sd_ms,
            "FT" => self.ft_ms,
            "FC" => self.fc,
            "MFD" => self.mfd_ms,
            "ROAFT" => self.roaft,
            "FR" => self.fr,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub metric: String,
    /// Absent when fewer than 3 workers report the metric or it has no
    /// variance.
    pub r: Option<f64>,
    pub p: Option<f64>,
    pub n: usize,
}

pub fn correlation_table(workers: &[WorkerMetrics]) -> Result<Vec<CorrelationRow>, MetricsError> {
    if workers.len() < 3 {
        return Err(MetricsError::TooFewWorkers(workers.len()));
    }
    let mut rows = Vec::with_capacity(METRIC_NAMES.len());
    for name in METRIC_NAMES {
        let (hri, vals): (Vec<f64>, Vec<f64>) = workers
            .iter()
            .filter_map(|w| w.metric(name).map(|v| (w.av_hri, v)))
            .unzip();
        let n = vals.len();
        let r = if n >= 3 { pearson_r(&vals, &hri).ok() } else { None };
        let p = r.and_then(|r| p_value_two_tailed(r, n).ok());
        rows.push(CorrelationRow {
            metric: name.to_string(),
            r,
            p,
            n,
        });
    }
    Ok(rows)
}

const WORKER_HEADER: [&str; 8] = [
    "worker_id", "av_hri", "sd_ms", "ft_ms", "fc", "mfd_ms", "roaft", "fr",
];

/// Reads `worker_id,av_hri,sd_ms,ft_ms,fc,mfd_ms,roaft,fr`; blank metric
/// cells are missing values.
pub fn read_worker_csv(path: &Path) -> Result<Vec<WorkerMetrics>, MetricsError> {
    let io = |source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    };
    let text = std::fs::read_to_string(path).map_err(io)?;
    parse_worker_csv(&text)
}

pub fn parse_worker_csv(text: &str) -> Result<Vec<WorkerMetrics>, MetricsError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| MetricsError::Schema(e.to_string()))?
        .clone();
    if header.iter().ne(WORKER_HEADER.iter().copied()) {
        return Err(MetricsError::Schema(format!(
            "expected header {}, got {}",
            WORKER_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| MetricsError::MalformedRow {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| MetricsError::MalformedRow { line, message };
        let cell = |i: usize| -> Result<Option<f64>, MetricsError> {
            let s = rec.get(i).unwrap_or("");
            if s.is_empty() {
                return Ok(None);
            }
            let v: f64 = s
                .parse()
                .map_err(|_| bad(format!("{} is not a number: {s:?}", WORKER_HEADER[i])))?;
            if !v.is_finite() {
                return Err(bad(format!("{} is not finite", WORKER_HEADER[i])));
            }
            Ok(Some(v))
        };
        let worker_id = rec.get(0).unwrap_or("").to_string();
        if worker_id.is_empty() {
            return Err(bad("worker_id is empty".into()));
        }
        let av_hri = cell(1)?.ok_or_else(|| bad("av_hri is required".into()))?;
        out.push(WorkerMetrics {
            worker_id,
            av_hri,
            sd_ms: cell(2)?,
            ft_ms: cell(3)?,
            fc: cell(4)?,
            mfd_ms: cell(5)?,
            roaft: cell(6)?,
            fr: cell(7)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub aoi_id: String,
    pub system_ms: f64,
    pub manual_ms: f64,
    pub variation_ms: f64,
    pub accuracy: f64,
    /// Accuracy rounded half-up to an integer percent.
    pub accuracy_pct: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub rows: Vec<ValidationRow>,
    pub mean_accuracy: f64,
    pub mean_accuracy_pct: i64,
}

/// Per-AOI accuracy of system dwell times against a manual count, with the
/// system value as denominator.
pub fn validation_accuracy(
    system: &BTreeMap<String, f64>,
    manual: &BTreeMap<String, f64>,
) -> Result<ValidationReport, MetricsError> {
    if system.keys().ne(manual.keys()) {
        let only_sys: Vec<_> = system.keys().filter(|k| !manual.contains_key(*k)).collect();
        let only_man: Vec<_> = manual.keys().filter(|k| !system.contains_key(*k)).collect();
        return Err(MetricsError::KeyMismatch(format!(
            "system only {only_sys:?}, manual only {only_man:?}"
        )));
    }
    if system.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let mut rows = Vec::with_capacity(system.len());
    for (id, &sys) in system {
        if !(sys > 0.0) {
            return Err(MetricsError::ZeroSystemDwell(id.clone()));
        }
        let man = manual[id];
        let variation = (sys - man).abs();
        let accuracy = (1.0 - variation / sys) * 100.0;
        rows.push(ValidationRow {
            aoi_id: id.clone(),
            system_ms: sys,
            manual_ms: man,
            variation_ms: variation,
            accuracy,
            accuracy_pct: round_half_up(accuracy),
        });
    }
    let mean = compensated_sum(rows.iter().map(|r| r.accuracy)) / rows.len() as f64;
    Ok(ValidationReport {
        rows,
        mean_accuracy: mean,
        mean_accuracy_pct: round_half_up(mean),
    })
}

/// Frames per manual counting set.
pub const MANUAL_SET_FRAMES: usize = 6;

/// Manual-count channel: disjoint sets of six consecutive in-AOI frames,
/// each worth one mean fixation duration.
pub fn manual_dwell_oracle(
    hits: &[Option<String>],
    mfd_ms: f64,
) -> Result<BTreeMap<String, f64>, MetricsError> {
    if !(mfd_ms > 0.0) || !mfd_ms.is_finite() {
        return Err(MetricsError::NonPositiveMfd(mfd_ms));
    }
    let mut sets: BTreeMap<String, usize> = BTreeMap::new();
    let mut i = 0;
    while i < hits.len() {
        let Some(id) = &hits[i] else {
            i += 1;
            continue;
        };
        let run = hits[i..]
            .iter()
            .take_while(|h| h.as_ref() == Some(id))
            .count();
        *sets.entry(id.clone()).or_insert(0) += run / MANUAL_SET_FRAMES;
        i += run;
    }
    Ok(sets
        .into_iter()
        .map(|(id, n)| (id, n as f64 * mfd_ms))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2;
    use num_rational::BigRational;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    fn fix(start: f64, end: f64, aoi: Option<&str>) -> Fixation {
        Fixation {
            start_ms: start,
            end_ms: end,
            centroid: Point2::new(0.0, 0.0),
            ref_id: None,
            aoi_id: aoi.map(str::to_string),
        }
    }

    #[test]
    fn hri_cases() {
        assert_eq!(compute_hri(5, 10).unwrap(), 0.5);
        assert_eq!(compute_hri(0, 7).unwrap(), 0.0);
        assert_eq!(compute_hri(7, 7).unwrap(), 1.0);
        assert!(matches!(compute_hri(1, 0), Err(MetricsError::ZeroTotal)));
        assert!(matches!(
            compute_hri(8, 7),
            Err(MetricsError::CountExceedsTotal { .. })
        ));
    }

    #[test]
    fn av_hri_cases() {
        assert_eq!(compute_av_hri(&[0.5, 0.5]).unwrap(), 0.5);
        assert_eq!(compute_av_hri(&[0.0, 1.0]).unwrap(), 0.5);
        assert!(matches!(compute_av_hri(&[]), Err(MetricsError::EmptyList)));
    }

    #[test]
    fn av_hri_of_twelve_images_matches_exact_fractions() {
        // Hazards identified out of totals for twelve photographs.
        let images: Vec<(u32, u32)> = vec![
            (3, 10), (2, 5), (1, 2), (3, 5), (7, 10), (4, 5),
            (9, 10), (1, 1), (2, 7), (5, 9), (6, 11), (10, 13),
        ];
        let exact = images
            .iter()
            .map(|&(i, t)| BigRational::new(i.into(), t.into()))
            .fold(BigRational::from_integer(0.into()), |acc, v| acc + v)
            / BigRational::from_integer(12.into());
        let (num, den): (f64, f64) = (
            exact.numer().to_string().parse().unwrap(),
            exact.denom().to_string().parse().unwrap(),
        );
        let rec = HazardRecognitionRecord::new("w01", images).unwrap();
        assert!((rec.av_hri - num / den).abs() < 1e-15);
        assert_eq!(rec.hri.len(), 12);
    }

    #[test]
    fn case_study_search_metrics() {
        // 33 fixations totalling 8212.5 ms over an 18250 ms search.
        let mut fixations: Vec<Fixation> = (0..32)
            .map(|i| fix(i as f64 * 500.0, i as f64 * 500.0 + 250.0, None))
            .collect();
        fixations.push(fix(16_000.0, 16_212.5, None));
        let m = compute_metrics(&fixations, &[], 18_250.0).unwrap();
        assert_eq!(m.fc, 33);
        assert_eq!(m.ft_ms, 8212.5);
        assert_eq!(m.mfd_ms_2dp, Some(248.86));
        assert_eq!(round_to(m.ft_sd_ratio, 2), 0.45);
    }

    #[test]
    fn roaft_from_attention_distribution() {
        let table2 = [900.0, 235.0, 257.0, 1148.0, 1270.0];
        let mut fixations = Vec::new();
        let mut t = 0.0;
        for (i, d) in table2.iter().enumerate() {
            fixations.push(fix(t, t + d, Some(&format!("H{}", i + 1))));
            t += d + 100.0;
        }
        fixations.push(fix(t, t + (8212.5 - 3810.0), None));
        let m = compute_metrics(&fixations, &[], 18_250.0).unwrap();
        // 3810 / 8212.5 = 508 / 1095
        assert!((m.roaft.unwrap() - 508.0 / 1095.0).abs() < 1e-15);
        assert_eq!(round_to(m.roaft.unwrap(), 4), 0.4639);
        assert_eq!(m.fr, Some(5.0 / 6.0));
    }

    #[test]
    fn zero_fixations_leave_ratios_absent() {
        let m = compute_metrics(&[], &[], 1000.0).unwrap();
        assert_eq!(m.fc, 0);
        assert_eq!(m.mfd_ms, None);
        assert_eq!(m.roaft, None);
        assert_eq!(m.fr, None);
        assert!(compute_metrics(&[], &[], 0.0).is_err());
    }

    #[test]
    fn pearson_cases() {
        assert!((pearson_r(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson_r(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            pearson_r(&[1.0, 2.0], &[1.0]),
            Err(MetricsError::LengthMismatch(2, 1))
        ));
        assert!(matches!(
            pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(MetricsError::ZeroVariance)
        ));
    }

    #[test]
    fn pearson_matches_exact_fraction_oracle() {
        let x = [1i64, 2, 3, 4];
        let y = [1i64, 3, 2, 4];
        let q = |v: i64| BigRational::from_integer(v.into());
        let n = q(4);
        let mx = x.iter().map(|&v| q(v)).fold(q(0), |a, b| a + b) / n.clone();
        let my = y.iter().map(|&v| q(v)).fold(q(0), |a, b| a + b) / n;
        let mut cov = q(0);
        let mut vx = q(0);
        let mut vy = q(0);
        for (&a, &b) in x.iter().zip(&y) {
            let (dx, dy) = (q(a) - mx.clone(), q(b) - my.clone());
            cov += dx.clone() * dy.clone();
            vx += dx.clone() * dx;
            vy += dy.clone() * dy;
        }
        assert_eq!(cov, q(4));
        assert_eq!(vx, q(5));
        assert_eq!(vy, q(5));
        // r = 4 / sqrt(5 * 5) = 4/5
        let r = pearson_r(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-15);
    }

    fn oracle_p(r: f64, n: usize) -> f64 {
        let df = (n - 2) as f64;
        let t = r.abs() * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).unwrap();
        2.0 * (1.0 - dist.cdf(t))
    }

    #[test]
    fn p_values_agree_with_student_t() {
        for &n in &[3usize, 5, 10, 23, 24, 100] {
            for i in 0..40 {
                let r = -0.975 + i as f64 * 0.05;
                let got = p_value_two_tailed(r, n).unwrap();
                let want = oracle_p(r, n);
                assert!((got - want).abs() < 1e-9, "r={r} n={n}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn p_value_table() {
        let pairs = [
            (0.563, 0.005),
            (0.635, 0.001),
            (0.649, 0.001),
            (0.393, 0.064),
            (-0.093, 0.673),
            (-0.132, 0.548),
        ];
        for (r, p) in pairs {
            let got = p_value_two_tailed(r, 23).unwrap();
            assert!((got - p).abs() <= 0.002, "r={r}: {got}");
        }
        assert!((p_value_two_tailed(0.635, 23).unwrap() - 0.001).abs() <= 0.0005);
        assert_eq!(p_value_two_tailed(0.0, 23).unwrap(), 1.0);
        assert_eq!(p_value_two_tailed(1.0, 23).unwrap(), 0.0);
        assert!(p_value_two_tailed(0.5, 2).is_err());
        assert!(p_value_two_tailed(1.5, 10).is_err());
        assert!(p_value_two_tailed(f64::NAN, 10).is_err());
    }

    fn worker(id: usize, av: f64, m: f64) -> WorkerMetrics {
        WorkerMetrics {
            worker_id: format!("w{id:02}"),
            av_hri: av,
            sd_ms: Some(m),
            ft_ms: Some(m),
            fc: Some(m),
            mfd_ms: Some(m),
            roaft: Some(m),
            fr: Some(m),
        }
    }

    #[test]
    fn correlation_table_planted_linear() {
        let workers: Vec<_> = (0..23)
            .map(|i| {
                let av = 0.3 + 0.02 * i as f64;
                worker(i, av, 2.0 * av)
            })
            .collect();
        let rows = correlation_table(&workers).unwrap();
        assert_eq!(rows.len(), 6);
        for row in rows {
            assert!((row.r.unwrap() - 1.0).abs() < 1e-12);
            assert!(row.p.unwrap() < 1e-12);
            assert_eq!(row.n, 23);
        }
        assert!(matches!(
            correlation_table(&workers[..2]),
            Err(MetricsError::TooFewWorkers(2))
        ));
    }

    #[test]
    fn correlation_rows_report_their_own_n() {
        let mut workers: Vec<_> = (0..6).map(|i| worker(i, i as f64, (i * i) as f64)).collect();
        workers[2].fc = None;
        workers[3].roaft = None;
        workers[4].roaft = None;
        workers[5].roaft = None;
        let rows = correlation_table(&workers).unwrap();
        let by_name: BTreeMap<_, _> = rows.iter().map(|r| (r.metric.as_str(), r)).collect();
        assert_eq!(by_name["FC"].n, 5);
        assert_eq!(by_name["ROAFT"].n, 3);
        assert_eq!(by_name["SD"].n, 6);
    }

    #[test]
    fn worker_csv_parsing() {
        let text = "worker_id,av_hri,sd_ms,ft_ms,fc,mfd_ms,roaft,fr\n\
                    w1,0.5,1000,400,2,200,0.5,0.5\n\
                    w2,0.7,,500,3,,0.2,0.1\n";
        let ws = parse_worker_csv(text).unwrap();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[1].sd_ms, None);
        assert_eq!(ws[1].ft_ms, Some(500.0));
        let bad = "worker_id,av_hri,sd_ms,ft_ms,fc,mfd_ms,roaft,fr\nw1,x,1,1,1,1,1,1\n";
        assert!(matches!(
            parse_worker_csv(bad),
            Err(MetricsError::MalformedRow { line: 2, .. })
        ));
        assert!(matches!(
            parse_worker_csv("id,hri\n"),
            Err(MetricsError::Schema(_))
        ));
    }

    fn table4() -> (BTreeMap<String, f64>, BTreeMap<String, f64>) {
        let ids = ["H1", "H2", "H3", "H4", "H5"];
        let sys = [900.0, 235.0, 257.0, 1148.0, 1270.0];
        let man = [744.0, 248.0, 248.0, 992.0, 992.0];
        (
            ids.iter().map(|s| s.to_string()).zip(sys).collect(),
            ids.iter().map(|s| s.to_string()).zip(man).collect(),
        )
    }

    #[test]
    fn validation_reproduces_table() {
        let (sys, man) = table4();
        let rep = validation_accuracy(&sys, &man).unwrap();
        let pct: Vec<i64> = rep.rows.iter().map(|r| r.accuracy_pct).collect();
        assert_eq!(pct, vec![83, 94, 96, 86, 78]);
        let var: Vec<f64> = rep.rows.iter().map(|r| r.variation_ms).collect();
        assert_eq!(var, vec![156.0, 13.0, 9.0, 156.0, 278.0]);
        assert_eq!(rep.mean_accuracy_pct, 88);
    }

    #[test]
    fn validation_errors() {
        let (sys, mut man) = table4();
        man.remove("H5");
        assert!(matches!(
            validation_accuracy(&sys, &man),
            Err(MetricsError::KeyMismatch(_))
        ));
        let (mut sys, man) = table4();
        sys.insert("H1".into(), 0.0);
        assert!(matches!(
            validation_accuracy(&sys, &man),
            Err(MetricsError::ZeroSystemDwell(_))
        ));
    }

    #[test]
    fn manual_oracle_counts_disjoint_sets() {
        let run = |n: usize| vec![Some("H1".to_string()); n];
        assert_eq!(manual_dwell_oracle(&run(6), 248.0).unwrap()["H1"], 248.0);
        assert_eq!(manual_dwell_oracle(&run(12), 248.0).unwrap()["H1"], 496.0);
        assert_eq!(manual_dwell_oracle(&run(5), 248.0).unwrap()["H1"], 0.0);
        let mut mixed = run(7);
        mixed.push(None);
        mixed.extend(run(6));
        mixed.extend(vec![Some("H2".to_string()); 18]);
        let m = manual_dwell_oracle(&mixed, 248.0).unwrap();
        assert_eq!(m["H1"], 496.0);
        assert_eq!(m["H2"], 744.0);
    }

    #[test]
    fn rounding_helpers() {
        assert_eq!(round_half_up(82.5), 83);
        assert_eq!(round_half_up(82.49), 82);
        assert_eq!(round_to(248.863_636, 2), 248.86);
    }
}
