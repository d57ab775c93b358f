//! Overlap and intensity metrics, and a threshold-based lesion segmenter.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Mask};

/// `2|A n B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    a.ensure_same_dims(b, "dice")?;
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        return Ok(1.0);
    }
    let both = a.and(b)?.count();
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentThresholds {
    /// Minimum channel-2 z-score.
    pub hyper: f64,
    /// Minimum magnitude of the (negative) channel-1 z-score.
    pub hypo: f64,
    /// Connected components (8-neighbourhood) smaller than this are dropped.
    pub min_component: usize,
}

impl Default for SegmentThresholds {
    fn default() -> Self {
        Self { hyper: 2.0, hypo: 2.0, min_component: 3 }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median and MAD-based standard deviation of channel `c` over `mask`.
fn robust_stats(image: &ImageGrid, mask: &Mask, c: usize) -> (f64, f64) {
    let mut vals: Vec<f64> = image.channel_values_in(mask, c).collect();
    let med = median(&mut vals);
    let mut dev: Vec<f64> = vals.iter().map(|v| (v - med).abs()).collect();
    let sigma = 1.4826 * median(&mut dev);
    (med, sigma.max(1e-12))
}

/// Drops 8-connected components with fewer than `min_size` pixels.
pub fn remove_small_components(mask: &Mask, min_size: usize) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    let mut keep = mask.clone();
    let mut seen = vec![false; h * w];
    let mut stack = Vec::new();
    let mut comp = Vec::new();
    for start in mask.indices() {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        comp.clear();
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.at(q) && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        if comp.len() < min_size {
            for &p in &comp {
                keep.set(p / w, p % w, false);
            }
        }
    }
    keep
}

/// Pixels inside `wm_mask` that are bright in channel 2 and dark in channel 1
/// relative to robust white-matter statistics.
pub fn toy_segment(image: &ImageGrid, wm_mask: &Mask, th: &SegmentThresholds) -> Result<Mask> {
    if image.channels() != 2 {
        return Err(Error::dims("toy_segment channels", 2, image.channels()));
    }
    image.ensure_mask_fits(wm_mask, "toy_segment white-matter mask")?;
    if wm_mask.is_empty() {
        return Err(Error::Domain("toy_segment: white-matter mask is empty".into()));
    }
    let (m1, s1) = robust_stats(image, wm_mask, 0);
    let (m2, s2) = robust_stats(image, wm_mask, 1);
    let mut out = Mask::zeros(image.height(), image.width());
    for p in wm_mask.indices() {
        let px = image.pixel(p);
        if (px[1] - m2) / s2 > th.hyper && (px[0] - m1) / s1 < -th.hypo {
            out.set(p / image.width(), p % image.width(), true);
        }
    }
    Ok(remove_small_components(&out, th.min_component))
}

/// Per-channel mean and (population) standard deviation over a region; both
/// vectors are empty when the region is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub pixels: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl RegionStats {
    pub fn of(image: &ImageGrid, mask: &Mask) -> Self {
        let pixels = mask.count();
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for c in (0..image.channels()).filter(|_| pixels > 0) {
            let m = image.channel_values_in(mask, c).sum::<f64>() / pixels as f64;
            let v = image.channel_values_in(mask, c).map(|x| (x - m) * (x - m)).sum::<f64>() / pixels as f64;
            mean.push(m);
            std.push(v.sqrt());
        }
        Self { pixels, mean, std }
    }
}

fn ser_db<S: Serializer>(v: &Option<Vec<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    #[derive(Serialize)]
    #[serde(untagged)]
    enum Db {
        Finite(f64),
        Text(&'static str),
    }
    let mapped: Option<Vec<Db>> = v
        .as_ref()
        .map(|xs| xs.iter().map(|&x| if x == f64::INFINITY { Db::Text("inf") } else { Db::Finite(x) }).collect());
    mapped.serialize(s)
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Vec<f64>>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Finite(f64),
        Text(String),
    }
    let raw: Option<Vec<Db>> = Option::deserialize(d)?;
    raw.map(|xs| {
        xs.into_iter()
            .map(|x| match x {
                Db::Finite(v) => Ok(v),
                Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
                Db::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR value {t:?}"))),
            })
            .collect()
    })
    .transpose()
}

/// Quality metrics for one filled or synthesized image. Fields that do not
/// apply to a given comparison are `None`. Infinite PSNR serializes as `"inf"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: Option<f64>,
    pub mae_in_mask: Option<Vec<f64>>,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr_in_mask: Option<Vec<f64>>,
    pub outside_mask_max_abs_diff: Option<f64>,
    /// Statistics inside the evaluated mask.
    pub inside: RegionStats,
    /// Statistics over white matter outside the repainted region.
    pub wm_ring: RegionStats,
}

impl MetricsReport {
    /// Per channel, `|mean_inside - mean_ring|` in units of the pooled
    /// standard deviation `sqrt((sd_inside^2 + sd_ring^2) / 2)`. Empty when
    /// either region is empty.
    pub fn mean_gap_in_pooled_sd(&self) -> Vec<f64> {
        (0..self.inside.mean.len().min(self.wm_ring.mean.len()))
            .map(|c| {
                let pooled = ((self.inside.std[c].powi(2) + self.wm_ring.std[c].powi(2)) / 2.0).sqrt();
                (self.inside.mean[c] - self.wm_ring.mean[c]).abs() / pooled
            })
            .collect()
    }
}

fn mae_psnr(a: &ImageGrid, b: &ImageGrid, mask: &Mask) -> (Vec<f64>, Vec<f64>) {
    let n = mask.count() as f64;
    (0..a.channels())
        .map(|c| {
            let (mut abs, mut sq) = (0.0, 0.0);
            for (x, y) in a.channel_values_in(mask, c).zip(b.channel_values_in(mask, c)) {
                abs += (x - y).abs();
                sq += (x - y) * (x - y);
            }
            let mse = sq / n;
            let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() };
            (abs / n, psnr)
        })
        .unzip()
}

/// Compares a filled image with the pair's healthy ground truth inside the
/// lesion mask, and with the lesioned input outside `repaint` (the region the
/// sampler was allowed to modify).
pub fn fill_report(
    filled: &ImageGrid,
    healthy: &ImageGrid,
    lesioned: &ImageGrid,
    lesion_mask: &Mask,
    wm_mask: &Mask,
    repaint: &Mask,
) -> Result<MetricsReport> {
    filled.ensure_same_shape(healthy, "fill_report healthy")?;
    filled.ensure_same_shape(lesioned, "fill_report lesioned")?;
    for m in [lesion_mask, wm_mask, repaint] {
        filled.ensure_mask_fits(m, "fill_report mask")?;
    }
    let (mae, psnr) = if lesion_mask.is_empty() {
        (None, None)
    } else {
        let (a, b) = mae_psnr(filled, healthy, lesion_mask);
        (Some(a), Some(b))
    };
    let outside = repaint
        .complement()
        .indices()
        .flat_map(|p| filled.pixel(p).iter().zip(lesioned.pixel(p)).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    Ok(MetricsReport {
        dice: None,
        mae_in_mask: mae,
        psnr_in_mask: psnr,
        outside_mask_max_abs_diff: Some(outside),
        inside: RegionStats::of(filled, lesion_mask),
        wm_ring: RegionStats::of(filled, &wm_mask.and_not(repaint)?),
    })
}

/// Segments the synthetic image and scores it against the requested mask.
pub fn synth_report(
    synthetic: &ImageGrid,
    target_mask: &Mask,
    wm_mask: &Mask,
    th: &SegmentThresholds,
) -> Result<MetricsReport> {
    synthetic.ensure_mask_fits(target_mask, "synth_report target mask")?;
    let seg = toy_segment(synthetic, wm_mask, th)?;
    Ok(MetricsReport {
        dice: Some(dice(&seg, target_mask)?),
        mae_in_mask: None,
        psnr_in_mask: None,
        outside_mask_max_abs_diff: None,
        inside: RegionStats::of(synthetic, target_mask),
        wm_ring: RegionStats::of(synthetic, &wm_mask.and_not(target_mask)?),
    })
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary { n, mean: f64::NAN, std: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std =
        if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    Summary { n, mean, std }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, generate_phantom_with, PhantomSpec};
    use proptest::prelude::*;

    fn mask(n: usize, on: &[usize]) -> Mask {
        Mask::from_fn(1, n, |_, x| on.contains(&x))
    }

    #[test]
    fn dice_examples() {
        let a = mask(10, &[0, 1, 2, 3]);
        let b = mask(10, &[1, 2, 3, 6, 7, 8]);
        assert!((dice(&a, &b).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask(10, &[8])).unwrap(), 0.0);
        assert_eq!(dice(&mask(10, &[]), &mask(10, &[])).unwrap(), 1.0);
        assert!(dice(&a, &mask(9, &[])).is_err());
    }

    proptest! {
        #[test]
        fn dice_is_symmetric(a in proptest::collection::vec(any::<bool>(), 30), b in proptest::collection::vec(any::<bool>(), 30)) {
            let ma = Mask::from_fn(5, 6, |y, x| a[y * 6 + x]);
            let mb = Mask::from_fn(5, 6, |y, x| b[y * 6 + x]);
            let d = dice(&ma, &mb).unwrap();
            prop_assert_eq!(d, dice(&mb, &ma).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(dice(&ma, &ma).unwrap(), 1.0);
        }
    }

    #[test]
    fn small_components_removed() {
        let m = Mask::from_fn(6, 6, |y, x| (y == 0 && x == 0) || (y >= 3 && x >= 3 && (y + x) % 2 == 0));
        let kept = remove_small_components(&m, 3);
        assert!(!kept.get(0, 0));
        assert!(kept.get(3, 3) && kept.get(4, 4) && kept.get(5, 5));
    }

    #[test]
    fn segmenter_behaviour() {
        let wm = Mask::ones(8, 8);
        let flat = ImageGrid::filled(8, 8, 2, 0.5);
        assert!(toy_segment(&flat, &wm, &SegmentThresholds::default()).unwrap().is_empty());
        assert!(toy_segment(&flat, &Mask::zeros(8, 8), &SegmentThresholds::default()).is_err());

        let spec = PhantomSpec::default();
        let th = SegmentThresholds::default();
        let mut scores = Vec::new();
        for seed in 100..120 {
            let clean = generate_phantom_with(seed, &spec, false).unwrap();
            let seg = toy_segment(&clean.healthy, &clean.wm_mask, &th).unwrap();
            assert!(seg.count() * 1000 <= clean.wm_mask.count(), "seed {seed}: {} false positives", seg.count());
            let p = generate_phantom(seed, &spec).unwrap();
            let seg = toy_segment(&p.lesioned, &p.wm_mask, &th).unwrap();
            scores.push(dice(&seg, &p.lesion_mask).unwrap());
            // z-scores do not move when both channels shift together
            let shifted = p.lesioned.map(|v| v + 0.25);
            assert_eq!(toy_segment(&shifted, &p.wm_mask, &th).unwrap(), seg);
        }
        assert!(summarize(&scores).mean >= 0.85, "{scores:?}");
    }

    #[test]
    fn fill_report_examples() {
        let p = generate_phantom(3, &PhantomSpec::default()).unwrap();
        let rep = fill_report(&p.healthy, &p.healthy, &p.lesioned, &p.lesion_mask, &p.wm_mask, &p.lesion_mask).unwrap();
        assert_eq!(rep.mae_in_mask.as_ref().unwrap(), &vec![0.0, 0.0]);
        assert_eq!(rep.psnr_in_mask.as_ref().unwrap(), &vec![f64::INFINITY; 2]);
        assert_eq!(rep.dice, None);
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("\"psnr_in_mask\":[\"inf\",\"inf\"]"));
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.psnr_in_mask, rep.psnr_in_mask);

        let rep =
            fill_report(&p.lesioned, &p.healthy, &p.lesioned, &p.lesion_mask, &p.wm_mask, &p.lesion_mask).unwrap();
        assert_eq!(rep.outside_mask_max_abs_diff, Some(0.0));
        let n = p.lesion_mask.count() as f64;
        for c in 0..2 {
            let want =
                p.lesion_mask.indices().map(|q| (p.lesioned.pixel(q)[c] - p.healthy.pixel(q)[c]).abs()).sum::<f64>()
                    / n;
            assert!((rep.mae_in_mask.as_ref().unwrap()[c] - want).abs() < 1e-12);
        }
        assert!(rep.mae_in_mask.unwrap()[1] > 0.2);
    }

    #[test]
    fn synth_report_examples() {
        let p = generate_phantom(4, &PhantomSpec::default()).unwrap();
        let th = SegmentThresholds::default();
        assert!(synth_report(&p.lesioned, &p.lesion_mask, &p.wm_mask, &th).unwrap().dice.unwrap() >= 0.85);
        let clean = generate_phantom_with(4, &PhantomSpec::default(), false).unwrap();
        let empty = Mask::zeros(64, 64);
        assert_eq!(synth_report(&clean.healthy, &empty, &clean.wm_mask, &th).unwrap().dice, Some(1.0));
    }

    #[test]
    fn summary_statistics() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!((s.n, s.mean), (4, 2.5));
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(summarize(&[7.0]).std, 0.0);
    }
}
