//! Discrete entropy, TMQI, the histogram-equalization baseline and batch
//! evaluation reports.

pub mod tmqi;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{HdrImage, LdrImage};
use crate::neuralnet::{enhance_image, Network};
use crate::synthpipe::{sample_seed, synthesize_input};

pub use tmqi::{tmqi, TmqiScore};

pub const CSV_HEADER: &str = "id,method,tmqi,tmqi_s,tmqi_n,entropy";

fn histogram(gray: &[u8]) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &g in gray {
        h[g as usize] += 1;
    }
    h
}

/// Shannon entropy in bits of the Rec. 709 gray-level histogram.
pub fn discrete_entropy(img: &LdrImage) -> f64 {
    let gray = img.gray_levels();
    let n = gray.len() as f64;
    histogram(&gray)
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Global histogram equalization of the gray channel. Each level maps to
/// `round(255 (CDF(c) - CDF_min) / (1 - CDF_min))`, so a constant image is
/// left alone; colors are scaled by the per-pixel gray ratio.
pub fn histogram_equalize(img: &LdrImage) -> LdrImage {
    let gray = img.gray_levels();
    let hist = histogram(&gray);
    let n = gray.len() as f64;
    let mut lut = [0u8; 256];
    let cdf_min = hist.iter().copied().find(|&c| c > 0).unwrap_or(0) as f64 / n;
    let mut acc = 0u64;
    for (level, &count) in hist.iter().enumerate() {
        acc += count;
        lut[level] = if cdf_min >= 1.0 {
            level as u8
        } else {
            (255.0 * (acc as f64 / n - cdf_min) / (1.0 - cdf_min)).round().clamp(0.0, 255.0) as u8
        };
    }
    let mut data = Vec::with_capacity(img.data.len());
    for (px, &g) in img.data.chunks_exact(3).zip(&gray) {
        if g == 0 {
            data.extend_from_slice(&[lut[0]; 3]);
            continue;
        }
        let ratio = lut[g as usize] as f64 / g as f64;
        data.extend(px.iter().map(|&c| (c as f64 * ratio).round().clamp(0.0, 255.0) as u8));
    }
    LdrImage {
        width: img.width,
        height: img.height,
        data,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Input,
    He,
    Proposed,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Input, Method::He, Method::Proposed];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Input => "input",
            Method::He => "he",
            Method::Proposed => "proposed",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "input" => Ok(Method::Input),
            "he" => Ok(Method::He),
            "proposed" => Ok(Method::Proposed),
            other => Err(Error::Config(format!("unknown method {other:?} (expected input, he or proposed)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub method: Method,
    pub tmqi: f64,
    pub tmqi_s: f64,
    pub tmqi_n: f64,
    pub entropy: f64,
}

/// Per-method means. NIQE and BRISQUE are not computed here; the columns
/// exist so externally computed scores can be merged in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub count: usize,
    pub tmqi: f64,
    pub tmqi_s: f64,
    pub tmqi_n: f64,
    pub entropy: f64,
    pub niqe: Option<f64>,
    pub brisque: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.id,
                r.method.as_str(),
                r.tmqi,
                r.tmqi_s,
                r.tmqi_n,
                r.entropy
            );
        }
        out
    }

    pub fn summary(&self) -> BTreeMap<Method, MethodSummary> {
        let mut out = BTreeMap::new();
        for m in Method::ALL {
            let rows: Vec<&MetricRow> = self.rows.iter().filter(|r| r.method == m).collect();
            if rows.is_empty() {
                continue;
            }
            let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64;
            out.insert(
                m,
                MethodSummary {
                    count: rows.len(),
                    tmqi: mean(|r| r.tmqi),
                    tmqi_s: mean(|r| r.tmqi_s),
                    tmqi_n: mean(|r| r.tmqi_n),
                    entropy: mean(|r| r.entropy),
                    niqe: None,
                    brisque: None,
                },
            );
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        let methods: BTreeMap<&str, MethodSummary> =
            self.summary().into_iter().map(|(m, s)| (m.as_str(), s)).collect();
        Ok(serde_json::to_string_pretty(&serde_json::json!({ "methods": methods }))?)
    }
}

fn score(id: &str, method: Method, reference: &HdrImage, out: &LdrImage) -> MetricRow {
    let t = tmqi(reference, out);
    MetricRow {
        id: id.to_string(),
        method,
        tmqi: t.q,
        tmqi_s: t.s,
        tmqi_n: t.n,
        entropy: discrete_entropy(out),
    }
}

/// For every corpus image, synthesizes a dark test input of `size` pixels
/// with seed `sample_seed(seed, index)` and scores each method against the
/// radiance patch it came from. Rows are ordered by image, then method.
pub fn evaluate(
    network: Option<&Network>,
    corpus: &[(String, HdrImage)],
    methods: &[Method],
    seed: u64,
    size: usize,
) -> Result<MetricReport> {
    if methods.contains(&Method::Proposed) && network.is_none() {
        return Err(Error::Config("method \"proposed\" needs a checkpoint".into()));
    }
    let job = |i: usize| -> Result<Vec<MetricRow>> {
        let (id, img) = &corpus[i];
        let synth = synthesize_input(img, id, sample_seed(seed, i as u64), size)?;
        let mut rows = Vec::with_capacity(methods.len());
        for &m in methods {
            let out = match m {
                Method::Input => synth.input.clone(),
                Method::He => histogram_equalize(&synth.input),
                Method::Proposed => enhance_image(network.expect("checked above"), &synth.input)?,
            };
            rows.push(score(id, m, &synth.patch, &out));
        }
        Ok(rows)
    };
    #[cfg(feature = "parallel")]
    let per_image: Result<Vec<Vec<MetricRow>>> = {
        use rayon::prelude::*;
        (0..corpus.len()).into_par_iter().map(job).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_image: Result<Vec<Vec<MetricRow>>> = (0..corpus.len()).map(job).collect();
    Ok(MetricReport {
        rows: per_image?.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn gray_image(levels: &[u8]) -> LdrImage {
        LdrImage::new(levels.len(), 1, levels.iter().flat_map(|&g| [g; 3]).collect()).unwrap()
    }

    fn random_image(w: usize, h: usize, seed: u64) -> LdrImage {
        let mut rng = SeededRng::from_seed(seed);
        LdrImage::new(w, h, (0..w * h * 3).map(|_| rng.below(256) as u8).collect()).unwrap()
    }

    #[test]
    fn entropy_reference_values() {
        assert_eq!(discrete_entropy(&LdrImage::filled(7, 5, [40, 90, 10])), 0.0);
        assert_eq!(discrete_entropy(&gray_image(&[10, 200, 10, 200])), 1.0);
        let all: Vec<u8> = (0..=255).chain(0..=255).collect();
        assert_eq!(discrete_entropy(&gray_image(&all)), 8.0);
    }

    #[test]
    fn entropy_ignores_pixel_order() {
        let img = random_image(16, 16, 1);
        let mut px: Vec<[u8; 3]> = img.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
        SeededRng::from_seed(2).shuffle(&mut px);
        let shuffled = LdrImage::new(16, 16, px.concat()).unwrap();
        assert_eq!(discrete_entropy(&img), discrete_entropy(&shuffled));
    }

    #[test]
    fn equalizing_a_constant_image_is_a_no_op() {
        let img = LdrImage::filled(9, 4, [120, 60, 30]);
        assert_eq!(histogram_equalize(&img), img);
    }

    #[test]
    fn equalized_histogram_is_near_uniform() {
        for seed in 0..20 {
            // Skewed toward dark levels, like the synthesized inputs.
            let mut rng = SeededRng::from_seed(seed);
            let levels: Vec<u8> = (0..1024).map(|_| (rng.uniform().powi(3) * 255.0) as u8).collect();
            let out = histogram_equalize(&gray_image(&levels)).gray_levels();
            let n = out.len() as f64;
            let h = histogram(&out);
            let in_h = histogram(&levels);
            let max_p = *in_h.iter().max().unwrap() as f64 / n;
            let mut acc = 0.0;
            for (level, &c) in h.iter().enumerate() {
                acc += c as f64 / n;
                // Compared where the output CDF steps; rounding a level to an
                // integer moves it by at most half a level.
                if c > 0 {
                    assert!((acc - level as f64 / 255.0).abs() <= max_p + 0.5 / 255.0, "seed {seed} level {level}");
                }
            }
        }
    }

    #[test]
    fn equalization_preserves_gray_order() {
        // Gray pixels: with color, channel clamping can perturb the gray of
        // saturated pixels by more than the mapping itself.
        let mut rng = SeededRng::from_seed(3);
        let img = gray_image(&(0..256).map(|_| rng.below(256) as u8).collect::<Vec<_>>());
        let before = img.gray_levels();
        let after = histogram_equalize(&img).gray_levels();
        for i in 0..before.len() {
            for j in 0..before.len() {
                if before[i] < before[j] {
                    assert!(after[i] <= after[j], "{i} {j}");
                }
            }
        }
    }

    #[test]
    fn equalization_is_idempotent_up_to_rounding() {
        for seed in 0..200 {
            let mut rng = SeededRng::from_seed(seed);
            let (w, h) = (1 + rng.below(12) as usize, 1 + rng.below(12) as usize);
            let levels: Vec<u8> = (0..w * h).map(|_| rng.below(256) as u8).collect();
            let img = LdrImage::new(w, h, levels.iter().flat_map(|&g| [g; 3]).collect()).unwrap();
            let once = histogram_equalize(&img);
            let twice = histogram_equalize(&once);
            let dev = once
                .gray_levels()
                .iter()
                .zip(twice.gray_levels())
                .map(|(&a, b)| (a as i32 - b as i32).abs())
                .max()
                .unwrap();
            assert!(dev <= 1, "seed {seed}: {dev}");
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!(matches!("clahe".parse::<Method>(), Err(Error::Config(_))));
    }
}
