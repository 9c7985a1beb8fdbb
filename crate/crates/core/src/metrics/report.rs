use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{mae, nmse, psnr, ssim, weighted_score, SsimConfig};
use crate::error::{Error, Result};
use crate::volume::{Contrast, ContrastMap, Volume};

/// Order in which the weighted score and the averaging are applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Average each metric first, then score the averages.
    #[default]
    MeanThenScore,
    /// Score every image, then average the scores.
    ScoreThenMean,
}

/// Serializes infinite values as the strings `"inf"` / `"-inf"`.
pub(crate) mod inf_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&super::fmt_value(*v))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("bad metric value {other:?}"))),
            },
        }
    }
}

/// `Option<f64>` counterpart of `inf_f64`.
pub(crate) mod inf_f64_opt {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    struct Wrap(#[serde(with = "super::inf_f64")] f64);

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => super::inf_f64::serialize(x, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

fn fmt_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub subject: String,
    pub contrast: Contrast,
    pub ssim_unmasked: f64,
    #[serde(with = "inf_f64")]
    pub psnr_db_unmasked: f64,
    pub mae_unmasked: f64,
    pub nmse_unmasked: f64,
    pub ssim_masked: f64,
    #[serde(with = "inf_f64")]
    pub psnr_db_masked: f64,
    pub mae_masked: f64,
    pub nmse_masked: f64,
    /// `None` when PSNR is infinite.
    pub weighted_unmasked: Option<f64>,
    pub weighted_masked: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n_images: usize,
    pub ssim_unmasked: f64,
    #[serde(with = "inf_f64")]
    pub psnr_db_unmasked: f64,
    pub mae_unmasked: f64,
    pub nmse_unmasked: f64,
    pub ssim_masked: f64,
    #[serde(with = "inf_f64")]
    pub psnr_db_masked: f64,
    pub mae_masked: f64,
    pub nmse_masked: f64,
    pub weighted_unmasked: Option<f64>,
    pub weighted_masked: Option<f64>,
    /// An infinite PSNR prevented at least one weighted score.
    pub inf_contaminated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub aggregation: Aggregation,
    pub images: Vec<ImageMetrics>,
    pub summary: MetricSummary,
}

fn score(s: f64, p: f64, m: f64, n: f64) -> Option<f64> {
    weighted_score(s, p, m, n).ok()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

impl MetricReport {
    pub fn from_images(images: Vec<ImageMetrics>, aggregation: Aggregation) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let avg = |f: fn(&ImageMetrics) -> f64| mean(images.iter().map(f));
        let ssim_u = avg(|m| m.ssim_unmasked);
        let psnr_u = avg(|m| m.psnr_db_unmasked);
        let mae_u = avg(|m| m.mae_unmasked);
        let nmse_u = avg(|m| m.nmse_unmasked);
        let ssim_m = avg(|m| m.ssim_masked);
        let psnr_m = avg(|m| m.psnr_db_masked);
        let mae_m = avg(|m| m.mae_masked);
        let nmse_m = avg(|m| m.nmse_masked);
        let (weighted_unmasked, weighted_masked) = match aggregation {
            Aggregation::MeanThenScore => (
                score(ssim_u, psnr_u, mae_u, nmse_u),
                score(ssim_m, psnr_m, mae_m, nmse_m),
            ),
            Aggregation::ScoreThenMean => {
                let all = |f: fn(&ImageMetrics) -> Option<f64>| {
                    images
                        .iter()
                        .map(f)
                        .collect::<Option<Vec<f64>>>()
                        .map(|v| mean(v.into_iter()))
                };
                (all(|m| m.weighted_unmasked), all(|m| m.weighted_masked))
            }
        };
        let summary = MetricSummary {
            n_images: images.len(),
            ssim_unmasked: ssim_u,
            psnr_db_unmasked: psnr_u,
            mae_unmasked: mae_u,
            nmse_unmasked: nmse_u,
            ssim_masked: ssim_m,
            psnr_db_masked: psnr_m,
            mae_masked: mae_m,
            nmse_masked: nmse_m,
            inf_contaminated: weighted_unmasked.is_none() || weighted_masked.is_none(),
            weighted_unmasked,
            weighted_masked,
        };
        Ok(Self {
            aggregation,
            images,
            summary,
        })
    }

    /// Pools the images of several reports under one aggregation.
    pub fn merge(reports: &[MetricReport], aggregation: Aggregation) -> Result<Self> {
        let images = reports.iter().flat_map(|r| r.images.iter().cloned()).collect();
        Self::from_images(images, aggregation)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("metric report: {e}")))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "subject,contrast,ssim_unmasked,psnr_db_unmasked,mae_unmasked,nmse_unmasked,\
             ssim_masked,psnr_db_masked,mae_masked,nmse_masked,weighted_unmasked,weighted_masked\n",
        );
        let opt = |v: Option<f64>| v.map_or("inf".to_string(), fmt_value);
        for m in &self.images {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                m.subject,
                m.contrast,
                fmt_value(m.ssim_unmasked),
                fmt_value(m.psnr_db_unmasked),
                fmt_value(m.mae_unmasked),
                fmt_value(m.nmse_unmasked),
                fmt_value(m.ssim_masked),
                fmt_value(m.psnr_db_masked),
                fmt_value(m.mae_masked),
                fmt_value(m.nmse_masked),
                opt(m.weighted_unmasked),
                opt(m.weighted_masked),
            );
        }
        let s = &self.summary;
        let _ = writeln!(
            out,
            "mean,all,{},{},{},{},{},{},{},{},{},{}",
            fmt_value(s.ssim_unmasked),
            fmt_value(s.psnr_db_unmasked),
            fmt_value(s.mae_unmasked),
            fmt_value(s.nmse_unmasked),
            fmt_value(s.ssim_masked),
            fmt_value(s.psnr_db_masked),
            fmt_value(s.mae_masked),
            fmt_value(s.nmse_masked),
            opt(s.weighted_unmasked),
            opt(s.weighted_masked),
        );
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let write = |ext: &str, text: String| {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, text).map_err(|source| Error::Unwritable { path, source })
        };
        write("json", self.to_json())?;
        write("csv", self.to_csv())
    }
}

/// Scores every contrast of `pred` against `reference`, masked by `mask`.
pub fn evaluate_subject(
    subject: &str,
    pred: &ContrastMap,
    reference: &ContrastMap,
    mask: &Volume,
    ssim_cfg: &SsimConfig,
    aggregation: Aggregation,
) -> Result<MetricReport> {
    if !pred.keys().eq(reference.keys()) {
        return Err(Error::ContrastMismatch(format!(
            "prediction has {:?}, reference has {:?}",
            pred.keys().collect::<Vec<_>>(),
            reference.keys().collect::<Vec<_>>()
        )));
    }
    let images = pred
        .iter()
        .map(|(&contrast, p)| image_metrics(subject, contrast, p, &reference[&contrast], mask, ssim_cfg))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_images(images, aggregation)
}

/// Masked and unmasked metrics of one predicted contrast.
pub fn image_metrics(
    subject: &str,
    contrast: Contrast,
    pred: &Volume,
    reference: &Volume,
    mask: &Volume,
    ssim_cfg: &SsimConfig,
) -> Result<ImageMetrics> {
    let (p, r) = (pred, reference);
    let (su, pu, mu, nu) = (
        ssim(p, r, None, ssim_cfg)?,
        psnr(p, r, None)?,
        mae(p, r, None)?,
        nmse(p, r, None)?,
    );
    let m = Some(mask);
    let (sm, pm, mm, nm) = (ssim(p, r, m, ssim_cfg)?, psnr(p, r, m)?, mae(p, r, m)?, nmse(p, r, m)?);
    Ok(ImageMetrics {
        subject: subject.to_string(),
        contrast,
        ssim_unmasked: su,
        psnr_db_unmasked: pu,
        mae_unmasked: mu,
        nmse_unmasked: nu,
        ssim_masked: sm,
        psnr_db_masked: pm,
        mae_masked: mm,
        nmse_masked: nm,
        weighted_unmasked: score(su, pu, mu, nu),
        weighted_masked: score(sm, pm, mm, nm),
    })
}
