//! Description-length accounting for the three compression schemes.
//!
//! All bit counts are real-valued idealized code lengths. Integer lengths only
//! appear for fixed-length index codes ([`per_image_online_bits`]) and for
//! on-disk sizes (`ceil(bits / 8)` bytes).

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Bits per raw 8-bit RGB pixel.
pub const RAW_BITS_PER_PIXEL: f64 = 24.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    Unicorn,
    Eic,
    Iic,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Unicorn => "Unicorn",
            Scheme::Eic => "EIC",
            Scheme::Iic => "IIC",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unicorn" => Ok(Scheme::Unicorn),
            "eic" => Ok(Scheme::Eic),
            "iic" => Ok(Scheme::Iic),
            other => Err(invalid(format!("unknown scheme `{other}`"))),
        }
    }
}

/// Description length of one image set under one scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DLReport {
    pub scheme: Scheme,
    pub num_images: u64,
    pub pixels_per_image: u64,
    /// First term: index code length (Unicorn) or summed per-image code lengths.
    pub index_or_code_bits: f64,
    /// Second term: decoder / model complexity.
    pub model_bits: f64,
    pub total_bits: f64,
    pub bpp: f64,
    /// Raw 24-bit RGB size over total bits.
    pub compression_ratio: f64,
}

impl DLReport {
    fn new(
        scheme: Scheme,
        num_images: u64,
        pixels_per_image: u64,
        index_or_code_bits: f64,
        model_bits: f64,
    ) -> Result<Self> {
        if pixels_per_image == 0 {
            return Err(invalid("pixels_per_image must be positive"));
        }
        let total_bits = index_or_code_bits + model_bits;
        if !(total_bits > 0.0) || !total_bits.is_finite() {
            return Err(invalid(format!(
                "total description length must be positive and finite, got {total_bits}"
            )));
        }
        let pixels = num_images as f64 * pixels_per_image as f64;
        Ok(DLReport {
            scheme,
            num_images,
            pixels_per_image,
            index_or_code_bits,
            model_bits,
            total_bits,
            bpp: total_bits / pixels,
            compression_ratio: pixels * RAW_BITS_PER_PIXEL / total_bits,
        })
    }

    /// On-disk size: `ceil(total_bits / 8)`.
    pub fn file_size_bytes(&self) -> u64 {
        (self.total_bits / 8.0).ceil() as u64
    }
}

fn check_bits(name: &str, bits: f64) -> Result<()> {
    if bits.is_finite() && bits >= 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be finite and non-negative, got {bits}")))
    }
}

/// `M log2 M + K(q)`: the index term of a uniform bijection plus the shared model.
pub fn dl_unicorn(num_images: u64, model_bits: f64, pixels_per_image: u64) -> Result<DLReport> {
    if num_images == 0 {
        return Err(invalid("number of images must be at least 1"));
    }
    check_bits("model_bits", model_bits)?;
    let m = num_images as f64;
    DLReport::new(Scheme::Unicorn, num_images, pixels_per_image, m * m.log2(), model_bits)
}

/// Per-image transmission cost once the model is shared: `(log2 M, ceil(log2 M))`.
pub fn per_image_online_bits(num_images: u64) -> Result<(f64, u32)> {
    if num_images == 0 {
        return Err(invalid("number of images must be at least 1"));
    }
    let real = (num_images as f64).log2();
    // Exact integer code length; avoids trusting the float at powers of two.
    let fixed = 64 - (num_images - 1).leading_zeros();
    Ok((real, if num_images == 1 { 0 } else { fixed }))
}

/// Explicit codecs: externally measured bitstream lengths plus the shared decoder.
pub fn dl_eic(per_image_code_bits: &[f64], decoder_bits: f64, pixels_per_image: u64) -> Result<DLReport> {
    if per_image_code_bits.is_empty() {
        return Err(invalid("EIC needs at least one per-image code length"));
    }
    for &b in per_image_code_bits {
        check_bits("code bits", b)?;
    }
    check_bits("decoder_bits", decoder_bits)?;
    DLReport::new(
        Scheme::Eic,
        per_image_code_bits.len() as u64,
        pixels_per_image,
        per_image_code_bits.iter().sum(),
        decoder_bits,
    )
}

/// Implicit codecs: one overfitted model per image.
pub fn dl_iic(per_image_nll_bits: &[f64], per_model_bits: &[f64], pixels_per_image: u64) -> Result<DLReport> {
    if per_image_nll_bits.len() != per_model_bits.len() {
        return Err(invalid(format!(
            "IIC lists differ in length: {} nll entries vs {} model entries",
            per_image_nll_bits.len(),
            per_model_bits.len()
        )));
    }
    if per_image_nll_bits.is_empty() {
        return Err(invalid("IIC needs at least one image"));
    }
    for (&a, &b) in per_image_nll_bits.iter().zip(per_model_bits) {
        check_bits("nll bits", a)?;
        check_bits("model bits", b)?;
    }
    DLReport::new(
        Scheme::Iic,
        per_image_nll_bits.len() as u64,
        pixels_per_image,
        per_image_nll_bits.iter().sum(),
        per_model_bits.iter().sum(),
    )
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scheme: Scheme,
    pub label: String,
    #[serde(rename = "M")]
    pub num_images: u64,
    pub total_bits: f64,
    pub file_size_bytes: u64,
    pub compression_ratio: f64,
    pub bpp: f64,
    pub online_bits_per_image: u32,
}

/// A report together with a display label (e.g. the codec name behind an EIC row).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledReport {
    pub label: String,
    pub report: DLReport,
}

impl From<DLReport> for LabeledReport {
    fn from(report: DLReport) -> Self {
        LabeledReport { label: report.scheme.to_string(), report }
    }
}

/// Re-evaluates `report` at a different image count.
///
/// Unicorn keeps its model fixed and pays `M' log2 M'`; per-image schemes scale
/// their per-image averages linearly, and EIC keeps its shared decoder.
pub fn rescale(report: &DLReport, num_images: u64) -> Result<DLReport> {
    if num_images == 0 {
        return Err(invalid("number of images must be at least 1"));
    }
    let ppi = report.pixels_per_image;
    let per_image = |bits: f64| bits / report.num_images as f64;
    match report.scheme {
        Scheme::Unicorn => dl_unicorn(num_images, report.model_bits, ppi),
        Scheme::Eic => DLReport::new(
            Scheme::Eic,
            num_images,
            ppi,
            per_image(report.index_or_code_bits) * num_images as f64,
            report.model_bits,
        ),
        Scheme::Iic => DLReport::new(
            Scheme::Iic,
            num_images,
            ppi,
            per_image(report.index_or_code_bits) * num_images as f64,
            per_image(report.model_bits) * num_images as f64,
        ),
    }
}

/// Builds comparison rows. With an empty `m_values` each report is emitted at
/// its own image count; otherwise every report is re-evaluated at every `M`.
pub fn comparison_report(
    reports: &[LabeledReport],
    raw_bits_per_image: f64,
    m_values: &[u64],
) -> Result<Vec<ReportRow>> {
    if !(raw_bits_per_image > 0.0) {
        return Err(invalid("raw_bits_per_image must be positive"));
    }
    let mut rows = Vec::new();
    for labeled in reports {
        let evaluated: Vec<DLReport> = if m_values.is_empty() {
            vec![labeled.report.clone()]
        } else {
            m_values
                .iter()
                .map(|&m| rescale(&labeled.report, m))
                .collect::<Result<_>>()?
        };
        for r in evaluated {
            let online = match r.scheme {
                Scheme::Unicorn => per_image_online_bits(r.num_images)?.1,
                _ => 0,
            };
            let pixels = r.num_images as f64 * r.pixels_per_image as f64;
            rows.push(ReportRow {
                scheme: r.scheme,
                label: labeled.label.clone(),
                num_images: r.num_images,
                total_bits: r.total_bits,
                file_size_bytes: r.file_size_bytes(),
                compression_ratio: r.num_images as f64 * raw_bits_per_image / r.total_bits,
                bpp: r.total_bits / pixels,
                online_bits_per_image: online,
            });
        }
    }
    Ok(rows)
}

pub fn write_report_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// One line of a baseline CSV: `scheme,image_id,code_bits,model_bits`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub scheme: String,
    pub image_id: String,
    pub code_bits: f64,
    pub model_bits: f64,
}

/// Parses baseline measurements and folds them into one report per scheme label.
///
/// The `scheme` column is `EIC` or `IIC`, optionally followed by `:label`
/// (e.g. `EIC:ELIC`). For EIC the decoder is shared, so `model_bits` is the
/// largest value reported on any row; for IIC the per-image model bits are summed.
pub fn read_baselines<R: Read>(input: R, pixels_per_image: u64) -> Result<Vec<LabeledReport>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut groups: Vec<(String, Scheme, Vec<BaselineRow>)> = Vec::new();
    for row in rdr.deserialize::<BaselineRow>() {
        let row = row?;
        let (scheme_str, label) = match row.scheme.split_once(':') {
            Some((s, l)) => (s, l.trim().to_string()),
            None => (row.scheme.as_str(), row.scheme.trim().to_string()),
        };
        let scheme: Scheme = scheme_str.parse()?;
        if scheme == Scheme::Unicorn {
            return Err(invalid("baseline CSV rows must be EIC or IIC"));
        }
        match groups.iter_mut().find(|(l, s, _)| *l == label && *s == scheme) {
            Some((_, _, rows)) => rows.push(row),
            None => groups.push((label, scheme, vec![row])),
        }
    }
    groups
        .into_iter()
        .map(|(label, scheme, rows)| {
            let code: Vec<f64> = rows.iter().map(|r| r.code_bits).collect();
            let report = match scheme {
                Scheme::Eic => {
                    let decoder = rows.iter().map(|r| r.model_bits).fold(0.0, f64::max);
                    dl_eic(&code, decoder, pixels_per_image)?
                }
                _ => {
                    let models: Vec<f64> = rows.iter().map(|r| r.model_bits).collect();
                    dl_iic(&code, &models, pixels_per_image)?
                }
            };
            Ok(LabeledReport { label, report })
        })
        .collect()
}
