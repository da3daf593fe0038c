//! Embed → attack → extract over a corpus for every (codec, attack) pair.

use std::cmp::Ordering;
use std::io::Write;
use std::str::FromStr;

use anyhow::{bail, Result};
use fmdiff_core::codecs::{embed, extract, CodecConfig, Scheme, WatermarkBits};
use fmdiff_core::metrics::{ber, psnr, psnr_on_bytes};
use fmdiff_core::ImageBuffer;

use crate::attack::{image_rng, Attack};
use crate::corpus::Corpus;

/// Image the attacked result is compared with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PsnrRef {
    #[default]
    Watermarked,
    Original,
}

impl FromStr for PsnrRef {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "watermarked" => Ok(PsnrRef::Watermarked),
            "original" => Ok(PsnrRef::Original),
            other => bail!("psnr reference {other:?} is neither watermarked nor original"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub corpus: Corpus,
    pub codecs: Vec<CodecConfig>,
    pub attacks: Vec<Attack>,
    pub watermark: WatermarkBits,
    pub seed: u64,
    pub psnr_ref: PsnrRef,
    /// Compute PSNR on the 8-bit export rather than before quantization.
    pub on_bytes: bool,
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.codecs.is_empty() || self.attacks.is_empty() {
            bail!("bench needs at least one codec and one attack");
        }
        if self.corpus.is_empty() {
            bail!("empty corpus");
        }
        for c in &self.codecs {
            c.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub codec: Scheme,
    pub attack: String,
    pub param: f64,
    pub n: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ber_mean: f64,
    pub ber_std: f64,
    pub seed: u64,
}

impl ReportRow {
    pub const HEADER: [&'static str; 9] =
        ["codec", "attack", "param", "n", "psnr_mean", "psnr_std", "ber_mean", "ber_std", "seed"];

    /// Compact `PSNR/BER` cell, e.g. `45.26/0.3203`.
    pub fn cell(&self) -> String {
        format!("{:.2}/{:.4}", self.psnr_mean, self.ber_mean)
    }

    fn record(&self) -> [String; 9] {
        [
            self.codec.tag().to_string(),
            self.attack.clone(),
            self.param.to_string(),
            self.n.to_string(),
            format!("{:.6}", self.psnr_mean),
            format!("{:.6}", self.psnr_std),
            format!("{:.6}", self.ber_mean),
            format!("{:.6}", self.ber_std),
            self.seed.to_string(),
        ]
    }

    fn order(&self, other: &Self) -> Ordering {
        (self.codec.tag(), self.attack.as_str())
            .cmp(&(other.codec.tag(), other.attack.as_str()))
            .then(self.param.total_cmp(&other.param))
    }
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-image measurement: PSNR against the chosen reference and the BER of
/// the bits read back from the 8-bit export of the attacked image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub psnr: f64,
    pub ber: f64,
}

pub fn measure(
    original: &ImageBuffer,
    marked: &ImageBuffer,
    attacked: &ImageBuffer,
    wm: &WatermarkBits,
    codec: &CodecConfig,
    psnr_ref: PsnrRef,
    on_bytes: bool,
) -> Result<Measurement> {
    let reference = match psnr_ref {
        PsnrRef::Watermarked => marked,
        PsnrRef::Original => original,
    };
    let p = if on_bytes { psnr_on_bytes(reference, attacked)? } else { psnr(reference, attacked)? };
    let bits = extract(&attacked.quantized(), codec)?;
    Ok(Measurement { psnr: p, ber: ber(wm, &bits) })
}

/// Rows sorted by (codec, attack, param). Image `i` is attacked with
/// [`image_rng`]`(seed, i)` regardless of codec or attack, matching the
/// `attack` subcommand run over the same files.
pub fn run_bench(spec: &BenchSpec, mut progress: impl FnMut(&ReportRow)) -> Result<Vec<ReportRow>> {
    spec.validate()?;
    let originals = spec.corpus.load_all()?;
    let mut rows = Vec::new();
    for codec in &spec.codecs {
        let marked: Vec<ImageBuffer> =
            originals.iter().map(|img| embed(img, &spec.watermark, codec)).collect::<Result<_, _>>()?;
        for attack in &spec.attacks {
            let mut psnrs = Vec::with_capacity(marked.len());
            let mut bers = Vec::with_capacity(marked.len());
            for (i, (orig, m)) in originals.iter().zip(&marked).enumerate() {
                let attacked = attack.apply(m, &mut image_rng(spec.seed, i))?;
                let r = measure(orig, m, &attacked, &spec.watermark, codec, spec.psnr_ref, spec.on_bytes)?;
                psnrs.push(r.psnr);
                bers.push(r.ber);
            }
            let (psnr_mean, psnr_std) = mean_std(&psnrs);
            let (ber_mean, ber_std) = mean_std(&bers);
            let row = ReportRow {
                codec: codec.scheme,
                attack: attack.tag().to_string(),
                param: attack.param(),
                n: marked.len(),
                psnr_mean,
                psnr_std,
                ber_mean,
                ber_std,
                seed: spec.seed,
            };
            progress(&row);
            rows.push(row);
        }
    }
    rows.sort_by(ReportRow::order);
    Ok(rows)
}

/// CSV with the fixed header, always emitted.
pub fn write_csv(rows: &[ReportRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ReportRow::HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(rows: &[ReportRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fmdiff_core::attacks::AttackSpec;
    use fmdiff_core::metrics::PSNR_CAP;
    use fmdiff_core::SeededRng;

    fn spec(codecs: &[Scheme], attacks: &[&str]) -> BenchSpec {
        BenchSpec {
            corpus: Corpus::synth(2, 3, 128, 3).unwrap(),
            codecs: codecs.iter().map(|&s| CodecConfig::new(s)).collect(),
            attacks: attacks.iter().map(|a| Attack::Classical(a.parse::<AttackSpec>().unwrap())).collect(),
            watermark: WatermarkBits::random(&mut SeededRng::new(1)),
            seed: 7,
            psnr_ref: PsnrRef::Watermarked,
            on_bytes: false,
        }
    }

    #[test]
    fn identity_row_is_clean() {
        let rows = run_bench(&spec(&[Scheme::Dct], &["identity"]), |_| {}).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].psnr_mean, rows[0].ber_mean, rows[0].n), (PSNR_CAP, 0.0, 3));
    }

    #[test]
    fn rows_sorted_and_csv_fixed() {
        let s = spec(&[Scheme::Lsb, Scheme::Dct], &["jpeg:90", "gaussian:0.002", "gaussian:0.0005"]);
        let rows = run_bench(&s, |_| {}).unwrap();
        let keys: Vec<(String, String)> =
            rows.iter().map(|r| (r.codec.tag().to_string(), format!("{}:{}", r.attack, r.param))).collect();
        let want = [
            ("dct", "gaussian:0.0005"),
            ("dct", "gaussian:0.002"),
            ("dct", "jpeg:90"),
            ("lsb", "gaussian:0.0005"),
            ("lsb", "gaussian:0.002"),
            ("lsb", "jpeg:90"),
        ];
        assert_eq!(keys, want.map(|(a, b)| (a.to_string(), b.to_string())));
        let csv = csv_string(&rows).unwrap();
        assert!(csv.starts_with("codec,attack,param,n,psnr_mean,psnr_std,ber_mean,ber_std,seed\n"));
        assert_eq!(csv.lines().count(), 7);
        assert_eq!(csv, csv_string(&run_bench(&s, |_| {}).unwrap()).unwrap());
        assert_eq!(csv_string(&[]).unwrap(), "codec,attack,param,n,psnr_mean,psnr_std,ber_mean,ber_std,seed\n");
    }

    #[test]
    fn cell_format() {
        let row = ReportRow {
            codec: Scheme::Lsb,
            attack: "fmdiff".into(),
            param: 10.0,
            n: 1,
            psnr_mean: 45.2649,
            psnr_std: 0.0,
            ber_mean: 82.0 / 256.0,
            ber_std: 0.0,
            seed: 0,
        };
        assert_eq!(row.cell(), "45.26/0.3203");
    }

    #[test]
    fn invalid_specs() {
        assert!(run_bench(&spec(&[], &["identity"]), |_| {}).is_err());
        assert!(run_bench(&spec(&[Scheme::Lsb], &[]), |_| {}).is_err());
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
