//! Four-way model comparison and machine-readable reports.
//!
//! Within one run every variant trains and evaluates on the same
//! per-seed client datasets and splits (the rear-view-ablated variant
//! sees the same sequences with the rear block zeroed, for both training
//! and testing); each row records the split fingerprint so that fairness
//! is checkable. Row order, float formatting and field names are fixed,
//! making exports byte-reproducible for a given configuration and seed.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{
    derive_seed, run_fedavg_baseline, run_local_baseline, run_training, FedSetup,
};
use crate::memory::MemoryConfig;
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{IntentionLabel, ModelConfig};
use crate::synth::{
    ablate_rear_view, generate_client_dataset_with, split_train_test, ClientDataset, ClientStyle,
    SynthConfig,
};

/// The four model variants under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    PflLstr,
    FedAvg,
    Local,
    PflLstr2cams,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::PflLstr,
        Variant::FedAvg,
        Variant::Local,
        Variant::PflLstr2cams,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PflLstr => "pfl-lstr",
            Variant::FedAvg => "fedavg",
            Variant::Local => "local",
            Variant::PflLstr2cams => "pfl-lstr-2cams",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|v| v.name() == s)
    }

    fn order(self) -> usize {
        Self::ALL.iter().position(|&v| v == self).unwrap()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a comparison run needs: client styles, data shape, and
/// the model/memory/protocol configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub styles: Vec<ClientStyle>,
    pub sequences_per_client: usize,
    pub train_ratio: f64,
    pub synth: SynthConfig,
    pub setup: FedSetup,
}

/// The standard three-client heterogeneous benchmark: two clients share
/// the gesture-to-label mapping, the third has it swapped (and the
/// highest false-positive rate), amplitudes differ client to client.
/// Rates are desk-scale presets; the reference schedule stalls here.
pub fn standard_benchmark() -> BenchmarkSpec {
    let memory = MemoryConfig::default();
    let styles = vec![
        ClientStyle {
            id: 0,
            style_seed: 100,
            gesture_amplitude: 1.0,
            false_positive_rate: 0.1,
            gesture_perm: [0, 1],
            noise_sigma: 0.25,
        },
        ClientStyle {
            id: 1,
            style_seed: 101,
            gesture_amplitude: 0.8,
            false_positive_rate: 0.3,
            gesture_perm: [0, 1],
            noise_sigma: 0.25,
        },
        ClientStyle {
            id: 2,
            style_seed: 102,
            gesture_amplitude: 1.2,
            false_positive_rate: 0.5,
            gesture_perm: [1, 0],
            noise_sigma: 0.25,
        },
    ];
    let synth = SynthConfig {
        feature_dim: 8,
        seq_len: memory.work_slots() + memory.long_slots(),
        fps: memory.fps,
    };
    let model = ModelConfig {
        feature_dim: synth.feature_dim,
        embed_dim: 16,
        heads: 4,
        latent_tokens: 4,
        encoder_layers: 1,
        decoder_layers: 1,
        ff_dim: 32,
        work_slots: memory.work_slots(),
        long_slots: memory.long_slots(),
    };
    let federation = crate::federation::FederationConfig {
        rounds: 8,
        decoder_epochs: 5,
        encoder_epochs: 1,
        encoder_lr: 1e-2,
        fedavg_lr: 1e-2,
        decoder_lr: 3e-2,
        select_fraction: 0.5,
        local_epochs: 30,
        batch_size: 8,
        seed: 0,
    };
    BenchmarkSpec {
        styles,
        sequences_per_client: 84,
        train_ratio: 0.75,
        synth,
        setup: FedSetup {
            model,
            memory,
            federation,
        },
    }
}

/// The benchmark's high-false-positive client (also the one with the
/// swapped gesture mapping).
pub const HIGH_FP_CLIENT: usize = 2;

/// Generates and splits the per-client datasets for one comparison seed.
pub fn benchmark_datasets(spec: &BenchmarkSpec, seed: u64) -> Result<Vec<ClientDataset>> {
    spec.styles
        .iter()
        .map(|style| {
            let ds = generate_client_dataset_with(
                style,
                spec.sequences_per_client,
                derive_seed(seed, style.id as u64),
                &spec.synth,
            )?;
            split_train_test(
                &ds,
                spec.train_ratio,
                derive_seed(seed, 0xABCD + style.id as u64),
            )
        })
        .collect()
}

/// One evaluated (variant, client, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub variant: Variant,
    pub client: usize,
    pub seed: u64,
    pub lk_precision: Option<f64>,
    pub llc_precision: Option<f64>,
    pub rlc_precision: Option<f64>,
    pub fp_rate: Option<f64>,
    pub macro_precision: Option<f64>,
    pub split_fingerprint: u64,
}

impl CompareRow {
    fn from_report(
        variant: Variant,
        client: usize,
        seed: u64,
        report: &MetricsReport,
        fingerprint: u64,
    ) -> Self {
        CompareRow {
            variant,
            client,
            seed,
            lk_precision: report.precision(IntentionLabel::LaneKeep),
            llc_precision: report.precision(IntentionLabel::LeftLaneChange),
            rlc_precision: report.precision(IntentionLabel::RightLaneChange),
            fp_rate: report.false_positive_rate(),
            macro_precision: report.macro_precision(),
            split_fingerprint: fingerprint,
        }
    }
}

/// Which metric column to aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    LaneKeepPrecision,
    LeftLcPrecision,
    RightLcPrecision,
    FpRate,
    MacroPrecision,
}

impl Metric {
    fn get(self, row: &CompareRow) -> Option<f64> {
        match self {
            Metric::LaneKeepPrecision => row.lk_precision,
            Metric::LeftLcPrecision => row.llc_precision,
            Metric::RightLcPrecision => row.rlc_precision,
            Metric::FpRate => row.fp_rate,
            Metric::MacroPrecision => row.macro_precision,
        }
    }
}

/// Rows for every (variant, client, seed), ordered canonically, plus
/// seed-aggregated views.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<CompareRow>,
}

impl ComparisonTable {
    fn values(&self, variant: Variant, client: usize, metric: Metric) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant && r.client == client)
            .filter_map(|r| metric.get(r))
            .collect()
    }

    /// Mean over seeds (cells with undefined metric are skipped).
    pub fn mean(&self, variant: Variant, client: usize, metric: Metric) -> Option<f64> {
        let v = self.values(variant, client, metric);
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }

    /// Sample standard deviation over seeds; zero for a single seed.
    pub fn stdev(&self, variant: Variant, client: usize, metric: Metric) -> Option<f64> {
        let v = self.values(variant, client, metric);
        match v.len() {
            0 => None,
            1 => Some(0.0),
            n => {
                let mean = v.iter().sum::<f64>() / n as f64;
                let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
                Some(var.sqrt())
            }
        }
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut out = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.variant) {
                out.push(r.variant);
            }
        }
        out
    }

    pub fn clients(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.rows.iter().map(|r| r.client).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// CSV with the fixed column set, one row per (variant, client, seed).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.variant,
                r.client,
                r.seed,
                fmt_opt(r.lk_precision),
                fmt_opt(r.llc_precision),
                fmt_opt(r.rlc_precision),
                fmt_opt(r.fp_rate),
                fmt_opt(r.macro_precision),
            ));
        }
        out
    }

    /// JSON lines mirroring the CSV field names.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let record = JsonRow {
                variant: r.variant.name().to_string(),
                client: r.client,
                seed: r.seed,
                lk_precision: r.lk_precision,
                llc_precision: r.llc_precision,
                rlc_precision: r.rlc_precision,
                fp_rate: r.fp_rate,
                macro_precision: r.macro_precision,
            };
            out.push_str(&serde_json::to_string(&record).expect("row serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses rows exported by [`to_csv`]; fingerprints are not part of
    /// the export and come back as zero.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != CSV_HEADER {
                    return Err(Error::Parse {
                        line: 1,
                        msg: format!("unexpected header {line:?}"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 8 {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected 8 fields, got {}", parts.len()),
                });
            }
            let bad = |msg: String| Error::Parse { line: i + 1, msg };
            rows.push(CompareRow {
                variant: Variant::from_name(parts[0])
                    .ok_or_else(|| bad(format!("unknown variant {:?}", parts[0])))?,
                client: parts[1].parse().map_err(|e| bad(format!("client: {e}")))?,
                seed: parts[2].parse().map_err(|e| bad(format!("seed: {e}")))?,
                lk_precision: parse_opt(parts[3]).map_err(&bad)?,
                llc_precision: parse_opt(parts[4]).map_err(&bad)?,
                rlc_precision: parse_opt(parts[5]).map_err(&bad)?,
                fp_rate: parse_opt(parts[6]).map_err(&bad)?,
                macro_precision: parse_opt(parts[7]).map_err(&bad)?,
                split_fingerprint: 0,
            });
        }
        Ok(ComparisonTable { rows })
    }
}

const CSV_HEADER: &str =
    "variant,client,seed,lk_precision,llc_precision,rlc_precision,fp_rate,macro_precision";

#[derive(Serialize, Deserialize)]
struct JsonRow {
    variant: String,
    client: usize,
    seed: u64,
    lk_precision: Option<f64>,
    llc_precision: Option<f64>,
    rlc_precision: Option<f64>,
    fp_rate: Option<f64>,
    macro_precision: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) => format!("{x}"),
    }
}

fn parse_opt(s: &str) -> std::result::Result<Option<f64>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse::<f64>().map(Some).map_err(|e| e.to_string())
    }
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>6}  {:>13}  {:>13}  {:>13}  {:>13}  {:>13}  {:>18}",
            "variant",
            "client",
            "lk_prec",
            "llc_prec",
            "rlc_prec",
            "fp_rate",
            "macro",
            "split_fingerprint"
        )?;
        for variant in self.variants() {
            for client in self.clients() {
                let cell = |m: Metric| match (
                    self.mean(variant, client, m),
                    self.stdev(variant, client, m),
                ) {
                    (Some(mean), Some(sd)) => format!("{mean:.3}±{sd:.3}"),
                    _ => "-".to_string(),
                };
                let fp = self
                    .rows
                    .iter()
                    .find(|r| r.variant == variant && r.client == client)
                    .map(|r| format!("{:016x}", r.split_fingerprint))
                    .unwrap_or_default();
                writeln!(
                    f,
                    "{:<16} {:>6}  {:>13}  {:>13}  {:>13}  {:>13}  {:>13}  {:>18}",
                    variant.name(),
                    client,
                    cell(Metric::LaneKeepPrecision),
                    cell(Metric::LeftLcPrecision),
                    cell(Metric::RightLcPrecision),
                    cell(Metric::FpRate),
                    cell(Metric::MacroPrecision),
                    fp,
                )?;
            }
        }
        Ok(())
    }
}

/// Trains and evaluates the requested variants on identical per-seed
/// datasets; returns one row per (variant, client, seed).
pub fn compare(
    spec: &BenchmarkSpec,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<ComparisonTable> {
    if variants.is_empty() {
        return Err(Error::Empty("variant list"));
    }
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let datasets = benchmark_datasets(spec, seed)?;
        let fingerprints: Vec<u64> = datasets.iter().map(|d| d.split_fingerprint()).collect();
        let mut setup = spec.setup.clone();
        setup.federation.seed = seed;

        for &variant in variants {
            let reports = run_variant(variant, &datasets, &setup)?;
            for (client, report) in reports.iter().enumerate() {
                rows.push(CompareRow::from_report(
                    variant,
                    client,
                    seed,
                    report,
                    fingerprints[client],
                ));
            }
        }
    }
    rows.sort_by_key(|r| (r.variant.order(), r.client, r.seed));
    Ok(ComparisonTable { rows })
}

fn run_variant(
    variant: Variant,
    datasets: &[ClientDataset],
    setup: &FedSetup,
) -> Result<Vec<MetricsReport>> {
    match variant {
        Variant::PflLstr => {
            let result = run_training(datasets.to_vec(), setup)?;
            datasets
                .iter()
                .enumerate()
                .map(|(i, ds)| {
                    let omega = result.personalized(i)?;
                    evaluate(&omega.params, &setup.model, &setup.memory, ds)
                })
                .collect()
        }
        Variant::FedAvg => {
            let (global, _) = run_fedavg_baseline(datasets.to_vec(), setup)?;
            datasets
                .iter()
                .map(|ds| evaluate(&global, &setup.model, &setup.memory, ds))
                .collect()
        }
        Variant::Local => {
            let (models, _) = run_local_baseline(datasets.to_vec(), setup)?;
            datasets
                .iter()
                .zip(&models)
                .map(|(ds, params)| evaluate(params, &setup.model, &setup.memory, ds))
                .collect()
        }
        Variant::PflLstr2cams => {
            let ablated: Vec<ClientDataset> = datasets.iter().map(ablate_rear_view).collect();
            let result = run_training(ablated.clone(), setup)?;
            ablated
                .iter()
                .enumerate()
                .map(|(i, ds)| {
                    let omega = result.personalized(i)?;
                    evaluate(&omega.params, &setup.model, &setup.memory, ds)
                })
                .collect()
        }
    }
}

/// Export file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    JsonLines,
}

impl ReportFormat {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "csv" => Some(ReportFormat::Csv),
            "json-lines" | "jsonl" => Some(ReportFormat::JsonLines),
            _ => None,
        }
    }
}

pub fn export_report(table: &ComparisonTable, path: &Path, format: ReportFormat) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let text = match format {
        ReportFormat::Csv => table.to_csv(),
        ReportFormat::JsonLines => table.to_jsonl(),
    };
    file.write_all(text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rows() -> ComparisonTable {
        ComparisonTable {
            rows: vec![
                CompareRow {
                    variant: Variant::PflLstr,
                    client: 0,
                    seed: 1,
                    lk_precision: Some(0.9),
                    llc_precision: Some(0.8),
                    rlc_precision: None,
                    fp_rate: Some(0.25),
                    macro_precision: Some(0.85),
                    split_fingerprint: 7,
                },
                CompareRow {
                    variant: Variant::PflLstr,
                    client: 0,
                    seed: 2,
                    lk_precision: Some(0.7),
                    llc_precision: Some(0.6),
                    rlc_precision: Some(1.0),
                    fp_rate: Some(0.75),
                    macro_precision: Some(0.75),
                    split_fingerprint: 7,
                },
            ],
        }
    }

    #[test]
    fn csv_round_trip_preserves_fields() {
        let table = sample_rows();
        let csv = table.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        let back = ComparisonTable::from_csv(&csv).unwrap();
        assert_eq!(back.rows.len(), 2);
        for (a, b) in table.rows.iter().zip(&back.rows) {
            assert_eq!(a.variant, b.variant);
            assert_eq!(a.client, b.client);
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.lk_precision, b.lk_precision);
            assert_eq!(a.rlc_precision, b.rlc_precision);
            assert_eq!(a.fp_rate, b.fp_rate);
        }
    }

    #[test]
    fn empty_table_exports_header_only() {
        let table = ComparisonTable::default();
        assert_eq!(table.to_csv(), format!("{CSV_HEADER}\n"));
        assert_eq!(table.to_jsonl(), "");
    }

    #[test]
    fn golden_fixture_bytes() {
        let table = sample_rows();
        let expect = "variant,client,seed,lk_precision,llc_precision,rlc_precision,fp_rate,macro_precision\n\
                      pfl-lstr,0,1,0.9,0.8,,0.25,0.85\n\
                      pfl-lstr,0,2,0.7,0.6,1,0.75,0.75\n";
        assert_eq!(table.to_csv(), expect);

        let jsonl_first = table.to_jsonl().lines().next().unwrap().to_string();
        assert_eq!(
            jsonl_first,
            "{\"variant\":\"pfl-lstr\",\"client\":0,\"seed\":1,\"lk_precision\":0.9,\"llc_precision\":0.8,\"rlc_precision\":null,\"fp_rate\":0.25,\"macro_precision\":0.85}"
        );
    }

    #[test]
    fn mean_and_stdev_aggregate_over_seeds() {
        let table = sample_rows();
        let mean = table
            .mean(Variant::PflLstr, 0, Metric::LaneKeepPrecision)
            .unwrap();
        assert!((mean - 0.8).abs() <= 1e-12);
        let sd = table
            .stdev(Variant::PflLstr, 0, Metric::LaneKeepPrecision)
            .unwrap();
        assert!(sd > 0.0);
        // mean within [min, max] of per-seed values
        assert!((0.7..=0.9).contains(&mean));
        // single defined value: mean equals it, stdev zero
        assert_eq!(
            table.mean(Variant::PflLstr, 0, Metric::RightLcPrecision),
            Some(1.0)
        );
        assert_eq!(
            table.stdev(Variant::PflLstr, 0, Metric::RightLcPrecision),
            Some(0.0)
        );
    }

    fn mini_spec() -> BenchmarkSpec {
        let memory = MemoryConfig {
            fps: 1,
            work_seconds: 2.0,
            long_seconds: 4.0,
        };
        BenchmarkSpec {
            styles: vec![
                ClientStyle {
                    id: 0,
                    style_seed: 0,
                    gesture_amplitude: 1.0,
                    false_positive_rate: 0.3,
                    gesture_perm: [0, 1],
                    noise_sigma: 0.1,
                },
                ClientStyle {
                    id: 1,
                    style_seed: 1,
                    gesture_amplitude: 1.0,
                    false_positive_rate: 0.5,
                    gesture_perm: [1, 0],
                    noise_sigma: 0.1,
                },
            ],
            sequences_per_client: 12,
            train_ratio: 0.75,
            synth: SynthConfig {
                feature_dim: 2,
                seq_len: 6,
                fps: 1,
            },
            setup: FedSetup {
                model: ModelConfig {
                    feature_dim: 2,
                    embed_dim: 8,
                    heads: 2,
                    latent_tokens: 2,
                    encoder_layers: 1,
                    decoder_layers: 1,
                    ff_dim: 8,
                    work_slots: 2,
                    long_slots: 4,
                },
                memory,
                federation: crate::federation::FederationConfig {
                    rounds: 1,
                    decoder_epochs: 1,
                    encoder_epochs: 1,
                    encoder_lr: 1e-3,
                    fedavg_lr: 1e-3,
                    decoder_lr: 1e-2,
                    select_fraction: 1.0,
                    local_epochs: 2,
                    batch_size: 4,
                    seed: 0,
                },
            },
        }
    }

    #[test]
    fn single_variant_single_seed_wraps_evaluate() {
        let spec = mini_spec();
        let seed = 6;
        let table = compare(&spec, &[Variant::Local], &[seed]).unwrap();

        // independent route: train the baseline directly and evaluate
        let datasets = benchmark_datasets(&spec, seed).unwrap();
        let mut setup = spec.setup.clone();
        setup.federation.seed = seed;
        let (models, _) = run_local_baseline(datasets.clone(), &setup).unwrap();
        for (client, (ds, params)) in datasets.iter().zip(&models).enumerate() {
            let report = evaluate(params, &setup.model, &setup.memory, ds).unwrap();
            let row = table
                .rows
                .iter()
                .find(|r| r.client == client)
                .expect("row exists");
            assert_eq!(row.macro_precision, report.macro_precision());
            assert_eq!(row.lk_precision, report.precision(IntentionLabel::LaneKeep));
            assert_eq!(row.fp_rate, report.false_positive_rate());
        }
    }

    #[test]
    fn all_variants_share_the_split_fingerprint() {
        let spec = mini_spec();
        let table = compare(
            &spec,
            &[Variant::PflLstr, Variant::FedAvg, Variant::PflLstr2cams],
            &[2],
        )
        .unwrap();
        for client in table.clients() {
            let prints: Vec<u64> = table
                .rows
                .iter()
                .filter(|r| r.client == client)
                .map(|r| r.split_fingerprint)
                .collect();
            assert_eq!(prints.len(), 3);
            assert!(
                prints.windows(2).all(|w| w[0] == w[1]),
                "client {client}: {prints:?}"
            );
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::from_name(v.name()), Some(v));
        }
        assert_eq!(Variant::from_name("bogus"), None);
    }

    #[test]
    fn compare_requires_variants_and_seeds() {
        let spec = standard_benchmark();
        assert!(compare(&spec, &[], &[1]).is_err());
        assert!(compare(&spec, &[Variant::Local], &[]).is_err());
    }
}
