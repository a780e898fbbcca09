//! Size and energy tables for the published architecture zoo.
//!
//! Each table compares models against a dense, weight-learned baseline of the
//! same dataset. Reduction factors divide the baseline's 32-bit storage by the
//! row's compressed storage.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::compress::{size_report, SizeReport};
use crate::cost::{energy_report, EnergyParams, EnergyReport};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, Method, Stem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Benchmark {
    Cifar100,
    Imagenet,
}

impl Benchmark {
    pub fn classes(self) -> usize {
        match self {
            Benchmark::Cifar100 => 100,
            Benchmark::Imagenet => 1000,
        }
    }

    pub fn stem(self) -> Stem {
        match self {
            Benchmark::Cifar100 => Stem::Cifar,
            Benchmark::Imagenet => Stem::Imagenet,
        }
    }

    pub fn resolution(self) -> usize {
        match self {
            Benchmark::Cifar100 => 32,
            Benchmark::Imagenet => 224,
        }
    }
}

impl FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cifar100" | "cifar-100" => Ok(Benchmark::Cifar100),
            "imagenet" => Ok(Benchmark::Imagenet),
            other => Err(Error::InvalidArgument(format!(
                "unknown table '{}' (expected cifar100 or imagenet)",
                other
            ))),
        }
    }
}

/// Which comparison a table makes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Grouping {
    /// Every method applied to ResNet50.
    SameModel,
    /// Models of comparable accuracy.
    SameAccuracy,
}

#[derive(Clone, Debug, Serialize)]
pub struct ZooRow {
    pub size: SizeReport,
    pub baseline_bytes: u64,
    /// Bytes actually compared: dense storage for weight learning,
    /// masks plus UBN learnables for supermask methods.
    pub bytes: u64,
    pub reduction: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ZooTable {
    pub dataset: Benchmark,
    pub grouping: Grouping,
    /// The first row is the baseline.
    pub rows: Vec<ZooRow>,
}

fn arch(dataset: Benchmark, depth: usize, method: Method) -> Result<ArchConfig> {
    ArchConfig::resnet(depth, dataset.classes(), dataset.stem(), method)
}

fn wide(dataset: Benchmark, method: Method) -> Result<ArchConfig> {
    ArchConfig::wide_resnet50(dataset.classes(), dataset.stem(), method)
}

/// Architectures of one table, baseline first.
pub fn zoo_members(dataset: Benchmark, grouping: Grouping) -> Result<Vec<ArchConfig>> {
    Ok(match (grouping, dataset) {
        (Grouping::SameModel, d) => vec![
            arch(d, 50, Method::Vanilla)?,
            arch(d, 50, Method::Folding)?.with_folded(&[2, 3, 4]),
            arch(d, 50, Method::Hnn)?,
            arch(d, 50, Method::Hfn)?,
        ],
        (Grouping::SameAccuracy, Benchmark::Cifar100) => vec![
            arch(dataset, 50, Method::Vanilla)?,
            wide(dataset, Method::Hnn)?,
            arch(dataset, 200, Method::Hfn)?,
            arch(dataset, 152, Method::Hfn)?,
        ],
        (Grouping::SameAccuracy, Benchmark::Imagenet) => vec![
            arch(dataset, 34, Method::Vanilla)?,
            wide(dataset, Method::Hnn)?,
            wide(dataset, Method::Hfn)?,
            arch(dataset, 200, Method::Hfn)?,
        ],
    })
}

pub fn zoo_table(dataset: Benchmark, grouping: Grouping) -> Result<ZooTable> {
    let members = zoo_members(dataset, grouping)?;
    let reports = members.iter().map(size_report).collect::<Result<Vec<_>>>()?;
    let baseline_bytes = reports[0].compressed_bytes;
    let rows = reports
        .into_iter()
        .map(|size| ZooRow {
            baseline_bytes,
            bytes: size.compressed_bytes,
            reduction: baseline_bytes as f64 / size.compressed_bytes as f64,
            size,
        })
        .collect();
    Ok(ZooTable {
        dataset,
        grouping,
        rows,
    })
}

/// Both tables of a dataset.
pub fn paper_tables(dataset: Benchmark) -> Result<Vec<ZooTable>> {
    Ok(vec![
        zoo_table(dataset, Grouping::SameModel)?,
        zoo_table(dataset, Grouping::SameAccuracy)?,
    ])
}

impl ZooTable {
    pub fn row(&self, label: &str) -> Option<&ZooRow> {
        self.rows.iter().find(|r| r.size.label == label)
    }

    /// DRAM load energy of every row, relative to the baseline.
    pub fn energy(&self, p: &EnergyParams) -> Result<EnergyReport> {
        let models: Vec<(String, u64)> =
            self.rows.iter().map(|r| (r.size.label.clone(), r.bytes)).collect();
        energy_report(&models, p)
    }

    pub fn to_text(&self) -> String {
        let title = match self.grouping {
            Grouping::SameModel => "same model",
            Grouping::SameAccuracy => "similar accuracy",
        };
        let mut s = format!("{:?} ({})\n", self.dataset, title);
        let _ = writeln!(
            s,
            "{:<28} {:>10} {:>10} {:>10} {:>10}",
            "model", "params(M)", "size(MB)", "file(MB)", "reduction"
        );
        for (i, r) in self.rows.iter().enumerate() {
            let file = r
                .size
                .file_bytes
                .map(|b| format!("{:.2}", b as f64 / 1e6))
                .unwrap_or_else(|| "-".into());
            let red = if i == 0 {
                "-".to_string()
            } else {
                format!("{:.2}x", r.reduction)
            };
            let _ = writeln!(
                s,
                "{:<28} {:>10.2} {:>10.2} {:>10} {:>10}",
                r.size.label,
                r.size.reported_params as f64 / 1e6,
                r.bytes as f64 / 1e6,
                file,
                red
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "model,method,reported_params,dense_params,bytes,file_bytes,running_stat_bytes,reduction\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:.4}",
                r.size.label,
                r.size.method,
                r.size.reported_params,
                r.size.dense_params,
                r.bytes,
                r.size.file_bytes.map(|b| b.to_string()).unwrap_or_default(),
                r.size.running_stat_bytes,
                r.reduction
            );
        }
        s
    }
}
