//! Energy and compute estimates for an idealized inference accelerator that
//! loads every stored parameter word from DRAM once per inference.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, LayerSpec, NetPlan, Stem};
use crate::supermask::kept_count;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    /// Energy of one 32-bit DRAM read.
    pub dram_read_32b_pj: f64,
    pub fp32_mult_pj: f64,
    /// How many times cheaper a 16-bit float multiply is than a DRAM read.
    pub fp16_mult_ratio_vs_dram: f64,
    pub technology: String,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams {
            dram_read_32b_pj: 640.0,
            fp32_mult_pj: 3.7,
            fp16_mult_ratio_vs_dram: 291.0,
            technology: "45nm CMOS".into(),
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.dram_read_32b_pj, self.fp32_mult_pj, self.fp16_mult_ratio_vs_dram];
        if all.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("energy constants must be positive".into()));
        }
        Ok(())
    }

    pub fn fp16_mult_pj(&self) -> f64 {
        self.dram_read_32b_pj / self.fp16_mult_ratio_vs_dram
    }
}

/// 32-bit words needed for `bytes`.
pub fn words(bytes: u64) -> u64 {
    bytes.div_ceil(4)
}

/// Picojoules to stream `bytes` from DRAM, one read per 32-bit word.
pub fn dram_load_energy(bytes: u64, p: &EnergyParams) -> f64 {
    words(bytes) as f64 * p.dram_read_32b_pj
}

/// Picojoules with an auto-scaled unit, e.g. `15.17 mJ`.
pub fn format_energy(pj: f64) -> String {
    let units = [(1e12, "J"), (1e9, "mJ"), (1e6, "uJ"), (1e3, "nJ")];
    for (scale, unit) in units {
        if pj.abs() >= scale {
            return format!("{:.2} {}", pj / scale, unit);
        }
    }
    format!("{:.2} pJ", pj)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerMacs {
    pub name: String,
    /// Times the layer runs per inference (fold iterations for shared blocks).
    pub executions: u64,
    pub macs: u64,
    /// MACs over kept connections only.
    pub sparse_macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacReport {
    pub resolution: usize,
    pub layers: Vec<LayerMacs>,
    pub total: u64,
    pub sparse_total: u64,
}

impl MacReport {
    /// Picojoules of the multiplies at 32-bit precision.
    pub fn mult_energy(&self, p: &EnergyParams, sparse: bool) -> f64 {
        let n = if sparse { self.sparse_total } else { self.total };
        n as f64 * p.fp32_mult_pj
    }
}

/// MACs of one application of a conv (or the classifier, `out_hw = 1`).
pub fn layer_macs(spec: &LayerSpec, out_hw: usize) -> u64 {
    spec.len() as u64 * (out_hw * out_hw) as u64
}

fn conv_out(size: usize, spec: &LayerSpec) -> usize {
    let k = spec.shape[2];
    (size + 2 * (k / 2) - k) / spec.stride() + 1
}

/// Multiply-accumulates per image at `resolution`×`resolution` input.
/// Every block application counts, so folding leaves the total unchanged.
pub fn mult_count(arch: &ArchConfig, resolution: usize) -> Result<MacReport> {
    if resolution == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    let plan = NetPlan::new(arch)?;
    let k = arch.effective_k_permille();
    let mut layers = Vec::new();
    let mut push = |name: &str, spec: &LayerSpec, out_hw: usize, executions: u64| {
        let kept = kept_count(spec.len(), k) as u64 * (out_hw * out_hw) as u64;
        layers.push(LayerMacs {
            name: name.to_string(),
            executions,
            macs: layer_macs(spec, out_hw) * executions,
            sparse_macs: kept * executions,
        });
    };
    let mut hw = conv_out(resolution, &plan.stem);
    push(&plan.stem.name, &plan.stem, hw, 1);
    if arch.stem == Stem::Imagenet {
        hw = (hw + 2 - 3) / 2 + 1;
    }
    for st in &plan.stages {
        let input = hw;
        let mut cur = input;
        for l in &st.projection.main {
            cur = conv_out(cur, l);
            push(&l.name, l, cur, 1);
        }
        if let Some(sc) = &st.projection.shortcut {
            push(&sc.name, sc, conv_out(input, sc), 1);
        }
        hw = cur;
        if st.folded {
            for l in &st.repeat.main {
                push(&l.name, l, hw, st.repeats as u64);
            }
        } else {
            for b in 0..st.repeats {
                for l in &st.repeat.main {
                    push(&l.name.replacen(".b1.", &format!(".b{}.", b + 1), 1), l, hw, 1);
                }
            }
        }
    }
    push(&plan.classifier.name, &plan.classifier, 1, 1);
    Ok(MacReport {
        resolution,
        total: layers.iter().map(|l| l.macs).sum(),
        sparse_total: layers.iter().map(|l| l.sparse_macs).sum(),
        layers,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyRow {
    pub label: String,
    pub bytes: u64,
    pub words: u64,
    pub picojoules: f64,
    /// Baseline energy divided by this row's energy.
    pub reduction_vs_baseline: f64,
}

/// Load-energy comparison against the first entry.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyReport {
    pub technology: String,
    pub rows: Vec<EnergyRow>,
}

pub fn energy_report(models: &[(String, u64)], p: &EnergyParams) -> Result<EnergyReport> {
    p.validate()?;
    let Some((_, base_bytes)) = models.first() else {
        return Err(Error::InvalidArgument("energy report needs at least one model".into()));
    };
    let base = dram_load_energy(*base_bytes, p);
    let rows = models
        .iter()
        .map(|(label, bytes)| {
            let pj = dram_load_energy(*bytes, p);
            EnergyRow {
                label: label.clone(),
                bytes: *bytes,
                words: words(*bytes),
                picojoules: pj,
                reduction_vs_baseline: base / pj,
            }
        })
        .collect();
    Ok(EnergyReport {
        technology: p.technology.clone(),
        rows,
    })
}

impl EnergyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,bytes,words,energy_pj,energy,reduction\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.1},{},{:.4}",
                r.label,
                r.bytes,
                r.words,
                r.picojoules,
                format_energy(r.picojoules),
                r.reduction_vs_baseline
            );
        }
        s
    }

    /// Whitespace-separated `index label millijoules` series for bar plots.
    pub fn to_plot_data(&self) -> String {
        let mut s = format!("# DRAM load energy, {}\n# index label mJ\n", self.technology);
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(s, "{} \"{}\" {:.6}", i, r.label, r.picojoules / 1e9);
        }
        s
    }
}
