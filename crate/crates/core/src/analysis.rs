//! Parameter and MAC report for a configured model and its dense twin, the
//! same channel plan with plain 3×3×3 convolutions in the aggregation
//! network.

use std::fmt::Write;

use serde::Serialize;

use crate::accounting::{count_macs, count_params, LayerRecord};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::inference::INPUT_MULTIPLE;
use crate::model::GhostStereo;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerRow {
    pub module: String,
    pub name: String,
    pub params: u64,
    /// MACs for both images where the layer is shared.
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModuleRow {
    pub module: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelCounts {
    pub use_se: bool,
    pub use_cve: bool,
    pub use_cva: bool,
    pub layers: Vec<LayerRow>,
    pub modules: Vec<ModuleRow>,
    pub total_params: u64,
    pub total_macs: u64,
    /// The three strided hourglass encoder blocks.
    pub encoder_params: u64,
    pub encoder_macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ratios {
    pub params: f64,
    pub macs: f64,
    pub encoder_params: f64,
    pub encoder_macs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub max_disparity: usize,
    pub model: ModelCounts,
    pub vanilla_twin: ModelCounts,
    /// Twin count divided by model count.
    pub compression: Ratios,
}

fn strip_side(name: &str) -> &str {
    name.strip_prefix("left.").unwrap_or(name)
}

/// Counts for `cfg` at a `batch` of `h × w` pairs. Parameters of the shared
/// feature extractor are counted once; its MACs are counted per image.
pub fn model_counts(cfg: &ModelConfig, batch: usize, h: usize, w: usize) -> Result<ModelCounts> {
    let (model, _) = GhostStereo::new(cfg)?;
    let all = model.describe(batch, h, w)?;
    let mut layers: Vec<LayerRow> = Vec::new();
    for r in &all {
        let (macs, _) = count_macs(&r.block, r.input)?;
        if let Some(name) = r.name.strip_prefix("right.") {
            let row = layers
                .iter_mut()
                .find(|l| l.name == name)
                .expect("left layer listed first");
            row.macs += macs;
            continue;
        }
        layers.push(LayerRow {
            module: r.module.to_string(),
            name: strip_side(&r.name).to_string(),
            params: count_params(&r.block),
            macs,
        });
    }
    let mut modules: Vec<ModuleRow> = Vec::new();
    for l in &layers {
        match modules.iter_mut().find(|m| m.module == l.module) {
            Some(m) => {
                m.params += l.params;
                m.macs += l.macs;
            }
            None => modules.push(ModuleRow {
                module: l.module.clone(),
                params: l.params,
                macs: l.macs,
            }),
        }
    }
    let encoder: Vec<&LayerRow> = layers.iter().filter(|l| is_encoder(l)).collect();
    Ok(ModelCounts {
        use_se: cfg.use_se,
        use_cve: cfg.use_cve,
        use_cva: cfg.use_cva,
        total_params: layers.iter().map(|l| l.params).sum(),
        total_macs: layers.iter().map(|l| l.macs).sum(),
        encoder_params: encoder.iter().map(|l| l.params).sum(),
        encoder_macs: encoder.iter().map(|l| l.macs).sum(),
        layers,
        modules,
    })
}

fn is_encoder(l: &LayerRow) -> bool {
    l.module == "aggregation" && l.name.starts_with("down")
}

/// Layers whose structure depends on the aggregation toggle.
pub fn cva_dependent(record: &LayerRecord) -> bool {
    record.module == "aggregation" && (record.name.starts_with("down") || record.name.ends_with(".refine"))
}

pub fn analyze(cfg: &ModelConfig, batch: usize, h: usize, w: usize) -> Result<AnalysisReport> {
    if batch == 0 || h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::Shape(format!(
            "analysis input {batch}x3x{h}x{w} needs a positive batch and sides that are multiples of {INPUT_MULTIPLE}"
        )));
    }
    let model = model_counts(cfg, batch, h, w)?;
    let twin_cfg = ModelConfig {
        use_cva: false,
        ..cfg.clone()
    };
    let vanilla_twin = model_counts(&twin_cfg, batch, h, w)?;
    let ratio = |a: u64, b: u64| a as f64 / b as f64;
    let compression = Ratios {
        params: ratio(vanilla_twin.total_params, model.total_params),
        macs: ratio(vanilla_twin.total_macs, model.total_macs),
        encoder_params: ratio(vanilla_twin.encoder_params, model.encoder_params),
        encoder_macs: ratio(vanilla_twin.encoder_macs, model.encoder_macs),
    };
    Ok(AnalysisReport {
        batch,
        height: h,
        width: w,
        max_disparity: cfg.max_disparity,
        model,
        vanilla_twin,
        compression,
    })
}

fn table(out: &mut String, title: &str, c: &ModelCounts) {
    let _ = writeln!(out, "{title} (se={}, cve={}, cva={})", c.use_se, c.use_cve, c.use_cva);
    let _ = writeln!(out, "  {:<18} {:>12} {:>16}", "module", "params", "MACs");
    for m in &c.modules {
        let _ = writeln!(out, "  {:<18} {:>12} {:>16}", m.module, m.params, m.macs);
    }
    let _ = writeln!(
        out,
        "  {:<18} {:>12} {:>16}",
        "encoder", c.encoder_params, c.encoder_macs
    );
    let _ = writeln!(out, "  {:<18} {:>12} {:>16}", "total", c.total_params, c.total_macs);
}

impl AnalysisReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "input {}x3x{}x{}, max disparity {}",
            self.batch, self.height, self.width, self.max_disparity
        );
        table(&mut out, "model", &self.model);
        table(&mut out, "vanilla twin", &self.vanilla_twin);
        let c = &self.compression;
        let _ = writeln!(
            out,
            "compression (twin / model): params {:.3}x, MACs {:.3}x, encoder params {:.3}x, encoder MACs {:.3}x",
            c.params, c.macs, c.encoder_params, c.encoder_macs
        );
        out
    }
}
