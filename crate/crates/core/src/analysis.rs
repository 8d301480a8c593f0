//! Zero patterns per layer, the last-active-layer rule and compression ratios.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::prox::GroupIndex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFlags {
    pub layer_id: usize,
    /// One entry per channel group of the layer; `true` = exactly zero.
    pub zero: Vec<bool>,
}

impl LayerFlags {
    pub fn is_active(&self) -> bool {
        self.zero.iter().any(|&z| !z)
    }

    pub fn zero_fraction(&self) -> f64 {
        if self.zero.is_empty() {
            return 0.0;
        }
        self.zero.iter().filter(|&&z| z).count() as f64 / self.zero.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityPattern {
    pub task_name: String,
    pub lambda: f64,
    pub seed: u64,
    pub layers: Vec<LayerFlags>,
}

impl SparsityPattern {
    /// Layer ids and group counts; two patterns are comparable iff these match.
    pub fn signature(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.layer_id, l.zero.len())).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSelection {
    pub taps: BTreeMap<String, usize>,
}

impl TapSelection {
    pub fn deepest(&self) -> Option<usize> {
        self.taps.values().copied().max()
    }
}

pub fn extract_pattern(
    store: &ParamStore,
    index: &GroupIndex,
    task_name: &str,
    lambda: f64,
    seed: u64,
) -> Result<SparsityPattern> {
    index.check(store)?;
    let mut layers: Vec<LayerFlags> = Vec::new();
    for g in &index.groups {
        let zero = g.is_zero(store);
        match layers.last_mut() {
            Some(l) if l.layer_id == g.id.layer_id => l.zero.push(zero),
            _ => layers.push(LayerFlags {
                layer_id: g.id.layer_id,
                zero: vec![zero],
            }),
        }
    }
    Ok(SparsityPattern {
        task_name: task_name.to_owned(),
        lambda,
        seed,
        layers,
    })
}

/// Deepest layer with at least one nonzero channel group.
pub fn last_active_layer(pattern: &SparsityPattern) -> Result<usize> {
    if pattern.layers.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "sparsity pattern for `{}` has no layers",
            pattern.task_name
        )));
    }
    pattern
        .layers
        .iter()
        .filter(|l| l.is_active())
        .map(|l| l.layer_id)
        .max()
        .ok_or(Error::AllZeroPattern)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub total_parameters: f64,
    pub nonzero_parameters: f64,
    pub compression_ratio: f64,
}

impl CompressionReport {
    /// Table rendering, two decimals.
    pub fn formatted(&self) -> String {
        format!("{:.2}", self.compression_ratio)
    }
}

/// `CR = total / nonzero`. Counts may be given in any unit (e.g. millions).
pub fn compression_ratio(total: f64, nonzero: f64) -> Result<CompressionReport> {
    if !(nonzero > 0.0) {
        return Err(Error::InvalidArgument(
            "compression ratio needs a nonzero parameter count".into(),
        ));
    }
    if nonzero > total {
        return Err(Error::InvalidArgument(format!(
            "nonzero count {nonzero} exceeds total {total}"
        )));
    }
    Ok(CompressionReport {
        total_parameters: total,
        nonzero_parameters: nonzero,
        compression_ratio: total / nonzero,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedPattern {
    pub svg: String,
    pub csv: String,
}

const CELL: usize = 24;
const LABEL_WIDTH: usize = 120;

/// Task-by-layer grid shaded by zero-channel fraction. The selected tap
/// (last active layer) of each row is outlined.
pub fn render_pattern(patterns: &[SparsityPattern]) -> Result<RenderedPattern> {
    let first = patterns
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to render".into()))?;
    let signature = first.signature();
    if let Some(bad) = patterns.iter().find(|p| p.signature() != signature) {
        return Err(Error::Shape(format!(
            "pattern for `{}` is over a different backbone than `{}`",
            bad.task_name, first.task_name
        )));
    }

    let mut csv = String::from("task");
    for l in &first.layers {
        write!(csv, ",{}", l.layer_id).unwrap();
    }
    csv.push('\n');
    for p in patterns {
        csv.push_str(&p.task_name);
        for l in &p.layers {
            write!(csv, ",{:.6}", l.zero_fraction()).unwrap();
        }
        csv.push('\n');
    }

    let cols = first.layers.len();
    let width = LABEL_WIDTH + cols * CELL + 1;
    let height = (patterns.len() + 1) * CELL + 1;
    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\" standalone=\"no\"?>\n");
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{width}\" height=\"{height}\">"
    )
    .unwrap();
    for (j, l) in first.layers.iter().enumerate() {
        writeln!(
            svg,
            "  <text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            LABEL_WIDTH + j * CELL + CELL / 2,
            CELL - 8,
            l.layer_id
        )
        .unwrap();
    }
    for (i, p) in patterns.iter().enumerate() {
        let y = (i + 1) * CELL;
        writeln!(
            svg,
            "  <text x=\"4\" y=\"{}\" font-size=\"12\">{}</text>",
            y + CELL / 2 + 4,
            xml_escape(&p.task_name)
        )
        .unwrap();
        let tap = last_active_layer(p).ok();
        for (j, l) in p.layers.iter().enumerate() {
            let frac = l.zero_fraction();
            let outlined = tap == Some(l.layer_id);
            writeln!(
                svg,
                "  <rect x=\"{}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{}\" stroke=\"{}\" stroke-width=\"{}\"><title>{} layer {}: {:.6}</title></rect>",
                LABEL_WIDTH + j * CELL,
                shade(frac),
                if outlined { "#ff8c00" } else { "#999999" },
                if outlined { 3 } else { 1 },
                xml_escape(&p.task_name),
                l.layer_id,
                frac
            )
            .unwrap();
        }
    }
    svg.push_str("</svg>\n");
    Ok(RenderedPattern { svg, csv })
}

/// White for dense, dark grey for fully zero.
fn shade(frac: f64) -> String {
    let v = (255.0 - frac.clamp(0.0, 1.0) * 200.0).round() as u8;
    format!("#{v:02x}{v:02x}{v:02x}")
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
