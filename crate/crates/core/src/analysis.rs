//! Parameter and multiply-accumulate accounting, plus broadcast attention
//! maps and their CSV / PGM export.

use std::fmt;
use std::path::Path;

use crate::config::{DsKind, GlobalMode, LocalKind, MlpKind, ModelConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostEntry {
    pub path: String,
    pub params: u64,
    pub macs: u64,
}

/// Per-layer parameters and MACs. Layers are keyed by their parameter path
/// (parameter name without the trailing `.weight` / `.bias`).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
    pub resolution: Option<usize>,
}

impl CostReport {
    fn entry(&mut self, path: &str) -> &mut CostEntry {
        if let Some(i) = self.entries.iter().position(|e| e.path == path) {
            return &mut self.entries[i];
        }
        self.entries.push(CostEntry {
            path: path.to_string(),
            params: 0,
            macs: 0,
        });
        self.entries.last_mut().expect("just pushed")
    }

    fn add_macs(&mut self, path: &str, macs: u64) {
        self.entry(path).macs += macs;
    }

    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    /// Union of two reports, summing entries with the same path.
    pub fn merge(mut self, other: &CostReport) -> CostReport {
        for e in &other.entries {
            let m = self.entry(&e.path);
            m.params += e.params;
            m.macs += e.macs;
        }
        self.resolution = self.resolution.or(other.resolution);
        self
    }

    /// Sums entries by their first `depth` path components.
    pub fn grouped(&self, depth: usize) -> CostReport {
        let mut out = CostReport {
            entries: Vec::new(),
            resolution: self.resolution,
        };
        for e in &self.entries {
            let key: Vec<&str> = e.path.split('.').take(depth).collect();
            let m = out.entry(&key.join("."));
            m.params += e.params;
            m.macs += e.macs;
        }
        out
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.entries.iter().map(|e| e.path.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$} {:>12} {:>14}", "layer", "params", "macs")?;
        for e in &self.entries {
            writeln!(f, "{:<width$} {:>12} {:>14}", e.path, e.params, e.macs)?;
        }
        write!(f, "{:<width$} {:>12} {:>14}", "total", self.total_params(), self.total_macs())?;
        if let Some(r) = self.resolution {
            write!(f, "  (at {r}x{r})")?;
        }
        Ok(())
    }
}

/// Published size of a preset at 224²: `(params, FLOPs)`.
pub fn reference_costs(preset: &str) -> Option<(f64, f64)> {
    match preset {
        "dualtoken_t_mix" => Some((5.8e6, 0.5e9)),
        "dualtoken_s_mix" => Some((11.4e6, 1.0e9)),
        "dualtoken_s" => Some((11.9e6, 1.1e9)),
        _ => None,
    }
}

pub const PARAM_TOLERANCE: f64 = 0.10;
pub const FLOP_TOLERANCE: f64 = 0.15;

/// `|got − expected| ≤ tol · expected`.
pub fn within(got: f64, expected: f64, tol: f64) -> bool {
    (got - expected).abs() <= tol * expected
}

fn layer_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(p, _)| p)
}

/// Exact parameter count of a built model, grouped per layer.
pub fn count_params<T: Scalar>(model: &Model<T>) -> CostReport {
    let mut report = CostReport::default();
    for (name, t) in model.params.iter() {
        report.entry(layer_of(name)).params += t.len() as u64;
    }
    report
}

struct Macs {
    report: CostReport,
}

impl Macs {
    fn linear(&mut self, path: &str, n: usize, cin: usize, cout: usize) {
        self.report.add_macs(path, (n * cin * cout) as u64);
    }

    /// `out_side` is the output map side; `cin_per_group` already divided.
    fn conv(&mut self, path: &str, out_side: usize, k: usize, cin_per_group: usize, cout: usize) {
        self.report.add_macs(path, (out_side * out_side * k * k * cin_per_group * cout) as u64);
    }

    fn attention(&mut self, path: &str, nq: usize, nk: usize, c: usize) {
        self.linear(&format!("{path}.q"), nq, c, c);
        self.linear(&format!("{path}.k"), nk, c, c);
        self.linear(&format!("{path}.v"), nk, c, c);
        // Per head nq·nk·d for the logits and again for the weighted sum.
        self.report.add_macs(&format!("{path}.attention"), (2 * nq * nk * c) as u64);
        self.linear(&format!("{path}.proj"), nq, c, c);
    }
}

/// Analytic MACs of one forward pass at `resolution`², under the convention
/// that only convolutions and matrix products are counted.
pub fn count_flops(cfg: &ModelConfig, resolution: usize) -> Result<CostReport> {
    cfg.validate()?;
    cfg.validate_resolution(resolution)?;
    let mut m = Macs {
        report: CostReport {
            entries: Vec::new(),
            resolution: Some(resolution),
        },
    };
    let hid = cfg.stem_hidden;
    let c1 = cfg.stages[0].channels;
    m.conv("stem.conv1", resolution / 2, 3, 3, hid);
    m.conv("stem.conv2", resolution / 4, 3, hid, hid);
    m.conv("stem.conv3", resolution / 8, 3, hid, c1);

    let (rows, cols) = cfg.token_layout();
    let t = rows * cols;
    for (si, s) in cfg.stages.iter().enumerate() {
        let side = resolution / s.stride;
        let n = side * side;
        let c = s.channels;
        for b in 0..s.blocks {
            let p = format!("stages.{si}.blocks.{b}");
            if !s.skip_local_and_ds {
                match cfg.local_kind {
                    LocalKind::ConvEncoder => {
                        m.conv(&format!("{p}.local.dw"), side, s.dw_kernel, 1, c);
                        m.linear(&format!("{p}.local.pw1"), n, c, 4 * c);
                        m.linear(&format!("{p}.local.pw2"), n, 4 * c, c);
                    }
                    LocalKind::WindowMsa => {
                        let windows = (side / cfg.window) * (side / cfg.window);
                        let w2 = cfg.window * cfg.window;
                        for _ in 0..windows {
                            m.attention(&format!("{p}.local"), w2, w2, c);
                        }
                    }
                }
            }
            let mut other = n;
            if cfg.global_mode.is_position_aware() {
                let mut ds_side = side;
                if !s.skip_local_and_ds {
                    ds_side = side / (1 << (s.ds_steps + 1));
                    if cfg.ds_kind == DsKind::StepWise {
                        let mut cur = side / 2;
                        for i in 0..s.ds_steps {
                            m.conv(&format!("{p}.ds.conv{i}"), cur, cfg.ds_kernel, c, c);
                            cur /= 2;
                        }
                    }
                }
                let nd = ds_side * ds_side;
                m.attention(&format!("{p}.aggregate"), nd, nd, c);
                // The aggregated map is resized onto the grid when it misses it.
                other = t;
            }
            match cfg.global_mode {
                GlobalMode::PositionAwareSum => match cfg.mlp_kind {
                    MlpKind::Normal => {
                        let hid = cfg.token_mlp_ratio * c;
                        m.linear(&format!("{p}.fuse.mlp.fc1"), t, c, hid);
                        m.linear(&format!("{p}.fuse.mlp.fc2"), t, hid, c);
                    }
                    MlpKind::Mix => {
                        m.linear(&format!("{p}.fuse.mlp.channel"), t, c, c);
                        m.linear(&format!("{p}.fuse.mlp.token"), c, t, t);
                    }
                },
                GlobalMode::NormalMsa | GlobalMode::PositionAwareMsa => {
                    m.attention(&format!("{p}.fuse.attn"), t, t + other, c);
                }
            }
            m.attention(&format!("{p}.broadcast"), n, t, c);
            let hid = cfg.ffn_ratio * c;
            m.linear(&format!("{p}.ffn.fc1"), n, c, hid);
            m.linear(&format!("{p}.ffn.fc2"), n, hid, c);
            if cfg.bidim_enabled {
                m.linear(&format!("{p}.bidim.spatial"), n, c, 1);
                m.linear(&format!("{p}.bidim.channel"), 1, c, c);
            }
        }
        if let Some(next) = cfg.stages.get(si + 1) {
            let half = side / 2;
            m.linear(&format!("merges.{si}.proj"), half * half, 4 * c, next.channels);
            m.linear(&format!("token_proj.{si}"), t, c, next.channels);
        }
    }
    let c3 = cfg.stages[2].channels;
    m.linear("head.fc1", 1, c3, cfg.head_hidden);
    m.linear("head.fc2", 1, cfg.head_hidden, cfg.num_classes);
    Ok(m.report)
}

/// Parameters and MACs of a built model in one table.
pub fn cost_report<T: Scalar>(model: &Model<T>, resolution: usize) -> Result<CostReport> {
    Ok(count_params(model).merge(&count_flops(&model.cfg, resolution)?))
}

// ---- attention maps --------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockSel {
    Last,
    Index(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySel {
    Index(usize),
    /// Every image token, one map each.
    All,
    /// Average over all image-token queries.
    Mean,
}

impl std::str::FromStr for QuerySel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(QuerySel::Mean),
            "all" => Ok(QuerySel::All),
            _ => s
                .parse()
                .map(QuerySel::Index)
                .map_err(|_| Error::Config(format!("query must be an index, `all` or `mean`, got `{s}`"))),
        }
    }
}

/// Broadcast attention of one block laid out on the global-token grid.
#[derive(Debug, Clone)]
pub struct AttentionMapExport {
    pub query: QuerySel,
    /// Index into the flattened block list.
    pub block: usize,
    /// `(query label, rows×cols map)`.
    pub maps: Vec<(String, Tensor<f64>)>,
}

/// Head-averaged Global Broadcast weights of a block for one image.
pub fn extract_attention_map<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    block: BlockSel,
    query: QuerySel,
) -> Result<AttentionMapExport> {
    let (_, acts) = model.forward(image)?;
    let idx = match block {
        BlockSel::Last => acts.len() - 1,
        BlockSel::Index(i) if i < acts.len() => i,
        BlockSel::Index(i) => return Err(Error::OutOfRange { index: i, len: acts.len() }),
    };
    let attn = acts[idx].broadcast_attention.to_f64_vec();
    let (nq, nk) = {
        let s = acts[idx].broadcast_attention.shape();
        (s[0], s[1])
    };
    let (rows, cols) = model.cfg.token_layout();
    let row_map = |q: usize| Tensor::new(vec![rows, cols], attn[q * nk..(q + 1) * nk].to_vec());
    let maps = match query {
        QuerySel::Index(q) if q < nq => vec![(q.to_string(), row_map(q)?)],
        QuerySel::Index(q) => return Err(Error::OutOfRange { index: q, len: nq }),
        QuerySel::All => (0..nq).map(|q| Ok((q.to_string(), row_map(q)?))).collect::<Result<_>>()?,
        QuerySel::Mean => {
            let mut acc = vec![0.0; nk];
            for q in 0..nq {
                for (a, v) in acc.iter_mut().zip(&attn[q * nk..(q + 1) * nk]) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= nq as f64);
            vec![("mean".to_string(), Tensor::new(vec![rows, cols], acc)?)]
        }
    };
    Ok(AttentionMapExport { query, block: idx, maps })
}

/// The `k` largest cells as `(row, col, value)`, largest first; equal values
/// keep raster order.
pub fn top_k(map: &Tensor<f64>, k: usize) -> Vec<(usize, usize, f64)> {
    let cols = map.shape()[map.rank() - 1];
    let mut cells: Vec<(usize, f64)> = map.data().iter().copied().enumerate().collect();
    cells.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cells.into_iter().take(k).map(|(i, v)| (i / cols, i % cols, v)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Csv,
    Pgm,
}

impl std::str::FromStr for HeatmapFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(HeatmapFormat::Csv),
            "pgm" => Ok(HeatmapFormat::Pgm),
            _ => Err(Error::Config(format!("format must be csv or pgm, got `{s}`"))),
        }
    }
}

impl HeatmapFormat {
    pub fn extension(self) -> &'static str {
        match self {
            HeatmapFormat::Csv => "csv",
            HeatmapFormat::Pgm => "pgm",
        }
    }
}

fn grid_dims(map: &Tensor<f64>) -> Result<(usize, usize)> {
    match *map.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::shape("heatmap", format!("expected a 2-D map, got {s:?}"))),
    }
}

/// Min-max scaling to 0..=255; a constant map becomes all zeros.
pub fn pgm_pixels(map: &Tensor<f64>) -> Vec<u8> {
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    map.data()
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect()
}

pub fn heatmap_text(map: &Tensor<f64>, format: HeatmapFormat) -> Result<String> {
    let (rows, cols) = grid_dims(map)?;
    if !map.all_finite() {
        return Err(Error::NonFinite { op: "heatmap" });
    }
    let mut out = String::new();
    match format {
        HeatmapFormat::Csv => {
            for r in map.data().chunks(cols) {
                let line: Vec<String> = r.iter().map(|v| format!("{v:e}")).collect();
                out.push_str(&line.join(","));
                out.push('\n');
            }
        }
        HeatmapFormat::Pgm => {
            out.push_str(&format!("P2\n{cols} {rows}\n255\n"));
            for r in pgm_pixels(map).chunks(cols) {
                let line: Vec<String> = r.iter().map(u8::to_string).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
    }
    Ok(out)
}

pub fn export_heatmap(map: &Tensor<f64>, path: &Path, format: HeatmapFormat) -> Result<()> {
    std::fs::write(path, heatmap_text(map, format)?)?;
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Tensor<f64>> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let vals = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("csv row {rows}: {e}")))?;
        if *cols.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::Format(format!("csv row {rows} has {} values", vals.len())));
        }
        data.extend(vals);
        rows += 1;
    }
    Tensor::new(vec![rows, cols.unwrap_or(0)], data)
}

pub fn read_csv(path: &Path) -> Result<Tensor<f64>> {
    parse_csv(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn single_linear_macs() {
        let mut m = Macs { report: CostReport::default() };
        m.linear("fc", 49, 64, 64);
        assert_eq!(m.report.total_macs(), 200_704);
    }

    #[test]
    fn params_match_flat_enumeration() {
        let model: Model<f32> = Model::build(&ModelConfig::preset("toy").unwrap(), 1).unwrap();
        let report = count_params(&model);
        let flat: usize = model.params.iter().map(|(_, t)| t.len()).sum();
        assert_eq!(report.total_params(), flat as u64);
        assert!(report.entries.iter().any(|e| e.path == "global_tokens"));
    }

    #[test]
    fn params_independent_of_seed() {
        let cfg = ModelConfig::preset("toy").unwrap();
        let a = count_params(&Model::<f32>::build(&cfg, 1).unwrap());
        let b = count_params(&Model::<f32>::build(&cfg, 2).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn grouped_preserves_totals() {
        let cfg = ModelConfig::preset("toy").unwrap();
        let model: Model<f32> = Model::build(&cfg, 0).unwrap();
        let r = cost_report(&model, 32).unwrap();
        let g = r.grouped(2);
        assert_eq!(g.total_params(), r.total_params());
        assert_eq!(g.total_macs(), r.total_macs());
    }

    #[test]
    fn resolution_rejected() {
        let cfg = ModelConfig::preset("toy").unwrap();
        assert!(count_flops(&cfg, 40).is_err());
    }

    #[test]
    fn pgm_scaling() {
        let map = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(pgm_pixels(&map), vec![0, 255, 255, 0]);
        assert_eq!(heatmap_text(&map, HeatmapFormat::Pgm).unwrap(), "P2\n2 2\n255\n0 255\n255 0\n");
        let flat = Tensor::full(vec![3, 3], 0.25);
        assert!(pgm_pixels(&flat).iter().all(|&p| p == 0));
    }

    #[test]
    fn csv_round_trip() {
        let map = Tensor::from_fn([3, 3], |i| (i as f64 * 0.731).sin() / 7.0);
        let back = parse_csv(&heatmap_text(&map, HeatmapFormat::Csv).unwrap()).unwrap();
        assert!(map.max_abs_diff(&back) <= 1e-9);
    }

    #[test]
    fn top_k_orders_and_breaks_ties_by_position() {
        let map = Tensor::new(vec![2, 3], vec![0.1, 0.5, 0.5, 0.0, 0.9, 0.2]).unwrap();
        let top = top_k(&map, 3);
        assert_eq!(top, vec![(1, 1, 0.9), (0, 1, 0.5), (0, 2, 0.5)]);
    }

    #[test]
    fn query_parsing() {
        assert_eq!("mean".parse::<QuerySel>().unwrap(), QuerySel::Mean);
        assert_eq!("12".parse::<QuerySel>().unwrap(), QuerySel::Index(12));
        assert!("x".parse::<QuerySel>().is_err());
    }
}
