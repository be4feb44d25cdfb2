//! Analytic cost accounting.
//!
//! All counts are multiply-accumulates (MACs): an `n×k · k×m` product costs
//! `n·k·m`. Softmax, normalization, activations and residual additions are
//! not modeled. Averaging pools are charged one MAC per input element.

use std::fmt::Write as _;

use crate::blocks::{ArchConfig, PosEmbed};
use crate::error::Result;

/// Dense sampling: `υ` rounds of `N×C · C×m` association and `m×N · N×C`
/// aggregation, `2υmNC`.
pub fn flops_sts_dense(n: u64, c: u64, m: u64, iters: u64) -> u64 {
    2 * iters * m * n * c
}

/// Sparse sampling with one iteration: grid pooling `NC`, 9-neighbor
/// association `9NC`, 9-neighbor aggregation `9NC`.
pub fn flops_sts_sparse(n: u64, c: u64) -> u64 {
    sts_sparse_parts(n, c, 1).iter().sum()
}

/// `[pooling, association, aggregation]` for `iters` sampling rounds. The
/// association is computed at least once because upsampling needs it.
pub fn sts_sparse_parts(n: u64, c: u64, iters: u64) -> [u64; 3] {
    [n * c, 9 * n * c * iters.max(1), 9 * n * c * iters]
}

/// Global self-attention: `QKᵀ` and `AV` (`2N²C`) plus four `C×C`
/// projections (`4NC²`).
pub fn flops_gsa(n: u64, c: u64) -> u64 {
    2 * n * n * c + 4 * n * c * c
}

/// Super token attention with one sampling iteration: attention among `m`
/// super tokens (`2m²C + 4mC²`), sampling (`19NC`) and upsampling (`9NC`).
pub fn flops_sta(n: u64, c: u64, m: u64) -> u64 {
    2 * m * m * c + 4 * m * c * c + 28 * n * c
}

/// One line of a [`FlopsReport`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Row {
    pub component: String,
    pub params: u64,
    pub macs: u64,
    pub formula: String,
}

/// Per-component parameter and MAC counts of a model at one resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopsReport {
    pub arch: String,
    pub res: usize,
    pub rows: Vec<Row>,
    /// Non-trainable elements (batch-norm running statistics).
    pub buffers: u64,
}

pub const UNMODELED_NOTE: &str = "softmax, normalization, activation and residual-add costs are not counted";

impl FlopsReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.component.len()).max().unwrap_or(9).max(9);
        let mut out = String::new();
        let _ = writeln!(out, "{} @ {}×{}  (1 MAC = 1 FLOP)", self.arch, self.res, self.res);
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>15}  formula", "component", "params", "MACs");
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>12}  {:>15}  {}", r.component, r.params, r.macs, r.formula);
        }
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>15}", "total", self.total_params(), self.total_macs());
        let _ = writeln!(
            out,
            "params {:.2}M, MACs {:.2}G, buffers {}",
            self.total_params() as f64 / 1e6,
            self.total_macs() as f64 / 1e9,
            self.buffers
        );
        let _ = writeln!(out, "unmodeled: {UNMODELED_NOTE}");
        out
    }

    /// `component,params,macs,formula` rows with a header and a total line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,params,macs,formula\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},\"{}\"", r.component, r.params, r.macs, r.formula);
        }
        let _ = writeln!(out, "total,{},{},", self.total_params(), self.total_macs());
        out
    }
}

struct Builder {
    rows: Vec<Row>,
    buffers: u64,
}

impl Builder {
    fn row(&mut self, component: String, params: u64, macs: u64, formula: &str) {
        self.rows.push(Row { component, params, macs, formula: formula.to_string() });
    }

    fn bn(&mut self, c: u64) -> u64 {
        self.buffers += 2 * c;
        2 * c
    }
}

/// Counts `cfg` at `res × res` input analytically, layer by layer.
pub fn count_model(cfg: &ArchConfig, res: usize) -> Result<FlopsReport> {
    let cfg = ArchConfig { res, ..cfg.clone() };
    cfg.validate()?;
    let mut b = Builder { rows: Vec::new(), buffers: 0 };

    let mut cin = 3u64;
    let mut side = res as u64;
    for (i, &cout) in cfg.stem.iter().enumerate() {
        let cout = cout as u64;
        if i % 2 == 0 {
            side /= 2;
        }
        let bn = b.bn(cout);
        b.row(format!("stem.{i}"), 9 * cin * cout + bn, 9 * cin * cout * side * side, "9·Cin·Cout·HW");
        cin = cout;
    }

    for s in 0..cfg.stages() {
        let c = cfg.channels[s] as u64;
        let d = cfg.blocks[s] as u64;
        if s > 0 {
            side /= 2;
            let bn = b.bn(c);
            b.row(format!("merge.{}", s - 1), 9 * cin * c + bn, 9 * cin * c * side * side, "9·Cin·Cout·HW");
        }
        let n = side * side;
        let grid = cfg.grids[s] as u64;
        let p = side / grid;
        let m = p * p;
        let hidden = c * cfg.ffn_ratio as u64;
        let stage = format!("stage{}", s + 1);

        if cfg.pos_embed == PosEmbed::Ape {
            b.row(format!("{stage}.ape"), c * n, 0, "C·N");
        }
        if cfg.pos_embed == PosEmbed::Cpe {
            b.row(format!("{stage}.cpe"), d * (9 * c + c), d * 9 * c * n, "9·C·N");
        }
        b.row(format!("{stage}.ln"), d * 2 * c, 0, "-");
        let rel = if cfg.pos_embed == PosEmbed::Rpe { cfg.heads[s] as u64 * (2 * p - 1) * (2 * p - 1) } else { 0 };
        if grid == 1 {
            b.row(format!("{stage}.gsa"), d * (4 * c * c + rel), d * flops_gsa(n, c), "2N²C + 4NC²");
        } else {
            let sts: u64 = sts_sparse_parts(n, c, cfg.n_iter as u64).iter().sum();
            b.row(format!("{stage}.sta.sts"), 0, d * sts, "NC + 9NC·max(υ,1) + 9NC·υ");
            b.row(
                format!("{stage}.sta.mhsa"),
                d * (4 * c * c + rel),
                d * (2 * m * m * c + 4 * m * c * c),
                "2m²C + 4mC²",
            );
            b.row(format!("{stage}.sta.tu"), 0, d * 9 * n * c, "9NC");
        }
        let bn = b.bn(c) * d;
        b.buffers += 2 * c * (d - 1);
        b.row(format!("{stage}.bn"), bn, 0, "-");
        b.row(
            format!("{stage}.ffn"),
            d * (2 * c * hidden + hidden + c + 10 * hidden),
            d * (2 * c * hidden + 9 * hidden) * n,
            "2·C·rC·N + 9·rC·N",
        );
        cin = c;
    }

    let proj = cfg.proj_dim as u64;
    let k = cfg.n_classes as u64;
    let n = side * side;
    let bn = b.bn(proj);
    b.row("head.proj".into(), cin * proj + bn, cin * proj * n, "C·D·N");
    b.row("head.pool".into(), 0, proj * n, "D·N");
    b.row("head.fc".into(), proj * k + k, proj * k, "D·K");

    Ok(FlopsReport { arch: cfg.name.clone(), res, rows: b.rows, buffers: b.buffers })
}
