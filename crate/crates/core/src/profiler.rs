//! Static parameter / MAC profiler.
//!
//! Costs are computed by walking the declared layer structure of a model
//! configuration — never by runtime tracing — so reports are exact integers
//! and identical across runs. Conventions: MACs are multiply-accumulates for
//! batch size 1 (one template + one search crop); convolutions cost
//! `Cout*(Cin/groups)*k^2*H'*W'`, linears `Din*Dout*rows`, attention counts
//! the QK and AV products at token granularity; normalization, activations,
//! elementwise gates, pooling, and upsampling count zero.

use crate::error::Result;
use crate::hfc::FusionMode;
use crate::model::ModelConfig;
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn params_with_prefix(&self, prefix: &str) -> u64 {
        self.rows.iter().filter(|r| r.name.starts_with(prefix)).map(|r| r.params).sum()
    }

    pub fn macs_with_prefix(&self, prefix: &str) -> u64 {
        self.rows.iter().filter(|r| r.name.starts_with(prefix)).map(|r| r.macs).sum()
    }

    /// `name,params,macs` rows in declaration order plus a total line.
    pub fn csv(&self) -> String {
        let mut s = String::from("name,params,macs\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.name, r.params, r.macs);
        }
        let _ = writeln!(s, "total,{},{}", self.total_params(), self.total_macs());
        s
    }
}

pub fn conv_params(cin: u64, cout: u64, k: u64, groups: u64, bias: bool) -> u64 {
    cout * (cin / groups) * k * k + if bias { cout } else { 0 }
}

pub fn conv_macs(cin: u64, cout: u64, k: u64, groups: u64, out_h: u64, out_w: u64) -> u64 {
    cout * (cin / groups) * k * k * out_h * out_w
}

pub fn linear_params(din: u64, dout: u64, bias: bool) -> u64 {
    din * dout + if bias { dout } else { 0 }
}

/// Channel widths along the cascade: deep map, after the first concat, after
/// the second.
pub fn cascade_trace(cfg: &ModelConfig) -> [usize; 3] {
    let [c1, c2, c3] = cfg.backbone.stage_dims;
    [c3, c3 + c2, c3 + c2 + c1]
}

struct Builder {
    rows: Vec<CostRow>,
}

impl Builder {
    fn raw(&mut self, name: &str, params: u64, macs: u64) {
        self.rows.push(CostRow { name: name.to_string(), params, macs });
    }

    fn conv(
        &mut self,
        name: &str,
        cin: u64,
        cout: u64,
        k: u64,
        groups: u64,
        bias: bool,
        outputs: &[(u64, u64)],
    ) {
        let macs: u64 = outputs.iter().map(|&(h, w)| conv_macs(cin, cout, k, groups, h, w)).sum();
        self.raw(name, conv_params(cin, cout, k, groups, bias), macs);
    }

    fn bn(&mut self, name: &str, c: u64) {
        self.raw(name, 2 * c, 0);
    }

    fn linear(&mut self, name: &str, din: u64, dout: u64, bias: bool, rows: u64) {
        self.raw(name, linear_params(din, dout, bias), din * dout * rows);
    }

    fn zero(&mut self, name: &str) {
        self.raw(name, 0, 0);
    }
}

/// Full cost report for one assembled configuration (batch 1).
pub fn profile(cfg: &ModelConfig) -> Result<CostReport> {
    cfg.validate()?;
    let b = &cfg.backbone;
    let mut bl = Builder { rows: Vec::new() };

    // Patch embedding runs once per crop; spatial sides halve per conv.
    let c1 = b.stage_dims[0] as u64;
    let schedule = [3, c1 / 8, c1 / 4, c1 / 2, c1];
    for i in 0..4u64 {
        let ts = (b.template_size as u64) >> (i + 1);
        let ss = (b.search_size as u64) >> (i + 1);
        bl.conv(
            &format!("backbone.patch.conv{}", i + 1),
            schedule[i as usize],
            schedule[i as usize + 1],
            3,
            1,
            false,
            &[(ts, ts), (ss, ss)],
        );
        bl.bn(&format!("backbone.patch.bn{}", i + 1), schedule[i as usize + 1]);
    }
    let tg0 = b.template_grid(0) as u64;
    let sg0 = b.search_grid(0) as u64;
    bl.raw("backbone.pos.template", tg0 * tg0 * c1, 0);
    bl.raw("backbone.pos.search", sg0 * sg0 * c1, 0);

    let dk = b.key_dim as u64;
    let tokens = |s: usize| -> u64 {
        let tg = b.template_grid(s) as u64;
        let sg = b.search_grid(s) as u64;
        tg * tg + sg * sg
    };
    for s in 0..3 {
        let c = b.stage_dims[s] as u64;
        let h = b.stage_heads[s] as u64;
        let dv = 2 * dk;
        let l = tokens(s);
        for blk in 0..b.stage_depths[s] {
            let base = format!("backbone.stage{}.block{}", s + 1, blk);
            bl.linear(&format!("{}.attn.qkv", base), c, h * (2 * dk + dv), true, l);
            bl.raw(&format!("{}.attn.scores", base), 0, h * l * l * dk);
            bl.raw(&format!("{}.attn.context", base), 0, h * l * l * dv);
            bl.linear(&format!("{}.attn.proj", base), h * dv, c, true, l);
            bl.linear(&format!("{}.mlp.fc1", base), c, c * b.mlp_ratio as u64, true, l);
            bl.linear(&format!("{}.mlp.fc2", base), c * b.mlp_ratio as u64, c, true, l);
        }
        if s < 2 {
            let cin = c;
            let cout = b.stage_dims[s + 1] as u64;
            let hh = b.stage_heads[s + 1] as u64;
            let dv4 = 4 * dk;
            let lk = l;
            let lq = tokens(s + 1);
            let base = format!("backbone.shrink{}", s + 1);
            bl.linear(&format!("{}.q", base), cin, hh * dk, true, lq);
            bl.linear(&format!("{}.k", base), cin, hh * dk, true, lk);
            bl.linear(&format!("{}.v", base), cin, hh * dv4, true, lk);
            bl.raw(&format!("{}.scores", base), 0, hh * lq * lk * dk);
            bl.raw(&format!("{}.context", base), 0, hh * lq * lk * dv4);
            bl.linear(&format!("{}.proj", base), hh * dv4, cout, true, lq);
        }
    }

    // Fusion.
    let g = sg0;
    match cfg.hfc.mode {
        FusionMode::Cascade => {
            let trace = cascade_trace(cfg);
            let r = cfg.hfc.se_ratio as u64;
            bl.zero("hfc.upsample1");
            bl.zero("hfc.concat1");
            let cat1 = trace[1] as u64;
            bl.linear("hfc.se1.w1", cat1, cat1 / r, false, 1);
            bl.linear("hfc.se1.w2", cat1 / r, cat1, false, 1);
            bl.zero("hfc.upsample2");
            bl.zero("hfc.concat2");
            let cat2 = trace[2] as u64;
            bl.linear("hfc.se2.w1", cat2, cat2 / r, false, 1);
            bl.linear("hfc.se2.w2", cat2 / r, cat2, false, 1);
        }
        FusionMode::Addition => {
            let [d1, d2, d3] =
                [b.stage_dims[0] as u64, b.stage_dims[1] as u64, b.stage_dims[2] as u64];
            bl.conv("hfc.proj_deep", d3, d1, 1, 1, false, &[(g / 4, g / 4)]);
            bl.conv("hfc.proj_mid", d2, d1, 1, 1, false, &[(g / 2, g / 2)]);
            bl.zero("hfc.upsample_deep");
            bl.zero("hfc.upsample_mid");
            bl.zero("hfc.sum");
        }
    }

    // Head.
    let hc = cfg.head_config();
    let c = hc.channels as u64;
    let rc = (hc.eg_ratio * hc.channels) as u64;
    let out = (g, g);
    bl.conv("head.reduce", cfg.fused_channels() as u64, c, 1, 1, true, &[out]);
    for (branch, ch) in [("cls", 1u64), ("offset", 2), ("size", 2)] {
        for blk in 0..hc.blocks {
            let base = format!("head.{}.block{}", branch, blk);
            bl.conv(&format!("{}.dw1", base), c, c, 7, c, true, &[out]);
            bl.bn(&format!("{}.bn1", base), c);
            bl.conv(&format!("{}.gate", base), c, rc, 1, 1, true, &[out]);
            bl.conv(&format!("{}.value", base), c, rc, 1, 1, true, &[out]);
            bl.conv(&format!("{}.dw2", base), rc, rc, 7, rc, true, &[out]);
            bl.conv(&format!("{}.proj", base), rc, c, 1, 1, true, &[out]);
            bl.bn(&format!("{}.bn2", base), c);
        }
        bl.conv(&format!("head.{}.out", branch), c, ch, 1, 1, true, &[out]);
    }

    Ok(CostReport { rows: bl.rows })
}
