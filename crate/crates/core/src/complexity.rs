//! Closed-form parameter and FLOP accounting for any model configuration,
//! mirroring the layer layout `Model::build` produces. Counts are for one
//! inference forward pass on a single segment.
//!
//! Convention (also carried in every report): 1 multiply-accumulate = 2
//! FLOPs for dense ops (conv, linear, norm affine); conv and linear bias
//! adds are excluded; exp, softplus, and sigmoid cost 4 FLOPs, silu 5,
//! relu 1; layer norm costs 8 FLOPs per element; the state scan is counted
//! explicitly per step (discretization exp + 2 mul per state, recurrence
//! 2N mul + N add, readout N mul, skip 2); comparisons (max pooling)
//! are tallied in their own column, not in FLOPs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::Result;

pub const CONVENTION: &str = "1 MAC = 2 FLOPs (dense ops); bias adds excluded; \
exp/softplus/sigmoid 4 FLOPs, silu 5, relu 1, layer norm 8/elem, batch norm 1 MAC/elem; \
scan counted per step and state; comparisons tallied separately";

/// Externally quoted totals for the reference configuration of this
/// architecture; printed beside computed totals for comparison only, since
/// the hyperparameters that would close the gap are not published.
pub const REFERENCE_PARAMS: u64 = 73_500;
pub const REFERENCE_FLOPS: u64 = 38_300_000;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    /// Dense multiply-accumulate count (conv/linear/norm affine only).
    pub macs: u64,
    pub flops: u64,
    pub comparisons: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub input_len: usize,
    pub rows: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
    pub total_flops: u64,
    pub total_comparisons: u64,
    pub convention: String,
}

struct Counter {
    rows: Vec<LayerCost>,
}

impl Counter {
    fn row(
        &mut self,
        name: impl Into<String>,
        params: u64,
        macs: u64,
        extra_flops: u64,
        cmps: u64,
    ) {
        self.rows.push(LayerCost {
            name: name.into(),
            params,
            macs,
            flops: 2 * macs + extra_flops,
            comparisons: cmps,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: String,
        l: u64,
        c_in: u64,
        c_out: u64,
        k: u64,
        groups: u64,
        bias: bool,
    ) {
        let params = (c_in / groups) * c_out * k + if bias { c_out } else { 0 };
        let macs = l * c_out * (c_in / groups) * k;
        self.row(name, params, macs, 0, 0);
    }

    fn bn(&mut self, name: String, l: u64, c: u64) {
        // inference: one scale and one shift per element
        self.row(name, 2 * c, l * c, 0, 0);
    }

    fn linear(&mut self, name: String, c_in: u64, c_out: u64) {
        self.row(name, c_in * c_out + c_out, c_in * c_out, 0, 0);
    }
}

/// Closed-form cost model for `config`; row names match the parameter name
/// prefixes a built model allocates, which is what makes the exact
/// cross-check against `Model::build` possible.
pub fn analyze(config: &ModelConfig) -> Result<ComplexityReport> {
    config.validate()?;
    let mut ct = Counter { rows: Vec::new() };
    let l = config.input_len as u64;
    let c = config.tcn_channels as u64;
    let k = config.tcn_kernel as u64;

    let mut c_in = 1u64;
    for i in 0..config.tcn_dilations.len() {
        ct.conv(format!("tcn{i}.conv1"), l, c_in, c, k, 1, true);
        ct.bn(format!("tcn{i}.bn1"), l, c);
        ct.conv(format!("tcn{i}.conv2"), l, c, c, k, 1, true);
        ct.bn(format!("tcn{i}.bn2"), l, c);
        ct.conv(format!("tcn{i}.skip"), l, c_in, c, 1, 1, true);
        ct.bn(format!("tcn{i}.bn_skip"), l, c);
        // relu after bn1, then residual add + relu at the join
        ct.row(format!("tcn{i}.act"), 0, 0, 3 * l * c, 0);
        c_in = c;
    }

    let lp = config.pooled_len() as u64;
    ct.row("pool", 0, 0, 0, lp * c * (config.pool_kernel as u64 - 1));

    let dims = config.mamba_dims();
    let (d, din, s, kc, r) = (
        dims.d_model as u64,
        dims.d_inner as u64,
        dims.d_state as u64,
        dims.d_conv as u64,
        dims.dt_rank as u64,
    );
    for i in 0..config.n_mamba_layers {
        ct.conv(format!("mamba{i}.ssm.in_proj"), lp, d, 2 * din, 1, 1, false);
        ct.conv(format!("mamba{i}.ssm.conv"), lp, din, din, kc, din, true);
        // silu after the depthwise conv
        ct.row(format!("mamba{i}.ssm.conv_act"), 0, 0, 5 * lp * din, 0);
        ct.conv(
            format!("mamba{i}.ssm.x_proj"),
            lp,
            din,
            r + 2 * s,
            1,
            1,
            false,
        );
        ct.conv(format!("mamba{i}.ssm.dt_proj"), lp, r, din, 1, 1, true);
        // softplus on the step sizes
        ct.row(format!("mamba{i}.ssm.dt_act"), 0, 0, 4 * lp * din, 0);
        // scan: params are the state matrix log and the skip vector;
        // per (t, channel): discretize s*(exp 4 + 2 mul), recurrence
        // s*(2 mul + 1 add), readout s mul, skip mul + add; plus the
        // once-per-forward A = -exp(A_log) materialization (exp + negate)
        let scan = lp * din * (s * (4 + 2) + s * 3 + s + 2) + din * s * 5;
        ct.row(format!("mamba{i}.ssm.scan"), din * s + din, 0, scan, 0);
        // gate: silu(z) then one product
        ct.row(format!("mamba{i}.ssm.gate"), 0, 0, 6 * lp * din, 0);
        ct.conv(format!("mamba{i}.ssm.out_proj"), lp, din, d, 1, 1, false);
        ct.row(format!("mamba{i}.ln1"), 2 * d, 0, 8 * lp * d, 0);
        ct.conv(format!("mamba{i}.ffn1"), lp, d, 4 * d, 3, 1, true);
        ct.conv(format!("mamba{i}.ffn2"), lp, 4 * d, d, 3, 1, true);
        ct.row(format!("mamba{i}.ln2"), 2 * d, 0, 8 * lp * d, 0);
        // relu between the ffn convs plus the two residual adds
        ct.row(format!("mamba{i}.act"), 0, 0, lp * 4 * d + 2 * lp * d, 0);
    }

    // mean branch: sum + divide per channel; max branch: comparisons
    ct.row("head.pool", 0, 0, lp * c + c, (lp - 1) * c);
    for i in 0..config.head_dims.len() - 1 {
        let (hin, hout) = (config.head_dims[i] as u64, config.head_dims[i + 1] as u64);
        ct.linear(format!("head.fc{}", i + 1), hin, hout);
        ct.bn(format!("head.bn{}", i + 1), 1, hout);
        ct.row(format!("head.act{}", i + 1), 0, 0, hout, 0);
    }
    let classes = *config.head_dims.last().unwrap() as u64;
    ct.row(
        "head.softmax",
        0,
        0,
        4 * classes + (classes - 1) + classes,
        0,
    );

    let rows = ct.rows;
    Ok(ComplexityReport {
        input_len: config.input_len,
        total_params: rows.iter().map(|r| r.params).sum(),
        total_macs: rows.iter().map(|r| r.macs).sum(),
        total_flops: rows.iter().map(|r| r.flops).sum(),
        total_comparisons: rows.iter().map(|r| r.comparisons).sum(),
        rows,
        convention: CONVENTION.into(),
    })
}

impl ComplexityReport {
    pub fn row(&self, name: &str) -> Option<&LayerCost> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Signed gaps against the externally quoted reference totals.
    pub fn reference_delta(&self) -> (i64, i64) {
        (
            self.total_params as i64 - REFERENCE_PARAMS as i64,
            self.total_flops as i64 - REFERENCE_FLOPS as i64,
        )
    }
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        writeln!(
            f,
            "{:<name_w$}  {:>10}  {:>12}  {:>12}  {:>11}",
            "layer", "params", "MACs", "FLOPs", "comparisons"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<name_w$}  {:>10}  {:>12}  {:>12}  {:>11}",
                r.name, r.params, r.macs, r.flops, r.comparisons
            )?;
        }
        writeln!(
            f,
            "{:<name_w$}  {:>10}  {:>12}  {:>12}  {:>11}",
            "total", self.total_params, self.total_macs, self.total_flops, self.total_comparisons
        )?;
        writeln!(f, "input length: {}", self.input_len)?;
        writeln!(f, "convention: {}", self.convention)?;
        let (dp, df) = self.reference_delta();
        writeln!(
            f,
            "reference totals: {REFERENCE_PARAMS} params / {REFERENCE_FLOPS} FLOPs \
             (computed {} / {}; delta {:+} / {:+}; informational, the reference \
             configuration's unstated widths account for the gap)",
            self.total_params, self.total_flops, dp, df
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    #[test]
    fn frozen_layer_formulas() {
        let report = analyze(&ModelConfig::default()).unwrap();
        let conv = report.row("tcn0.conv1").unwrap();
        assert_eq!(conv.params, 128, "1*32*3 + 32");
        assert_eq!(conv.macs, 172_800);
        assert_eq!(conv.flops, 345_600, "2*1800*32*1*3");
        assert_eq!(report.row("tcn0.bn1").unwrap().params, 64, "2*32");
        let fc = report.row("head.fc1").unwrap();
        assert_eq!(fc.params, 2080, "64*32 + 32");
        assert_eq!(fc.flops, 2 * 64 * 32);
        assert_eq!(
            report.row("pool").unwrap().comparisons,
            28_800,
            "900*32*(2-1)"
        );
    }

    #[test]
    fn totals_are_row_sums() {
        let r = analyze(&ModelConfig::default()).unwrap();
        assert_eq!(r.total_params, r.rows.iter().map(|x| x.params).sum::<u64>());
        assert_eq!(r.total_flops, r.rows.iter().map(|x| x.flops).sum::<u64>());
        assert_eq!(r.total_macs, r.rows.iter().map(|x| x.macs).sum::<u64>());
        assert_eq!(
            r.total_comparisons,
            r.rows.iter().map(|x| x.comparisons).sum::<u64>()
        );
    }

    fn grid() -> Vec<ModelConfig> {
        let mut configs = vec![ModelConfig::default()];
        let narrow = |channels: usize,
                      dilations: Vec<usize>,
                      d_state: usize,
                      expand: usize,
                      n_layers: usize,
                      head_mid: usize,
                      input_len: usize| {
            ModelConfig {
                input_len,
                tcn_channels: channels,
                tcn_dilations: dilations,
                d_model: channels,
                d_state,
                expand,
                n_mamba_layers: n_layers,
                head_dims: vec![2 * channels, head_mid, 2],
                ..ModelConfig::default()
            }
        };
        configs.push(narrow(4, vec![1], 2, 1, 1, 4, 16));
        configs.push(narrow(4, vec![1, 2], 2, 2, 1, 8, 32));
        configs.push(narrow(8, vec![1, 2, 4], 4, 2, 1, 16, 64));
        configs.push(narrow(8, vec![1, 2, 4, 8], 4, 2, 2, 16, 64));
        configs.push(narrow(16, vec![1, 2], 8, 2, 1, 32, 128));
        configs.push(narrow(16, vec![1, 2, 4], 16, 2, 2, 8, 256));
        configs.push(narrow(32, vec![1], 16, 1, 1, 32, 1800));
        configs.push(narrow(32, vec![1, 2, 4], 16, 2, 3, 64, 1800));
        configs.push(narrow(12, vec![1, 3], 6, 3, 1, 10, 120));
        configs.push(ModelConfig {
            dt_rank: Some(5),
            ..ModelConfig::default()
        });
        configs
    }

    #[test]
    fn param_totals_match_built_models_exactly() {
        for (i, config) in grid().iter().enumerate() {
            let report = analyze(config).unwrap();
            let model = Model::<f32>::build(config.clone(), 1).unwrap();
            assert_eq!(
                report.total_params,
                model.num_trainable_params(),
                "config {i}: closed form vs enumerated"
            );
        }
    }

    #[test]
    fn params_grow_with_every_width_knob() {
        let base = analyze(&ModelConfig::default()).unwrap().total_params;
        let mut wider = ModelConfig {
            d_state: 32,
            ..ModelConfig::default()
        };
        assert!(analyze(&wider).unwrap().total_params > base, "d_state");
        wider = ModelConfig {
            expand: 3,
            ..ModelConfig::default()
        };
        assert!(analyze(&wider).unwrap().total_params > base, "expand");
        wider = ModelConfig {
            n_mamba_layers: 2,
            ..ModelConfig::default()
        };
        assert!(analyze(&wider).unwrap().total_params > base, "layers");
        wider = ModelConfig {
            tcn_dilations: vec![1, 2, 4, 8],
            ..ModelConfig::default()
        };
        assert!(analyze(&wider).unwrap().total_params > base, "blocks");
        wider = ModelConfig {
            tcn_channels: 64,
            d_model: 64,
            head_dims: vec![128, 32, 2],
            ..ModelConfig::default()
        };
        assert!(analyze(&wider).unwrap().total_params > base, "channels");
    }

    #[test]
    fn conv_and_scan_flops_scale_with_input_length() {
        let short = analyze(&ModelConfig::default()).unwrap();
        let long = analyze(&ModelConfig {
            input_len: 3600,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_eq!(
            short.total_params, long.total_params,
            "length never adds parameters"
        );
        for name in [
            "tcn0.conv1",
            "tcn2.conv2",
            "mamba0.ssm.in_proj",
            "mamba0.ffn1",
        ] {
            assert_eq!(
                2 * short.row(name).unwrap().flops,
                long.row(name).unwrap().flops,
                "{name}"
            );
        }
        // the scan has a once-per-forward term, so compare after removing it
        let dims = ModelConfig::default().mamba_dims();
        let fixed = (dims.d_inner * dims.d_state * 5) as u64;
        let s1 = short.row("mamba0.ssm.scan").unwrap().flops - fixed;
        let s2 = long.row("mamba0.ssm.scan").unwrap().flops - fixed;
        assert_eq!(2 * s1, s2);
    }

    #[test]
    fn report_renders_and_serializes() {
        let r = analyze(&ModelConfig::default()).unwrap();
        let text = r.to_string();
        assert!(text.contains("total"), "{text}");
        assert!(text.contains("reference totals"), "{text}");
        assert!(text.contains("convention"), "{text}");
        let json = serde_json::to_string(&r).unwrap();
        let back: ComplexityReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
