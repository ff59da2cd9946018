//! FLOPs/PARAMs accounting and the hardware-constraint loss.
//!
//! FLOPs are reported as multiply-accumulate (MAC) counts: one MAC per
//! weight-input product of a convolution or linear layer. Conventions for
//! "FLOPs" differ by 2x across the literature; the MAC convention is what
//! reproduces the reference 40.81M figure for ResNet20-CIFAR.

use serde::{Deserialize, Serialize};

use crate::arch::{ArchBody, ArchDesc};
use crate::error::{Error, Result};
use crate::optim::ParamId;
use crate::supernet::{SuperNet, WidthSource};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostBudget {
    pub flop_target: f64,
    pub param_target: f64,
    pub lambda_flop: f64,
    pub lambda_param: f64,
    /// Fractional half-width of the zero-loss band around each target.
    pub tolerance_band: f64,
}

impl CostBudget {
    pub fn validate(&self) -> Result<()> {
        if self.flop_target <= 0.0 || self.param_target <= 0.0 {
            return Err(Error::Config("cost targets must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.tolerance_band) {
            return Err(Error::Config("tolerance_band must be in [0, 1)".into()));
        }
        if self.lambda_flop < 0.0 || self.lambda_param < 0.0 {
            return Err(Error::Config("lambda coefficients must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub id: String,
    pub macs: f64,
    pub params: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
    /// true for exact per-architecture counts, false for softmax-expected
    /// supernet counts.
    pub exact: bool,
}

impl CostReport {
    pub fn total_macs(&self) -> f64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    pub fn total_params(&self) -> f64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn to_csv(&self) -> String {
        let marker = if self.exact { "exact" } else { "expected" };
        let mut out = String::from("layer,macs,params,marker\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.id, e.macs, e.params, marker));
        }
        out.push_str(&format!(
            "TOTAL,{},{},{}\n",
            self.total_macs(),
            self.total_params(),
            marker
        ));
        out
    }
}

/// Exact per-layer MACs/PARAMs of a concrete architecture at the given
/// input resolution. Batch-norm affine parameters count toward PARAMs;
/// pooling layers carry no cost.
pub fn exact_cost(arch: &ArchDesc, input_size: usize) -> Result<CostReport> {
    let mut entries = Vec::new();
    match &arch.body {
        ArchBody::Resnet(body) => {
            let mut size = input_size;
            for l in arch.layers() {
                match l.kind.as_str() {
                    "conv" => {
                        // conv1 and shortcut apply the block stride at the
                        // block's input resolution; the flat walk tracks the
                        // current size and shrinks it when conv1 strides.
                        let out_size = if l.id.ends_with("conv2") {
                            size
                        } else {
                            // stem, conv1, shortcut all read the running size
                            let s = if l.id.ends_with("shortcut") {
                                // shortcut runs alongside conv1 at the size
                                // conv1 already consumed
                                size
                            } else {
                                size / l.stride
                            };
                            if !l.id.ends_with("shortcut") {
                                size = s;
                            }
                            s
                        };
                        let macs = (l.out_channels * l.in_channels * l.kernel.0 * l.kernel.1) as f64
                            * (out_size * out_size) as f64;
                        let mut params =
                            (l.out_channels * l.in_channels * l.kernel.0 * l.kernel.1) as f64;
                        if l.bn {
                            params += 2.0 * l.out_channels as f64;
                        }
                        entries.push(CostEntry { id: l.id.clone(), macs, params });
                    }
                    "linear" => {
                        let macs = (l.in_channels * l.out_channels) as f64;
                        let params = (l.in_channels * l.out_channels + l.out_channels) as f64;
                        entries.push(CostEntry { id: l.id.clone(), macs, params });
                    }
                    other => {
                        return Err(Error::Config(format!("unknown layer type {other} in {}", l.id)))
                    }
                }
            }
            let _ = body;
        }
        ArchBody::Vgg(_) => {
            let mut size = input_size;
            for l in arch.layers() {
                match l.kind.as_str() {
                    "conv" => {
                        let macs = (l.out_channels * l.in_channels * l.kernel.0 * l.kernel.1) as f64
                            * (size * size) as f64;
                        let mut params =
                            (l.out_channels * l.in_channels * l.kernel.0 * l.kernel.1) as f64;
                        if l.bn {
                            params += 2.0 * l.out_channels as f64;
                        }
                        entries.push(CostEntry { id: l.id.clone(), macs, params });
                    }
                    "maxpool" => {
                        size /= 2;
                        entries.push(CostEntry { id: l.id.clone(), macs: 0.0, params: 0.0 });
                    }
                    "linear" => {
                        let macs = (l.in_channels * l.out_channels) as f64;
                        let params = (l.in_channels * l.out_channels + l.out_channels) as f64;
                        entries.push(CostEntry { id: l.id.clone(), macs, params });
                    }
                    other => {
                        return Err(Error::Config(format!("unknown layer type {other} in {}", l.id)))
                    }
                }
            }
        }
    }
    Ok(CostReport { entries, exact: true })
}

/// Softmax-expected channel count of every group.
pub fn expected_counts(net: &SuperNet) -> Vec<f64> {
    net.groups
        .iter()
        .map(|g| {
            let w = g.softmax(&net.params);
            w.iter()
                .zip(&g.counts)
                .map(|(&p, &c)| p as f64 * c as f64)
                .sum()
        })
        .collect()
}

fn width(src: WidthSource, expected: &[f64]) -> f64 {
    match src {
        WidthSource::Fixed(w) => w as f64,
        WidthSource::Group(g) => expected[g],
    }
}

/// Expected supernet cost: per layer, producer and consumer channel counts
/// are replaced by their softmax expectations (independence across adjacent
/// layers). Exact when every softmax is one-hot.
pub fn expected_cost(net: &SuperNet) -> CostReport {
    let expected = expected_counts(net);
    let entries = net
        .cost_units()
        .iter()
        .map(|u| {
            let ein = width(u.in_source, &expected);
            let eout = width(u.out_source, &expected);
            let macs = ein * eout * u.kernel as f64 * u.out_area as f64;
            let mut params = ein * eout * u.kernel as f64;
            if u.bn {
                params += 2.0 * eout;
            }
            if u.id == "classifier" {
                params += eout; // bias
            }
            CostEntry { id: u.id.clone(), macs, params }
        })
        .collect();
    CostReport { entries, exact: false }
}

fn hinge(ratio: f64, band: f64) -> (f64, f64) {
    if ratio > 1.0 + band {
        (ratio - (1.0 + band), 1.0)
    } else if ratio < 1.0 - band {
        ((1.0 - band) - ratio, -1.0)
    } else {
        (0.0, 0.0)
    }
}

/// Tolerance-band hinge on the expected/target cost ratios:
/// loss = lambda_flop * hinge(macs/flop_target) + lambda_param * hinge(params/param_target).
pub fn cost_loss(report: &CostReport, budget: &CostBudget) -> f64 {
    let (lf, _) = hinge(report.total_macs() / budget.flop_target, budget.tolerance_band);
    let (lp, _) = hinge(report.total_params() / budget.param_target, budget.tolerance_band);
    budget.lambda_flop * lf + budget.lambda_param * lp
}

/// Constraint loss plus its analytic gradient w.r.t. every searchable
/// group's alphas, via the softmax Jacobian of the expected counts.
pub fn cost_loss_with_alpha_grads(
    net: &SuperNet,
    budget: &CostBudget,
) -> (f64, Vec<(ParamId, Vec<f32>)>) {
    let expected = expected_counts(net);
    let units = net.cost_units();

    let mut macs = 0.0f64;
    let mut params = 0.0f64;
    // d(total)/d(E[count_g]) accumulated per group
    let mut dmacs = vec![0.0f64; net.groups.len()];
    let mut dparams = vec![0.0f64; net.groups.len()];
    for u in &units {
        let ein = width(u.in_source, &expected);
        let eout = width(u.out_source, &expected);
        let k = u.kernel as f64;
        let area = u.out_area as f64;
        macs += ein * eout * k * area;
        params += ein * eout * k + if u.bn { 2.0 * eout } else { 0.0 };
        if u.id == "classifier" {
            params += eout;
        }
        if let WidthSource::Group(g) = u.in_source {
            dmacs[g] += eout * k * area;
            dparams[g] += eout * k;
        }
        if let WidthSource::Group(g) = u.out_source {
            dmacs[g] += ein * k * area;
            dparams[g] += ein * k + if u.bn { 2.0 } else { 0.0 };
        }
    }

    let (lf, df) = hinge(macs / budget.flop_target, budget.tolerance_band);
    let (lp, dp) = hinge(params / budget.param_target, budget.tolerance_band);
    let loss = budget.lambda_flop * lf + budget.lambda_param * lp;
    let macs_coeff = budget.lambda_flop * df / budget.flop_target;
    let params_coeff = budget.lambda_param * dp / budget.param_target;

    let mut grads = Vec::new();
    for (g, group) in net.groups.iter().enumerate() {
        if !group.searchable {
            continue;
        }
        let de = macs_coeff * dmacs[g] + params_coeff * dparams[g];
        let w = group.softmax(&net.params);
        let eg = expected[g];
        let grad: Vec<f32> = w
            .iter()
            .zip(&group.counts)
            .map(|(&p, &c)| (de * p as f64 * (c as f64 - eg)) as f32)
            .collect();
        grads.push((group.alpha, grad));
    }
    (loss, grads)
}

/// Budget anchored at an architecture's exact cost with given coefficients.
pub fn budget_from_arch(
    arch: &ArchDesc,
    lambda_flop: f64,
    lambda_param: f64,
    tolerance_band: f64,
) -> Result<CostBudget> {
    let report = exact_cost(arch, arch.input_size)?;
    Ok(CostBudget {
        flop_target: report.total_macs(),
        param_target: report.total_params(),
        lambda_flop,
        lambda_param,
        tolerance_band,
    })
}
