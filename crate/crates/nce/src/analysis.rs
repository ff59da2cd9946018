//! Run diagnostics: Kendall rank correlation over recorded search-parameter
//! gradients, per-layer activation statistics and SQNR, and trade-off tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantize::sqnr_db;
use crate::supernet::{stack_images, SuperNet};
use crate::tape::{BnMode, Tape};
use crate::tensor::{population_stdev, Tensor};

/// Tie-corrected (tau-b) Kendall rank correlation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tau {
    pub value: f64,
    /// All y values tied (or all x tied): tau is undefined and reported as 0.
    pub degenerate: bool,
}

pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<Tau> {
    if x.len() != y.len() {
        return Err(Error::Usage("kendall_tau: length mismatch".into()));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::Usage("kendall_tau: need at least 2 points".into()));
    }
    let mut s = 0i64; // sum of sign(dx)*sign(dy)
    let mut tied_x = 0i64;
    let mut tied_y = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let sx = sign(x[j] - x[i]);
            let sy = sign(y[j] - y[i]);
            if sx == 0 {
                tied_x += 1;
            }
            if sy == 0 {
                tied_y += 1;
            }
            s += (sx * sy) as i64;
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    if tied_x == n0 || tied_y == n0 {
        return Ok(Tau { value: 0.0, degenerate: true });
    }
    let denom = (((n0 - tied_x) as f64) * ((n0 - tied_y) as f64)).sqrt();
    Ok(Tau { value: s as f64 / denom, degenerate: false })
}

fn sign(v: f64) -> i32 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Per-epoch averaged gradients of the architecture loss w.r.t. every
/// searchable group's parameters, recorded by the search loop. The
/// cross-entropy-only and total (cross-entropy + constraint) gradients are
/// both kept.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GradientTrace {
    pub epochs: Vec<EpochTrace>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub groups: Vec<GroupTrace>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupTrace {
    pub group: usize,
    pub ce: Vec<f32>,
    pub total: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradSource {
    CeOnly,
    Total,
}

impl GradientTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,group,candidate,ce_grad,total_grad\n");
        for e in &self.epochs {
            for g in &e.groups {
                for (i, (&ce, &tot)) in g.ce.iter().zip(&g.total).enumerate() {
                    out.push_str(&format!("{},{},{},{},{}\n", e.epoch, g.group, i, ce, tot));
                }
            }
        }
        out
    }
}

/// Mean-over-epochs Kendall tau between candidate index and the NEGATED
/// recorded gradient: consistent negative gradients on larger candidates
/// (which grow those parameters under gradient descent) map to +1. Epochs
/// where the gradient vector is entirely tied contribute 0. Returns `None`
/// when the group never appears in the trace.
pub fn preference_score(trace: &GradientTrace, group: usize, source: GradSource) -> Option<f64> {
    let mut taus = Vec::new();
    for e in &trace.epochs {
        let Some(g) = e.groups.iter().find(|g| g.group == group) else {
            continue;
        };
        let grads = match source {
            GradSource::CeOnly => &g.ce,
            GradSource::Total => &g.total,
        };
        if grads.len() < 2 {
            continue;
        }
        let x: Vec<f64> = (0..grads.len()).map(|i| i as f64).collect();
        let y: Vec<f64> = grads.iter().map(|&v| -v as f64).collect();
        taus.push(kendall_tau(&x, &y).expect("lengths match by construction").value);
    }
    if taus.is_empty() {
        None
    } else {
        Some(taus.iter().sum::<f64>() / taus.len() as f64)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KendallReport {
    /// (group index, mean tau) rows.
    pub per_group: Vec<(usize, f64)>,
    pub mean: f64,
    pub quantized: bool,
}

impl KendallReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,mean_tau,quantized\n");
        for (g, t) in &self.per_group {
            out.push_str(&format!("{},{},{}\n", g, t, self.quantized));
        }
        out.push_str(&format!("MEAN,{},{}\n", self.mean, self.quantized));
        out
    }
}

pub fn kendall_report(
    trace: &GradientTrace,
    groups: &[usize],
    source: GradSource,
    quantized: bool,
) -> KendallReport {
    let per_group: Vec<(usize, f64)> = groups
        .iter()
        .filter_map(|&g| preference_score(trace, g, source).map(|t| (g, t)))
        .collect();
    let mean = if per_group.is_empty() {
        0.0
    } else {
        per_group.iter().map(|(_, t)| *t).sum::<f64>() / per_group.len() as f64
    };
    KendallReport { per_group, mean, quantized }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSignal {
    pub id: String,
    /// Population STDEV over all probes of the activation entering the layer
    /// along the quantized path (i.e. the activation quantizer's output).
    pub stdev_q: f32,
    /// Same statistic along the full-precision path (quantizers bypassed).
    pub stdev_fp: f32,
    /// SQNR between the two paths; +inf when the paths coincide.
    pub sqnr_db: f64,
}

pub fn signal_csv(rows: &[LayerSignal]) -> String {
    let mut out = String::from("layer,stdev_fp,stdev_q,sqnr_db\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.id, r.stdev_fp, r.stdev_q, r.sqnr_db));
    }
    out
}

/// Per-layer activation statistics of a trained network: STDEV of the
/// activation each quantized convolution consumes, plus SQNR between the
/// full-precision path and the quantized path, computed with identical
/// weights and inputs. Batch norm pins its own outputs near unit scale, so
/// dynamic-range effects are measured where the quantizer acts instead.
pub fn layer_signal_profile(
    net: &mut SuperNet,
    images: &[Tensor],
    batch_size: usize,
) -> Result<Vec<LayerSignal>> {
    if images.is_empty() {
        return Err(Error::Input("signal profile needs at least one probe image".into()));
    }
    let sample = net.argmax_sample();
    let mut pooled_q: Vec<(String, Vec<f32>)> = Vec::new();
    let mut pooled_fp: Vec<(String, Vec<f32>)> = Vec::new();
    let mut i = 0;
    while i < images.len() {
        let end = (i + batch_size).min(images.len());
        let batch = stack_images(&images[i..end]);
        for (quant_on, pooled) in [(true, &mut pooled_q), (false, &mut pooled_fp)] {
            let mut tape = Tape::new();
            let mut collected = Vec::new();
            net.forward(&mut tape, &batch, &sample, BnMode::Eval, quant_on, Some(&mut collected))?;
            for (id, var) in collected {
                let data = &tape.value(var).data;
                match pooled.iter_mut().find(|(pid, _)| *pid == id) {
                    Some((_, buf)) => buf.extend_from_slice(data),
                    None => pooled.push((id, data.clone())),
                }
            }
        }
        i = end;
    }
    let mut rows = Vec::new();
    for ((id, q), (id_fp, fp)) in pooled_q.iter().zip(&pooled_fp) {
        debug_assert_eq!(id, id_fp);
        let sqnr = if q == fp { f64::INFINITY } else { sqnr_db(fp, q)? };
        rows.push(LayerSignal {
            id: id.clone(),
            stdev_q: population_stdev(q),
            stdev_fp: population_stdev(fp),
            sqnr_db: sqnr,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub params: f64,
    pub flops: f64,
    pub mean_accuracy: f64,
    pub stddev_accuracy: f64,
}

/// Accuracy-vs-cost table, sorted by PARAMs then FLOPs.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        a.params
            .partial_cmp(&b.params)
            .unwrap()
            .then(a.flops.partial_cmp(&b.flops).unwrap())
    });
    let mut out = String::from("label,params,flops,mean_accuracy,stddev_accuracy\n");
    for r in sorted {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.label, r.params, r.flops, r.mean_accuracy, r.stddev_accuracy
        ));
    }
    out
}

pub fn mean_and_stddev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
