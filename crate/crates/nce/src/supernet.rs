//! The searchable supernet: a ResNet-style layer graph whose convolutions
//! carry channel candidate sets, weight banks sized to the current maximum
//! candidate, and fake quantizers. A fixed network is the same structure
//! with singleton candidate sets.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arch::{ArchBody, ArchDesc, BlockDesc, ResnetBody, StageDesc};
use crate::error::{Error, Result};
use crate::optim::{bind_bank_slice, bind_full, bind_prefix, Binding, ParamId, ParamStore};
use crate::quantize::QuantConfig;
use crate::searchspace::{sample_candidates, ChannelCandidateSet, ExpansionDecision, SampledSubset};
use crate::tape::{BnMode, Tape, Var};
use crate::tensor::{population_stdev, Tensor};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;

/// Resolved quantization knobs applied during forward passes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantSetting {
    pub weight_bits: Option<u32>,
    pub act_bits: Option<u32>,
    pub clip_init: f32,
    pub reg: f32,
}

impl QuantSetting {
    pub fn from_config(c: &QuantConfig) -> Self {
        QuantSetting {
            weight_bits: c.weight_bits.fixed(),
            act_bits: c.activation_bits.fixed(),
            clip_init: c.pact_clip_init,
            reg: c.pact_reg_coeff,
        }
    }

    pub fn full_precision() -> Self {
        QuantSetting { weight_bits: None, act_bits: None, clip_init: 8.0, reg: 0.0 }
    }

    pub fn any_quantized(&self) -> bool {
        self.weight_bits.is_some() || self.act_bits.is_some()
    }
}

/// One convolution with a weight bank sliced by sampled channel counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConv {
    pub id: String,
    pub weight: ParamId,
    pub out_max: usize,
    pub in_max: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub act_clip: Option<ParamId>,
    pub quant_excluded: bool,
    pub out_group: usize,
    /// `None` means the input width is fixed (images or the stem output).
    pub in_group: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Block {
    pub conv1: SearchConv,
    pub conv2: SearchConv,
    pub shortcut: Option<SearchConv>,
    pub stride: usize,
    pub mid_group: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage {
    pub group: usize,
    pub stride: usize,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuperNet {
    pub params: ParamStore,
    pub groups: Vec<ChannelCandidateSet>,
    pub stem: SearchConv,
    pub stages: Vec<Stage>,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
    pub classifier_in_group: usize,
    pub input_channels: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub quant: QuantSetting,
    pub seed_name: String,
}

/// Per-group sampled candidate subsets for one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMap(pub Vec<SampledSubset>);

impl SampleMap {
    pub fn subset(&self, group: usize) -> &SampledSubset {
        &self.0[group]
    }
}

struct Builder<'r, R: Rng> {
    params: ParamStore,
    groups: Vec<ChannelCandidateSet>,
    rng: &'r mut R,
    quant: QuantSetting,
}

impl<R: Rng> Builder<'_, R> {
    fn add_group(&mut self, counts: Vec<usize>, cap: usize, expand_step: usize, searchable: bool) -> usize {
        let n = counts.len();
        let alpha = self.params.add(Tensor::from_vec(vec![0.0; n]), searchable);
        self.groups.push(ChannelCandidateSet { counts, alpha, cap, expand_step, searchable });
        self.groups.len() - 1
    }

    fn kaiming(&mut self, out: usize, inp: usize, kh: usize, kw: usize) -> Tensor {
        let fan_in = (inp * kh * kw) as f32;
        let std = (2.0 / fan_in).sqrt();
        let dist = Normal::new(0.0f32, std).unwrap();
        let data: Vec<f32> = (0..out * inp * kh * kw).map(|_| dist.sample(self.rng)).collect();
        Tensor::new(vec![out, inp, kh, kw], data)
    }

    #[allow(clippy::too_many_arguments)]
    fn add_conv(
        &mut self,
        id: &str,
        out_max: usize,
        in_max: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        quant_excluded: bool,
        out_group: usize,
        in_group: Option<usize>,
    ) -> SearchConv {
        let weight = {
            let t = self.kaiming(out_max, in_max, kh, kw);
            self.params.add(t, true)
        };
        let gamma = self.params.add(Tensor::from_vec(vec![1.0; out_max]), true);
        let beta = self.params.add(Tensor::from_vec(vec![0.0; out_max]), true);
        let act_clip = if !quant_excluded && self.quant.act_bits.is_some() {
            Some(self.params.add(Tensor::scalar(self.quant.clip_init), true))
        } else {
            None
        };
        SearchConv {
            id: id.to_string(),
            weight,
            out_max,
            in_max,
            kh,
            kw,
            stride,
            padding,
            gamma,
            beta,
            running_mean: vec![0.0; out_max],
            running_var: vec![1.0; out_max],
            act_clip,
            quant_excluded,
            out_group,
            in_group,
        }
    }
}

impl SuperNet {
    /// Build a searchable supernet from a ResNet-style seed architecture.
    /// Every stage width and every block mid width gets its own candidate
    /// set; block-output convolutions and shortcuts within a stage share the
    /// stage's set (residual additions then always align).
    pub fn searchable<R: Rng>(
        seed: &ArchDesc,
        quant: QuantSetting,
        n0: usize,
        cap: usize,
        quant_overrides: &[String],
        rng: &mut R,
    ) -> Result<Self> {
        let ArchBody::Resnet(body) = &seed.body else {
            return Err(Error::Config("searchable supernets support ResNet-style seeds only".into()));
        };
        Self::build(seed, body, quant, Some((n0, cap)), quant_overrides, rng)
    }

    /// Build a fixed (singleton-candidate) network from an architecture.
    pub fn fixed<R: Rng>(arch: &ArchDesc, quant: QuantSetting, rng: &mut R) -> Result<Self> {
        let ArchBody::Resnet(body) = &arch.body else {
            return Err(Error::Config("only ResNet-style architectures are instantiable".into()));
        };
        Self::build(arch, body, quant, None, &[], rng)
    }

    fn build<R: Rng>(
        seed: &ArchDesc,
        body: &ResnetBody,
        quant: QuantSetting,
        search: Option<(usize, usize)>,
        quant_overrides: &[String],
        rng: &mut R,
    ) -> Result<Self> {
        let mut b = Builder { params: ParamStore::default(), groups: Vec::new(), rng, quant: quant.clone() };
        let make_group = |b: &mut Builder<R>, width: usize| -> usize {
            match search {
                Some((n0, cap)) => {
                    let counts = ChannelCandidateSet::initial_counts(width, n0);
                    let step = (width as f64 / n0 as f64).round().max(1.0) as usize;
                    b.add_group(counts, cap, step, true)
                }
                None => b.add_group(vec![width], 1, 0, false),
            }
        };

        let stem_group = b.add_group(vec![body.stem], 1, 0, false);
        let stem = b.add_conv(
            "stem.conv",
            body.stem,
            seed.input_channels,
            3,
            3,
            1,
            1,
            true,
            stem_group,
            None,
        );

        let excluded = |id: &str| quant_overrides.iter().any(|e| e == id);
        let mut stages = Vec::new();
        let mut prev_group = stem_group;
        for (s, stage) in body.stages.iter().enumerate() {
            let group = make_group(&mut b, stage.width);
            let out_max = b.groups[group].max_count();
            let mut blocks = Vec::new();
            for (bi, block) in stage.blocks.iter().enumerate() {
                let stride = if bi == 0 { stage.stride } else { 1 };
                let (in_group, in_max) = if bi == 0 {
                    (prev_group, b.groups[prev_group].max_count())
                } else {
                    (group, out_max)
                };
                let mid_group = make_group(&mut b, block.mid);
                let mid_max = b.groups[mid_group].max_count();
                let id1 = format!("stage{s}.block{bi}.conv1");
                let id2 = format!("stage{s}.block{bi}.conv2");
                let conv1 = b.add_conv(
                    &id1,
                    mid_max,
                    in_max,
                    3,
                    3,
                    stride,
                    1,
                    excluded(&id1),
                    mid_group,
                    Some(in_group),
                );
                let conv2 = b.add_conv(
                    &id2,
                    out_max,
                    mid_max,
                    3,
                    3,
                    1,
                    1,
                    excluded(&id2),
                    group,
                    Some(mid_group),
                );
                let shortcut = if body.has_projection(s, bi) {
                    Some(b.add_conv(
                        &format!("stage{s}.block{bi}.shortcut"),
                        out_max,
                        in_max,
                        1,
                        1,
                        stride,
                        0,
                        true,
                        group,
                        Some(in_group),
                    ))
                } else {
                    None
                };
                blocks.push(Block { conv1, conv2, shortcut, stride, mid_group });
            }
            stages.push(Stage { group, stride: stage.stride, blocks });
            prev_group = group;
        }

        let cls_in_max = b.groups[prev_group].max_count();
        let cls_std = (1.0 / cls_in_max as f32).sqrt();
        let dist = Normal::new(0.0f32, cls_std).unwrap();
        let cls_data: Vec<f32> = (0..seed.num_classes * cls_in_max)
            .map(|_| dist.sample(b.rng))
            .collect();
        let classifier_w = b
            .params
            .add(Tensor::new(vec![seed.num_classes, cls_in_max], cls_data), true);
        let classifier_b = b.params.add(Tensor::from_vec(vec![0.0; seed.num_classes]), true);

        Ok(SuperNet {
            params: b.params,
            groups: b.groups,
            stem,
            stages,
            classifier_w,
            classifier_b,
            classifier_in_group: prev_group,
            input_channels: seed.input_channels,
            input_size: seed.input_size,
            num_classes: seed.num_classes,
            quant,
            seed_name: seed.name.clone(),
        })
    }

    pub fn weight_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        let mut push_conv = |c: &SearchConv| {
            ids.push(c.weight);
            ids.push(c.gamma);
            ids.push(c.beta);
            if let Some(clip) = c.act_clip {
                ids.push(clip);
            }
        };
        push_conv(&self.stem);
        for stage in &self.stages {
            for block in &stage.blocks {
                push_conv(&block.conv1);
                push_conv(&block.conv2);
                if let Some(sc) = &block.shortcut {
                    push_conv(sc);
                }
            }
        }
        ids.push(self.classifier_w);
        ids.push(self.classifier_b);
        ids
    }

    pub fn alpha_param_ids(&self) -> Vec<ParamId> {
        self.groups.iter().filter(|g| g.searchable).map(|g| g.alpha).collect()
    }

    pub fn searchable_group_indices(&self) -> Vec<usize> {
        (0..self.groups.len()).filter(|&g| self.groups[g].searchable).collect()
    }

    /// Draw a per-group candidate subset for one step. Non-searchable groups
    /// always yield their single candidate. The rng is consumed in group
    /// order, so the draw is seed-deterministic.
    pub fn sample_all<R: Rng>(&self, k: usize, uniform: bool, rng: &mut R) -> SampleMap {
        SampleMap(
            self.groups
                .iter()
                .map(|g| {
                    if g.searchable {
                        sample_candidates(g, &self.params, k, uniform, rng)
                    } else {
                        SampledSubset::singleton(0)
                    }
                })
                .collect(),
        )
    }

    /// Argmax sample: every group at its winner candidate.
    pub fn argmax_sample(&self) -> SampleMap {
        SampleMap(
            self.groups
                .iter()
                .map(|g| {
                    let w = g.softmax(&self.params);
                    let mut best = 0usize;
                    for i in 1..w.len() {
                        if w[i] > w[best] {
                            best = i;
                        }
                    }
                    SampledSubset::singleton(best)
                })
                .collect(),
        )
    }

    /// Forward pass. Returns the logits var and the parameter bindings to
    /// flush gradients back after `tape.backward`. When `collect` is given,
    /// the input activation entering every quantizable convolution (the
    /// tensor the activation quantizer acts on) is recorded under the
    /// consuming layer's id.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        input: &Tensor,
        sample: &SampleMap,
        mode: BnMode,
        quant_on: bool,
        mut collect: Option<&mut Vec<(String, Var)>>,
    ) -> Result<(Var, Vec<Binding>)> {
        let mut bindings = Vec::new();
        let x = tape.leaf(input.clone());
        let input_channels = self.input_channels;
        let num_classes = self.num_classes;
        let Self {
            params,
            groups,
            stem,
            stages,
            classifier_w,
            classifier_b,
            quant,
            ..
        } = self;

        let (h, mut in_ch) = conv_unit(
            tape, params, groups, stem, x, input_channels, sample, mode, quant_on, quant,
            &mut bindings, collect.as_deref_mut(),
        )?;
        let mut h = tape.relu(h);
        for stage in stages.iter_mut() {
            for block in stage.blocks.iter_mut() {
                let block_in = h;
                let block_in_ch = in_ch;
                let (h1, c1) = conv_unit(
                    tape, params, groups, &mut block.conv1, block_in, block_in_ch, sample, mode,
                    quant_on, quant, &mut bindings, collect.as_deref_mut(),
                )?;
                let h1 = tape.relu(h1);
                let (h2, c2) = conv_unit(
                    tape, params, groups, &mut block.conv2, h1, c1, sample, mode, quant_on, quant,
                    &mut bindings, collect.as_deref_mut(),
                )?;
                let sc = match block.shortcut.as_mut() {
                    Some(sconv) => {
                        let (s, cs) = conv_unit(
                            tape, params, groups, sconv, block_in, block_in_ch, sample, mode,
                            quant_on, quant, &mut bindings, None,
                        )?;
                        debug_assert_eq!(cs, c2, "shortcut/conv2 widths must align");
                        s
                    }
                    None => {
                        debug_assert_eq!(block_in_ch, c2, "identity shortcut width mismatch");
                        block_in
                    }
                };
                let sum = tape.add(h2, sc);
                h = tape.relu(sum);
                in_ch = c2;
            }
        }
        let pooled = tape.global_avg_pool(h);
        let w = bind_bank_slice(tape, params, *classifier_w, num_classes, in_ch, 1, 1, &mut bindings);
        let b = bind_full(tape, params, *classifier_b, &mut bindings);
        let logits = tape.linear(pooled, w, b);
        Ok((logits, bindings))
    }

    /// Top-1 accuracy in eval mode over mini-batches.
    pub fn evaluate(
        &mut self,
        images: &[Tensor],
        labels: &[usize],
        batch_size: usize,
        quant_on: bool,
    ) -> Result<f64> {
        let sample = self.argmax_sample();
        let mut correct = 0usize;
        let mut total = 0usize;
        let n = images.len();
        let mut i = 0;
        while i < n {
            let end = (i + batch_size).min(n);
            let batch = stack_images(&images[i..end]);
            let mut tape = Tape::new();
            let (logits, _) = self.forward(&mut tape, &batch, &sample, BnMode::Eval, quant_on, None)?;
            let lv = tape.value(logits);
            let (bn, k) = lv.dims2();
            for r in 0..bn {
                let row = &lv.data[r * k..(r + 1) * k];
                let mut best = 0usize;
                for c in 1..k {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                if best == labels[i + r] {
                    correct += 1;
                }
                total += 1;
            }
            i = end;
        }
        Ok(correct as f64 / total as f64)
    }

    /// Append a new count to group `g` (arithmetic grid), copy the last
    /// alpha, and grow every weight bank touching the group. Returns false
    /// without mutating anything when the cap is reached.
    pub fn expand_group<R: Rng>(&mut self, g: usize, rng: &mut R) -> bool {
        if self.groups[g].counts.len() >= self.groups[g].cap {
            return false;
        }
        let step = self.groups[g].expand_step.max(1);
        let new_count = self.groups[g].max_count() + step;
        self.groups[g].counts.push(new_count);

        // copy search parameter
        let alpha_id = self.groups[g].alpha;
        let p = self.params.get_mut(alpha_id);
        let last = *p.value.data.last().unwrap();
        p.value.data.push(last);
        p.value.shape = vec![p.value.data.len()];
        p.grad.push(0.0);
        if let Some(m) = p.momentum.as_mut() {
            m.push(0.0);
        }
        if let Some(m) = p.adam_m.as_mut() {
            m.push(0.0);
        }
        if let Some(v) = p.adam_v.as_mut() {
            v.push(0.0);
        }

        // grow weight banks on both sides of the group's edges
        let mut tasks: Vec<GrowTask> = Vec::new();
        {
            let mut visit = |c: &mut SearchConv| {
                let grow_out = c.out_group == g;
                let grow_in = c.in_group == Some(g);
                if !grow_out && !grow_in {
                    return;
                }
                let (old_out, old_in) = (c.out_max, c.in_max);
                if grow_out {
                    c.out_max = new_count;
                    c.running_mean.resize(new_count, 0.0);
                    c.running_var.resize(new_count, 1.0);
                }
                if grow_in {
                    c.in_max = new_count;
                }
                tasks.push(GrowTask {
                    weight: c.weight,
                    gamma_beta: if grow_out { Some((c.gamma, c.beta)) } else { None },
                    old_out,
                    old_in,
                    new_out: c.out_max,
                    new_in: c.in_max,
                    kernel: c.kh * c.kw,
                });
            };
            for stage in &mut self.stages {
                for block in &mut stage.blocks {
                    visit(&mut block.conv1);
                    visit(&mut block.conv2);
                    if let Some(sc) = &mut block.shortcut {
                        visit(sc);
                    }
                }
            }
        }
        if self.classifier_in_group == g {
            tasks.push(GrowTask {
                weight: self.classifier_w,
                gamma_beta: None,
                old_out: self.num_classes,
                old_in: self.groups[g].counts[self.groups[g].counts.len() - 2],
                new_out: self.num_classes,
                new_in: new_count,
                kernel: 1,
            });
        }
        for t in tasks {
            grow_bank(&mut self.params, &t, rng);
        }
        true
    }

    /// Run the per-epoch expansion rule over every searchable group.
    /// Returns (expanded, saturated) group index lists.
    pub fn expand_all_due<R: Rng>(&mut self, threshold: f32, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
        let mut expanded = Vec::new();
        let mut saturated = Vec::new();
        for g in 0..self.groups.len() {
            match self.groups[g].expansion_due(&self.params, threshold) {
                ExpansionDecision::Expand => {
                    if self.expand_group(g, rng) {
                        expanded.push(g);
                    }
                }
                ExpansionDecision::Saturated => saturated.push(g),
                ExpansionDecision::No => {}
            }
        }
        (expanded, saturated)
    }

    /// Winner-takes-all derivation of a standalone architecture.
    pub fn derive_architecture(&self) -> ArchDesc {
        let stages = self
            .stages
            .iter()
            .map(|st| StageDesc {
                width: self.groups[st.group].winner(&self.params),
                stride: st.stride,
                blocks: st
                    .blocks
                    .iter()
                    .map(|b| BlockDesc { mid: self.groups[b.mid_group].winner(&self.params) })
                    .collect(),
            })
            .collect();
        ArchDesc {
            name: format!("{}-derived", self.seed_name),
            input_channels: self.input_channels,
            input_size: self.input_size,
            num_classes: self.num_classes,
            body: ArchBody::Resnet(ResnetBody { stem: self.stem.out_max, stages }),
        }
    }

    /// Differentiable-cost units: every MAC-bearing layer with its channel
    /// width sources and output spatial area at the seed input resolution.
    pub fn cost_units(&self) -> Vec<CostUnit> {
        let mut units = Vec::new();
        let mut size = self.input_size;
        units.push(CostUnit {
            id: self.stem.id.clone(),
            in_source: WidthSource::Fixed(self.input_channels),
            out_source: WidthSource::Fixed(self.stem.out_max),
            kernel: 9,
            out_area: size * size,
            bn: true,
        });
        let mut prev: WidthSource = WidthSource::Fixed(self.stem.out_max);
        for stage in &self.stages {
            for (bi, block) in stage.blocks.iter().enumerate() {
                let stride = if bi == 0 { stage.stride } else { 1 };
                let in_src = if bi == 0 { prev } else { WidthSource::Group(stage.group) };
                let out_size = size / stride;
                units.push(CostUnit {
                    id: block.conv1.id.clone(),
                    in_source: in_src,
                    out_source: WidthSource::Group(block.mid_group),
                    kernel: 9,
                    out_area: out_size * out_size,
                    bn: true,
                });
                units.push(CostUnit {
                    id: block.conv2.id.clone(),
                    in_source: WidthSource::Group(block.mid_group),
                    out_source: WidthSource::Group(stage.group),
                    kernel: 9,
                    out_area: out_size * out_size,
                    bn: true,
                });
                if let Some(sc) = &block.shortcut {
                    units.push(CostUnit {
                        id: sc.id.clone(),
                        in_source: in_src,
                        out_source: WidthSource::Group(stage.group),
                        kernel: 1,
                        out_area: out_size * out_size,
                        bn: true,
                    });
                }
                size = out_size;
            }
            prev = WidthSource::Group(stage.group);
        }
        units.push(CostUnit {
            id: "classifier".into(),
            in_source: prev,
            out_source: WidthSource::Fixed(self.num_classes),
            kernel: 1,
            out_area: 1,
            bn: false,
        });
        units
    }

    /// Ids of the quantizable (non-excluded) convolution layers.
    pub fn quantized_layer_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for stage in &self.stages {
            for block in &stage.blocks {
                for c in [&block.conv1, &block.conv2] {
                    if !c.quant_excluded {
                        ids.push(c.id.clone());
                    }
                }
            }
        }
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WidthSource {
    Fixed(usize),
    Group(usize),
}

#[derive(Debug, Clone)]
pub struct CostUnit {
    pub id: String,
    pub in_source: WidthSource,
    pub out_source: WidthSource,
    pub kernel: usize,
    pub out_area: usize,
    pub bn: bool,
}

struct GrowTask {
    weight: ParamId,
    gamma_beta: Option<(ParamId, ParamId)>,
    old_out: usize,
    old_in: usize,
    new_out: usize,
    new_in: usize,
    kernel: usize,
}

/// Re-lay-out a weight bank (value, grad, optimizer state) for grown
/// extents. Existing entries keep their values; new entries get random
/// init scaled by the standard deviation of the existing bank.
fn grow_bank<R: Rng>(params: &mut ParamStore, t: &GrowTask, rng: &mut R) {
    let p = params.get_mut(t.weight);
    let std = population_stdev(&p.value.data).max(1e-4);
    let dist = Normal::new(0.0f32, std).unwrap();
    let relayout = |old: &[f32], mut fill: Box<dyn FnMut() -> f32>| -> Vec<f32> {
        let mut out = vec![0.0f32; t.new_out * t.new_in * t.kernel];
        for v in out.iter_mut() {
            *v = fill();
        }
        for co in 0..t.old_out {
            for ci in 0..t.old_in {
                let src = (co * t.old_in + ci) * t.kernel;
                let dst = (co * t.new_in + ci) * t.kernel;
                out[dst..dst + t.kernel].copy_from_slice(&old[src..src + t.kernel]);
            }
        }
        out
    };
    let fresh: Vec<f32> = (0..t.new_out * t.new_in * t.kernel)
        .map(|_| dist.sample(rng))
        .collect();
    let mut fresh_iter = fresh.into_iter();
    p.value.data = relayout(&p.value.data.clone(), Box::new(move || fresh_iter.next().unwrap()));
    if p.value.shape.len() == 4 {
        let (kh, kw) = (p.value.shape[2], p.value.shape[3]);
        p.value.shape = vec![t.new_out, t.new_in, kh, kw];
    } else {
        p.value.shape = vec![t.new_out, t.new_in];
    }
    p.grad = vec![0.0; p.value.data.len()];
    if let Some(m) = p.momentum.take() {
        p.momentum = Some(relayout(&m, Box::new(|| 0.0)));
    }
    if let Some(m) = p.adam_m.take() {
        p.adam_m = Some(relayout(&m, Box::new(|| 0.0)));
    }
    if let Some(v) = p.adam_v.take() {
        p.adam_v = Some(relayout(&v, Box::new(|| 0.0)));
    }
    if let Some((gamma, beta)) = t.gamma_beta {
        for (id, fill) in [(gamma, 1.0f32), (beta, 0.0f32)] {
            let p = params.get_mut(id);
            p.value.data.resize(t.new_out, fill);
            p.value.shape = vec![t.new_out];
            p.grad.resize(t.new_out, 0.0);
            if let Some(m) = p.momentum.as_mut() {
                m.resize(t.new_out, 0.0);
            }
            if let Some(m) = p.adam_m.as_mut() {
                m.resize(t.new_out, 0.0);
            }
            if let Some(v) = p.adam_v.as_mut() {
                v.resize(t.new_out, 0.0);
            }
        }
    }
}

/// Forward one convolution unit: quantize input and weight slice, convolve
/// once at the widest sampled count, mix candidate channel prefixes with
/// softmax weights via channel-wise interpolation, then batch-normalize.
/// Returns the output var and its channel count.
#[allow(clippy::too_many_arguments)]
fn conv_unit(
    tape: &mut Tape,
    params: &ParamStore,
    groups: &[ChannelCandidateSet],
    conv: &mut SearchConv,
    x: Var,
    in_ch: usize,
    sample: &SampleMap,
    mode: BnMode,
    quant_on: bool,
    quant: &QuantSetting,
    bindings: &mut Vec<Binding>,
    collect: Option<&mut Vec<(String, Var)>>,
) -> Result<(Var, usize)> {
    let group = &groups[conv.out_group];
    let subset = sample.subset(conv.out_group);
    let sel_counts: Vec<usize> = subset.indices.iter().map(|&i| group.counts[i]).collect();
    let mixed_c = *sel_counts.iter().max().unwrap();

    let quantize_here = quant_on && !conv.quant_excluded;
    let xin = if quantize_here {
        if let (Some(bits), Some(clip_id)) = (quant.act_bits, conv.act_clip) {
            let clip = bind_full(tape, params, clip_id, bindings);
            tape.quantize_activation(x, clip, bits, quant.reg)?
        } else {
            x
        }
    } else {
        x
    };
    if !conv.quant_excluded {
        if let Some(c) = collect {
            c.push((conv.id.clone(), xin));
        }
    }
    let w = bind_bank_slice(tape, params, conv.weight, mixed_c, in_ch, conv.kh, conv.kw, bindings);
    let wq = if quantize_here {
        match quant.weight_bits {
            Some(bits) => tape.quantize_weight(w, bits),
            None => w,
        }
    } else {
        w
    };
    let o_full = tape.conv2d(xin, wq, conv.stride, conv.padding)?;

    let mixed = if subset.indices.len() == 1 {
        o_full
    } else {
        let alpha = bind_full(tape, params, group.alpha, bindings);
        let mix_w = tape.mix_weights(alpha, &subset.indices);
        let branches: Vec<Var> = sel_counts
            .iter()
            .map(|&c| {
                let sliced = tape.channel_slice(o_full, c);
                tape.cwi(sliced, mixed_c)
            })
            .collect::<Result<Vec<_>>>()?;
        tape.weighted_sum(mix_w, &branches)
    };

    let gamma = bind_prefix(tape, params, conv.gamma, mixed_c, bindings);
    let beta = bind_prefix(tape, params, conv.beta, mixed_c, bindings);
    let out = tape.batch_norm(
        mixed,
        gamma,
        beta,
        &mut conv.running_mean[..mixed_c],
        &mut conv.running_var[..mixed_c],
        BN_MOMENTUM,
        BN_EPS,
        mode,
    );
    Ok((out, mixed_c))
}

/// Stack per-sample CHW tensors into one NCHW batch.
pub fn stack_images(images: &[Tensor]) -> Tensor {
    assert!(!images.is_empty());
    let shape = &images[0].shape;
    assert_eq!(shape.len(), 3);
    let per = images[0].numel();
    let mut data = Vec::with_capacity(per * images.len());
    for img in images {
        assert_eq!(&img.shape, shape);
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![images.len(), shape[0], shape[1], shape[2]], data)
}
