//! Architecture descriptors: the structured form used to instantiate
//! networks and compute costs, and the per-layer on-disk file format for
//! derived and shipped architectures.
//!
//! The file is JSON with one entry per layer (id, type, kernel shape, chosen
//! channel count, quantization exclusion flag) plus input metadata. Layer ids
//! encode the topology (`stage{S}.block{B}.conv{1,2}`, `...shortcut`,
//! `stem.conv`, `features.conv{i}`, `features.pool{i}`, `classifier`), so the
//! structured descriptor round-trips through the flat list.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDesc {
    pub name: String,
    pub input_channels: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub body: ArchBody,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchBody {
    Resnet(ResnetBody),
    Vgg(VggBody),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResnetBody {
    pub stem: usize,
    pub stages: Vec<StageDesc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageDesc {
    /// Output channel count shared by every block of the stage.
    pub width: usize,
    /// Stride of the first block of the stage.
    pub stride: usize,
    pub blocks: Vec<BlockDesc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDesc {
    /// Output channels of the block's first convolution.
    pub mid: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VggBody {
    pub items: Vec<VggItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum VggItem {
    Conv(usize),
    Pool,
}

/// One entry of the flat per-layer listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: String,
    pub kind: String, // "conv" | "linear" | "maxpool"
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub bn: bool,
    pub quant_excluded: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchFile {
    version: u32,
    name: String,
    input_channels: usize,
    input_size: usize,
    num_classes: usize,
    layers: Vec<LayerInfo>,
}

const ARCH_FILE_VERSION: u32 = 1;

impl ResnetBody {
    /// Whether block `b` of stage `s` uses a 1x1 projection shortcut. The
    /// first block of every stage carries a projection so the stage width is
    /// free to differ from the incoming width; later blocks keep identity
    /// shortcuts (in and out widths match within a stage).
    pub fn has_projection(&self, _s: usize, b: usize) -> bool {
        b == 0
    }

    pub fn block_in_width(&self, s: usize, b: usize) -> usize {
        if b > 0 {
            self.stages[s].width
        } else if s == 0 {
            self.stem
        } else {
            self.stages[s - 1].width
        }
    }
}

impl ArchDesc {
    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        match &self.body {
            ArchBody::Resnet(body) => {
                out.push(LayerInfo {
                    id: "stem.conv".into(),
                    kind: "conv".into(),
                    in_channels: self.input_channels,
                    out_channels: body.stem,
                    kernel: (3, 3),
                    stride: 1,
                    padding: 1,
                    bn: true,
                    quant_excluded: true,
                });
                let mut classifier_in = body.stem;
                for (s, stage) in body.stages.iter().enumerate() {
                    for (b, block) in stage.blocks.iter().enumerate() {
                        let in_w = body.block_in_width(s, b);
                        let stride = if b == 0 { stage.stride } else { 1 };
                        out.push(LayerInfo {
                            id: format!("stage{s}.block{b}.conv1"),
                            kind: "conv".into(),
                            in_channels: in_w,
                            out_channels: block.mid,
                            kernel: (3, 3),
                            stride,
                            padding: 1,
                            bn: true,
                            quant_excluded: false,
                        });
                        out.push(LayerInfo {
                            id: format!("stage{s}.block{b}.conv2"),
                            kind: "conv".into(),
                            in_channels: block.mid,
                            out_channels: stage.width,
                            kernel: (3, 3),
                            stride: 1,
                            padding: 1,
                            bn: true,
                            quant_excluded: false,
                        });
                        if body.has_projection(s, b) {
                            out.push(LayerInfo {
                                id: format!("stage{s}.block{b}.shortcut"),
                                kind: "conv".into(),
                                in_channels: in_w,
                                out_channels: stage.width,
                                kernel: (1, 1),
                                stride,
                                padding: 0,
                                bn: true,
                                quant_excluded: true,
                            });
                        }
                    }
                    classifier_in = stage.width;
                }
                out.push(LayerInfo {
                    id: "classifier".into(),
                    kind: "linear".into(),
                    in_channels: classifier_in,
                    out_channels: self.num_classes,
                    kernel: (1, 1),
                    stride: 1,
                    padding: 0,
                    bn: false,
                    quant_excluded: true,
                });
            }
            ArchBody::Vgg(body) => {
                let mut in_ch = self.input_channels;
                let mut conv_i = 0usize;
                let mut pool_i = 0usize;
                let mut last_width = self.input_channels;
                for item in &body.items {
                    match item {
                        VggItem::Conv(w) => {
                            conv_i += 1;
                            // first conv excluded (input layer), per uniform
                            // low-precision practice
                            out.push(LayerInfo {
                                id: format!("features.conv{conv_i}"),
                                kind: "conv".into(),
                                in_channels: in_ch,
                                out_channels: *w,
                                kernel: (3, 3),
                                stride: 1,
                                padding: 1,
                                bn: true,
                                quant_excluded: conv_i == 1,
                            });
                            in_ch = *w;
                            last_width = *w;
                        }
                        VggItem::Pool => {
                            pool_i += 1;
                            out.push(LayerInfo {
                                id: format!("features.pool{pool_i}"),
                                kind: "maxpool".into(),
                                in_channels: in_ch,
                                out_channels: in_ch,
                                kernel: (2, 2),
                                stride: 2,
                                padding: 0,
                                bn: false,
                                quant_excluded: true,
                            });
                        }
                    }
                }
                out.push(LayerInfo {
                    id: "classifier".into(),
                    kind: "linear".into(),
                    in_channels: last_width,
                    out_channels: self.num_classes,
                    kernel: (1, 1),
                    stride: 1,
                    padding: 0,
                    bn: false,
                    quant_excluded: true,
                });
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ArchFile {
            version: ARCH_FILE_VERSION,
            name: self.name.clone(),
            input_channels: self.input_channels,
            input_size: self.input_size,
            num_classes: self.num_classes,
            layers: self.layers(),
        };
        let text = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Format(format!("arch serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: ArchFile = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("arch file {}: {e}", path.display())))?;
        if file.version != ARCH_FILE_VERSION {
            return Err(Error::Format(format!(
                "arch file version {} unsupported (expected {ARCH_FILE_VERSION})",
                file.version
            )));
        }
        Self::from_layers(&file.name, file.input_channels, file.input_size, file.num_classes, &file.layers)
    }

    /// Rebuild the structured body from the flat per-layer listing.
    pub fn from_layers(
        name: &str,
        input_channels: usize,
        input_size: usize,
        num_classes: usize,
        layers: &[LayerInfo],
    ) -> Result<Self> {
        let body = if layers.iter().any(|l| l.id.starts_with("stage")) {
            let stem = layers
                .iter()
                .find(|l| l.id == "stem.conv")
                .ok_or_else(|| Error::Format("arch file: missing stem.conv".into()))?;
            let mut stages: Vec<StageDesc> = Vec::new();
            for l in layers {
                let Some(rest) = l.id.strip_prefix("stage") else { continue };
                let parts: Vec<&str> = rest.split('.').collect();
                if parts.len() != 3 {
                    return Err(Error::Format(format!("arch file: bad layer id {}", l.id)));
                }
                let s: usize = parts[0]
                    .parse()
                    .map_err(|_| Error::Format(format!("arch file: bad stage index in {}", l.id)))?;
                let b: usize = parts[1]
                    .strip_prefix("block")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Format(format!("arch file: bad block index in {}", l.id)))?;
                while stages.len() <= s {
                    stages.push(StageDesc { width: 0, stride: 1, blocks: Vec::new() });
                }
                while stages[s].blocks.len() <= b {
                    stages[s].blocks.push(BlockDesc { mid: 0 });
                }
                match parts[2] {
                    "conv1" => {
                        stages[s].blocks[b].mid = l.out_channels;
                        if b == 0 {
                            stages[s].stride = l.stride;
                        }
                    }
                    "conv2" => stages[s].width = l.out_channels,
                    "shortcut" => {}
                    other => {
                        return Err(Error::Format(format!("arch file: unknown layer role {other}")))
                    }
                }
            }
            ArchBody::Resnet(ResnetBody { stem: stem.out_channels, stages })
        } else {
            let mut items = Vec::new();
            for l in layers {
                if l.id.starts_with("features.conv") {
                    items.push(VggItem::Conv(l.out_channels));
                } else if l.id.starts_with("features.pool") {
                    items.push(VggItem::Pool);
                } else if l.id == "classifier" {
                } else {
                    return Err(Error::Format(format!("arch file: unknown layer id {}", l.id)));
                }
            }
            ArchBody::Vgg(VggBody { items })
        };
        let desc = ArchDesc {
            name: name.to_string(),
            input_channels,
            input_size,
            num_classes,
            body,
        };
        // the flat listing must regenerate exactly
        let regen = desc.layers();
        if regen != layers {
            return Err(Error::Format(
                "arch file: layer listing inconsistent with reconstructed topology".into(),
            ));
        }
        Ok(desc)
    }

    /// Scale every searchable width by `gamma`, rounding to >= 1. The stem
    /// and classifier are left unchanged, matching a width-multiplier
    /// baseline over the searched layers.
    pub fn with_width_multiplier(&self, gamma: f64) -> ArchDesc {
        let scale = |w: usize| ((w as f64 * gamma).round() as usize).max(1);
        let mut out = self.clone();
        out.name = format!("{}-x{gamma}", self.name);
        match &mut out.body {
            ArchBody::Resnet(body) => {
                for stage in &mut body.stages {
                    stage.width = scale(stage.width);
                    for b in &mut stage.blocks {
                        b.mid = scale(b.mid);
                    }
                }
            }
            ArchBody::Vgg(body) => {
                for item in &mut body.items {
                    if let VggItem::Conv(w) = item {
                        *w = scale(*w);
                    }
                }
            }
        }
        out
    }
}

fn resnet_cifar(name: &str, blocks_per_stage: usize) -> ArchDesc {
    let widths = [16usize, 32, 64];
    let strides = [1usize, 2, 2];
    ArchDesc {
        name: name.into(),
        input_channels: 3,
        input_size: 32,
        num_classes: 10,
        body: ArchBody::Resnet(ResnetBody {
            stem: 16,
            stages: widths
                .iter()
                .zip(strides)
                .map(|(&w, s)| StageDesc {
                    width: w,
                    stride: s,
                    blocks: vec![BlockDesc { mid: w }; blocks_per_stage],
                })
                .collect(),
        }),
    }
}

/// Shipped named presets (CIFAR variants).
pub fn preset(name: &str) -> Option<ArchDesc> {
    match name {
        "resnet8" => Some(resnet_cifar("resnet8", 1)),
        "resnet20" => Some(resnet_cifar("resnet20", 3)),
        "resnet32" => Some(resnet_cifar("resnet32", 5)),
        "resnet56" => Some(resnet_cifar("resnet56", 9)),
        "vgg16" => {
            let mut items = Vec::new();
            for (count, width) in [(2usize, 64usize), (2, 128), (3, 256), (3, 512), (3, 512)] {
                for _ in 0..count {
                    items.push(VggItem::Conv(width));
                }
                items.push(VggItem::Pool);
            }
            Some(ArchDesc {
                name: "vgg16".into(),
                input_channels: 3,
                input_size: 32,
                num_classes: 10,
                body: ArchBody::Vgg(VggBody { items }),
            })
        }
        _ => None,
    }
}

pub const PRESET_NAMES: &[&str] = &["resnet8", "resnet20", "resnet32", "resnet56", "vgg16"];
