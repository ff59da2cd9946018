//! Uniform-precision fake quantization with straight-through gradients:
//! PACT-style learned clipping for activations and symmetric per-layer
//! max-scaled quantization for weights, plus per-layer signal statistics.
//!
//! Rounding is half-away-from-zero everywhere (`f32::round`) so the level
//! grids are platform-stable.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::population_stdev;

/// Bit width of one tensor kind: a fixed integer >= 2, or full precision.
/// Serialized as the string "full" or a plain integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bits {
    Full,
    Fixed(u32),
}

impl Serialize for Bits {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Bits::Full => s.serialize_str("full"),
            Bits::Fixed(b) => s.serialize_u32(*b),
        }
    }
}

impl<'de> Deserialize<'de> for Bits {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = Bits;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("\"full\" or an integer bit width")
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<Bits, E> {
                Ok(Bits::Fixed(v as u32))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<Bits, E> {
                if v < 0 {
                    return Err(E::custom("bit width must be nonnegative"));
                }
                Ok(Bits::Fixed(v as u32))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<Bits, E> {
                if v == "full" {
                    Ok(Bits::Full)
                } else {
                    Err(E::custom(format!(
                        "expected \"full\" or an integer bit width, got \"{v}\""
                    )))
                }
            }
        }
        d.deserialize_any(V)
    }
}

impl Bits {
    pub fn fixed(self) -> Option<u32> {
        match self {
            Bits::Full => None,
            Bits::Fixed(b) => Some(b),
        }
    }

    pub fn validate(self, what: &str) -> Result<()> {
        if let Bits::Fixed(b) = self {
            if b < 2 {
                return Err(Error::Config(format!("{what}: bit width {b} must be >= 2")));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for Bits {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Bits::Full => write!(f, "full"),
            Bits::Fixed(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub weight_bits: Bits,
    pub activation_bits: Bits,
    pub pact_clip_init: f32,
    pub pact_reg_coeff: f32,
    /// Layer ids forced to full precision in addition to the topology-derived
    /// exclusions (first conv, classifier, shortcut convs).
    pub excluded_layers: Vec<String>,
    /// Whether fake quantization is active during the warm-up phase.
    pub quantize_warmup: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            weight_bits: Bits::Full,
            activation_bits: Bits::Full,
            pact_clip_init: 8.0,
            pact_reg_coeff: 0.001,
            excluded_layers: Vec::new(),
            quantize_warmup: true,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        self.weight_bits.validate("weight_bits")?;
        self.activation_bits.validate("activation_bits")?;
        if self.pact_clip_init <= 0.0 {
            return Err(Error::Config("pact_clip_init must be positive".into()));
        }
        if self.pact_reg_coeff < 0.0 {
            return Err(Error::Config("pact_reg_coeff must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn any_quantized(&self) -> bool {
        self.weight_bits != Bits::Full || self.activation_bits != Bits::Full
    }
}

/// Process-wide count of quantizer kernel invocations. Lets tests audit that
/// full-precision configurations never touch the quantizers.
static QUANT_CALLS: AtomicU64 = AtomicU64::new(0);

pub fn quant_call_count() -> u64 {
    QUANT_CALLS.load(Ordering::Relaxed)
}

pub fn reset_quant_call_count() {
    QUANT_CALLS.store(0, Ordering::Relaxed);
}

/// y = round(clamp(x, 0, alpha) * L / alpha) * alpha / L with L = 2^bits - 1.
/// The top level is returned as exactly `alpha`.
pub fn quantize_activation_values(x: &[f32], alpha: f32, bits: u32) -> Vec<f32> {
    QUANT_CALLS.fetch_add(1, Ordering::Relaxed);
    let levels = ((1u64 << bits) - 1) as f32;
    x.iter()
        .map(|&v| {
            let c = v.clamp(0.0, alpha);
            let q = (c * levels / alpha).round();
            if q >= levels {
                alpha
            } else {
                q * alpha / levels
            }
        })
        .collect()
}

/// Symmetric per-tensor quantization with scale max|w| and
/// L = 2^(bits-1) - 1 signed levels per side. All-zero tensors pass through.
pub fn quantize_weight_values(w: &[f32], bits: u32) -> Vec<f32> {
    QUANT_CALLS.fetch_add(1, Ordering::Relaxed);
    let scale = w.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    if scale == 0.0 {
        return w.to_vec();
    }
    let levels = ((1u64 << (bits - 1)) - 1) as f32;
    w.iter()
        .map(|&v| {
            let q = ((v / scale).clamp(-1.0, 1.0) * levels).round();
            if q >= levels {
                scale
            } else if q <= -levels {
                -scale
            } else {
                q * scale / levels
            }
        })
        .collect()
}

/// Signal-to-quantization-noise ratio in dB. Returns `f64::INFINITY` when the
/// error energy is exactly zero.
pub fn sqnr_db(reference: &[f32], quantized: &[f32]) -> Result<f64> {
    if reference.len() != quantized.len() {
        return Err(Error::Input(format!(
            "sqnr: length mismatch {} vs {}",
            reference.len(),
            quantized.len()
        )));
    }
    let signal: f64 = reference.iter().map(|&v| (v as f64) * (v as f64)).sum();
    if signal == 0.0 {
        return Err(Error::Input("sqnr: reference has zero energy".into()));
    }
    let noise: f64 = reference
        .iter()
        .zip(quantized)
        .map(|(&r, &q)| {
            let d = r as f64 - q as f64;
            d * d
        })
        .sum();
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}

/// Population standard deviation over all elements.
pub fn activation_stdev(x: &[f32]) -> f32 {
    population_stdev(x)
}
