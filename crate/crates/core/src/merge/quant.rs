use serde::{Deserialize, Serialize};

use crate::container::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelCheckpoint;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub l_total: usize,
    pub l_retained: usize,
    pub q: f64,
    pub ratio: f64,
}

impl CompressionReport {
    /// Ratio as a percentage with two decimals, e.g. `43.75%`.
    pub fn percent(&self) -> String {
        format!("{:.2}%", self.ratio * 100.0)
    }
}

/// `(L_total − L_retained/Q) / L_total`
pub fn compression_ratio(l_total: usize, l_retained: usize, q: f64) -> Result<CompressionReport> {
    if l_total == 0 || l_retained > l_total {
        return Err(Error::invalid(format!(
            "need 0 <= retained <= total and total >= 1, got {l_retained}/{l_total}"
        )));
    }
    if !(q >= 1.0) || !q.is_finite() {
        return Err(Error::invalid(format!("quantization factor must be >= 1, got {q}")));
    }
    let total = l_total as f64;
    Ok(CompressionReport {
        l_total,
        l_retained,
        q,
        ratio: (total - l_retained as f64 / q) / total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantBits {
    Int4,
    Int8,
}

impl std::str::FromStr for QuantBits {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "int4" | "4" => Ok(Self::Int4),
            "int8" | "8" => Ok(Self::Int8),
            other => Err(Error::invalid(format!("unknown quantization {other:?} (expected int4 or int8)"))),
        }
    }
}

impl QuantBits {
    pub fn bits(self) -> u32 {
        match self {
            Self::Int4 => 4,
            Self::Int8 => 8,
        }
    }

    /// Largest grid magnitude, `2^(bits-1) - 1`.
    pub fn levels(self) -> f64 {
        f64::from((1u32 << (self.bits() - 1)) - 1)
    }

    /// Size reduction relative to 16-bit weights; the factor used in
    /// compression ratios.
    pub fn q_factor(self) -> f64 {
        16.0 / f64::from(self.bits())
    }

    /// Size reduction relative to the f32 container.
    pub fn container_factor(self) -> f64 {
        32.0 / f64::from(self.bits())
    }
}

fn quantize_tensor(t: &mut Tensor, levels: f64) {
    let max = t.data.iter().fold(0.0f64, |m, &v| m.max(f64::from(v).abs()));
    if max == 0.0 {
        return;
    }
    let scale = max / levels;
    for v in &mut t.data {
        let q = (f64::from(*v) / scale).round().clamp(-levels, levels);
        *v = (q * scale) as f32;
    }
}

/// Per-tensor symmetric round-to-nearest; weights are stored dequantized.
/// Returns the quantized model and its `Q` factor.
pub fn quantize_rtn(ckpt: &ModelCheckpoint, bits: QuantBits) -> Result<(ModelCheckpoint, f64)> {
    ckpt.validate()?;
    let levels = bits.levels();
    let mut out = ckpt.clone();
    quantize_tensor(&mut out.embedding, levels);
    for layer in &mut out.layers {
        for t in layer.tensors_mut() {
            quantize_tensor(t, levels);
        }
    }
    quantize_tensor(&mut out.final_norm, levels);
    quantize_tensor(&mut out.head, levels);
    Ok((out, bits.q_factor()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn ratio_examples() {
        assert_eq!(compression_ratio(32, 18, 1.0).unwrap().percent(), "43.75%");
        assert_eq!(compression_ratio(32, 16, 4.0).unwrap().percent(), "87.50%");
        assert_eq!(compression_ratio(32, 18, 4.0).unwrap().percent(), "85.94%");
        assert_eq!(compression_ratio(32, 20, 4.0).unwrap().percent(), "84.38%");
        let r = compression_ratio(32, 18, 1.0).unwrap();
        assert_eq!(r.ratio, (32.0 - 18.0) / 32.0);
    }

    #[test]
    fn ratio_preconditions() {
        assert!(compression_ratio(4, 5, 1.0).is_err());
        assert!(compression_ratio(4, 2, 0.5).is_err());
        assert!(compression_ratio(0, 0, 1.0).is_err());
    }

    #[test]
    fn q_convention() {
        assert_eq!(QuantBits::Int4.q_factor(), 4.0);
        assert_eq!(QuantBits::Int8.q_factor(), 2.0);
        assert_eq!(QuantBits::Int4.container_factor(), 8.0);
    }

    #[test]
    fn grid_values_are_fixed_points() {
        let data: Vec<f32> = (-127..=127).map(|k| k as f32 * 0.25).collect();
        let mut t = Tensor::new(vec![data.len()], data.clone()).unwrap();
        quantize_tensor(&mut t, 127.0);
        assert_eq!(t.data, data);
    }

    #[test]
    fn max_abs_maps_to_extreme_level() {
        let mut t = Tensor::new(vec![3], vec![0.3, -1.7, 0.9]).unwrap();
        quantize_tensor(&mut t, QuantBits::Int4.levels());
        assert_eq!(t.data[1], -1.7);
    }

    #[test]
    fn error_is_at_most_half_a_step() {
        let m = init_model(&ModelConfig::default()).unwrap();
        let (q, factor) = quantize_rtn(&m, QuantBits::Int8).unwrap();
        assert_eq!(factor, 2.0);
        let (a, b) = (&m.layers[1].up, &q.layers[1].up);
        let scale = a.data.iter().fold(0.0f64, |x, &v| x.max(f64::from(v).abs())) / 127.0;
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((f64::from(*x) - f64::from(*y)).abs() <= scale / 2.0 * (1.0 + 1e-6));
        }
    }

    #[test]
    fn zero_tensor_is_unchanged() {
        let mut t = Tensor::zeros(vec![4]);
        quantize_tensor(&mut t, 7.0);
        assert_eq!(t.data, vec![0.0; 4]);
    }
}
