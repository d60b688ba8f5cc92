use serde::{Deserialize, Serialize};

use super::{adapter_layout, AdapterConfig, TensorKind};
use crate::backbone::BackboneConfig;
use crate::error::Result;

/// Learnable-parameter accounting, by tensor kind.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TunableBreakdown {
    pub prompts: usize,
    /// Adaptation gates plus visual gates.
    pub gates: usize,
    pub scale: usize,
    pub bias: usize,
    pub norms: usize,
    pub visual_projection: usize,
    pub total: usize,
    pub tensor_count: usize,
    pub backbone_total: usize,
}

impl TunableBreakdown {
    pub fn scale_bias_norm(&self) -> usize {
        self.scale + self.bias + self.norms
    }

    /// `total / backbone_total`.
    pub fn fraction_of_backbone(&self) -> f64 {
        self.total as f64 / self.backbone_total as f64
    }
}

/// Count learnable parameters by walking the tensor layout for these dims.
pub fn count_tunable(bb: &BackboneConfig, ad: &AdapterConfig) -> Result<TunableBreakdown> {
    bb.validate()?;
    ad.validate(bb)?;
    let mut out = TunableBreakdown {
        prompts: 0,
        gates: 0,
        scale: 0,
        bias: 0,
        norms: 0,
        visual_projection: 0,
        total: 0,
        tensor_count: 0,
        backbone_total: bb.param_count(),
    };
    for spec in adapter_layout(bb, ad) {
        let n: usize = spec.shape.iter().product();
        let slot = match spec.kind {
            TensorKind::Prompt => &mut out.prompts,
            TensorKind::Gate | TensorKind::VisualGate => &mut out.gates,
            TensorKind::Scale => &mut out.scale,
            TensorKind::Bias => &mut out.bias,
            TensorKind::Norm => &mut out.norms,
            TensorKind::VisualProjection => &mut out.visual_projection,
        };
        *slot += n;
        out.total += n;
        out.tensor_count += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn llama7b_closed_form() {
        let b = count_tunable(&BackboneConfig::llama7b(), &AdapterConfig::llama7b()).unwrap();
        let (d, f, v, n) = (4096, 11008, 32000, 32);
        // Per layer the seven linears have output dims d, d, d, d, f, f, d.
        assert_eq!(b.scale, n * (5 * d + 2 * f) + v);
        assert_eq!(b.bias, b.scale);
        assert_eq!(b.norms, n * 2 * d + d);
        assert_eq!(b.prompts, 31 * 10 * d);
        assert_eq!(b.gates, 31 * 32 + 32);
        assert_eq!(b.visual_projection, 768 * d + d + 20 * d);
        assert_eq!(b.backbone_total, 6_738_415_616);
    }

    #[test]
    fn desk_fraction_is_below_one_percent() {
        let b = count_tunable(&BackboneConfig::desk(), &AdapterConfig::desk()).unwrap();
        assert!(b.fraction_of_backbone() < 0.01, "{b:?}");
    }
}
