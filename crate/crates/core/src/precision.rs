//! Precision policies: which format each piece of training state lives in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{FloatFormat, BF16, FP32, WIDE};

/// Storage format for every training state, encoding "pure" vs "mixed"
/// low-precision training. The master copy, when enabled, is stored in
/// `optimizer_state_fmt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionPolicy {
    pub weights_fmt: FloatFormat,
    pub grads_fmt: FloatFormat,
    pub optimizer_state_fmt: FloatFormat,
    pub master_weights: bool,
    pub forward_fmt: FloatFormat,
    /// RMSNorm variance and the final softmax computed unquantized.
    pub high_precision_islands: bool,
}

impl PrecisionPolicy {
    /// All training state in bfloat16, no master copy, fp32 islands kept.
    pub fn pure_bf16() -> Self {
        PrecisionPolicy {
            weights_fmt: BF16,
            grads_fmt: BF16,
            optimizer_state_fmt: BF16,
            master_weights: false,
            forward_fmt: BF16,
            high_precision_islands: true,
        }
    }

    /// bfloat16 forward/weights/grads with an fp32 master copy and fp32
    /// optimizer states.
    pub fn mixed_bf16() -> Self {
        PrecisionPolicy {
            weights_fmt: BF16,
            grads_fmt: BF16,
            optimizer_state_fmt: FP32,
            master_weights: true,
            forward_fmt: BF16,
            high_precision_islands: true,
        }
    }

    /// Everything in the wide carrier: quantization becomes the identity.
    pub fn wide(master_weights: bool) -> Self {
        PrecisionPolicy {
            weights_fmt: WIDE,
            grads_fmt: WIDE,
            optimizer_state_fmt: WIDE,
            master_weights,
            forward_fmt: WIDE,
            high_precision_islands: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for fmt in [
            self.weights_fmt,
            self.grads_fmt,
            self.optimizer_state_fmt,
            self.forward_fmt,
        ] {
            fmt.validate()?;
        }
        if self.master_weights && self.optimizer_state_fmt.mantissa_bits < FP32.mantissa_bits {
            return Err(Error::InvalidConfig(
                "master weights require optimizer state at least as wide as fp32".into(),
            ));
        }
        Ok(())
    }
}
