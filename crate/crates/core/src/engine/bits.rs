use crate::types::BitVector;

use super::EngineError;

/// Big-endian fixed-width binary expansion of `value`.
pub fn binary_repr(value: u64, width: u32) -> Result<BitVector, EngineError> {
    if width > 64 || (width < 64 && value >> width != 0) {
        return Err(EngineError::Encoding { value, width });
    }
    Ok(BitVector::new(
        (0..width).rev().map(|i| (value >> i) & 1 == 1).collect(),
    ))
}

/// How a (user, resource) pair becomes model input: the user's bits
/// followed by the resource's bits, each as 0.0 or 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputEncoding {
    pub user_width: u32,
    pub resource_width: u32,
}

impl Default for InputEncoding {
    fn default() -> Self {
        Self {
            user_width: 16,
            resource_width: 16,
        }
    }
}

impl InputEncoding {
    pub fn width(&self) -> usize {
        (self.user_width + self.resource_width) as usize
    }

    pub fn encode(&self, user_index: u64, resource_id: u64) -> Result<Vec<f64>, EngineError> {
        let user = binary_repr(user_index, self.user_width)?;
        let resource = binary_repr(resource_id, self.resource_width)?;
        Ok(self.encode_bits(&user, &resource))
    }

    pub fn encode_bits(&self, user: &BitVector, resource: &BitVector) -> Vec<f64> {
        user.as_reals().chain(resource.as_reals()).collect()
    }
}
