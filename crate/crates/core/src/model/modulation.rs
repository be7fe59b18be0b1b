use super::ModelError;

/// Slot of each component inside the packed `6·hidden` vector.
pub const BETA1: usize = 0;
pub const BETA2: usize = 1;
pub const GAMMA1: usize = 2;
pub const GAMMA2: usize = 3;
pub const ALPHA1: usize = 4;
pub const ALPHA2: usize = 5;

/// Shifts (β), scales (γ) and gates (α) for the attention (1) and MLP (2)
/// branches of one block. Packed as `[β₁ | β₂ | γ₁ | γ₂ | α₁ | α₂]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationTuple {
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
}

impl ModulationTuple {
    pub fn zeros(hidden: usize) -> Self {
        Self::unpack(&vec![0.0; 6 * hidden], hidden).expect("length matches")
    }

    pub fn hidden(&self) -> usize {
        self.beta1.len()
    }

    pub fn unpack(packed: &[f64], hidden: usize) -> Result<Self, ModelError> {
        if hidden == 0 || packed.len() != 6 * hidden {
            return Err(ModelError::Shape(format!(
                "modulation vector of length {} does not hold six components of {hidden}",
                packed.len()
            )));
        }
        let part = |k: usize| packed[k * hidden..(k + 1) * hidden].to_vec();
        Ok(Self {
            beta1: part(BETA1),
            beta2: part(BETA2),
            gamma1: part(GAMMA1),
            gamma2: part(GAMMA2),
            alpha1: part(ALPHA1),
            alpha2: part(ALPHA2),
        })
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(6 * self.hidden());
        for part in self.components() {
            out.extend_from_slice(part);
        }
        out
    }

    /// Components in packed order.
    pub fn components(&self) -> [&[f64]; 6] {
        [
            &self.beta1,
            &self.beta2,
            &self.gamma1,
            &self.gamma2,
            &self.alpha1,
            &self.alpha2,
        ]
    }

    /// `max |self − other|` over all six components.
    pub fn max_abs_diff(&self, other: &ModulationTuple) -> f64 {
        self.pack()
            .iter()
            .zip(other.pack())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn pack_unpack_is_lossless(hidden in 1usize..12, seed in any::<u64>()) {
            let mut rng = crate::tensor::SeededRng::new(seed, 0);
            let packed: Vec<f64> = (0..6 * hidden).map(|_| rng.normal()).collect();
            let m = ModulationTuple::unpack(&packed, hidden).unwrap();
            prop_assert_eq!(m.components().len(), 6);
            prop_assert!(m.components().iter().all(|c| c.len() == hidden));
            prop_assert_eq!(m.pack(), packed);
        }
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(ModulationTuple::unpack(&[0.0; 11], 2).is_err());
    }

    #[test]
    fn component_slots() {
        let packed: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let m = ModulationTuple::unpack(&packed, 1).unwrap();
        assert_eq!(m.beta1, [BETA1 as f64]);
        assert_eq!(m.gamma2, [GAMMA2 as f64]);
        assert_eq!(m.alpha2, [ALPHA2 as f64]);
    }
}
