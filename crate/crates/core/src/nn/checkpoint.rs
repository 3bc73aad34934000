use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamState, DenseNet, NnError};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: usize,
    pub nets: Vec<DenseNet>,
    pub optimizers: Vec<AdamState>,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn new(epoch: usize, nets: Vec<DenseNet>, optimizers: Vec<AdamState>, rng: ChaCha8Rng) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            epoch,
            nets,
            optimizers,
            rng,
        }
    }

    pub fn to_json(&self) -> Result<String, NnError> {
        serde_json::to_string(self).map_err(|e| NnError::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, NnError> {
        let cp: Checkpoint = serde_json::from_str(s).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                cp.version
            )));
        }
        Ok(cp)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        fs::write(path, self.to_json()?).map_err(|e| NnError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let s = fs::read_to_string(path).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AdamConfig;
    use rand::{Rng, SeedableRng};

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = DenseNet::mlp(2, 6, 2, &[0.7, 1.0], &mut rng);
        let adam = AdamState::new(&net, AdamConfig::default());
        let _: f64 = rng.gen();
        let cp = Checkpoint::new(42, vec![net], vec![adam], rng);
        let back = Checkpoint::from_json(&cp.to_json().unwrap()).unwrap();
        assert_eq!(back, cp);
        let mut r1 = cp.rng.clone();
        let mut r2 = back.rng.clone();
        assert_eq!(r1.gen::<u64>(), r2.gen::<u64>());
    }

    #[test]
    fn rejects_foreign_version() {
        let rng = ChaCha8Rng::seed_from_u64(5);
        let mut cp = Checkpoint::new(0, vec![], vec![], rng);
        cp.version = 99;
        let s = serde_json::to_string(&cp).unwrap();
        assert!(Checkpoint::from_json(&s).is_err());
    }
}
