//! Cross-attention injection points (layer x branch) and the maps they produce.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Layer {
    Down0,
    Mid0,
    Up1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Lip,
    Expression,
    Pose,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::Down0, Layer::Mid0, Layer::Up1];

    pub fn name(self) -> &'static str {
        match self {
            Layer::Down0 => "down_0",
            Layer::Mid0 => "mid_0",
            Layer::Up1 => "up_1",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Lip, Branch::Expression, Branch::Pose];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Lip => "lip",
            Branch::Expression => "expression",
            Branch::Pose => "pose",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One cross-attention unit, written `mid_0_lip` and friends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerBranchUnit {
    pub layer: Layer,
    pub branch: Branch,
}

impl LayerBranchUnit {
    pub const fn new(layer: Layer, branch: Branch) -> Self {
        Self { layer, branch }
    }

    /// All nine units, layer-major.
    pub fn all() -> Vec<LayerBranchUnit> {
        Layer::ALL
            .iter()
            .flat_map(|&l| Branch::ALL.iter().map(move |&b| Self::new(l, b)))
            .collect()
    }
}

impl fmt::Display for LayerBranchUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.layer.name(), self.branch.name())
    }
}

impl FromStr for LayerBranchUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        for layer in Layer::ALL {
            let Some(rest) = s.strip_prefix(layer.name()) else {
                continue;
            };
            let rest = rest.trim_start_matches(['_', ':', '.', 'x', '×', ' ']);
            if let Some(branch) = Branch::ALL.into_iter().find(|b| b.name() == rest) {
                return Ok(Self::new(layer, branch));
            }
        }
        Err(Error::Config(format!(
            "unknown layer-branch unit '{s}' (expected e.g. mid_0_lip; layers down_0/mid_0/up_1, branches lip/expression/pose)"
        )))
    }
}

impl Serialize for LayerBranchUnit {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerBranchUnit {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Row-stochastic `Q x J` attention weights: spatial queries over audio tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    weights: Tensor,
}

impl AttentionMap {
    pub fn new(weights: Tensor) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::Input(format!("attention map must be [Q, J], got {s:?}")));
        }
        let j = s[1];
        for row in weights.data().chunks(j) {
            if row.iter().any(|&v| !(v >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::Input("attention rows must be nonnegative and sum to 1".into()));
            }
        }
        Ok(Self { weights })
    }

    /// Uniform weights `1/J` everywhere.
    pub fn uniform(queries: usize, tokens: usize) -> Self {
        Self {
            weights: Tensor::full(&[queries, tokens], 1.0 / tokens as f64),
        }
    }

    pub fn queries(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.weights
    }

    pub fn get(&self, q: usize, j: usize) -> f64 {
        self.weights.data()[q * self.tokens() + j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_units_round_trip_names() {
        let all = LayerBranchUnit::all();
        assert_eq!(all.len(), 9);
        for u in all {
            assert_eq!(u.to_string().parse::<LayerBranchUnit>().unwrap(), u);
        }
        assert_eq!(
            "mid_0×expression".parse::<LayerBranchUnit>().unwrap(),
            LayerBranchUnit::new(Layer::Mid0, Branch::Expression)
        );
        assert!("mid_1_lip".parse::<LayerBranchUnit>().is_err());
    }

    #[test]
    fn map_validation() {
        assert!(AttentionMap::new(Tensor::new(vec![1, 2], vec![0.5, 0.6]).unwrap()).is_err());
        assert!(AttentionMap::new(Tensor::new(vec![1, 2], vec![1.5, -0.5]).unwrap()).is_err());
        assert!(AttentionMap::new(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).is_ok());
    }
}
