//! Raw annotation codes to the four segmentation classes.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{one_hot, Tensor};

pub const CLASS_COUNT: usize = 4;

/// Segmentation classes in channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Background,
    Sc,
    Vb,
    Ivd,
}

impl Class {
    pub fn id(self) -> u8 {
        self as u8
    }
}

/// The three foreground structures that are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Structure {
    #[serde(rename = "SC")]
    Sc,
    #[serde(rename = "VB")]
    Vb,
    #[serde(rename = "IVD")]
    Ivd,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::Sc, Structure::Vb, Structure::Ivd];

    pub fn class_id(self) -> u8 {
        match self {
            Structure::Sc => Class::Sc.id(),
            Structure::Vb => Class::Vb.id(),
            Structure::Ivd => Class::Ivd.id(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Structure::Sc => "SC",
            Structure::Vb => "VB",
            Structure::Ivd => "IVD",
        }
    }
}

impl std::fmt::Display for Structure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inclusive code range collapsing onto one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRule {
    pub min: i64,
    pub max: i64,
    pub class: Class,
}

/// Configurable code table; codes not covered by any rule are rejected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub rules: Vec<LabelRule>,
}

impl Default for LabelMap {
    /// SPIDER scheme: vertebrae 1-25, spinal canal 100, discs 201-225.
    fn default() -> Self {
        LabelMap {
            rules: vec![
                LabelRule { min: 0, max: 0, class: Class::Background },
                LabelRule { min: 1, max: 25, class: Class::Vb },
                LabelRule { min: 100, max: 100, class: Class::Sc },
                LabelRule { min: 201, max: 225, class: Class::Ivd },
            ],
        }
    }
}

impl LabelMap {
    /// Maps class ids 0..4 onto themselves; used when re-running the pipeline on encoded masks.
    pub fn identity() -> Self {
        let classes = [Class::Background, Class::Sc, Class::Vb, Class::Ivd];
        LabelMap {
            rules: classes
                .iter()
                .map(|&c| LabelRule { min: c.id() as i64, max: c.id() as i64, class: c })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let map: LabelMap = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            serde_yaml::from_str(&text)?
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.rules.iter().enumerate() {
            if r.min > r.max {
                return Err(Error::Config(format!("label rule {i} has min > max")));
            }
            for other in &self.rules[..i] {
                if r.min <= other.max && other.min <= r.max {
                    return Err(Error::Config(format!(
                        "label rules [{}, {}] and [{}, {}] overlap",
                        other.min, other.max, r.min, r.max
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn class_of(&self, code: i64) -> Result<Class> {
        self.rules
            .iter()
            .find(|r| (r.min..=r.max).contains(&code))
            .map(|r| r.class)
            .ok_or(Error::UnknownLabel(code))
    }

    /// Class id per pixel.
    pub fn map_slice(&self, labels: &Array2<i32>) -> Result<Array2<u8>> {
        let mut out = Array2::zeros(labels.dim());
        for (o, &code) in out.iter_mut().zip(labels.iter()) {
            *o = self.class_of(code as i64)?.id();
        }
        Ok(out)
    }
}

/// One-hot `[4, H, W]` mask of a raw-code slice.
pub fn encode_mask(labels: &Array2<i32>, map: &LabelMap) -> Result<Tensor> {
    let classes = map.map_slice(labels)?;
    let (h, w) = classes.dim();
    let flat: Vec<u8> = classes.iter().copied().collect();
    one_hot(&flat, CLASS_COUNT, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_slice() {
        let m = encode_mask(&Array2::zeros((3, 2)), &LabelMap::default()).unwrap();
        assert_eq!(m.shape(), &[4, 3, 2]);
        assert!(m.data()[..6].iter().all(|&v| v == 1.0));
        assert!(m.data()[6..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertebra_instances_share_a_channel() {
        let labels = Array2::from_shape_vec((1, 4), vec![1, 5, 100, 203]).unwrap();
        let classes = LabelMap::default().map_slice(&labels).unwrap();
        assert_eq!(classes.iter().copied().collect::<Vec<_>>(), vec![2, 2, 1, 3]);
    }

    #[test]
    fn unknown_code_is_rejected() {
        let labels = Array2::from_elem((1, 1), 150);
        assert!(matches!(
            LabelMap::default().map_slice(&labels),
            Err(Error::UnknownLabel(150))
        ));
    }

    #[test]
    fn yaml_round_trip() {
        let text = serde_yaml::to_string(&LabelMap::default()).unwrap();
        let back: LabelMap = serde_yaml::from_str(&text).unwrap();
        assert_eq!(back, LabelMap::default());
        let bad = LabelMap {
            rules: vec![
                LabelRule { min: 0, max: 5, class: Class::Background },
                LabelRule { min: 5, max: 9, class: Class::Vb },
            ],
        };
        assert!(bad.validate().is_err());
    }
}
