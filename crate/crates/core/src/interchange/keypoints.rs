use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FmapError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdBasis {
    #[serde(rename = "image")]
    ImageMaxSide,
    #[serde(rename = "bbox")]
    BboxMaxSide,
}

/// A `(source, target)` pair of pixel coordinates, each `[x, y]`.
pub type KeypointPair = ([f64; 2], [f64; 2]);

/// Sparse correspondence annotations for one image pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub pairs: Vec<KeypointPair>,
    pub threshold_basis: ThresholdBasis,
    /// `[H, W]` of the source image.
    pub src_size: [usize; 2],
    /// `[H, W]` of the target image.
    pub tgt_size: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox_size: Option<[usize; 2]>,
}

fn in_bounds(p: [f64; 2], size: [usize; 2]) -> bool {
    p[0].is_finite()
        && p[1].is_finite()
        && p[0] >= 0.0
        && p[1] >= 0.0
        && p[0] < size[1] as f64
        && p[1] < size[0] as f64
}

impl KeypointSet {
    pub fn validate(&self) -> Result<()> {
        for (i, &(s, t)) in self.pairs.iter().enumerate() {
            if !in_bounds(s, self.src_size) {
                return Err(FmapError::Validation(format!(
                    "source keypoint {i} at {s:?} lies outside the {:?} (H, W) source image",
                    self.src_size
                )));
            }
            if !in_bounds(t, self.tgt_size) {
                return Err(FmapError::Validation(format!(
                    "target keypoint {i} at {t:?} lies outside the {:?} (H, W) target image",
                    self.tgt_size
                )));
            }
        }
        if self.threshold_basis == ThresholdBasis::BboxMaxSide && self.bbox_size.is_none() {
            return Err(FmapError::Validation(
                "threshold_basis \"bbox\" requires bbox_size".into(),
            ));
        }
        Ok(())
    }

    /// `(h, w)` whose larger side scales the PCK threshold.
    pub fn threshold_dims(&self) -> (usize, usize) {
        match (self.threshold_basis, self.bbox_size) {
            (ThresholdBasis::BboxMaxSide, Some([h, w])) => (h, w),
            _ => (self.tgt_size[0], self.tgt_size[1]),
        }
    }

    pub fn sources(&self) -> Vec<[f64; 2]> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn targets(&self) -> Vec<[f64; 2]> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

pub fn parse_keypoints(text: &str) -> Result<KeypointSet> {
    let set: KeypointSet =
        serde_json::from_str(text).map_err(|e| FmapError::Format(format!("keypoint json: {e}")))?;
    set.validate()?;
    Ok(set)
}

pub fn load_keypoints(path: impl AsRef<Path>) -> Result<KeypointSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| FmapError::io(path, e))?;
    parse_keypoints(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair() {
        let set = parse_keypoints(
            r#"{"pairs":[[[0,0],[1,1]]],"threshold_basis":"image","src_size":[4,4],"tgt_size":[4,4]}"#,
        )
        .unwrap();
        assert_eq!(set.pairs, vec![([0.0, 0.0], [1.0, 1.0])]);
        assert_eq!(set.threshold_dims(), (4, 4));
    }

    #[test]
    fn empty_pairs_are_valid() {
        let set = parse_keypoints(
            r#"{"pairs":[],"threshold_basis":"bbox","src_size":[4,4],"tgt_size":[4,4],"bbox_size":[2,3]}"#,
        )
        .unwrap();
        assert!(set.pairs.is_empty());
        assert_eq!(set.threshold_dims(), (2, 3));
    }

    #[test]
    fn out_of_bounds_is_rejected() {
        let err = parse_keypoints(
            r#"{"pairs":[[[5,0],[1,1]]],"threshold_basis":"image","src_size":[10,5],"tgt_size":[4,4]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, FmapError::Validation(_)));
        let err = parse_keypoints(
            r#"{"pairs":[],"threshold_basis":"bbox","src_size":[4,4],"tgt_size":[4,4]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, FmapError::Validation(_)));
    }
}
