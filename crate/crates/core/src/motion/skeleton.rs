use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of foot-contact channels in the feature vector.
pub const CONTACT_CHANNELS: usize = 4;

/// Kinematic tree with rest offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    names: Vec<String>,
    parents: Vec<usize>,
    offsets: Vec<[f64; 3]>,
    foot_joints: Vec<usize>,
}

impl Skeleton {
    /// Validates the tree: one root (its own parent), no cycles, valid feet.
    pub fn new(
        names: Vec<String>,
        parents: Vec<usize>,
        offsets: Vec<[f64; 3]>,
        foot_joints: Vec<usize>,
    ) -> Result<Self> {
        let n = parents.len();
        if n == 0 || names.len() != n || offsets.len() != n {
            return Err(Error::InvalidArgument(format!(
                "skeleton needs matching names/parents/offsets, got {}/{}/{}",
                names.len(),
                n,
                offsets.len()
            )));
        }
        let roots: Vec<usize> = (0..n).filter(|&i| parents[i] == i).collect();
        if roots.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "skeleton must have exactly one root, found {}",
                roots.len()
            )));
        }
        for (i, &p) in parents.iter().enumerate() {
            if p >= n {
                return Err(Error::InvalidArgument(format!(
                    "joint {i} has parent {p} out of range"
                )));
            }
            // Walking up must reach the root within n steps.
            let mut cur = i;
            let mut steps = 0;
            while parents[cur] != cur {
                cur = parents[cur];
                steps += 1;
                if steps > n {
                    return Err(Error::InvalidArgument(format!(
                        "parent chain from joint {i} is cyclic"
                    )));
                }
            }
        }
        if foot_joints.is_empty() {
            return Err(Error::InvalidArgument("skeleton needs foot joints".into()));
        }
        if let Some(&bad) = foot_joints.iter().find(|&&f| f >= n) {
            return Err(Error::InvalidArgument(format!(
                "unknown foot joint {bad} (skeleton has {n} joints)"
            )));
        }
        Ok(Self {
            names,
            parents,
            offsets,
            foot_joints,
        })
    }

    /// Seven joints: root, two hips, two feet, two hands.
    pub fn default_seven() -> Self {
        let names = [
            "root",
            "left_hip",
            "right_hip",
            "left_foot",
            "right_foot",
            "left_hand",
            "right_hand",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        Self::new(
            names,
            vec![0, 0, 0, 1, 2, 0, 0],
            vec![
                [0.0, 0.0, 0.0],
                [0.1, -0.05, 0.0],
                [-0.1, -0.05, 0.0],
                [0.0, -0.85, 0.0],
                [0.0, -0.85, 0.0],
                [0.22, 0.35, 0.0],
                [-0.22, 0.35, 0.0],
            ],
            vec![3, 4],
        )
        .expect("default skeleton is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn root(&self) -> usize {
        (0..self.parents.len())
            .find(|&i| self.parents[i] == i)
            .expect("validated root")
    }

    pub fn parent(&self, j: usize) -> usize {
        self.parents[j]
    }

    pub fn offset(&self, j: usize) -> [f64; 3] {
        self.offsets[j]
    }

    pub fn name(&self, j: usize) -> &str {
        &self.names[j]
    }

    pub fn foot_joints(&self) -> &[usize] {
        &self.foot_joints
    }

    /// Foot joints padded to four channels by repeating the last one.
    pub fn contact_joints(&self) -> [usize; CONTACT_CHANNELS] {
        let last = *self.foot_joints.last().expect("non-empty feet");
        let mut out = [last; CONTACT_CHANNELS];
        for (o, &f) in out.iter_mut().zip(&self.foot_joints) {
            *o = f;
        }
        out
    }

    /// Feature width `4 + 12 * joints + 4`.
    pub fn feature_dim(&self) -> usize {
        4 + 12 * self.joint_count() + CONTACT_CHANNELS
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dim_is_92() {
        assert_eq!(Skeleton::default_seven().feature_dim(), 92);
    }

    #[test]
    fn feet_padded_by_duplicating_last() {
        assert_eq!(Skeleton::default_seven().contact_joints(), [3, 4, 4, 4]);
    }

    #[test]
    fn rejects_bad_trees() {
        let names = vec!["a".to_string(), "b".to_string()];
        let off = vec![[0.0; 3]; 2];
        assert!(Skeleton::new(names.clone(), vec![0, 1], off.clone(), vec![1]).is_err());
        assert!(Skeleton::new(names.clone(), vec![1, 0], off.clone(), vec![1]).is_err());
        assert!(Skeleton::new(names.clone(), vec![0, 0], off.clone(), vec![]).is_err());
        assert!(Skeleton::new(names.clone(), vec![0, 0], off.clone(), vec![5]).is_err());
        let names3 = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        assert!(Skeleton::new(names3, vec![0, 2, 1], vec![[0.0; 3]; 3], vec![1]).is_err());
        assert!(Skeleton::new(names, vec![0, 0], off, vec![1]).is_ok());
    }
}
