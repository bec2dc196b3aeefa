//! Skeletal motion, its redundant per-frame feature encoding, foot contacts and
//! feature standardization.

mod codec;
mod csvio;
mod normalize;
mod skeleton;

pub use codec::{
    decode_features, default_contact_threshold, detect_foot_contacts, encode_features,
    frame_rotations, from_6d, rotation_between, to_6d, FeatureLayout, Mat3, MotionFeatures,
    RawMotion, RootPose, Vec3,
};
pub(crate) use codec::{mat_vec, yaw_matrix};
pub use csvio::{read_features_csv, read_raw_csv, write_features_csv, write_raw_csv};
pub use normalize::{NormStats, STD_FLOOR};
pub use skeleton::{Skeleton, CONTACT_CHANNELS};
