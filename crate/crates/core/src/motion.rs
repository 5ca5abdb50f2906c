//! The 157-dimensional per-frame motion layout.
//!
//! ```text
//! [0, 150)    25 joints × Rot6D, in JOINT_NAMES order
//! [150, 154)  foot contacts (left heel, left toe, right heel, right toe)
//! [154, 157)  root translation in meters
//! ```

use gelina_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::rotation::{matrix_to_rot6d, rot6d_to_matrix, Rot6D, RotationMatrix};

pub const NUM_JOINTS: usize = 25;
pub const NUM_CONTACTS: usize = 4;
pub const FEATURE_DIM: usize = NUM_JOINTS * 6 + NUM_CONTACTS + 3;
pub const CONTACT_OFFSET: usize = NUM_JOINTS * 6;
pub const TRANSLATION_OFFSET: usize = CONTACT_OFFSET + NUM_CONTACTS;
pub const MOTION_FPS: f64 = 20.0;

/// Retained body joints: the leading SMPL-X body joints in skeleton order,
/// with hand and face joints beyond the eyes dropped.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "jaw",
    "left_eye",
    "right_eye",
];

#[derive(Clone, Debug, PartialEq)]
pub struct MotionFrame<T> {
    pub joints: [Rot6D<T>; NUM_JOINTS],
    pub foot_contacts: [T; NUM_CONTACTS],
    pub translation: [T; 3],
}

impl<T: Scalar> MotionFrame<T> {
    pub fn zeros() -> Self {
        Self {
            joints: [Rot6D([T::zero(); 6]); NUM_JOINTS],
            foot_contacts: [T::zero(); NUM_CONTACTS],
            translation: [T::zero(); 3],
        }
    }

    /// Every joint at the identity rotation, no contacts, origin.
    pub fn rest() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self {
            joints: [Rot6D([o, z, z, z, o, z]); NUM_JOINTS],
            ..Self::zeros()
        }
    }
}

pub fn frame_to_feature<T: Scalar>(f: &MotionFrame<T>) -> [T; FEATURE_DIM] {
    let mut out = [T::zero(); FEATURE_DIM];
    for (j, r) in f.joints.iter().enumerate() {
        out[j * 6..j * 6 + 6].copy_from_slice(&r.0);
    }
    out[CONTACT_OFFSET..TRANSLATION_OFFSET].copy_from_slice(&f.foot_contacts);
    out[TRANSLATION_OFFSET..].copy_from_slice(&f.translation);
    out
}

pub fn feature_to_frame<T: Scalar>(v: &[T]) -> Result<MotionFrame<T>> {
    if v.len() != FEATURE_DIM {
        return Err(Error::LengthMismatch {
            expected: FEATURE_DIM,
            got: v.len(),
        });
    }
    let mut f = MotionFrame::zeros();
    for (j, r) in f.joints.iter_mut().enumerate() {
        r.0.copy_from_slice(&v[j * 6..j * 6 + 6]);
    }
    f.foot_contacts
        .copy_from_slice(&v[CONTACT_OFFSET..TRANSLATION_OFFSET]);
    f.translation.copy_from_slice(&v[TRANSLATION_OFFSET..]);
    Ok(f)
}

/// Rot6D of joint `j` inside a 157-feature row.
pub fn joint_rot6d<T: Scalar>(row: &[T], j: usize) -> Rot6D<T> {
    let mut r = [T::zero(); 6];
    r.copy_from_slice(&row[j * 6..j * 6 + 6]);
    Rot6D(r)
}

/// Pose track stored as a flat `frames × 157` buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence<T> {
    data: Vec<T>,
    frame_rate: f64,
}

impl<T: Scalar> MotionSequence<T> {
    pub fn new(data: Vec<T>, frame_rate: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::DegenerateInput("empty motion sequence"));
        }
        if !data.len().is_multiple_of(FEATURE_DIM) {
            return Err(Error::LengthNotDivisible {
                len: data.len(),
                factor: FEATURE_DIM,
            });
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(Error::DegenerateInput("frame rate must be positive"));
        }
        Ok(Self { data, frame_rate })
    }

    pub fn from_frames(frames: &[MotionFrame<T>], frame_rate: f64) -> Result<Self> {
        let data = frames.iter().flat_map(frame_to_feature).collect();
        Self::new(data, frame_rate)
    }

    pub fn from_tensor(t: &Tensor<T>, frame_rate: f64) -> Result<Self> {
        if t.cols() != FEATURE_DIM {
            return Err(Error::LengthMismatch {
                expected: FEATURE_DIM,
                got: t.cols(),
            });
        }
        Self::new(t.data().to_vec(), frame_rate)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.num_frames(), FEATURE_DIM], self.data.clone())
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / FEATURE_DIM
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn duration(&self) -> f64 {
        self.num_frames() as f64 / self.frame_rate
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]
    }

    pub fn frame(&self, i: usize) -> MotionFrame<T> {
        feature_to_frame(self.row(i)).expect("row has FEATURE_DIM entries")
    }

    pub fn frames(&self) -> impl Iterator<Item = MotionFrame<T>> + '_ {
        (0..self.num_frames()).map(|i| self.frame(i))
    }

    /// Frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.num_frames() {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                bound: self.num_frames(),
            });
        }
        Self::new(
            self.data[start * FEATURE_DIM..(start + len) * FEATURE_DIM].to_vec(),
            self.frame_rate,
        )
    }

    /// Decoded rotation of every joint in every frame, `frames × joints`.
    pub fn rotations(&self) -> Result<Vec<[RotationMatrix<T>; NUM_JOINTS]>> {
        (0..self.num_frames())
            .map(|i| {
                let row = self.row(i);
                let mut out = [RotationMatrix::identity(); NUM_JOINTS];
                for (j, r) in out.iter_mut().enumerate() {
                    *r = rot6d_to_matrix(&joint_rot6d(row, j))?;
                }
                Ok(out)
            })
            .collect()
    }

    /// True when every stored Rot6D already holds two orthonormal columns.
    pub fn has_valid_rotations(&self, tol: f64) -> bool {
        (0..self.num_frames()).all(|i| {
            let row = self.row(i);
            (0..NUM_JOINTS).all(|j| {
                let r = joint_rot6d(row, j);
                let a = [r.0[0], r.0[1], r.0[2]].map(|v| v.as_f64());
                let b = [r.0[3], r.0[4], r.0[5]].map(|v| v.as_f64());
                let dot = |x: [f64; 3], y: [f64; 3]| x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
                (dot(a, a) - 1.0).abs() <= tol
                    && (dot(b, b) - 1.0).abs() <= tol
                    && dot(a, b).abs() <= tol
            })
        })
    }

    /// Snap every joint to the nearest Rot6D the decoder would read back
    /// (identity where the stored vectors are degenerate) and clamp foot
    /// contacts to `[0, 1]`. Network outputs go through this before use.
    pub fn projected(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(FEATURE_DIM) {
            for j in 0..NUM_JOINTS {
                let m = rot6d_to_matrix(&joint_rot6d(row, j)).unwrap_or_else(|_| RotationMatrix::identity());
                row[j * 6..j * 6 + 6].copy_from_slice(&matrix_to_rot6d(&m).0);
            }
            for c in &mut row[CONTACT_OFFSET..TRANSLATION_OFFSET] {
                *c = c.max(T::zero()).min(T::one());
            }
        }
        Self {
            data,
            frame_rate: self.frame_rate,
        }
    }

    pub fn cast<U: Scalar>(&self) -> MotionSequence<U> {
        MotionSequence {
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            frame_rate: self.frame_rate,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_yields_valid_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..3 * FEATURE_DIM).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut m = MotionSequence::new(data, MOTION_FPS).unwrap();
        m.data[6..12].fill(0.0);
        let p = m.projected();
        assert!(p.has_valid_rotations(1e-9));
        assert_eq!(&p.row(0)[6..12], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(p.data().chunks(FEATURE_DIM).all(|r| r[CONTACT_OFFSET..TRANSLATION_OFFSET].iter().all(|c| (0.0..=1.0).contains(c))));
        assert_eq!(&p.row(2)[TRANSLATION_OFFSET..], &m.row(2)[TRANSLATION_OFFSET..]);
        let again = p.projected();
        assert!(again.data().iter().zip(p.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn layout_width() {
        assert_eq!(FEATURE_DIM, 157);
        assert_eq!(TRANSLATION_OFFSET, 154);
    }

    #[test]
    fn zero_frame_is_zero_features() {
        assert!(frame_to_feature(&MotionFrame::<f64>::zeros())
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn translation_is_last() {
        let mut f = MotionFrame::<f32>::rest();
        f.translation = [1.0, 2.0, 3.0];
        assert_eq!(&frame_to_feature(&f)[154..], &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn feature_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let v: Vec<f32> = (0..FEATURE_DIM).map(|_| rng.random_range(-3.0..3.0)).collect();
            let f = feature_to_frame(&v).unwrap();
            assert_eq!(frame_to_feature(&f).to_vec(), v);
        }
    }

    #[test]
    fn wrong_width_is_rejected() {
        assert!(matches!(
            feature_to_frame(&[0.0f64; 156]),
            Err(Error::LengthMismatch {
                expected: 157,
                got: 156
            })
        ));
    }

    #[test]
    fn sequence_windows() {
        let frames = vec![MotionFrame::<f64>::rest(); 8];
        let m = MotionSequence::from_frames(&frames, MOTION_FPS).unwrap();
        assert_eq!(m.num_frames(), 8);
        assert_eq!(m.duration(), 0.4);
        assert_eq!(m.window(4, 4).unwrap().num_frames(), 4);
        assert!(m.window(5, 4).is_err());
        assert!(m.has_valid_rotations(1e-9));
        assert_eq!(m.rotations().unwrap()[3][7], RotationMatrix::identity());
        assert!(MotionSequence::<f64>::new(vec![], 20.0).is_err());
    }
}
