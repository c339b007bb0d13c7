//! Synthetic detector: the intruder, modelled as a sphere, is projected through the chaser's
//! forward-facing pinhole camera into a pixel-space bounding box.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geom::{DroneState, Vec3};
use crate::scalar::Scalar;

/// Pinhole camera aligned with the chaser body frame; the optical axis is body +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel<T> {
    pub width: T,
    pub height: T,
    pub focal: T,
}

impl<T: Scalar> CameraModel<T> {
    /// Focal length from the horizontal field of view: `f = (W/2) / tan(hfov/2)`.
    pub fn from_hfov(width: T, height: T, hfov_deg: T) -> Self {
        let half = hfov_deg.to_radians() / T::of(2.0);
        Self {
            width,
            height,
            focal: width / T::of(2.0) / half.tan(),
        }
    }

    pub fn center(&self) -> (T, T) {
        (self.width / T::of(2.0), self.height / T::of(2.0))
    }

    /// Distance from the frame centre to a corner.
    pub fn half_diagonal(&self) -> T {
        let (cx, cy) = self.center();
        (cx * cx + cy * cy).sqrt()
    }

    pub fn min_side(&self) -> T {
        self.width.min(self.height)
    }
}

impl Default for CameraModel<f64> {
    fn default() -> Self {
        Self::from_hfov(640.0, 480.0, 60.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundingBox<T> {
    pub x_low: T,
    pub y_low: T,
    pub x_high: T,
    pub y_high: T,
}

impl<T: Scalar> BoundingBox<T> {
    pub fn new(x_low: T, y_low: T, x_high: T, y_high: T) -> Self {
        Self {
            x_low,
            y_low,
            x_high,
            y_high,
        }
    }

    pub fn center(&self) -> (T, T) {
        let two = T::of(2.0);
        (
            (self.x_low + self.x_high) / two,
            (self.y_low + self.y_high) / two,
        )
    }

    pub fn width(&self) -> T {
        self.x_high - self.x_low
    }

    pub fn height(&self) -> T {
        self.y_high - self.y_low
    }

    pub fn is_valid_in(&self, cam: &CameraModel<T>) -> bool {
        let z = T::zero();
        z <= self.x_low
            && self.x_low <= self.x_high
            && self.x_high <= cam.width
            && z <= self.y_low
            && self.y_low <= self.y_high
            && self.y_high <= cam.height
    }

    /// Restores `low <= high` and clips to the frame.
    pub fn repaired(&self, cam: &CameraModel<T>) -> Self {
        let clip = |v: T, hi: T| v.max(T::zero()).min(hi);
        let (xl, xh) = (self.x_low.min(self.x_high), self.x_low.max(self.x_high));
        let (yl, yh) = (self.y_low.min(self.y_high), self.y_low.max(self.y_high));
        Self::new(
            clip(xl, cam.width),
            clip(yl, cam.height),
            clip(xh, cam.width),
            clip(yh, cam.height),
        )
    }

    pub fn to_array(self) -> [T; 4] {
        [self.x_low, self.y_low, self.x_high, self.y_high]
    }
}

/// Miss and jitter model applied to geometric detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionNoise {
    pub miss_rate: f64,
    pub pixel_jitter_sigma: f64,
}

impl Default for DetectionNoise {
    fn default() -> Self {
        Self {
            miss_rate: 0.03,
            pixel_jitter_sigma: 2.0,
        }
    }
}

impl DetectionNoise {
    pub const NONE: Self = Self {
        miss_rate: 0.0,
        pixel_jitter_sigma: 0.0,
    };
}

/// Camera-frame coordinates of a world point: `(depth, right, down)`.
fn camera_coords<T: Scalar>(chaser: &DroneState<T>, p: Vec3<T>) -> (T, T, T) {
    let b = chaser.to_body(p);
    (b.x, -b.y, -b.z)
}

/// Pixel coordinates of a world point, if it lies in front of the camera.
pub fn project_point<T: Scalar>(
    cam: &CameraModel<T>,
    chaser: &DroneState<T>,
    p: Vec3<T>,
) -> Option<(T, T)> {
    let (depth, right, down) = camera_coords(chaser, p);
    if depth <= T::zero() {
        return None;
    }
    let (cx, cy) = cam.center();
    Some((
        cx + cam.focal * right / depth,
        cy + cam.focal * down / depth,
    ))
}

/// Bounding box of the projected sphere, clipped to the frame. `None` when the centre is
/// behind the camera or the box misses the frame entirely.
pub fn project<T: Scalar>(
    cam: &CameraModel<T>,
    chaser: &DroneState<T>,
    intruder_position: Vec3<T>,
    intruder_radius: T,
) -> Option<BoundingBox<T>> {
    let (depth, _, _) = camera_coords(chaser, intruder_position);
    let (u, v) = project_point(cam, chaser, intruder_position)?;
    let half = cam.focal * intruder_radius / depth;
    let raw = BoundingBox::new(u - half, v - half, u + half, v + half);
    let z = T::zero();
    let intersects =
        raw.x_low < cam.width && raw.x_high > z && raw.y_low < cam.height && raw.y_high > z;
    intersects.then(|| raw.repaired(cam))
}

/// Whether the intruder's centre projects inside the frame.
pub fn center_in_frame<T: Scalar>(
    cam: &CameraModel<T>,
    chaser: &DroneState<T>,
    p: Vec3<T>,
) -> bool {
    match project_point(cam, chaser, p) {
        Some((u, v)) => u >= T::zero() && u <= cam.width && v >= T::zero() && v <= cam.height,
        None => false,
    }
}

pub fn apply_detection_noise<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    detection: Option<BoundingBox<T>>,
    noise: &DetectionNoise,
    cam: &CameraModel<T>,
) -> Option<BoundingBox<T>> {
    let bbox = detection?;
    if noise.miss_rate > 0.0 && rng.random::<f64>() < noise.miss_rate {
        return None;
    }
    if noise.pixel_jitter_sigma <= 0.0 {
        return Some(bbox);
    }
    let mut jitter = |v: T| {
        let n: f64 = StandardNormal.sample(rng);
        v + T::of(n * noise.pixel_jitter_sigma)
    };
    let noisy = BoundingBox::new(
        jitter(bbox.x_low),
        jitter(bbox.y_low),
        jitter(bbox.x_high),
        jitter(bbox.y_high),
    );
    Some(noisy.repaired(cam))
}

/// Pixel distance between the box centre and the frame centre.
pub fn frame_center_distance<T: Scalar>(bbox: &BoundingBox<T>, cam: &CameraModel<T>) -> T {
    let (bx, by) = bbox.center();
    let (cx, cy) = cam.center();
    ((bx - cx) * (bx - cx) + (by - cy) * (by - cy)).sqrt()
}

/// `2 * (width + height)`; zero when there is no detection.
pub fn perimeter<T: Scalar>(bbox: Option<&BoundingBox<T>>) -> T {
    bbox.map_or(T::zero(), |b| T::of(2.0) * (b.width() + b.height()))
}
