use ndarray::Array3;
use thiserror::Error;

use crate::autodiff::LOG_FLOOR;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvMapError {
    #[error("environment map must be non-empty, got {height}x{width}")]
    Empty { height: usize, width: usize },
    #[error("expected 3 color channels, got {0}")]
    Channels(usize),
    #[error("radiance at row {row}, col {col} is negative or not finite ({value})")]
    BadValue { row: usize, col: usize, value: f32 },
}

/// Equirectangular grid of linear-RGB radiance, stored `[H, W, 3]`.
///
/// Row `i` sits at polar angle `pi (i + 0.5) / H` measured from the up axis
/// (+z); column `j` at azimuth `2 pi (j + 0.5) / W`. Absolute scale is
/// meaningless: captures come with unknown exposure.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentMap {
    data: Array3<f32>,
}

impl EnvironmentMap {
    pub fn new(data: Array3<f32>) -> Result<Self, EnvMapError> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(EnvMapError::Empty { height: h, width: w });
        }
        if c != 3 {
            return Err(EnvMapError::Channels(c));
        }
        for ((row, col, _), &value) in data.indexed_iter() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(EnvMapError::BadValue { row, col, value });
            }
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    /// Builds a map from log radiance.
    pub fn from_log(log: &Array3<f32>) -> Result<Self, EnvMapError> {
        Self::new(log.mapv(f32::exp))
    }

    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = Array3::from_shape_fn((height, width, 3), |(_, _, c)| rgb[c]);
        Self::new(data).expect("constant map is valid")
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        [
            self.data[[row, col, 0]],
            self.data[[row, col, 1]],
            self.data[[row, col, 2]],
        ]
    }

    /// Natural log of the radiance, with zeros clamped to the log floor.
    pub fn log_data(&self) -> Array3<f32> {
        let floor = LOG_FLOOR as f32;
        self.data.mapv(|v| v.max(floor).ln())
    }

    /// Multiplies all radiance by `k > 0` (an exposure change).
    pub fn scaled(&self, k: f32) -> Self {
        Self {
            data: self.data.mapv(|v| v * k),
        }
    }

    pub fn is_equirect_aspect(&self) -> bool {
        self.width() == 2 * self.height()
    }
}
