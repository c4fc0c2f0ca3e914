//! Pixel-major spatial maps shared by every stage of the pipeline.

use ndarray::{Array2, Array3, ArrayView1, ArrayView3, ArrayViewMut1, Axis, NdFloat};

use crate::error::{shape_err, Error, Result};

/// A `height × width × channels` map stored as a `(height·width) × channels`
/// matrix, one row per pixel in row-major pixel order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMap<T> {
    height: usize,
    width: usize,
    data: Array2<T>,
}

impl<T: NdFloat> SpatialMap<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            data: Array2::zeros((height * width, channels)),
        }
    }

    pub fn from_matrix(height: usize, width: usize, data: Array2<T>) -> Result<Self> {
        if data.nrows() != height * width {
            return Err(shape_err!(
                "matrix has {} rows, expected {}x{}",
                data.nrows(),
                height,
                width
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_hwc(array: ArrayView3<T>) -> Self {
        let (h, w, c) = array.dim();
        let data = array
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((h * w, c))
            .expect("standard layout reshape");
        Self {
            height: h,
            width: w,
            data,
        }
    }

    pub fn to_hwc(&self) -> Array3<T> {
        self.data
            .clone()
            .into_shape_with_order((self.height, self.width, self.channels()))
            .expect("standard layout reshape")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn matrix(&self) -> &Array2<T> {
        &self.data
    }

    pub fn matrix_mut(&mut self) -> &mut Array2<T> {
        &mut self.data
    }

    pub fn into_matrix(self) -> Array2<T> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> ArrayView1<'_, T> {
        self.data.row(y * self.width + x)
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> ArrayViewMut1<'_, T> {
        self.data.row_mut(y * self.width + x)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} contains non-finite values")))
        }
    }

    /// Row-wise softmax, computed with the max-shift for stability.
    pub fn softmax(&self) -> SpatialMap<T> {
        let mut out = self.data.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        SpatialMap {
            height: self.height,
            width: self.width,
            data: out,
        }
    }

    pub fn map_scalar<U: NdFloat>(&self, f: impl Fn(T) -> U) -> SpatialMap<U> {
        SpatialMap {
            height: self.height,
            width: self.width,
            data: self.data.mapv(f),
        }
    }
}

/// Converts between float widths; used to run the network in `f64` for gradient checks.
pub fn cast_map<T: NdFloat, U: NdFloat>(map: &SpatialMap<T>) -> SpatialMap<U> {
    map.map_scalar(|v| U::from(v).expect("float cast"))
}
