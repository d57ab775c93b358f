//! Image and mask containers shared by every stage of the pipeline.
//!
//! Images are row-major, channel-last grids of `f64`. Intensities live in one
//! of two spaces: file space `[0, 1]` (what is stored on disk) and model space
//! `[-1, 1]` (what the diffusion process sees). Masks are binary grids.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Dimension(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::dims("image data length", height * width * channels, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image value at flat index {i}")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "image dimensions must be positive");
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    /// Builds an image by evaluating `f(row, col, channel)` at every element.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut out = Self::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    out.data[(y * width + x) * channels + c] = f(y, x, c);
                }
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channel values of pixel `p` (flat row-major pixel index).
    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn ensure_same_shape(&self, other: &ImageGrid, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(what, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn ensure_mask_fits(&self, mask: &Mask, what: &str) -> Result<()> {
        if (self.height, self.width) != (mask.height(), mask.width()) {
            return Err(Error::dims(what, (self.height, self.width), (mask.height(), mask.width())));
        }
        Ok(())
    }

    /// Fails with a diagnostic naming `context` if any element is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("{context}: flat index {i}"))),
            None => Ok(()),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    /// File space `[0, 1]` to model space `[-1, 1]`.
    pub fn to_model_space(&self) -> Self {
        self.map(|v| 2.0 * v - 1.0)
    }

    /// Model space `[-1, 1]` to file space `[0, 1]`.
    pub fn to_file_space(&self) -> Self {
        self.map(|v| (v + 1.0) * 0.5)
    }

    /// Values of channel `c` at pixels where `mask` is set.
    pub fn channel_values_in<'a>(&'a self, mask: &'a Mask, c: usize) -> impl Iterator<Item = f64> + 'a {
        mask.indices().map(move |p| self.data[p * self.channels + c])
    }
}

/// Binary mask; every element is exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("mask dimensions must be positive, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::dims("mask data length", height * width, data.len()));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::Format(format!("mask value {} at index {i} is not binary", data[i])));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        Self { height, width, data: vec![1; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x) as u8;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    #[inline]
    pub fn at(&self, p: usize) -> bool {
        self.data[p] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Flat indices of set pixels, in row-major order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| i)
    }

    pub fn ensure_same_dims(&self, other: &Mask, what: &str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dims(what, (self.height, self.width), (other.height, other.width)));
        }
        Ok(())
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.ensure_same_dims(other, "mask intersection")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect();
        Ok(Mask { data, ..*self })
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.ensure_same_dims(other, "mask union")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect();
        Ok(Mask { data, ..*self })
    }

    /// Set where `self` is set and `other` is not.
    pub fn and_not(&self, other: &Mask) -> Result<Mask> {
        self.ensure_same_dims(other, "mask difference")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a & (1 - b)).collect();
        Ok(Mask { data, ..*self })
    }

    pub fn complement(&self) -> Mask {
        Mask { data: self.data.iter().map(|v| 1 - v).collect(), ..*self }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| a <= b)
    }

    /// Morphological dilation with a Euclidean disc of the given pixel radius.
    /// Radius 0 returns a copy.
    pub fn dilate(&self, radius: usize) -> Mask {
        self.morph(radius, true)
    }

    /// Morphological erosion with a Euclidean disc; pixels beyond the border count as unset.
    pub fn erode(&self, radius: usize) -> Mask {
        self.morph(radius, false)
    }

    fn morph(&self, radius: usize, dilate: bool) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
            .collect();
        let (h, w) = (self.height as isize, self.width as isize);
        Mask::from_fn(self.height, self.width, |y, x| {
            let hit = |&(dy, dx): &(isize, isize)| {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                yy >= 0 && yy < h && xx >= 0 && xx < w && self.data[(yy * w + xx) as usize] != 0
            };
            if dilate {
                offsets.iter().any(hit)
            } else {
                offsets.iter().all(hit)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_bad_length_and_nan() {
        assert!(matches!(ImageGrid::new(2, 2, 2, vec![0.0; 7]), Err(Error::Dimension(_))));
        let mut v = vec![0.0; 8];
        v[3] = f64::NAN;
        assert!(matches!(ImageGrid::new(2, 2, 2, v), Err(Error::NonFinite(_))));
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(Mask::new(1, 2, vec![0, 2]).is_err());
        assert!(Mask::new(1, 2, vec![0, 1]).is_ok());
    }

    #[test]
    fn space_conversion_round_trips_f32_values_exactly() {
        let vals: Vec<f64> = [0.0f32, 0.1, 0.33, 0.5, 0.999, 1.0].iter().map(|&v| v as f64).collect();
        let img = ImageGrid::new(1, 6, 1, vals.clone()).unwrap();
        let back = img.to_model_space().to_file_space();
        for (a, b) in back.data().iter().zip(&vals) {
            assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
        }
    }

    #[test]
    fn dilate_radius_one_is_a_cross() {
        let m = Mask::from_fn(5, 5, |y, x| y == 2 && x == 2);
        let d = m.dilate(1);
        assert_eq!(d.count(), 5);
        assert!(d.get(1, 2) && d.get(3, 2) && d.get(2, 1) && d.get(2, 3));
        assert!(!d.get(1, 1));
        assert_eq!(m.dilate(0), m);
    }

    #[test]
    fn erode_undoes_nothing_outside() {
        let m = Mask::from_fn(7, 7, |y, x| (1..6).contains(&y) && (1..6).contains(&x));
        let e = m.erode(1);
        assert_eq!(e.count(), 9);
        assert!(e.is_subset_of(&m));
    }

    #[test]
    fn set_algebra() {
        let a = Mask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let b = Mask::new(1, 4, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(a.and(&b).unwrap().data(), &[0, 1, 0, 0]);
        assert_eq!(a.or(&b).unwrap().data(), &[1, 1, 1, 0]);
        assert_eq!(a.and_not(&b).unwrap().data(), &[1, 0, 0, 0]);
        assert_eq!(a.complement().data(), &[0, 0, 1, 1]);
        assert!(a.and(&Mask::zeros(2, 2)).is_err());
    }
}
