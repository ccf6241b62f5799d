//! Dense row-major tensors, per-pixel label maps and binary masks.

use crate::error::{Error, Result};

/// Label value for pixels that carry no supervision.
pub const IGNORE: u8 = 255;

/// Dense `f64` array with an explicit shape, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl GridTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Trailing two extents `(H, W)`.
    pub fn spatial(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [.., h, w] => Ok((*h, *w)),
            _ => Err(Error::invalid(format!(
                "tensor of shape {:?} has no spatial extents",
                self.shape
            ))),
        }
    }

    /// Interprets the tensor as `C×H×W`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            _ => Err(Error::invalid(format!(
                "expected a C×H×W tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn add_assign(&mut self, other: &GridTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "cannot add shape {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

/// Per-pixel class indices (`H×W`), with [`IGNORE`] marking unsupervised pixels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "label map {height}×{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[row * self.width + col] = value;
    }

    /// Number of non-IGNORE pixels.
    pub fn support(&self) -> usize {
        self.data.iter().filter(|&&v| v != IGNORE).count()
    }

    pub fn has_ignore(&self) -> bool {
        self.data.contains(&IGNORE)
    }

    /// Checks that every entry is IGNORE or below `num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&v| v != IGNORE && v as usize >= num_classes)
        {
            Some(pos) => Err(Error::invalid(format!(
                "label {} at pixel {pos} is out of range for {num_classes} classes",
                self.data[pos]
            ))),
            None => Ok(()),
        }
    }
}

/// Strictly binary `H×W` map.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMap {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

/// Mask for the mix operator: `true` selects the second source.
pub type MixMask = BinaryMap;

impl BinaryMap {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "binary map {height}×{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds from 0/1 values, rejecting anything else.
    pub fn from_bits(height: usize, width: usize, bits: &[u8]) -> Result<Self> {
        if let Some(bad) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::invalid(format!("mask value {bad} is not binary")));
        }
        Self::new(height, width, bits.iter().map(|&b| b == 1).collect())
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count_true() as f64 / self.data.len() as f64
    }
}

/// `(1 − mask)·a + mask·b`, broadcast over any leading dimensions of `a` and `b`.
pub fn elementwise_mix(a: &GridTensor, b: &GridTensor, mask: &MixMask) -> Result<GridTensor> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "mix operands differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w) = a.spatial()?;
    if (h, w) != mask.dims() {
        return Err(Error::invalid(format!(
            "mask {:?} does not match spatial extents {:?}",
            mask.dims(),
            (h, w)
        )));
    }
    let plane = h * w;
    let m = mask.data();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (&x, &y))| if m[i % plane] { y } else { x })
        .collect();
    Ok(GridTensor {
        shape: a.shape().to_vec(),
        data,
    })
}

/// Selects `b` where the mask is set and `a` elsewhere; IGNORE travels with the selected source.
pub fn label_mix(a: &LabelMap, b: &LabelMap, mask: &MixMask) -> Result<LabelMap> {
    if a.dims() != b.dims() || a.dims() != mask.dims() {
        return Err(Error::invalid(format!(
            "label mix shape mismatch: {:?}, {:?}, mask {:?}",
            a.dims(),
            b.dims(),
            mask.dims()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(mask.data())
        .map(|((&x, &y), &m)| if m { y } else { x })
        .collect();
    Ok(LabelMap {
        height: a.height,
        width: a.width,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[[f64; 2]; 2]) -> GridTensor {
        GridTensor::new(vec![2, 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn mix_selects_per_pixel() {
        let a = t2(&[[1.0, 1.0], [1.0, 1.0]]);
        let b = t2(&[[2.0, 2.0], [2.0, 2.0]]);
        let m = MixMask::from_bits(2, 2, &[0, 1, 1, 0]).unwrap();
        let out = elementwise_mix(&a, &b, &m).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 2.0, 1.0]);
    }

    #[test]
    fn mix_identity_masks() {
        let a = GridTensor::new(vec![3, 2, 2], (0..12).map(f64::from).collect()).unwrap();
        let b = GridTensor::filled(&[3, 2, 2], -1.0);
        let zeros = MixMask::filled(2, 2, false);
        let ones = MixMask::filled(2, 2, true);
        assert_eq!(elementwise_mix(&a, &b, &zeros).unwrap(), a);
        assert_eq!(elementwise_mix(&a, &b, &ones).unwrap(), b);
    }

    #[test]
    fn mix_broadcasts_over_channels() {
        let a = GridTensor::zeros(&[2, 1, 2]);
        let b = GridTensor::filled(&[2, 1, 2], 5.0);
        let m = MixMask::from_bits(1, 2, &[1, 0]).unwrap();
        let out = elementwise_mix(&a, &b, &m).unwrap();
        assert_eq!(out.data(), &[5.0, 0.0, 5.0, 0.0]);
    }

    #[test]
    fn mix_rejects_shape_mismatch() {
        let a = GridTensor::zeros(&[3, 4, 4]);
        let b = GridTensor::zeros(&[3, 4, 5]);
        let m = MixMask::filled(4, 4, false);
        assert!(elementwise_mix(&a, &b, &m).is_err());
        let m = MixMask::filled(4, 5, false);
        assert!(elementwise_mix(&a, &a, &m).is_err());
    }

    #[test]
    fn label_mix_selection_and_ignore() {
        let a = LabelMap::new(2, 2, vec![0, 0, 0, 0]).unwrap();
        let b = LabelMap::new(2, 2, vec![1, 1, 1, 1]).unwrap();
        let m = MixMask::from_bits(2, 2, &[1, 0, 0, 1]).unwrap();
        assert_eq!(label_mix(&a, &b, &m).unwrap().data(), &[1, 0, 0, 1]);
        assert_eq!(label_mix(&a, &a, &m).unwrap(), a);

        let a = LabelMap::new(2, 2, vec![IGNORE, 0, 0, 0]).unwrap();
        let m = MixMask::from_bits(2, 2, &[0, 1, 1, 1]).unwrap();
        assert_eq!(label_mix(&a, &b, &m).unwrap().get(0, 0), IGNORE);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(GridTensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(GridTensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(MixMask::from_bits(1, 2, &[0, 2]).is_err());
        assert!(LabelMap::new(2, 2, vec![0; 5]).is_err());
        let l = LabelMap::new(1, 3, vec![0, IGNORE, 3]).unwrap();
        assert!(l.check_classes(3).is_err());
        assert!(l.check_classes(4).is_ok());
    }
}
