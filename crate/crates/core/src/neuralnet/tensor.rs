use crate::error::{Error, Result};
use crate::imageio::ImageF;

/// Dense `(batch, channels, height, width)` f32 array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Input(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Values per batch item.
    #[inline]
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn item(&self, n: usize) -> &[f32] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f32] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// One `(n, c)` spatial plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &mut self.data[start..start + len]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let [_, ch, h, w] = self.shape;
        self.data[((n * ch + c) * h + y) * w + x]
    }

    pub fn map_values(mut self, f: impl Fn(f32) -> f32) -> Self {
        self.data.iter_mut().for_each(|v| *v = f(*v));
        self
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Debug-build guard against NaN/Inf propagating through the graph.
    #[inline]
    pub(crate) fn debug_check_finite(&self, what: &str) {
        debug_assert!(self.all_finite(), "non-finite value after {what}");
    }
}

/// Stacks same-sized interleaved images into an `(n, c, h, w)` batch.
pub fn stack_images(images: &[&ImageF]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Input("cannot stack an empty image list".into()))?;
    let (w, h, c) = (first.width, first.height, first.channels);
    let mut out = Tensor::zeros([images.len(), c, h, w]);
    for (n, img) in images.iter().enumerate() {
        if (img.width, img.height, img.channels) != (w, h, c) {
            return Err(Error::Input(format!(
                "image {n} is {}x{}x{}, expected {w}x{h}x{c}",
                img.width, img.height, img.channels
            )));
        }
        let item = out.item_mut(n);
        for (i, px) in img.data.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                item[ch * w * h + i] = v;
            }
        }
    }
    Ok(out)
}

/// Batch item `n` as an interleaved image.
pub fn unstack_image(t: &Tensor, n: usize) -> ImageF {
    let [_, c, h, w] = t.shape();
    let item = t.item(n);
    let mut data = Vec::with_capacity(item.len());
    for i in 0..w * h {
        data.extend((0..c).map(|ch| item[ch * w * h + i]));
    }
    ImageF::from_vec(w, h, c, data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_follows_nchw() {
        let t = Tensor::from_vec([2, 3, 2, 2], (0..24).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.at(1, 2, 1, 0), 22.0);
        assert_eq!(t.plane(1, 0), &[12.0, 13.0, 14.0, 15.0]);
        assert_eq!(t.item(1).len(), 12);
        assert!(Tensor::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn image_stacking_round_trips() {
        let a = ImageF::from_vec(3, 2, 3, (0..18).map(|v| v as f32).collect()).unwrap();
        let b = a.map(|v| -v);
        let t = stack_images(&[&a, &b]).unwrap();
        assert_eq!(t.shape(), [2, 3, 2, 3]);
        // red of pixel (1, 0) is element 3 of the interleaved buffer
        assert_eq!(t.at(0, 0, 0, 1), 3.0);
        assert_eq!(unstack_image(&t, 1), b);
        assert!(stack_images(&[&a, &a.crop(0, 0, 2, 2)]).is_err());
    }
}
