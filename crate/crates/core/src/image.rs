use crate::autodiff::Tensor;
use crate::error::{shape_err, Result};

/// A `c×h×w` image, nominally with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels * height * width != data.len() {
            return Err(shape_err!(
                "image {}×{}×{} needs {} values, got {}",
                channels,
                height,
                width,
                channels * height * width,
                data.len()
            ));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `[c, h, w]`
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err!("image shapes differ: {:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamped(&self) -> Image {
        let data = self.data.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Image { data, ..*self }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.data.clone()).expect("consistent image shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [c, h, w] => Image::new(*c, *h, *w, t.data().to_vec()),
            s => Err(shape_err!("expected a c×h×w tensor, got {:?}", s)),
        }
    }
}
