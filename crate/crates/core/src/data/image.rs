use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB image, `[height, width, 3]` row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract("image dims must be positive"));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![height, width, 3],
                rhs: vec![data.len()],
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Image::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub(crate) fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// The image as an un-normalized `[H, W, 3]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 3], self.data.clone()).expect("valid dims")
    }
}

/// Single-channel grid in `[0, 1]`, used for PGM output.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape {
                op: "gray image",
                lhs: vec![height, width],
                rhs: vec![data.len()],
            });
        }
        Ok(GrayImage {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Align-corners sample positions: for each output index the two source
/// indices and the weight of the second one.
pub(crate) fn align_corners_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if dst == 1 || src == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear, align-corners resize applied to each channel.
pub fn resize_bilinear(image: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::contract("resize target must be at least 1x1"));
    }
    if height == image.height && width == image.width {
        return Ok(image.clone());
    }
    let rows = align_corners_taps(image.height, height);
    let cols = align_corners_taps(image.width, width);
    let mut data = Vec::with_capacity(height * width * 3);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let (p00, p01) = (image.pixel(r0, c0), image.pixel(r0, c1));
            let (p10, p11) = (image.pixel(r1, c0), image.pixel(r1, c1));
            for ch in 0..3 {
                let top = p00[ch] + fc * (p01[ch] - p00[ch]);
                let bottom = p10[ch] + fc * (p11[ch] - p10[ch]);
                data.push((top + fr * (bottom - top)).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(height, width, data)
}

/// `(v - mean[c]) / std[c]` per channel, as a `[H, W, 3]` tensor.
pub fn normalize(image: &Image, mean: [f64; 3], std: [f64; 3]) -> Result<Tensor> {
    if let Some(s) = std.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::contract(format!("normalize std must be > 0, got {s}")));
    }
    let data = image
        .data
        .chunks(3)
        .flat_map(|px| (0..3).map(move |c| (px[c] - mean[c]) / std[c]))
        .collect();
    Tensor::new(vec![image.height, image.width, 3], data)
}
