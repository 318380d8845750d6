//! Simulation of the lossy half of baseline JPEG: colour transform, 8×8 DCT,
//! quantization and the inverse path. 4:4:4 only, no entropy coding.

use std::sync::OnceLock;

use thiserror::Error;

use crate::jpeg::Qst;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("quality factor {0} outside 1..=100")]
    QfOutOfRange(u32),
    #[error("image dimensions {0}x{1} invalid")]
    BadDimensions(usize, usize),
}

/// Annex K luminance table, natural order.
pub const DEFAULT_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Annex K chrominance table, natural order.
pub const DEFAULT_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Quality scaling of the default tables (IJG convention).
pub fn scale_default_table(qf: u8) -> Result<Qst, CodecError> {
    if !(1..=100).contains(&qf) {
        return Err(CodecError::QfOutOfRange(qf as u32));
    }
    let qf = qf as u32;
    let scale = if qf < 50 { 5000 / qf } else { 200 - 2 * qf };
    let scale_one = |base: u16| -> u8 { ((base as u32 * scale + 50) / 100).clamp(1, 255) as u8 };
    let mut luma = [0u8; 64];
    let mut chroma = [0u8; 64];
    for k in 0..64 {
        luma[k] = scale_one(DEFAULT_LUMA[k]);
        chroma[k] = scale_one(DEFAULT_CHROMA[k]);
    }
    Ok(Qst::new(luma, chroma).expect("scaled steps are clamped to >= 1"))
}

/// An 8×8 block in row-major order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block8(pub [f64; 64]);

impl Block8 {
    pub fn zeros() -> Self {
        Block8([0.0; 64])
    }

    pub fn splat(v: f64) -> Self {
        Block8([v; 64])
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[row * 8 + col]
    }

    pub fn max_abs_diff(&self, other: &Block8) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn energy(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

/// Orthonormal DCT-II matrix, `C[u][x] = a(u) cos((2x+1)uπ/16)`.
fn dct_matrix() -> &'static [[f64; 8]; 8] {
    static M: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    M.get_or_init(|| {
        let mut m = [[0.0; 8]; 8];
        for (u, row) in m.iter_mut().enumerate() {
            let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = a * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        m
    })
}

/// Orthonormal 2-D type-II DCT in coefficient mode (no level shift).
pub fn dct2d(block: &Block8) -> Block8 {
    let c = dct_matrix();
    let mut tmp = [0.0; 64];
    // rows: tmp = X C^T
    for y in 0..8 {
        for u in 0..8 {
            let mut s = 0.0;
            for x in 0..8 {
                s += block.0[y * 8 + x] * c[u][x];
            }
            tmp[y * 8 + u] = s;
        }
    }
    let mut out = [0.0; 64];
    // columns: out = C tmp
    for v in 0..8 {
        for u in 0..8 {
            let mut s = 0.0;
            for y in 0..8 {
                s += c[v][y] * tmp[y * 8 + u];
            }
            out[v * 8 + u] = s;
        }
    }
    Block8(out)
}

/// Orthonormal 2-D type-III DCT, the inverse of [`dct2d`].
pub fn idct2d(coeffs: &Block8) -> Block8 {
    let c = dct_matrix();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            let mut s = 0.0;
            for u in 0..8 {
                s += coeffs.0[v * 8 + u] * c[u][x];
            }
            tmp[v * 8 + x] = s;
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            let mut s = 0.0;
            for v in 0..8 {
                s += c[v][y] * tmp[v * 8 + x];
            }
            out[y * 8 + x] = s;
        }
    }
    Block8(out)
}

/// Pixel block (0..255) to coefficients, with the −128 level shift.
pub fn forward_pixels(pixels: &Block8) -> Block8 {
    let mut shifted = *pixels;
    shifted.0.iter_mut().for_each(|v| *v -= 128.0);
    dct2d(&shifted)
}

/// Coefficients back to pixels, undoing the level shift.
pub fn inverse_pixels(coeffs: &Block8) -> Block8 {
    let mut out = idct2d(coeffs);
    out.0.iter_mut().for_each(|v| *v += 128.0);
    out
}

/// `round(c / q) * q` with ties rounded away from zero.
pub fn quantize_dequantize(coeffs: &Block8, table: &[u8; 64]) -> Block8 {
    let mut out = [0.0; 64];
    for ((o, &c), &q) in out.iter_mut().zip(coeffs.0.iter()).zip(table.iter()) {
        let q = q as f64;
        *o = (c / q).round() * q;
    }
    Block8(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    YCbCr,
}

/// Three full-range planes of real values.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    pub width: usize,
    pub height: usize,
    pub planes: [Vec<f64>; 3],
    pub space: ColorSpace,
}

impl PlanarImage {
    pub fn new(width: usize, height: usize, space: ColorSpace) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            planes: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            space,
        }
    }

    /// From interleaved 8-bit RGB.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self, CodecError> {
        if width == 0 || height == 0 || rgb.len() != width * height * 3 {
            return Err(CodecError::BadDimensions(width, height));
        }
        let mut img = Self::new(width, height, ColorSpace::Rgb);
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                img.planes[c][i] = px[c] as f64;
            }
        }
        Ok(img)
    }

    /// Interleaved 8-bit output, rounding and clamping each sample.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(n * 3);
        for i in 0..n {
            for c in 0..3 {
                out.push(self.planes[c][i].round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &PlanarImage) -> f64 {
        self.planes
            .iter()
            .zip(other.planes.iter())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn mean_abs_diff(&self, other: &PlanarImage) -> f64 {
        let n = (self.width * self.height * 3) as f64;
        self.planes
            .iter()
            .zip(other.planes.iter())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .sum::<f64>()
            / n
    }

    fn clamp(&mut self) {
        for p in self.planes.iter_mut() {
            p.iter_mut().for_each(|v| *v = v.clamp(0.0, 255.0));
        }
    }
}

/// JFIF full-range RGB -> YCbCr.
pub fn rgb_to_ycbcr(img: &PlanarImage) -> PlanarImage {
    let mut out = PlanarImage::new(img.width, img.height, ColorSpace::YCbCr);
    let [r, g, b] = &img.planes;
    for i in 0..r.len() {
        let (r, g, b) = (r[i], g[i], b[i]);
        out.planes[0][i] = 0.299 * r + 0.587 * g + 0.114 * b;
        out.planes[1][i] = 128.0 - 0.168_735_891_647_856_1 * r - 0.331_264_108_352_143_9 * g + 0.5 * b;
        out.planes[2][i] = 128.0 + 0.5 * r - 0.418_687_589_158_263_1 * g - 0.081_312_410_841_736_9 * b;
    }
    out.clamp();
    out
}

/// JFIF full-range YCbCr -> RGB.
pub fn ycbcr_to_rgb(img: &PlanarImage) -> PlanarImage {
    let mut out = PlanarImage::new(img.width, img.height, ColorSpace::Rgb);
    let [y, cb, cr] = &img.planes;
    for i in 0..y.len() {
        let (y, cb, cr) = (y[i], cb[i] - 128.0, cr[i] - 128.0);
        out.planes[0][i] = y + 1.402 * cr;
        out.planes[1][i] = y - 0.344_136_286_201_022_4 * cb - 0.714_136_286_201_022_4 * cr;
        out.planes[2][i] = y + 1.772 * cb;
    }
    out.clamp();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressOptions {
    /// When false the planes are quantized as given (treated as YCbCr).
    pub color_transform: bool,
}

impl Default for CompressOptions {
    fn default() -> Self {
        Self {
            color_transform: true,
        }
    }
}

fn compress_plane(plane: &[f64], width: usize, height: usize, table: &[u8; 64]) -> Vec<f64> {
    let bw = width.div_ceil(8);
    let bh = height.div_ceil(8);
    let mut out = vec![0.0; width * height];
    for by in 0..bh {
        for bx in 0..bw {
            let mut block = Block8::zeros();
            for y in 0..8 {
                let sy = (by * 8 + y).min(height - 1);
                for x in 0..8 {
                    let sx = (bx * 8 + x).min(width - 1);
                    block.0[y * 8 + x] = plane[sy * width + sx];
                }
            }
            let coeffs = quantize_dequantize(&forward_pixels(&block), table);
            let rec = inverse_pixels(&coeffs);
            for y in 0..8 {
                let oy = by * 8 + y;
                if oy >= height {
                    break;
                }
                for x in 0..8 {
                    let ox = bx * 8 + x;
                    if ox >= width {
                        break;
                    }
                    out[oy * width + ox] = rec.0[y * 8 + x];
                }
            }
        }
    }
    out
}

/// Runs the lossy JPEG path with the given QST and returns the decoded image
/// in the input's colour space.
pub fn compress_simulate_with(img: &PlanarImage, q: &Qst, opts: CompressOptions) -> PlanarImage {
    let ycc = if opts.color_transform {
        rgb_to_ycbcr(img)
    } else {
        img.clone()
    };
    let mut rec = PlanarImage::new(img.width, img.height, ColorSpace::YCbCr);
    for c in 0..3 {
        let table = q.channel(if c == 0 { 0 } else { 1 });
        rec.planes[c] = compress_plane(&ycc.planes[c], img.width, img.height, table);
    }
    if opts.color_transform {
        ycbcr_to_rgb(&rec)
    } else {
        rec.clamp();
        rec.space = img.space;
        rec
    }
}

pub fn compress_simulate(img: &PlanarImage, q: &Qst) -> PlanarImage {
    compress_simulate_with(img, q, CompressOptions::default())
}

/// Convenience wrapper over interleaved 8-bit RGB.
pub fn compress_rgb8(width: usize, height: usize, rgb: &[u8], q: &Qst) -> Result<Vec<u8>, CodecError> {
    let img = PlanarImage::from_rgb8(width, height, rgb)?;
    Ok(compress_simulate(&img, q).to_rgb8())
}
