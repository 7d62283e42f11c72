//! Synthetic layered scenes with known decompositions, RGBA compositing and
//! packing of layer stacks into flat model vectors.
//!
//! Rasters are planar (`channel × height × width`), values in `[0, 1]`.
//! Generated scenes keep every channel value on the `1/256` grid, so packing
//! into the model range `[−1, 1]` and back is exact for them.

use std::io::{BufWriter, Read};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const MIN_LAYERS: usize = 2;
pub const MAX_LAYERS: usize = 5;

/// Fraction of a shape that must stay unoccluded in a generated scene.
const MIN_VISIBLE_FRACTION: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum LayerError {
    #[error("layer count {0} outside [{MIN_LAYERS}, {MAX_LAYERS}]")]
    LayerCount(usize),
    #[error("alpha value {0} outside [0, 1]")]
    AlphaRange(f64),
    #[error("layer 0 must be fully opaque")]
    BackgroundNotOpaque,
    #[error("size mismatch: {0}")]
    Size(String),
    #[error("png: {0}")]
    Png(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Planar RGB raster.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let n = width * height;
        let mut data = Vec::with_capacity(3 * n);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, n));
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[c * self.pixels() + y * self.width + x]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        let n = self.pixels();
        self.data[c * n + y * self.width + x] = v;
    }

    /// Mean absolute difference over every channel and pixel.
    pub fn mean_abs_diff(&self, other: &RgbImage) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Values mapped to the model range `[−1, 1]`.
    pub fn to_model_range(&self) -> Vec<f64> {
        self.data.iter().map(|v| 2.0 * v - 1.0).collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), LayerError> {
        let n = self.pixels();
        let mut bytes = Vec::with_capacity(3 * n);
        for p in 0..n {
            for c in 0..3 {
                bytes.push(to_u8(self.data[c * n + p]));
            }
        }
        write_png(
            path.as_ref(),
            self.width,
            self.height,
            png::ColorType::Rgb,
            &bytes,
        )
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, LayerError> {
        let (w, h, channels, bytes) = read_png(std::fs::File::open(path)?)?;
        let n = w * h;
        let mut data = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                let src = if channels >= 3 { c } else { 0 };
                data[c * n + p] = bytes[p * channels + src] as f64 / 255.0;
            }
        }
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }
}

/// Planar RGBA raster; colour is straight (not premultiplied).
#[derive(Debug, Clone, PartialEq)]
pub struct RgbaLayer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbaLayer {
    pub fn transparent(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 4 * width * height],
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn alpha(&self) -> &[f64] {
        &self.data[3 * self.pixels()..]
    }

    pub fn alpha_mut(&mut self) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[3 * n..]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Sum of alpha over all pixels.
    pub fn alpha_mass(&self) -> f64 {
        self.alpha().iter().sum()
    }

    pub fn rgb(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data[..3 * self.pixels()].to_vec(),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), LayerError> {
        let n = self.pixels();
        let mut bytes = Vec::with_capacity(4 * n);
        for p in 0..n {
            for c in 0..4 {
                bytes.push(to_u8(self.data[c * n + p]));
            }
        }
        write_png(
            path.as_ref(),
            self.width,
            self.height,
            png::ColorType::Rgba,
            &bytes,
        )
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, LayerError> {
        let (w, h, channels, bytes) = read_png(std::fs::File::open(path)?)?;
        let n = w * h;
        let mut data = vec![0.0; 4 * n];
        for p in 0..n {
            for c in 0..4 {
                data[c * n + p] = match (channels, c) {
                    (4, _) => bytes[p * 4 + c] as f64 / 255.0,
                    (_, 3) => 1.0,
                    (3, _) => bytes[p * 3 + c] as f64 / 255.0,
                    _ => bytes[p * channels] as f64 / 255.0,
                };
            }
        }
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }
}

/// Ordered RGBA layers, back to front. Layer 0 is the opaque background.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    layers: Vec<RgbaLayer>,
}

impl LayerStack {
    pub fn new(layers: Vec<RgbaLayer>) -> Result<Self, LayerError> {
        if !(MIN_LAYERS..=MAX_LAYERS).contains(&layers.len()) {
            return Err(LayerError::LayerCount(layers.len()));
        }
        let (w, h) = (layers[0].width, layers[0].height);
        for l in &layers {
            if l.width != w || l.height != h || l.data.len() != 4 * w * h {
                return Err(LayerError::Size("layers differ in size".into()));
            }
            if let Some(&bad) = l.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(LayerError::AlphaRange(bad));
            }
        }
        if layers[0].alpha().iter().any(|&a| a != 1.0) {
            return Err(LayerError::BackgroundNotOpaque);
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[RgbaLayer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn width(&self) -> usize {
        self.layers[0].width
    }

    pub fn height(&self) -> usize {
        self.layers[0].height
    }

    pub fn background(&self) -> &RgbaLayer {
        &self.layers[0]
    }

    pub fn foreground(&self) -> &[RgbaLayer] {
        &self.layers[1..]
    }

    /// Writes `layer_{k}.png` for every layer and `composite.png`.
    pub fn save_pngs(&self, dir: impl AsRef<Path>) -> Result<(), LayerError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (k, l) in self.layers.iter().enumerate() {
            l.save_png(dir.join(format!("layer_{k}.png")))?;
        }
        composite(self)?.save_png(dir.join("composite.png"))
    }

    /// Reads `layer_0.png`, `layer_1.png`, ... until the first missing index.
    pub fn load_pngs(dir: impl AsRef<Path>) -> Result<Self, LayerError> {
        let dir = dir.as_ref();
        let mut layers = Vec::new();
        loop {
            let p = dir.join(format!("layer_{}.png", layers.len()));
            if !p.exists() {
                break;
            }
            layers.push(RgbaLayer::load_png(p)?);
        }
        if let Some(bg) = layers.first_mut() {
            bg.alpha_mut().fill(1.0);
        }
        Self::new(layers)
    }
}

/// Back-to-front `over` composition: `out = src·α + dst·(1 − α)`, starting
/// from the opaque layer 0.
pub fn composite(stack: &LayerStack) -> Result<RgbImage, LayerError> {
    let bg = stack.background();
    if bg.alpha().iter().any(|&a| a != 1.0) {
        return Err(LayerError::BackgroundNotOpaque);
    }
    let n = bg.pixels();
    let mut out = bg.rgb();
    for layer in stack.foreground() {
        let alpha = layer.alpha();
        if let Some(&bad) = alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(LayerError::AlphaRange(bad));
        }
        for c in 0..3 {
            let src = layer.channel(c);
            let dst = &mut out.data[c * n..(c + 1) * n];
            for p in 0..n {
                dst[p] = src[p] * alpha[p] + dst[p] * (1.0 - alpha[p]);
            }
        }
    }
    Ok(out)
}

/// Number of model values for `layers` layers of a `width × height` canvas.
pub fn packed_len(layers: usize, width: usize, height: usize) -> usize {
    layers * 4 * width * height
}

/// Flattens a stack layer-major, channel-major, row-major and maps values to
/// `[−1, 1]`.
pub fn pack(stack: &LayerStack) -> Vec<f64> {
    stack
        .layers
        .iter()
        .flat_map(|l| l.data.iter().map(|v| 2.0 * v - 1.0))
        .collect()
}

/// Inverse of [`pack`]: maps `(v + 1)/2`, clamps to `[0, 1]` and forces the
/// background alpha to 1.
pub fn unpack(
    values: &[f64],
    layers: usize,
    width: usize,
    height: usize,
) -> Result<LayerStack, LayerError> {
    if values.len() != packed_len(layers, width, height) {
        return Err(LayerError::Size(format!(
            "{} values for {layers} layers of {width}x{height}",
            values.len()
        )));
    }
    let per = 4 * width * height;
    let mut out: Vec<RgbaLayer> = values
        .chunks_exact(per)
        .map(|chunk| RgbaLayer {
            width,
            height,
            data: chunk
                .iter()
                .map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
                .collect(),
        })
        .collect();
    if let Some(bg) = out.first_mut() {
        bg.alpha_mut().fill(1.0);
    }
    LayerStack::new(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Rectangle,
    Ring,
}

/// A flat-coloured shape in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    /// Radius for discs and rings; half-extents for rectangles.
    pub size: (f64, f64),
    pub color: [f64; 3],
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        match self.kind {
            ShapeKind::Disc => dx * dx + dy * dy <= self.size.0 * self.size.0,
            ShapeKind::Rectangle => dx.abs() <= self.size.0 && dy.abs() <= self.size.1,
            ShapeKind::Ring => {
                let r2 = dx * dx + dy * dy;
                let inner = self.size.0 * 0.55;
                r2 <= self.size.0 * self.size.0 && r2 >= inner * inner
            }
        }
    }

    /// Binary coverage sampled at pixel centres.
    pub fn mask(&self, width: usize, height: usize) -> Vec<f64> {
        let mut m = vec![0.0; width * height];
        for y in 0..height {
            for x in 0..width {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    m[y * width + x] = 1.0;
                }
            }
        }
        m
    }

    fn extent(&self) -> (f64, f64) {
        match self.kind {
            ShapeKind::Rectangle => self.size,
            _ => (self.size.0, self.size.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub top: [f64; 3],
    pub bottom: [f64; 3],
    /// Optional vertical stripes: `(period in px, colour)`.
    pub stripes: Option<(usize, [f64; 3])>,
}

impl Background {
    pub fn render(&self, width: usize, height: usize) -> RgbImage {
        let mut img = RgbImage::filled(width, height, [0.0; 3]);
        for y in 0..height {
            let f = if height > 1 {
                y as f64 / (height - 1) as f64
            } else {
                0.0
            };
            for x in 0..width {
                let striped = matches!(self.stripes, Some((p, _)) if (x / p) % 2 == 1);
                for c in 0..3 {
                    let v = match self.stripes {
                        Some((_, col)) if striped => {
                            0.5 * col[c] + 0.5 * (self.top[c] + f * (self.bottom[c] - self.top[c]))
                        }
                        _ => self.top[c] + f * (self.bottom[c] - self.top[c]),
                    };
                    img.set(c, x, y, quantize(v));
                }
            }
        }
        img
    }
}

/// Parameters of a generated scene; shape `k` lives on layer `k + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScene {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub background: Background,
    pub shapes: Vec<Shape>,
    /// Layer index holding each shape in the true decomposition.
    pub layer_of_shape: Vec<usize>,
}

impl ToyScene {
    pub fn num_layers(&self) -> usize {
        self.shapes.len() + 1
    }

    pub fn true_background(&self) -> RgbImage {
        self.background.render(self.width, self.height)
    }

    /// Full (unoccluded) binary mask of every shape.
    pub fn shape_masks(&self) -> Vec<Vec<f64>> {
        self.shapes
            .iter()
            .map(|s| s.mask(self.width, self.height))
            .collect()
    }

    /// The ground-truth decomposition.
    pub fn render_stack(&self) -> LayerStack {
        let (w, h) = (self.width, self.height);
        let n = w * h;
        let bg = self.true_background();
        let mut layers = Vec::with_capacity(self.num_layers());
        let mut bg_layer = RgbaLayer::transparent(w, h);
        bg_layer.data[..3 * n].copy_from_slice(&bg.data);
        bg_layer.alpha_mut().fill(1.0);
        layers.push(bg_layer);
        for shape in &self.shapes {
            let mask = shape.mask(w, h);
            let mut l = RgbaLayer::transparent(w, h);
            for (p, &m) in mask.iter().enumerate() {
                if m > 0.0 {
                    for c in 0..3 {
                        l.data[c * n + p] = shape.color[c];
                    }
                    l.data[3 * n + p] = 1.0;
                }
            }
            layers.push(l);
        }
        LayerStack::new(layers).expect("generated stacks satisfy the invariants")
    }
}

/// A generated scene with its true decomposition and composite.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub scene: ToyScene,
    pub stack: LayerStack,
    pub composite: RgbImage,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 256.0).round() / 256.0
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [
        quantize(rng.random()),
        quantize(rng.random()),
        quantize(rng.random()),
    ]
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 3.0
}

/// Deterministic scene with `num_layers − 1` shapes on a `width × height`
/// canvas.
pub fn generate_scene(
    seed: u64,
    num_layers: usize,
    width: usize,
    height: usize,
) -> Result<SceneSample, LayerError> {
    if !(MIN_LAYERS..=MAX_LAYERS).contains(&num_layers) {
        return Err(LayerError::LayerCount(num_layers));
    }
    if width < 8 || height < 8 {
        return Err(LayerError::Size(format!(
            "canvas {width}x{height} is below 8x8"
        )));
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7e_u64.wrapping_mul(num_layers as u64 + 1));
    let top = random_color(&mut rng);
    let bottom = random_color(&mut rng);
    let stripes = rng
        .random_bool(0.5)
        .then(|| (rng.random_range(2..=4usize), random_color(&mut rng)));
    let background = Background {
        top,
        bottom,
        stripes,
    };
    let bg_mean = [0, 1, 2].map(|c| 0.5 * (top[c] + bottom[c]));
    let n_shapes = num_layers - 1;
    let small = width.min(height) as f64;

    let shapes = 'outer: loop {
        let mut shapes: Vec<Shape> = Vec::with_capacity(n_shapes);
        for _ in 0..n_shapes {
            let kind = match rng.random_range(0..3) {
                0 => ShapeKind::Disc,
                1 => ShapeKind::Rectangle,
                _ => ShapeKind::Ring,
            };
            let size = match kind {
                ShapeKind::Rectangle => (
                    rng.random_range(0.12..0.25) * small,
                    rng.random_range(0.12..0.25) * small,
                ),
                ShapeKind::Disc => (rng.random_range(0.14..0.26) * small, 0.0),
                ShapeKind::Ring => (rng.random_range(0.2..0.28) * small, 0.0),
            };
            let ext = match kind {
                ShapeKind::Rectangle => size,
                _ => (size.0, size.0),
            };
            let cx = rng.random_range(ext.0..width as f64 - ext.0);
            let cy = rng.random_range(ext.1..height as f64 - ext.1);
            let mut color = random_color(&mut rng);
            while color_distance(color, bg_mean) < 0.25
                || shapes
                    .iter()
                    .any(|s: &Shape| color_distance(s.color, color) < 0.15)
            {
                color = random_color(&mut rng);
            }
            shapes.push(Shape {
                kind,
                center: (cx, cy),
                size,
                color,
            });
        }
        let masks: Vec<Vec<f64>> = shapes.iter().map(|s| s.mask(width, height)).collect();
        for (k, m) in masks.iter().enumerate() {
            let area: f64 = m.iter().sum();
            if area < 0.02 * (width * height) as f64 {
                continue 'outer;
            }
            let visible = (0..m.len())
                .filter(|&p| m[p] > 0.0 && masks[k + 1..].iter().all(|above| above[p] == 0.0))
                .count() as f64;
            if visible < MIN_VISIBLE_FRACTION * area {
                continue 'outer;
            }
        }
        debug_assert!(shapes.iter().all(|s| {
            let (ex, ey) = s.extent();
            s.center.0 - ex >= 0.0
                && s.center.0 + ex <= width as f64
                && s.center.1 - ey >= 0.0
                && s.center.1 + ey <= height as f64
        }));
        break shapes;
    };

    let scene = ToyScene {
        seed,
        width,
        height,
        background,
        layer_of_shape: (1..=n_shapes).collect(),
        shapes,
    };
    let stack = scene.render_stack();
    let composite = composite(&stack)?;
    Ok(SceneSample {
        scene,
        stack,
        composite,
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(
    path: &Path,
    w: usize,
    h: usize,
    color: png::ColorType,
    bytes: &[u8],
) -> Result<(), LayerError> {
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| LayerError::Png(e.to_string()))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| LayerError::Png(e.to_string()))?;
    writer.finish().map_err(|e| LayerError::Png(e.to_string()))
}

/// Encodes an RGB raster as PNG bytes.
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, LayerError> {
    let n = img.pixels();
    let mut bytes = Vec::with_capacity(3 * n);
    for p in 0..n {
        for c in 0..3 {
            bytes.push(to_u8(img.data[c * n + p]));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| LayerError::Png(e.to_string()))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| LayerError::Png(e.to_string()))?;
        writer
            .finish()
            .map_err(|e| LayerError::Png(e.to_string()))?;
    }
    Ok(out)
}

fn read_png(mut r: impl Read) -> Result<(usize, usize, usize, Vec<u8>), LayerError> {
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let mut dec = png::Decoder::new(std::io::Cursor::new(raw));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec
        .read_info()
        .map_err(|e| LayerError::Png(e.to_string()))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| LayerError::Png("image too large".into()))?
    ];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| LayerError::Png(e.to_string()))?;
    let channels = info.color_type.samples();
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, channels, buf))
}
