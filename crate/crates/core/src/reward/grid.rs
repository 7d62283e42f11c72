//! Labelled comparison grids for relative (Phase-2) scoring.

use crate::layers::RgbImage;

use super::RewardError;

/// 3×5 bitmaps for the digits 0–9, one row per `u8`, high bit on the left.
const GLYPHS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

pub const MIN_CELL: usize = 16;
const LABEL_INK: f64 = 0.05;

/// Columns and rows of the tiling for `g` samples.
pub fn grid_dims(g: usize) -> (usize, usize) {
    let cols = (g as f64).sqrt().ceil() as usize;
    let cols = cols.max(1);
    (cols, g.div_ceil(cols))
}

/// Geometry of a grid: cell size, margin between and around cells, and the
/// label glyph scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLayout {
    pub g: usize,
    pub cols: usize,
    pub rows: usize,
    pub cell: usize,
    pub margin: usize,
    pub glyph_scale: usize,
}

impl GridLayout {
    pub fn new(g: usize, cell: usize) -> Result<Self, RewardError> {
        if g == 0 {
            return Err(RewardError::Grid("empty group".into()));
        }
        if cell < MIN_CELL {
            return Err(RewardError::Grid(format!(
                "cell {cell} px is below {MIN_CELL} px"
            )));
        }
        let (cols, rows) = grid_dims(g);
        // Glyphs are ×4 at the full 320 px cell and shrink with smaller cells.
        let glyph_scale = (cell / 80).clamp(1, 4);
        Ok(Self {
            g,
            cols,
            rows,
            cell,
            margin: (cell / 16).max(2),
            glyph_scale,
        })
    }

    pub fn width(&self) -> usize {
        self.cols * self.cell + (self.cols + 1) * self.margin
    }

    pub fn height(&self) -> usize {
        self.rows * self.cell + (self.rows + 1) * self.margin
    }

    /// Top-left pixel of cell `index` (left-to-right, then top-to-bottom).
    pub fn cell_origin(&self, index: usize) -> (usize, usize) {
        let (c, r) = (index % self.cols, index / self.cols);
        (
            self.margin + c * (self.cell + self.margin),
            self.margin + r * (self.cell + self.margin),
        )
    }

    /// Inverse of [`cell_origin`](Self::cell_origin): the cell containing a
    /// pixel, if any.
    pub fn cell_at(&self, x: usize, y: usize) -> Option<usize> {
        let pitch = self.cell + self.margin;
        if x < self.margin || y < self.margin {
            return None;
        }
        let (cx, cy) = ((x - self.margin) / pitch, (y - self.margin) / pitch);
        let inside = (x - self.margin) % pitch < self.cell && (y - self.margin) % pitch < self.cell;
        let index = cy * self.cols + cx;
        (inside && cx < self.cols && index < self.g).then_some(index)
    }
}

fn resize_nearest(src: &RgbImage, w: usize, h: usize) -> RgbImage {
    let mut out = RgbImage::filled(w, h, [1.0; 3]);
    for y in 0..h {
        let sy = y * src.height / h;
        for x in 0..w {
            let sx = x * src.width / w;
            for c in 0..3 {
                out.set(c, x, y, src.get(c, sx, sy));
            }
        }
    }
    out
}

fn draw_label(img: &mut RgbImage, index: usize, x0: usize, y0: usize, scale: usize) {
    let digits: Vec<usize> = index
        .to_string()
        .bytes()
        .map(|b| (b - b'0') as usize)
        .collect();
    let pad = scale;
    let w = digits.len() * 4 * scale - scale + 2 * pad;
    let h = 5 * scale + 2 * pad;
    for y in y0..(y0 + h).min(img.height) {
        for x in x0..(x0 + w).min(img.width) {
            for c in 0..3 {
                img.set(c, x, y, 1.0);
            }
        }
    }
    for (k, &d) in digits.iter().enumerate() {
        let gx = x0 + pad + k * 4 * scale;
        for (row, bits) in GLYPHS[d].iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let (x, y) = (gx + col * scale + dx, y0 + pad + row * scale + dy);
                        if x < img.width && y < img.height {
                            for c in 0..3 {
                                img.set(c, x, y, LABEL_INK);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Tiles the composites on a white canvas, each resized to `cell × cell`
/// with its index drawn as dark digits in the cell's top-left corner.
pub fn build_grid(composites: &[RgbImage], cell: usize) -> Result<RgbImage, RewardError> {
    let layout = GridLayout::new(composites.len(), cell)?;
    let mut img = RgbImage::filled(layout.width(), layout.height(), [1.0; 3]);
    for (i, comp) in composites.iter().enumerate() {
        let (ox, oy) = layout.cell_origin(i);
        let tile = resize_nearest(comp, cell, cell);
        for y in 0..cell {
            for x in 0..cell {
                for c in 0..3 {
                    img.set(c, ox + x, oy + y, tile.get(c, x, y));
                }
            }
        }
        draw_label(&mut img, i, ox, oy, layout.glyph_scale);
    }
    Ok(img)
}
