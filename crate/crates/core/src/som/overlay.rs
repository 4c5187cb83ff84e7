//! Numeral overlays for Set-of-Mark prompting. Each mark is drawn as white
//! digits on a black plate centred on the region anchor; no pixel outside
//! the plate is touched.

use image::{Rgb, RgbImage};

use super::marks::MarkedRegionSet;

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

/// Inclusive-exclusive pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlateBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PlateBox {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Glyph scale for an image: one font pixel per 96 image pixels of the
/// shorter side, at least 1.
pub fn default_scale(width: u32, height: u32) -> u32 {
    (width.min(height) / 96).max(1)
}

fn plate_size(mark: u32, scale: u32) -> (u32, u32) {
    let digits = mark.to_string().len() as u32;
    let w = digits * 3 * scale + (digits - 1) * scale + 2 * scale;
    let h = 5 * scale + 2 * scale;
    (w, h)
}

/// Plate box for `mark` centred on `anchor`, clipped to the image.
pub fn plate_box(mark: u32, anchor: (u32, u32), width: u32, height: u32, scale: u32) -> PlateBox {
    let (pw, ph) = plate_size(mark, scale);
    let x0 = anchor.0.saturating_sub(pw / 2);
    let y0 = anchor.1.saturating_sub(ph / 2);
    PlateBox {
        x0,
        y0,
        x1: (x0 + pw).min(width),
        y1: (y0 + ph).min(height),
    }
}

pub fn draw_numeral(img: &mut RgbImage, mark: u32, anchor: (u32, u32), scale: u32) -> PlateBox {
    let b = plate_box(mark, anchor, img.width(), img.height(), scale);
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            img.put_pixel(x, y, Rgb([0, 0, 0]));
        }
    }
    let mut gx = b.x0 + scale;
    for ch in mark.to_string().bytes() {
        let glyph = GLYPHS[(ch - b'0') as usize];
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3u32 {
                if bits & (0b100 >> col) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let x = gx + col * scale + dx;
                        let y = b.y0 + scale + row as u32 * scale + dy;
                        if b.contains(x, y) {
                            img.put_pixel(x, y, Rgb([255, 255, 255]));
                        }
                    }
                }
            }
        }
        gx += 4 * scale;
    }
    b
}

/// Copy of `img` with every mark drawn at its anchor.
pub fn render_marks(img: &RgbImage, marks: &MarkedRegionSet) -> (RgbImage, Vec<PlateBox>) {
    let mut out = img.clone();
    let scale = default_scale(img.width(), img.height());
    let boxes = marks
        .regions
        .iter()
        .map(|r| draw_numeral(&mut out, r.mark, r.anchor, scale))
        .collect();
    (out, boxes)
}
