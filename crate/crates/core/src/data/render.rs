//! Contact sheet of bags: one column per bag, the bag label drawn on top.

use super::{Bag, InstancePool, ImageInstance};
use crate::error::{Error, Result};

const GAP: usize = 2;
const GLYPH_SCALE: usize = 4;

/// 3×5 bitmaps for 0-9, one row per entry, most significant bit on the left.
const DIGITS: [[u8; 5]; 10] = [
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

/// Renders `bags` side by side on a black grayscale canvas. The top tile of each column
/// shows the bag label (base 10); the instances follow in manifest order.
pub fn render_contact_sheet(pool: &InstancePool, bags: &[Bag]) -> Result<ImageInstance> {
    let shape = pool.shape;
    if shape.channels != 1 {
        return Err(Error::Channels {
            expected: 1,
            actual: shape.channels,
        });
    }
    let rows = 1 + bags.iter().map(|b| b.instance_ids.len()).max().unwrap_or(0);
    let (th, tw) = (shape.height, shape.width);
    let width = bags.len() * (tw + GAP) + GAP;
    let height = rows * (th + GAP) + GAP;
    let mut pixels = vec![0.0f32; width * height];
    let mut blit = |row: usize, col: usize, tile: &[f32]| {
        let (y0, x0) = (GAP + row * (th + GAP), GAP + col * (tw + GAP));
        for y in 0..th {
            let dst = (y0 + y) * width + x0;
            pixels[dst..dst + tw].copy_from_slice(&tile[y * tw..(y + 1) * tw]);
        }
    };
    for (col, bag) in bags.iter().enumerate() {
        blit(0, col, &label_tile(bag.bag_label, th, tw));
        for (row, &id) in bag.instance_ids.iter().enumerate() {
            blit(row + 1, col, &pool.get(id)?.pixels);
        }
    }
    Ok(ImageInstance {
        id: 0,
        height,
        width,
        channels: 1,
        pixels,
        true_label: None,
    })
}

fn label_tile(label: usize, h: usize, w: usize) -> Vec<f32> {
    let text: Vec<usize> = label
        .to_string()
        .bytes()
        .map(|b| (b - b'0') as usize)
        .collect();
    let mut scale = GLYPH_SCALE;
    while scale > 1 && (text.len() * 4 * scale > w || 5 * scale > h) {
        scale -= 1;
    }
    let text_w = text.len() * 4 * scale - scale;
    let x0 = w.saturating_sub(text_w) / 2;
    let y0 = h.saturating_sub(5 * scale) / 2;
    let mut tile = vec![0.0f32; h * w];
    for (i, &d) in text.iter().enumerate() {
        for (r, bits) in DIGITS[d].iter().enumerate() {
            for c in 0..3 {
                if bits & (0b100 >> c) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let y = y0 + r * scale + dy;
                        let x = x0 + (i * 4 + c) * scale + dx;
                        if y < h && x < w {
                            tile[y * w + x] = 1.0;
                        }
                    }
                }
            }
        }
    }
    tile
}
