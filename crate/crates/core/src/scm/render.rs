//! Pixel rendering of the semantic glyph (H_s) and the domain background
//! (H_d). Only integer arithmetic and additions of uniform noise are used so
//! the output is identical on every platform.

use rand::Rng;

use super::{Exogenous, ScmSpec};
use crate::rng;
use crate::scm::image::PixelMask;

/// Glyph bitmaps, one per class, on a 5x5 cell grid.
const GLYPHS: [[&str; 5]; 10] = [
    ["..#..", "..#..", "#####", "..#..", "..#.."],
    ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
    ["#####", "#...#", "#...#", "#...#", "#####"],
    ["#####", ".....", "#####", ".....", "#####"],
    ["#.#.#", "#.#.#", "#.#.#", "#.#.#", "#.#.#"],
    ["#####", "..#..", "..#..", "..#..", "..#.."],
    ["#....", "#....", "#....", "#....", "#####"],
    ["..#..", ".#.#.", "#...#", ".#.#.", "..#.."],
    ["#...#", "#...#", "#####", "#...#", "#...#"],
    ["#####", "...#.", "..#..", ".#...", "#####"],
];

pub const MAX_CLASSES: usize = GLYPHS.len();

const GLYPH_CELLS: usize = 5;
const NORMAL_INK: f32 = 1.0;
const BACKGROUND_LOW: f32 = 0.1;
const BACKGROUND_SPAN: f32 = 0.35;
const STRIPE_AMPLITUDE: f32 = 0.12;

/// Side of one glyph cell in pixels.
pub fn glyph_cell(spec: &ScmSpec) -> usize {
    (spec.image_side / 16).max(1)
}

pub fn glyph_side(spec: &ScmSpec) -> usize {
    GLYPH_CELLS * glyph_cell(spec)
}

/// Highest ink value the domain background can reach before noise.
pub fn background_ceiling() -> f32 {
    BACKGROUND_LOW + BACKGROUND_SPAN + STRIPE_AMPLITUDE
}

fn background(spec: &ScmSpec, domain: usize, phase: u32) -> Vec<f32> {
    let side = spec.image_side;
    let orientation = domain % 4;
    let period = 3 + (domain / 4) % 3;
    let level = if spec.num_domains > 1 {
        BACKGROUND_LOW + BACKGROUND_SPAN * domain as f32 / (spec.num_domains - 1) as f32
    } else {
        BACKGROUND_LOW
    };
    let mut pixels = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let coord = match orientation {
                0 => r,
                1 => c,
                2 => r + c,
                _ => r + side - c,
            };
            let stripe = (coord + phase as usize).is_multiple_of(period);
            pixels.push(if stripe {
                level + STRIPE_AMPLITUDE
            } else {
                level
            });
        }
    }
    pixels
}

fn add_noise(spec: &ScmSpec, u: &Exogenous, pixels: &mut [f32]) {
    if spec.noise <= 0.0 {
        return;
    }
    let mut rng = rng::stream(u.noise_seed, &[]);
    for p in pixels.iter_mut() {
        *p += rng.gen_range(-spec.noise..=spec.noise);
    }
}

/// Glyph support and ink level; independent of the domain.
fn glyph(spec: &ScmSpec, semantics: usize, u: &Exogenous) -> (PixelMask, f32) {
    let side = spec.image_side;
    let cell = glyph_cell(spec);
    let (ink, dropout) = if u.hard {
        (spec.hard_ink, spec.hard_dropout)
    } else {
        (NORMAL_INK, spec.stroke_dropout)
    };
    let bitmap = &GLYPHS[semantics];
    let mut mask = PixelMask::empty(side);
    let mut first = None;
    let mut rng = rng::stream(u.stroke_seed, &[]);
    for (gr, row) in bitmap.iter().enumerate() {
        for (gc, ch) in row.bytes().enumerate() {
            if ch != b'#' {
                continue;
            }
            for dr in 0..cell {
                for dc in 0..cell {
                    let r = u.glyph_row as usize + gr * cell + dr;
                    let c = u.glyph_col as usize + gc * cell + dc;
                    first.get_or_insert((r, c));
                    // one draw per stroke pixel keeps the stream aligned
                    let dropped = rng.gen::<f64>() < dropout;
                    if !dropped {
                        mask.set(r, c, true);
                    }
                }
            }
        }
    }
    if mask.count() == 0 {
        let (r, c) = first.expect("every glyph has ink");
        mask.set(r, c, true);
    }
    (mask, ink)
}

/// Renders X from (S, D, u) and returns the pixels with the object support.
pub fn render(
    spec: &ScmSpec,
    semantics: usize,
    domain: usize,
    u: &Exogenous,
) -> (Vec<f32>, PixelMask) {
    let mut pixels = background(spec, domain, u.texture_phase);
    let (mask, ink) = glyph(spec, semantics, u);
    for (p, &on) in pixels.iter_mut().zip(mask.bits()) {
        if on {
            *p = ink;
        }
    }
    add_noise(spec, u, &mut pixels);
    (pixels, mask)
}

/// The same exogenous valuation rendered without the object.
pub fn render_domain_only(spec: &ScmSpec, domain: usize, u: &Exogenous) -> Vec<f32> {
    let mut pixels = background(spec, domain, u.texture_phase);
    add_noise(spec, u, &mut pixels);
    pixels
}
