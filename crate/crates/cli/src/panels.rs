//! Figure panels: per-view input/prediction grids and original/optimized/diff
//! parameter rows.

use anyhow::Result;
use image::{ImageFormat, Rgb, RgbImage};
use ndarray::ArrayView2;

use sofa_core::{ParamChannel, ParamMaps, RgbImage as ViewImage, ViewSample};

pub const PHASE1_COLUMNS: [&str; 7] = ["PRE", "TIME", "FORCE", "TEMP", "POWER", "PRED", "POST"];
pub const PHASE3_ROWS: [&str; 3] = ["ORIGINAL", "OPTIMIZED", "DIFF"];

const GAP: u32 = 2;
const SCALE: u32 = 2;
const HEADER: u32 = 5 * SCALE + 2 * GAP;
const BACKGROUND: Rgb<u8> = Rgb([24, 24, 24]);
const BLANK: Rgb<u8> = Rgb([64, 64, 64]);
const INK: Rgb<u8> = Rgb([235, 235, 235]);
const NEUTRAL: Rgb<u8> = Rgb([255, 255, 255]);

/// 3x5 glyphs, rows top to bottom, three bits per row.
const GLYPHS: &[(char, &str)] = &[
    ('A', "010101111101101"),
    ('B', "110101110101110"),
    ('C', "011100100100011"),
    ('D', "110101101101110"),
    ('E', "111100110100111"),
    ('F', "111100110100100"),
    ('G', "011100101101011"),
    ('H', "101101111101101"),
    ('I', "111010010010111"),
    ('J', "001001001101010"),
    ('K', "101101110101101"),
    ('L', "100100100100111"),
    ('M', "101111111101101"),
    ('N', "110101101101101"),
    ('O', "010101101101010"),
    ('P', "110101110100100"),
    ('Q', "010101101110011"),
    ('R', "110101110101101"),
    ('S', "011100010001110"),
    ('T', "111010010010010"),
    ('U', "101101101101111"),
    ('V', "101101101101010"),
    ('W', "101101111111101"),
    ('X', "101101010101101"),
    ('Y', "101101010010010"),
    ('Z', "111001010100111"),
    ('0', "111101101101111"),
    ('1', "010110010010111"),
    ('2', "110001010100111"),
    ('3', "110001010001110"),
    ('4', "101101111001001"),
    ('5', "111100110001110"),
    ('6', "011100111101111"),
    ('7', "111001010010010"),
    ('8', "111101111101111"),
    ('9', "111101111001110"),
    ('_', "000000000000111"),
    ('-', "000000111000000"),
    ('/', "001001010100100"),
];

pub fn text_width(text: &str) -> u32 {
    text.chars().count() as u32 * 4 * SCALE
}

/// Draws upper-cased `text` with its top-left corner at `(x, y)`; characters
/// without a glyph render as spaces.
pub fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, color: Rgb<u8>) {
    for (k, ch) in text.to_ascii_uppercase().chars().enumerate() {
        let Some((_, bits)) = GLYPHS.iter().find(|(c, _)| *c == ch) else {
            continue;
        };
        let x0 = x + k as u32 * 4 * SCALE;
        for (b, bit) in bits.bytes().enumerate() {
            if bit != b'1' {
                continue;
            }
            let (gx, gy) = ((b % 3) as u32, (b / 3) as u32);
            for dy in 0..SCALE {
                for dx in 0..SCALE {
                    let (px, py) = (x0 + gx * SCALE + dx, y + gy * SCALE + dy);
                    if px < img.width() && py < img.height() {
                        img.put_pixel(px, py, color);
                    }
                }
            }
        }
    }
}

/// Sequential map for normalized parameter values: black, red, yellow, white.
pub fn heat(v: f32) -> Rgb<u8> {
    let c = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([c(3.0 * v), c(3.0 * v - 1.0), c(3.0 * v - 2.0)])
}

/// Diverging map: white at zero, blue for increases, red for decreases.
pub fn diverging(d: f32, scale: f32) -> Rgb<u8> {
    if scale <= 0.0 || d == 0.0 {
        return NEUTRAL;
    }
    let t = (d.abs() / scale).clamp(0.0, 1.0);
    let fade = ((1.0 - t) * 255.0).round() as u8;
    if d > 0.0 {
        Rgb([fade, fade, 255])
    } else {
        Rgb([255, fade, fade])
    }
}

enum Tile<'a> {
    Rgb(&'a ViewImage),
    Heat(ArrayView2<'a, f32>),
    Diff(ArrayView2<'a, f32>, f32),
    Missing,
}

struct Grid {
    img: RgbImage,
    tile: u32,
    left: u32,
}

impl Grid {
    fn new(rows: u32, cols: u32, tile: u32, left: u32) -> Self {
        let w = left + cols * (tile + GAP) + GAP;
        let h = HEADER + rows * (tile + GAP) + GAP;
        Self {
            img: RgbImage::from_pixel(w, h, BACKGROUND),
            tile,
            left,
        }
    }

    fn origin(&self, row: u32, col: u32) -> (u32, u32) {
        (
            self.left + GAP + col * (self.tile + GAP),
            HEADER + GAP + row * (self.tile + GAP),
        )
    }

    fn header(&mut self, col: u32, text: &str) {
        let (x, _) = self.origin(0, col);
        draw_text(&mut self.img, x, GAP, text, INK);
    }

    fn row_label(&mut self, row: u32, text: &str) {
        let (_, y) = self.origin(row, 0);
        draw_text(&mut self.img, GAP, y + GAP, text, INK);
    }

    fn put(&mut self, row: u32, col: u32, tile: Tile) {
        let (x0, y0) = self.origin(row, col);
        let n = self.tile;
        for i in 0..n {
            for j in 0..n {
                let (ii, jj) = (i as usize, j as usize);
                let px = match &tile {
                    Tile::Rgb(im) => {
                        let c =
                            |k: usize| (im.0[[k, ii, jj]].clamp(0.0, 1.0) * 255.0).round() as u8;
                        Rgb([c(0), c(1), c(2)])
                    }
                    Tile::Heat(a) => heat(a[[ii, jj]]),
                    Tile::Diff(a, s) => diverging(a[[ii, jj]], *s),
                    Tile::Missing => BLANK,
                };
                self.img.put_pixel(x0 + j, y0 + i, px);
            }
        }
        if matches!(tile, Tile::Missing) {
            draw_text(&mut self.img, x0 + GAP, y0 + GAP, "N/A", INK);
        }
    }
}

/// One row per view with columns [`PHASE1_COLUMNS`]. Missing predictions or
/// targets become labeled blank tiles.
pub fn phase1_panel(samples: &[&ViewSample], predicted: &[Option<ViewImage>]) -> Result<RgbImage> {
    let tile = samples
        .first()
        .map(|s| s.pre.height() as u32)
        .ok_or_else(|| anyhow::anyhow!("no views to draw"))?;
    let mut g = Grid::new(samples.len() as u32, PHASE1_COLUMNS.len() as u32, tile, 0);
    for (c, name) in PHASE1_COLUMNS.iter().enumerate() {
        g.header(c as u32, name);
    }
    for (r, s) in samples.iter().enumerate() {
        let r = r as u32;
        g.put(r, 0, Tile::Rgb(&s.pre));
        for ch in ParamChannel::ALL {
            let plane = s.params.channels.index_axis(ndarray::Axis(0), ch.index());
            g.put(r, 1 + ch.index() as u32, Tile::Heat(plane));
        }
        match predicted.get(r as usize).and_then(|p| p.as_ref()) {
            Some(p) => g.put(r, 5, Tile::Rgb(p)),
            None => g.put(r, 5, Tile::Missing),
        }
        match &s.target {
            Some(t) => g.put(r, 6, Tile::Rgb(&t.post)),
            None => g.put(r, 6, Tile::Missing),
        }
    }
    Ok(g.img)
}

/// Rows [`PHASE3_ROWS`] by one column per view for a single channel. The diff
/// row is optimized minus original on a symmetric scale set by the largest
/// absolute change.
pub fn phase3_panel(
    views: &[&str],
    original: &[ParamMaps],
    optimized: &[Option<ParamMaps>],
    channel: ParamChannel,
) -> Result<RgbImage> {
    let tile = original
        .first()
        .map(|p| p.height() as u32)
        .ok_or_else(|| anyhow::anyhow!("no views to draw"))?;
    let left = PHASE3_ROWS.iter().map(|r| text_width(r)).max().unwrap_or(0) + GAP;
    let mut g = Grid::new(3, original.len() as u32, tile, left);
    for (r, name) in PHASE3_ROWS.iter().enumerate() {
        g.row_label(r as u32, name);
    }
    let k = channel.index();
    let diffs: Vec<Option<ndarray::Array2<f32>>> = original
        .iter()
        .enumerate()
        .map(|(v, o)| {
            optimized.get(v).and_then(|p| p.as_ref()).map(|p| {
                &p.channels.index_axis(ndarray::Axis(0), k)
                    - &o.channels.index_axis(ndarray::Axis(0), k)
            })
        })
        .collect();
    let scale = diffs
        .iter()
        .flatten()
        .flat_map(|d| d.iter())
        .fold(0.0f32, |m, v| m.max(v.abs()));
    for (v, o) in original.iter().enumerate() {
        let c = v as u32;
        if let Some(name) = views.get(v) {
            g.header(c, name);
        }
        g.put(0, c, Tile::Heat(o.channels.index_axis(ndarray::Axis(0), k)));
        match (optimized.get(v).and_then(|p| p.as_ref()), &diffs[v]) {
            (Some(p), Some(d)) => {
                g.put(1, c, Tile::Heat(p.channels.index_axis(ndarray::Axis(0), k)));
                g.put(2, c, Tile::Diff(d.view(), scale));
            }
            _ => {
                g.put(1, c, Tile::Missing);
                g.put(2, c, Tile::Missing);
            }
        }
    }
    Ok(g.img)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Grid cell count `(rows, columns)` of a panel drawn with tiles of `tile`
/// pixels and a left label margin of `left` pixels.
pub fn grid_shape(img: &RgbImage, tile: u32, left: u32) -> (u32, u32) {
    (
        (img.height() - HEADER - GAP) / (tile + GAP),
        (img.width() - left - GAP) / (tile + GAP),
    )
}

pub fn phase3_left_margin() -> u32 {
    PHASE3_ROWS.iter().map(|r| text_width(r)).max().unwrap_or(0) + GAP
}
