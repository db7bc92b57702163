//! Procedural glyph images: a class-specific stroke pattern drawn in a
//! class-specific hue over a domain-specific background gradient. Domains
//! also rotate the glyph and shift its hue, so a new domain conflicts with
//! what was learned on the previous ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    let seed = parts.iter().fold(0x5EED_u64, |acc, &p| mix(acc ^ mix(p)));
    ChaCha8Rng::seed_from_u64(seed)
}

const TAG_CLASS: u64 = 1;
const TAG_DOMAIN: u64 = 2;
const TAG_SAMPLE: u64 = 3;

/// Per-sample hue shift, as a fraction of the colour wheel.
const HUE_JITTER: f32 = 0.12;
const NOISE: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSpec {
    /// Line segments `(x0, y0, x1, y1)` in the unit square.
    pub strokes: Vec<[f32; 4]>,
    /// Base hue, saturation and value; samples jitter the hue.
    pub hsv: [f32; 3],
    pub thickness: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub from: [f32; 3],
    pub to: [f32; 3],
    /// Gradient direction (radians).
    pub angle: f32,
    /// Amplitude and frequency of a diagonal stripe texture.
    pub stripes: (f32, f32),
    /// Added to every glyph hue.
    pub hue_shift: f32,
    /// Glyph rotation (radians).
    pub rotation: f32,
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl GlyphSpec {
    pub fn for_class(class: usize, seed: u64) -> Self {
        let mut rng = stream(&[TAG_CLASS, seed, class as u64]);
        let n = rng.gen_range(2..=4);
        let strokes = (0..n)
            .map(|_| {
                let mut p = [0f32; 4];
                for v in &mut p {
                    *v = rng.gen_range(0.15..0.85);
                }
                p
            })
            .collect();
        let hsv = [rng.gen(), rng.gen_range(0.6..1.0), rng.gen_range(0.7..1.0)];
        GlyphSpec {
            strokes,
            hsv,
            thickness: rng.gen_range(0.06..0.1),
        }
    }
}

impl DomainSpec {
    pub fn for_domain(domain: usize, seed: u64) -> Self {
        if domain == 0 {
            return DomainSpec {
                from: [0.15, 0.15, 0.15],
                to: [0.35, 0.35, 0.35],
                angle: 0.0,
                stripes: (0.0, 0.0),
                hue_shift: 0.0,
                rotation: 0.0,
            };
        }
        let mut rng = stream(&[TAG_DOMAIN, seed, domain as u64]);
        let h = rng.gen::<f32>();
        DomainSpec {
            from: hsv(h, rng.gen_range(0.3..0.9), rng.gen_range(0.2..0.9)),
            to: hsv(h + rng.gen_range(0.2..0.8), rng.gen_range(0.3..0.9), rng.gen_range(0.2..0.9)),
            angle: rng.gen_range(0.0..std::f32::consts::TAU),
            stripes: (rng.gen_range(0.05..0.25), rng.gen_range(2.0..6.0)),
            hue_shift: (domain as f32 * 0.382 + rng.gen_range(-0.05..0.05)).rem_euclid(1.0),
            rotation: domain as f32 * 1.2566 + rng.gen_range(-0.2..0.2),
        }
    }
}

fn seg_dist(px: f32, py: f32, s: &[f32; 4]) -> f32 {
    let (dx, dy) = (s[2] - s[0], s[3] - s[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - s[0]) * dx + (py - s[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (s[0] + t * dx - px, s[1] + t * dy - py);
    (cx * cx + cy * cy).sqrt()
}

/// Renders one `channels×size×size` image in `[0, 1]`. A pure function of its arguments.
pub fn render(class: usize, domain: usize, index: usize, seed: u64, size: usize, channels: usize) -> Vec<f32> {
    let glyph = GlyphSpec::for_class(class, seed);
    let dom = DomainSpec::for_domain(domain, seed);
    let mut rng = stream(&[TAG_SAMPLE, seed, class as u64, domain as u64, index as u64]);
    let scale = rng.gen_range(0.85f32..1.15);
    let (tx, ty) = (rng.gen_range(-0.08f32..0.08), rng.gen_range(-0.08f32..0.08));
    let rot = dom.rotation + rng.gen_range(-0.15f32..0.15);
    let shade = rng.gen_range(0.85f32..1.15);
    let phase = rng.gen_range(0.0f32..std::f32::consts::TAU);
    let [h, sat, val] = glyph.hsv;
    let color = hsv(h + dom.hue_shift + rng.gen_range(-HUE_JITTER..HUE_JITTER), sat, val);
    let clutter = [rng.gen::<f32>(), rng.gen(), rng.gen(), rng.gen()];
    let clutter_color = hsv(rng.gen(), rng.gen_range(0.3..1.0), rng.gen_range(0.4..1.0));
    let (sr, cr) = rot.sin_cos();
    let (sa, ca) = dom.angle.sin_cos();
    let mut out = vec![0f32; channels * size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f32 + 0.5) / size as f32, (y as f32 + 0.5) / size as f32);
            // inverse transform into glyph space around the centre
            let (cu, cv) = (u - 0.5 - tx, v - 0.5 - ty);
            let (ru, rv) = ((cr * cu + sr * cv) / scale + 0.5, (-sr * cu + cr * cv) / scale + 0.5);
            let d = glyph.strokes.iter().map(|s| seg_dist(ru, rv, s)).fold(f32::INFINITY, f32::min);
            let ink = (1.0 - (d - glyph.thickness * 0.5) * size as f32 * 0.7).clamp(0.0, 1.0);
            let dc = seg_dist(u, v, &clutter);
            let ink_c = (1.0 - (dc - 0.03) * size as f32 * 0.7).clamp(0.0, 1.0) * (1.0 - ink);
            let t = ((u - 0.5) * ca + (v - 0.5) * sa + 0.5).clamp(0.0, 1.0);
            let stripe = dom.stripes.0 * ((u + v) * dom.stripes.1 * std::f32::consts::TAU + phase).sin();
            for c in 0..channels {
                let ch = c.min(2);
                let bg = dom.from[ch] + (dom.to[ch] - dom.from[ch]) * t + stripe;
                let fg = (color[ch] * shade).min(1.0);
                let noise: f32 = rng.gen_range(-NOISE..NOISE);
                let px = bg * (1.0 - ink - ink_c) + fg * ink + clutter_color[ch] * ink_c + noise;
                out[(c * size + y) * size + x] = px.clamp(0.0, 1.0);
            }
        }
    }
    out
}
