//! Procedural face-like images and morphs between them.
//!
//! Images are [3, H, W] row-major in [0, 1], quantized to the 8-bit grid
//! at generation time so that files round-trip bit for bit. The faces are
//! deliberately structured (elliptical head, eyes, nose, mouth, per-identity
//! texture) so that blending two of them leaves geometric ghosting a
//! detector can learn, while staying cheap enough to render by the hundred.

use crate::error::{CoreError, Result};
use crate::rng;
use rand_core::RngCore;

/// Snap one value to the 8-bit grid used by the dataset file format.
pub fn quantize_to_8bit(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Everything that makes one synthetic person look like themselves across
/// their bona fide captures. All quantities are relative to the image so
/// the same latent renders at any size.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityLatent {
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub skin: [f64; 3],
    pub background: [f64; 3],
    pub eye_dx: f64,
    pub eye_y: f64,
    pub eye_r: f64,
    pub nose_len: f64,
    pub nose_w: f64,
    pub mouth_y: f64,
    pub mouth_w: f64,
    pub mouth_curve: f64,
    pub tex_freq: (f64, f64),
    pub tex_phase: (f64, f64),
    pub tex_amp: f64,
}

/// Derive an identity's latent from the dataset seed and its index.
pub fn identity_latent(seed: u64, identity: u32) -> IdentityLatent {
    let mut r = rng::stream(seed, "identity", identity as u64);
    let mut jit = |span: f64| rng::uniform(&mut r, -span, span);
    let center = (0.5 + jit(0.03), 0.52 + jit(0.03));
    let radii = (0.28 + jit(0.04), 0.36 + jit(0.04));
    let skin = [
        (0.82 + jit(0.12)).clamp(0.2, 0.95),
        (0.66 + jit(0.12)).clamp(0.2, 0.95),
        (0.54 + jit(0.12)).clamp(0.2, 0.95),
    ];
    let background = [
        (0.35 + jit(0.15)).clamp(0.05, 0.9),
        (0.42 + jit(0.15)).clamp(0.05, 0.9),
        (0.55 + jit(0.15)).clamp(0.05, 0.9),
    ];
    IdentityLatent {
        center,
        radii,
        skin,
        background,
        eye_dx: 0.40 + jit(0.08),
        eye_y: 0.26 + jit(0.06),
        eye_r: 0.15 + jit(0.04),
        nose_len: 0.30 + jit(0.07),
        nose_w: 0.10 + jit(0.03),
        mouth_y: 0.48 + jit(0.08),
        mouth_w: 0.42 + jit(0.10),
        mouth_curve: jit(0.12),
        tex_freq: (2.0 + rng::unit(&mut r) * 4.0, 2.0 + rng::unit(&mut r) * 4.0),
        tex_phase: (
            rng::uniform(&mut r, 0.0, std::f64::consts::TAU),
            rng::uniform(&mut r, 0.0, std::f64::consts::TAU),
        ),
        tex_amp: 0.02 + rng::unit(&mut r) * 0.03,
    }
}

/// One bona fide capture: an identity latent plus the per-capture seed
/// driving pose jitter, brightness, and sensor-style noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFaceSpec {
    pub seed: u64,
    pub size: usize,
    pub latent: IdentityLatent,
    pub noise_level: f64,
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Soft inside-the-ellipse mask: 1 well inside, 0 well outside.
fn ellipse(px: f64, py: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let nx = (px - cx) / rx;
    let ny = (py - cy) / ry;
    1.0 - smoothstep(0.85, 1.15, nx * nx + ny * ny)
}

fn lerp3(base: [f64; 3], top: [f64; 3], m: f64) -> [f64; 3] {
    [
        base[0] + (top[0] - base[0]) * m,
        base[1] + (top[1] - base[1]) * m,
        base[2] + (top[2] - base[2]) * m,
    ]
}

pub fn gen_bonafide(spec: &SyntheticFaceSpec) -> Vec<f64> {
    let s = spec.size;
    let l = &spec.latent;
    let mut jr = rng::stream(spec.seed, "face-jitter", 0);
    let jx = rng::uniform(&mut jr, -0.75, 0.75) / s as f64;
    let jy = rng::uniform(&mut jr, -0.75, 0.75) / s as f64;
    let brightness = rng::uniform(&mut jr, 0.95, 1.05);
    let mut nr = rng::stream(spec.seed, "face-noise", 0);

    let (cx, cy) = (l.center.0 + jx, l.center.1 + jy);
    let (rx, ry) = l.radii;
    let eye_cy = cy - l.eye_y * ry;
    let eye_rx = l.eye_r * rx;
    let eye_ry = 0.6 * l.eye_r * ry;
    let mouth_cy = cy + l.mouth_y * ry;

    let mut img = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let px = (x as f64 + 0.5) / s as f64;
            let py = (y as f64 + 0.5) / s as f64;

            // Background: gentle vertical gradient over the identity tint.
            let g = 0.85 + 0.3 * py;
            let mut c = [l.background[0] * g, l.background[1] * g, l.background[2] * g];

            // Head with multiplicative texture.
            let tex = 1.0
                + l.tex_amp
                    * (std::f64::consts::TAU * (l.tex_freq.0 * px) + l.tex_phase.0).sin()
                    * (std::f64::consts::TAU * (l.tex_freq.1 * py) + l.tex_phase.1).sin();
            let skin = [l.skin[0] * tex, l.skin[1] * tex, l.skin[2] * tex];
            c = lerp3(c, skin, ellipse(px, py, cx, cy, rx, ry));

            // Eyes.
            let dark = [0.13, 0.11, 0.10];
            for side in [-1.0, 1.0] {
                let m = ellipse(px, py, cx + side * l.eye_dx * rx, eye_cy, eye_rx, eye_ry);
                c = lerp3(c, dark, m);
            }

            // Nose: a slim vertical ellipse in a slightly deeper skin tone.
            let nose = [l.skin[0] * 0.82, l.skin[1] * 0.80, l.skin[2] * 0.80];
            let m = ellipse(px, py, cx, cy + 0.08 * ry, l.nose_w * rx, l.nose_len * ry);
            c = lerp3(c, nose, m);

            // Mouth, bowed up or down by the curve term.
            let bow = l.mouth_curve * ((px - cx) / rx).powi(2);
            let m = ellipse(px, py, cx, mouth_cy + bow * ry, l.mouth_w * rx, 0.07 * ry);
            c = lerp3(c, [0.55, 0.22, 0.22], m);

            // Texture-modulated sensor noise, shared across channels.
            let grain = 0.6
                + 0.4 * (std::f64::consts::TAU * (px * 3.0 + py * 5.0) + l.tex_phase.0).sin();
            let noise = spec.noise_level * grain * rng::gaussian(&mut nr);

            for ch in 0..3 {
                img[ch * s * s + y * s + x] = quantize_to_8bit(c[ch] * brightness + noise);
            }
        }
    }
    img
}

/// Morph-generation knobs. The defaults match the main dataset; shifted
/// evaluation variants move them.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphParams {
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    /// Peak displacement in pixels at size 32, scaled linearly with size.
    pub warp_amplitude: f64,
    /// Highest spatial frequency (cycles per image) of the warp waves.
    pub warp_cycles: u32,
}

impl Default for MorphParams {
    fn default() -> Self {
        MorphParams { alpha_lo: 0.3, alpha_hi: 0.7, warp_amplitude: 2.0, warp_cycles: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Wave {
    amp: f64,
    fx: f64,
    fy: f64,
    phase: f64,
}

impl Wave {
    fn eval(&self, u: f64, v: f64) -> f64 {
        self.amp * (std::f64::consts::TAU * (self.fx * u + self.fy * v) + self.phase).sin()
    }
}

/// A smooth displacement field: three low-frequency plane waves per axis.
/// Stands in for the geometric normalization step of landmark morphing.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    dx: [Wave; 3],
    dy: [Wave; 3],
    size: f64,
}

impl WarpField {
    pub fn identity() -> Self {
        let zero = Wave { amp: 0.0, fx: 0.0, fy: 0.0, phase: 0.0 };
        WarpField { dx: [zero; 3], dy: [zero; 3], size: 1.0 }
    }

    pub fn from_seed(seed: u64, size: usize, params: &MorphParams) -> Self {
        let mut r = rng::stream(seed, "warp", 0);
        // Budget split evenly so the summed displacement cannot exceed the
        // configured peak.
        let amp = params.warp_amplitude * size as f64 / 32.0 / 3.0;
        let wave = |r: &mut dyn RngCore| Wave {
            amp,
            fx: (1 + rng::index(r, params.warp_cycles as usize)) as f64,
            fy: (1 + rng::index(r, params.warp_cycles as usize)) as f64,
            phase: rng::uniform(r, 0.0, std::f64::consts::TAU),
        };
        WarpField {
            dx: [wave(&mut r), wave(&mut r), wave(&mut r)],
            dy: [wave(&mut r), wave(&mut r), wave(&mut r)],
            size: size as f64,
        }
    }

    /// Displacement in pixels at pixel coordinates (x, y).
    pub fn displacement(&self, x: f64, y: f64) -> (f64, f64) {
        let u = x / self.size;
        let v = y / self.size;
        (
            self.dx.iter().map(|w| w.eval(u, v)).sum(),
            self.dy.iter().map(|w| w.eval(u, v)).sum(),
        )
    }
}

/// Pull-style warp with bilinear sampling; coordinates clamp at the border.
pub fn warp_image(img: &[f64], h: usize, w: usize, field: &WarpField) -> Vec<f64> {
    assert_eq!(img.len(), 3 * h * w, "warp_image: not a [3, {h}, {w}] image");
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = field.displacement(x as f64, y as f64);
            let sx = (x as f64 + dx).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + dy).clamp(0.0, (h - 1) as f64);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for ch in 0..3 {
                let base = ch * h * w;
                let v00 = img[base + y0 * w + x0];
                let v01 = img[base + y0 * w + x1];
                let v10 = img[base + y1 * w + x0];
                let v11 = img[base + y1 * w + x1];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out[base + y * w + x] = top + (bot - top) * fy;
            }
        }
    }
    out
}

/// alpha * a + (1 - alpha) * b, clamped to [0, 1].
pub fn blend(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (alpha * x + (1.0 - alpha) * y).clamp(0.0, 1.0))
        .collect()
}

/// Blend two warped bona fides into a morph. One field is shared by both
/// sources: both faces are pulled toward the same geometry before mixing,
/// mirroring how landmark alignment treats a pair.
#[allow(clippy::too_many_arguments)]
pub fn gen_morph(
    a: &[f64],
    id_a: u32,
    b: &[f64],
    id_b: u32,
    h: usize,
    w: usize,
    alpha: f64,
    warp_seed: u64,
    params: &MorphParams,
) -> Result<Vec<f64>> {
    if id_a == id_b {
        return Err(CoreError::contract(
            "gen_morph",
            format!("both sources belong to identity {id_a}"),
        ));
    }
    if !(0.3..=0.7).contains(&alpha) {
        return Err(CoreError::contract(
            "gen_morph",
            format!("alpha {alpha} outside [0.3, 0.7]"),
        ));
    }
    let field = WarpField::from_seed(warp_seed, w.max(h), params);
    let wa = warp_image(a, h, w, &field);
    let wb = warp_image(b, h, w, &field);
    Ok(blend(&wa, &wb, alpha).iter().map(|&v| quantize_to_8bit(v)).collect())
}
