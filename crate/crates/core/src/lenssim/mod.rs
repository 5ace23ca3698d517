//! Parametric mock-lens images.
//!
//! A scene is a bulge + disc foreground galaxy, optionally a background
//! source lensed by a singular isothermal sphere (SIS) centred on the galaxy,
//! and optionally an unlensed companion galaxy. Each band is a colour-scaled
//! sum of those components, blurred by a normalised Gaussian PSF, plus
//! Gaussian pixel noise.
//!
//! Pixel values are surface brightness (flux per square arcsecond); the flux
//! in a stamp is the pixel sum times `pixel_scale^2`.

mod dataset;

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, gamma_lr};

pub use dataset::{
    generate_dataset, generate_stamps, load_dataset, read_manifest, read_stamp, sample_scene, stamp_id, stamp_seed,
    write_stamp, ManifestRow, SimRanges, MANIFEST_FILE, STAMP_MAGIC, STAMP_VERSION,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sérsic index from the bulge-to-total ratio and a uniform draw
/// `x` in `[-1, 1]`: `log10(n_s) = 0.4 log10(max(B/T, 0.03)) + 0.1 x`.
pub fn sersic_index(bulge_to_total: f64, x: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::Contract(format!("sersic draw x = {x} outside [-1, 1]")));
    }
    if !(0.0..=1.0).contains(&bulge_to_total) {
        return Err(Error::Contract(format!("bulge-to-total {bulge_to_total} outside [0, 1]")));
    }
    Ok(10f64.powf(0.4 * bulge_to_total.max(0.03).log10() + 0.1 * x))
}

/// The constant `b_n` for which a radius of one `scale_radius` encloses half
/// the light: the root of `P(2n, b) = 1/2`, with `P` the regularised lower
/// incomplete gamma function.
pub fn half_light_constant(n_s: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 2.0 * n_s + 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gamma_lr(2.0 * n_s, mid) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// One elliptical Sérsic component `I(R) = I0 exp(-k R^(1/n_s))`, where `R`
/// is the elliptical radius in units of `scale_radius`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SersicParams {
    pub i0: f64,
    pub n_s: f64,
    pub k: f64,
    /// Arcseconds.
    pub scale_radius: f64,
    /// Minor-to-major axis ratio.
    pub axis_ratio: f64,
    /// Position angle of the major axis, radians.
    pub orientation: f64,
    /// Offset of the centre from the stamp centre, arcseconds (x right, y down).
    pub center: [f64; 2],
}

impl SersicParams {
    /// Dimensionless elliptical radius of the point `(x, y)` arcsec. The
    /// circularised form `sqrt(q u^2 + v^2 / q)` preserves area.
    pub fn radius_at(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let (s, c) = self.orientation.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (self.axis_ratio * u * u + v * v / self.axis_ratio).sqrt() / self.scale_radius
    }

    pub fn intensity(&self, radius: f64) -> f64 {
        self.i0 * (-self.k * radius.powf(1.0 / self.n_s)).exp()
    }

    /// `2 pi n Gamma(2n) I0 r_s^2 / k^(2n)`.
    pub fn total_flux(&self) -> f64 {
        let n = self.n_s;
        2.0 * PI * n * gamma(2.0 * n) * self.i0 * self.scale_radius.powi(2) / self.k.powf(2.0 * n)
    }

    /// Copy with `i0` chosen so that the component carries `flux`.
    pub fn with_flux(mut self, flux: f64) -> Self {
        self.i0 = 1.0;
        self.i0 = flux / self.total_flux();
        self
    }
}

/// Pixel-centre grid of a square stamp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub size: usize,
    /// Arcseconds per pixel.
    pub pixel_scale: f64,
}

impl Grid {
    /// Position of pixel `(row, col)`'s centre relative to the stamp centre.
    pub fn position(&self, row: usize, col: usize) -> (f64, f64) {
        let c = (self.size as f64 - 1.0) / 2.0;
        ((col as f64 - c) * self.pixel_scale, (row as f64 - c) * self.pixel_scale)
    }

    pub fn pixel_area(&self) -> f64 {
        self.pixel_scale * self.pixel_scale
    }

    fn render(&self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.size * self.size);
        for r in 0..self.size {
            for c in 0..self.size {
                let (x, y) = self.position(r, c);
                out.push(f(x, y));
            }
        }
        out
    }

    /// Average of `f` over `n x n` sub-samples of each pixel.
    fn render_sampled(&self, n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let n = n.max(1);
        let step = self.pixel_scale / n as f64;
        let first = -0.5 * self.pixel_scale + 0.5 * step;
        self.render(|x, y| {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += f(x + first + j as f64 * step, y + first + i as f64 * step);
                }
            }
            acc / (n * n) as f64
        })
    }
}

/// Surface brightness of one Sérsic component at every pixel centre.
pub fn render_sersic(params: &SersicParams, grid: &Grid) -> Tensor<f64> {
    let data = grid.render(|x, y| params.intensity(params.radius_at(x, y)));
    Tensor::new(vec![grid.size, grid.size], data).expect("grid is square")
}

/// A bulge + disc galaxy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalaxyParams {
    /// Total flux in the reference band.
    pub flux: f64,
    pub bulge_to_total: f64,
    /// The uniform draw entering the Sérsic index relation.
    pub sersic_x: f64,
    /// Bulge half-light radius, arcsec.
    pub bulge_radius: f64,
    pub bulge_axis_ratio: f64,
    /// Disc exponential scale length, arcsec.
    pub disc_scale: f64,
    /// Disc inclination in degrees; the disc axis ratio is its cosine.
    pub inclination: f64,
    pub orientation: f64,
    pub center: [f64; 2],
}

/// Thin discs seen edge-on keep this minimum axis ratio.
const MIN_DISC_AXIS_RATIO: f64 = 0.1;

impl GalaxyParams {
    pub fn bulge(&self) -> Result<SersicParams> {
        let n_s = sersic_index(self.bulge_to_total, self.sersic_x)?;
        Ok(SersicParams {
            i0: 1.0,
            n_s,
            k: half_light_constant(n_s),
            scale_radius: self.bulge_radius,
            axis_ratio: self.bulge_axis_ratio,
            orientation: self.orientation,
            center: self.center,
        }
        .with_flux(self.bulge_to_total * self.flux))
    }

    pub fn disc(&self) -> SersicParams {
        SersicParams {
            i0: 1.0,
            n_s: 1.0,
            k: 1.0,
            scale_radius: self.disc_scale,
            axis_ratio: self.inclination.to_radians().cos().max(MIN_DISC_AXIS_RATIO),
            orientation: self.orientation,
            center: self.center,
        }
        .with_flux((1.0 - self.bulge_to_total) * self.flux)
    }

    /// Bulge and disc summed, each pixel averaging `oversample^2` sub-samples.
    pub fn render(&self, grid: &Grid, oversample: usize) -> Result<Tensor<f64>> {
        let (bulge, disc) = (self.bulge()?, self.disc());
        let data = grid.render_sampled(oversample, |x, y| bulge.intensity(bulge.radius_at(x, y)) + disc.intensity(disc.radius_at(x, y)));
        Tensor::new(vec![grid.size, grid.size], data)
    }

    pub fn total_flux(&self) -> Result<f64> {
        Ok(self.bulge()?.total_flux() + self.disc().total_flux())
    }
}

/// Elliptical Gaussian source in the source plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    /// Source-plane position relative to the lens centre, arcsec.
    pub offset: [f64; 2],
    /// Unlensed flux in the reference band.
    pub flux: f64,
    /// Gaussian width, arcsec.
    pub sigma: f64,
    pub axis_ratio: f64,
    pub orientation: f64,
}

impl SourceParams {
    /// Source-plane surface brightness at `beta` (relative to the lens centre).
    pub fn brightness(&self, bx: f64, by: f64) -> f64 {
        let (dx, dy) = (bx - self.offset[0], by - self.offset[1]);
        let (s, c) = self.orientation.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let r2 = self.axis_ratio * u * u + v * v / self.axis_ratio;
        self.flux / (2.0 * PI * self.sigma * self.sigma) * (-0.5 * r2 / (self.sigma * self.sigma)).exp()
    }
}

/// Every physical parameter of one simulated stamp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockSceneParams {
    pub lens: GalaxyParams,
    /// Einstein radius, arcsec.
    pub einstein_radius: f64,
    pub source: SourceParams,
    pub source_redshift: f64,
    /// Nearby unlensed galaxy, present only in some non-lens stamps.
    pub companion: Option<GalaxyParams>,
    /// Per-band flux multipliers of the foreground galaxy and companion.
    pub lens_colors: Vec<f64>,
    /// Per-band flux multipliers of the lensed source.
    pub source_colors: Vec<f64>,
    /// Gaussian PSF full width at half maximum per band, arcsec.
    pub psf_fwhm: Vec<f64>,
    pub noise_sigma: Vec<f64>,
    pub pixel_scale: f64,
    pub stamp_size: usize,
    /// Sub-pixel samples per axis used when ray-shooting the source.
    pub oversample: usize,
    pub is_lens: bool,
}

impl MockSceneParams {
    pub fn bands(&self) -> usize {
        self.lens_colors.len()
    }

    pub fn grid(&self) -> Grid {
        Grid { size: self.stamp_size, pixel_scale: self.pixel_scale }
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.bands();
        if b == 0 || [self.source_colors.len(), self.psf_fwhm.len(), self.noise_sigma.len()].iter().any(|&n| n != b) {
            return Err(Error::Config("per-band scene arrays must all have the band count".into()));
        }
        if self.stamp_size == 0 || !(self.pixel_scale > 0.0) || self.oversample == 0 {
            return Err(Error::Config("stamp size, pixel scale and oversampling must be positive".into()));
        }
        if self.is_lens && !(self.einstein_radius > 0.0) {
            return Err(Error::Config("a lens needs a positive Einstein radius".into()));
        }
        if self.noise_sigma.iter().chain(&self.psf_fwhm).any(|&v| !(v >= 0.0)) {
            return Err(Error::Config("PSF widths and noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

/// Image of the source behind an SIS lens, by inverse ray shooting.
///
/// Each image-plane sample `theta` maps to `beta = theta - theta_E theta/|theta|`
/// and takes the source brightness there. Pixels average
/// `oversample x oversample` sub-samples.
pub fn render_lensed_source(
    source: &SourceParams,
    einstein_radius: f64,
    center: [f64; 2],
    grid: &Grid,
    oversample: usize,
) -> Tensor<f64> {
    let data = grid.render_sampled(oversample, |x, y| {
        let (tx, ty) = (x - center[0], y - center[1]);
        let r = (tx * tx + ty * ty).sqrt();
        if r > 0.0 {
            source.brightness(tx - einstein_radius * tx / r, ty - einstein_radius * ty / r)
        } else {
            source.brightness(tx, ty)
        }
    });
    Tensor::new(vec![grid.size, grid.size], data).expect("grid is square")
}

/// Normalised 1-D Gaussian kernel truncated at four sigma.
pub fn gaussian_kernel(fwhm_pixels: f64) -> Vec<f64> {
    if fwhm_pixels <= 0.0 {
        return vec![1.0];
    }
    let sigma = fwhm_pixels / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
    let radius = (4.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with zero padding; flux leaving the stamp is lost.
pub fn psf_blur(image: &Tensor<f64>, fwhm_pixels: f64) -> Tensor<f64> {
    let kernel = gaussian_kernel(fwhm_pixels);
    if kernel.len() == 1 {
        return image.clone();
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let r = (kernel.len() / 2) as isize;
    let src = image.data();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if (0..w as isize).contains(&xx) {
                    acc += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if (0..h as isize).contains(&yy) {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    Tensor::new(vec![h, w], out).expect("shape preserved")
}

/// Summary carried with every stamp and written to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StampMeta {
    /// Einstein radius in arcsec; 0 for non-lenses.
    pub theta_e: f64,
    /// Lensed-source flux over total flux across all bands, noiseless.
    pub flux_ratio: f64,
    pub z_s: f64,
    pub seed: u64,
}

/// One labelled multi-band cutout.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStamp {
    pub id: String,
    /// `[bands, S, S]`.
    pub pixels: Tensor<f32>,
    pub label: u8,
    pub meta: StampMeta,
}

impl ImageStamp {
    pub fn bands(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Noiseless per-band components of a scene, after PSF blur.
#[derive(Clone, Debug)]
pub struct SceneComponents {
    /// Foreground galaxy plus companion, per band.
    pub foreground: Vec<Tensor<f64>>,
    /// Lensed source per band; all zeros for non-lenses.
    pub lensed: Vec<Tensor<f64>>,
}

impl SceneComponents {
    /// Lensed flux over total flux, summed over bands.
    pub fn flux_ratio(&self) -> f64 {
        let sum = |ts: &[Tensor<f64>]| ts.iter().map(|t| t.data().iter().sum::<f64>()).sum::<f64>();
        let lensed = sum(&self.lensed);
        let total = lensed + sum(&self.foreground);
        if total > 0.0 {
            lensed / total
        } else {
            0.0
        }
    }
}

/// Renders and blurs the noiseless components of a scene.
pub fn render_components(scene: &MockSceneParams) -> Result<SceneComponents> {
    scene.validate()?;
    let grid = scene.grid();
    let galaxy = scene.lens.render(&grid, scene.oversample)?;
    let companion = scene.companion.map(|c| c.render(&grid, scene.oversample)).transpose()?;
    let source = if scene.is_lens {
        Some(render_lensed_source(&scene.source, scene.einstein_radius, scene.lens.center, &grid, scene.oversample))
    } else {
        None
    };
    let mut foreground = Vec::with_capacity(scene.bands());
    let mut lensed = Vec::with_capacity(scene.bands());
    for b in 0..scene.bands() {
        let fwhm_px = scene.psf_fwhm[b] / scene.pixel_scale;
        let mut fg = galaxy.map(|v| v * scene.lens_colors[b]);
        if let Some(c) = &companion {
            fg.add_assign(&c.map(|v| v * scene.lens_colors[b]));
        }
        foreground.push(psf_blur(&fg, fwhm_px));
        lensed.push(match &source {
            Some(s) => psf_blur(&s.map(|v| v * scene.source_colors[b]), fwhm_px),
            None => Tensor::zeros(&[grid.size, grid.size]),
        });
    }
    Ok(SceneComponents { foreground, lensed })
}

/// Renders a scene into a labelled stamp; the noise stream is seeded by `seed`.
pub fn synthesize(scene: &MockSceneParams, seed: u64) -> Result<ImageStamp> {
    let parts = render_components(scene)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = scene.stamp_size;
    let mut pixels = Vec::with_capacity(scene.bands() * s * s);
    for b in 0..scene.bands() {
        let sigma = scene.noise_sigma[b];
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        for (&f, &l) in parts.foreground[b].data().iter().zip(parts.lensed[b].data()) {
            let n = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            pixels.push((f + l + n) as f32);
        }
    }
    Ok(ImageStamp {
        id: String::new(),
        pixels: Tensor::new(vec![scene.bands(), s, s], pixels)?,
        label: u8::from(scene.is_lens),
        meta: StampMeta {
            theta_e: if scene.is_lens { scene.einstein_radius } else { 0.0 },
            flux_ratio: parts.flux_ratio(),
            z_s: scene.source_redshift,
            seed,
        },
    })
}
