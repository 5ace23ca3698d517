//! Scene sampling, dataset generation and the on-disk stamp format.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{synthesize, GalaxyParams, ImageStamp, MockSceneParams, SourceParams, StampMeta};
use crate::error::{Error, Result};
use crate::par::Parallelism;
use crate::tensor::Tensor;

/// `b"LFST"` read as a little-endian u32.
pub const STAMP_MAGIC: u32 = u32::from_le_bytes(*b"LFST");
pub const STAMP_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
const STAMP_DIR: &str = "stamps";

/// Sampling ranges for every scene parameter. Pairs are `[low, high]` and are
/// drawn uniformly unless noted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimRanges {
    pub stamp_size: usize,
    pub pixel_scale: f64,
    /// Arcsec.
    pub theta_e: [f64; 2],
    pub z_s: [f64; 2],
    /// Foreground galaxy flux in the reference band.
    pub lens_flux: [f64; 2],
    pub bulge_to_total: [f64; 2],
    pub bulge_radius: [f64; 2],
    pub bulge_axis_ratio: [f64; 2],
    pub disc_scale: [f64; 2],
    /// Degrees.
    pub inclination: [f64; 2],
    /// Largest offset of the lens galaxy from the stamp centre, arcsec.
    pub lens_offset: f64,
    /// Unlensed source flux as a fraction of the lens flux, drawn log-uniformly.
    pub source_flux_fraction: [f64; 2],
    pub source_sigma: [f64; 2],
    pub source_axis_ratio: [f64; 2],
    /// Source-plane offset from the optical axis in units of theta_E.
    pub source_offset: [f64; 2],
    /// Per-band flux multipliers; their length sets the band count.
    pub lens_colors: Vec<f64>,
    pub source_colors: Vec<f64>,
    /// Each colour is multiplied by a uniform factor in `[1 - j, 1 + j]`.
    pub color_jitter: f64,
    pub psf_fwhm: Vec<f64>,
    pub noise_sigma: Vec<f64>,
    /// Fraction of non-lens stamps carrying an unlensed companion galaxy.
    pub hard_negative_fraction: f64,
    /// Companion distance from the lens, arcsec.
    pub companion_distance: [f64; 2],
    /// Companion flux as a fraction of the lens flux.
    pub companion_flux_fraction: [f64; 2],
    pub oversample: usize,
}

impl Default for SimRanges {
    fn default() -> Self {
        Self::reference()
    }
}

impl SimRanges {
    /// 101 x 101 four-band (u, g, r, i) stamps at 0.2 arcsec per pixel.
    pub fn reference() -> Self {
        Self {
            stamp_size: 101,
            pixel_scale: 0.2,
            theta_e: [0.3, 10.08],
            // Uniform with median 1.81.
            z_s: [0.62, 3.0],
            lens_flux: [100.0, 400.0],
            bulge_to_total: [0.0, 1.0],
            bulge_radius: [0.3, 1.2],
            bulge_axis_ratio: [0.5, 1.0],
            disc_scale: [0.5, 2.0],
            inclination: [0.0, 80.0],
            lens_offset: 0.2,
            source_flux_fraction: [0.01, 0.5],
            source_sigma: [0.1, 0.4],
            source_axis_ratio: [0.5, 1.0],
            source_offset: [0.0, 0.6],
            lens_colors: vec![0.25, 0.6, 1.0, 1.3],
            source_colors: vec![0.9, 1.1, 1.0, 0.8],
            color_jitter: 0.15,
            psf_fwhm: vec![1.0, 0.8, 0.7, 0.8],
            noise_sigma: vec![0.6, 0.4, 0.3, 0.5],
            hard_negative_fraction: 0.3,
            companion_distance: [2.0, 8.0],
            companion_flux_fraction: [0.1, 0.6],
            oversample: 3,
        }
    }

    /// 32 x 32 four-band stamps with compact lenses, sized for quick experiments.
    pub fn desk() -> Self {
        Self {
            stamp_size: 32,
            theta_e: [0.6, 2.0],
            lens_flux: [60.0, 180.0],
            bulge_radius: [0.2, 0.6],
            disc_scale: [0.3, 0.8],
            source_flux_fraction: [0.015, 0.3],
            source_sigma: [0.1, 0.3],
            companion_distance: [1.2, 2.6],
            ..Self::reference()
        }
    }

    pub fn bands(&self) -> usize {
        self.lens_colors.len()
    }

    /// Keeps `n` bands. A single band keeps the `r`-like third entry when
    /// there are four; otherwise the first `n` are kept.
    pub fn with_bands(mut self, n: usize) -> Result<Self> {
        let have = self.bands();
        if n == 0 || n > have {
            return Err(Error::Config(format!("cannot select {n} bands from {have}")));
        }
        let pick: Vec<usize> = if n == 1 && have == 4 { vec![2] } else { (0..n).collect() };
        for v in [&mut self.lens_colors, &mut self.source_colors, &mut self.psf_fwhm, &mut self.noise_sigma] {
            *v = pick.iter().map(|&i| v[i]).collect();
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.bands();
        if b == 0 || [self.source_colors.len(), self.psf_fwhm.len(), self.noise_sigma.len()].iter().any(|&n| n != b) {
            return Err(Error::Config("lens_colors, source_colors, psf_fwhm and noise_sigma need equal lengths".into()));
        }
        if self.stamp_size == 0 || !(self.pixel_scale > 0.0) || self.oversample == 0 {
            return Err(Error::Config("stamp_size, pixel_scale and oversample must be positive".into()));
        }
        let pairs = [
            ("theta_e", self.theta_e),
            ("z_s", self.z_s),
            ("lens_flux", self.lens_flux),
            ("bulge_to_total", self.bulge_to_total),
            ("bulge_radius", self.bulge_radius),
            ("bulge_axis_ratio", self.bulge_axis_ratio),
            ("disc_scale", self.disc_scale),
            ("inclination", self.inclination),
            ("source_flux_fraction", self.source_flux_fraction),
            ("source_sigma", self.source_sigma),
            ("source_axis_ratio", self.source_axis_ratio),
            ("source_offset", self.source_offset),
            ("companion_distance", self.companion_distance),
            ("companion_flux_fraction", self.companion_flux_fraction),
        ];
        for (name, [lo, hi]) in pairs {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] is not ordered")));
            }
        }
        let positive = [self.theta_e[0], self.lens_flux[0], self.bulge_radius[0], self.disc_scale[0]];
        if positive.iter().any(|&v| v <= 0.0) || self.source_flux_fraction[0] <= 0.0 || self.source_sigma[0] <= 0.0 {
            return Err(Error::Config("radii, fluxes and theta_e ranges must be positive".into()));
        }
        if self.bulge_to_total[0] < 0.0 || self.bulge_to_total[1] > 1.0 {
            return Err(Error::Config("bulge_to_total must lie in [0, 1]".into()));
        }
        if self.bulge_axis_ratio[0] < 0.5 || self.bulge_axis_ratio[1] > 1.0 {
            return Err(Error::Config("bulge_axis_ratio must lie in [0.5, 1]".into()));
        }
        if self.inclination[0] < 0.0 || self.inclination[1] > 80.0 {
            return Err(Error::Config("inclination must lie in [0, 80] degrees".into()));
        }
        if self.source_axis_ratio[0] <= 0.0 || self.source_axis_ratio[1] > 1.0 {
            return Err(Error::Config("source_axis_ratio must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.hard_negative_fraction) || !(0.0..1.0).contains(&self.color_jitter) {
            return Err(Error::Config("hard_negative_fraction must be in [0, 1] and color_jitter in [0, 1)".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn log_uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    uniform(rng, [lo.ln(), hi.ln()]).exp()
}

fn sample_galaxy(rng: &mut impl Rng, r: &SimRanges, flux: f64, center: [f64; 2]) -> GalaxyParams {
    GalaxyParams {
        flux,
        bulge_to_total: uniform(rng, r.bulge_to_total),
        sersic_x: rng.random_range(-1.0..=1.0),
        bulge_radius: uniform(rng, r.bulge_radius),
        bulge_axis_ratio: uniform(rng, r.bulge_axis_ratio),
        disc_scale: uniform(rng, r.disc_scale),
        inclination: uniform(rng, r.inclination),
        orientation: rng.random_range(0.0..std::f64::consts::PI),
        center,
    }
}

/// Draws every parameter of one scene. Non-lens scenes still draw (and then
/// ignore) the source so that the random stream does not depend on the label.
pub fn sample_scene(ranges: &SimRanges, is_lens: bool, rng: &mut impl Rng) -> MockSceneParams {
    let lens_flux = uniform(rng, ranges.lens_flux);
    let offset = [
        rng.random_range(-1.0..=1.0) * ranges.lens_offset,
        rng.random_range(-1.0..=1.0) * ranges.lens_offset,
    ];
    let lens = sample_galaxy(rng, ranges, lens_flux, offset);
    let einstein_radius = uniform(rng, ranges.theta_e);
    let source_redshift = uniform(rng, ranges.z_s);
    let (rho, phi) = (uniform(rng, ranges.source_offset) * einstein_radius, rng.random_range(0.0..std::f64::consts::TAU));
    let source = SourceParams {
        offset: [rho * phi.cos(), rho * phi.sin()],
        flux: lens_flux * log_uniform(rng, ranges.source_flux_fraction),
        sigma: uniform(rng, ranges.source_sigma),
        axis_ratio: uniform(rng, ranges.source_axis_ratio),
        orientation: rng.random_range(0.0..std::f64::consts::PI),
    };
    let jitter = ranges.color_jitter;
    let mut colors = |base: &[f64]| -> Vec<f64> {
        base.iter().map(|&c| c * (1.0 + uniform(rng, [-jitter, jitter]))).collect()
    };
    let lens_colors = colors(&ranges.lens_colors);
    let source_colors = colors(&ranges.source_colors);
    let wants_companion = rng.random_bool(ranges.hard_negative_fraction);
    let companion_flux = lens_flux * uniform(rng, ranges.companion_flux_fraction);
    let (dist, angle) = (uniform(rng, ranges.companion_distance), rng.random_range(0.0..std::f64::consts::TAU));
    let mut companion = sample_galaxy(rng, ranges, companion_flux, [offset[0] + dist * angle.cos(), offset[1] + dist * angle.sin()]);
    companion.bulge_radius *= 0.7;
    companion.disc_scale *= 0.7;
    MockSceneParams {
        lens,
        einstein_radius,
        source,
        source_redshift,
        companion: (wants_companion && !is_lens).then_some(companion),
        lens_colors,
        source_colors,
        psf_fwhm: ranges.psf_fwhm.clone(),
        noise_sigma: ranges.noise_sigma.clone(),
        pixel_scale: ranges.pixel_scale,
        stamp_size: ranges.stamp_size,
        oversample: ranges.oversample,
        is_lens,
    }
}

/// SplitMix64 of `seed` mixed with `index`: decorrelated per-stamp seeds.
pub fn stamp_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Labels for `n` stamps with exactly `round(n * lens_fraction)` lenses in
/// seeded random positions.
fn assign_labels(n: usize, lens_fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 stamps, got {n}")));
    }
    if !(lens_fraction > 0.0 && lens_fraction < 1.0) {
        return Err(Error::Config(format!("lens_fraction {lens_fraction} must lie in (0, 1)")));
    }
    let lenses = (n as f64 * lens_fraction).round() as usize;
    let mut labels: Vec<bool> = (0..n).map(|i| i < lenses).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(labels)
}

fn build_stamp(ranges: &SimRanges, is_lens: bool, seed: u64, index: usize) -> Result<ImageStamp> {
    let s = stamp_seed(seed, index as u64);
    let scene = sample_scene(ranges, is_lens, &mut ChaCha8Rng::seed_from_u64(s));
    let mut stamp = synthesize(&scene, s)?;
    stamp.id = stamp_id(index);
    Ok(stamp)
}

pub fn stamp_id(index: usize) -> String {
    format!("{index:06}")
}

/// Generates `n` labelled stamps in memory, in index order.
pub fn generate_stamps(
    n: usize,
    lens_fraction: f64,
    ranges: &SimRanges,
    seed: u64,
    par: Parallelism,
) -> Result<Vec<ImageStamp>> {
    ranges.validate()?;
    let labels = assign_labels(n, lens_fraction, seed)?;
    par.map_range(n, |i| build_stamp(ranges, labels[i], seed, i)).into_iter().collect()
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    /// Stamp file relative to the manifest's directory.
    pub path: String,
    pub label: u8,
    pub theta_e: f64,
    pub flux_ratio: f64,
    pub z_s: f64,
    pub seed: u64,
}

impl ManifestRow {
    fn meta(&self) -> StampMeta {
        StampMeta { theta_e: self.theta_e, flux_ratio: self.flux_ratio, z_s: self.z_s, seed: self.seed }
    }
}

/// Writes `n` stamps under `out_dir/stamps/` and the JSON-lines manifest
/// `out_dir/manifest.jsonl`. Stamps are rendered and written in parallel; the
/// manifest is written in index order.
pub fn generate_dataset(
    n: usize,
    lens_fraction: f64,
    ranges: &SimRanges,
    seed: u64,
    out_dir: impl AsRef<Path>,
    par: Parallelism,
) -> Result<Vec<ManifestRow>> {
    ranges.validate()?;
    let labels = assign_labels(n, lens_fraction, seed)?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir.join(STAMP_DIR))?;
    let rows: Vec<ManifestRow> = par
        .map_range(n, |i| -> Result<ManifestRow> {
            let stamp = build_stamp(ranges, labels[i], seed, i)?;
            let rel = format!("{STAMP_DIR}/{}.bin", stamp.id);
            write_stamp(out_dir.join(&rel), &stamp.pixels)?;
            Ok(ManifestRow {
                id: stamp.id,
                path: rel,
                label: stamp.label,
                theta_e: stamp.meta.theta_e,
                flux_ratio: stamp.meta.flux_ratio,
                z_s: stamp.meta.z_s,
                seed: stamp.meta.seed,
            })
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let mut w = BufWriter::new(File::create(out_dir.join(MANIFEST_FILE))?);
    for row in &rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(rows)
}

/// Writes a `[bands, S, S]` cube with its 8-word header.
pub fn write_stamp(path: impl AsRef<Path>, pixels: &Tensor<f32>) -> Result<()> {
    let shape = pixels.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::Contract(format!("stamp must be [bands, S, S], got {shape:?}")));
    }
    let mut buf = Vec::with_capacity(32 + 4 * pixels.len());
    for word in [STAMP_MAGIC, STAMP_VERSION, shape[0] as u32, shape[1] as u32, shape[2] as u32, 0, 0, 0] {
        buf.extend_from_slice(&word.to_le_bytes());
    }
    for v in pixels.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_stamp(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 32 {
        return Err(bad("truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    if word(0) != STAMP_MAGIC {
        return Err(bad("bad magic"));
    }
    if word(1) != STAMP_VERSION {
        return Err(bad(&format!("unsupported version {}", word(1))));
    }
    let shape = vec![word(2) as usize, word(3) as usize, word(4) as usize];
    let count: usize = shape.iter().product();
    if bytes.len() != 32 + 4 * count {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[32..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Tensor::new(shape, data).map_err(|_| bad("zero extent in header"))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok(rows)
}

/// Loads every stamp listed in `dir/manifest.jsonl`, in manifest order.
pub fn load_dataset(dir: impl AsRef<Path>, par: Parallelism) -> Result<Vec<ImageStamp>> {
    let dir: PathBuf = dir.as_ref().to_path_buf();
    let rows = read_manifest(dir.join(MANIFEST_FILE))?;
    par.map_slice(&rows, |row| {
        Ok(ImageStamp {
            id: row.id.clone(),
            pixels: read_stamp(dir.join(&row.path))?,
            label: row.label,
            meta: row.meta(),
        })
    })
    .into_iter()
    .collect()
}
