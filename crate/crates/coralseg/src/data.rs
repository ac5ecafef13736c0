//! Synthetic 2D segmentation data: an "atrium-like" shape generator, the
//! labeled/unlabeled split, random crops, and PGM + JSON-manifest I/O.
//!
//! Each sample is an ellipse with one to three outward protrusions and a thin
//! bright wall along its boundary. Difficulty controls contrast, interior
//! inhomogeneity, a background ramp, and additive noise; at difficulty zero a
//! plain 0.5 threshold recovers the mask.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{subseed, Error, Result};

/// A 2D grid of intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.w + x] = v;
    }
}

/// One generated sample with its ground-truth mask.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub id: usize,
    pub image: Grid,
    /// Per-pixel class labels, same shape as the image.
    pub mask: Vec<u8>,
}

/// Trainer-facing view of an unlabeled sample. Carries no mask by
/// construction, so hidden ground truth cannot leak into training code.
#[derive(Debug, Clone)]
pub struct UnlabeledImage {
    pub id: usize,
    pub image: Grid,
}

/// Generator knobs recorded in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub difficulty: f64,
}

fn smooth_field(y: f64, x: f64, dir: (f64, f64), phase: f64, size: f64) -> f64 {
    // Sinusoidal field in [0, 1] along a random direction.
    let t = 2.0 * std::f64::consts::PI * (dir.0 * y + dir.1 * x) / size + phase;
    0.5 + 0.5 * t.sin()
}

fn generate_sample(id: usize, size: usize, seed: u64, difficulty: f64) -> SegSample {
    for attempt in 0.. {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, &format!("sample-{id}-{attempt}")));
        let s = size as f64;

        let cy = s * (0.5 + rng.gen_range(-0.08..0.08));
        let cx = s * (0.5 + rng.gen_range(-0.08..0.08));
        let a = s * rng.gen_range(0.18..0.30);
        let b = s * rng.gen_range(0.18..0.30);
        let rot: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (sin_r, cos_r) = rot.sin_cos();

        // Protrusions sit on the ellipse boundary and bulge outward.
        let n_prot = rng.gen_range(1..=3);
        let protrusions: Vec<(f64, f64, f64)> = (0..n_prot)
            .map(|_| {
                let theta: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                let ex = a * theta.cos();
                let ey = b * theta.sin();
                let py = cy + ex * sin_r + ey * cos_r;
                let px = cx + ex * cos_r - ey * sin_r;
                let r = s * rng.gen_range(0.07..0.13);
                (py, px, r)
            })
            .collect();

        let inside = |y: usize, x: usize| -> bool {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let u = dx * cos_r + dy * sin_r;
            let v = -dx * sin_r + dy * cos_r;
            if (u / a) * (u / a) + (v / b) * (v / b) <= 1.0 {
                return true;
            }
            protrusions.iter().any(|&(py, px, r)| {
                let ddy = y as f64 + 0.5 - py;
                let ddx = x as f64 + 0.5 - px;
                ddy * ddy + ddx * ddx <= r * r
            })
        };

        // Decoy blobs: background texture that mimics the foreground interior
        // (never the wall). Their contrast scales with difficulty, so they
        // vanish at difficulty zero. Placement avoids the shape itself.
        let n_decoys = rng.gen_range(1..=2);
        let mut decoys: Vec<(f64, f64, f64)> = Vec::new();
        for _ in 0..n_decoys {
            for _try in 0..20 {
                let r = s * rng.gen_range(0.05..0.11);
                let py = rng.gen_range(r..s - r);
                let px = rng.gen_range(r..s - r);
                let clear = {
                    let steps = 8;
                    (0..steps).all(|k| {
                        let ang = k as f64 * std::f64::consts::TAU / steps as f64;
                        let qy = (py + (r + 1.5) * ang.sin()).clamp(0.0, s - 1.0);
                        let qx = (px + (r + 1.5) * ang.cos()).clamp(0.0, s - 1.0);
                        !inside(qy as usize, qx as usize)
                    }) && !inside(py as usize, px as usize)
                };
                if clear {
                    decoys.push((py, px, r));
                    break;
                }
            }
        }
        let in_decoy = |y: usize, x: usize| -> bool {
            decoys.iter().any(|&(py, px, r)| {
                let ddy = y as f64 + 0.5 - py;
                let ddx = x as f64 + 0.5 - px;
                ddy * ddy + ddx * ddx <= r * r
            })
        };

        let mut mask = vec![0u8; size * size];
        let mut fg = 0usize;
        for y in 0..size {
            for x in 0..size {
                if inside(y, x) {
                    mask[y * size + x] = 1;
                    fg += 1;
                }
            }
        }
        let frac = fg as f64 / (size * size) as f64;
        if !(0.05..=0.6).contains(&frac) {
            continue;
        }

        // Wall: foreground pixels with a background 8-neighbor.
        let is_wall = |y: usize, x: usize| -> bool {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let ny = y as i64 + dy;
                    let nx = x as i64 + dx;
                    if ny < 0 || nx < 0 || ny >= size as i64 || nx >= size as i64 {
                        return true;
                    }
                    if mask[ny as usize * size + nx as usize] == 0 {
                        return true;
                    }
                }
            }
            false
        };

        let background = rng.gen_range(0.24..0.32);
        let contrast = 1.0 - difficulty * rng.gen_range(0.35..0.7);
        let interior = background + 0.55 * contrast;
        let ramp_dir = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let ramp_phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let inhom_dir = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let inhom_phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let noise = Normal::new(0.0, 0.22 * difficulty).expect("valid sigma");

        let mut image = Grid::zeros(size, size);
        for y in 0..size {
            for x in 0..size {
                let mut v = if mask[y * size + x] == 1 {
                    let dim =
                        smooth_field(y as f64, x as f64, inhom_dir, inhom_phase, s);
                    let base = interior * (1.0 - 0.45 * difficulty * dim);
                    if is_wall(y, x) {
                        (base + 0.12).min(1.0)
                    } else {
                        base
                    }
                } else if in_decoy(y, x) {
                    background + (interior - background) * difficulty
                } else {
                    background
                        + 0.15
                            * difficulty
                            * (smooth_field(y as f64, x as f64, ramp_dir, ramp_phase, s) - 0.5)
                };
                if difficulty > 0.0 {
                    v += noise.sample(&mut rng);
                }
                image.set(y, x, v.clamp(0.0, 1.0));
            }
        }
        return SegSample { id, image, mask };
    }
    unreachable!("rejection sampling always terminates")
}

/// Generates `count` samples of `size` x `size`, deterministic per seed.
pub fn generate_dataset(
    count: usize,
    size: usize,
    seed: u64,
    difficulty: f64,
) -> Result<Vec<SegSample>> {
    if size < 16 {
        return Err(Error::InvalidArg(format!("size must be >= 16, got {size}")));
    }
    if count < 2 {
        return Err(Error::InvalidArg(format!("count must be >= 2, got {count}")));
    }
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::InvalidArg("difficulty must be in [0, 1]".into()));
    }
    Ok((0..count)
        .map(|id| generate_sample(id, size, seed, difficulty))
        .collect())
}

/// Splits samples into labeled and unlabeled sets. `round(count * fraction)`
/// samples keep their masks; the rest are exposed only as images.
pub fn split(
    samples: &[SegSample],
    labeled_fraction: f64,
    seed: u64,
) -> Result<(Vec<SegSample>, Vec<UnlabeledImage>)> {
    if !(0.0..1.0).contains(&labeled_fraction) || labeled_fraction == 0.0 {
        return Err(Error::InvalidArg(
            "labeled_fraction must be in (0, 1)".into(),
        ));
    }
    let n_labeled = (samples.len() as f64 * labeled_fraction).round() as usize;
    if n_labeled == 0 {
        return Err(Error::InvalidArg(
            "labeled_fraction yields zero labeled samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "split"));
    // Fisher-Yates.
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut labeled: Vec<SegSample> = order[..n_labeled]
        .iter()
        .map(|&i| samples[i].clone())
        .collect();
    let mut unlabeled: Vec<UnlabeledImage> = order[n_labeled..]
        .iter()
        .map(|&i| UnlabeledImage {
            id: samples[i].id,
            image: samples[i].image.clone(),
        })
        .collect();
    labeled.sort_by_key(|s| s.id);
    unlabeled.sort_by_key(|s| s.id);
    Ok((labeled, unlabeled))
}

/// One crop in a mini-batch. Unlabeled crops carry no mask.
#[derive(Debug, Clone)]
pub struct Crop {
    pub sample_id: usize,
    pub oy: usize,
    pub ox: usize,
    pub image: Grid,
    pub mask: Option<Vec<u8>>,
}

fn crop_grid(image: &Grid, oy: usize, ox: usize, crop: usize) -> Grid {
    let mut out = Grid::zeros(crop, crop);
    for y in 0..crop {
        for x in 0..crop {
            out.set(y, x, image.get(oy + y, ox + x));
        }
    }
    out
}

/// Draws a batch of four crops: two labeled then two unlabeled. Deterministic
/// given the RNG state. With no unlabeled samples (fully supervised runs) the
/// batch is four labeled crops instead.
pub fn crop_batch(
    labeled: &[SegSample],
    unlabeled: &[UnlabeledImage],
    crop_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Crop>> {
    if labeled.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n_labeled = if unlabeled.is_empty() { 4 } else { 2 };
    let mut batch = Vec::with_capacity(4);
    for _ in 0..n_labeled {
        let s = &labeled[rng.gen_range(0..labeled.len())];
        let (oy, ox) = draw_offset(&s.image, crop_size, rng)?;
        let image = crop_grid(&s.image, oy, ox, crop_size);
        let mut mask = vec![0u8; crop_size * crop_size];
        for y in 0..crop_size {
            for x in 0..crop_size {
                mask[y * crop_size + x] = s.mask[(oy + y) * s.image.w + (ox + x)];
            }
        }
        batch.push(Crop {
            sample_id: s.id,
            oy,
            ox,
            image,
            mask: Some(mask),
        });
    }
    for _ in n_labeled..4 {
        let s = &unlabeled[rng.gen_range(0..unlabeled.len())];
        let (oy, ox) = draw_offset(&s.image, crop_size, rng)?;
        batch.push(Crop {
            sample_id: s.id,
            oy,
            ox,
            image: crop_grid(&s.image, oy, ox, crop_size),
            mask: None,
        });
    }
    Ok(batch)
}

fn draw_offset(image: &Grid, crop: usize, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
    if crop > image.h || crop > image.w {
        return Err(Error::InvalidArg(format!(
            "crop {crop} exceeds image {}x{}",
            image.h, image.w
        )));
    }
    let oy = rng.gen_range(0..=image.h - crop);
    let ox = rng.gen_range(0..=image.w - crop);
    Ok((oy, ox))
}

// --- on-disk format: PGM pairs plus a JSON manifest ---

/// Manifest entry for one sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: usize,
    pub image: String,
    pub mask: String,
    /// "train" or "test".
    pub role: String,
    pub labeled: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub params: GeneratorParams,
    pub classes: usize,
    pub labeled_fraction: f64,
    pub samples: Vec<ManifestSample>,
}

pub fn write_pgm(path: &Path, w: usize, h: usize, data: &[u8]) -> Result<()> {
    if data.len() != w * h {
        return Err(Error::ShapeMismatch("pgm data length".into()));
    }
    let file = fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.write_all(data)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    // Header: magic, width, height, maxval, single whitespace, then raster.
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::BadFormat("truncated pgm header".into()));
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::BadFormat("expected binary pgm (P5)".into()));
    }
    let w: usize = token()?
        .parse()
        .map_err(|_| Error::BadFormat("bad pgm width".into()))?;
    let h: usize = token()?
        .parse()
        .map_err(|_| Error::BadFormat("bad pgm height".into()))?;
    let maxval: usize = token()?
        .parse()
        .map_err(|_| Error::BadFormat("bad pgm maxval".into()))?;
    if maxval != 255 {
        return Err(Error::BadFormat("only maxval 255 supported".into()));
    }
    pos += 1; // single whitespace after maxval
    if raw.len() < pos + w * h {
        return Err(Error::BadFormat("truncated pgm raster".into()));
    }
    Ok((w, h, raw[pos..pos + w * h].to_vec()))
}

pub fn grid_to_bytes(g: &Grid) -> Vec<u8> {
    g.data.iter().map(|v| (v * 255.0).round() as u8).collect()
}

pub fn bytes_to_grid(w: usize, h: usize, bytes: &[u8]) -> Grid {
    Grid {
        h,
        w,
        data: bytes.iter().map(|b| f64::from(*b) / 255.0).collect(),
    }
}

/// Writes images, masks, and the manifest under `dir`. The train/test
/// partition is by count (first 80% train) and the labeled flags come from
/// the seeded split of the train portion.
pub fn write_dataset(
    dir: &Path,
    samples: &[SegSample],
    params: &GeneratorParams,
    classes: usize,
    labeled_fraction: f64,
) -> Result<Manifest> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let n_train = (samples.len() as f64 * 0.8).round() as usize;
    let train = &samples[..n_train];
    let (labeled, _) = split(train, labeled_fraction, params.seed)?;
    let labeled_ids: std::collections::BTreeSet<usize> =
        labeled.iter().map(|s| s.id).collect();

    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image_name = format!("images/img_{:04}.pgm", s.id);
        let mask_name = format!("masks/msk_{:04}.pgm", s.id);
        write_pgm(
            &dir.join(&image_name),
            s.image.w,
            s.image.h,
            &grid_to_bytes(&s.image),
        )?;
        write_pgm(&dir.join(&mask_name), s.image.w, s.image.h, &s.mask)?;
        let role = if s.id < n_train { "train" } else { "test" };
        entries.push(ManifestSample {
            id: s.id,
            image: image_name,
            mask: mask_name,
            role: role.into(),
            labeled: labeled_ids.contains(&s.id),
        });
    }
    let manifest = Manifest {
        params: params.clone(),
        classes,
        labeled_fraction,
        samples: entries,
    };
    let mut file = BufWriter::new(fs::File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut file, &manifest)?;
    file.write_all(b"\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let raw = fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&raw)?)
}

/// Training-facing view of a dataset on disk: labeled samples with masks,
/// unlabeled samples as bare images.
pub struct TrainData {
    pub labeled: Vec<SegSample>,
    pub unlabeled: Vec<UnlabeledImage>,
}

pub fn load_train(dir: &Path, manifest: &Manifest) -> Result<TrainData> {
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for entry in manifest.samples.iter().filter(|s| s.role == "train") {
        let (w, h, bytes) = read_pgm(&dir.join(&entry.image))?;
        let image = bytes_to_grid(w, h, &bytes);
        if entry.labeled {
            let (_, _, mask) = read_pgm(&dir.join(&entry.mask))?;
            labeled.push(SegSample {
                id: entry.id,
                image,
                mask,
            });
        } else {
            unlabeled.push(UnlabeledImage {
                id: entry.id,
                image,
            });
        }
    }
    Ok(TrainData { labeled, unlabeled })
}

/// All training samples with ground truth. Feed this through [`split`] to get
/// the trainer-facing labeled/unlabeled views for an arbitrary fraction.
pub fn load_all_train(dir: &Path, manifest: &Manifest) -> Result<Vec<SegSample>> {
    let mut out = Vec::new();
    for entry in manifest.samples.iter().filter(|s| s.role == "train") {
        let (w, h, bytes) = read_pgm(&dir.join(&entry.image))?;
        let (_, _, mask) = read_pgm(&dir.join(&entry.mask))?;
        out.push(SegSample {
            id: entry.id,
            image: bytes_to_grid(w, h, &bytes),
            mask,
        });
    }
    Ok(out)
}

/// Test samples with ground truth, for evaluation only.
pub fn load_test(dir: &Path, manifest: &Manifest) -> Result<Vec<SegSample>> {
    let mut out = Vec::new();
    for entry in manifest.samples.iter().filter(|s| s.role == "test") {
        let (w, h, bytes) = read_pgm(&dir.join(&entry.image))?;
        let (_, _, mask) = read_pgm(&dir.join(&entry.mask))?;
        out.push(SegSample {
            id: entry.id,
            image: bytes_to_grid(w, h, &bytes),
            mask,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(4, 16, 9, 0.5).unwrap();
        let b = generate_dataset(4, 16, 9, 0.5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data, y.image.data);
            assert_eq!(x.mask, y.mask);
        }
        let c = generate_dataset(4, 16, 10, 0.5).unwrap();
        assert_ne!(a[0].image.data, c[0].image.data);
    }

    #[test]
    fn difficulty_zero_thresholds_cleanly() {
        let samples = generate_dataset(10, 24, 3, 0.0).unwrap();
        for s in &samples {
            let mut inter = 0usize;
            let mut pred_fg = 0usize;
            let mut true_fg = 0usize;
            for (i, &m) in s.mask.iter().enumerate() {
                let p = u8::from(s.image.data[i] > 0.5);
                inter += usize::from(p == 1 && m == 1);
                pred_fg += usize::from(p == 1);
                true_fg += usize::from(m == 1);
            }
            let dice = 2.0 * inter as f64 / (pred_fg + true_fg) as f64;
            assert!(dice >= 0.99, "threshold dice {dice} below 0.99");
        }
    }

    #[test]
    fn foreground_fraction_bounded() {
        for seed in 0..5 {
            let samples = generate_dataset(8, 20, seed, 0.7).unwrap();
            for s in samples {
                let fg = s.mask.iter().filter(|m| **m == 1).count();
                let frac = fg as f64 / s.mask.len() as f64;
                assert!((0.05..=0.6).contains(&frac), "fraction {frac} out of bounds");
            }
        }
    }

    #[test]
    fn generate_rejects_bad_args() {
        assert!(generate_dataset(4, 8, 0, 0.5).is_err());
        assert!(generate_dataset(1, 16, 0, 0.5).is_err());
    }

    #[test]
    fn split_fraction_counts() {
        let samples = generate_dataset(80, 16, 1, 0.2).unwrap();
        for (frac, want) in [(0.05, 4), (0.10, 8), (0.20, 16)] {
            let (lab, unl) = split(&samples, frac, 7).unwrap();
            assert_eq!(lab.len(), want);
            assert_eq!(unl.len(), 80 - want);
        }
    }

    #[test]
    fn split_is_deterministic_and_rejects_zero() {
        let samples = generate_dataset(20, 16, 2, 0.3).unwrap();
        let (a, _) = split(&samples, 0.2, 5).unwrap();
        let (b, _) = split(&samples, 0.2, 5).unwrap();
        let ids_a: Vec<usize> = a.iter().map(|s| s.id).collect();
        let ids_b: Vec<usize> = b.iter().map(|s| s.id).collect();
        assert_eq!(ids_a, ids_b);
        assert!(split(&samples, 0.001, 5).is_err());
    }

    #[test]
    fn crop_batch_composition_and_contents() {
        let samples = generate_dataset(10, 20, 4, 0.4).unwrap();
        let (lab, unl) = split(&samples, 0.3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let batch = crop_batch(&lab, &unl, 12, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        assert!(batch[0].mask.is_some() && batch[1].mask.is_some());
        assert!(batch[2].mask.is_none() && batch[3].mask.is_none());
        // Crop contents match the source sub-window at the drawn offset.
        for crop in &batch[..2] {
            let src = samples.iter().find(|s| s.id == crop.sample_id).unwrap();
            for y in 0..12 {
                for x in 0..12 {
                    assert_eq!(
                        crop.image.get(y, x),
                        src.image.get(crop.oy + y, crop.ox + x)
                    );
                }
            }
        }
    }

    #[test]
    fn full_size_crop_equals_image() {
        let samples = generate_dataset(4, 16, 5, 0.2).unwrap();
        let (lab, unl) = split(&samples, 0.5, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = crop_batch(&lab, &unl, 16, &mut rng).unwrap();
        let src = samples
            .iter()
            .find(|s| s.id == batch[0].sample_id)
            .unwrap();
        assert_eq!(batch[0].image.data, src.image.data);
    }

    #[test]
    fn empty_unlabeled_yields_all_labeled_batch() {
        let samples = generate_dataset(4, 16, 5, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = crop_batch(&samples, &[], 8, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        assert!(batch.iter().all(|c| c.mask.is_some()));
        assert!(crop_batch(&[], &[], 8, &mut rng).is_err());
    }

    #[test]
    fn oversize_crop_errors() {
        let samples = generate_dataset(4, 16, 5, 0.2).unwrap();
        let (lab, unl) = split(&samples, 0.5, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(crop_batch(&lab, &unl, 17, &mut rng).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let data: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        write_pgm(&path, 4, 3, &data).unwrap();
        let (w, h, back) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, data);
    }

    #[test]
    fn dataset_write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset(10, 16, 8, 0.3).unwrap();
        let params = GeneratorParams {
            count: 10,
            size: 16,
            seed: 8,
            difficulty: 0.3,
        };
        let manifest = write_dataset(dir.path(), &samples, &params, 2, 0.25).unwrap();
        assert_eq!(manifest.samples.len(), 10);
        assert_eq!(
            manifest.samples.iter().filter(|s| s.role == "train").count(),
            8
        );
        assert_eq!(manifest.samples.iter().filter(|s| s.labeled).count(), 2);

        let loaded = read_manifest(dir.path()).unwrap();
        let train = load_train(dir.path(), &loaded).unwrap();
        assert_eq!(train.labeled.len(), 2);
        assert_eq!(train.unlabeled.len(), 6);
        let test = load_test(dir.path(), &loaded).unwrap();
        assert_eq!(test.len(), 2);
        // Images survive the 8-bit round trip exactly.
        for s in &train.labeled {
            let orig = samples.iter().find(|o| o.id == s.id).unwrap();
            assert_eq!(grid_to_bytes(&s.image), grid_to_bytes(&orig.image));
            assert_eq!(s.mask, orig.mask);
        }
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let samples = generate_dataset(6, 16, 11, 0.5).unwrap();
        let params = GeneratorParams {
            count: 6,
            size: 16,
            seed: 11,
            difficulty: 0.5,
        };
        write_dataset(dir_a.path(), &samples, &params, 2, 0.4).unwrap();
        write_dataset(dir_b.path(), &samples, &params, 2, 0.4).unwrap();
        for name in ["manifest.json", "images/img_0000.pgm", "masks/msk_0003.pgm"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between writes");
        }
    }
}
