//! Synthetic phantoms, directory datasets and labeled/unlabeled splits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image with an optional integer mask (row-major, `h * w` entries).
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    /// `(1, h, w)` intensities in `[0, 1]`.
    pub image: Tensor,
    pub mask: Option<Vec<usize>>,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn is_labeled(&self) -> bool {
        self.mask.is_some()
    }

    pub fn unlabeled(mut self) -> Self {
        self.mask = None;
        self
    }
}

/// Images stacked to `(b, 1, h, w)` and, when every sample is labeled, the
/// concatenated masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SegBatch {
    pub images: Tensor,
    pub masks: Option<Vec<usize>>,
}

impl SegBatch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn make_batch(samples: &[&SegSample]) -> Result<SegBatch> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let images = Tensor::stack(&images)?;
    let masks = if samples.iter().all(|s| s.is_labeled()) {
        Some(samples.iter().flat_map(|s| s.mask.clone().unwrap()).collect())
    } else {
        None
    };
    Ok(SegBatch { images, masks })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// Side length in pixels (a multiple of 32).
    pub size: usize,
    pub num_classes: usize,
    /// Interior semi-axis range at 64 px; scaled with `size`.
    pub interior_axes: [f64; 2],
    /// Wall thickness range at 64 px.
    pub wall_thickness: [f64; 2],
    /// Maximum centre offset at 64 px.
    pub center_jitter: f64,
    /// Standard deviation of the unit-mean multiplicative speckle; 0 disables it.
    pub speckle: f64,
    /// Peak amplitude of the linear intensity bias; 0 disables it.
    pub bias: f64,
    /// Background, wall and interior intensities.
    pub intensities: [f64; 3],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 64,
            num_classes: 3,
            interior_axes: [10.0, 16.0],
            wall_thickness: [5.0, 8.0],
            center_jitter: 6.0,
            speckle: 0.3,
            bias: 0.1,
            intensities: [0.15, 0.85, 0.45],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size == 0 || self.size % 32 != 0 {
            return bad(format!("phantom size {} is not a positive multiple of 32", self.size));
        }
        if self.num_classes != 3 {
            return bad("phantoms have exactly 3 classes (background, wall, interior)".into());
        }
        for (name, r) in [("interior_axes", self.interior_axes), ("wall_thickness", self.wall_thickness)] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return bad(format!("{name} range {r:?} is degenerate"));
            }
        }
        if self.center_jitter < 0.0 || self.speckle < 0.0 || self.bias < 0.0 {
            return bad("jitter, speckle and bias must be non-negative".into());
        }
        let reach = self.interior_axes[1] + self.wall_thickness[1] + self.center_jitter;
        if reach >= 32.0 {
            return bad(format!("ring may leave the image (reach {reach} px at 64 px scale)"));
        }
        Ok(())
    }
}

/// Random ellipse ring: wall = class 1, interior = class 2.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<SegSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.size;
    let scale = n as f64 / 64.0;
    let uni = |rng: &mut ChaCha8Rng, r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..r[1]) };
    let a = uni(&mut rng, spec.interior_axes) * scale;
    let b = uni(&mut rng, spec.interior_axes) * scale;
    let t = uni(&mut rng, spec.wall_thickness) * scale;
    let j = spec.center_jitter * scale;
    let (cy, cx) = if j > 0.0 {
        (n as f64 / 2.0 + rng.random_range(-j..j), n as f64 / 2.0 + rng.random_range(-j..j))
    } else {
        (n as f64 / 2.0, n as f64 / 2.0)
    };
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (s, c) = theta.sin_cos();
    let mut mask = vec![0usize; n * n];
    let mut clean = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
            let inner = (u / a).powi(2) + (v / b).powi(2);
            let outer = (u / (a + t)).powi(2) + (v / (b + t)).powi(2);
            let class = if inner <= 1.0 {
                2
            } else if outer <= 1.0 {
                1
            } else {
                0
            };
            mask[y * n + x] = class;
            clean[y * n + x] = spec.intensities[class];
        }
    }
    let mut img = clean;
    if spec.speckle > 0.0 {
        let k = 1.0 / (spec.speckle * spec.speckle);
        let gamma = Gamma::new(k, 1.0 / k).map_err(|e| Error::Config(format!("speckle: {e}")))?;
        for v in img.iter_mut() {
            *v *= gamma.sample(&mut rng);
        }
    }
    if spec.bias > 0.0 {
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let (by, bx) = phi.sin_cos();
        for y in 0..n {
            for x in 0..n {
                let (ny, nx) = (2.0 * y as f64 / n as f64 - 1.0, 2.0 * x as f64 / n as f64 - 1.0);
                img[y * n + x] += spec.bias * (by * ny + bx * nx);
            }
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(SegSample {
        id: format!("phantom_{seed:08}"),
        image: Tensor::new(&[1, n, n], img)?,
        mask: Some(mask),
    })
}

/// `count` phantoms with per-sample seeds drawn from `seed`.
pub fn generate_dataset(spec: &PhantomSpec, count: usize, seed: u64) -> Result<Vec<SegSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut s = generate_phantom(spec, rng.random())?;
        s.id = format!("phantom_{i:05}");
        out.push(s);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub labeled: Vec<SegSample>,
    /// Training samples with masks removed.
    pub unlabeled: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

/// Shuffles, holds out `round(test_fraction * n)` samples for testing and
/// keeps masks on `round(labeled_fraction * n_train)` of the rest.
pub fn split(dataset: Vec<SegSample>, labeled_fraction: f64, test_fraction: f64, seed: u64) -> Result<Split> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::Config(format!("labeled_fraction must lie in (0, 1], got {labeled_fraction}")));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test_fraction must lie in [0, 1), got {test_fraction}")));
    }
    if dataset.iter().any(|s| !s.is_labeled()) {
        return Err(Error::Config("split needs a fully labeled dataset".into()));
    }
    let n = dataset.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (test_fraction * n as f64).round() as usize;
    let n_train = n - n_test;
    let n_lab = (labeled_fraction * n_train as f64).round() as usize;
    if n_lab == 0 {
        return Err(Error::Config(format!("labeled fraction {labeled_fraction} of {n_train} training samples is empty")));
    }
    if test_fraction > 0.0 && n_test == 0 {
        return Err(Error::Config("test partition is empty".into()));
    }
    let mut slots: Vec<Option<SegSample>> = dataset.into_iter().map(Some).collect();
    let mut take = |range: &[usize]| range.iter().map(|&i| slots[i].take().unwrap()).collect::<Vec<_>>();
    let test = take(&idx[..n_test]);
    let labeled = take(&idx[n_test..n_test + n_lab]);
    let unlabeled = take(&idx[n_test + n_lab..]).into_iter().map(SegSample::unlabeled).collect();
    Ok(Split { labeled, unlabeled, test })
}

fn pad_to_32(v: usize) -> usize {
    v.div_ceil(32) * 32
}

/// Reads `images/<id>.png` (8-bit grayscale) and, when present,
/// `masks/<id>.png` (class indices). Images are zero-padded at the bottom and
/// right to multiples of 32; padded mask pixels are background.
pub fn load_dir(dir: &Path) -> Result<Vec<SegSample>> {
    let img_dir = dir.join("images");
    let entries = fs::read_dir(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut ids: Vec<String> = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(&img_dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".png") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let (h, w, pixels) = read_gray(&img_dir.join(format!("{id}.png")))?;
        let (ph, pw) = (pad_to_32(h), pad_to_32(w));
        let mut img = vec![0.0; ph * pw];
        for y in 0..h {
            for x in 0..w {
                img[y * pw + x] = pixels[y * w + x] as f64 / 255.0;
            }
        }
        let mask_path = dir.join("masks").join(format!("{id}.png"));
        let mask = if mask_path.exists() {
            let (mh, mw, m) = read_gray(&mask_path)?;
            if (mh, mw) != (h, w) {
                return Err(Error::Input(format!("mask {id} is {mh}x{mw}, image is {h}x{w}")));
            }
            let mut padded = vec![0usize; ph * pw];
            for y in 0..h {
                for x in 0..w {
                    padded[y * pw + x] = m[y * w + x] as usize;
                }
            }
            Some(padded)
        } else {
            None
        };
        out.push(SegSample {
            id,
            image: Tensor::new(&[1, ph, pw], img)?,
            mask,
        });
    }
    Ok(out)
}

/// Reads `masks/<id>.png` for every mask in `dir`.
pub fn load_masks(dir: &Path) -> Result<Vec<(String, usize, usize, Vec<usize>)>> {
    let mask_dir = dir.join("masks");
    let entries = fs::read_dir(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let (h, w, m) = read_gray(&mask_dir.join(&n))?;
            let id = n.trim_end_matches(".png").to_string();
            Ok((id, h, w, m.into_iter().map(usize::from).collect()))
        })
        .collect()
}

fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

/// Writes an 8-bit grayscale PNG.
pub fn write_gray(path: &Path, h: usize, w: usize, pixels: Vec<u8>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let buf = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| Error::Contract("pixel count does not match image size".into()))?;
    buf.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes samples in the directory layout read by [`load_dir`].
pub fn write_dir(dir: &Path, samples: &[SegSample]) -> Result<()> {
    for s in samples {
        let (h, w) = (s.height(), s.width());
        let px = s.image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        write_gray(&dir.join("images").join(format!("{}.png", s.id)), h, w, px)?;
        if let Some(m) = &s.mask {
            write_gray(&dir.join("masks").join(format!("{}.png", s.id)), h, w, m.iter().map(|&c| c as u8).collect())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_determinism_classes_and_clean_path() {
        let spec = PhantomSpec::default();
        let a = generate_phantom(&spec, 42).unwrap();
        assert_eq!(a, generate_phantom(&spec, 42).unwrap());
        assert_ne!(a.image, generate_phantom(&spec, 43).unwrap().image);
        let m = a.mask.as_ref().unwrap();
        for c in 0..3 {
            assert!(m.contains(&c));
        }
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let clean = PhantomSpec {
            speckle: 0.0,
            bias: 0.0,
            ..spec
        };
        let c = generate_phantom(&clean, 5).unwrap();
        let m = c.mask.as_ref().unwrap();
        for (v, &k) in c.image.data().iter().zip(m) {
            assert_eq!(*v, clean.intensities[k]);
        }
    }

    #[test]
    fn wall_encloses_interior() {
        let p = generate_phantom(&PhantomSpec::default(), 7).unwrap();
        let m = p.mask.unwrap();
        let n = 64;
        for y in 0..n {
            for x in 0..n {
                if m[y * n + x] != 2 {
                    continue;
                }
                for (dy, dx) in [(0i32, 1i32), (1, 0), (0, -1), (-1, 0)] {
                    let (yy, xx) = ((y as i32 + dy) as usize, (x as i32 + dx) as usize);
                    assert_ne!(m[yy * n + xx], 0, "interior touches background");
                }
            }
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        let base = PhantomSpec::default();
        for bad in [
            PhantomSpec { interior_axes: [5.0, 4.0], ..base.clone() },
            PhantomSpec { wall_thickness: [0.0, 2.0], ..base.clone() },
            PhantomSpec { size: 48, ..base.clone() },
            PhantomSpec { interior_axes: [20.0, 25.0], ..base.clone() },
        ] {
            assert!(matches!(generate_phantom(&bad, 1), Err(Error::Config(_))));
        }
    }

    #[test]
    fn split_properties() {
        let spec = PhantomSpec { size: 32, interior_axes: [6.0, 8.0], wall_thickness: [3.0, 4.0], ..Default::default() };
        let data = generate_dataset(&spec, 100, 3).unwrap();
        let s = split(data.clone(), 0.5, 0.0, 1).unwrap();
        assert_eq!(s.labeled.len(), 50);
        assert_eq!(s.unlabeled.len(), 50);
        assert!(s.unlabeled.iter().all(|x| !x.is_labeled()));
        let all = split(data.clone(), 1.0, 0.2, 1).unwrap();
        assert!(all.unlabeled.is_empty());
        assert_eq!((all.labeled.len(), all.test.len()), (80, 20));
        let mut ids: Vec<String> = all.labeled.iter().chain(&all.unlabeled).chain(&all.test).map(|x| x.id.clone()).collect();
        ids.sort();
        let mut orig: Vec<String> = data.iter().map(|x| x.id.clone()).collect();
        orig.sort();
        assert_eq!(ids, orig);
        assert_eq!(split(data.clone(), 0.25, 0.2, 9).unwrap(), split(data.clone(), 0.25, 0.2, 9).unwrap());
        assert!(split(data.clone(), 0.0, 0.0, 1).is_err());
        assert!(split(data[..1].to_vec(), 0.2, 0.0, 1).is_err());
    }

    #[test]
    fn directory_round_trip_with_padding() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec { speckle: 0.0, bias: 0.0, ..Default::default() };
        let mut s = generate_phantom(&spec, 1).unwrap();
        s.id = "a".into();
        let mut u = generate_phantom(&spec, 2).unwrap().unlabeled();
        u.id = "b".into();
        write_dir(dir.path(), &[s.clone(), u]).unwrap();
        let back = load_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].mask, s.mask);
        assert!(back[0].image.max_abs_diff(&s.image) <= 0.5 / 255.0 + 1e-12);
        assert!(!back[1].is_labeled());
        // a 40x50 image pads to 64x64
        write_gray(&dir.path().join("images/c.png"), 40, 50, vec![255; 2000]).unwrap();
        let c = load_dir(dir.path()).unwrap().pop().unwrap();
        assert_eq!(c.image.shape(), &[1, 64, 64]);
        assert_eq!(c.image.data()[63], 0.0);
        assert_eq!(c.image.data()[49], 1.0);
    }
}
