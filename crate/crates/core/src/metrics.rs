//! Overlap and boundary metrics on integer label maps, and a paired t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

fn check(pred: &[usize], gt: &[usize]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!("mask sizes differ: {} vs {}", pred.len(), gt.len())));
    }
    Ok(())
}

fn counts(pred: &[usize], gt: &[usize], class: usize) -> (usize, usize, usize) {
    let (mut a, mut b, mut both) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        let (x, y) = (p == class, g == class);
        a += x as usize;
        b += y as usize;
        both += (x && y) as usize;
    }
    (a, b, both)
}

/// `2|A n B| / (|A| + |B|)` for the masks of `class`; 1 when both are empty.
pub fn dsc(pred: &[usize], gt: &[usize], class: usize) -> Result<f64> {
    check(pred, gt)?;
    let (a, b, both) = counts(pred, gt, class);
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// `|A n B| / |A u B|`; 1 when both are empty.
pub fn iou(pred: &[usize], gt: &[usize], class: usize) -> Result<f64> {
    check(pred, gt)?;
    let (a, b, both) = counts(pred, gt, class);
    let union = a + b - both;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(both as f64 / union as f64)
}

/// Pixels of the class mask with at least one 4-neighbour outside it
/// (outside the image counts as outside the mask).
pub fn boundary(mask: &[usize], width: usize, class: usize) -> Vec<(usize, usize)> {
    let h = mask.len() / width;
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < width && mask[y as usize * width + x as usize] == class
    };
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..width as isize {
            if inside(y, x) && !(inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// 95th percentile of the symmetric boundary-to-nearest-boundary distances
/// in pixels. Both masks empty gives 0; exactly one empty gives the image diagonal.
pub fn hd95(pred: &[usize], gt: &[usize], width: usize, class: usize) -> Result<f64> {
    check(pred, gt)?;
    if width == 0 || pred.len() % width != 0 {
        return Err(Error::Contract(format!("{} pixels do not form rows of width {width}", pred.len())));
    }
    let (ba, bb) = (boundary(pred, width, class), boundary(gt, width, class));
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => {
            let h = (pred.len() / width) as f64;
            return Ok((h * h + (width * width) as f64).sqrt());
        }
        _ => {}
    }
    let nearest = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Vec<f64> {
        from.iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(v, u)| {
                        let (dy, dx) = (y as f64 - v as f64, x as f64 - u as f64);
                        dy * dy + dx * dx
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    };
    let mut d = nearest(&ba, &bb);
    d.extend(nearest(&bb, &ba));
    Ok(percentile(&d, 95.0))
}

/// Foreground-averaged scores of one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub dsc: f64,
    pub iou: f64,
    pub hd95: f64,
}

/// Averages each metric over classes `1..num_classes`.
pub fn foreground_scores(pred: &[usize], gt: &[usize], width: usize, num_classes: usize) -> Result<Scores> {
    if num_classes < 2 {
        return Err(Error::Config("need at least one foreground class".into()));
    }
    let mut s = Scores::default();
    for c in 1..num_classes {
        s.dsc += dsc(pred, gt, c)?;
        s.iou += iou(pred, gt, c)?;
        s.hd95 += hd95(pred, gt, width, c)?;
    }
    let k = (num_classes - 1) as f64;
    Ok(Scores {
        dsc: s.dsc / k,
        iou: s.iou / k,
        hd95: s.hd95 / k,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    /// Two-tailed p-value.
    pub p: f64,
}

/// Paired two-tailed t-test. Identical samples give `t = 0, p = 1`; constant
/// nonzero differences are rejected as degenerate.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Contract("paired samples differ in length".into()));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Degenerate("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().all(|&v| v == 0.0) {
        return Ok(TTest { t: 0.0, p: 1.0 });
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Err(Error::Degenerate("differences have zero variance".into()));
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Degenerate(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTest { t, p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(n: usize, y0: usize, x0: usize, s: usize) -> Vec<usize> {
        let mut m = vec![0; n * n];
        for y in y0..y0 + s {
            for x in x0..x0 + s {
                m[y * n + x] = 1;
            }
        }
        m
    }

    #[test]
    fn overlap_examples() {
        let a = square(8, 1, 1, 3);
        assert_eq!((dsc(&a, &a, 1).unwrap(), iou(&a, &a, 1).unwrap()), (1.0, 1.0));
        let b = square(8, 5, 5, 2);
        assert_eq!((dsc(&a, &b, 1).unwrap(), iou(&a, &b, 1).unwrap()), (0.0, 0.0));
        // 2x2 squares sharing one column: |A| = |B| = 4, |A n B| = 2
        let a = square(8, 0, 0, 2);
        let b = square(8, 0, 1, 2);
        assert_eq!(dsc(&a, &b, 1).unwrap(), 0.5);
        assert!((iou(&a, &b, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dsc(&[0; 4], &[0; 4], 1).unwrap(), 1.0);
        assert!(dsc(&a, &b[..3], 1).is_err());
    }

    #[test]
    fn hd95_examples() {
        let a = square(16, 3, 3, 6);
        assert_eq!(hd95(&a, &a, 16, 1).unwrap(), 0.0);
        let mut p = vec![0; 64];
        let mut q = vec![0; 64];
        p[8 + 1] = 1;
        q[8 + 4] = 1;
        assert_eq!(hd95(&p, &q, 8, 1).unwrap(), 3.0);
        assert_eq!(hd95(&[0; 64], &[0; 64], 8, 1).unwrap(), 0.0);
        assert!((hd95(&p, &[0; 64], 8, 1).unwrap() - 128f64.sqrt()).abs() < 1e-12);
        let inner = square(16, 5, 5, 6);
        let outer = square(16, 2, 2, 12);
        let v = hd95(&inner, &outer, 16, 1).unwrap();
        assert!(v > 0.0 && v <= 3.0 * 2f64.sqrt() + 1e-12);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 50.0), 2.5);
        assert!((percentile(&[0.0, 10.0], 95.0) - 9.5).abs() < 1e-12);
        assert_eq!(percentile(&[7.0], 95.0), 7.0);
    }

    #[test]
    fn t_test_examples() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(paired_t_test(&a, &a).unwrap(), TTest { t: 0.0, p: 1.0 });
        assert!(matches!(paired_t_test(&a, &[0.5, 1.5, 2.5]), Err(Error::Degenerate(_))));
        let x = [0.91, 0.88, 0.93, 0.90, 0.87];
        let y = [0.89, 0.87, 0.90, 0.91, 0.84];
        // d = [0.02, 0.01, 0.03, -0.01, 0.03], mean 0.016, sample sd 0.016733
        let t = paired_t_test(&x, &y).unwrap();
        let d: [f64; 5] = [0.02, 0.01, 0.03, -0.01, 0.03];
        let m = d.iter().sum::<f64>() / 5.0;
        let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((t.t - m / (sd / 5f64.sqrt())).abs() < 1e-6);
        assert!((t.t - 2.13809).abs() < 1e-4);
        assert!((t.p - 0.0993).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn dsc_iou_identity_symmetry_translation(
            a in proptest::collection::vec(0usize..2, 64),
            b in proptest::collection::vec(0usize..2, 64),
        ) {
            let d = dsc(&a, &b, 1).unwrap();
            let j = iou(&a, &b, 1).unwrap();
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
            prop_assert_eq!(d, dsc(&b, &a, 1).unwrap());
            prop_assert_eq!(hd95(&a, &b, 8, 1).unwrap(), hd95(&b, &a, 8, 1).unwrap());
            // translate both by one column inside a wider canvas
            let shift = |m: &[usize]| {
                let mut out = vec![0; 8 * 9];
                for y in 0..8 {
                    for x in 0..8 {
                        out[y * 9 + x + 1] = m[y * 8 + x];
                    }
                }
                out
            };
            prop_assert_eq!(d, dsc(&shift(&a), &shift(&b), 1).unwrap());
            prop_assert_eq!(j, iou(&shift(&a), &shift(&b), 1).unwrap());
        }
    }
}
