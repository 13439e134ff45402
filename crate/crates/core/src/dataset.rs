use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{permutation, stream, Purpose};
use crate::tensor::Matrix;

/// Flattened images in `[0, 1]` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<R> {
    pub images: Matrix<R>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
    pub name: String,
}

impl<R: Real> Dataset<R> {
    pub fn new(images: Matrix<R>, labels: Vec<u8>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        let ds = Dataset {
            images,
            labels,
            num_classes,
            name: name.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.rows() != self.labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} labels", self.images.rows()),
                format!("{}", self.labels.len()),
            ));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad as usize,
                num_classes: self.num_classes,
            });
        }
        let (lo, hi) = (R::zero(), R::one());
        if self.images.as_slice().iter().any(|&p| !(p >= lo && p <= hi)) {
            return Err(Error::Config(format!("{}: pixel outside [0, 1]", self.name)));
        }
        Ok(())
    }

    /// The listed instances, in order.
    pub fn subset(&self, idx: &[usize], name: impl Into<String>) -> Self {
        Dataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            name: name.into(),
        }
    }

    /// The first `n` instances.
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.name.clone())
    }

    pub fn cast<S: Real>(&self) -> Dataset<S> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionScheme {
    /// Shuffled, near-equal split.
    Iid,
    /// Contiguous class ranges, one range per part.
    ByClass,
}

impl fmt::Display for PartitionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionScheme::Iid => "iid",
            PartitionScheme::ByClass => "by-class",
        })
    }
}

impl FromStr for PartitionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(PartitionScheme::Iid),
            "by-class" | "byclass" => Ok(PartitionScheme::ByClass),
            other => Err(Error::Config(format!("unknown partition scheme `{other}`"))),
        }
    }
}

/// Splits `ds` into `n_parts` disjoint datasets whose union is `ds`.
pub fn partition<R: Real>(ds: &Dataset<R>, n_parts: usize, scheme: PartitionScheme, seed: u64) -> Result<Vec<Dataset<R>>> {
    if n_parts == 0 || n_parts > ds.len() {
        return Err(Error::Config(format!(
            "cannot split {} instances into {n_parts} parts",
            ds.len()
        )));
    }
    let groups: Vec<Vec<usize>> = match scheme {
        PartitionScheme::Iid => {
            let order = if n_parts == 1 {
                (0..ds.len()).collect()
            } else {
                permutation(&mut stream(seed, Purpose::Partition, 0, 0), ds.len())
            };
            let (base, extra) = (ds.len() / n_parts, ds.len() % n_parts);
            let mut start = 0;
            (0..n_parts)
                .map(|p| {
                    let size = base + usize::from(p < extra);
                    let g = order[start..start + size].to_vec();
                    start += size;
                    g
                })
                .collect()
        }
        PartitionScheme::ByClass => {
            if n_parts > ds.num_classes {
                return Err(Error::Config(format!(
                    "{n_parts} class ranges requested for {} classes",
                    ds.num_classes
                )));
            }
            let mut groups = alloc::vec![Vec::new(); n_parts];
            for (i, &l) in ds.labels.iter().enumerate() {
                groups[l as usize * n_parts / ds.num_classes].push(i);
            }
            groups
        }
    };
    groups
        .iter()
        .enumerate()
        .map(|(p, g)| {
            if g.is_empty() {
                Err(Error::Config(format!("partition {p} of {} is empty", ds.name)))
            } else {
                Ok(ds.subset(g, format!("{}[{scheme} {p}/{n_parts}]", ds.name)))
            }
        })
        .collect()
}

/// Noise standard deviation of [`synthetic_blobs`].
pub const BLOB_NOISE: f64 = 0.15;

/// Gaussian class blobs clipped to `[0, 1]`. Class centres sit at
/// `0.5 + 0.05·separation·z` with `z` standard normal per class and
/// dimension; labels cycle through the classes.
pub fn synthetic_blobs<R: Real>(n: usize, d: usize, num_classes: usize, separation: f64, seed: u64) -> Result<Dataset<R>> {
    if d <= num_classes || num_classes == 0 || num_classes > 256 {
        return Err(Error::Config(format!(
            "synthetic blobs need 0 < num_classes <= 256 and d > num_classes (d={d}, classes={num_classes})"
        )));
    }
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut centre_rng = stream(seed, Purpose::Synthetic, 0, 0);
    let centres: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..d).map(|_| 0.5 + 0.05 * separation * unit.sample(&mut centre_rng)).collect())
        .collect();
    let mut rng = stream(seed, Purpose::Synthetic, 1, 0);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        labels.push(c as u8);
        for &mu in &centres[c] {
            let v: f64 = mu + BLOB_NOISE * unit.sample(&mut rng);
            data.push(R::from_f64(v.clamp(0.0, 1.0)));
        }
    }
    // shuffle so that contiguous slices are class-balanced but not periodic
    let order = permutation(&mut rng, n);
    let images = Matrix::from_vec(n, d, data)?.select_rows(&order);
    let labels = order.iter().map(|&i| labels[i]).collect();
    Dataset::new(images, labels, num_classes, format!("blobs(n={n},d={d},k={num_classes},sep={separation})"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::cross_entropy;
    use crate::adam::{AdamConfig, AdamState};
    use alloc::vec;

    fn multiset(ds: &Dataset<f64>) -> Vec<(Vec<u64>, u8)> {
        let mut v: Vec<(Vec<u64>, u8)> = ds
            .images
            .row_iter()
            .zip(&ds.labels)
            .map(|(r, &l)| (r.iter().map(|x| x.to_bits()).collect(), l))
            .collect();
        v.sort();
        v
    }

    #[test]
    fn blobs_are_deterministic_and_in_range() {
        let a = synthetic_blobs::<f64>(200, 12, 4, 3.0, 1).unwrap();
        assert_eq!(a, synthetic_blobs::<f64>(200, 12, 4, 3.0, 1).unwrap());
        assert_ne!(a.images, synthetic_blobs::<f64>(200, 12, 4, 3.0, 2).unwrap().images);
        a.validate().unwrap();
        assert!(synthetic_blobs::<f64>(10, 4, 4, 1.0, 1).is_err());
    }

    /// Softmax regression trained by full-batch Adam; returns training accuracy.
    fn linear_oracle_accuracy(ds: &Dataset<f64>) -> f64 {
        let d = ds.dim();
        let k = ds.num_classes;
        let mut w = Matrix::zeros(d, k);
        let mut b = Matrix::zeros(1, k);
        let mut sw = AdamState::new(d, k, AdamConfig::default());
        let mut sb = AdamState::new(1, k, AdamConfig::default());
        for _ in 0..300 {
            let mut z = ds.images.matmul(&w).unwrap();
            z.add_row_vector(b.as_slice()).unwrap();
            let (_, dz) = cross_entropy(&z, &ds.labels).unwrap();
            let gw = ds.images.matmul_tn(&dz).unwrap();
            let gb = Matrix::from_vec(1, k, dz.column_sums()).unwrap();
            sw.step(&mut w, &gw, 0.05).unwrap();
            sb.step(&mut b, &gb, 0.05).unwrap();
        }
        let mut z = ds.images.matmul(&w).unwrap();
        z.add_row_vector(b.as_slice()).unwrap();
        let pred = z.argmax_rows();
        pred.iter().zip(&ds.labels).filter(|(p, l)| **p == **l as usize).count() as f64 / ds.len() as f64
    }

    #[test]
    fn separated_blobs_are_linearly_separable() {
        let ds = synthetic_blobs::<f64>(600, 20, 4, 5.0, 3).unwrap();
        let acc = linear_oracle_accuracy(&ds);
        assert!(acc > 0.95, "{acc}");
    }

    #[test]
    fn unseparated_blobs_hold_out_at_chance() {
        // fit on one half, score on the other: no signal means chance level
        let ds = synthetic_blobs::<f64>(2000, 20, 4, 0.0, 3).unwrap();
        let train = ds.head(1000);
        let test_idx: Vec<usize> = (1000..2000).collect();
        let test = ds.subset(&test_idx, "test");
        // class-blind baseline: predict the majority training class
        let mut counts = [0usize; 4];
        train.labels.iter().for_each(|&l| counts[l as usize] += 1);
        let majority = crate::tensor::argmax(&counts.map(|c| c as f64));
        let acc = test.labels.iter().filter(|&&l| l as usize == majority).count() as f64 / test.len() as f64;
        assert!((acc - 0.25).abs() < 0.05, "{acc}");
    }

    #[test]
    fn single_part_is_identity() {
        let ds = synthetic_blobs::<f64>(50, 8, 3, 2.0, 9).unwrap();
        let parts = partition(&ds, 1, PartitionScheme::Iid, 4).unwrap();
        assert_eq!(parts[0].images, ds.images);
        assert_eq!(parts[0].labels, ds.labels);
    }

    #[test]
    fn iid_parts_are_balanced_and_cover_the_dataset() {
        let ds = synthetic_blobs::<f64>(103, 8, 3, 2.0, 9).unwrap();
        let parts = partition(&ds, 4, PartitionScheme::Iid, 4).unwrap();
        let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut union = parts[0].clone();
        for p in &parts[1..] {
            union.images = union.images.vstack(&p.images).unwrap();
            union.labels.extend_from_slice(&p.labels);
        }
        assert_eq!(multiset(&union), multiset(&ds));
    }

    #[test]
    fn by_class_parts_hold_contiguous_ranges() {
        let ds = synthetic_blobs::<f64>(100, 12, 10, 2.0, 9).unwrap();
        let parts = partition(&ds, 2, PartitionScheme::ByClass, 0).unwrap();
        assert!(parts[0].labels.iter().all(|&l| l < 5));
        assert!(parts[1].labels.iter().all(|&l| l >= 5));
        assert_eq!(parts[0].len() + parts[1].len(), 100);
        assert!(partition(&ds, 11, PartitionScheme::ByClass, 0).is_err());
        assert!(partition(&ds, 101, PartitionScheme::Iid, 0).is_err());
    }

    #[test]
    fn validation_rejects_bad_data() {
        let img = Matrix::from_rows(&[[0.5, 1.5]]);
        assert!(Dataset::new(img, vec![0], 2, "x").is_err());
        let img = Matrix::from_rows(&[[0.5, 0.5]]);
        assert!(Dataset::new(img.clone(), vec![2], 2, "x").is_err());
        assert!(Dataset::new(img, vec![0, 1], 2, "x").is_err());
    }
}
