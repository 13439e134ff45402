//! MNIST IDX and CIFAR-10 binary loaders.

use std::fs;
use std::path::{Path, PathBuf};

use ffpipe_core::dataset::{partition, synthetic_blobs};
use ffpipe_core::wire::{decode_model, encode_model};
use ffpipe_core::{Dataset, Matrix, Model, Real};

use crate::config::{DataConfig, DatasetKind};
use crate::error::{PipeError, Result};

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3072;
pub const CIFAR_CLASSES: usize = 10;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| PipeError::io(path, e))
}

fn malformed(path: &Path, msg: impl Into<String>) -> PipeError {
    PipeError::Data(format!("{}: {}", path.display(), msg.into()))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn scale<R: Real>(b: u8) -> R {
    R::from_f64(b as f64 / 255.0)
}

/// Parses an IDX image/label file pair into a dataset with pixels in [0,1].
pub fn load_mnist_idx<R: Real>(images_path: &Path, labels_path: &Path) -> Result<Dataset<R>> {
    let img = read(images_path)?;
    let lab = read(labels_path)?;
    if img.len() < 16 {
        return Err(malformed(images_path, "shorter than the 16-byte IDX header"));
    }
    if lab.len() < 8 {
        return Err(malformed(labels_path, "shorter than the 8-byte IDX header"));
    }
    let magic = be_u32(&img, 0);
    if magic != MNIST_IMAGE_MAGIC {
        return Err(malformed(images_path, format!("bad magic {magic:#010x}, expected {MNIST_IMAGE_MAGIC:#010x}")));
    }
    let magic = be_u32(&lab, 0);
    if magic != MNIST_LABEL_MAGIC {
        return Err(malformed(labels_path, format!("bad magic {magic:#010x}, expected {MNIST_LABEL_MAGIC:#010x}")));
    }
    let n = be_u32(&img, 4) as usize;
    let (rows, cols) = (be_u32(&img, 8) as usize, be_u32(&img, 12) as usize);
    let d = rows * cols;
    if img.len() != 16 + n * d {
        return Err(malformed(
            images_path,
            format!("{n} images of {rows}x{cols} need {} bytes, file has {}", 16 + n * d, img.len()),
        ));
    }
    let nl = be_u32(&lab, 4) as usize;
    if nl != n {
        return Err(malformed(labels_path, format!("{nl} labels for {n} images")));
    }
    if lab.len() != 8 + n {
        return Err(malformed(labels_path, format!("{n} labels need {} bytes, file has {}", 8 + n, lab.len())));
    }
    let labels = lab[8..].to_vec();
    if let Some(bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(malformed(labels_path, format!("label {bad} out of range")));
    }
    let pixels = img[16..].iter().map(|&b| scale::<R>(b)).collect();
    let name = images_path.file_name().map_or_else(|| "mnist".into(), |f| f.to_string_lossy().into_owned());
    Ok(Dataset::new(Matrix::from_vec(n, d, pixels)?, labels, 10, name)?)
}

/// The official train or test split from a directory holding the four
/// uncompressed IDX files.
pub fn load_mnist_dir<R: Real>(dir: &Path, train: bool) -> Result<Dataset<R>> {
    let prefix = if train { "train" } else { "t10k" };
    load_mnist_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Concatenates CIFAR-10 binary batches: each record is one label byte and
/// 3072 pixel bytes (1024 R, 1024 G, 1024 B, row-major).
pub fn load_cifar10<R: Real>(batch_paths: &[PathBuf]) -> Result<Dataset<R>> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in batch_paths {
        let bytes = read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(malformed(
                path,
                format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
            ));
        }
        for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] as usize >= CIFAR_CLASSES {
                return Err(malformed(path, format!("record {i} has label {}", rec[0])));
            }
            labels.push(rec[0]);
            pixels.extend(rec[1..].iter().map(|&b| scale::<R>(b)));
        }
    }
    let n = labels.len();
    Ok(Dataset::new(Matrix::from_vec(n, 3072, pixels)?, labels, CIFAR_CLASSES, "cifar-10")?)
}

/// The train (five batches) or test split from a `cifar-10-batches-bin`
/// directory.
pub fn load_cifar10_dir<R: Real>(dir: &Path, train: bool) -> Result<Dataset<R>> {
    let paths: Vec<PathBuf> = if train {
        (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect()
    } else {
        vec![dir.join("test_batch.bin")]
    };
    load_cifar10(&paths)
}

/// Separation of the class centres in generated blob data.
pub const BLOB_SEPARATION: f64 = 3.0;

/// Train and test splits as configured, with limits applied. Blob data is
/// generated from `seed`; train and test are two halves of one draw, so
/// they share class centres.
pub fn load_splits<R: Real>(cfg: &DataConfig, input_dim: usize, classes: usize, seed: u64) -> Result<(Dataset<R>, Dataset<R>)> {
    let (train, test) = match cfg.kind {
        DatasetKind::Mnist => (load_mnist_dir(&cfg.dir, true)?, load_mnist_dir(&cfg.dir, false)?),
        DatasetKind::Cifar10 => (load_cifar10_dir(&cfg.dir, true)?, load_cifar10_dir(&cfg.dir, false)?),
        DatasetKind::Blobs => {
            let all = synthetic_blobs::<R>(2 * cfg.blobs, input_dim, classes, BLOB_SEPARATION, seed)?;
            let (a, b): (Vec<usize>, Vec<usize>) = (0..all.len()).partition(|i| i % 2 == 0);
            (all.subset(&a, "blobs-train"), all.subset(&b, "blobs-test"))
        }
    };
    let limit = |d: Dataset<R>, n: Option<usize>| match n {
        Some(n) if n < d.len() => d.head(n),
        _ => d,
    };
    Ok((limit(train, cfg.train_limit), limit(test, cfg.test_limit)))
}

/// Node `node`'s private share of `train` for federated runs.
pub fn node_partition<R: Real>(train: &Dataset<R>, cfg: &DataConfig, nodes: usize, node: usize, seed: u64) -> Result<Dataset<R>> {
    let mut parts = partition(train, nodes, cfg.partition, seed)?;
    if node >= parts.len() {
        return Err(PipeError::Config(format!("node {node} of {nodes} has no partition")));
    }
    Ok(parts.swap_remove(node))
}

pub fn save_model<R: Real>(path: &Path, model: &Model<R>, chapter: u16) -> Result<()> {
    fs::write(path, encode_model(model, chapter)?).map_err(|e| PipeError::io(path, e))
}

pub fn load_model<R: Real>(path: &Path) -> Result<Model<R>> {
    let bytes = read(path)?;
    decode_model(&bytes).map_err(|e| PipeError::Data(format!("{}: {e}", path.display())))
}

/// The float width stored in a model file, in bytes per value.
pub fn model_precision(path: &Path) -> Result<usize> {
    let bytes = read(path)?;
    match bytes.get(..6) {
        Some([b'F', b'F', b'P', b'M', _, flag]) => Ok(if *flag == <f64 as Real>::WIRE_FLAG { 8 } else { 4 }),
        _ => Err(malformed(path, "not a model file")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(n: u32, rows: u32, cols: u32, body: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&MNIST_IMAGE_MAGIC.to_be_bytes());
        for x in [n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&MNIST_LABEL_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    #[test]
    fn idx_scaling_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let i = write(dir.path(), "i", &idx_images(2, 2, 2, &[0, 255, 51, 102, 1, 2, 3, 4]));
        let l = write(dir.path(), "l", &idx_labels(&[7, 3]));
        let ds = load_mnist_idx::<f64>(&i, &l).unwrap();
        assert_eq!(ds.images.shape(), (2, 4));
        assert_eq!(ds.images.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.labels, vec![7, 3]);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let good_i = idx_images(2, 2, 2, &[0; 8]);
        let good_l = idx_labels(&[1, 2]);
        let l = write(dir.path(), "l", &good_l);
        let mut bad_magic = good_i.clone();
        bad_magic[3] = 0x01;
        let cases = [
            bad_magic,
            good_i[..good_i.len() - 1].to_vec(),
            idx_images(3, 2, 2, &[0; 8]),
            good_i[..10].to_vec(),
        ];
        for (k, bytes) in cases.iter().enumerate() {
            let i = write(dir.path(), &format!("i{k}"), bytes);
            assert!(load_mnist_idx::<f32>(&i, &l).is_err(), "case {k}");
        }
        let i = write(dir.path(), "i", &good_i);
        let short = write(dir.path(), "l3", &idx_labels(&[1, 2, 3]));
        assert!(load_mnist_idx::<f32>(&i, &short).is_err());
        let bad_label = write(dir.path(), "l10", &idx_labels(&[1, 10]));
        assert!(load_mnist_idx::<f32>(&i, &bad_label).is_err());
        assert!(load_mnist_idx::<f32>(&i, &dir.path().join("missing")).is_err());
        assert!(load_mnist_idx::<f32>(&i, &l).is_ok());
    }

    #[test]
    fn cifar_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![4u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        let mut two = rec.clone();
        two[0] = 9;
        two.extend_from_slice(&rec);
        let p = write(dir.path(), "b", &two);
        let ds = load_cifar10::<f64>(&[p.clone()]).unwrap();
        assert_eq!(ds.labels, vec![9, 4]);
        assert_eq!(ds.images.get(1, 1024), 0.0);
        assert_eq!(ds.images.get(0, 255), 1.0);
        let again = load_cifar10::<f64>(&[p]).unwrap();
        assert_eq!(ds, again);
        let cut = write(dir.path(), "c", &two[..two.len() - 1]);
        assert!(load_cifar10::<f64>(&[cut]).is_err());
        let mut bad = rec.clone();
        bad[0] = 10;
        let bad = write(dir.path(), "d", &bad);
        assert!(load_cifar10::<f64>(&[bad]).is_err());
    }
}
