//! Datasets: the concentric-circles generator, the MNIST IDX loader, and
//! seeded subsetting/splitting.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tensor::Tensor;

/// MNIST pixel normalization: (x/255 - MEAN) / STD. Declared convention.
pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

/// Environment variable naming the default MNIST directory.
pub const DATA_DIR_ENV: &str = "LAP_DATA_DIR";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic 0x{found:08X}, expected 0x{expected:08X}")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated at byte offset {offset} ({context})")]
    Truncated {
        path: String,
        offset: usize,
        context: String,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Inputs plus integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub name: String,
    pub num_classes: usize,
    /// Human-readable note on how inputs were normalized.
    pub normalization: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `indices` gathered into a new dataset (order preserved).
    pub fn gather(&self, indices: &[usize], name: String) -> Dataset {
        let row = self.inputs.row_len();
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        Dataset {
            inputs: Tensor::from_vec(shape, data).expect("gather"),
            labels,
            name,
            num_classes: self.num_classes,
            normalization: self.normalization.clone(),
        }
    }

    /// Batch tensor plus labels for rows `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.gather(indices, String::new());
        (d.inputs, d.labels)
    }
}

/// Train/test split request.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    /// Fraction of samples that go to the training side.
    pub train_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

/// Two concentric circles: class 0 on the unit circle, class 1 on a circle
/// of radius `radius_ratio`, n/2 points each on an even angular grid, with
/// i.i.d. Gaussian noise of `noise_std` on both coordinates.
pub fn make_circles(
    n: usize,
    noise_std: f64,
    radius_ratio: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if n % 2 != 0 {
        return Err(DataError::Invalid(format!(
            "make_circles needs an even point count, got {n}"
        )));
    }
    if !(0.0 < radius_ratio && radius_ratio < 1.0) {
        return Err(DataError::Invalid(format!(
            "radius_ratio must lie in (0,1), got {radius_ratio}"
        )));
    }
    let half = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for class in 0..2usize {
        let radius = if class == 0 { 1.0 } else { radius_ratio };
        for i in 0..half {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / half as f64;
            let nx: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            let ny: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            data.push(radius * theta.cos() + noise_std * nx);
            data.push(radius * theta.sin() + noise_std * ny);
            labels.push(class);
        }
    }
    Ok(Dataset {
        inputs: Tensor::from_vec(vec![n, 2], data).expect("circles tensor"),
        labels,
        name: format!("circles(n={n},noise={noise_std},ratio={radius_ratio},seed={seed})"),
        num_classes: 2,
        normalization: "none".to_string(),
    })
}

fn read_be_u32(
    r: &mut impl Read,
    path: &Path,
    offset: &mut usize,
    context: &str,
) -> Result<u32, DataError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DataError::Truncated {
                path: path.display().to_string(),
                offset: *offset,
                context: context.to_string(),
            }
        } else {
            DataError::Io {
                path: path.display().to_string(),
                source: e,
            }
        }
    })?;
    *offset += 4;
    Ok(u32::from_be_bytes(buf))
}

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Parses the big-endian IDX pair into `[N,1,28,28]` inputs scaled to [0,1]
/// and normalized by the declared global mean/std.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let open = |p: &Path| -> Result<BufReader<File>, DataError> {
        File::open(p).map(BufReader::new).map_err(|e| DataError::Io {
            path: p.display().to_string(),
            source: e,
        })
    };

    let mut ir = open(images_path)?;
    let mut off = 0usize;
    let magic = read_be_u32(&mut ir, images_path, &mut off, "images magic")?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.display().to_string(),
            found: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let n = read_be_u32(&mut ir, images_path, &mut off, "image count")? as usize;
    let rows = read_be_u32(&mut ir, images_path, &mut off, "row count")? as usize;
    let cols = read_be_u32(&mut ir, images_path, &mut off, "column count")? as usize;
    if rows != 28 || cols != 28 {
        return Err(DataError::Invalid(format!(
            "{}: expected 28x28 images, file declares {rows}x{cols}",
            images_path.display()
        )));
    }
    let mut pixels = vec![0u8; n * rows * cols];
    ir.read_exact(&mut pixels).map_err(|e| DataError::Truncated {
        path: images_path.display().to_string(),
        offset: off,
        context: format!("raster data ({} bytes expected): {e}", n * rows * cols),
    })?;

    let mut lr = open(labels_path)?;
    let mut loff = 0usize;
    let magic = read_be_u32(&mut lr, labels_path, &mut loff, "labels magic")?;
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.display().to_string(),
            found: magic,
            expected: LABELS_MAGIC,
        });
    }
    let ln = read_be_u32(&mut lr, labels_path, &mut loff, "label count")? as usize;
    if ln != n {
        return Err(DataError::Invalid(format!(
            "{} declares {n} images but {} declares {ln} labels",
            images_path.display(),
            labels_path.display()
        )));
    }
    let mut raw_labels = vec![0u8; ln];
    lr.read_exact(&mut raw_labels)
        .map_err(|e| DataError::Truncated {
            path: labels_path.display().to_string(),
            offset: loff,
            context: format!("label data: {e}"),
        })?;
    if let Some(&bad) = raw_labels.iter().find(|&&l| l > 9) {
        return Err(DataError::Invalid(format!("label {bad} out of range")));
    }

    let data: Vec<f64> = pixels
        .iter()
        .map(|&p| (p as f64 / 255.0 - MNIST_MEAN) / MNIST_STD)
        .collect();
    Ok(Dataset {
        inputs: Tensor::from_vec(vec![n, 1, 28, 28], data).expect("mnist tensor"),
        labels: raw_labels.iter().map(|&l| l as usize).collect(),
        name: format!("mnist({})", images_path.display()),
        num_classes: 10,
        normalization: format!("(x/255 - {MNIST_MEAN}) / {MNIST_STD}"),
    })
}

/// Resolves the MNIST data directory: explicit argument, else the
/// `LAP_DATA_DIR` environment variable, else `data/mnist` under the
/// current directory.
pub fn mnist_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(v) = std::env::var_os(DATA_DIR_ENV) {
        return PathBuf::from(v);
    }
    PathBuf::from("data/mnist")
}

/// Loads the train or test MNIST pair from a directory with the standard
/// file names.
pub fn load_mnist_split(dir: &Path, train: bool) -> Result<Dataset, DataError> {
    let prefix = if train { "train" } else { "t10k" };
    let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    if !images.exists() || !labels.exists() {
        return Err(DataError::Invalid(format!(
            "MNIST files not found; expected {} and {}",
            images.display(),
            labels.display()
        )));
    }
    load_mnist_idx(&images, &labels)
}

/// Seeded draw of `size` samples without replacement. Stratified mode
/// balances classes to within one sample.
pub fn subsample(
    dataset: &Dataset,
    size: usize,
    seed: u64,
    stratified: bool,
) -> Result<Dataset, DataError> {
    if size > dataset.len() {
        return Err(DataError::Invalid(format!(
            "subsample of {size} from {} samples",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = if stratified {
        stratified_indices(&dataset.labels, dataset.num_classes, size, &mut rng)
    } else {
        let mut all: Vec<usize> = (0..dataset.len()).collect();
        all.shuffle(&mut rng);
        all.truncate(size);
        all
    };
    Ok(dataset.gather(
        &indices,
        format!("{}[subsample size={size} seed={seed}]", dataset.name),
    ))
}

fn stratified_indices(
    labels: &[usize],
    num_classes: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    // Quota q for every class; the remainder goes to a random subset of
    // classes, keeping counts within one of each other.
    let q = size / num_classes;
    let r = size % num_classes;
    let mut class_order: Vec<usize> = (0..num_classes).collect();
    class_order.shuffle(rng);
    let mut chosen = Vec::with_capacity(size);
    for (rank, &class) in class_order.iter().enumerate() {
        let want = q + usize::from(rank < r);
        let pool = &mut per_class[class];
        pool.shuffle(rng);
        chosen.extend_from_slice(&pool[..want.min(pool.len())]);
    }
    // If some class ran short, top up from the leftovers uniformly.
    if chosen.len() < size {
        let mut rest: Vec<usize> = per_class
            .iter()
            .flat_map(|p| p.iter().copied())
            .filter(|i| !chosen.contains(i))
            .collect();
        rest.shuffle(rng);
        chosen.extend_from_slice(&rest[..size - chosen.len()]);
    }
    chosen.sort_unstable();
    chosen
}

/// Disjoint train/test split; the two sides partition the input set.
pub fn split(dataset: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset), DataError> {
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(DataError::Invalid(format!(
            "train_fraction {} outside [0,1]",
            spec.train_fraction
        )));
    }
    let n = dataset.len();
    let train_size = (n as f64 * spec.train_fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train_idx: Vec<usize> = if spec.stratified {
        stratified_indices(&dataset.labels, dataset.num_classes, train_size, &mut rng)
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        all.truncate(train_size);
        all.sort_unstable();
        all
    };
    let in_train: Vec<bool> = {
        let mut mask = vec![false; n];
        for &i in &train_idx {
            mask[i] = true;
        }
        mask
    };
    let test_idx: Vec<usize> = (0..n).filter(|&i| !in_train[i]).collect();
    Ok((
        dataset.gather(&train_idx, format!("{}[train]", dataset.name)),
        dataset.gather(&test_idx, format!("{}[test]", dataset.name)),
    ))
}

/// Writes a circles-style dataset as `x1,x2,label` CSV.
pub fn export_circles_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut f = File::create(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut out = String::from("x1,x2,label\n");
    for i in 0..dataset.len() {
        let row = &dataset.inputs.data()[i * 2..i * 2 + 2];
        out.push_str(&format!("{},{},{}\n", row[0], row[1], dataset.labels[i]));
    }
    f.write_all(out.as_bytes()).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circles_noiseless_geometry() {
        let ds = make_circles(40, 0.0, 0.5, 1).unwrap();
        for i in 0..ds.len() {
            let x = &ds.inputs.data()[i * 2..i * 2 + 2];
            let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
            let want = if ds.labels[i] == 0 { 1.0 } else { 0.5 };
            assert!((r - want).abs() < 1e-12, "point {i}: radius {r}");
        }
    }

    #[test]
    fn circles_balanced_classes() {
        let ds = make_circles(1000, 0.08, 0.5, 3).unwrap();
        let ones = ds.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(ones, 500);
        assert_eq!(ds.len(), 1000);
    }

    #[test]
    fn circles_rejects_odd_n() {
        assert!(make_circles(5, 0.0, 0.5, 0).is_err());
    }

    #[test]
    fn circles_separable_at_mid_radius() {
        // over 100 seeds, >= 99% of points sit on the correct side of the
        // circle of radius 0.75
        let mut total = 0usize;
        let mut good = 0usize;
        for seed in 0..100 {
            let ds = make_circles(200, 0.08, 0.5, seed).unwrap();
            for i in 0..ds.len() {
                let x = &ds.inputs.data()[i * 2..i * 2 + 2];
                let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
                let correct = if ds.labels[i] == 0 { r > 0.75 } else { r < 0.75 };
                total += 1;
                good += usize::from(correct);
            }
        }
        let frac = good as f64 / total as f64;
        assert!(frac >= 0.99, "separable fraction {frac}");
    }

    #[test]
    fn circles_class_means_near_origin() {
        let ds = make_circles(10_000, 0.08, 0.5, 7).unwrap();
        for class in 0..2 {
            let mut mean = [0.0f64; 2];
            let mut count = 0.0;
            for i in 0..ds.len() {
                if ds.labels[i] == class {
                    mean[0] += ds.inputs.data()[i * 2];
                    mean[1] += ds.inputs.data()[i * 2 + 1];
                    count += 1.0;
                }
            }
            let norm = ((mean[0] / count).powi(2) + (mean[1] / count).powi(2)).sqrt();
            assert!(norm < 0.05, "class {class} mean norm {norm}");
        }
    }

    #[test]
    fn circles_deterministic_per_seed() {
        let a = make_circles(100, 0.08, 0.5, 9).unwrap();
        let b = make_circles(100, 0.08, 0.5, 9).unwrap();
        assert_eq!(a.inputs.data(), b.inputs.data());
        let c = make_circles(100, 0.08, 0.5, 10).unwrap();
        assert_ne!(a.inputs.data(), c.inputs.data());
    }

    #[test]
    fn subsample_full_size_is_permutation() {
        let ds = make_circles(50, 0.05, 0.5, 2).unwrap();
        let sub = subsample(&ds, 50, 11, false).unwrap();
        assert_eq!(sub.len(), 50);
        let mut a: Vec<u64> = ds.inputs.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u64> = sub.inputs.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn stratified_subsample_balances_exactly() {
        // 10 classes faked by relabeling circles points
        let mut ds = make_circles(200, 0.0, 0.5, 4).unwrap();
        ds.num_classes = 10;
        for (i, l) in ds.labels.iter_mut().enumerate() {
            *l = i % 10;
        }
        let sub = subsample(&ds, 100, 3, true).unwrap();
        let mut counts = vec![0usize; 10];
        for &l in &sub.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10), "{counts:?}");
    }

    #[test]
    fn different_seeds_draw_different_subsets() {
        let ds = make_circles(2000, 0.08, 0.5, 5).unwrap();
        let a = subsample(&ds, 100, 1, false).unwrap();
        let b = subsample(&ds, 100, 2, false).unwrap();
        assert_ne!(a.inputs.data(), b.inputs.data());
    }

    #[test]
    fn subsample_rejects_oversize() {
        let ds = make_circles(10, 0.0, 0.5, 0).unwrap();
        assert!(subsample(&ds, 11, 0, false).is_err());
    }

    #[test]
    fn split_is_disjoint_partition() {
        let ds = make_circles(100, 0.08, 0.5, 6).unwrap();
        let (train, test) = split(
            &ds,
            SplitSpec {
                train_fraction: 0.8,
                seed: 3,
                stratified: true,
            },
        )
        .unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        // disjoint by construction: every original row lands exactly once
        let mut all: Vec<u64> = train
            .inputs
            .data()
            .iter()
            .chain(test.inputs.data())
            .map(|v| v.to_bits())
            .collect();
        let mut orig: Vec<u64> = ds.inputs.data().iter().map(|v| v.to_bits()).collect();
        all.sort_unstable();
        orig.sort_unstable();
        assert_eq!(all, orig);
    }

    #[test]
    fn idx_magic_and_truncation_errors() {
        let dir = std::env::temp_dir().join(format!("lap-idx-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let bad = dir.join("bad-images");
        std::fs::write(&bad, 0xDEADBEEFu32.to_be_bytes()).unwrap();
        let labels = dir.join("labels");
        std::fs::write(&labels, LABELS_MAGIC.to_be_bytes()).unwrap();
        match load_mnist_idx(&bad, &labels) {
            Err(DataError::BadMagic { found, .. }) => assert_eq!(found, 0xDEADBEEF),
            other => panic!("expected BadMagic, got {other:?}"),
        }

        // valid magic but truncated header
        let trunc = dir.join("trunc-images");
        std::fs::write(&trunc, IMAGES_MAGIC.to_be_bytes()).unwrap();
        match load_mnist_idx(&trunc, &labels) {
            Err(DataError::Truncated { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected Truncated, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn synthetic_all_zero_image_normalizes_to_constant() {
        let dir = std::env::temp_dir().join(format!("lap-idx-zero-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let images = dir.join("images");
        let labels = dir.join("labels");
        let mut img = Vec::new();
        img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        img.extend_from_slice(&[0u8; 28 * 28]);
        std::fs::write(&images, img).unwrap();
        let mut lab = Vec::new();
        lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&1u32.to_be_bytes());
        lab.push(7u8);
        std::fs::write(&labels, lab).unwrap();
        let ds = load_mnist_idx(&images, &labels).unwrap();
        let want = -MNIST_MEAN / MNIST_STD;
        assert!(ds.inputs.data().iter().all(|&v| (v - want).abs() < 1e-15));
        assert_eq!(ds.labels, vec![7]);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn official_files_have_canonical_histogram() {
        // Runs only where the real files are present (LAP_DATA_DIR or ./data/mnist).
        let dir = mnist_dir(None);
        if !dir.join("train-images-idx3-ubyte").exists() {
            eprintln!("skipping: MNIST not found under {}", dir.display());
            return;
        }
        let ds = load_mnist_split(&dir, true).unwrap();
        assert_eq!(ds.len(), 60000);
        let mut counts = vec![0usize; 10];
        for &l in &ds.labels {
            counts[l] += 1;
        }
        assert_eq!(
            counts,
            vec![5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]
        );
    }
}
