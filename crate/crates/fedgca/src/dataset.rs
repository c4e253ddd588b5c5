//! Dataset ingestion and non-IID client partitioning.
//!
//! Supported sources: IDX binary pairs (MNIST/USPS family), a directory
//! format (`labels.csv` + PNG files), and a deterministic synthetic
//! color-shift domain used as the self-contained out-of-distribution
//! target. Partitioning follows the per-class Dirichlet convention.

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::Array4;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// A domain-tagged image classification dataset. Read-only after
/// construction; shared freely across simulated clients.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub domain_tag: String,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(
        images: Array4<f64>,
        labels: Vec<usize>,
        domain_tag: impl Into<String>,
        class_count: usize,
    ) -> Result<Self> {
        if images.dim().0 != labels.len() {
            return Err(Error::Dataset(format!(
                "image count {} != label count {}",
                images.dim().0,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Dataset(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        if images.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Dataset("pixel value outside [0, 1]".into()));
        }
        Ok(LabeledDataset {
            images,
            labels,
            domain_tag: domain_tag.into(),
            class_count,
        })
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn channels(&self) -> usize {
        self.images.dim().1
    }

    /// Materializes the rows selected by `indices` as a new dataset.
    pub fn subset(&self, indices: &[usize], domain_tag: impl Into<String>) -> Self {
        let (_, c, h, w) = self.images.dim();
        let mut images = Array4::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &idx) in indices.iter().enumerate() {
            images
                .index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.images.index_axis(ndarray::Axis(0), idx));
            labels.push(self.labels[idx]);
        }
        LabeledDataset {
            images,
            labels,
            domain_tag: domain_tag.into(),
            class_count: self.class_count,
        }
    }
}

/// Non-IID assignment of source indices to `K` clients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub seed: u64,
    pub concentration: f64,
    pub assignments: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

#[derive(Debug)]
struct IdxPayload {
    dims: Vec<usize>,
    data: Vec<u8>,
}

fn parse_idx(path: &Path) -> Result<IdxPayload> {
    let raw = read_file(path)?;
    let err = |reason: &str| Error::Idx {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if raw.len() < 4 {
        return Err(err("file shorter than magic number"));
    }
    if raw[0] != 0 || raw[1] != 0 {
        return Err(err("bad magic number prefix"));
    }
    if raw[2] != 0x08 {
        return Err(err("only unsigned-byte IDX payloads are supported"));
    }
    let ndims = raw[3] as usize;
    if ndims == 0 || raw.len() < 4 + 4 * ndims {
        return Err(err("truncated dimension header"));
    }
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        let off = 4 + 4 * d;
        dims.push(u32::from_be_bytes(raw[off..off + 4].try_into().unwrap()) as usize);
    }
    let expected: usize = dims.iter().product();
    let data = raw[4 + 4 * ndims..].to_vec();
    if data.len() != expected {
        return Err(err(&format!(
            "payload has {} bytes, header implies {expected}",
            data.len()
        )));
    }
    Ok(IdxPayload { dims, data })
}

/// Loads an IDX image/label file pair (big-endian MNIST layout). Raw
/// bytes are scaled to [0,1]; grayscale images carry one channel.
pub fn load_idx_dataset(
    images_path: &Path,
    labels_path: &Path,
    domain_tag: &str,
) -> Result<LabeledDataset> {
    let images = parse_idx(images_path)?;
    let labels = parse_idx(labels_path)?;
    if images.dims.len() != 3 {
        return Err(Error::Idx {
            path: images_path.to_path_buf(),
            reason: format!("expected 3 dimensions for images, got {}", images.dims.len()),
        });
    }
    if labels.dims.len() != 1 {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            reason: format!("expected 1 dimension for labels, got {}", labels.dims.len()),
        });
    }
    let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != n {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            reason: format!("label count {} != image count {n}", labels.dims[0]),
        });
    }
    let pixels: Vec<f64> = images.data.iter().map(|&b| b as f64 / 255.0).collect();
    let images = Array4::from_shape_vec((n, 1, h, w), pixels).expect("idx shape");
    let labels: Vec<usize> = labels.data.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().copied().max().map_or(1, |m| m + 1);
    LabeledDataset::new(images, labels, domain_tag, class_count)
}

/// Writes a dataset as an IDX image/label pair (inverse of
/// [`load_idx_dataset`] for single-channel data, quantized to bytes).
pub fn write_idx_dataset(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (n, c, h, w) = ds.images.dim();
    if c != 1 {
        return Err(Error::Dataset("IDX export requires grayscale images".into()));
    }
    let mut img = Vec::with_capacity(16 + n * h * w);
    img.extend_from_slice(&[0, 0, 0x08, 3]);
    for d in [n, h, w] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for v in ds.images.iter() {
        img.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&[0, 0, 0x08, 1]);
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// Loads `root/labels.csv` (+ PNG files) resized to `height` x `width`
/// with the channel count forced to `channels`.
pub fn load_directory_dataset(
    root: &Path,
    domain_tag: &str,
    channels: usize,
    height: usize,
    width: usize,
    class_count: usize,
) -> Result<LabeledDataset> {
    let manifest = root.join("labels.csv");
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.eq_ignore_ascii_case("path,label")) {
            continue;
        }
        let (rel, label) = line.rsplit_once(',').ok_or_else(|| {
            Error::Dataset(format!("{}: malformed row {}: `{line}`", manifest.display(), lineno + 1))
        })?;
        let label: usize = label.trim().parse().map_err(|_| {
            Error::Dataset(format!("{}: row {}: bad label `{label}`", manifest.display(), lineno + 1))
        })?;
        if label >= class_count {
            return Err(Error::Dataset(format!(
                "{}: row {}: label {label} outside [0, {class_count})",
                manifest.display(),
                lineno + 1
            )));
        }
        rows.push((rel.trim().to_string(), label, lineno + 1));
    }
    let mut images = Array4::zeros((rows.len(), channels, height, width));
    let mut labels = Vec::with_capacity(rows.len());
    for (i, (rel, label, lineno)) in rows.iter().enumerate() {
        let path = root.join(rel);
        let img = image::open(&path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Dataset(format!(
                "{}: row {lineno} references missing or unreadable file {}: {io}",
                manifest.display(),
                path.display()
            )),
            other => Error::Image {
                path: path.clone(),
                source: other,
            },
        })?;
        let resized = img.resize_exact(
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        let rgb = resized.to_rgb8();
        for y in 0..height {
            for x in 0..width {
                let p = rgb.get_pixel(x as u32, y as u32);
                match channels {
                    1 => {
                        // ITU-R 601 luma
                        let g = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                        images[(i, 0, y, x)] = (g / 255.0).clamp(0.0, 1.0);
                    }
                    3 => {
                        for c in 0..3 {
                            images[(i, c, y, x)] = p[c] as f64 / 255.0;
                        }
                    }
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "unsupported channel count {other}"
                        )))
                    }
                }
            }
        }
        labels.push(*label);
    }
    LabeledDataset::new(images, labels, domain_tag, class_count)
}

/// Writes a dataset in the directory format (PNG + `labels.csv`).
pub fn write_directory_dataset(ds: &LabeledDataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let (n, c, h, w) = ds.images.dim();
    let mut manifest = String::from("path,label\n");
    for i in 0..n {
        let name = format!("img_{i:06}.png");
        let path = root.join(&name);
        let quant = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        match c {
            1 => {
                let mut img = image::GrayImage::new(w as u32, h as u32);
                for y in 0..h {
                    for x in 0..w {
                        img.put_pixel(x as u32, y as u32, image::Luma([quant(ds.images[(i, 0, y, x)])]));
                    }
                }
                img.save(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?;
            }
            3 => {
                let mut img = image::RgbImage::new(w as u32, h as u32);
                for y in 0..h {
                    for x in 0..w {
                        let px = [
                            quant(ds.images[(i, 0, y, x)]),
                            quant(ds.images[(i, 1, y, x)]),
                            quant(ds.images[(i, 2, y, x)]),
                        ];
                        img.put_pixel(x as u32, y as u32, image::Rgb(px));
                    }
                }
                img.save(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?;
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unsupported channel count {other}"
                )))
            }
        }
        manifest.push_str(&format!("{name},{}\n", ds.labels[i]));
    }
    let mpath = root.join("labels.csv");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

/// Maps a grayscale dataset to a 3-channel domain via a per-image random
/// affine color map: channel c = clamp(a_c * x + b_c, 0, 1) with
/// a_c ~ U[0.4, 1.0], b_c ~ U[0, 0.6], keyed by (seed, image index, c).
/// Replicates a grayscale dataset into three identical channels so it
/// shares an input shape with RGB targets such as the color-shift
/// domain.
pub fn grayscale_to_rgb(base: &LabeledDataset) -> Result<LabeledDataset> {
    if base.channels() != 1 {
        return Err(Error::Dataset(format!(
            "RGB expansion requires grayscale input, got {} channels",
            base.channels()
        )));
    }
    let (n, _, h, w) = base.images.dim();
    let mut images = Array4::zeros((n, 3, h, w));
    for i in 0..n {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    images[(i, c, y, x)] = base.images[(i, 0, y, x)];
                }
            }
        }
    }
    LabeledDataset::new(images, base.labels.clone(), base.domain_tag.clone(), base.class_count)
}

pub fn synth_colorshift_domain(base: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    if base.channels() != 1 {
        return Err(Error::Dataset(format!(
            "color-shift domain requires grayscale input, got {} channels",
            base.channels()
        )));
    }
    let (n, _, h, w) = base.images.dim();
    let mut images = Array4::zeros((n, 3, h, w));
    for i in 0..n {
        for c in 0..3 {
            let mut rng = rng::stream(&[seed, i as u64, c as u64]);
            let a: f64 = rng.random_range(0.4..1.0);
            let b: f64 = rng.random_range(0.0..0.6);
            for y in 0..h {
                for x in 0..w {
                    images[(i, c, y, x)] = (a * base.images[(i, 0, y, x)] + b).clamp(0.0, 1.0);
                }
            }
        }
    }
    LabeledDataset::new(
        images,
        base.labels.clone(),
        format!("{}-colorshift", base.domain_tag),
        base.class_count,
    )
}

/// Per-class Dirichlet split of a dataset over `k` clients. For each
/// class, a proportion vector is drawn from Dirichlet(concentration)
/// keyed by (seed, class) and class indices are dealt out by
/// largest-remainder rounding; empty clients are repaired by stealing
/// one index from the largest shard (lowest client id wins ties).
pub fn partition_dirichlet(
    dataset: &LabeledDataset,
    k: usize,
    concentration: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if concentration <= 0.0 {
        return Err(Error::InvalidArgument(
            "dirichlet concentration must be positive".into(),
        ));
    }
    if k > dataset.count() {
        return Err(Error::InvalidArgument(format!(
            "K={k} exceeds dataset size {}",
            dataset.count()
        )));
    }
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); k];
    for class in 0..dataset.class_count {
        let idxs: Vec<usize> = (0..dataset.count())
            .filter(|&i| dataset.labels[i] == class)
            .collect();
        if idxs.is_empty() {
            continue;
        }
        let q = dirichlet_proportions(k, concentration, &[seed, class as u64]);
        let counts = largest_remainder(&q, idxs.len());
        let mut cursor = 0;
        for (client, &cnt) in counts.iter().enumerate() {
            assignments[client].extend_from_slice(&idxs[cursor..cursor + cnt]);
            cursor += cnt;
        }
    }
    // Repair pass: every client must hold at least one index.
    loop {
        let Some(empty) = assignments.iter().position(|a| a.is_empty()) else {
            break;
        };
        let largest = (0..k)
            .max_by_key(|&i| (assignments[i].len(), std::cmp::Reverse(i)))
            .unwrap();
        let stolen = assignments[largest].pop().ok_or_else(|| {
            Error::Dataset("cannot repair partition: all shards empty".into())
        })?;
        assignments[empty].push(stolen);
    }
    Ok(PartitionPlan {
        seed,
        concentration,
        assignments,
    })
}

/// Dirichlet(concentration * 1_k) draw via normalized Gamma variates.
pub fn dirichlet_proportions(k: usize, concentration: f64, keys: &[u64]) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let mut rng = rng::stream(keys);
    let gamma = Gamma::new(concentration, 1.0).expect("valid gamma shape");
    let mut q: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
    let sum: f64 = q.iter().sum();
    for v in &mut q {
        *v /= sum;
    }
    q
}

/// Integer apportionment of `total` by proportions `q` using the
/// largest-remainder method; ties go to the lower index.
pub fn largest_remainder(q: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = q.iter().map(|&p| (p * total as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = q[a] * total as f64 - counts[a] as f64;
        let rb = q[b] * total as f64 - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_gray(n: usize, classes: usize, seed: u64) -> LabeledDataset {
        let mut rng = rng::stream(&[seed]);
        let images = Array4::from_shape_fn((n, 1, 6, 6), |_| rng.random_range(0.0..1.0));
        let labels = (0..n).map(|i| i % classes).collect();
        LabeledDataset::new(images, labels, "tiny", classes).unwrap()
    }

    #[test]
    fn idx_single_record_round_trip() {
        let dir = tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        let mut ds = tiny_gray(1, 10, 4);
        ds.labels[0] = 7;
        write_idx_dataset(&ds, &ip, &lp).unwrap();
        let back = load_idx_dataset(&ip, &lp, "tiny").unwrap();
        assert_eq!(back.count(), 1);
        assert_eq!(back.labels, vec![7]);
        for (a, b) in back.images.iter().zip(ds.images.iter()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn idx_count_mismatch_is_error() {
        let dir = tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lab.idx");
        write_idx_dataset(&tiny_gray(10, 10, 1), &ip, &dir.path().join("unused.idx")).unwrap();
        write_idx_dataset(&tiny_gray(9, 10, 2), &dir.path().join("unused2.idx"), &lp).unwrap();
        let err = load_idx_dataset(&ip, &lp, "x").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("label count 9"), "{msg}");
        assert!(msg.contains("lab.idx"), "error should name the file: {msg}");
    }

    #[test]
    fn idx_bad_magic_is_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.idx");
        fs::write(&p, [1, 2, 3, 4, 5]).unwrap();
        let err = parse_idx(&p).unwrap_err();
        assert!(err.to_string().contains("bad.idx"));
    }

    #[test]
    fn idx_truncated_payload_is_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("trunc.idx");
        let mut raw = vec![0, 0, 0x08, 1];
        raw.extend_from_slice(&10u32.to_be_bytes());
        raw.extend_from_slice(&[1, 2, 3]); // header says 10
        fs::write(&p, raw).unwrap();
        let err = parse_idx(&p).unwrap_err();
        assert!(err.to_string().contains("header implies 10"));
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempdir().unwrap();
        let ds = tiny_gray(4, 2, 9);
        write_directory_dataset(&ds, dir.path()).unwrap();
        let back = load_directory_dataset(dir.path(), "tiny", 1, 6, 6, 2).unwrap();
        assert_eq!(back.count(), 4);
        assert_eq!(back.labels, ds.labels);
        for (a, b) in back.images.iter().zip(ds.images.iter()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn directory_missing_file_names_row() {
        let dir = tempdir().unwrap();
        let ds = tiny_gray(2, 2, 5);
        write_directory_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("img_000001.png")).unwrap();
        let err = load_directory_dataset(dir.path(), "tiny", 1, 6, 6, 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3"), "{msg}"); // header + 1-based rows
        assert!(msg.contains("img_000001.png"), "{msg}");
    }

    #[test]
    fn directory_resizes_and_forces_channels() {
        let dir = tempdir().unwrap();
        let mut rng = rng::stream(&[77]);
        let images = Array4::from_shape_fn((2, 3, 32, 32), |_| rng.random_range(0.0..1.0));
        let ds = LabeledDataset::new(images, vec![0, 1], "rgb32", 2).unwrap();
        write_directory_dataset(&ds, dir.path()).unwrap();
        let back = load_directory_dataset(dir.path(), "rgb32", 3, 28, 28, 2).unwrap();
        assert_eq!(back.images.dim(), (2, 3, 28, 28));
    }

    #[test]
    fn colorshift_deterministic_and_label_preserving() {
        let base = tiny_gray(6, 3, 2);
        let a = synth_colorshift_domain(&base, 11).unwrap();
        let b = synth_colorshift_domain(&base, 11).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, base.labels);
        assert_eq!(a.channels(), 3);
        let c = synth_colorshift_domain(&base, 12).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn colorshift_zero_image_gives_constant_channels() {
        let images = Array4::zeros((1, 1, 4, 4));
        let base = LabeledDataset::new(images, vec![0], "zero", 1).unwrap();
        let out = synth_colorshift_domain(&base, 3).unwrap();
        for c in 0..3 {
            let v0 = out.images[(0, c, 0, 0)];
            assert!((0.0..=0.6).contains(&v0));
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(out.images[(0, c, y, x)], v0);
                }
            }
        }
    }

    #[test]
    fn rgb_expansion_replicates_channels() {
        let base = tiny_gray(4, 2, 5);
        let rgb = grayscale_to_rgb(&base).unwrap();
        assert_eq!(rgb.channels(), 3);
        assert_eq!(rgb.labels, base.labels);
        for c in 0..3 {
            assert_eq!(
                rgb.images.index_axis(ndarray::Axis(1), c),
                base.images.index_axis(ndarray::Axis(1), 0)
            );
        }
        assert!(grayscale_to_rgb(&rgb).is_err());
    }

    #[test]
    fn colorshift_rejects_rgb() {
        let images = Array4::zeros((1, 3, 4, 4));
        let base = LabeledDataset::new(images, vec![0], "rgb", 1).unwrap();
        assert!(synth_colorshift_domain(&base, 0).is_err());
    }

    #[test]
    fn partition_k1_takes_everything() {
        let ds = tiny_gray(20, 4, 3);
        let plan = partition_dirichlet(&ds, 1, 0.3, 0).unwrap();
        assert_eq!(plan.assignments.len(), 1);
        let mut all = plan.assignments[0].clone();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn partition_is_exact_cover_with_nonempty_shards() {
        let ds = tiny_gray(53, 5, 8);
        let plan = partition_dirichlet(&ds, 10, 0.3, 7).unwrap();
        let mut seen = vec![false; 53];
        for shard in &plan.assignments {
            assert!(!shard.is_empty());
            for &i in shard {
                assert!(!seen[i], "index {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn partition_oracle_replay() {
        // Straight-line reimplementation of the documented sampling
        // procedure, sharing only the counter-based generator.
        let n_per_class = 100;
        let classes = 10;
        let k = 10;
        let seed = 7;
        let conc = 0.3;
        let mut images = Array4::zeros((n_per_class * classes, 1, 4, 4));
        images.fill(0.5);
        let labels: Vec<usize> = (0..n_per_class * classes).map(|i| i / n_per_class).collect();
        let ds = LabeledDataset::new(images, labels.clone(), "o", classes).unwrap();
        let plan = partition_dirichlet(&ds, k, conc, seed).unwrap();

        let mut expected: Vec<Vec<usize>> = vec![Vec::new(); k];
        for class in 0..classes {
            let idxs: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            let mut rng = rng::stream(&[seed, class as u64]);
            let gamma = Gamma::new(conc, 1.0).unwrap();
            let mut q: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
            let s: f64 = q.iter().sum();
            for v in &mut q {
                *v /= s;
            }
            let mut counts: Vec<usize> =
                q.iter().map(|&p| (p * idxs.len() as f64).floor() as usize).collect();
            let mut rem: Vec<(usize, f64)> = (0..k)
                .map(|i| (i, q[i] * idxs.len() as f64 - counts[i] as f64))
                .collect();
            rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let missing = idxs.len() - counts.iter().sum::<usize>();
            for &(i, _) in rem.iter().take(missing) {
                counts[i] += 1;
            }
            let mut cur = 0;
            for (client, &cnt) in counts.iter().enumerate() {
                expected[client].extend_from_slice(&idxs[cur..cur + cnt]);
                cur += cnt;
            }
        }
        loop {
            let Some(empty) = expected.iter().position(|a| a.is_empty()) else {
                break;
            };
            let largest = (0..k)
                .max_by_key(|&i| (expected[i].len(), std::cmp::Reverse(i)))
                .unwrap();
            let stolen = expected[largest].pop().unwrap();
            expected[empty].push(stolen);
        }
        assert_eq!(plan.assignments, expected);
    }

    #[test]
    fn partition_rejects_oversized_k() {
        let ds = tiny_gray(5, 5, 1);
        assert!(partition_dirichlet(&ds, 6, 0.3, 0).is_err());
    }

    #[test]
    fn partition_deterministic() {
        let ds = tiny_gray(40, 4, 6);
        let a = partition_dirichlet(&ds, 4, 0.3, 5).unwrap();
        let b = partition_dirichlet(&ds, 4, 0.3, 5).unwrap();
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn skew_monotone_in_concentration() {
        // Mean per-shard label entropy should be lower at concentration
        // 0.1 than at 10.0, averaged over 50 seeds.
        let ds = tiny_gray(200, 5, 0);
        let mean_entropy = |conc: f64| -> f64 {
            let mut total = 0.0;
            let mut shards = 0;
            for seed in 0..50u64 {
                let plan = partition_dirichlet(&ds, 5, conc, seed).unwrap();
                for shard in &plan.assignments {
                    let mut hist = vec![0.0f64; ds.class_count];
                    for &i in shard {
                        hist[ds.labels[i]] += 1.0;
                    }
                    let n: f64 = hist.iter().sum();
                    let h: f64 = hist
                        .iter()
                        .filter(|&&c| c > 0.0)
                        .map(|&c| {
                            let p = c / n;
                            -p * p.ln()
                        })
                        .sum();
                    total += h;
                    shards += 1;
                }
            }
            total / shards as f64
        };
        assert!(mean_entropy(0.1) < mean_entropy(10.0));
    }

    #[test]
    fn plan_json_round_trip() {
        let ds = tiny_gray(30, 3, 2);
        let plan = partition_dirichlet(&ds, 3, 0.3, 9).unwrap();
        let back = PartitionPlan::from_json(&plan.to_json().unwrap()).unwrap();
        assert_eq!(back.assignments, plan.assignments);
        assert_eq!(back.seed, plan.seed);
    }
}
