//! Feature inspection artifacts: high-pass views of shallow features, a 2-D
//! PCA projection of pooled embeddings, and a confusion-matrix heatmap.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::metrics::confusion_matrix;
use super::probe::ProbeModel;
use crate::backbone::Branch;
use crate::error::{Error, Result};
use crate::image::{image_grid, Image};

/// Discrete Laplacian of every channel of a `B×C×H×W` tensor with replicate
/// padding, computed as the sum of differences to the four neighbours so a
/// constant input gives exactly zero.
pub fn high_pass(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let p = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    let shifted = |dy: usize, dx: usize| p.narrow(2, dy, h)?.narrow(3, dx, w);
    let mut acc = (shifted(0, 1)? - x)?;
    for (dy, dx) in [(2, 1), (1, 0), (1, 2)] {
        acc = (acc + (shifted(dy, dx)? - x)?)?;
    }
    Ok(acc)
}

const ENERGY_CHUNK: usize = 64;

/// Mean absolute high-pass response of the encoder's shallow features.
pub fn high_frequency_energy(encoder: &Branch, images: &[Image]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::contract("no images to inspect"));
    }
    let device = encoder.params.device().clone();
    let (mut sum, mut count) = (0.0f64, 0usize);
    for chunk in images.chunks(ENERGY_CHUNK) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let shallow = encoder.encoder.forward(&Image::stack(&refs, &device)?)?.shallow.detach();
        let hp = high_pass(&shallow)?.abs()?;
        sum += hp.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
        count += hp.elem_count();
    }
    Ok(sum / count as f64)
}

fn channel_mean_abs(t: &Tensor) -> Result<Image> {
    // t is 1×C×H×W
    let m = t.abs()?.mean(1)?.squeeze(0)?;
    let (h, w) = m.dims2()?;
    Image::new(1, h, w, m.flatten_all()?.to_vec1::<f32>()?)
}

/// One row per image: the image, its per-pixel high-pass magnitude, and the
/// mean high-pass magnitude of the shallow feature channels.
pub fn high_frequency_grid(encoder: &Branch, images: &[Image]) -> Result<Image> {
    if images.is_empty() {
        return Err(Error::contract("no images to inspect"));
    }
    let device = encoder.params.device().clone();
    let mut rows = Vec::with_capacity(images.len());
    for img in images {
        let x = Image::stack(&[img], &device)?;
        let shallow = encoder.encoder.forward(&x)?.shallow.detach();
        let image_hp = channel_mean_abs(&high_pass(&x)?)?.normalized_for_display();
        let feature_hp = channel_mean_abs(&high_pass(&shallow)?)?.normalized_for_display();
        rows.push(vec![img.clone(), image_hp, feature_hp]);
    }
    image_grid(&rows, 1)
}

/// Projects rows onto their top two principal components.
pub fn pca_2d(rows: &[Vec<f32>]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n < 2 || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::contract("PCA needs at least two equal-length rows"));
    }
    let mut m = DMatrix::from_fn(n, d, |i, j| rows[i][j] as f64);
    for j in 0..d {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
    }
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::contract("SVD did not converge"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut out = vec![[0.0; 2]; n];
    for (k, &comp) in order.iter().take(2).enumerate() {
        let mut dir: Vec<f64> = v_t.row(comp).iter().copied().collect();
        // fix the sign so the largest loading is positive
        let pivot = dir.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            dir.iter_mut().for_each(|v| *v = -*v);
        }
        for (i, o) in out.iter_mut().enumerate() {
            o[k] = (0..d).map(|j| m[(i, j)] * dir[j]).sum();
        }
    }
    Ok(out)
}

const PALETTE: [[f32; 3]; 10] = [
    [0.12, 0.47, 0.71],
    [1.0, 0.5, 0.05],
    [0.17, 0.63, 0.17],
    [0.84, 0.15, 0.16],
    [0.58, 0.4, 0.74],
    [0.55, 0.34, 0.29],
    [0.89, 0.47, 0.76],
    [0.5, 0.5, 0.5],
    [0.74, 0.74, 0.13],
    [0.09, 0.75, 0.81],
];

/// Scatter plot of 2-D points colored by label, `size × size` pixels.
pub fn scatter_plot(points: &[[f64; 2]], labels: &[usize], size: usize) -> Result<Image> {
    if points.len() != labels.len() {
        return Err(Error::contract("one label per point required"));
    }
    let mut img = Image::filled(3, size, size, 1.0);
    let margin = 6.0;
    let span = |k: usize| {
        points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[k]), hi.max(p[k])))
    };
    let ((x0, x1), (y0, y1)) = (span(0), span(1));
    let scale = |v: f64, lo: f64, hi: f64| {
        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        (margin + t * (size as f64 - 2.0 * margin)).round() as i64
    };
    for (p, &l) in points.iter().zip(labels) {
        let (cx, cy) = (scale(p[0], x0, x1), size as i64 - 1 - scale(p[1], y0, y1));
        let color = PALETTE[l % PALETTE.len()];
        for y in cy - 2..=cy + 2 {
            for x in cx - 2..=cx + 2 {
                if (0..size as i64).contains(&x) && (0..size as i64).contains(&y) {
                    for (c, v) in color.iter().enumerate() {
                        img.set(c, y as usize, x as usize, *v);
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Row-normalized heatmap, white (0) to dark blue (1), `cell` pixels per entry.
pub fn confusion_heatmap(matrix: &[Vec<u64>], cell: usize) -> Result<Image> {
    let k = matrix.len();
    if k == 0 || matrix.iter().any(|r| r.len() != k) {
        return Err(Error::contract("confusion matrix must be square and nonempty"));
    }
    let mut img = Image::filled(3, k * cell, k * cell, 1.0);
    for (t, row) in matrix.iter().enumerate() {
        let total = row.iter().sum::<u64>().max(1) as f32;
        for (p, &count) in row.iter().enumerate() {
            let v = count as f32 / total;
            let rgb = [1.0 - 0.9 * v, 1.0 - 0.7 * v, 1.0 - 0.3 * v];
            for y in t * cell..(t + 1) * cell {
                for x in p * cell..(p + 1) * cell {
                    for (c, val) in rgb.iter().enumerate() {
                        img.set(c, y, x, *val);
                    }
                }
            }
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectArtifacts {
    pub high_frequency_grid: PathBuf,
    pub projection: PathBuf,
    pub confusion: Option<PathBuf>,
    pub high_frequency_energy: f64,
}

/// Writes `high_frequency.png` (the first `grid_rows` images), `projection.png`
/// and, when `with_confusion` is set, `confusion.png` into `out_dir`. The
/// confusion matrix needs a trained single-label classifier.
pub fn inspect_features(
    encoder: &Branch,
    images: &[Image],
    labels: &[usize],
    classifier: Option<&ProbeModel>,
    with_confusion: bool,
    grid_rows: usize,
    out_dir: &Path,
) -> Result<InspectArtifacts> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(Error::contract("one label per image required"));
    }
    let confusion_model = match (with_confusion, classifier) {
        (true, None) => {
            return Err(Error::contract("a confusion matrix needs a trained classifier"));
        }
        (true, Some(m)) if m.multi_label => {
            return Err(Error::contract("a confusion matrix needs a single-label classifier"));
        }
        (true, Some(m)) => Some(m),
        (false, _) => None,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let grid_path = out_dir.join("high_frequency.png");
    high_frequency_grid(encoder, &images[..grid_rows.clamp(1, images.len().max(1))])?.save_png(&grid_path)?;

    let device = encoder.params.device().clone();
    let refs: Vec<&Image> = images.iter().collect();
    let pooled = encoder.encoder.pooled(&Image::stack(&refs, &device)?)?.detach();
    let points = pca_2d(&pooled.to_vec2::<f32>()?)?;
    let projection_path = out_dir.join("projection.png");
    scatter_plot(&points, labels, 256)?.save_png(&projection_path)?;

    let confusion = match confusion_model {
        Some(model) => {
            let predicted = model.predict(images)?;
            let m = confusion_matrix(&predicted, labels, model.classes)?;
            let path = out_dir.join("confusion.png");
            confusion_heatmap(&m, 16)?.save_png(&path)?;
            Some(path)
        }
        None => None,
    };
    Ok(InspectArtifacts {
        high_frequency_grid: grid_path,
        projection: projection_path,
        confusion,
        high_frequency_energy: high_frequency_energy(encoder, images)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use candle_core::Device;

    fn encoder() -> Branch {
        Branch::new(&BackboneConfig::default(), &Device::Cpu, 1).unwrap()
    }

    #[test]
    fn constant_image_has_no_high_frequency() {
        for v in [0.0f32, 0.1, 0.37, 1.0] {
            let x = Image::filled(3, 9, 7, v).to_tensor(&Device::Cpu).unwrap().unsqueeze(0).unwrap();
            let hp = high_pass(&x).unwrap();
            assert_eq!(hp.dims(), x.dims());
            assert_eq!(hp.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        }
    }

    #[test]
    fn laplacian_of_impulse() {
        let mut img = Image::zeros(1, 3, 3);
        img.set(0, 1, 1, 1.0);
        let x = img.to_tensor(&Device::Cpu).unwrap().unsqueeze(0).unwrap();
        let hp = high_pass(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(hp, vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn grid_has_one_row_per_image() {
        let enc = encoder();
        for n in [1usize, 3] {
            let images: Vec<Image> = (0..n).map(|i| Image::filled(3, 16, 16, i as f32 / 4.0)).collect();
            let g = high_frequency_grid(&enc, &images).unwrap();
            assert_eq!(g.height(), n * 17 + 1);
            assert_eq!(g.width(), 3 * 17 + 1);
        }
    }

    #[test]
    fn pca_recovers_dominant_axis() {
        let rows: Vec<Vec<f32>> = (0..20).map(|i| vec![i as f32, 0.01 * (i % 3) as f32, 5.0]).collect();
        let p = pca_2d(&rows).unwrap();
        let spread0 = p.iter().map(|q| q[0].abs()).fold(0.0, f64::max);
        let spread1 = p.iter().map(|q| q[1].abs()).fold(0.0, f64::max);
        assert!(spread0 > 100.0 * spread1);
        assert!(p[19][0] > p[0][0]);
        assert!(pca_2d(&rows[..1]).is_err());
    }

    #[test]
    fn confusion_requires_classifier() {
        let enc = encoder();
        let images: Vec<Image> = (0..4).map(|i| Image::filled(3, 16, 16, i as f32 / 4.0)).collect();
        let dir = tempfile::tempdir().unwrap();
        let err = inspect_features(&enc, &images, &[0, 1, 0, 1], None, true, 4, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let a = inspect_features(&enc, &images, &[0, 1, 0, 1], None, false, 2, dir.path()).unwrap();
        assert!(a.high_frequency_grid.exists() && a.projection.exists());
        let grid = Image::load_png(&a.high_frequency_grid).unwrap();
        assert_eq!(grid.height(), 2 * 17 + 1);
        assert!(a.confusion.is_none());
        assert!(a.high_frequency_energy > 0.0);
    }

    #[test]
    fn heatmap_shape() {
        let h = confusion_heatmap(&[vec![3, 1], vec![0, 4]], 5).unwrap();
        assert_eq!(h.shape(), (3, 10, 10));
        assert_eq!(h.get(0, 0, 0), 1.0 - 0.9 * 0.75);
        assert!(confusion_heatmap(&[vec![1, 2]], 4).is_err());
    }
}
