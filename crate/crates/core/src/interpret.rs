//! Class activation maps (CAMs) from the pre-GAP feature volume and the
//! linear classifier weights, plus overlay rendering.
//!
//! Because the classifier is GAP followed by a single dense layer, the
//! evidence for class `c` at feature location `(h, w)` is the classifier-
//! weighted channel sum `M_c(h,w) = Σ_k θ[k,c]·F[h,w,k]`. The raw map is
//! bilinearly upsampled to the input resolution and min-max normalized
//! into `[0, 1]`; a constant raw map normalizes to all zeros.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BScan, GradeLabel};
use crate::model::{ArchitectureGraph, ForwardTrace, LayerOp, ModelParameters};
use crate::scalar::Scalar;
use crate::tensor::{bilinear_resize, Tensor3};

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("model has no linear classifier head")]
    MissingClassifier,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

/// A normalized activation map at input resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassActivationMap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major values in `[0, 1]`.
    pub map: Vec<f64>,
    pub class: GradeLabel,
    pub image_id: String,
}

/// Raw (un-normalized) classifier-weighted channel sum at feature
/// resolution. `theta` is the dense weight matrix, row-major `(C, n_classes)`.
pub fn raw_cam<T: Scalar>(
    features: &Tensor3<T>,
    theta: &[T],
    n_classes: usize,
    class: usize,
) -> Result<Vec<f64>, InterpretError> {
    let (h, w, c) = features.shape();
    if theta.len() != c * n_classes || class >= n_classes {
        return Err(InterpretError::ShapeMismatch(format!(
            "theta has {} entries for {c} channels x {n_classes} classes, class {class}",
            theta.len()
        )));
    }
    let mut map = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for k in 0..c {
                acc += theta[k * n_classes + class].to_f64_lossy()
                    * features.get(y, x, k).to_f64_lossy();
            }
            map[y * w + x] = acc;
        }
    }
    Ok(map)
}

/// Min-max normalize into `[0, 1]` in place; a constant map becomes zeros.
pub fn normalize_map(map: &mut [f64]) {
    let min = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        map.fill(0.0);
        return;
    }
    for v in map.iter_mut() {
        *v = (*v - min) / (max - min);
    }
}

/// Compute the CAM for one forward trace: weighted channel sum at feature
/// resolution, bilinear upsample to the model's input shape, min-max
/// normalization.
pub fn compute_cam<T: Scalar>(
    graph: &ArchitectureGraph,
    params: &ModelParameters<T>,
    trace: &ForwardTrace<T>,
    class: GradeLabel,
    image_id: &str,
) -> Result<ClassActivationMap, InterpretError> {
    let LayerOp::Dense { out_dim, .. } = graph.nodes[graph.output].op else {
        return Err(InterpretError::MissingClassifier);
    };
    let theta = &params.layers[graph.output]
        .as_ref()
        .ok_or(InterpretError::MissingClassifier)?
        .weights;
    let (fh, fw, fc) = trace.feature_volume.shape();
    let (gh, gw, _) = graph.pre_gap_shape();
    if (fh, fw, fc) != (gh, gw, graph.embedding_dim()) {
        return Err(InterpretError::ShapeMismatch(format!(
            "feature volume {:?} does not match graph pre-GAP {:?}",
            (fh, fw, fc),
            (gh, gw, graph.embedding_dim())
        )));
    }
    let raw = raw_cam(&trace.feature_volume, theta, out_dim, class.index())?;
    let (rows, cols, _) = graph.input_shape();
    let mut map = bilinear_resize(&raw, fh, fw, rows, cols);
    normalize_map(&mut map);
    Ok(ClassActivationMap {
        rows,
        cols,
        map,
        class,
        image_id: image_id.to_string(),
    })
}

/// Fixed colormap: linear blue (low) to red (high), no green component.
fn colormap(v: f64) -> (f64, f64, f64) {
    (v, 0.0, 1.0 - v)
}

/// Render the scan in grayscale with the activation map blended on top.
/// The blend weight is `0.5 · cam`, so zero activation leaves the pure
/// grayscale pixel and full activation mixes half colormap, half scan.
pub fn export_heatmap(
    cam: &ClassActivationMap,
    scan: &BScan,
    path: &Path,
) -> Result<(), InterpretError> {
    if (scan.rows, scan.cols) != (cam.rows, cam.cols) {
        return Err(InterpretError::ShapeMismatch(format!(
            "scan {}x{} vs cam {}x{}",
            scan.rows, scan.cols, cam.rows, cam.cols
        )));
    }
    let mut buf = Vec::with_capacity(cam.rows * cam.cols * 3);
    for (i, &v) in cam.map.iter().enumerate() {
        let g = scan.pixels[i] as f64;
        let (r, gr, b) = colormap(v);
        let a = 0.5 * v;
        for ch in [r, gr, b] {
            let mixed = (1.0 - a) * g + a * ch;
            buf.push((mixed.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img = image::RgbImage::from_raw(cam.cols as u32, cam.rows as u32, buf)
        .expect("overlay buffer size");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path)?;
    Ok(())
}

/// Conventional overlay file name: `{image_id}_{class}.png`.
pub fn heatmap_file_name(cam: &ClassActivationMap) -> String {
    format!("{}_{}.png", cam.image_id, cam.class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Domain;
    use crate::model::{build_model, forward, ArchConfig, ArchVariant, Backbone};

    fn tensor_from(h: usize, w: usize, c: usize, data: Vec<f64>) -> Tensor3<f64> {
        let mut t = Tensor3::zeros(h, w, c);
        assert_eq!(data.len(), h * w * c);
        t.data = data;
        t
    }

    #[test]
    fn hand_computed_2x2x2_case() {
        // channel 0 = [[1,2],[3,4]], channel 1 = the same pattern doubled;
        // weights [1, -1] for the probed class
        let features = tensor_from(
            2,
            2,
            2,
            vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0, 4.0, 8.0],
        );
        let theta = vec![1.0f64, -1.0];
        let mut raw = raw_cam(&features, &theta, 1, 0).unwrap();
        // raw = F0 - 2*F0 pointwise = [[-1,-2],[-3,-4]]
        assert_eq!(raw, vec![-1.0, -2.0, -3.0, -4.0]);
        normalize_map(&mut raw);
        // min -4, max -1 -> (v + 4) / 3
        let expect = [1.0, 2.0 / 3.0, 1.0 / 3.0, 0.0];
        for (a, e) in raw.iter().zip(expect) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_channel_degenerates_to_zeros() {
        // one-hot theta picks a channel that is constant -> all-zero map
        let features = tensor_from(2, 2, 2, vec![0.7, 9.0, 0.7, 1.0, 0.7, -3.0, 0.7, 0.5]);
        let theta = vec![1.0f64, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mut raw = raw_cam(&features, &theta, 3, 0).unwrap();
        normalize_map(&mut raw);
        assert_eq!(raw, vec![0.0; 4]);
    }

    #[test]
    fn linearity_before_normalization() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let features = tensor_from(3, 4, 5, (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let theta_a: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let theta_b: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let theta_sum: Vec<f64> = theta_a.iter().zip(&theta_b).map(|(a, b)| a + b).collect();
        for class in 0..3 {
            let a = raw_cam(&features, &theta_a, 3, class).unwrap();
            let b = raw_cam(&features, &theta_b, 3, class).unwrap();
            let s = raw_cam(&features, &theta_sum, 3, class).unwrap();
            for i in 0..a.len() {
                assert!((s[i] - (a[i] + b[i])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut once = vec![3.0, -1.0, 0.5, 7.25, 7.25, 2.0];
        normalize_map(&mut once);
        let mut twice = once.clone();
        normalize_map(&mut twice);
        assert_eq!(once, twice);
        assert!(once.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn theta_shape_mismatch_rejected() {
        let features = tensor_from(2, 2, 2, vec![0.0; 8]);
        assert!(matches!(
            raw_cam(&features, &[1.0f64; 5], 3, 0),
            Err(InterpretError::ShapeMismatch(_))
        ));
        assert!(matches!(
            raw_cam(&features, &[1.0f64; 6], 3, 3),
            Err(InterpretError::ShapeMismatch(_))
        ));
    }

    fn model_and_scan() -> (ArchitectureGraph, ModelParameters<f32>, BScan) {
        let config = ArchConfig {
            backbone: Backbone::Vgg16,
            variant: ArchVariant::RagnetV2,
            input_shape: (32, 32),
            block_channels: [2, 2, 2, 3, 3],
            embedding_channels: 3,
        };
        let (graph, params) = build_model(&config, None, 8).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let scan = BScan {
            image_id: "scan0".into(),
            patient_id: "P0".into(),
            rows: 32,
            cols: 32,
            pixels: (0..32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect(),
            domain: Domain::Source,
        };
        (graph, params, scan)
    }

    #[test]
    fn cam_matches_input_resolution_and_range() {
        let (graph, params, scan) = model_and_scan();
        let trace = &forward(&params, &graph, std::slice::from_ref(&scan)).unwrap()[0];
        for class in GradeLabel::ALL {
            let cam = compute_cam(&graph, &params, trace, class, &scan.image_id).unwrap();
            assert_eq!((cam.rows, cam.cols), (32, 32));
            assert_eq!(cam.map.len(), 32 * 32);
            assert!(cam.map.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn zero_cam_overlay_equals_grayscale() {
        let (_, _, scan) = model_and_scan();
        let cam = ClassActivationMap {
            rows: 32,
            cols: 32,
            map: vec![0.0; 32 * 32],
            class: GradeLabel::Healthy,
            image_id: "scan0".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(heatmap_file_name(&cam));
        assert_eq!(path.file_name().unwrap(), "scan0_healthy.png");
        export_heatmap(&cam, &scan, &path).unwrap();
        let img = image::open(&path).unwrap().into_rgb8();
        assert_eq!((img.width(), img.height()), (32, 32));
        for (i, p) in img.pixels().enumerate() {
            let g = (scan.pixels[i].clamp(0.0, 1.0) * 255.0).round() as u8;
            assert_eq!(p.0, [g, g, g]);
        }
    }

    #[test]
    fn overlay_export_is_byte_identical() {
        let (graph, params, scan) = model_and_scan();
        let trace = &forward(&params, &graph, std::slice::from_ref(&scan)).unwrap()[0];
        let cam = compute_cam(&graph, &params, trace, GradeLabel::Advanced, &scan.image_id).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.png"), dir.path().join("b.png"));
        export_heatmap(&cam, &scan, &p1).unwrap();
        export_heatmap(&cam, &scan, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn overlay_shape_mismatch_rejected() {
        let (_, _, scan) = model_and_scan();
        let cam = ClassActivationMap {
            rows: 16,
            cols: 16,
            map: vec![0.0; 256],
            class: GradeLabel::Early,
            image_id: "x".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            export_heatmap(&cam, &scan, &dir.path().join("x.png")),
            Err(InterpretError::ShapeMismatch(_))
        ));
    }
}
