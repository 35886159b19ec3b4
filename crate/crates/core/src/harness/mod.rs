//! Synthetic data, run configuration, file I/O and the end-to-end pipeline.

pub mod config;
pub mod dataset;
pub mod io;
pub mod pipeline;

pub use config::{Method, RunConfig};
pub use dataset::{four_rectangles, generate_shapes_dataset, Shape, ShapesDataset};
pub use pipeline::{run_pipeline, Workspace};

#[cfg(test)]
mod tests {
    use super::io::{load_image, load_raw, save_image, save_raw};
    use super::*;
    use crate::autodiff::Tensor;
    use crate::perturbation::{Baseline, Optimizer};
    use crate::Error;

    #[test]
    fn dataset_is_deterministic_and_split() {
        let a = generate_shapes_dataset(100, 32, 32, 4, 5).unwrap();
        let b = generate_shapes_dataset(100, 32, 32, 4, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train().len(), 80);
        assert_eq!(a.test().len(), 20);
        assert_eq!(a.test_indices(), 80..100);
        assert_ne!(a, generate_shapes_dataset(100, 32, 32, 4, 6).unwrap());
    }

    #[test]
    fn masks_are_nonempty_and_at_most_half() {
        let d = generate_shapes_dataset(200, 32, 32, 4, 1).unwrap();
        for m in &d.masks {
            let on = m.iter().filter(|&&b| b).count();
            assert!(on > 0 && on * 2 <= m.len(), "{on} of {}", m.len());
        }
        for c in 0..4 {
            assert_eq!(d.test().iter().filter(|s| s.label == c).count(), 10);
        }
    }

    #[test]
    fn shape_pixels_differ_from_background() {
        let d = generate_shapes_dataset(16, 32, 32, 4, 2).unwrap();
        let plane = 32 * 32;
        for (img, mask) in d.images.iter().zip(&d.masks) {
            let mean = |inside: bool| {
                let (mut s, mut n) = (0.0f32, 0);
                for i in 0..plane {
                    if mask[i] == inside {
                        s += (0..3).map(|c| img.data()[c * plane + i]).sum::<f32>();
                        n += 3;
                    }
                }
                s / n as f32
            };
            assert!((mean(true) - mean(false)).abs() > 0.05);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn dataset_argument_errors() {
        assert!(generate_shapes_dataset(7, 32, 32, 4, 0).is_err());
        assert!(generate_shapes_dataset(8, 15, 32, 4, 0).is_err());
    }

    #[test]
    fn four_rectangles_tile_the_image() {
        let (img, masks) = four_rectangles(32, 32, 3).unwrap();
        assert_eq!(img.shape(), &[3, 32, 32]);
        for i in 0..32 * 32 {
            assert_eq!(masks.iter().filter(|m| m[i]).count(), 1);
        }
        assert!(masks.iter().all(|m| m.iter().any(|&b| b)));
    }

    #[test]
    fn raw_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.f32");
        let values: Vec<f32> = (0..12).map(|i| (i as f32).sin() / 3.0).collect();
        save_raw(&path, &values).unwrap();
        assert_eq!(load_raw(&path, &[3, 4]).unwrap().data(), &values[..]);
        assert!(load_raw(&path, &[5, 4]).is_err());
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let vals = [0.0f32, 0.5, 1.0];
        let t = Tensor::new(vec![3, 2, 3], (0..18).map(|i| vals[i % 3]).collect()).unwrap();
        let path = dir.path().join("rgb.png");
        save_image(&path, &t).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        // 0.5 lands exactly on the 1/510 bound; allow f32 rounding of the difference.
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7);
        }
        let g = Tensor::new(vec![1, 1, 3], vals.to_vec()).unwrap();
        let gpath = dir.path().join("g.png");
        save_image(&gpath, &g).unwrap();
        assert_eq!(load_image(&gpath).unwrap().shape(), &[1, 1, 3]);
        assert!(!dir.path().join("g.png.partial").exists());
    }

    #[test]
    fn missing_and_corrupt_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.png");
        match load_image(&missing) {
            Err(e @ Error::Io { .. }) => assert!(e.to_string().contains("nope.png")),
            other => panic!("expected io error, got {other:?}"),
        }
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not a png").unwrap();
        assert!(matches!(load_image(&junk), Err(Error::Format { .. })));
    }

    #[test]
    fn default_config_values() {
        let c = RunConfig::default();
        assert_eq!(c.extraction.lambda, 1.0);
        assert_eq!(c.perturbation.mu, 100.0);
        assert_eq!(c.perturbation.v, 1.0);
        assert_eq!(c.perturbation.sigma, 1.0);
        assert_eq!(c.extraction.clusters, 20);
        assert_eq!(c.extraction.min_clusters, 4);
        assert_eq!(c.evaluation.retention, 0.4);
    }

    #[test]
    fn config_text_round_trips() {
        let mut c = RunConfig::default();
        c.perturbation.v = 0.0;
        c.perturbation.optimizer = Optimizer::Gd;
        c.perturbation.baseline = Baseline::Blur(2.5);
        c.evaluation.fractions = vec![0.0, 0.25, 1.0];
        c.evaluation.method = Method::Occlusion;
        c.output_dir = "runs/x".into();
        assert_eq!(RunConfig::parse_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn overrides_use_dotted_names() {
        let mut c = RunConfig::default();
        let args: Vec<String> = ["--perturbation.v", "0", "--extraction.k=3", "--evaluation.limit", "5"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        c.apply_overrides(&args).unwrap();
        assert_eq!(c.perturbation.v, 0.0);
        assert_eq!(c.extraction.min_clusters, 3);
        assert_eq!(c.evaluation.limit, 5);

        let mut c = RunConfig::default();
        assert!(c.apply_overrides(&["--nope.key".into(), "1".into()]).is_err());
        assert!(c.apply_overrides(&["--perturbation.mu".into()]).is_err());
        assert!(c.apply_overrides(&["perturbation.mu".into(), "1".into()]).is_err());
        assert!(c.apply_overrides(&["--extraction.k".into(), "1".into()]).is_err());
    }

    #[test]
    fn config_file_errors() {
        assert!(RunConfig::parse_text("mu = 3").is_err());
        assert!(RunConfig::parse_text("[perturbation]\nmu 3").is_err());
        assert!(RunConfig::parse_text("[perturbation]\nmu = x").is_err());
        assert!(RunConfig::parse_text("[evaluation]\nretention = 2").is_err());
        let c = RunConfig::parse_text("# comment\n[perturbation]\nmu = 3 # inline\n").unwrap();
        assert_eq!(c.perturbation.mu, 3.0);
    }
}
