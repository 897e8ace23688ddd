use std::ffi::{CStr, CString};
use std::ptr;

use ceir_core::config::PipelineConfig;
use ceir_core::pipeline::Workspace;
use ceir_core::synth::{write_fixture, FixtureSpec, FIXTURE_CONFIG};
use ceir_ffi::*;

fn message() -> String {
    unsafe { CStr::from_ptr(ceir_last_error_message()) }.to_string_lossy().into_owned()
}

fn cpath(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

/// Trains the planted fixture in-process and returns its directory.
fn trained() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let spec = FixtureSpec {
        train_per_class: 30,
        test_per_class: 30,
        ..FixtureSpec::default()
    };
    write_fixture(dir.path(), &spec).unwrap();
    let text = FIXTURE_CONFIG.to_string() + "max_epochs = 20\n";
    let cfg = PipelineConfig::parse(&text, dir.path()).unwrap();
    let ws = Workspace::open(cfg).unwrap();
    ws.filter_concepts().unwrap();
    ws.train().unwrap();
    dir
}

#[test]
fn models_load_and_run_through_the_c_abi() {
    let dir = trained();
    let d = dir.path();
    unsafe {
        let mut x = ptr::null_mut();
        assert_eq!(ceir_matrix_read(cpath(&d.join("test/backbone.cemb")).as_ptr(), &mut x), CeirStatus::Ok);
        assert_eq!((ceir_matrix_rows(x), ceir_matrix_cols(x)), (90, 16));

        let mut cbl = ptr::null_mut();
        assert_eq!(ceir_bottleneck_load(cpath(&d.join("artifacts/cbl.model")).as_ptr(), &mut cbl), CeirStatus::Ok);
        let m = ceir_bottleneck_concepts(cbl);
        assert_eq!(m, 12);
        let mut q = ptr::null_mut();
        assert_eq!(ceir_bottleneck_project(cbl, x, &mut q), CeirStatus::Ok);
        assert_eq!((ceir_matrix_rows(q), ceir_matrix_cols(q)), (90, m));

        let mut vae = ptr::null_mut();
        assert_eq!(ceir_vae_load(cpath(&d.join("artifacts/vae.model")).as_ptr(), &mut vae), CeirStatus::Ok);
        assert_eq!(ceir_vae_input_dim(vae), m);
        let mut h = ptr::null_mut();
        assert_eq!(ceir_vae_latent(vae, q, &mut h), CeirStatus::Ok);
        assert_eq!(ceir_matrix_cols(h), ceir_vae_latent_dim(vae));

        // Attribution of the first concept vector.
        let row: Vec<f64> = std::slice::from_raw_parts(ceir_matrix_data(q), m).iter().map(|&v| f64::from(v)).collect();
        let mut importance = vec![0.0; m];
        let mut gap = f64::NAN;
        assert_eq!(ceir_vae_attribute(vae, row.as_ptr(), m, 64, importance.as_mut_ptr(), &mut gap), CeirStatus::Ok);
        assert!(gap.is_finite());
        assert!(importance.iter().any(|v| *v != 0.0));

        // Clustering the latents recovers the planted classes.
        let mut assign = vec![0usize; 90];
        let mut inertia = 0.0;
        assert_eq!(ceir_kmeans(h, 3, 10, 42, assign.as_mut_ptr(), &mut inertia), CeirStatus::Ok);
        assert!(inertia > 0.0);
        let truth: Vec<usize> = (0..90).map(|i| i / 30).collect();
        let mut metrics = CeirMetrics::default();
        assert_eq!(ceir_cluster_metrics(assign.as_ptr(), truth.as_ptr(), 90, &mut metrics), CeirStatus::Ok);
        assert!(metrics.acc >= 0.9, "{metrics:?}");

        // A bottleneck applied to mismatched features reports a dimension error.
        let mut bad = ptr::null_mut();
        assert_eq!(ceir_bottleneck_project(cbl, q, &mut bad), CeirStatus::Dimension);
        assert!(bad.is_null());
        assert!(message().starts_with("dimension mismatch"), "{}", message());

        for m in [x, q, h] {
            ceir_matrix_free(m);
        }
        ceir_bottleneck_free(cbl);
        ceir_vae_free(vae);
    }
}

#[test]
fn matrices_round_trip_and_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = cpath(&dir.path().join("m.cemb"));
    unsafe {
        let data = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut m = ptr::null_mut();
        assert_eq!(ceir_matrix_new(2, 3, data.as_ptr(), &mut m), CeirStatus::Ok);
        assert_eq!(ceir_matrix_write(m, path.as_ptr()), CeirStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(ceir_matrix_read(path.as_ptr(), &mut back), CeirStatus::Ok);
        assert_eq!(std::slice::from_raw_parts(ceir_matrix_data(back), 6), &data);

        let mut p = ptr::null_mut();
        assert_eq!(ceir_similarity(m, m, true, &mut p), CeirStatus::Ok);
        assert_eq!((ceir_matrix_rows(p), ceir_matrix_cols(p)), (2, 2));
        let mut loss = 0.0;
        assert_eq!(ceir_alignment_loss(m, m, &mut loss), CeirStatus::Ok);
        assert!((-3.0..=3.0).contains(&loss));

        let missing = cpath(&dir.path().join("absent.cemb"));
        let mut none = ptr::null_mut();
        assert_eq!(ceir_matrix_read(missing.as_ptr(), &mut none), CeirStatus::Io);
        assert!(none.is_null());
        assert!(message().contains("absent.cemb"));

        std::fs::write(dir.path().join("junk.cemb"), b"nope").unwrap();
        let junk = cpath(&dir.path().join("junk.cemb"));
        assert_eq!(ceir_matrix_read(junk.as_ptr(), &mut none), CeirStatus::Format);

        assert_eq!(ceir_matrix_write(ptr::null(), path.as_ptr()), CeirStatus::NullPointer);
        assert_eq!(ceir_matrix_rows(ptr::null()), 0);
        ceir_matrix_free(ptr::null_mut());

        for h in [m, back, p] {
            ceir_matrix_free(h);
        }
    }
}
