use std::ffi::{CStr, CString};
use std::ptr;

use contourqa_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(cqa_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn disk(size: usize, cx: f64, cy: f64, r: f64) -> Vec<u8> {
    let mut v = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r * r {
                v[y * size + x] = 1;
            }
        }
    }
    v
}

unsafe fn mask(data: &[u8], w: usize, h: usize) -> *mut CqaMask {
    let mut m = ptr::null_mut();
    assert_eq!(cqa_mask_new(data.as_ptr(), w, h, &mut m), CqaStatus::Ok);
    m
}

#[test]
fn slice_metrics_through_handles() {
    unsafe {
        let a = mask(&disk(40, 20.0, 20.0, 8.0), 40, 40);
        let b = mask(&disk(40, 20.0, 20.0, 8.0), 40, 40);
        let mut m = CqaMetrics::default();
        assert_eq!(cqa_slice_metrics(a, b, 1.0, 1.0, &mut m), CqaStatus::Ok);
        assert_eq!(m, CqaMetrics { dsc: 1.0, hd95: 0.0, msd: 0.0 });
        assert_eq!(last_error(), "");

        let c = mask(&disk(40, 23.0, 20.0, 8.0), 40, 40);
        assert_eq!(cqa_slice_metrics(a, c, 1.0, 1.0, &mut m), CqaStatus::Ok);
        assert!(m.dsc < 1.0 && m.hd95 > 0.0);
        let mut n = 0;
        assert_eq!(cqa_mask_count(c, &mut n), CqaStatus::Ok);
        assert!(n > 150);

        let d = mask(&disk(30, 15.0, 15.0, 5.0), 30, 30);
        assert_eq!(
            cqa_slice_metrics(a, d, 1.0, 1.0, &mut m),
            CqaStatus::DimensionMismatch
        );
        assert!(last_error().contains("dimension"));
        for h in [a, b, c, d] {
            cqa_mask_free(h);
        }
    }
}

#[test]
fn null_and_invalid_arguments() {
    unsafe {
        let mut m = CqaMetrics::default();
        assert_eq!(
            cqa_slice_metrics(ptr::null(), ptr::null(), 1.0, 1.0, &mut m),
            CqaStatus::NullPointer
        );
        let mut h = ptr::null_mut();
        assert_eq!(cqa_mask_new([0u8, 2].as_ptr(), 2, 1, &mut h), CqaStatus::InvalidArgument);
        assert!(h.is_null());
        assert_eq!(cqa_model_load(ptr::null(), &mut ptr::null_mut()), CqaStatus::NullPointer);
        let missing = CString::new("/nonexistent/model.json").unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(cqa_model_load(missing.as_ptr(), &mut model), CqaStatus::Io);
        assert!(model.is_null());
        cqa_model_free(ptr::null_mut());
        cqa_mask_free(ptr::null_mut());
        cqa_feature_set_free(ptr::null_mut());
    }
}

#[test]
fn train_save_load_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.json").to_str().unwrap()).unwrap();
    let schema = CString::new("classical-v1").unwrap();
    // 40 points on a slightly perturbed lattice in 24 dimensions.
    let rows: Vec<f64> = (0..40 * 24)
        .map(|i| ((i * 7919) % 101) as f64 / 101.0)
        .collect();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(
            cqa_model_train(rows.as_ptr(), 40, 24, schema.as_ptr(), 0.1, 1.0 / 24.0, &mut model),
            CqaStatus::Ok
        );
        let mut dim = 0;
        assert_eq!(cqa_model_dim(model, &mut dim), CqaStatus::Ok);
        assert_eq!(dim, 24);
        assert_eq!(cqa_model_save(model, path.as_ptr()), CqaStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(cqa_model_load(path.as_ptr(), &mut loaded), CqaStatus::Ok);

        let mut s1 = 0.0;
        let mut s2 = 0.0;
        assert_eq!(cqa_model_decision(model, rows.as_ptr(), 24, &mut s1), CqaStatus::Ok);
        assert_eq!(cqa_model_decision(loaded, rows.as_ptr(), 24, &mut s2), CqaStatus::Ok);
        assert_eq!(s1, s2);
        let far = [1e3; 24];
        assert_eq!(cqa_model_decision(loaded, far.as_ptr(), 24, &mut s2), CqaStatus::Ok);
        assert!(s2 < 0.0);
        assert_eq!(
            cqa_model_decision(loaded, far.as_ptr(), 23, &mut s2),
            CqaStatus::SchemaMismatch
        );

        assert_eq!(
            cqa_model_train(rows.as_ptr(), 40, 24, schema.as_ptr(), 0.0, 0.1, &mut model),
            CqaStatus::InvalidArgument
        );
        cqa_model_free(model);

        // A contour scored end to end on a synthetic slice.
        let size = 64;
        let m = disk(size, 32.0, 32.0, 10.0);
        let image: Vec<u8> = m.iter().map(|&v| if v != 0 { 200 } else { 60 }).collect();
        let h = mask(&m, size, size);
        let mut feats = vec![0.0; 24];
        assert_eq!(
            cqa_extract_features(image.as_ptr(), h, 8, feats.as_mut_ptr(), 24),
            CqaStatus::Ok
        );
        assert!(feats.iter().all(|v| v.is_finite()));
        assert_eq!(
            cqa_extract_features(image.as_ptr(), h, 8, feats.as_mut_ptr(), 10),
            CqaStatus::InvalidArgument
        );
        let mut direct = 0.0;
        let mut via_image = 0.0;
        assert_eq!(cqa_model_decision(loaded, feats.as_ptr(), 24, &mut direct), CqaStatus::Ok);
        assert_eq!(cqa_score_contour(loaded, image.as_ptr(), h, 8, &mut via_image), CqaStatus::Ok);
        assert_eq!(direct, via_image);

        let empty = mask(&vec![0u8; size * size], size, size);
        assert_eq!(
            cqa_score_contour(loaded, image.as_ptr(), empty, 8, &mut via_image),
            CqaStatus::EmptyMask
        );
        cqa_mask_free(h);
        cqa_mask_free(empty);
        cqa_model_free(loaded);
    }
}

#[test]
fn feature_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.csv");
    std::fs::write(
        &p,
        "custom-v1,3\ncase_id,organ,slice,label,f_0,f_1,f_2\nc1,heart,0,high,1.5,2,3\nc1,heart,1,low,4,5,6.25\n",
    )
    .unwrap();
    let cp = CString::new(p.to_str().unwrap()).unwrap();
    unsafe {
        let mut set = ptr::null_mut();
        assert_eq!(cqa_feature_file_read(cp.as_ptr(), false, &mut set), CqaStatus::Ok);
        let (mut rows, mut dim) = (0, 0);
        assert_eq!(cqa_feature_set_shape(set, &mut rows, &mut dim), CqaStatus::Ok);
        assert_eq!((rows, dim), (2, 3));
        let mut buf = [0.0; 3];
        assert_eq!(cqa_feature_set_row(set, 1, buf.as_mut_ptr(), 3), CqaStatus::Ok);
        assert_eq!(buf, [4.0, 5.0, 6.25]);
        assert_eq!(
            cqa_feature_set_row(set, 2, buf.as_mut_ptr(), 3),
            CqaStatus::InvalidArgument
        );
        cqa_feature_set_free(set);

        let mut strict = ptr::null_mut();
        assert_ne!(cqa_feature_file_read(cp.as_ptr(), true, &mut strict), CqaStatus::Ok);
        assert!(strict.is_null());
    }
}

#[test]
fn version_is_nonempty() {
    let v = unsafe { CStr::from_ptr(cqa_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/contourqa.h"),
    )
    .unwrap();
    let src = std::fs::read_to_string(
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs"),
    )
    .unwrap();
    let exports: Vec<&str> = src
        .split("extern \"C\" fn ")
        .skip(1)
        .map(|s| s.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct CqaModel CqaModel;"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = std::process::Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(cc.status.success());
    let dir = tempfile::tempdir().unwrap();
    let main = dir.path().join("main.c");
    std::fs::write(
        &main,
        "#include \"contourqa.h\"\nint main(void) { CqaModel *m = 0; size_t d; return cqa_model_dim(m, &d) == CQA_STATUS_NULL_POINTER ? 0 : 1; }\n",
    )
    .unwrap();
    let include = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let out = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&main)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
