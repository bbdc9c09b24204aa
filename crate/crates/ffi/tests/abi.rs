use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use vtrecipe_ffi::*;

fn new_matrix(rows: usize, cols: usize, data: &[f64]) -> *mut VtrMatrix {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { vtr_matrix_new(rows, cols, data.as_ptr(), &mut m) }, VtrStatus::Ok);
    m
}

fn last_error() -> String {
    let p = vtr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn values(m: *const VtrMatrix) -> Vec<f64> {
    let (mut r, mut c) = (0, 0);
    assert_eq!(unsafe { vtr_matrix_shape(m, &mut r, &mut c) }, VtrStatus::Ok);
    let mut buf = vec![0.0; r * c];
    assert_eq!(unsafe { vtr_matrix_copy(m, buf.as_mut_ptr(), buf.len()) }, VtrStatus::Ok);
    buf
}

#[test]
fn recall_and_mean_over_a_known_grid() {
    // text 1 ranks video 0 above video 1; both videos rank their own text first
    let s = new_matrix(2, 2, &[0.9, 0.8, 0.1, 0.2]);
    let mut r = 0.0;
    assert_eq!(unsafe { vtr_recall_at_k(s, 1, VtrDirection::TextToVideo, &mut r) }, VtrStatus::Ok);
    assert_eq!(r, 50.0);
    assert_eq!(unsafe { vtr_recall_at_k(s, 2, VtrDirection::TextToVideo, &mut r) }, VtrStatus::Ok);
    assert_eq!(r, 100.0);
    assert_eq!(unsafe { vtr_recall_at_k(s, 1, VtrDirection::VideoToText, &mut r) }, VtrStatus::Ok);
    assert_eq!(r, 100.0);
    assert_eq!(unsafe { vtr_recall_at_k(s, 0, VtrDirection::TextToVideo, &mut r) }, VtrStatus::InvalidArgument);
    assert!(last_error().contains("k >= 1"));

    let mut avg = 0.0;
    assert_eq!(unsafe { vtr_avg_r(49.6, 76.0, 84.5, &mut avg) }, VtrStatus::Ok);
    assert!((avg - 70.033_333_333_333_33).abs() < 1e-12);
    assert_eq!(unsafe { vtr_avg_r(101.0, 0.0, 0.0, &mut avg) }, VtrStatus::InvalidArgument);
    unsafe { vtr_matrix_free(s) };
}

#[test]
fn dual_softmax_and_contrastive_loss() {
    let s = new_matrix(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let mut d = ptr::null_mut();
    assert_eq!(unsafe { vtr_dsl(s, 1.0, VtrDirection::TextToVideo, &mut d) }, VtrStatus::Ok);
    let w = std::f64::consts::E / (1.0 + std::f64::consts::E);
    let got = values(d);
    for (g, e) in got.iter().zip([w, 0.0, 0.0, w]) {
        assert!((g - e).abs() < 1e-15);
    }
    assert_eq!(unsafe { vtr_dsl(s, -1.0, VtrDirection::TextToVideo, &mut d) }, VtrStatus::InvalidArgument);

    // two texts, each positive scoring 1 against a negative at 0, scale 1
    let mut loss = 0.0;
    assert_eq!(unsafe { vtr_vtc_loss(s, 1.0, false, true, &mut loss) }, VtrStatus::Ok);
    assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
    let wide = new_matrix(2, 3, &[0.0; 6]);
    assert_eq!(unsafe { vtr_vtc_loss(wide, 1.0, false, true, &mut loss) }, VtrStatus::ShapeMismatch);
    unsafe {
        vtr_matrix_free(s);
        vtr_matrix_free(d);
        vtr_matrix_free(wide);
    }
}

#[test]
fn keyframes_report_their_length() {
    let frames: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
    let f = new_matrix(6, 2, &frames);
    let (mut idx, mut len) = ([0usize; 8], 0);
    assert_eq!(unsafe { vtr_tsdpc(f, 3, 20.0, idx.as_mut_ptr(), idx.len(), &mut len) }, VtrStatus::Ok);
    assert_eq!(len, 3);
    assert!(idx[..3].windows(2).all(|w| w[0] < w[1]));
    assert_eq!(unsafe { vtr_tsdpc(f, 8, 20.0, idx.as_mut_ptr(), 2, &mut len) }, VtrStatus::BufferTooSmall);
    assert_eq!(len, 6);
    unsafe { vtr_matrix_free(f) };
}

#[test]
fn container_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.m2rp").to_str().unwrap()).unwrap();
    let data = [0.5, -1.25, 3.0, 1e-3, 7.0, -0.0];
    let m = new_matrix(2, 3, &data);
    assert_eq!(unsafe { vtr_matrix_write(m, path.as_ptr()) }, VtrStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { vtr_matrix_read(path.as_ptr(), &mut back) }, VtrStatus::Ok);
    let expected: Vec<f64> = data.iter().map(|&x| x as f32 as f64).collect();
    assert_eq!(values(back), expected);

    let missing = CString::new(dir.path().join("absent.m2rp").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { vtr_matrix_read(missing.as_ptr(), &mut none) }, VtrStatus::Io);
    assert!(none.is_null());
    assert_eq!(unsafe { vtr_matrix_read(ptr::null(), &mut none) }, VtrStatus::NullPointer);
    assert!(last_error().contains("path"));

    let mut small = [0.0; 2];
    assert_eq!(unsafe { vtr_matrix_copy(m, small.as_mut_ptr(), 2) }, VtrStatus::BufferTooSmall);
    assert_eq!(unsafe { vtr_matrix_new(2, 2, ptr::null(), &mut none) }, VtrStatus::NullPointer);
    let mut r = 0.0;
    assert_eq!(unsafe { vtr_recall_at_k(ptr::null(), 1, VtrDirection::TextToVideo, &mut r) }, VtrStatus::NullPointer);

    // a success clears the message
    assert_eq!(unsafe { vtr_avg_r(1.0, 2.0, 3.0, &mut r) }, VtrStatus::Ok);
    assert!(vtr_last_error().is_null());
    unsafe {
        vtr_matrix_free(m);
        vtr_matrix_free(back);
        vtr_matrix_free(ptr::null_mut());
    }
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(vtr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/vtrecipe.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["vtr_recall_at_k", "vtr_avg_r", "vtr_dsl", "vtr_vtc_loss", "vtr_tsdpc", "vtr_matrix_read", "vtr_last_error"] {
        assert!(text.contains(name), "{name} missing from the header");
    }
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(out) = Command::new(compiler).args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang]).arg(&header).output() else {
            eprintln!("{compiler} not found; skipping");
            continue;
        };
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
