use std::ffi::{c_char, CString};
use std::ptr;

use infedit_ffi::*;

fn last_error() -> String {
    let n = unsafe { ie_last_error_message(ptr::null_mut(), 0) };
    let mut buf = vec![0 as c_char; n + 1];
    unsafe { ie_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn schedule() -> *mut IeSchedule {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { ie_schedule_linear(1000, 1e-4, 0.02, &mut s) }, IeStatus::Ok);
    s
}

fn latent(data: &[f64], shape: &[usize]) -> *mut IeLatent {
    let mut z = ptr::null_mut();
    let st = unsafe { ie_latent_new(data.as_ptr(), shape.as_ptr(), shape.len(), &mut z) };
    assert_eq!(st, IeStatus::Ok, "{}", last_error());
    z
}

fn values(z: *const IeLatent) -> Vec<f64> {
    let n = unsafe { ie_latent_len(z) };
    let mut out = vec![0.0; n];
    assert_eq!(unsafe { ie_latent_copy_data(z, out.as_mut_ptr(), n) }, IeStatus::Ok);
    out
}

#[test]
fn schedule_handle() {
    let s = schedule();
    unsafe {
        assert_eq!(ie_schedule_total_steps(s), 1000);
        let mut a = 0.0;
        assert_eq!(ie_schedule_alpha_bar(s, 0, &mut a), IeStatus::Ok);
        assert_eq!(a, 1.0);
        assert_eq!(ie_schedule_alpha_bar(s, 1, &mut a), IeStatus::Ok);
        assert!((a - (1.0 - 1e-4)).abs() < 1e-15);
        assert_eq!(ie_schedule_alpha_bar(s, 1001, &mut a), IeStatus::Timestep);
        assert!(last_error().contains("1001"));
        ie_schedule_free(s);

        let mut bad = ptr::null_mut();
        let tail = [0.5, 0.7];
        assert_eq!(ie_schedule_from_alpha_bar(tail.as_ptr(), 2, &mut bad), IeStatus::InvalidArgument);
        assert!(bad.is_null());
        assert_eq!(ie_schedule_total_steps(ptr::null()), 0);
    }
}

#[test]
fn latent_lifecycle_and_files() {
    let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.25 - 1.0).collect();
    let z = latent(&data, &[3, 4]);
    unsafe {
        assert_eq!(ie_latent_ndim(z), 2);
        let mut shape = [0usize; 2];
        assert_eq!(ie_latent_shape(z, shape.as_mut_ptr(), 2), IeStatus::Ok);
        assert_eq!(shape, [3, 4]);
        assert_eq!(ie_latent_shape(z, shape.as_mut_ptr(), 1), IeStatus::BufferTooSmall);
        assert_eq!(values(z), data);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("z.dlt").to_str().unwrap()).unwrap();
        assert_eq!(ie_latent_write(z, path.as_ptr()), IeStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(ie_latent_read(path.as_ptr(), &mut back), IeStatus::Ok);
        assert_eq!(values(back), data);

        std::fs::write(dir.path().join("bad.dlt"), b"NOPE1234").unwrap();
        let bad = CString::new(dir.path().join("bad.dlt").to_str().unwrap()).unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(ie_latent_read(bad.as_ptr(), &mut out), IeStatus::Format);
        let missing = CString::new(dir.path().join("missing.dlt").to_str().unwrap()).unwrap();
        assert_eq!(ie_latent_read(missing.as_ptr(), &mut out), IeStatus::Io);
        assert!(out.is_null());

        ie_latent_free(back);
        ie_latent_free(z);
        ie_latent_free(ptr::null_mut());
    }
}

#[test]
fn rejects_bad_arguments() {
    unsafe {
        let mut z = ptr::null_mut();
        let shape = [2usize];
        assert_eq!(ie_latent_new(ptr::null(), shape.as_ptr(), 1, &mut z), IeStatus::NullPointer);
        let nan = [f64::NAN, 0.0];
        assert_eq!(ie_latent_new(nan.as_ptr(), shape.as_ptr(), 1, &mut z), IeStatus::InvalidArgument);
        assert!(!last_error().is_empty());
        let a = latent(&[1.0, 2.0], &[2]);
        let b = latent(&[1.0, 2.0, 3.0], &[3]);
        let mut m = 0.0;
        assert_eq!(ie_mse(a, b, &mut m), IeStatus::ShapeMismatch);
        assert_eq!(ie_mse(a, a, ptr::null_mut()), IeStatus::NullPointer);
        assert_eq!(ie_mse(a, a, &mut m), IeStatus::Ok);
        assert!(last_error().is_empty());
        ie_latent_free(a);
        ie_latent_free(b);
    }
}

#[test]
fn step_primitives_agree() {
    let s = schedule();
    let z0 = latent(&[0.5, -1.0, 2.0, 0.0], &[4]);
    let eps = latent(&[0.1, 0.2, -0.3, 1.0], &[4]);
    unsafe {
        let mut z_t = ptr::null_mut();
        assert_eq!(ie_ddcm_step(s, z0, 500, eps, &mut z_t), IeStatus::Ok);
        let mut e = ptr::null_mut();
        assert_eq!(ie_epsilon_cons(s, z_t, 500, z0, &mut e), IeStatus::Ok);
        for (x, y) in values(e).iter().zip(values(eps)) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut x0 = ptr::null_mut();
        assert_eq!(ie_predict_x0(s, z_t, 500, e, &mut x0), IeStatus::Ok);
        for (x, y) in values(x0).iter().zip(values(z0)) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut out = ptr::null_mut();
        assert_eq!(ie_epsilon_cons(s, z_t, 0, z0, &mut out), IeStatus::Timestep);

        let mut rec = ptr::null_mut();
        let mut err = f64::NAN;
        assert_eq!(ie_virtual_invert(s, z0, 8, 3, &mut rec, &mut err), IeStatus::Ok);
        assert!(err <= 1e-12);
        for p in [z_t, e, x0, rec] {
            ie_latent_free(p);
        }
        ie_latent_free(z0);
        ie_latent_free(eps);
        ie_schedule_free(s);
    }
}

#[test]
fn mixture_edit_and_metrics() {
    let s = schedule();
    let src: Vec<f64> = (0..64).map(|i| -2.0 + 0.1 * ((i % 7) as f64 / 7.0 - 0.5)).collect();
    let z0 = latent(&src, &[8, 8]);
    let means = [-2.0, 2.0];
    unsafe {
        let mut tgt = ptr::null_mut();
        assert_eq!(ie_mixture_edit(s, z0, means.as_ptr(), 2, 0.1, 0, 1, 12, 7, &mut tgt), IeStatus::Ok, "{}", last_error());
        let out = values(tgt);
        for (t, x) in out.iter().zip(&src) {
            assert!((t - x - 4.0).abs() < 1e-6, "{t} vs {x}");
        }
        let mut p = 0.0;
        assert_eq!(ie_psnr(z0, z0, 1.0, &mut p), IeStatus::Ok);
        assert!(p.is_infinite());
        let mut q = 0.0;
        assert_eq!(ie_ssim(z0, z0, &mut q), IeStatus::Ok);
        assert!((q - 1.0).abs() < 1e-12);
        assert_eq!(ie_mixture_edit(s, z0, means.as_ptr(), 2, 0.1, 0, 5, 12, 7, &mut tgt), IeStatus::InvalidArgument);
        ie_latent_free(tgt);
        ie_latent_free(z0);
        ie_schedule_free(s);
    }
}
