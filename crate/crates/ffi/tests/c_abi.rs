use std::ffi::{CStr, CString};
use std::ptr;

use selfens_ffi::*;

fn last_error() -> String {
    let p = selfens_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn schedules_match_closed_forms() {
    assert_eq!(selfens_rampup(0, 80), (-5.0f64).exp());
    assert_eq!(selfens_rampup(80, 80), 1.0);
    assert_eq!(selfens_rampdown(0, 300, 50), 1.0);
    assert!((selfens_rampdown(299, 300, 50) - (-12.5f64 * (49.0 / 50.0f64).powi(2)).exp()).abs() < 1e-12);
    let mut w = -1.0;
    let s = unsafe { selfens_unsup_weight(0, 80, 100.0, 4000, 50000, true, &mut w) };
    assert_eq!(s, SelfensStatus::Ok);
    assert_eq!(w, 0.0);
    let s = unsafe { selfens_unsup_weight(80, 80, 100.0, 4000, 50000, false, &mut w) };
    assert_eq!(s, SelfensStatus::Ok);
    assert!((w - 8.0).abs() < 1e-12);
}

#[test]
fn losses_and_null_arguments() {
    let z = [0.2, 0.8, 0.5, 0.5];
    let t = [0.0, 1.0, 0.5, 0.5];
    let mut out = 0.0;
    assert_eq!(unsafe { selfens_consistency_mse(z.as_ptr(), t.as_ptr(), 2, 2, &mut out) }, SelfensStatus::Ok);
    assert!((out - 0.08 / 4.0).abs() < 1e-12);

    let labels = [1i32, -1];
    assert_eq!(unsafe { selfens_cross_entropy(z.as_ptr(), labels.as_ptr(), 2, 2, &mut out) }, SelfensStatus::Ok);
    assert!((out + 0.8f64.ln()).abs() < 1e-12);

    let s = unsafe { selfens_consistency_mse(ptr::null(), t.as_ptr(), 2, 2, &mut out) };
    assert_eq!(s, SelfensStatus::InvalidArgument);
    assert!(!last_error().is_empty());
}

#[test]
fn ensemble_round_trip_through_file() {
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { selfens_ensemble_new(3, 2, 0.6, &mut e) }, SelfensStatus::Ok);
    let mut target = [0.0; 2];
    assert_eq!(unsafe { selfens_ensemble_target(e, 1, target.as_mut_ptr()) }, SelfensStatus::Config);

    let rows = [1usize];
    let z = [0.25, 0.75];
    assert_eq!(unsafe { selfens_ensemble_update(e, rows.as_ptr(), 1, z.as_ptr()) }, SelfensStatus::Ok);
    assert_eq!(unsafe { selfens_ensemble_counter(e, 1) }, 1);
    assert_eq!(unsafe { selfens_ensemble_counter(e, 0) }, 0);
    assert_eq!(unsafe { selfens_ensemble_target(e, 1, target.as_mut_ptr()) }, SelfensStatus::Ok);
    assert!((target[0] - 0.25).abs() < 1e-12 && (target[1] - 0.75).abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("z.bin").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { selfens_ensemble_save(e, path.as_ptr()) }, SelfensStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { selfens_ensemble_load(path.as_ptr(), &mut back) }, SelfensStatus::Ok);
    unsafe {
        assert_eq!(selfens_ensemble_rows(back), 3);
        assert_eq!(selfens_ensemble_classes(back), 2);
        assert_eq!(selfens_ensemble_counter(back, 1), 1);
        selfens_ensemble_free(e);
        selfens_ensemble_free(back);
    }

    let missing = CString::new(dir.path().join("none.bin").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { selfens_ensemble_load(missing.as_ptr(), &mut none) }, SelfensStatus::Data);
    assert!(none.is_null());
}

#[test]
fn config_errors_carry_key_names() {
    let text = CString::new("alpha = 1.0").unwrap();
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { selfens_config_parse(text.as_ptr(), &mut c) }, SelfensStatus::Config);
    assert!(last_error().contains("alpha"));
    assert!(c.is_null());
}

#[test]
fn trains_temporal_run_and_exports_history() {
    let text = CString::new(
        "algorithm = \"temporal\"\nseed = 3\n[schedule]\ntotal_epochs = 3\nrampup_epochs = 1\nrampdown_epochs = 1\n\
         [data]\nn = 200\ntest_n = 100\nlabels_per_class = 5\n",
    )
    .unwrap();
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { selfens_config_parse(text.as_ptr(), &mut c) }, SelfensStatus::Ok, "{}", last_error());

    let toml = unsafe { selfens_config_to_toml(c) };
    assert!(!toml.is_null());
    assert!(unsafe { CStr::from_ptr(toml) }.to_str().unwrap().contains("temporal"));
    unsafe { selfens_string_free(toml) };

    let mut h = ptr::null_mut();
    let mut z = ptr::null_mut();
    assert_eq!(unsafe { selfens_train(c, &mut h, &mut z) }, SelfensStatus::Ok, "{}", last_error());
    assert!(!z.is_null());
    unsafe {
        assert_eq!(selfens_history_len(h), 3);
        let mut ep = SelfensEpoch::default();
        assert_eq!(selfens_history_get(h, 0, &mut ep), SelfensStatus::Ok);
        assert_eq!(ep.w, 0.0);
        assert!(ep.test_err >= 0.0 && ep.test_err <= 1.0);
        assert_eq!(selfens_history_get(h, 3, &mut ep), SelfensStatus::InvalidArgument);
        assert_eq!(selfens_ensemble_rows(z), 200);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.jsonl");
        let cpath = CString::new(path.to_str().unwrap()).unwrap();
        assert_eq!(selfens_history_write_jsonl(h, cpath.as_ptr()), SelfensStatus::Ok);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 3);

        selfens_history_free(h);
        selfens_ensemble_free(z);
        selfens_config_free(c);
    }
}
