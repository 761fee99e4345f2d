use std::ffi::{CStr, CString};
use std::ptr;

use kslb_ffi::*;

fn last_error() -> String {
    let p = kslb_last_error_message();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn bump_state(n_axis: u32, box_len: f64) -> *mut KslbState {
    let h = box_len / n_axis as f64;
    let n: Vec<f64> = (0..n_axis)
        .map(|i| {
            let x = -box_len / 2.0 + i as f64 * h;
            (-x * x).exp()
        })
        .collect();
    let c: Vec<f64> = n.iter().map(|v| 0.5 * v).collect();
    let mut out = ptr::null_mut();
    let st = unsafe { kslb_state_new(1, n_axis, box_len, 0.0, n.as_ptr(), c.as_ptr(), &mut out) };
    assert_eq!(st, KslbStatus::Ok);
    assert!(!out.is_null());
    out
}

const UNIT: KslbParams = KslbParams { chi: 1.0, tau: 1.0, lambda: 1.0, mu: 1.0 };

#[test]
fn state_roundtrip_and_accessors() {
    let s = bump_state(64, 20.0);
    unsafe {
        assert_eq!(kslb_state_len(s), 64);
        assert_eq!(kslb_state_time(s), 0.0);
        let mut n = vec![0.0; 64];
        assert_eq!(kslb_state_copy_n(s, n.as_mut_ptr(), n.len()), KslbStatus::Ok);
        assert!((n[32] - 1.0).abs() < 1e-15);
        let mut short = vec![0.0; 10];
        assert_eq!(kslb_state_copy_c(s, short.as_mut_ptr(), short.len()), KslbStatus::InvalidArgument);
        assert!(last_error().contains("buffer"));
        kslb_state_free(s);
        kslb_state_free(ptr::null_mut());
        assert_eq!(kslb_state_len(ptr::null()), 0);
    }
}

#[test]
fn null_and_invalid_inputs_set_last_error() {
    unsafe {
        let mut out = ptr::null_mut();
        let v = [1.0; 4];
        assert_eq!(kslb_state_new(1, 4, 1.0, 0.0, ptr::null(), v.as_ptr(), &mut out), KslbStatus::NullPointer);
        assert!(last_error().contains("n"));
        assert_eq!(kslb_state_new(1, 3, 1.0, 0.0, v.as_ptr(), v.as_ptr(), &mut out), KslbStatus::InvalidArgument);
        assert!(out.is_null());
        let nan = [f64::NAN; 4];
        assert_eq!(kslb_state_new(1, 4, 1.0, 0.0, nan.as_ptr(), v.as_ptr(), &mut out), KslbStatus::InvalidArgument);
        let mut mu0 = 0.0;
        assert_eq!(kslb_mu_zero_estimate(2, 1, &UNIT, &mut mu0), KslbStatus::InvalidArgument);
        // A success clears the message.
        assert_eq!(kslb_mu_zero_estimate(3, 1, &UNIT, &mut mu0), KslbStatus::Ok);
        assert!(kslb_last_error_message().is_null());
    }
}

#[test]
fn last_error_is_per_thread() {
    unsafe {
        let mut mu0 = 0.0;
        assert_eq!(kslb_mu_zero_estimate(1, 1, &UNIT, &mut mu0), KslbStatus::InvalidArgument);
    }
    let other = std::thread::spawn(|| kslb_last_error_message().is_null()).join().unwrap();
    assert!(other);
    assert!(!kslb_last_error_message().is_null());
}

#[test]
fn mu_zero_matches_core() {
    let mut mu0 = 0.0;
    assert_eq!(unsafe { kslb_mu_zero_estimate(3, 1, &UNIT, &mut mu0) }, KslbStatus::Ok);
    let p = kslb::solver::Params::new(1.0, 1.0, 1.0, 1.0).unwrap();
    let want = kslb::monitors::mu_zero_estimate(3, 1, &p).unwrap().mu0;
    assert_eq!(mu0, want);
}

#[test]
fn checkpoint_save_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("s.kslb").to_str().unwrap()).unwrap();
    let s = bump_state(32, 10.0);
    unsafe {
        assert_eq!(kslb_checkpoint_save(s, path.as_ptr()), KslbStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(kslb_checkpoint_load(path.as_ptr(), &mut back), KslbStatus::Ok);
        let (mut a, mut b) = (vec![0.0; 32], vec![0.0; 32]);
        kslb_state_copy_c(s, a.as_mut_ptr(), 32);
        kslb_state_copy_c(back, b.as_mut_ptr(), 32);
        assert_eq!(a, b);
        kslb_state_free(back);
        let missing = CString::new(dir.path().join("none.kslb").to_str().unwrap()).unwrap();
        assert_eq!(kslb_checkpoint_load(missing.as_ptr(), &mut back), KslbStatus::Io);
        kslb_state_free(s);
    }
}

#[test]
fn run_matches_core_and_reports_blowup() {
    let s = bump_state(64, 20.0);
    let mut cfg = KslbRunConfig { dt: 0.0, t_end: 0.0, monitor_every: 0.0, blowup_cap: 0.0, dealias: false, adaptive: false };
    unsafe {
        assert_eq!(kslb_run_config_default(&mut cfg), KslbStatus::Ok);
        cfg.t_end = 0.5;
        cfg.monitor_every = 0.1;
        let mut fin = ptr::null_mut();
        let mut sum = std::mem::zeroed::<KslbRunSummary>();
        assert_eq!(kslb_run(s, &UNIT, &cfg, &mut fin, &mut sum), KslbStatus::Ok);
        assert_eq!(sum.status, KslbRunStatus::Completed);
        assert!((kslb_state_time(fin) - 0.5).abs() < 1e-12);
        assert!(sum.steps > 0 && sum.sup_linf_n >= 1.0);

        let mut n = vec![0.0; 64];
        kslb_state_copy_n(fin, n.as_mut_ptr(), 64);
        let core = {
            let mut n0 = vec![0.0; 64];
            let mut c0 = vec![0.0; 64];
            kslb_state_copy_n(s, n0.as_mut_ptr(), 64);
            kslb_state_copy_c(s, c0.as_mut_ptr(), 64);
            let g = kslb::fields::make_grid(1, 64, 20.0).unwrap();
            let st = kslb::solver::State::new(
                0.0,
                kslb::fields::ScalarField::new(g, n0).unwrap(),
                kslb::fields::ScalarField::new(g, c0).unwrap(),
            )
            .unwrap();
            let p = kslb::solver::Params::new(1.0, 1.0, 1.0, 1.0).unwrap();
            let rc = kslb::solver::RunConfig { t_end: 0.5, monitor_every: 0.1, ..Default::default() };
            kslb::solver::run(&st, &p, &rc, &mut []).unwrap().final_state
        };
        assert_eq!(n, core.n.values());
        kslb_state_free(fin);

        cfg.blowup_cap = 0.1;
        assert_eq!(kslb_run(s, &UNIT, &cfg, &mut fin, &mut sum), KslbStatus::Ok);
        assert_eq!(sum.status, KslbRunStatus::BlowUpSuspected);
        assert_eq!(sum.steps, 0);
        kslb_state_free(fin);

        cfg.blowup_cap = 0.0;
        cfg.dt = -1.0;
        assert_eq!(kslb_run(s, &UNIT, &cfg, &mut fin, &mut sum), KslbStatus::InvalidArgument);
        assert!(last_error().contains("dt"));
        kslb_state_free(s);
    }
}

#[test]
fn header_declares_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/kslb.h")).unwrap();
    for sym in [
        "kslb_last_error_message",
        "kslb_state_new",
        "kslb_state_free",
        "kslb_checkpoint_load",
        "kslb_checkpoint_save",
        "kslb_mu_zero_estimate",
        "kslb_run",
        "KSLB_STATUS_NULL_POINTER",
        "typedef struct KslbState KslbState",
    ] {
        assert!(header.contains(sym), "missing {sym}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = std::process::Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(cc.status.success());
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"kslb.h\"\nint main(void) {\n  KslbRunConfig cfg;\n  KslbState *s = 0;\n  \
         if (kslb_run_config_default(&cfg) != KSLB_STATUS_OK) return 1;\n  kslb_state_free(s);\n  return 0;\n}\n",
    )
    .unwrap();
    let st = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", include])
        .arg(&src)
        .status()
        .unwrap();
    assert!(st.success());
}
