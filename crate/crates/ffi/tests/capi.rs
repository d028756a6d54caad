use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use hjsafe::sim::{AxisSpec, Scenario};
use hjsafe_ffi::*;

fn small_json() -> CString {
    let mut s = Scenario::quad2d_demo();
    s.subsystems[0].grid = vec![AxisSpec::new(0.0, 3.2, 41), AxisSpec::new(-6.0, 6.0, 41)];
    s.subsystems[0].coarse = None;
    CString::new(serde_json::to_string(&s).unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(hjsafe_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn solve_save_load_and_filter() {
    unsafe {
        let mut scenario = ptr::null_mut();
        assert_eq!(hjsafe_scenario_from_json(small_json().as_ptr(), &mut scenario), HjsafeStatus::Ok);
        assert_eq!(hjsafe_scenario_subsystem_count(scenario), 1);

        let mut field = ptr::null_mut();
        let mut info = HjsafeSolveInfo::default();
        assert_eq!(hjsafe_solve(scenario, 0, &mut field, &mut info), HjsafeStatus::Ok);
        assert!(info.converged && info.iterations > 0 && info.safe_nodes > 0);
        assert_eq!(info.coarse_iterations, 0);
        assert_eq!(hjsafe_field_ndims(field), 2);
        assert_eq!(hjsafe_field_len(field), 41 * 41);

        let mut shape = [0usize; 2];
        assert_eq!(hjsafe_field_shape(field, shape.as_mut_ptr(), 2), HjsafeStatus::Ok);
        assert_eq!(shape, [41, 41]);
        let mut values = vec![0.0; 41 * 41];
        assert_eq!(hjsafe_field_values(field, values.as_mut_ptr(), values.len()), HjsafeStatus::Ok);
        assert_eq!(hjsafe_field_values(field, values.as_mut_ptr(), 3), HjsafeStatus::InvalidArgument);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("v.hjvf").to_str().unwrap()).unwrap();
        assert_eq!(hjsafe_field_save(field, path.as_ptr()), HjsafeStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(hjsafe_field_load(path.as_ptr(), &mut loaded), HjsafeStatus::Ok);
        let mut again = vec![0.0; values.len()];
        assert_eq!(hjsafe_field_values(loaded, again.as_mut_ptr(), again.len()), HjsafeStatus::Ok);
        assert_eq!(values, again);

        let (mut v, mut ood) = (0.0, true);
        let x = [1.5, 0.0];
        assert_eq!(hjsafe_field_value_at(loaded, x.as_ptr(), 2, &mut v, &mut ood), HjsafeStatus::Ok);
        assert!(v < 0.0 && !ood);

        let mut filter = ptr::null_mut();
        assert_eq!(hjsafe_filter_new(scenario, 0, loaded, &mut filter), HjsafeStatus::Ok);
        let mut u = [0.0];
        let mut d = HjsafeDecision::default();
        // hovering mid-range passes the performance control through
        let perf = [0.5];
        assert_eq!(hjsafe_filter_apply(filter, x.as_ptr(), 2, perf.as_ptr(), 1, u.as_mut_ptr(), &mut d), HjsafeStatus::Ok);
        assert!(!d.overridden);
        assert_eq!(u, perf);
        // falling fast near the floor with zero thrust is overridden to full thrust
        let low = [0.6, -2.5];
        let idle = [0.0];
        assert_eq!(hjsafe_filter_apply(filter, low.as_ptr(), 2, idle.as_ptr(), 1, u.as_mut_ptr(), &mut d), HjsafeStatus::Ok);
        assert!(d.overridden);
        assert_eq!(u, [1.0]);
        assert_eq!(
            hjsafe_filter_apply(filter, low.as_ptr(), 1, idle.as_ptr(), 1, u.as_mut_ptr(), &mut d),
            HjsafeStatus::InvalidArgument
        );
        assert!(last_error().contains("expected 2 states"));

        hjsafe_filter_free(filter);
        hjsafe_field_free(loaded);
        hjsafe_field_free(field);
        hjsafe_scenario_free(scenario);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut scenario = ptr::null_mut();
        let bad = CString::new(r#"{"name": "x", "bogus": 1}"#).unwrap();
        assert_eq!(hjsafe_scenario_from_json(bad.as_ptr(), &mut scenario), HjsafeStatus::InvalidArgument);
        assert!(!last_error().is_empty());
        assert!(scenario.is_null());

        let name = CString::new("nope").unwrap();
        assert_eq!(hjsafe_scenario_preset(name.as_ptr(), &mut scenario), HjsafeStatus::InvalidArgument);
        assert_eq!(hjsafe_scenario_preset(ptr::null(), &mut scenario), HjsafeStatus::NullPointer);

        let name = CString::new("quad2d_demo").unwrap();
        assert_eq!(hjsafe_scenario_preset(name.as_ptr(), &mut scenario), HjsafeStatus::Ok);
        assert!(last_error().is_empty());
        let mut field = ptr::null_mut();
        let mut info = HjsafeSolveInfo::default();
        assert_eq!(hjsafe_solve(scenario, 5, &mut field, &mut info), HjsafeStatus::InvalidArgument);
        assert_eq!(hjsafe_solve(ptr::null(), 0, &mut field, &mut info), HjsafeStatus::NullPointer);

        let missing = CString::new("/nonexistent/dir/v.hjvf").unwrap();
        assert_eq!(hjsafe_field_load(missing.as_ptr(), &mut field), HjsafeStatus::Format);
        hjsafe_scenario_free(scenario);
        hjsafe_scenario_free(ptr::null_mut());
        hjsafe_field_free(ptr::null_mut());
        hjsafe_filter_free(ptr::null_mut());
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/hjsafe.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in ["hjsafe_solve", "hjsafe_filter_apply", "hjsafe_last_error", "HJSAFE_STATUS_NUMERICAL"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(&src, "#include \"hjsafe.h\"\nint main(void) { HjsafeSolveInfo i; (void)i; return hjsafe_last_error() == 0; }\n").unwrap();
    match Command::new("cc").arg("-fsyntax-only").arg("-Wall").arg("-Werror").arg(format!("-I{}", concat!(env!("CARGO_MANIFEST_DIR"), "/include"))).arg(&src).status() {
        Ok(status) => assert!(status.success()),
        Err(_) => eprintln!("no C compiler found; skipped the compile check"),
    }
}
