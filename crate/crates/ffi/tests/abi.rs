use std::ffi::{c_char, CStr, CString};
use std::ptr;

use svolterra_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe { sv_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn problem(text: &str) -> *mut SvProblem {
    let c = CString::new(text).unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { sv_problem_new(c.as_ptr(), &mut p) }, SvStatus::Ok, "{}", last_error());
    p
}

const SMALL: &str = "operator.modes = 8\nsolver.dt = 1e-2\nmc.paths = 50\nseed = 9\n";

#[test]
fn scalar_functions() {
    let mut v = 0.0;
    assert_eq!(unsafe { sv_mittag_leffler(1.0, -1.0, &mut v) }, SvStatus::Ok);
    assert!((v - (-1f64).exp()).abs() < 1e-14);
    assert_eq!(unsafe { sv_sector_parameter(2.5, 0.0, &mut v) }, SvStatus::Config);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { sv_sector_parameter(1.5, 0.0, ptr::null_mut()) }, SvStatus::NullPointer);
    let version = unsafe { CStr::from_ptr(sv_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn simulate_matches_the_library() {
    let p = problem(SMALL);
    let mut path = ptr::null_mut();
    assert_eq!(unsafe { sv_simulate(p, 9, 2, &mut path) }, SvStatus::Ok);
    let mut needed = 0;
    assert_eq!(unsafe { sv_path_values(path, ptr::null_mut(), 0, &mut needed) }, SvStatus::BufferTooSmall);
    let mut values = vec![0.0; needed];
    assert_eq!(unsafe { sv_path_values(path, values.as_mut_ptr(), values.len(), &mut needed) }, SvStatus::Ok);

    let cfg = svolterra::config::parse_config(SMALL).unwrap();
    let prob = cfg.build().unwrap();
    let tables = svolterra::verify::build_tables(&cfg, &prob).unwrap();
    let solver = svolterra::solver::Solver::new(&cfg.solver, &tables, &prob.op, &prob.coeffs, Some(prob.law)).unwrap();
    let noise = svolterra::noise::sample_noise_path(&prob.law, 1.0, 9, 2, cfg.noise_selection()).unwrap();
    assert_eq!(values, solver.step(&noise).unwrap().values);

    let (mut large, mut small) = (0, 0);
    assert_eq!(unsafe { sv_path_jumps(path, &mut large, &mut small) }, SvStatus::Ok);
    assert_eq!((large, small), (noise.large.count(), noise.small.len()));

    let mut s = 0.0;
    assert_eq!(unsafe { sv_problem_resolvent(p, 0, 0, &mut s) }, SvStatus::Ok);
    assert_eq!(s, 1.0);
    assert_eq!(unsafe { sv_problem_resolvent(p, 8, 0, &mut s) }, SvStatus::Config);
    unsafe {
        sv_path_free(path);
        sv_problem_free(p);
    }
}

#[test]
fn verify_passes_and_errors_are_reported() {
    let p = problem(SMALL);
    assert_eq!(unsafe { sv_verify(p) }, SvStatus::Ok, "{}", last_error());
    unsafe { sv_problem_free(p) };

    let bad = CString::new("solver.alpha = 0.1\n").unwrap();
    let mut out = ptr::NonNull::<SvProblem>::dangling().as_ptr();
    assert_eq!(unsafe { sv_problem_new(bad.as_ptr(), &mut out) }, SvStatus::Config);
    assert!(out.is_null());
    assert!(last_error().contains("alpha >= alpha_G"));

    let invalid = [0xffu8 as c_char, 0];
    assert_eq!(unsafe { sv_problem_new(invalid.as_ptr(), &mut out) }, SvStatus::InvalidUtf8);
    assert_eq!(unsafe { sv_verify(ptr::null()) }, SvStatus::NullPointer);
    unsafe {
        sv_problem_free(ptr::null_mut());
        sv_path_free(ptr::null_mut());
    }
}

#[test]
fn truncated_error_message_reports_full_length() {
    assert_eq!(unsafe { sv_verify(ptr::null()) }, SvStatus::NullPointer);
    let full = unsafe { sv_last_error(ptr::null_mut(), 0) };
    let mut buf = [0 as c_char; 5];
    assert_eq!(unsafe { sv_last_error(buf.as_mut_ptr(), buf.len()) }, full);
    assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_bytes().len(), 4);
}
