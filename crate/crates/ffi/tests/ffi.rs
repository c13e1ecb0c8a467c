use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use graysim::neural::{save_model, Activation, Mlp};
use graysim_ffi::*;

const DIVIDER: &str =
    "units si\nnode a\nnode b\nvsource v1 a 0 1\nresistor r1 a b 1000\nresistor r2 b 0 1000\nanalysis dc\n";
const RC: &str =
    "units si\nnode a\nresistor r1 a 0 1000\ncapacitor c1 a 0 1e-3\nic a 1\nanalysis tran dt=1e-3 tend=1\n";

fn last_error() -> String {
    let p = gs_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn parse(text: &str) -> Result<*mut GsSystem, GsStatus> {
    let text = CString::new(text).unwrap();
    let mut sys = ptr::null_mut();
    match unsafe { gs_system_parse(text.as_ptr(), ptr::null(), &mut sys) } {
        GsStatus::Ok => Ok(sys),
        s => Err(s),
    }
}

#[test]
fn divider_dc_through_handles() {
    let sys = parse(DIVIDER).unwrap();
    unsafe {
        let n = gs_system_len(sys);
        assert_eq!(n, 3);
        let mut z = vec![0.0; n];
        let mut iters = 0;
        assert_eq!(gs_system_dc(sys, z.as_mut_ptr(), n, &mut iters), GsStatus::Ok);
        let mut names = Vec::new();
        for i in 0..n {
            let mut buf = [0 as std::ffi::c_char; 32];
            let mut needed = 0;
            assert_eq!(
                gs_system_unknown_name(sys, i, buf.as_mut_ptr(), buf.len(), &mut needed),
                GsStatus::Ok
            );
            names.push(CStr::from_ptr(buf.as_ptr()).to_str().unwrap().to_string());
            assert_eq!(needed, names[i].len() + 1);
        }
        let b = names.iter().position(|s| s == "v(b)").unwrap();
        assert!((z[b] - 0.5).abs() < 1e-12);
        assert!(iters >= 1);
        gs_system_free(sys);
    }
}

#[test]
fn rc_transient_trajectory() {
    let sys = parse(RC).unwrap();
    unsafe {
        let mut traj = ptr::null_mut();
        assert_eq!(gs_system_tran(sys, &mut traj), GsStatus::Ok);
        let len = gs_trajectory_len(traj);
        assert_eq!(len, 1001);
        let (mut t, mut z) = (0.0, [0.0]);
        assert_eq!(
            gs_trajectory_point(traj, len - 1, &mut t, z.as_mut_ptr(), 1),
            GsStatus::Ok
        );
        assert!((t - 1.0).abs() < 1e-12);
        assert!((z[0] - (-1.0f64).exp()).abs() < 1e-6);
        assert_eq!(
            gs_trajectory_point(traj, len, &mut t, z.as_mut_ptr(), 1),
            GsStatus::Dimension
        );
        gs_trajectory_free(traj);
        gs_system_free(sys);
    }
}

#[test]
fn parse_errors_carry_positions() {
    let err = parse("units si\nnode a\nresistr r1 a 0 5\nanalysis dc\n").unwrap_err();
    assert_eq!(err, GsStatus::Parse);
    let (mut line, mut col) = (0, 0);
    assert_eq!(unsafe { gs_last_error_position(&mut line, &mut col) }, 1);
    assert_eq!((line, col), (3, 1));
    assert!(last_error().contains("resistr"));

    let err = parse("units si\nnode a\nnode b\nvsource v1 a 0 1\nvsource v2 a 0 2\nresistor r b 0 1\nanalysis dc\n")
        .unwrap_err();
    assert_eq!(err, GsStatus::Build);
    assert_eq!(unsafe { gs_last_error_position(&mut line, &mut col) }, 0);
}

#[test]
fn null_and_size_errors() {
    unsafe {
        let mut sys = ptr::null_mut();
        assert_eq!(
            gs_system_parse(ptr::null(), ptr::null(), &mut sys),
            GsStatus::NullArgument
        );
        assert!(last_error().contains("null"));
        assert_eq!(gs_system_len(ptr::null()), 0);
        gs_system_free(ptr::null_mut());
        let sys = parse(DIVIDER).unwrap();
        let mut z = [0.0; 2];
        assert_eq!(
            gs_system_dc(sys, z.as_mut_ptr(), 2, ptr::null_mut()),
            GsStatus::Dimension
        );
        let mut needed = 0;
        assert_eq!(
            gs_system_unknown_name(sys, 0, ptr::null_mut(), 0, &mut needed),
            GsStatus::Dimension
        );
        assert!(needed > 1);
        let missing = CString::new("/nonexistent/x.net").unwrap();
        let mut other = ptr::null_mut();
        assert_eq!(gs_system_load(missing.as_ptr(), &mut other), GsStatus::Io);
        gs_system_free(sys);
    }
}

#[test]
fn successful_call_clears_the_error() {
    assert!(parse("bogus\n").is_err());
    let sys = parse(DIVIDER).unwrap();
    assert!(gs_last_error().is_null());
    unsafe { gs_system_free(sys) };
}

#[test]
fn model_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gsnn");
    let net = Mlp::random(&[3, 8, 2], &[Activation::Tanh, Activation::Identity], 9).unwrap();
    save_model(&net, &path).unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(gs_model_load(c_path.as_ptr(), &mut m), GsStatus::Ok);
        assert_eq!((gs_model_input_dim(m), gs_model_output_dim(m)), (3, 2));
        let x = [0.1, -0.4, 0.7];
        let mut y = [0.0; 2];
        assert_eq!(gs_model_forward(m, x.as_ptr(), 3, y.as_mut_ptr(), 2), GsStatus::Ok);
        assert_eq!(y.to_vec(), net.forward(&x).unwrap());
        let mut j = [0.0; 6];
        assert_eq!(
            gs_model_input_jacobian(m, x.as_ptr(), 3, j.as_mut_ptr(), 6),
            GsStatus::Ok
        );
        assert_eq!(j.as_slice(), net.input_jacobian(&x).unwrap().as_slice());
        assert_eq!(
            gs_model_forward(m, x.as_ptr(), 2, y.as_mut_ptr(), 2),
            GsStatus::Dimension
        );
        gs_model_free(m);
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/graysim.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "gs_system_load",
        "gs_system_dc",
        "gs_model_forward",
        "gs_last_error",
        "GS_STATUS_PANIC",
    ] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"graysim.h\"\nint probe(void) {\n  GsSystem *s = 0;\n  GsStatus st = gs_system_parse(\"analysis dc\", 0, &s);\n  size_t n = gs_system_len(s);\n  gs_system_free(s);\n  return (int)st + (int)n;\n}\n",
    )
    .unwrap();
    for (compiler, extra) in [("cc", &["-x", "c", "-std=c99"][..]), ("c++", &["-x", "c++"][..])] {
        let Ok(out) = Command::new(compiler)
            .args(extra)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
            .arg(header.parent().unwrap())
            .arg(&src)
            .output()
        else {
            eprintln!("{compiler} not available; header syntax check skipped");
            continue;
        };
        assert!(
            out.status.success(),
            "{compiler}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}
