//! Compiles a C program against the generated header and the static library.

use std::path::PathBuf;
use std::process::Command;

fn staticlib() -> PathBuf {
    // integration tests live in <target>/<profile>/deps; the library one level up
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap();
    profile_dir.join("libmrckg_ffi.a")
}

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let lib = staticlib();
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .arg("-std=c11")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success(), "C compile/link failed");
    let out = Command::new(&exe).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "smoke program failed: {stdout} {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout.contains("snapshots=3 entities=60"), "{stdout}");
    assert!(stdout.contains("msg_nonempty=1"), "{stdout}");
}

#[test]
fn header_is_current() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(manifest.join("include/mrckg.h")).unwrap();
    for f in [
        "mrckg_version",
        "mrckg_last_error",
        "mrckg_benchmark_load",
        "mrckg_benchmark_build_synthetic",
        "mrckg_model_score_tails",
        "mrckg_train",
        "mrckg_matrix_summary",
        "mrckg_selfcheck_grad",
    ] {
        assert!(header.contains(f), "{f} missing from header");
    }
    assert!(header.contains("MRCKG_STATUS_BUFFER_TOO_SMALL = 8"));
}
