//! Compiles a C program against the generated header and the static library.

use std::path::PathBuf;
use std::process::Command;

fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().expect("test binary path");
    // <target>/<profile>/deps/<test binary>
    exe.parent()
        .and_then(|d| d.parent())
        .expect("profile directory")
        .to_path_buf()
}

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let lib = profile_dir().join("libiou_uniform_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler on PATH; skipping");
        return;
    }
    let out_dir = tempfile::tempdir().unwrap();
    let exe = out_dir.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("run cc");
    assert!(status.success(), "C compilation failed");
    let run = Command::new(&exe).output().expect("run smoke binary");
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
