//! Compiles a C program against the generated header and links it to the
//! static library built alongside this test.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "codistill.h"

int main(void) {
    double losses[3] = {0.5, 0.25, 0.25};
    size_t teacher = 99;
    if (cd_elect_teacher(losses, 3, &teacher) != CD_STATUS_OK || teacher != 1) return 1;

    CdNetwork *net = NULL;
    const char *arch = "{\"kind\":\"mlp\",\"input_shape\":[2],\"layer_sizes\":[4],\"num_classes\":2}";
    if (cd_network_init(arch, 1, 0, &net) != CD_STATUS_OK) return 2;
    double x[2] = {0.5, -0.5}, p[2];
    if (cd_network_forward(net, x, 1, p, 2) != CD_STATUS_OK) return 3;
    cd_network_free(net);
    if (p[0] + p[1] < 0.999999 || p[0] + p[1] > 1.000001) return 4;

    CdConfig *cfg = NULL;
    if (cd_config_from_toml("cohort = 3", &cfg) != CD_STATUS_CONFIG) return 5;
    if (cd_last_error() == NULL || strlen(cd_last_error()) == 0) return 6;
    printf("ok %s\n", cd_version());
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // <target>/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links() {
    let lib = target_dir().join("libcodistill_ffi.a");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if !lib.exists() || Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let work = tempfile::tempdir().unwrap();
    let src = work.path().join("smoke.c");
    let exe = work.path().join("smoke");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success(), "C compile/link failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "smoke exited with {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
