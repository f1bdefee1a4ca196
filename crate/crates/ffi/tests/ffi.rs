use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use lmc::encoder::{forward, init_params, EncoderConfig};
use lmc::manifold::generate_synthetic_dataset;
use lmc::stain_math::{angle_deg, RgbPatch, StainBasis};
use lmc_ffi::*;

fn interleaved(p: &RgbPatch) -> Vec<u8> {
    p.pixels().iter().flatten().copied().collect()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(lmc_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn tiny_handle() -> *mut LmcEncoder {
    let mut h = ptr::null_mut();
    let st = unsafe { lmc_encoder_init(2, 1, 16, 8, 32, 4, 0, 0, &mut h) };
    assert_eq!(st, LmcStatus::Ok, "{}", last_error());
    h
}

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(lmc_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn embed_matches_library() {
    let h = tiny_handle();
    assert_eq!(unsafe { lmc_encoder_embed_dim(h) }, 16);
    assert_eq!(unsafe { lmc_encoder_input_side(h) }, 32);
    let ds = generate_synthetic_dataset(4, 3, 32, &StainBasis::reference(), 2).unwrap();
    let patches: Vec<RgbPatch> = ds.items().iter().map(|i| i.patch.clone()).collect();
    let bytes: Vec<u8> = patches.iter().flat_map(interleaved).collect();
    let mut out = vec![0.0; 3 * 16];
    let st = unsafe { lmc_encoder_embed(h, bytes.as_ptr(), 3, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, LmcStatus::Ok);
    let expected = forward(&init_params(&EncoderConfig::tiny()).unwrap(), &patches).unwrap();
    assert_eq!(out, expected.values());

    let mut short = vec![0.0; 10];
    let st = unsafe { lmc_encoder_embed(h, bytes.as_ptr(), 3, short.as_mut_ptr(), short.len()) };
    assert_eq!(st, LmcStatus::Config);
    assert!(last_error().contains("need 48"));
    unsafe { lmc_encoder_free(h) };
}

#[test]
fn save_load_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.ckpt");
    let h = tiny_handle();
    assert_eq!(unsafe { lmc_encoder_save(h, c_path(&path).as_ptr()) }, LmcStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { lmc_encoder_load(c_path(&path).as_ptr(), &mut back) }, LmcStatus::Ok);
    let img = vec![200u8; 32 * 32 * 3];
    let (mut a, mut b) = (vec![0.0; 16], vec![0.0; 16]);
    unsafe {
        lmc_encoder_embed(h, img.as_ptr(), 1, a.as_mut_ptr(), 16);
        lmc_encoder_embed(back, img.as_ptr(), 1, b.as_mut_ptr(), 16);
        lmc_encoder_free(h);
        lmc_encoder_free(back);
    }
    assert_eq!(a, b);

    let mut none = ptr::null_mut();
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(unsafe { lmc_encoder_load(c_path(&missing).as_ptr(), &mut none) }, LmcStatus::Io);
    std::fs::write(&missing, b"not a checkpoint").unwrap();
    assert_eq!(unsafe { lmc_encoder_load(c_path(&missing).as_ptr(), &mut none) }, LmcStatus::Format);
    assert!(last_error().contains("magic"), "{}", last_error());
    assert!(none.is_null());
}

#[test]
fn null_and_invalid_arguments() {
    assert_eq!(unsafe { lmc_encoder_load(ptr::null(), &mut ptr::null_mut()) }, LmcStatus::NullPointer);
    assert!(last_error().contains("null"));
    assert_eq!(unsafe { lmc_encoder_embed_dim(ptr::null()) }, 0);
    unsafe { lmc_encoder_free(ptr::null_mut()) };
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { lmc_encoder_init(2, 5, 16, 8, 32, 4, 0, 0, &mut h) }, LmcStatus::Config);
    assert!(h.is_null());
}

#[test]
fn stain_basis_and_augment() {
    let ds = generate_synthetic_dataset(9, 1, 32, &StainBasis::reference(), 2).unwrap();
    let p = &ds.items()[0].patch;
    let rgb = interleaved(p);
    let (mut h, mut e) = ([0.0; 3], [0.0; 3]);
    let st = unsafe { lmc_estimate_stain_basis(rgb.as_ptr(), 32, 32, h.as_mut_ptr(), e.as_mut_ptr()) };
    assert_eq!(st, LmcStatus::Ok, "{}", last_error());
    let r = StainBasis::reference();
    assert!(angle_deg(&h, &r.h()) < 2.0 && angle_deg(&e, &r.e()) < 2.0);

    let mut out = vec![0u8; rgb.len()];
    let st = unsafe {
        lmc_augment_rgb(rgb.as_ptr(), 32, 32, r.h().as_ptr(), r.e().as_ptr(), 1.0, 1.0, out.as_mut_ptr())
    };
    assert_eq!(st, LmcStatus::Ok);
    let mae = rgb.iter().zip(&out).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>() / rgb.len() as f64;
    assert!(mae <= 2.0, "{mae}");

    let st = unsafe { lmc_augment_rgb(rgb.as_ptr(), 32, 32, r.h().as_ptr(), ptr::null(), 1.0, 1.0, out.as_mut_ptr()) };
    assert_eq!(st, LmcStatus::Config);
    let white = vec![255u8; 16 * 16 * 3];
    let st = unsafe { lmc_estimate_stain_basis(white.as_ptr(), 16, 16, h.as_mut_ptr(), e.as_mut_ptr()) };
    assert_eq!(st, LmcStatus::Data);
}

#[test]
fn loss_and_w2() {
    let z1 = [1.0, 0.0, 0.0, 1.0];
    let z2 = [1.0, 1.0, 0.0, 1.0];
    let mut br = LmcLossBreakdown::default();
    assert_eq!(unsafe { lmc_loss(z1.as_ptr(), z2.as_ptr(), 2, 2, 0.005, &mut br) }, LmcStatus::Ok);
    let inv = (1.0 - 1.0 / 2f64.sqrt()).powi(2);
    assert!((br.invariance - inv).abs() < 1e-12);
    assert!((br.redundancy - 0.5).abs() < 1e-12);
    assert!((br.total - (inv + 0.0025)).abs() < 1e-12);

    let a = [-1.0, 1.0];
    let b = [2.0, 4.0];
    let mut w = 0.0;
    assert_eq!(unsafe { lmc_w2_distance(a.as_ptr(), 2, b.as_ptr(), 2, 1, &mut w) }, LmcStatus::Ok);
    assert!((w - 3.0).abs() < 1e-9, "{w}");
    assert_eq!(unsafe { lmc_w2_distance(a.as_ptr(), 1, b.as_ptr(), 2, 1, &mut w) }, LmcStatus::Config);
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/lmc.h")
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "lmc.h"
int main(void) {
    LmcEncoder *enc = NULL;
    if (lmc_encoder_init(2, 1, 16, 8, 32, 4, 0, 0, &enc) != LMC_STATUS_OK) return 1;
    unsigned char img[32 * 32 * 3];
    for (int i = 0; i < 32 * 32 * 3; i++) img[i] = (unsigned char)(i % 251);
    double z[16];
    if (lmc_encoder_embed(enc, img, 1, z, 16) != LMC_STATUS_OK) return 2;
    lmc_encoder_free(enc);
    LmcLossBreakdown br;
    double a[4] = {1, 0, 0, 1};
    if (lmc_loss(a, a, 2, 2, 0.005, &br) != LMC_STATUS_OK || br.total != 0.0) return 3;
    if (lmc_encoder_load(NULL, &enc) != LMC_STATUS_NULL_POINTER) return 4;
    printf("%s %.6f\n", lmc_version(), z[0]);
    return 0;
}
"#;

fn have_cc() -> bool {
    Command::new("cc").arg("--version").output().is_ok()
}

#[test]
fn header_compiles_as_c() {
    if !have_cc() {
        eprintln!("cc not found; skipping header compile check");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let inc = header().parent().unwrap().to_path_buf();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&inc)
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

/// Links the C program against the static library when cargo has built it
/// next to this test binary.
#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let lib = exe.parent().unwrap().parent().unwrap().join("liblmc_ffi.a");
    if !have_cc() || !lib.exists() {
        eprintln!("cc or {} missing; skipping link check", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let bin = dir.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let inc = header().parent().unwrap().to_path_buf();
    let out = Command::new("cc")
        .args(["-std=c99", "-I"])
        .arg(&inc)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    let text = String::from_utf8_lossy(&run.stdout);
    assert!(text.starts_with(env!("CARGO_PKG_VERSION")), "{text}");
}
