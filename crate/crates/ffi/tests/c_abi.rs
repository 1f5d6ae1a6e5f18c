use std::ffi::{CStr, CString};
use std::ptr;

use aimdt_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(aimdt_last_error()) }.to_string_lossy().into_owned()
}

fn small_config() -> *mut AimdtConfig {
    let toml = CString::new(
        "[scenario]\nn_vehicles = 2\n[model]\nstate_dim = 12\naction_dim = 2\nembed_dim = 8\nn_layers = 1\nn_heads = 2\ncontext_len = 4\n[train]\niterations = 1\nsteps = 5\nbatch_size = 4\n[eval]\nn_scenarios = 3\n",
    )
    .unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { aimdt_config_from_toml(toml.as_ptr(), &mut cfg) }, AimdtStatus::Ok, "{}", last_error());
    cfg
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(aimdt_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_hash_and_overrides() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(aimdt_config_default(&mut cfg), AimdtStatus::Ok);
        let mut a = [0 as std::ffi::c_char; 80];
        assert_eq!(aimdt_config_hash(cfg, a.as_mut_ptr(), a.len()), AimdtStatus::Ok);
        let before = CStr::from_ptr(a.as_ptr()).to_owned();
        assert_eq!(before.to_bytes().len(), 32);

        let mut tiny = [0 as std::ffi::c_char; 8];
        assert_eq!(aimdt_config_hash(cfg, tiny.as_mut_ptr(), tiny.len()), AimdtStatus::BufferTooSmall);

        let set = CString::new("reward.c1=2.0").unwrap();
        assert_eq!(aimdt_config_set(cfg, set.as_ptr()), AimdtStatus::Ok);
        assert_eq!(aimdt_config_hash(cfg, a.as_mut_ptr(), a.len()), AimdtStatus::Ok);
        assert_ne!(CStr::from_ptr(a.as_ptr()), before.as_c_str());

        let bad = CString::new("world.dt=-1").unwrap();
        assert_eq!(aimdt_config_set(cfg, bad.as_ptr()), AimdtStatus::Config);
        assert!(!last_error().is_empty());
        aimdt_config_free(cfg);
    }
}

#[test]
fn null_arguments_are_reported() {
    unsafe {
        assert_eq!(aimdt_config_default(ptr::null_mut()), AimdtStatus::NullPointer);
        assert!(last_error().contains("null"));
        let mut cfg = ptr::null_mut();
        assert_eq!(aimdt_config_from_toml(ptr::null(), &mut cfg), AimdtStatus::NullPointer);
        assert!(cfg.is_null());
        assert_eq!(aimdt_dataset_len(ptr::null()), 0);
        assert!(aimdt_model_return_mean(ptr::null()).is_nan());
        aimdt_config_free(ptr::null_mut());
        aimdt_dataset_free(ptr::null_mut());
        aimdt_model_free(ptr::null_mut());
    }
}

#[test]
fn bad_toml_and_missing_files_fail_cleanly() {
    unsafe {
        let mut cfg = ptr::null_mut();
        let toml = CString::new("[world\n").unwrap();
        assert_eq!(aimdt_config_from_toml(toml.as_ptr(), &mut cfg), AimdtStatus::Config);
        let path = CString::new("/nonexistent/x.ckpt").unwrap();
        let mut m = ptr::null_mut();
        let status = aimdt_model_load(path.as_ptr(), &mut m);
        assert!(matches!(status, AimdtStatus::Io | AimdtStatus::Checkpoint | AimdtStatus::Path), "{status:?}");
        assert!(m.is_null());
        let mut ds = ptr::null_mut();
        assert_ne!(aimdt_dataset_read(path.as_ptr(), &mut ds), AimdtStatus::Ok);
    }
}

#[test]
fn rtgs_match_suffix_sums() {
    let rewards = [1.0, -2.0, 0.5, 3.0];
    let mut out = [0.0; 4];
    unsafe {
        assert_eq!(aimdt_compute_rtgs(rewards.as_ptr(), 4, out.as_mut_ptr()), AimdtStatus::Ok);
    }
    assert_eq!(out, [2.5, 1.5, 3.5, 3.0]);
    let mut inplace = rewards;
    unsafe {
        assert_eq!(aimdt_compute_rtgs(inplace.as_ptr(), 4, inplace.as_mut_ptr()), AimdtStatus::Ok);
        assert_eq!(aimdt_compute_rtgs(ptr::null(), 0, ptr::null_mut()), AimdtStatus::Ok);
        assert_eq!(aimdt_compute_rtgs(ptr::null(), 2, out.as_mut_ptr()), AimdtStatus::NullPointer);
    }
    assert_eq!(inplace, out);
}

#[test]
fn generate_train_save_load_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = CString::new(dir.path().join("d.bin").to_str().unwrap()).unwrap();
    let ckpt_path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    unsafe {
        let cfg = small_config();
        let mut ds = ptr::null_mut();
        assert_eq!(aimdt_dataset_generate(cfg, 1, 3, &mut ds), AimdtStatus::Ok, "{}", last_error());
        assert_eq!(aimdt_dataset_len(ds), 16);
        assert_eq!(aimdt_dataset_write(ds, data_path.as_ptr()), AimdtStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(aimdt_dataset_read(data_path.as_ptr(), &mut back), AimdtStatus::Ok);
        assert_eq!(aimdt_dataset_len(back), 16);

        let mut model = ptr::null_mut();
        assert_eq!(aimdt_model_train(cfg, back, &mut model), AimdtStatus::Ok, "{}", last_error());
        assert!(aimdt_model_return_mean(model).is_finite());
        assert_eq!(aimdt_model_save(model, ckpt_path.as_ptr()), AimdtStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(aimdt_model_load(ckpt_path.as_ptr(), &mut loaded), AimdtStatus::Ok);

        let mut a = AimdtMetrics::default();
        let mut b = AimdtMetrics::default();
        assert_eq!(aimdt_eval_plain(model, cfg, 1, &mut a), AimdtStatus::Ok, "{}", last_error());
        assert_eq!(aimdt_eval_plain(loaded, cfg, 1, &mut b), AimdtStatus::Ok);
        assert_eq!(a.n_episodes, 3);
        assert_eq!(a.avg_length_s.to_bits(), b.avg_length_s.to_bits());
        assert!(a.max_rtg_error < 1e-9);

        let mut wide = ptr::null_mut();
        assert_eq!(aimdt_config_default(&mut wide), AimdtStatus::Ok);
        assert_eq!(aimdt_eval_plain(model, wide, 1, &mut a), AimdtStatus::InvalidInput, "{}", last_error());

        let mut makespan = 0.0;
        assert_eq!(aimdt_optimal_makespan(cfg, 2, 4, &mut makespan), AimdtStatus::Ok);
        assert!(makespan > 0.0);

        for h in [ds, back] {
            aimdt_dataset_free(h);
        }
        aimdt_model_free(model);
        aimdt_model_free(loaded);
        aimdt_config_free(cfg);
        aimdt_config_free(wide);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/aimdt.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ AimdtConfig *c = 0; AimdtStatus s = aimdt_config_default(&c); aimdt_config_free(c); return s == AIMDT_STATUS_OK ? 0 : 1; }}\n"
        ),
    )
    .unwrap();
    let status = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"])
        .arg(&src)
        .status();
    match status {
        Ok(s) => assert!(s.success(), "header does not compile"),
        Err(e) => eprintln!("no C compiler available ({e}); header check skipped"),
    }
}
