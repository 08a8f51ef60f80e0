use std::ffi::{CStr, CString};
use std::ptr;

use vaoi_core::agents::{Algo, Trainer};
use vaoi_core::diffusion::DiffusionArch;
use vaoi_core::env::EnvConfig;
use vaoi_core::harness::ExperimentConfig;
use vaoi_ffi::*;

fn last_error() -> String {
    let p = vaoi_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_env(rates: &[f64], p: f64, seed: u64) -> *mut VaoiEnv {
    let mut env = ptr::null_mut();
    let s = unsafe { vaoi_env_new(rates.as_ptr(), rates.len(), p, 50, 0.85, seed, &mut env) };
    assert_eq!(s, VaoiStatus::Ok);
    env
}

#[test]
fn env_round_trip() {
    let env = new_env(&[1.0, 1.0], 1.0, 3);
    unsafe {
        assert_eq!(vaoi_env_n_users(env), 2);
        let mut step = VaoiStep::default();
        assert_eq!(vaoi_env_step(env, 0, 0.5, &mut step), VaoiStatus::Ok);
        assert_eq!((step.cost, step.delivered, step.slot), (0, 0, 1));
        let mut v = [9u32; 2];
        assert_eq!(vaoi_env_vaoi(env, v.as_mut_ptr(), 2), VaoiStatus::Ok);
        assert_eq!(v, [1, 1]);
        assert_eq!(vaoi_env_step(env, 2, 0.5, &mut step), VaoiStatus::Ok);
        assert_eq!((step.cost, step.delivered), (1, 1));
        assert_eq!(step.reward, -2.5);
        assert_eq!(vaoi_env_vaoi(env, v.as_mut_ptr(), 2), VaoiStatus::Ok);
        assert_eq!(v, [2, 1]);
        assert_eq!(vaoi_env_step(env, 3, 0.0, ptr::null_mut()), VaoiStatus::InvalidArgument);
        assert!(last_error().contains("action 3"));
        assert_eq!(vaoi_env_vaoi(env, v.as_mut_ptr(), 1), VaoiStatus::InvalidArgument);
        assert_eq!(vaoi_env_reset(env, 3), VaoiStatus::Ok);
        assert_eq!(vaoi_env_vaoi(env, v.as_mut_ptr(), 2), VaoiStatus::Ok);
        assert_eq!(v, [0, 0]);
        vaoi_env_free(env);
    }
}

#[test]
fn env_matches_core_simulator() {
    let rates = [0.75, 0.3, 0.5];
    let env = new_env(&rates, 0.9, 11);
    let mut core = vaoi_core::env::StatusUpdateEnv::new(
        EnvConfig { arrival_rates: rates.to_vec(), ..EnvConfig::uniform(3, 0.0, 0.9, 0.85) },
        11,
    )
    .unwrap();
    let mut v = [0u32; 3];
    for t in 0..200 {
        let a = t % 4;
        let out = core.step(a, 0.2).unwrap();
        let mut step = VaoiStep::default();
        unsafe {
            assert_eq!(vaoi_env_step(env, a, 0.2, &mut step), VaoiStatus::Ok);
            assert_eq!(vaoi_env_vaoi(env, v.as_mut_ptr(), 3), VaoiStatus::Ok);
        }
        assert_eq!(step.reward, out.reward);
        assert_eq!(v.to_vec(), out.next_state.vaoi);
    }
    unsafe { vaoi_env_free(env) };
}

#[test]
fn bad_arguments_report_codes() {
    let mut env = ptr::null_mut();
    unsafe {
        let rates = [0.5];
        assert_eq!(vaoi_env_new(rates.as_ptr(), 1, 1.5, 50, 0.85, 0, &mut env), VaoiStatus::InvalidConfig);
        assert!(env.is_null());
        assert_eq!(vaoi_env_new(ptr::null(), 2, 0.9, 50, 0.85, 0, &mut env), VaoiStatus::NullPointer);
        assert_eq!(vaoi_env_step(ptr::null_mut(), 0, 0.0, ptr::null_mut()), VaoiStatus::NullPointer);
        assert_eq!(vaoi_env_n_users(ptr::null()), 0);
        vaoi_env_free(ptr::null_mut());
        vaoi_policy_free(ptr::null_mut());
        let mut pol = ptr::null_mut();
        let missing = CString::new("/nonexistent/ckpt.json").unwrap();
        assert_eq!(vaoi_policy_load(missing.as_ptr(), 0, &mut pol), VaoiStatus::Io);
        assert!(pol.is_null());
    }
    let v = unsafe { CStr::from_ptr(vaoi_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn metrics() {
    let xs = [0.0, 0.0, 0.0, 4.0];
    let acts = [0usize, 1, 2, 0];
    let mut out = 0.0;
    unsafe {
        assert_eq!(vaoi_empirical_cvar(xs.as_ptr(), 4, 0.5, &mut out), VaoiStatus::Ok);
        assert_eq!(out, 2.0);
        assert_eq!(vaoi_average_cost(acts.as_ptr(), 4, &mut out), VaoiStatus::Ok);
        assert_eq!(out, 0.5);
        assert_eq!(vaoi_empirical_cvar(xs.as_ptr(), 4, 1.0, &mut out), VaoiStatus::InvalidArgument);
        assert_eq!(vaoi_average_cost(acts.as_ptr(), 0, &mut out), VaoiStatus::InvalidArgument);
    }
}

#[test]
fn policy_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.train.diffusion_arch = DiffusionArch::tiny(8);
    let env = EnvConfig::uniform(3, 0.75, 0.9, 0.85).with_d_max(10);
    let trainer = Trainer::new(Algo::D2sac, env, cfg.train, 5).unwrap();
    let path = dir.path().join("ckpt.json");
    std::fs::write(&path, serde_json::to_string(&trainer.checkpoint()).unwrap()).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut pol = ptr::null_mut();
    unsafe {
        assert_eq!(vaoi_policy_load(cpath.as_ptr(), 1, &mut pol), VaoiStatus::Ok);
        assert_eq!(vaoi_policy_n_users(pol), 3);
        let state = [4u32, 0, 9];
        let mut probs = [0.0; 4];
        assert_eq!(vaoi_policy_probs(pol, state.as_ptr(), 3, probs.as_mut_ptr(), 4), VaoiStatus::Ok);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut a = 99;
        for greedy in [0, 1] {
            assert_eq!(vaoi_policy_action(pol, state.as_ptr(), 3, greedy, &mut a), VaoiStatus::Ok);
            assert!(a <= 3);
        }
        assert_eq!(vaoi_policy_action(pol, state.as_ptr(), 2, 1, &mut a), VaoiStatus::Mismatch);
        assert_eq!(vaoi_policy_probs(pol, state.as_ptr(), 3, probs.as_mut_ptr(), 3), VaoiStatus::InvalidArgument);
        vaoi_policy_free(pol);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/vaoi.h")).unwrap();
    for name in [
        "vaoi_last_error",
        "vaoi_env_new",
        "vaoi_env_step",
        "vaoi_env_free",
        "vaoi_policy_load",
        "vaoi_policy_action",
        "vaoi_empirical_cvar",
        "VAOI_STATUS_MISMATCH",
        "typedef struct VaoiEnv VaoiEnv",
    ] {
        assert!(header.contains(name), "{name}");
    }
}
