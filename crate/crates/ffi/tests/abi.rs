use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use forcegrasp::dataset::{compute_norm_stats, grasp_only, EMBEDDING_DIM};
use forcegrasp::expert::{generate_demonstrations, GenerationConfig};
use forcegrasp::policy::{build_training_pairs, train, ChannelNorm, PolicyConfig, Variant};
use forcegrasp::sim::eval_catalog;
use forcegrasp_ffi::*;

fn berry() -> FgObjectSpec {
    FgObjectSpec {
        rest_width: 22.0,
        mass: 0.005,
        friction_mu: 0.6,
        stiffness_k: 0.15,
        crush_force: 1.8,
        yield_force: 0.6,
        plasticity: 0.6,
    }
}

fn last_error() -> String {
    let p = fg_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_matches_header() {
    assert_eq!(fg_abi_version(), FG_ABI_VERSION);
    let header = std::fs::read_to_string(header_path()).unwrap();
    assert!(header.contains(&format!("#define FG_ABI_VERSION {FG_ABI_VERSION}")));
}

#[test]
fn closing_on_an_object_makes_contact_and_lifts() {
    let spec = berry();
    let mut cfg = fg_sim_config_default();
    cfg.sensor_noise_std = 0.0;
    let mut sim = ptr::null_mut();
    unsafe {
        assert_eq!(fg_sim_new(&spec, &cfg, 30.0, 7, &mut sim), FgStatus::Ok);
        let mut obs = FgObservation::default();
        assert_eq!(fg_sim_observe(sim, 0.15, &mut obs), FgStatus::Ok);
        assert_eq!(obs.contact_force, 0.0);
        for _ in 0..10 {
            let cmd = FgCommand {
                target_aperture: 0.0,
                force_limit: 0.5,
            };
            assert_eq!(fg_sim_step(sim, cmd, &mut obs), FgStatus::Ok);
        }
        let mut state = FgSimState::default();
        assert_eq!(fg_sim_state(sim, &mut state), FgStatus::Ok);
        // stalls where the spring pushes back with the force limit
        assert!((state.true_contact_force - 0.5).abs() < 1e-9);
        assert!(!state.crushed);
        let mut held = false;
        assert_eq!(fg_sim_lift_test(sim, &mut held), FgStatus::Ok);
        assert!(held);
        fg_sim_free(sim);
    }
}

#[test]
fn null_pointers_are_reported() {
    let mut obs = FgObservation::default();
    let status = unsafe { fg_sim_step(ptr::null_mut(), FgCommand::default(), &mut obs) };
    assert_eq!(status, FgStatus::NullPointer);
    assert_eq!(last_error(), "sim is null");
    unsafe {
        fg_sim_free(ptr::null_mut());
        fg_policy_free(ptr::null_mut());
    }
}

#[test]
fn invalid_objects_are_refused() {
    let mut spec = berry();
    spec.yield_force = 5.0;
    let mut sim = ptr::null_mut();
    let status = unsafe { fg_sim_new(&spec, ptr::null(), 30.0, 1, &mut sim) };
    assert_eq!(status, FgStatus::InvalidArgument);
    assert!(sim.is_null());
    let status = unsafe { fg_sim_new(&berry(), ptr::null(), 120.0, 1, &mut sim) };
    assert_eq!(status, FgStatus::InvalidArgument);
    assert!(last_error().contains("start aperture"));
}

#[test]
fn pure_helpers() {
    let mut f = 0.0;
    unsafe {
        assert_eq!(fg_true_contact_force(&berry(), 20.0, &mut f), FgStatus::Ok);
        assert!((f - 0.3).abs() < 1e-12);
        assert_eq!(fg_target_force(0.1, 0.5, 1.2, &mut f), FgStatus::Ok);
        assert!((f - 1.2 * 0.1 * 9.81 / 1.0).abs() < 1e-12);
        assert_eq!(
            fg_target_force(-1.0, 0.5, 1.2, &mut f),
            FgStatus::InvalidArgument
        );
    }
    let text = CString::new("pick up the raspberry").unwrap();
    let mut v = vec![0.0; EMBEDDING_DIM];
    unsafe {
        assert_eq!(
            fg_embed_instruction(text.as_ptr(), v.as_mut_ptr(), v.len()),
            FgStatus::Ok
        );
        assert_eq!(
            fg_embed_instruction(text.as_ptr(), v.as_mut_ptr(), 3),
            FgStatus::BufferTooSmall
        );
    }
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-6);
}

fn small_checkpoint(dir: &Path, variant: Variant) -> PathBuf {
    let seen: Vec<_> = eval_catalog().into_iter().filter(|o| o.seen).collect();
    let demos = generate_demonstrations(&seen, &GenerationConfig::default()).unwrap();
    let episodes = grasp_only(&demos.episodes);
    let stats = compute_norm_stats(&demos.episodes).unwrap();
    let cfg = PolicyConfig {
        hidden: vec![32],
        diffusion_steps: 10,
        train_steps: 20,
        ..PolicyConfig::default()
    };
    let pairs = build_training_pairs(
        &episodes,
        &cfg,
        variant,
        &ChannelNorm::from_stats(&stats, variant),
    );
    let (policy, _) = train(&pairs, variant, &cfg, &stats, 3).unwrap();
    let path = dir.join(format!("{variant}.ckpt"));
    policy.save(&path).unwrap();
    path
}

#[test]
fn policy_round_trip_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    let instruction = CString::new("pick up the tomato").unwrap();
    for variant in [Variant::Forceful, Variant::PositionOnly] {
        let path = CString::new(small_checkpoint(dir.path(), variant).to_str().unwrap()).unwrap();
        let mut policy = ptr::null_mut();
        unsafe {
            assert_eq!(fg_policy_load(path.as_ptr(), &mut policy), FgStatus::Ok);
            let mut info = FgPolicyInfo::default();
            assert_eq!(fg_policy_info(policy, &mut info), FgStatus::Ok);
            assert_eq!(info.obs_dim, variant.obs_dim());
            assert_eq!(info.instruction_dim, EMBEDDING_DIM);
            let window: Vec<f64> = (0..info.obs_horizon)
                .flat_map(|_| [50.0, 0.15, 0.0].into_iter().take(info.obs_dim))
                .collect();
            let mut a = vec![0.0; info.pred_horizon * info.act_dim];
            let mut b = a.clone();
            for out in [&mut a, &mut b] {
                let status = fg_policy_sample(
                    policy,
                    window.as_ptr(),
                    window.len(),
                    instruction.as_ptr(),
                    11,
                    out.as_mut_ptr(),
                    out.len(),
                );
                assert_eq!(status, FgStatus::Ok);
            }
            assert_eq!(a, b);
            assert!(a
                .iter()
                .step_by(info.act_dim)
                .all(|x| (0.0..=85.0).contains(x)));

            let mut cmd = FgCommand::default();
            let status = fg_policy_act(
                policy,
                window.as_ptr(),
                window.len(),
                instruction.as_ptr(),
                11,
                &mut cmd,
            );
            assert_eq!(status, FgStatus::Ok);
            assert_eq!(cmd.target_aperture, a[0]);
            match variant {
                Variant::PositionOnly => {
                    assert_eq!(info.constant_force, 2.0);
                    assert_eq!(cmd.force_limit, 2.0);
                }
                Variant::Forceful => assert!(cmd.force_limit >= 0.15),
            }

            let status = fg_policy_sample(
                policy,
                window.as_ptr(),
                window.len() - 1,
                instruction.as_ptr(),
                11,
                a.as_mut_ptr(),
                a.len(),
            );
            assert_eq!(status, FgStatus::InvalidArgument);
            fg_policy_free(policy);
        }
    }
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let path = CString::new("/nonexistent/forceful.ckpt").unwrap();
    let mut policy = ptr::null_mut();
    let status = unsafe { fg_policy_load(path.as_ptr(), &mut policy) };
    assert_eq!(status, FgStatus::Io);
    assert!(policy.is_null());
    assert!(last_error().contains("nonexistent"));
}

fn header_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/forcegrasp.h")
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = std::env::var("CC").or_else(|_| which_cc()) else {
        eprintln!("no C compiler found, skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"forcegrasp.h\"\n\
         int main(void) {\n\
           FgSimConfig c = fg_sim_config_default();\n\
           FgSim *sim = 0;\n\
           FgObjectSpec s = {22.0, 0.005, 0.6, 0.15, 1.8, 0.6, 0.6};\n\
           if (fg_sim_new(&s, &c, 30.0, 1, &sim) != FG_STATUS_OK) return 1;\n\
           fg_sim_free(sim);\n\
           return fg_abi_version() == FG_ABI_VERSION ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let include = header_path().parent().unwrap().to_path_buf();
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<String, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc.to_string());
        }
    }
    Err(())
}
