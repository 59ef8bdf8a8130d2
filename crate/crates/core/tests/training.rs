//! Short training runs: reproducibility, checkpoints and output artifacts.

use std::io::Cursor;

use wfs_core::grid::{augment, encode_bvp, make_suite};
use wfs_core::par::Exec;
use wfs_core::rng::StreamKey;
use wfs_core::tensor::{read_checkpoint, write_checkpoint, ForwardCtx, Preset};
use wfs_core::train::{batch_input, train_bnn, train_deterministic, RunManifest, TrainConfig};

fn config(exec: Exec) -> TrainConfig {
    TrainConfig {
        epochs: 4,
        zero_init_epochs: 1,
        batch_size: 4,
        chunk_size: 3,
        exec,
        ..TrainConfig::deterministic()
    }
}

fn dataset() -> (wfs_core::grid::Dataset, wfs_core::physics::PhysicsModel) {
    let specs = make_suite("diffusion-20").unwrap();
    let imgs = specs.iter().take(2).map(|s| encode_bvp(s, 16, 16).unwrap()).collect();
    (augment(imgs, 5).unwrap(), specs[0].physics)
}

#[test]
fn runs_are_reproducible_across_execution_modes() {
    let (data, physics) = dataset();
    let arch = Preset::Diffusion.architecture();
    let a = train_deterministic(&data, physics, arch.clone(), &config(Exec::Sequential)).unwrap();
    let b = train_deterministic(&data, physics, arch, &config(Exec::Parallel)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.network, b.network);
    assert_eq!(a.history.len(), 4);
    assert!(a.history.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn checkpoints_restore_predictions() {
    let (data, physics) = dataset();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 2,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..config(Exec::Sequential)
    };
    let st = train_deterministic(&data, physics, Preset::Diffusion.architecture(), &cfg).unwrap();
    for f in ["epoch-000002.wfsm", "epoch-000004.wfsm", "final.wfsm", "best.wfsm"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let (net, ls) =
        read_checkpoint(std::fs::File::open(dir.path().join("final.wfsm")).unwrap()).unwrap();
    assert_eq!(ls, None);
    let x = batch_input(&[data.record(0)]);
    let ctx = ForwardCtx::new(StreamKey::new(3));
    assert_eq!(net.predict(&x, &ctx).unwrap(), st.network.predict(&x, &ctx).unwrap());

    let manifest = RunManifest::new(&st, &cfg, Some("diffusion-20"), Some("diffusion"));
    let path = dir.path().join("run.json");
    manifest.write(&path).unwrap();
    let back: RunManifest = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(back.history, st.history);
}

#[test]
fn bayesian_warm_start_keeps_means_and_learns_variance() {
    let (data, physics) = dataset();
    let det = train_deterministic(&data, physics, Preset::Diffusion.architecture(), &config(Exec::Parallel))
        .unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::bayesian()
    };
    let arch = Preset::Diffusion.architecture().variational();
    let st = train_bnn(&data, physics, arch, &cfg, Some(&det.network)).unwrap();
    let s2 = st.sigma2().unwrap();
    assert!(s2.is_finite() && s2 > 0.0);
    assert!(st.history.iter().all(|r| r.sigma2.is_some()));
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &st.network, st.log_sigma2).unwrap();
    let (back, ls) = read_checkpoint(Cursor::new(buf)).unwrap();
    assert_eq!(back, st.network);
    assert_eq!(ls, st.log_sigma2);
    // means move by at most a few learning-rate steps
    let mean = st.network.mean_network();
    let x = batch_input(&[data.record(0)]);
    let ctx = ForwardCtx::new(StreamKey::new(1));
    let a = mean.predict(&x, &ctx).unwrap();
    let b = det.network.predict(&x, &ctx).unwrap();
    let drift = a.data.iter().zip(&b.data).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    assert!(drift < 1e-3, "drift {drift}");
}
