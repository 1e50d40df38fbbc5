use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tof_forge::classic::{reconstruct, MaskConfig};
use tof_forge::dataset::{generate_samples, random_scene, CorpusSpec, DatasetSample};
use tof_forge::metrics::{evaluate, Classical};
use tof_forge::neural::checkpoint;
use tof_forge::neural::{infer, train, Network, NetworkConfig, Tensor, TrainConfig};
use tof_forge::scene::*;

fn pool(n: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()
}

#[test]
fn noiseless_reconstruction_matches_ray_cast() {
    let cfg = SensorConfig::default().with_size(48, 36).with_exposure(4000.0).noiseless();
    for seed in 0..5 {
        let scene = random_scene(&mut ChaCha8Rng::seed_from_u64(seed));
        let truth = render_depth(&scene, &CameraPose::default(), &cfg).unwrap();
        let depth = reconstruct(&simulate_raw(&scene, &CameraPose::default(), &cfg, seed).unwrap(), &MaskConfig::default());
        assert!(depth.valid_count() > depth.len() / 2);
        for i in 0..depth.len() {
            if depth.valid[i] {
                assert!((depth.depth[i] - truth.depth[i]).abs() < 1e-5, "pixel {i}");
            }
        }
    }
}

#[test]
fn default_shape_chain() {
    let mut net = Network::<f32>::new(NetworkConfig::default(), 0.02, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (y, trace) = net.forward_traced(&Tensor::filled(&[1, 4, 128, 128], 0.1)).unwrap();
    let expect: Vec<(&str, [usize; 3])> = vec![
        ("D1", [64, 64, 64]),
        ("D2", [128, 32, 32]),
        ("D3", [256, 16, 16]),
        ("D4", [256, 8, 8]),
        ("Res", [256, 8, 8]),
        ("U1", [256, 16, 16]),
        ("U2.in", [512, 16, 16]),
        ("U2", [128, 32, 32]),
        ("U3.in", [256, 32, 32]),
        ("U3", [64, 64, 64]),
        ("U4.in", [128, 64, 64]),
        ("U4", [1, 128, 128]),
    ];
    assert_eq!(trace.len(), expect.len());
    for ((name, shape), (en, es)) in trace.iter().zip(&expect) {
        assert_eq!(name, en);
        assert_eq!(&shape[1..], es, "{name}");
    }
    assert!(y.data().iter().all(|v| v.abs() < 1.0));
}

fn tiny_corpus() -> Vec<DatasetSample> {
    let base = SensorConfig::default().with_size(32, 32);
    let spec = CorpusSpec {
        n_scenes: 4,
        short: base.with_exposure(200.0),
        long: base.with_exposure(4000.0),
        mask: MaskConfig::default(),
        split_ratio: 0.75,
        seed: 3,
    };
    generate_samples(&spec).unwrap().into_iter().map(|(s, _)| s).collect()
}

fn tiny_run() -> (Vec<u8>, Vec<u8>) {
    let samples = tiny_corpus();
    let net_cfg = NetworkConfig {
        base_width: 4,
        n_resblocks: 2,
        ..NetworkConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 3,
        crop: 16,
        batch_size: 2,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut out = train(&samples, &samples[..1], &net_cfg, &cfg, |_, _| {}).unwrap();
    let depth = infer(&mut out.network, &samples[0].raw_short).unwrap();
    (checkpoint::encode(&out.network), tof_forge::dataset::encode_depth(&depth))
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let one = pool(1).install(tiny_run);
    let four = pool(4).install(tiny_run);
    assert!(one == four);
    assert!(one == pool(1).install(tiny_run));
}

#[test]
fn small_network_memorizes_one_sample() {
    let base = SensorConfig::default().with_size(32, 32).noiseless();
    let scene = random_scene(&mut ChaCha8Rng::seed_from_u64(8));
    let sample = make_pair(
        &scene,
        &CameraPose::default(),
        &base.with_exposure(200.0),
        &base.with_exposure(4000.0),
        &MaskConfig::default(),
        1,
        0,
    )
    .unwrap();
    let net_cfg = NetworkConfig {
        base_width: 16,
        n_resblocks: 2,
        ..NetworkConfig::default()
    };
    let cfg = TrainConfig {
        flat_epochs: 400,
        epochs: 400,
        crop: 32,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let mut out = train(std::slice::from_ref(&sample), &[], &net_cfg, &cfg, |_, _| {}).unwrap();
    let h = &out.history;
    let ratio = h[h.len() - 1].train_loss / h[0].train_loss;
    assert!(ratio < 0.1, "loss ratio {ratio}");
    let neural = evaluate(&mut out.network, std::slice::from_ref(&sample), 7.5).unwrap();
    let classical = evaluate(&mut Classical { mask: MaskConfig::default() }, std::slice::from_ref(&sample), 7.5).unwrap();
    assert!(neural.mae_cm < classical.mae_cm, "{} vs {}", neural.mae_cm, classical.mae_cm);
}
