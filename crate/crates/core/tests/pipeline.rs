use handik::archive::{read_samples, write_samples};
use handik::detcodec::{decode_joints, recover_translation, solve_root_depth, Annotation2D, Intrinsics, MapStack};
use handik::evalmetrics::evaluate_ik;
use handik::handmodel::{bone_vectors, fk_joints, load_model, normalize_joints, save_model, synth_model, Pose, Shape};
use handik::ikengine::{load_mlp, predict_pose, save_mlp, train, IkSample, Mlp, TrainConfig};
use handik::mocapgen::{gen_samples, synth_pose_library, AugmentConfig, NoiseModel};
use handik::rotmath::{Quaternion, Vec3};
use handik::shapefit::{bone_ratios, fit_shape, ShapeFitConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pose(rng: &mut ChaCha8Rng, joints: usize) -> Pose {
    Pose::new(
        (0..joints)
            .map(|_| {
                let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0).normalize();
                Quaternion::from_axis_angle(&axis, rng.random_range(0.0..0.6))
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn camera_space_hand_is_recovered_from_maps_and_two_pixels() {
    let model = synth_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let k = Intrinsics::new(600.0, 600.0, 320.0, 240.0).unwrap();
    let mut checked = 0;
    for _ in 0..20 {
        let shape = Shape::new((0..10).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let posed = fk_joints(&model, &shape, &random_pose(&mut rng, 21));
        let t = Vec3::new(rng.random_range(-80.0..80.0), rng.random_range(-60.0..60.0), rng.random_range(400.0..900.0));
        let root = model.root_index();
        let cam: Vec<Vec3> = posed.positions.iter().map(|p| p - posed.positions[root] + t).collect();
        let l_ref = posed.reference_length(&model);

        let norm = normalize_joints(&posed, &model).unwrap();
        let grid: Vec<[f64; 2]> =
            (0..21).map(|_| [rng.random_range(0..32) as f64, rng.random_range(0..32) as f64]).collect();
        let bones = bone_vectors(&norm, &model).directions;
        let (maps, _) = MapStack::encode(&Annotation2D::visible(grid), &norm, &bones, 32, 1.0).unwrap();
        let decoded = decode_joints(&maps).unwrap().joints;
        assert_eq!(decoded, norm);

        let uv_root = k.project(&cam[root]);
        let uv_wrist = k.project(&cam[model.wrist_index()]);
        let d_w = decoded.positions[model.wrist_index()].z;
        if d_w.abs() * k.unproject(uv_wrist).norm() >= 1.0 {
            continue;
        }
        let z = solve_root_depth(&k, uv_root, uv_wrist, d_w, l_ref).unwrap();
        let t_hat = recover_translation(&k, uv_root, z).unwrap();
        for (p, q) in decoded.positions.iter().zip(&cam) {
            assert!((p * l_ref + t_hat - q).norm() < 1e-6 * t.z);
        }
        checked += 1;
    }
    assert!(checked >= 15);
}

#[test]
fn shape_is_recovered_from_posed_joints() {
    let model = synth_model(0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ShapeFitConfig { lambda_beta: 1e-8, ..ShapeFitConfig::default() };
    for _ in 0..5 {
        let truth = Shape::new((0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let posed = fk_joints(&model, &truth, &random_pose(&mut rng, 21));
        let fit = fit_shape(&bone_ratios(&posed, &model).unwrap(), &model, &cfg).unwrap();
        assert!(fit.converged);
        let err = fit.beta.beta.iter().zip(&truth.beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "coefficient error {err}");
    }
}

#[test]
fn samples_train_save_reload_and_evaluate() {
    let dir = tempfile::TempDir::new().unwrap();
    let model = synth_model(0);
    save_model(&model, dir.path().join("m.json")).unwrap();
    let model = load_model(dir.path().join("m.json")).unwrap();

    let lib = synth_pose_library(32, &model, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let cfg = AugmentConfig::default();
    let mut samples = gen_samples(&lib, &model, &cfg, None, 0, 96).unwrap();
    samples.extend(gen_samples(&lib, &model, &cfg, Some(&NoiseModel::default()), 0, 32).unwrap());
    let mut bytes = Vec::new();
    write_samples(&mut bytes, &samples).unwrap();
    let samples: Vec<IkSample> = read_samples(bytes.as_slice()).unwrap();

    let mut net = Mlp::with_hidden(252, 32, 4, 84, 1).unwrap();
    let before = evaluate_ik(&net, &samples, &model).unwrap().position_error;
    let history =
        train(&mut net, samples.as_slice(), &model, &TrainConfig { epochs: 30, batch_size: 32, ..Default::default() })
            .unwrap();
    assert!(history.epochs.last().unwrap().loss < history.epochs[0].loss);
    let after = evaluate_ik(&net, &samples, &model).unwrap().position_error;
    assert!(after < before, "{after} vs {before}");

    let path = dir.path().join("net.bin");
    save_mlp(&net, &path).unwrap();
    let back = load_mlp(&path).unwrap();
    let reloaded = evaluate_ik(&back, &samples, &model).unwrap().position_error;
    assert!((reloaded - after).abs() < 1e-4);

    let s = &samples[0];
    let pose = predict_pose(&back, &s.positions, &s.input.rest(), &model).unwrap();
    assert!(pose.rotations.iter().all(|q| q.w >= 0.0 && (q.norm() - 1.0).abs() < 1e-12));
}
