use flamegs::camera::{CameraRig, CameraView, Intrinsics, Pose, PoseDelta, RigCamera};
use flamegs::grid::GridSpec;
use flamegs::io::*;
use flamegs::phantom::{generate, PhantomConfig};
use flamegs::{Gaussian3D, GaussianSet, Image};
use nalgebra::{Vector3, Vector4};
use proptest::prelude::*;

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn arb_gaussian(sh_degree: u32) -> impl Strategy<Value = Gaussian3D> {
    let n = flamegs::sh::coeff_count(sh_degree);
    (
        prop::array::uniform3(-5.0f64..5.0),
        prop::array::uniform3(-6.0f64..1.0),
        prop::array::uniform4(-1.0f64..1.0),
        -8.0f64..8.0,
        prop::collection::vec(-2.0f64..2.0, n),
    )
        .prop_filter("nonzero quaternion", |(_, _, q, _, _)| q.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        .prop_map(|(p, s, q, o, sh)| Gaussian3D {
            position: Vector3::from(p),
            log_scale: Vector3::from(s),
            rotation: Vector4::from(q),
            opacity_logit: o,
            sh_coeffs: sh,
        })
}

proptest! {
    #[test]
    fn flgs_round_trip_is_exact_at_f32(deg in 0u32..=2, gs in prop::collection::vec(arb_gaussian(2), 0..20)) {
        let n = flamegs::sh::coeff_count(deg);
        let gs: Vec<_> = gs.into_iter().map(|mut g| { g.sh_coeffs.truncate(n); g }).collect();
        let set = GaussianSet::new(gs, deg).unwrap();
        let bytes = encode_flgs(&set);
        prop_assert_eq!(bytes.len(), 16 + set.len() * 4 * (11 + n));
        let back = decode_flgs(&bytes).unwrap();
        prop_assert_eq!(back.sh_degree, deg);
        prop_assert_eq!(back.len(), set.len());
        for (a, b) in set.gaussians.iter().zip(&back.gaussians) {
            prop_assert_eq!(a.position.map(f32_round), b.position);
            prop_assert_eq!(a.log_scale.map(f32_round), b.log_scale);
            prop_assert_eq!(a.rotation.map(f32_round), b.rotation);
            prop_assert_eq!(f32_round(a.opacity_logit), b.opacity_logit);
            let sh: Vec<f64> = a.sh_coeffs.iter().map(|v| f32_round(*v)).collect();
            prop_assert_eq!(&sh, &b.sh_coeffs);
        }
        // a decoded snapshot re-encodes to the same bytes
        prop_assert_eq!(encode_flgs(&back), bytes);
    }

    #[test]
    fn pgm_round_trip_within_half_a_level(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let im = Image::from_fn(w, h, |_, _| rng.random_range(0.0..1.0));
        let back = decode_pgm(&encode_pgm(&im)).unwrap();
        for (a, b) in im.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }
}

#[test]
fn flgs_header_layout() {
    let set = GaussianSet::new(vec![Gaussian3D::isotropic(Vector3::new(1.0, 2.0, 3.0), 0.5, 0.5, 0.5, 1)], 1).unwrap();
    let bytes = encode_flgs(&set);
    assert_eq!(&bytes[0..4], b"FLGS");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
    assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1.0);
    assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), 3.0);
    // log_scale, then quaternion w
    assert_eq!(f32::from_le_bytes(bytes[28..32].try_into().unwrap()), 0.5f64.ln() as f32);
    assert_eq!(f32::from_le_bytes(bytes[40..44].try_into().unwrap()), 1.0);
}

#[test]
fn flvl_and_floc_round_trip() {
    let spec = GridSpec::new([3, 4, 5], Vector3::new(-1.0, -0.5, 0.0), Vector3::new(1.0, 0.5, 2.5)).unwrap();
    let values: Vec<f64> = (0..60).map(|i| i as f64 * 0.25).collect();
    let bytes = encode_flvl(&spec, &values).unwrap();
    assert_eq!(bytes.len(), 4 + 12 + 24 + 240);
    let (s2, v2) = decode_flvl(&bytes).unwrap();
    assert_eq!(s2, spec);
    assert_eq!(v2, values);

    let counts: Vec<u32> = (0..60).map(|i| i * 7).collect();
    let (s3, c3) = decode_floc(&encode_floc(&spec, &counts).unwrap()).unwrap();
    assert_eq!(s3, spec);
    for (a, b) in counts.iter().zip(&c3) {
        assert_eq!(*b as u32, (*a).min(255));
    }
    assert!(encode_flvl(&spec, &values[..59]).is_err());
    assert!(decode_flvl(&bytes[..bytes.len() - 2]).is_err());
}

fn sample_rig() -> CameraRig {
    let intr = Intrinsics {
        fx: 120.5,
        fy: 119.25,
        cx: 31.5,
        cy: 24.0,
        width: 64,
        height: 48,
    };
    CameraRig {
        cameras: (0..3)
            .map(|k| RigCamera {
                id: format!("c{k}"),
                intrinsics: intr,
                pose: Pose::look_at(&Vector3::new(k as f64, 0.3, -2.0), &Vector3::zeros(), &Vector3::y()),
            })
            .collect(),
    }
}

#[test]
fn rig_json_round_trip_is_exact() {
    let rig = sample_rig();
    let back = rig_from_json(&rig_to_json(&rig).unwrap()).unwrap();
    assert_eq!(back, rig);
}

#[test]
fn rig_json_rejects_duplicate_ids() {
    let mut rig = sample_rig();
    rig.cameras[1].id = "c0".into();
    let text = rig_to_json(&CameraRig { cameras: rig.cameras.clone() });
    // serialization does not validate, parsing does
    assert!(rig_from_json(&text.unwrap()).is_err());
}

#[test]
fn pose_delta_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let rig = sample_rig();
    let mut views: Vec<CameraView> = rig.views(&vec![Image::zeros(64, 48); 3]).unwrap();
    views[1].pose_delta = PoseDelta {
        delta_rot: Vector3::new(1e-3, -2e-3, 0.5),
        delta_t: Vector3::new(0.1, 0.2, -0.3),
    };
    let path = dir.path().join("d.json");
    write_pose_deltas(&path, &views).unwrap();
    let back = read_pose_deltas(&path).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back[1].id, "c1");
    assert_eq!(back[1].delta(), views[1].pose_delta);
    let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(raw[1]["delta_rot"].as_array().unwrap().len(), 3);
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let rig = sample_rig();
    let images: Vec<Image> = (0..3)
        .map(|k| Image::from_fn(64, 48, |x, y| ((x + y + k) % 17) as f64 / 16.0))
        .collect();
    let phantom = generate(&PhantomConfig::default()).unwrap();
    save_dataset(dir.path(), &rig, &images, Some(&phantom)).unwrap();
    assert!(dir.path().join("view_c2.pgm").exists());
    let (rig2, images2, phantom2) = load_dataset(dir.path()).unwrap();
    assert_eq!(rig2, rig);
    for (a, b) in images.iter().zip(&images2) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-5));
    }
    assert_eq!(phantom2.unwrap(), phantom);

    std::fs::remove_file(dir.path().join("phantom.json")).unwrap();
    assert!(load_dataset(dir.path()).unwrap().2.is_none());
    std::fs::write(dir.path().join("view_c0.pgm"), encode_pgm(&Image::zeros(3, 3))).unwrap();
    assert!(load_dataset(dir.path()).is_err());
}
