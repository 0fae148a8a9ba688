mod common;

use common::{random_embedding, random_pose, reference_pixel, CH};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spctrl_core::pose::{Keypoint, PoseInstance, PoseSet, SkeletonSpec};
use spctrl_core::spr::{
    render_heatmaps, render_openpose_rgb, render_spatial_pose, RenderStyle, OPENPOSE_PALETTE,
};

#[test]
fn renderer_matches_per_pixel_reference() {
    let spec = SkeletonSpec::ap10k();
    let styles = [
        RenderStyle::for_height(32),
        RenderStyle {
            point_radius: 2.5,
            line_width: 3.0,
        },
    ];
    for seed in 0..25u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose_size = if seed % 2 == 0 { (32, 32) } else { (48, 64) };
        let set = random_pose(&spec, pose_size, &mut rng);
        let e_kpt = random_embedding(spec.num_keypoints(), &mut rng);
        let style = styles[seed as usize % 2];
        let img = render_spatial_pose(&set, &spec, &e_kpt, CH, (32, 32), style).unwrap();
        assert_eq!((img.height, img.width, img.channels), (32, 32, CH));
        for row in 0..32 {
            for col in 0..32 {
                let want = reference_pixel(&set, &spec, &e_kpt, (32, 32), style, row, col);
                assert_eq!(img.pixel(row, col), want.as_slice(), "seed {seed} pixel ({row}, {col})");
            }
        }
    }
}

fn two_point_spec() -> SkeletonSpec {
    SkeletonSpec::new(
        "two",
        vec!["a".into(), "b".into()],
        vec![(0, 1)],
        vec![0.05; 2],
        vec![[10, 20, 30], [40, 50, 60]],
    )
    .unwrap()
}

#[test]
fn edges_are_all_ones_and_disks_carry_their_embedding_row() {
    let spec = two_point_spec();
    let set = PoseSet::new(
        (32, 32),
        vec![PoseInstance::new(vec![Keypoint::visible(4.0, 16.0), Keypoint::visible(28.0, 16.0)])],
    );
    let e_kpt = vec![0.5, -1.0, 2.0, 0.0, 7.0, 8.0, -9.0, 0.25];
    let img = render_spatial_pose(&set, &spec, &e_kpt, CH, (32, 32), RenderStyle::for_height(32)).unwrap();
    assert_eq!(img.pixel(16, 16), &[1.0; CH]);
    assert_eq!(img.pixel(16, 4), &e_kpt[..CH]);
    assert_eq!(img.pixel(16, 28), &e_kpt[CH..]);
    assert_eq!(img.pixel(0, 0), &[0.0; CH]);
    assert_eq!(img.pixel(20, 16), &[0.0; CH]);
}

#[test]
fn one_endpoint_missing_draws_no_edge() {
    let spec = two_point_spec();
    let set = PoseSet::new(
        (32, 32),
        vec![PoseInstance::new(vec![Keypoint::visible(4.0, 16.0), Keypoint::absent()])],
    );
    let e_kpt = vec![0.5; 2 * CH];
    let img = render_spatial_pose(&set, &spec, &e_kpt, CH, (32, 32), RenderStyle::for_height(32)).unwrap();
    let lit = img.data.chunks(CH).filter(|p| p.iter().any(|&v| v != 0.0)).count();
    // radius-1 disk on the lattice: the centre and its 4 neighbours
    assert_eq!(lit, 5);
}

#[test]
fn later_instances_overwrite_earlier_ones() {
    let spec = two_point_spec();
    let inst = |x: f64| PoseInstance::new(vec![Keypoint::visible(x, 10.0), Keypoint::absent()]);
    let e_kpt = vec![1.5, 1.5, 1.5, 1.5, 2.5, 2.5, 2.5, 2.5];
    let style = RenderStyle {
        point_radius: 1.0,
        line_width: 1.0,
    };
    let a = PoseSet::new((32, 32), vec![inst(10.0)]);
    let img = render_spatial_pose(&a, &spec, &e_kpt, CH, (32, 32), style).unwrap();
    assert_eq!(img.pixel(10, 10), &[1.5; CH]);

    let edge_over = PoseSet::new(
        (32, 32),
        vec![
            inst(10.0),
            PoseInstance::new(vec![Keypoint::visible(2.0, 10.0), Keypoint::visible(20.0, 10.0)]),
        ],
    );
    let img = render_spatial_pose(&edge_over, &spec, &e_kpt, CH, (32, 32), style).unwrap();
    assert_eq!(img.pixel(10, 10), &[1.0; CH]);
}

#[test]
fn keypoint_pixels_are_linear_in_the_embedding() {
    let spec = SkeletonSpec::ap10k();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let set = random_pose(&spec, (32, 32), &mut rng);
    let e1 = random_embedding(spec.num_keypoints(), &mut rng);
    let e2 = random_embedding(spec.num_keypoints(), &mut rng);
    let (a, b) = (0.5f32, -2.0f32);
    let mix: Vec<f32> = e1.iter().zip(&e2).map(|(x, y)| a * x + b * y).collect();
    let style = RenderStyle::for_height(32);
    let r1 = render_spatial_pose(&set, &spec, &e1, CH, (32, 32), style).unwrap();
    let r2 = render_spatial_pose(&set, &spec, &e2, CH, (32, 32), style).unwrap();
    let rm = render_spatial_pose(&set, &spec, &mix, CH, (32, 32), style).unwrap();
    let ones = render_spatial_pose(&set, &spec, &vec![1.0; e1.len()], CH, (32, 32), style).unwrap();
    let zero = render_spatial_pose(&set, &spec, &vec![0.0; e1.len()], CH, (32, 32), style).unwrap();
    let mut disk_pixels = 0;
    for p in 0..32 * 32 {
        let is_disk = (0..CH).all(|c| zero.data[p * CH + c] == 0.0) && ones.data[p * CH] == 1.0;
        if !is_disk {
            continue;
        }
        disk_pixels += 1;
        for c in 0..CH {
            let i = p * CH + c;
            assert_eq!(rm.data[i], a * r1.data[i] + b * r2.data[i]);
        }
    }
    assert!(disk_pixels > 0);
}

#[test]
fn openpose_rendering_uses_palette_and_keypoint_colors() {
    let spec = two_point_spec();
    let set = PoseSet::new(
        (32, 32),
        vec![PoseInstance::new(vec![Keypoint::visible(4.0, 16.0), Keypoint::visible(28.0, 16.0)])],
    );
    let img = render_openpose_rgb(&set, &spec, (32, 32), RenderStyle::for_height(32)).unwrap();
    let unit = |c: [u8; 3]| c.map(|v| v as f32 / 255.0);
    assert_eq!(img.pixel(16, 16), &unit(OPENPOSE_PALETTE[0]));
    assert_eq!(img.pixel(16, 4), &unit([10, 20, 30]));
    assert_eq!(img.pixel(16, 28), &unit([40, 50, 60]));
    assert_eq!(img.pixel(0, 0), &[0.0; 3]);
}

#[test]
fn heatmap_peaks_at_one_and_decays_to_exp_minus_two_at_two_sigma() {
    let sigma = 2.0;
    let set = PoseSet::new(
        (64, 64),
        vec![PoseInstance::new(vec![Keypoint::visible(20.0, 30.0), Keypoint::absent()])],
    );
    let hm = render_heatmaps(&set, (32, 32), sigma).unwrap();
    assert_eq!(hm.valid_indices, vec![0]);
    let map = hm.map_for(0).unwrap();
    // (20, 30) at 64 px is (10, 15) at 32 px
    assert_eq!(map[15 * 32 + 10], 1.0);
    let two_sigma = map[15 * 32 + 14];
    assert!((two_sigma - (-2.0f64).exp()).abs() < 1e-9, "{two_sigma}");
    assert!((map[(15 + 4) * 32 + 10] - (-2.0f64).exp()).abs() < 1e-9);
    assert!(map.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(hm.map_for(1).is_none());
}

#[test]
fn heatmap_takes_the_max_over_instances() {
    let inst = |x: f64| PoseInstance::new(vec![Keypoint::visible(x, 8.0)]);
    let set = PoseSet::new((32, 32), vec![inst(4.0), inst(20.0)]);
    let hm = render_heatmaps(&set, (32, 32), 1.5).unwrap();
    let map = hm.map_for(0).unwrap();
    assert_eq!(map[8 * 32 + 4], 1.0);
    assert_eq!(map[8 * 32 + 20], 1.0);
    let g = |d: f64| (-d * d / (2.0 * 1.5 * 1.5)).exp();
    assert!((map[8 * 32 + 10] - g(6.0)).abs() < 1e-12);
    assert!(render_heatmaps(&set, (32, 32), 0.0).is_err());
}

proptest! {
    #[test]
    fn background_is_zero_and_rendering_is_deterministic(seed in 0u64..10_000) {
        let spec = SkeletonSpec::ap10k();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = random_pose(&spec, (32, 32), &mut rng);
        let e_kpt = random_embedding(spec.num_keypoints(), &mut rng);
        let style = RenderStyle::for_height(32);
        let a = render_spatial_pose(&set, &spec, &e_kpt, CH, (32, 32), style).unwrap();
        let b = render_spatial_pose(&set, &spec, &e_kpt, CH, (32, 32), style).unwrap();
        prop_assert_eq!(&a, &b);
        let ones = render_spatial_pose(&set, &spec, &vec![1.0; e_kpt.len()], CH, (32, 32), style).unwrap();
        for (p, q) in a.data.chunks(CH).zip(ones.data.chunks(CH)) {
            if q.iter().all(|&v| v == 0.0) {
                prop_assert!(p.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn heatmap_decays_monotonically_from_the_keypoint(
        x in 0.0f64..32.0, y in 0.0f64..32.0, sigma in 0.5f64..4.0,
    ) {
        let set = PoseSet::new((32, 32), vec![PoseInstance::new(vec![Keypoint::visible(x, y)])]);
        let hm = render_heatmaps(&set, (32, 32), sigma).unwrap();
        let map = hm.map_for(0).unwrap();
        let d2 = |p: usize| ((p % 32) as f64 - x).powi(2) + ((p / 32) as f64 - y).powi(2);
        let mut cells: Vec<usize> = (0..32 * 32).collect();
        cells.sort_by(|&a, &b| d2(a).total_cmp(&d2(b)));
        for w in cells.windows(2) {
            prop_assert!(map[w[0]] >= map[w[1]]);
        }
        for (p, &v) in map.iter().enumerate() {
            prop_assert!((v - (-d2(p) / (2.0 * sigma * sigma)).exp()).abs() < 1e-12);
        }
    }
}
