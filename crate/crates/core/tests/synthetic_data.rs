use spctrl_core::data::{disk_radius, make_synthetic_dataset};
use spctrl_core::pose::SkeletonSpec;
use spctrl_core::prompts::fill_prompt_template;

#[test]
fn same_seed_identical_datasets() {
    let spec = SkeletonSpec::ap10k();
    let a = make_synthetic_dataset(20, &spec, 9, 64).unwrap();
    let b = make_synthetic_dataset(20, &spec, 9, 64).unwrap();
    assert_eq!(a, b);
    let c = make_synthetic_dataset(20, &spec, 10, 64).unwrap();
    assert_ne!(a, c);
}

#[test]
fn prefix_is_stable_across_counts() {
    let spec = SkeletonSpec::ap10k();
    let a = make_synthetic_dataset(5, &spec, 3, 64).unwrap();
    let b = make_synthetic_dataset(12, &spec, 3, 64).unwrap();
    assert_eq!(a[..], b[..5]);
}

#[test]
fn disk_centroids_within_one_pixel() {
    let spec = SkeletonSpec::ap10k();
    for size in [32usize, 64] {
        for s in make_synthetic_dataset(40, &spec, 1, size).unwrap() {
            let inst = &s.pose_set.instances[0];
            for k in inst.valid_indices() {
                let want: Vec<f32> = spec.render_colors()[k].iter().map(|&c| c as f32 / 255.0).collect();
                let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
                for row in 0..size {
                    for col in 0..size {
                        if s.image[(row * size + col) * 3..][..3] == want[..] {
                            sx += col as f64;
                            sy += row as f64;
                            n += 1.0;
                        }
                    }
                }
                assert!(n >= 2.0 * disk_radius(size), "keypoint {k}: only {n} pixels");
                let kp = inst.keypoints[k];
                let d = (sx / n - kp.x).hypot(sy / n - kp.y);
                assert!(d <= 1.0, "keypoint {k} centroid off by {d}");
            }
        }
    }
}

#[test]
fn invalid_keypoints_are_not_drawn_and_images_in_range() {
    let spec = SkeletonSpec::ap10k();
    let data = make_synthetic_dataset(60, &spec, 2, 64).unwrap();
    let mut absent = 0;
    for s in &data {
        assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        for (k, kp) in s.pose_set.instances[0].keypoints.iter().enumerate() {
            if kp.is_valid() {
                continue;
            }
            absent += 1;
            let want: Vec<f32> = spec.render_colors()[k].iter().map(|&c| c as f32 / 255.0).collect();
            assert!(!s.image.chunks(3).any(|px| px == &want[..]));
        }
    }
    assert!(absent > 0);
}

#[test]
fn captions_come_from_templates() {
    let spec = SkeletonSpec::ap10k();
    for s in make_synthetic_dataset(30, &spec, 4, 64).unwrap() {
        assert_eq!(s.caption, fill_prompt_template(s.template_id, &s.species, &s.background).unwrap());
    }
}

#[test]
fn quoted_template_strings() {
    assert_eq!(fill_prompt_template(1, "antelope", "").unwrap(), "A good photo of antelope.");
    assert_eq!(
        fill_prompt_template(2, "dog", "grass or savanna").unwrap(),
        "A photo of dog in the grass or savanna."
    );
    assert_eq!(fill_prompt_template(10, "cat", "snowfield").unwrap(), "A cat stands on the snowfield.");
}
