use std::collections::BTreeMap;

use proptest::prelude::*;
use spctrl_core::backbone::{AttentionRecord, AttentionSource, BlockId, CapturedAttention};
use spctrl_core::kcl::{heatmap_loss, heatmap_loss_sample, loss_gradient_check, GatingConfig, ToyDims};
use spctrl_core::pose::{Keypoint, PoseInstance, PoseSet};
use spctrl_core::spr::{render_heatmaps, HeatmapStack};
use tch::{Device, Kind, Tensor};

const BLOCK: BlockId = BlockId {
    source: AttentionSource::Adapter,
    level: 2,
};

fn record_with(maps: Tensor, side: usize, t: usize) -> AttentionRecord {
    let mut entries = BTreeMap::new();
    entries.insert(
        BLOCK,
        CapturedAttention {
            detached_query: Some(maps.shallow_clone()),
            maps,
            height: side,
            width: side,
        },
    );
    AttentionRecord {
        entries,
        timesteps: vec![t],
    }
}

fn one_point(side: usize, x: f64, y: f64) -> PoseSet {
    PoseSet::new((side, side), vec![PoseInstance::new(vec![Keypoint::visible(x, y)])])
}

/// Builds `1 x heads x HW x L` maps whose column at `pos[i]` equals heatmap `i`.
fn maps_matching(hm: &HeatmapStack, positions: &[usize], len: usize, heads: i64) -> Tensor {
    let hw = hm.height * hm.width;
    let mut data = vec![0.0f64; hw * len];
    for (i, &p) in positions.iter().enumerate() {
        for (px, v) in hm.maps[i].iter().enumerate() {
            data[px * len + p] = *v;
        }
    }
    Tensor::from_slice(&data)
        .reshape([1, 1, hw as i64, len as i64])
        .expand([1, heads, hw as i64, len as i64], false)
        .contiguous()
}

#[test]
fn exact_match_gives_zero_loss() {
    let hm = render_heatmaps(&one_point(8, 3.0, 5.0), (8, 8), 1.5).unwrap();
    let rec = record_with(maps_matching(&hm, &[2], 4, 2), 8, 300);
    let pos = BTreeMap::from([(0, 2)]);
    let l = heatmap_loss(&rec, &[&pos], &[[hm]], &GatingConfig::default()).unwrap();
    assert_eq!(l.double_value(&[]), 0.0);
}

#[test]
fn uniform_attention_closed_form_8x8() {
    let (side, sigma, kx, ky) = (8usize, 1.5f64, 3.0f64, 4.0f64);
    let hw = (side * side) as f64;
    // independent evaluation of (1/HW) * sum_p (1/HW - H(p))^2
    let mut expected = 0.0;
    for row in 0..side {
        for col in 0..side {
            let d2 = (col as f64 - kx).powi(2) + (row as f64 - ky).powi(2);
            let h = (-d2 / (2.0 * sigma * sigma)).exp();
            expected += (1.0 / hw - h).powi(2);
        }
    }
    expected /= hw;

    let hm = render_heatmaps(&one_point(side, kx, ky), (side, side), sigma).unwrap();
    let len = 5i64;
    let mut data = vec![0.0f64; side * side * len as usize];
    for px in 0..side * side {
        data[px * len as usize + 1] = 1.0 / hw;
    }
    let maps = Tensor::from_slice(&data).reshape([1, 1, hw as i64, len]);
    let rec = record_with(maps, side, 260);
    let pos = BTreeMap::from([(0, 1)]);
    let l = heatmap_loss(&rec, &[&pos], &[[hm]], &GatingConfig::default()).unwrap();
    assert!((l.double_value(&[]) - expected).abs() < 1e-9, "{} vs {expected}", l.double_value(&[]));
}

#[test]
fn finite_difference_gradient_on_token_embeddings() {
    let report = loss_gradient_check(&ToyDims::default()).unwrap();
    assert!(report.loss > 0.0);
    assert!(report.max_abs_grad > 0.0);
    assert!(report.max_rel_err < 1e-4, "{report:?}");
    assert_eq!(report.query_path_grad_max, 0.0, "{report:?}");
}

#[test]
fn gradient_check_across_seeds() {
    for seed in 1..4 {
        let report = loss_gradient_check(&ToyDims { seed, ..Default::default() }).unwrap();
        assert!(report.max_rel_err < 1e-4, "seed {seed}: {report:?}");
        assert_eq!(report.query_path_grad_max, 0.0);
    }
}

#[test]
fn zero_loss_point_has_zero_gradient() {
    let hm = render_heatmaps(&one_point(4, 1.0, 2.0), (4, 4), 1.0).unwrap();
    let maps = maps_matching(&hm, &[1], 3, 2).requires_grad_(true);
    let rec = record_with(maps.shallow_clone(), 4, 400);
    let pos = BTreeMap::from([(0, 1)]);
    let l = heatmap_loss(&rec, &[&pos], &[[hm]], &GatingConfig::default()).unwrap();
    l.backward();
    assert_eq!(maps.grad().abs().max().double_value(&[]), 0.0);
}

#[test]
fn gated_out_timesteps_give_zero_and_no_gradient() {
    let hm = render_heatmaps(&one_point(4, 1.0, 2.0), (4, 4), 1.0).unwrap();
    for t in [0usize, 249, 500, 700, 999] {
        let maps = (Tensor::ones([1, 2, 16, 3], (Kind::Double, Device::Cpu)) / 3.0).requires_grad_(true);
        let rec = record_with(maps.shallow_clone(), 4, t);
        let pos = BTreeMap::from([(0, 1)]);
        let l = heatmap_loss(&rec, &[&pos], &[[hm.clone()]], &GatingConfig::default()).unwrap();
        assert_eq!(l.double_value(&[]), 0.0, "t={t}");
        assert!(!l.requires_grad());
    }
    for t in [250usize, 499] {
        let maps = Tensor::ones([1, 2, 16, 3], (Kind::Double, Device::Cpu)) / 3.0;
        let rec = record_with(maps, 4, t);
        let pos = BTreeMap::from([(0, 1)]);
        let l = heatmap_loss(&rec, &[&pos], &[[hm.clone()]], &GatingConfig::default()).unwrap();
        assert!(l.double_value(&[]) > 0.0, "t={t}");
    }
}

#[test]
fn non_gated_blocks_receive_no_gradient() {
    let hm = render_heatmaps(&one_point(4, 1.0, 2.0), (4, 4), 1.0).unwrap();
    let gated = (Tensor::ones([1, 2, 16, 3], (Kind::Double, Device::Cpu)) / 3.0).requires_grad_(true);
    let other = (Tensor::ones([1, 2, 16, 3], (Kind::Double, Device::Cpu)) / 3.0).requires_grad_(true);
    let mut rec = record_with(gated.shallow_clone(), 4, 300);
    let other_block = BlockId::new(AttentionSource::Base, 2);
    rec.entries.insert(
        other_block,
        CapturedAttention {
            maps: other.shallow_clone(),
            detached_query: Some(other.shallow_clone()),
            height: 4,
            width: 4,
        },
    );
    let pos = BTreeMap::from([(0, 1)]);
    let l = heatmap_loss(&rec, &[&pos], &[[hm]], &GatingConfig::default()).unwrap();
    l.backward();
    assert!(gated.grad().abs().max().double_value(&[]) > 0.0);
    assert!(!other.grad().defined() || other.grad().abs().max().double_value(&[]) == 0.0);
}

#[test]
fn gated_blocks_are_averaged() {
    let hm = render_heatmaps(&one_point(4, 1.0, 2.0), (4, 4), 1.0).unwrap();
    let a = Tensor::ones([1, 1, 16, 2], (Kind::Double, Device::Cpu)) / 2.0;
    let b = Tensor::zeros([1, 1, 16, 2], (Kind::Double, Device::Cpu));
    let pos = BTreeMap::from([(0, 1)]);
    let single = |m: Tensor| {
        let rec = record_with(m, 4, 300);
        heatmap_loss_sample(&rec, 0, &pos, std::slice::from_ref(&hm), &GatingConfig::default())
            .unwrap()
            .unwrap()
            .double_value(&[])
    };
    let (la, lb) = (single(a.copy()), single(b.copy()));
    let mut rec = record_with(a, 4, 300);
    let second = BlockId::new(AttentionSource::Adapter, 1);
    rec.entries.insert(
        second,
        CapturedAttention {
            maps: b.shallow_clone(),
            detached_query: Some(b),
            height: 4,
            width: 4,
        },
    );
    let gate = GatingConfig {
        blocks: vec![BLOCK, second],
        ..Default::default()
    };
    let both = heatmap_loss_sample(&rec, 0, &pos, std::slice::from_ref(&hm), &gate).unwrap().unwrap().double_value(&[]);
    assert!((both - (la + lb) / 2.0).abs() < 1e-15);
}

#[test]
fn dropped_prompt_contributes_zero() {
    let hm = render_heatmaps(&one_point(4, 1.0, 2.0), (4, 4), 1.0).unwrap();
    let rec = record_with(Tensor::ones([1, 1, 16, 2], (Kind::Double, Device::Cpu)) / 2.0, 4, 300);
    let l = heatmap_loss(&rec, &[&BTreeMap::new()], &[[hm]], &GatingConfig::default()).unwrap();
    assert_eq!(l.double_value(&[]), 0.0);
}

fn pose_strategy() -> impl Strategy<Value = PoseSet> {
    let kp = (0.0f64..8.0, 0.0f64..8.0, 0u8..3).prop_map(|(x, y, v)| Keypoint::new(x, y, v).unwrap());
    prop::collection::vec(prop::collection::vec(kp, 3).prop_map(PoseInstance::new), 1..4)
        .prop_map(|inst| PoseSet::new((8, 8), inst))
}

fn loss_for(pose: &PoseSet, maps: &Tensor) -> f64 {
    let hm = render_heatmaps(pose, (8, 8), 1.2).unwrap();
    let pos: BTreeMap<usize, usize> = hm.valid_indices.iter().map(|&k| (k, k + 1)).collect();
    let rec = record_with(maps.shallow_clone(), 8, 300);
    heatmap_loss(&rec, &[&pos], &[[hm]], &GatingConfig::default())
        .unwrap()
        .double_value(&[])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loss_is_non_negative(pose in pose_strategy(), seed in 0i64..1000) {
        tch::manual_seed(seed);
        let maps = Tensor::rand([1, 2, 64, 5], (Kind::Double, Device::Cpu)).softmax(-1, Kind::Double);
        prop_assert!(loss_for(&pose, &maps) >= 0.0);
    }

    #[test]
    fn instance_order_does_not_matter(pose in pose_strategy(), seed in 0i64..1000) {
        tch::manual_seed(seed);
        let maps = Tensor::rand([1, 2, 64, 5], (Kind::Double, Device::Cpu)).softmax(-1, Kind::Double);
        let mut rev = pose.clone();
        rev.instances.reverse();
        prop_assert_eq!(loss_for(&pose, &maps), loss_for(&rev, &maps));
    }

    #[test]
    fn joint_pixel_permutation_invariance(seed in 0u64..1000) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let hm = render_heatmaps(&one_point(8, 2.0, 6.0), (8, 8), 1.0).unwrap();
        let mut perm: Vec<usize> = (0..64).collect();
        perm.shuffle(&mut rng);
        let maps: Vec<f64> = (0..64 * 3).map(|i| ((i * 37 % 101) as f64) / 101.0).collect();
        let permute_maps = |m: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; m.len()];
            for (dst, &src) in perm.iter().enumerate() {
                out[dst * 3..dst * 3 + 3].copy_from_slice(&m[src * 3..src * 3 + 3]);
            }
            out
        };
        let mut hm_p = hm.clone();
        hm_p.maps[0] = perm.iter().map(|&s| hm.maps[0][s]).collect();
        let pos = BTreeMap::from([(0usize, 2usize)]);
        let eval = |m: Vec<f64>, h: HeatmapStack| {
            let rec = record_with(Tensor::from_slice(&m).reshape([1, 1, 64, 3]), 8, 300);
            heatmap_loss(&rec, &[&pos], &[[h]], &GatingConfig::default()).unwrap().double_value(&[])
        };
        let a = eval(maps.clone(), hm);
        let b = eval(permute_maps(&maps), hm_p);
        prop_assert!((a - b).abs() < 1e-12);
    }
}
