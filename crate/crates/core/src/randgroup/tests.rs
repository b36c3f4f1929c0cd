use super::*;
use crate::error::Error;
use proptest::prelude::*;
use std::collections::BTreeSet;

fn window(h: usize, w: usize) -> GroupingMode {
    GroupingMode::WindowBaseline {
        window_h: h,
        window_w: w,
    }
}

fn group_sets(plan: &GroupPlan, head: usize) -> BTreeSet<Vec<usize>> {
    plan.assignment().groups(head).into_iter().collect()
}

#[test]
fn shared_fixed_replicates_head_zero() {
    let plan = GroupPlan::generate(9, 3, 5, 5, 5, GroupingMode::SharedFixed).unwrap();
    assert_eq!(plan.p_values(0), plan.p_values(1));
    assert_eq!(plan.p_values(1), plan.p_values(2));
    assert_eq!(plan.perm(0), plan.perm(2));
}

#[test]
fn window_baseline_groups_are_windows() {
    let plan = GroupPlan::generate(0, 1, 4, 4, 4, window(2, 2)).unwrap();
    let a = plan.assignment();
    let g = a.group_of(0, 0);
    for t in [1, 4, 5] {
        assert_eq!(a.group_of(0, t), g);
    }
    assert_ne!(a.group_of(0, 2), g);
    assert_eq!(
        plan.perm(0),
        &[0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]
    );
}

#[test]
fn seed_42_perm_matches_reference_prng_argsort() {
    // Values from an independent splitmix64 (substream seed 42 ^ gamma) and a
    // max-selection sort.
    let plan = GroupPlan::generate(42, 1, 4, 4, 4, GroupingMode::PerHeadFixed).unwrap();
    assert_eq!(
        plan.perm(0),
        &[4, 6, 13, 8, 12, 11, 10, 2, 7, 1, 5, 9, 14, 0, 15, 3]
    );
    assert!((plan.p_values(0)[0] - 0.1599103928769201).abs() < 1e-16);
}

#[test]
fn assignment_single_and_singleton_groups() {
    let one = GroupPlan::generate(1, 1, 2, 4, 8, GroupingMode::PerHeadFixed).unwrap();
    let a = one.assignment();
    assert_eq!(a.group_count, 1);
    assert!(a.group_id.iter().all(|&g| g == 0));

    let single = GroupPlan::generate(1, 1, 2, 4, 1, GroupingMode::PerHeadFixed).unwrap();
    let a = single.assignment();
    assert_eq!(a.group_count, 8);
    let ids: BTreeSet<usize> = a.group_id.iter().copied().collect();
    assert_eq!(ids.len(), 8);
}

#[test]
fn assignment_with_padding() {
    let plan = GroupPlan::generate(3, 2, 2, 3, 4, GroupingMode::PerHeadFixed).unwrap();
    assert_eq!(plan.n_pad(), 2);
    let a = plan.assignment();
    assert_eq!(a.group_count, 2);
    for h in 0..2 {
        let pads: Vec<usize> = (0..8).filter(|&j| a.pad_mask[h * 8 + j]).collect();
        assert_eq!(pads, vec![6, 7]);
        assert!(pads.iter().all(|j| j / 4 == 1));
    }
    assert_eq!(plan.valid_counts(), vec![4, 2]);
}

#[test]
fn non_tiling_windows_and_regions_are_errors() {
    assert!(matches!(
        GroupPlan::generate(0, 1, 4, 6, 4, window(2, 4)),
        Err(Error::Grouping(_))
    ));
    let region = GroupingMode::RegionConstrained {
        region_rows: 3,
        region_cols: 2,
        overlap: 0.25,
    };
    assert!(matches!(
        GroupPlan::generate(0, 1, 4, 4, 4, region),
        Err(Error::Grouping(_))
    ));
}

#[test]
fn region_without_overlap_reproduces_windows() {
    let region = GroupingMode::RegionConstrained {
        region_rows: 2,
        region_cols: 4,
        overlap: 0.0,
    };
    let r = GroupPlan::generate(17, 3, 4, 8, 8, region).unwrap();
    let w = GroupPlan::generate(17, 1, 4, 8, 8, window(2, 4)).unwrap();
    for h in 0..3 {
        assert_eq!(group_sets(&r, h), group_sets(&w, 0));
    }
}

#[test]
fn region_with_overlap_mixes_some_tokens() {
    let region = GroupingMode::RegionConstrained {
        region_rows: 4,
        region_cols: 4,
        overlap: 0.25,
    };
    let r = GroupPlan::generate(5, 4, 8, 8, 16, region).unwrap();
    let w = GroupPlan::generate(5, 1, 8, 8, 16, window(4, 4)).unwrap();
    assert!((0..4).any(|h| group_sets(&r, h) != group_sets(&w, 0)));
    r.validate().unwrap();
}

#[test]
fn interpolation_identity_and_upsample() {
    let plan = GroupPlan::generate(8, 2, 4, 4, 4, GroupingMode::PerHeadFixed).unwrap();
    assert_eq!(plan.interpolate(4, 4, 4).unwrap(), plan);

    let small = GroupPlan::generate(8, 1, 2, 2, 1, GroupingMode::PerHeadFixed).unwrap();
    let big = small.interpolate(4, 4, 4).unwrap();
    let v = small.p_values(0);
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(big.p_values(0)[i * 4 + j], v[(i / 2) * 2 + j / 2]);
        }
    }
    big.validate().unwrap();
}

#[test]
fn interpolation_downsample_matches_per_cell_oracle() {
    let plan = GroupPlan::generate(99, 1, 4, 4, 4, GroupingMode::PerHeadFixed).unwrap();
    let down = plan.interpolate(3, 3, 3).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let (si, sj) = ((i * 4) / 3, (j * 4) / 3);
            assert_eq!(down.p_values(0)[i * 3 + j], plan.p_values(0)[si * 4 + sj]);
        }
    }
    assert_eq!(
        down.perm(0),
        &descending_argsort(down.p_values(0)).unwrap()[..]
    );
}

#[test]
fn interpolation_rejects_zero_extent() {
    let plan = GroupPlan::generate(1, 1, 4, 4, 4, GroupingMode::PerHeadFixed).unwrap();
    assert!(plan.interpolate(0, 4, 4).is_err());
}

#[test]
fn per_sample_resampling() {
    let mode = GroupingMode::PerSampleRandom {
        shared_heads: false,
    };
    let template = GroupPlan::generate(1, 2, 6, 6, 4, mode).unwrap();
    let a = template.resample_per_sample(1234).unwrap();
    let b = template.resample_per_sample(1234).unwrap();
    let c = template.resample_per_sample(1235).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.perm(0), c.perm(0));
    c.validate().unwrap();

    let fixed = GroupPlan::generate(1, 2, 6, 6, 4, GroupingMode::PerHeadFixed).unwrap();
    assert!(matches!(
        fixed.resample_per_sample(1),
        Err(Error::Grouping(_))
    ));
}

#[test]
fn per_head_perms_differ() {
    let plan = GroupPlan::generate(77, 4, 4, 4, 4, GroupingMode::PerHeadFixed).unwrap();
    for a in 0..4 {
        for b in a + 1..4 {
            assert_ne!(plan.perm(a), plan.perm(b));
        }
    }
}

#[test]
fn plan_file_round_trip_and_errors() {
    let plan = GroupPlan::generate(42, 3, 5, 7, 4, GroupingMode::PerHeadFixed).unwrap();
    let bytes = serialize_plan(&plan);
    assert_eq!(&bytes[..4], b"RGPL");
    let back = deserialize_plan(&bytes).unwrap();
    assert_eq!(back, plan);

    for cut in [0, 3, 10, bytes.len() - 1] {
        assert!(matches!(
            deserialize_plan(&bytes[..cut]),
            Err(Error::PlanFormat(_))
        ));
    }
    let mut wrong_version = bytes.clone();
    wrong_version[4] = 9;
    assert!(matches!(
        deserialize_plan(&wrong_version),
        Err(Error::PlanFormat(_))
    ));
    let mut bad_magic = bytes;
    bad_magic[0] = b'X';
    assert!(matches!(
        deserialize_plan(&bad_magic),
        Err(Error::PlanFormat(_))
    ));
}

#[test]
fn interpolated_plan_survives_round_trip() {
    let plan = GroupPlan::generate(4, 2, 4, 4, 4, GroupingMode::PerHeadFixed)
        .unwrap()
        .interpolate(6, 10, 8)
        .unwrap();
    assert_eq!(deserialize_plan(&serialize_plan(&plan)).unwrap(), plan);
}

fn any_mode() -> impl Strategy<Value = GroupingMode> {
    prop_oneof![
        Just(GroupingMode::PerHeadFixed),
        Just(GroupingMode::SharedFixed),
        any::<bool>().prop_map(|s| GroupingMode::PerSampleRandom { shared_heads: s }),
    ]
}

proptest! {
    #[test]
    fn every_group_has_group_size_slots(
        seed in any::<u64>(), heads in 1usize..4, h in 1usize..9, w in 1usize..9,
        gs in 1usize..12, mode in any_mode(),
    ) {
        let plan = GroupPlan::generate(seed, heads, h, w, gs, mode).unwrap();
        plan.validate().unwrap();
        let a = plan.assignment();
        for head in 0..heads {
            let mut sizes = vec![0usize; a.group_count];
            for t in 0..h * w {
                sizes[a.group_of(head, t)] += 1;
            }
            for j in 0..plan.n_slots() {
                if a.pad_mask[head * plan.n_slots() + j] {
                    sizes[j / gs] += 1;
                }
            }
            prop_assert!(sizes.iter().all(|&s| s == gs));
        }
    }
}
