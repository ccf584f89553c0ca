mod common;

use common::*;

use tinyinfer::allocation_count;
use tinyinfer::graph::fire;

#[test]
fn zero_copy_fire_equals_copy_reference_with_fewer_allocations() {
    let mut r = rng(101);
    for _ in 0..50 {
        let (input, cfg, w) = random_fire(&mut r);

        let before = allocation_count();
        let reference = fire_copy_reference(&input, &cfg, &w);
        let reference_allocs = allocation_count() - before;

        let before = allocation_count();
        let out = fire(&input, &cfg, &w).unwrap();
        let allocs = allocation_count() - before;

        assert!(bit_equal(&out, &reference), "{cfg:?} on {}", input.shape());
        assert!(allocs < reference_allocs, "{allocs} vs {reference_allocs}");
    }
}

#[test]
fn expand_branches_land_in_their_channel_ranges() {
    let mut r = rng(102);
    let (input, cfg, w) = random_fire(&mut r);
    let out = fire(&input, &cfg, &w).unwrap();
    let reference = fire_copy_reference(&input, &cfg, &w);
    let s = out.shape();
    for c in [0, cfg.expand1 - 1, cfg.expand1, cfg.out_channels() - 1] {
        for y in 0..s.h {
            for x in 0..s.w {
                assert_eq!(
                    out.get::<f32>([0, c, y, x]).unwrap().to_bits(),
                    reference.get::<f32>([0, c, y, x]).unwrap().to_bits()
                );
            }
        }
    }
}
