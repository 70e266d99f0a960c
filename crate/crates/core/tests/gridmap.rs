mod common;

use pim_core::gridmap::{
    average_maps, classes_to_importance, pool_plane, pool_to_grid, quantize_classes, ImportanceClass, MacroblockGrid,
};
use pim_core::media::ImportanceMap;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pooling_matches_rational_oracle(
        map_w in 1usize..40, map_h in 1usize..30, video_w in 1usize..120, video_h in 1usize..90, seed in any::<u64>()
    ) {
        let ints: Vec<i64> = (0..map_w * map_h).map(|i| ((seed >> (i % 48)) as i64 + i as i64 * 37) % 256).collect();
        let plane: Vec<f64> = ints.iter().map(|&v| v as f64).collect();
        let got = pool_plane(&plane, map_w, map_h, video_w, video_h).unwrap();
        let want = common::rational_pool(&ints, map_w, map_h, video_w, video_h);
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.cells().iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0), "{} vs {}", g, w);
        }
    }

    /// When the map covers the video at an integer number of map pixels per
    /// macroblock, pooling preserves the global mean exactly.
    #[test]
    fn mean_preserved_on_aligned_sizes(rows in 1usize..8, cols in 1usize..8, k in 1usize..5, seed in any::<u64>()) {
        let (video_w, video_h) = (16 * cols, 16 * rows);
        let (map_w, map_h) = (k * cols, k * rows);
        let mut rng = common::rng(seed);
        let values: Vec<u8> = (0..map_w * map_h).map(|_| rand::Rng::gen(&mut rng)).collect();
        let map = ImportanceMap::new(map_w, map_h, values.clone()).unwrap();
        let grid = pool_to_grid(&map, video_w, video_h).unwrap();
        let map_mean = values.iter().map(|&v| f64::from(v)).sum::<f64>() / values.len() as f64;
        let grid_mean = grid.cells().iter().sum::<f64>() / grid.len() as f64;
        prop_assert!((map_mean - grid_mean).abs() <= 1e-9);
    }

    /// Raising any map pixel never lowers any pooled cell.
    #[test]
    fn pooling_is_monotone(w in 1usize..30, h in 1usize..30, at in any::<prop::sample::Index>(), bump in 1u8..=255) {
        let base = ImportanceMap::new(w, h, (0..w * h).map(|i| (i * 13 % 200) as u8).collect()).unwrap();
        let mut raised = base.clone();
        let i = at.index(w * h);
        raised.values_mut()[i] = raised.values()[i].saturating_add(bump);
        let (a, b) = (pool_to_grid(&base, 75, 50).unwrap(), pool_to_grid(&raised, 75, 50).unwrap());
        for (x, y) in a.cells().iter().zip(b.cells()) {
            prop_assert!(y >= x);
        }
    }

    #[test]
    fn average_matches_rounded_mean(maps in prop::collection::vec(prop::collection::vec(any::<u8>(), 6), 1..6)) {
        let ims: Vec<_> = maps.iter().map(|v| ImportanceMap::new(3, 2, v.clone()).unwrap()).collect();
        let avg = average_maps(&ims).unwrap();
        for i in 0..6 {
            let mean = maps.iter().map(|m| f64::from(m[i])).sum::<f64>() / maps.len() as f64;
            prop_assert_eq!(f64::from(avg.values()[i]), (mean).round());
        }
    }
}

#[test]
fn impulse_lands_in_one_cell() {
    let mut values = vec![0u8; 800 * 450];
    values[200 * 800 + 333] = 255;
    let map = ImportanceMap::new(800, 450, values).unwrap();
    let grid = pool_to_grid(&map, 800, 450).unwrap();
    let hit: Vec<usize> = (0..grid.len()).filter(|&i| grid.cells()[i] > 0.0).collect();
    assert_eq!(hit, vec![(200 / 16) * 50 + 333 / 16]);
    assert!((grid.cells()[hit[0]] - 255.0 / 256.0).abs() < 1e-12);
}

#[test]
fn partial_boundary_blocks_use_their_own_area() {
    // 450 rows: the last macroblock row covers only 2 pixel rows.
    let map = ImportanceMap::new(800, 450, (0..800 * 450).map(|i| if i / 800 >= 448 { 200 } else { 0 }).collect()).unwrap();
    let grid = pool_to_grid(&map, 800, 450).unwrap();
    assert_eq!((grid.rows(), grid.cols()), (29, 50));
    assert!(grid.cells()[28 * 50..].iter().all(|&v| (v - 200.0).abs() < 1e-12));
    assert!(grid.cells()[..28 * 50].iter().all(|&v| v == 0.0));
}

#[test]
fn class_quantisation() {
    let grid = MacroblockGrid::new(1, 6, vec![0.0, 63.9, 64.0, 191.4, 191.6, 255.0]).unwrap();
    let classes = quantize_classes(&grid);
    use ImportanceClass::*;
    assert_eq!(classes.cells(), &[Low, Low, Mid, Mid, High, High]);
    assert_eq!(classes_to_importance(&classes).cells(), &[0, 0, 128, 128, 255, 255]);
    assert!(average_maps(&[]).is_err());
}
