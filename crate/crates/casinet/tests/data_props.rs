//! Dataset-generator properties: determinism, class coverage, and the
//! scale-diversity guarantee that makes the multi-scale comparison
//! meaningful.

use std::collections::HashSet;

use casinet::data::{class_frequencies, generate, generate_split, SceneSpec};
use casinet::labels::Labels;
use proptest::prelude::*;

/// Connected components of non-background labels (4-neighborhood), returning
/// each component's bounding-box longest side.
fn component_extents(labels: &Labels) -> Vec<usize> {
    let (h, w) = (labels.h, labels.w);
    let mut seen = vec![false; h * w];
    let mut extents = Vec::new();
    for start in 0..h * w {
        if seen[start] || labels.data()[start] == 0 {
            continue;
        }
        let class = labels.data()[start];
        let mut stack = vec![start];
        seen[start] = true;
        let (mut min_i, mut max_i, mut min_j, mut max_j) = (h, 0usize, w, 0usize);
        while let Some(p) = stack.pop() {
            let (i, j) = (p / w, p % w);
            min_i = min_i.min(i);
            max_i = max_i.max(i);
            min_j = min_j.min(j);
            max_j = max_j.max(j);
            let mut push = |q: usize| {
                if !seen[q] && labels.data()[q] == class {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if i > 0 {
                push(p - w);
            }
            if i + 1 < h {
                push(p + w);
            }
            if j > 0 {
                push(p - 1);
            }
            if j + 1 < w {
                push(p + 1);
            }
        }
        extents.push((max_i - min_i + 1).max(max_j - min_j + 1));
    }
    extents
}

#[test]
fn scale_diversity_at_least_four_fold() {
    // Over 200 default-spec images, the largest drawn component is at least
    // 4x the smallest.
    let spec = SceneSpec::default();
    let samples = generate(&spec, 200).unwrap();
    let mut min_e = usize::MAX;
    let mut max_e = 0usize;
    for s in &samples {
        for e in component_extents(&s.labels) {
            min_e = min_e.min(e);
            max_e = max_e.max(e);
        }
    }
    assert!(
        max_e >= 4 * min_e,
        "scale diversity too low: min {min_e}, max {max_e}"
    );
}

#[test]
fn default_split_covers_all_classes() {
    let (train, val, _) = generate_split(&SceneSpec::default(), 200, 50).unwrap();
    assert_eq!(train.len(), 200);
    assert_eq!(val.len(), 50);
    let freq = class_frequencies(&train, 4);
    assert!(freq.iter().all(|&c| c > 0), "{freq:?}");
}

#[test]
fn labels_match_drawn_classes() {
    let spec = SceneSpec { image_size: 48, ..SceneSpec::default() };
    let samples = generate(&spec, 20).unwrap();
    let mut seen = HashSet::new();
    for s in &samples {
        for &l in s.labels.data() {
            assert!(l < 4, "label {l} out of range");
            seen.insert(l);
        }
    }
    assert!(seen.contains(&0), "background must appear");
    assert!(seen.len() >= 3, "expected several classes over 20 images");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generation_deterministic_per_seed(seed in 0u64..1000) {
        let spec = SceneSpec { image_size: 24, seed, ..SceneSpec::default() };
        let a = generate(&spec, 2).unwrap();
        let b = generate(&spec, 2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.image.data(), y.image.data());
            prop_assert_eq!(x.labels.data(), y.labels.data());
        }
    }

    #[test]
    fn images_always_unit_range(seed in 0u64..1000, noise in 0.0f64..0.4) {
        let spec = SceneSpec { image_size: 24, seed, noise_stddev: noise, ..SceneSpec::default() };
        for s in generate(&spec, 2).unwrap() {
            prop_assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
