use objctx::dataset::AnnotatedImage;
use objctx::geometry::jaccard;
use objctx::imaging::Image;
use objctx::sampling::{
    epoch_stream, materialize, negative_allowed, normalize_images, SampleSpec, SamplingConfig,
};
use objctx::synthetic::{generate_scene, WorldConfig};
use objctx::tensor::ClassLabel;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 64;

fn desk_sampling() -> SamplingConfig {
    SamplingConfig {
        object_fraction: 0.25,
        ..Default::default()
    }
}

fn scenes(first: u64, n: u64) -> Vec<AnnotatedImage> {
    let world = WorldConfig::default();
    let imgs: Vec<_> = (first..first + n)
        .map(|i| generate_scene(&world, i).unwrap().image)
        .collect();
    normalize_images(&imgs)
}

fn stream(images: &[AnnotatedImage], length: usize, seed: u64) -> Vec<SampleSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    epoch_stream(images, length, SIDE, &desk_sampling(), &[], &mut rng)
        .unwrap()
        .0
}

fn unflipped(spec: &SampleSpec, image: &Image) -> Image {
    let img = Image::from_tensor(&materialize(spec, image, SIDE).raw).unwrap();
    if spec.flipped {
        img.flip_horizontal()
    } else {
        img
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masked_stream_differs_from_raw_only_inside_the_mask(seed in any::<u64>(), first in 0u64..500) {
        let images = scenes(first, 4);
        for spec in stream(&images, 16, seed) {
            let pair = materialize(&spec, &images[spec.image].pixels, SIDE);
            let raw = Image::from_tensor(&pair.raw).unwrap();
            let masked = Image::from_tensor(&pair.masked).unwrap();
            for y in 0..SIDE {
                for x in 0..SIDE {
                    if pair.mask.contains(x, y) {
                        prop_assert_eq!(masked.get(x, y, 0), 0.0);
                    } else {
                        prop_assert_eq!(masked.get(x, y, 0), raw.get(x, y, 0));
                    }
                }
            }
        }
    }

    #[test]
    fn labels_agree_with_annotations(seed in any::<u64>(), first in 0u64..500) {
        let images = scenes(first, 4);
        let cfg = desk_sampling();
        for spec in stream(&images, 32, seed) {
            let img = &images[spec.image];
            let mask = spec.source_mask();
            match spec.label {
                ClassLabel::Negative => prop_assert!(negative_allowed(img, &mask, &cfg)),
                ClassLabel::Positive => {
                    // The mask covers exactly one object, up to outward rounding.
                    let obj = img
                        .objects
                        .iter()
                        .max_by(|a, b| jaccard(a, &mask).total_cmp(&jaccard(b, &mask)))
                        .unwrap();
                    prop_assert!(jaccard(obj, &mask) > 0.75, "overlap {}", jaccard(obj, &mask));
                    prop_assert!(mask.x <= obj.x + 1e-9 && mask.y <= obj.y + 1e-9);
                    prop_assert!(mask.right() >= obj.right() - 1e-9 && mask.bottom() >= obj.bottom() - 1e-9);
                    let (cx, cy) = obj.center();
                    let (kx, ky) = spec.crop.center();
                    prop_assert!((cx - kx).abs() <= 1.0 && (cy - ky).abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn negatives_mirror_positive_mask_dimensions(seed in any::<u64>(), half in 1usize..40) {
        let images = scenes(0, 6);
        let specs = stream(&images, 2 * half, seed);
        let dims = |label| {
            let mut d: Vec<(usize, usize, u64)> = specs
                .iter()
                .filter(|s| s.label == label)
                .map(|s| (s.mask.w, s.mask.h, s.scale.to_bits()))
                .collect();
            d.sort();
            d
        };
        let pos = dims(ClassLabel::Positive);
        prop_assert_eq!(pos.len(), half);
        prop_assert_eq!(pos, dims(ClassLabel::Negative));
    }

    #[test]
    fn flipping_twice_restores_the_pair(seed in any::<u64>()) {
        let images = scenes(3, 2);
        for spec in stream(&images, 8, seed) {
            let image = &images[spec.image].pixels;
            let once = spec.with_flip(!spec.flipped);
            let twice = once.with_flip(!once.flipped);
            prop_assert_eq!(twice, spec);
            let a = materialize(&spec, image, SIDE);
            let b = materialize(&twice, image, SIDE);
            prop_assert_eq!(a.raw, b.raw);
            prop_assert_eq!(a.masked, b.masked);
            // The flipped crop is the mirror image of the unflipped one.
            prop_assert_eq!(unflipped(&once, image), unflipped(&spec, image));
            let m = once.emitted_mask(SIDE);
            prop_assert_eq!(m.x + m.w, SIDE - spec.emitted_mask(SIDE).x);
        }
    }
}

#[test]
fn streams_are_reproducible() {
    let images = scenes(0, 8);
    assert_eq!(stream(&images, 200, 5), stream(&images, 200, 5));
    assert_ne!(stream(&images, 200, 5), stream(&images, 200, 6));
}

#[test]
fn stream_is_half_positive() {
    let images = scenes(0, 20);
    let specs = stream(&images, 5000, 1);
    let pos = specs
        .iter()
        .filter(|s| s.label == ClassLabel::Positive)
        .count();
    assert_eq!(specs.len(), 5000);
    assert_eq!(pos, 2500);
    // strict alternation
    for (i, s) in specs.iter().enumerate() {
        let expected = if i % 2 == 0 {
            ClassLabel::Positive
        } else {
            ClassLabel::Negative
        };
        assert_eq!(s.label, expected);
    }
}

#[test]
fn extra_negatives_follow_the_stream() {
    let images = scenes(0, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = stream(&images, 10, 2);
    let extra = vec![base[1].with_flip(false); 3];
    let (specs, _) = epoch_stream(&images, 10, SIDE, &desk_sampling(), &extra, &mut rng).unwrap();
    assert_eq!(specs.len(), 13);
    for s in &specs[10..] {
        assert_eq!(s.with_flip(false), extra[0]);
    }
}
