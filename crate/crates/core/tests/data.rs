use modalfuse::data::{
    caption, caption_class, decode, encode, oracle_classify, render_latent, template, Class,
    DataConfig, Geometry, ToyDataset, VOCAB,
};
use modalfuse::model::{Token, BOI, BOS, EOI, EOS, NULL};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn every_class_survives_jittered_rendering() {
    let g = Geometry::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for class in Class::all() {
        for _ in 0..100 {
            let x = render_latent(&g, class, 0.05, &mut rng);
            assert!(x.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(oracle_classify(&g, &x).class, Some(class));
        }
        let clean = oracle_classify(&g, &template(&g, class));
        assert_eq!(clean.class, Some(class));
        assert_eq!(clean.distance, 0.0);
    }
}

#[test]
fn gaussian_noise_is_rejected() {
    let g = Geometry::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rejected = (0..1000)
        .filter(|_| {
            let x: Vec<f32> = (0..g.numel()).map(|_| rng.sample(StandardNormal)).collect();
            oracle_classify(&g, &x).class.is_none()
        })
        .count();
    assert!(rejected >= 990, "{rejected}");
}

#[test]
fn oracle_labels_every_fresh_dataset_sample_correctly() {
    let ds = ToyDataset::new(17, DataConfig::default());
    for i in 0..10_000 {
        let s = ds.item(i).sample;
        assert_eq!(oracle_classify(&ds.cfg.geometry, &s.latent).class, Some(s.class), "item {i}");
    }
}

#[test]
fn caption_first_frequency_matches_ordering_probability() {
    let ds = ToyDataset::new(2, DataConfig::default());
    let n = 10_000;
    let first = (0..n).filter(|&i| ds.item(i).caption_first).count();
    let f = first as f64 / n as f64;
    assert!((0.78..=0.82).contains(&f), "{f}");

    let always = ToyDataset::new(2, DataConfig { ordering_p: 1.0, ..Default::default() });
    assert!((0..1000).all(|i| always.item(i).caption_first));
}

#[test]
fn classes_are_uniform() {
    let ds = ToyDataset::new(3, DataConfig::default());
    let mut hist = [0usize; 16];
    for i in 0..16_000 {
        hist[ds.item(i).sample.class.index()] += 1;
    }
    for (k, &c) in hist.iter().enumerate() {
        assert!((950..=1050).contains(&c), "class {k}: {c}");
    }
}

#[test]
fn same_seed_same_items() {
    let a = ToyDataset::new(9, DataConfig::default());
    let b = ToyDataset::new(9, DataConfig::default());
    let c = ToyDataset::new(10, DataConfig::default());
    assert_eq!(a.batch(0, 32).unwrap(), b.batch(0, 32).unwrap());
    assert_ne!(a.batch(0, 32).unwrap(), c.batch(0, 32).unwrap());
    assert_eq!(a.item(123), a.item(123));
}

#[test]
fn streams_are_valid_and_bracketed() {
    let ds = ToyDataset::new(4, DataConfig::default());
    let g = ds.cfg.geometry;
    for i in 0..500 {
        let it = ds.item(i);
        let s = it.stream(&g).unwrap();
        s.validate(VOCAB.len(), g.patches_per_image(), g.patch_dim()).unwrap();
        let ids = s.text_ids();
        assert_eq!((ids[0], *ids.last().unwrap()), (BOS, EOS));
        let cap = if it.caption_dropped { vec![NULL] } else { it.sample.caption.clone() };
        let mut want = vec![BOS];
        if it.caption_first {
            want.extend(&cap);
            want.extend([BOI, EOI]);
        } else {
            want.extend([BOI, EOI]);
            want.extend(&cap);
        }
        want.push(EOS);
        assert_eq!(ids, want, "item {i}");
        let latent: Vec<f32> = s
            .tokens()
            .iter()
            .filter_map(|t| match t {
                Token::Patch(p) => Some(p.clone()),
                _ => None,
            })
            .flatten()
            .collect();
        assert_eq!(g.unpatchify(&latent).unwrap(), it.sample.latent);
    }
}

#[test]
fn dropout_only_hits_caption_first_items() {
    let ds = ToyDataset::new(5, DataConfig::default());
    let items: Vec<_> = (0..5000).map(|i| ds.item(i)).collect();
    assert!(items.iter().all(|it| it.caption_first || !it.caption_dropped));
    let dropped = items.iter().filter(|it| it.caption_dropped).count() as f64;
    let first = items.iter().filter(|it| it.caption_first).count() as f64;
    assert!((dropped / first - 0.1).abs() < 0.02);
}

proptest! {
    #[test]
    fn captions_decode_to_their_class(k in 0usize..16, filler in proptest::option::of(0u32..10)) {
        let class = Class::from_index(k);
        let ids = caption(class, filler);
        prop_assert_eq!(caption_class(&ids), Some(class));
        prop_assert_eq!(encode(&decode(&ids)).unwrap(), ids);
    }

    #[test]
    fn rendering_is_a_function_of_the_seed(k in 0usize..16, seed in any::<u64>()) {
        let g = Geometry::default();
        let class = Class::from_index(k);
        let a = render_latent(&g, class, 0.05, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = render_latent(&g, class, 0.05, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, b);
    }
}
