use asuka_core::align::mae_patch_mask;
use asuka_core::decoder::{build_training_pair, composite, masked_image, Augmentation};
use asuka_core::mask::{dilate, expand_to_patch_ratio, jagged_downsample, patchify_mask, sample_mask, synthetic_object_pool, MaskRecipe};
use asuka_core::metrics::gradient_at_edge;
use asuka_core::models::corpus::toy_corpus;
use asuka_core::models::denoiser::latent_mask;
use asuka_core::models::vae::{train_vae, VaeTrainConfig};
use asuka_core::models::{Vae, VaeConfig};
use asuka_core::nn::ParamStore;
use asuka_core::rng::seeded;

#[test]
fn sampled_masks_flow_through_every_transform() {
    let mut rng = seeded(1);
    let pool = synthetic_object_pool(&mut rng, 8, 32);
    let recipe = MaskRecipe::default();
    for _ in 0..50 {
        let s = sample_mask(&mut rng, 64, 64, &pool, &recipe).unwrap();
        let m = s.mask;
        assert!(m.ratio() >= recipe.ratio_min && m.ratio() <= recipe.ratio_max);
        if let Some(obj) = &s.object {
            assert!(obj.is_subset_of(&m));
        }
        let grown = dilate(&m, 5).unwrap();
        assert!(m.is_subset_of(&grown));
        let low = jagged_downsample(&grown, 8).unwrap();
        assert_eq!(low.dims(), (8, 8));
        let pm = patchify_mask(&m, 16).unwrap();
        match expand_to_patch_ratio(&m, 16, 0.75, &mut rng) {
            Ok(expanded) => {
                assert!(expanded.is_superset_of(&pm));
                assert_eq!(expanded.count(), 12);
            }
            Err(e) => {
                assert!(pm.count() > 12, "{e}");
                assert_eq!(mae_patch_mask(&m, 16, 0.75, &mut rng).unwrap(), pm);
            }
        }
        let lat = latent_mask(&m, 8).unwrap();
        assert_eq!(lat.shape(), (64, 1));
    }
}

#[test]
fn trained_autoencoder_survives_a_checkpoint_round_trip() {
    let corpus = toy_corpus(3, 8, 64);
    let mut rng = seeded(2);
    let mut vae = Vae::new(VaeConfig::default(), &mut rng);
    let trace = train_vae(&mut vae, &corpus, &VaeTrainConfig { steps: 30, batch: 2, ..VaeTrainConfig::default() }, &mut rng).unwrap();
    assert_eq!(trace.len(), 30);

    let dir = tempfile::tempdir().unwrap();
    vae.encoder.store.save(&dir.path().join("enc"), "h").unwrap();
    vae.decoder.store.save(&dir.path().join("dec"), "h").unwrap();
    let (enc, hash) = ParamStore::load(&dir.path().join("enc")).unwrap();
    let (dec, _) = ParamStore::load(&dir.path().join("dec")).unwrap();
    assert_eq!(hash, "h");
    let back = Vae::from_stores(VaeConfig::default(), enc, dec).unwrap();
    let img = &corpus[0];
    let z = vae.encode(img).unwrap();
    assert_eq!(back.encode(img).unwrap(), z);
    assert_eq!(back.decode(&z, 64, 64).unwrap(), vae.decode(&z, 64, 64).unwrap());

    // A store from another configuration is rejected.
    let other = Vae::new(VaeConfig { hidden: 32, ..VaeConfig::default() }, &mut rng);
    assert!(Vae::from_stores(VaeConfig::default(), other.encoder.store.clone(), other.decoder.store.clone()).is_err());
}

#[test]
fn decoder_pairs_and_composites_keep_known_pixels() {
    let corpus = toy_corpus(4, 2, 64);
    let mut rng = seeded(3);
    let vae = Vae::new(VaeConfig::default(), &mut rng);
    let mask = asuka_core::mask::rect_mask(64, 64, (16, 48), (8, 40));
    let pair = build_training_pair(&vae, &corpus[0], &mask, Augmentation::Latent(&corpus[1]), &mut rng).unwrap();
    assert_eq!(pair.target, corpus[0]);
    assert_eq!(pair.cond_image, masked_image(&corpus[0], &mask).unwrap());

    let decoded = vae.decode_cond(&pair.corrupt_latent, &pair.cond_image, &mask).unwrap();
    let out = composite(&decoded, &corpus[0], &mask).unwrap();
    for r in 0..64 {
        for c in 0..64 {
            let want = if mask.get(r, c) { decoded.pixel(r, c) } else { corpus[0].pixel(r, c) };
            assert_eq!(out.pixel(r, c), want);
        }
    }
    assert!(gradient_at_edge(&out, &corpus[0], &mask).unwrap() >= 0.0);
}
