mod common;

use common::{image, quick, small, small_null};
use conceptshift::pipeline::metrics::psnr;
use conceptshift::pipeline::{
    ddim_invert_full, ddim_sample, IdentityCodec, LatentCodec, Reference, TranslationConfig, Translator,
};
use proptest::prelude::*;

#[test]
fn zero_content_steps_give_the_unconditional_round_trip() {
    let b = small();
    let null = small_null();
    let tr = Translator { backbone: &b, codec: &IdentityCodec, v_null: null.clone() };
    let mut cfg = quick(3.0, 8);
    cfg.hp.pti_inner_steps = Some(0);
    let x = image(41);
    let (_, p) = tr.reconstruct(&x, &cfg).unwrap();
    let z = IdentityCodec.encode(&x).unwrap();
    let (z_t, _) = ddim_invert_full(&z, &b, &null, 8).unwrap();
    let base = IdentityCodec.decode(&ddim_sample(&z_t, &b, &null, 8).unwrap()).unwrap();
    let expected = psnr(&base, &x).unwrap();
    assert!((p - expected).abs() < 1e-9, "{p} vs {expected}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn translation_is_reproducible(seed in 0u64..1000, w in 1.0f64..4.0) {
        let b = small();
        let tr = Translator { backbone: &b, codec: &IdentityCodec, v_null: small_null() };
        let cfg = TranslationConfig { seed, ..quick(w, 4) };
        let (x_src, x_ref) = (image(seed), image(seed + 1));
        let a = tr.translate(&x_src, Reference::Image(&x_ref), &cfg).unwrap();
        let b2 = tr.translate(&x_src, Reference::Image(&x_ref), &cfg).unwrap();
        prop_assert_eq!(&a.x_tgt, &b2.x_tgt);
        prop_assert_eq!(&a.x_rec, &b2.x_rec);
        prop_assert_eq!(a.diagnostics.len(), 4);
        prop_assert!(a.x_tgt.data.iter().all(|v| v.is_finite()));
    }
}
