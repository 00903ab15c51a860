mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidnir_core::fso::fso_forward;

#[test]
fn tiny_model_gradients_match_finite_differences() {
    for seed in 0..5 {
        let r = tiny_gradient_check(seed, 1e-4);
        let frac = r.passed as f64 / r.checked as f64;
        assert!(frac >= 0.99, "seed {seed}: {}/{} within 1e-4 (worst {:.2e})", r.passed, r.checked, r.worst);
        assert_eq!(r.masked_nonzero, 0, "seed {seed}");
    }
}

#[test]
fn spectral_layer_matches_direct_dft() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..40 {
        let c = random_fso_case(&mut rng);
        let n = c.layer.weight_len();
        let ones = vec![true; n];
        let y = fso_forward(&c.x, &c.layer, &c.re, c.im.as_deref(), &ones, c.im.as_ref().map(|_| ones.as_slice())).unwrap();
        let want = fso_oracle(&c.x, c.layer.out_ch, (c.layer.modes_h, c.layer.modes_w), c.layer.spatial_out, &c.re, c.im.as_deref());
        let err = max_rel_err(&y, &want);
        assert!(err < 1e-10, "case {case}: {err:e}");
    }
}
