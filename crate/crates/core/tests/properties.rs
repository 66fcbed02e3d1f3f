//! Property tests for invariants that hold for every input.

use ndarray::{Array1, Array2};
use packvae::checkpoint;
use packvae::config::RunConfig;
use packvae::dc_loss::{discriminate, draw_split, log_sigmoid, sigmoid, softplus, DiscriminatorParams};
use packvae::model::{kl_to_standard, Architecture, DiagonalGaussian, LatentConfig};
use packvae::pack_data::{sample_pack_size, Image, PackSizeSampler};
use packvae::rng::rng_for;
use packvae::silhouettes::{factor_schema, factor_targets, SilhouetteSpec, CELLS};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn disc_arch() -> Architecture {
    Architecture {
        latent: LatentConfig { domain_dim: 3, content_dim: 4 },
        disc_element: vec![8, 8],
        disc_head: vec![8, 4],
        ..Architecture::compact(16, 16, 1)
    }
}

fn codes(rows: usize, cols: usize, values: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(r, c)| values[(r * cols + c) % values.len()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn split_sides_are_nonempty_and_cover_the_pack(k in 2usize..64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let split = draw_split(k, &mut rng).unwrap();
        prop_assert!(split.validate(k).is_ok());
        prop_assert_eq!(split.a.len() + split.b.len(), k);
    }

    #[test]
    fn split_rejects_packs_below_two(k in 0usize..2, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert!(draw_split(k, &mut rng).is_err());
    }

    #[test]
    fn softplus_identities_hold_without_overflow(t in -1e4f64..1e4) {
        let sp = softplus(t);
        prop_assert!(sp.is_finite() && sp >= 0.0);
        prop_assert!((sp - softplus(-t) - t).abs() <= 1e-9 * t.abs().max(1.0));
        prop_assert_eq!(log_sigmoid(t), -softplus(-t));
        let s = sigmoid(t);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s + sigmoid(-t) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn kl_to_standard_is_nonnegative(
        mean in prop::collection::vec(-5.0f64..5.0, 1..12),
        log_var in prop::collection::vec(-6.0f64..6.0, 12),
    ) {
        let d = mean.len();
        let g = DiagonalGaussian::new(Array1::from(mean), Array1::from(log_var[..d].to_vec())).unwrap();
        prop_assert!(kl_to_standard(&g) >= -1e-12);
    }

    #[test]
    fn kl_vanishes_at_the_prior(d in 1usize..12) {
        prop_assert_eq!(kl_to_standard(&DiagonalGaussian::<f64>::standard(d)), 0.0);
    }

    #[test]
    fn pack_sizes_respect_the_base(base in 1usize..10, rate in 0.1f64..20.0, seed in any::<u64>()) {
        let sampler = PackSizeSampler { base, rate };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..32 {
            prop_assert!(sample_pack_size(&sampler, &mut rng) >= base);
        }
    }

    #[test]
    fn silhouette_records_round_trip(
        cells in prop::collection::vec(any::<bool>(), CELLS),
        pitch in 0.0f64..=90.0,
        yaw in 0.0f64..=90.0,
    ) {
        let mut occupancy = [false; CELLS];
        occupancy.copy_from_slice(&cells);
        let spec = SilhouetteSpec { occupancy, pitch, yaw };
        let record = spec.to_record();
        prop_assert_eq!(SilhouetteSpec::from_record(&record).unwrap(), spec.clone());
        let (shape, rotation) = factor_targets(&factor_schema(), &record).unwrap();
        prop_assert!(shape.iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(rotation, [pitch, yaw]);
    }

    #[test]
    fn png_images_round_trip(h in 1usize..12, w in 1usize..12, c in prop::sample::select(vec![1usize, 3]), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<u8> = (0..h * w * c).map(|_| rand::Rng::random(&mut rng)).collect();
        let image = Image::new(h, w, c, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        image.save_png(&path).unwrap();
        prop_assert_eq!(Image::load(&path).unwrap(), image);
    }

    #[test]
    fn config_text_round_trips(
        seed in any::<u64>(),
        lr in 1e-6f64..1e-2,
        lambda in 0.0f64..500.0,
        epochs in 1usize..1000,
        compact in any::<bool>(),
    ) {
        let mut cfg = RunConfig::default();
        cfg.set("seed", &seed.to_string()).unwrap();
        cfg.set("train.learning_rate", &lr.to_string()).unwrap();
        cfg.set("train.lambda_dc", &lambda.to_string()).unwrap();
        cfg.set("train.epochs", &epochs.to_string()).unwrap();
        if compact {
            cfg.set("model.preset", "compact").unwrap();
        }
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), text);
    }

    #[test]
    fn discriminator_ignores_row_order(
        rows_a in 1usize..8,
        rows_b in 1usize..8,
        values in prop::collection::vec(-3.0f64..3.0, 64),
        seed in any::<u64>(),
    ) {
        let arch = disc_arch();
        let disc = DiscriminatorParams::<f64>::new(&arch, &mut rng_for(seed, "disc"));
        let a = codes(rows_a, 4, &values);
        let b = codes(rows_b, 4, &values[7..]);
        let logit = discriminate(&disc, &a, &b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pa: Vec<usize> = (0..rows_a).collect();
        let mut pb: Vec<usize> = (0..rows_b).collect();
        pa.shuffle(&mut rng);
        pb.shuffle(&mut rng);
        let shuffled = discriminate(&disc, &a.select(ndarray::Axis(0), &pa), &b.select(ndarray::Axis(0), &pb)).unwrap();
        prop_assert!((logit - shuffled).abs() <= 1e-9 * logit.abs().max(1.0));
    }

    #[test]
    fn discriminator_rejects_wrong_widths(width in prop::sample::select(vec![1usize, 3, 5, 9])) {
        let disc = DiscriminatorParams::<f64>::new(&disc_arch(), &mut rng_for(0, "disc"));
        let bad = Array2::<f64>::zeros((2, width));
        let good = Array2::<f64>::zeros((2, 4));
        prop_assert!(discriminate(&disc, &bad, &good).is_err());
        prop_assert!(discriminate(&disc, &good, &bad).is_err());
    }

    #[test]
    fn truncated_checkpoints_are_rejected(cut in 0usize..4096) {
        let bytes = tiny_checkpoint_bytes();
        let cut = cut % bytes.len();
        prop_assert!(checkpoint::from_bytes(&bytes[..cut]).is_err());
    }
}

fn tiny_checkpoint_bytes() -> Vec<u8> {
    use packvae::training::{TrainConfig, TrainState};
    use std::sync::OnceLock;
    static BYTES: OnceLock<Vec<u8>> = OnceLock::new();
    BYTES
        .get_or_init(|| {
            let arch = Architecture {
                encoder_channels: vec![2, 2, 2, 2],
                encoder_hidden: 4,
                decoder_channels: vec![2, 2],
                ..disc_arch()
            };
            let cfg = TrainConfig::default();
            let state = TrainState::init(&arch, &cfg).unwrap();
            checkpoint::to_bytes(&checkpoint::Checkpoint::from_state(&state, &cfg, "seed = 0\n"))
        })
        .clone()
}
