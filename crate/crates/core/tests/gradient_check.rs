use tlalign::mixing::{cutmix, mixup};
use tlalign::trainer::{gradient_check, GradCheckOptions, TrainConfig};
use tlalign::vit::{ModelConfig, ModelParams, Pooling};
use tlalign::{Image, Rng};

fn tiny(pooling: Pooling) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        depth: 2,
        dim: 8,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        pooling,
    }
}

fn image(rng: &mut Rng) -> Image {
    Image::new(8, 8, 1, (0..64).map(|_| rng.uniform() as f32).collect()).unwrap()
}

#[test]
fn analytic_gradients_match_central_differences() {
    for pooling in [Pooling::ClassToken, Pooling::GlobalPool] {
        for seed in 0..3 {
            let mut rng = Rng::new(seed);
            let params = ModelParams::<f64>::init(&tiny(pooling), &mut rng).unwrap();
            let (x1, x2) = (image(&mut rng), image(&mut rng));
            let (mixed, spec) = if seed % 2 == 0 {
                cutmix(&x1, &x2, 0, 2, &mut rng).unwrap()
            } else {
                mixup(&x1, &x2, 1, 0, 1.0, &mut rng).unwrap()
            };
            for tl_align in [false, true] {
                let config = TrainConfig {
                    tl_align,
                    label_smoothing: 0.1,
                    ..TrainConfig::default()
                };
                let options = GradCheckOptions {
                    seed,
                    ..GradCheckOptions::default()
                };
                let r = gradient_check(&params, &mixed, &spec, &config, &options).unwrap();
                assert!(r.entries.len() >= 50);
                assert_eq!(r.tensors_covered, params.tensors().len());
                assert!(
                    r.max_relative_error < 1e-4,
                    "{pooling:?} seed {seed} tl_align {tl_align}: {}",
                    r.max_relative_error
                );
            }
        }
    }
}
