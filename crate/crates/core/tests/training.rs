use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use softmask::backbone::{BackboneConfig, Model};
use softmask::corpus::{eos_padded_windows, gen_synthetic, GrammarSpec, TokenId};
use softmask::softmask::SmParams;
use softmask::training::{
    draw_step, first_pass, objective_and_grads, Adam, Gradients, TrainConfig, Trainer,
};

fn grammar_windows(n: usize, len: usize) -> (Vec<Vec<TokenId>>, usize) {
    let spec = GrammarSpec::mod_arith(5, "+-", 13);
    let vocab = spec.vocab().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = eos_padded_windows(&gen_synthetic(&spec, n, 2).unwrap(), len, vocab.eos_id(), 3, &mut rng).unwrap();
    (w, vocab.size())
}

fn model(vocab: usize, len: usize) -> Model<f32> {
    Model::new(
        BackboneConfig {
            layers: 1,
            heads: 2,
            model_dim: 16,
            vocab_size: vocab,
            max_len: len,
            time_conditioned: true,
            mlp_ratio: 2,
            time_buckets: 8,
        },
        5,
    )
    .unwrap()
}

#[test]
fn first_pass_is_detached() {
    let (w, v) = grammar_windows(8, 16);
    let m = model(v, 16).cast::<f64>();
    let mut sm = SmParams::init(-1.5, v).unwrap();
    sm.raw_s = 1.0;
    sm.p_sm = 1.0;
    let draw = draw_step(&w[..4], &TrainConfig::new(1e-3, 4, 1, 0), 1.0, (v - 1) as TokenId, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    let pt = first_pass(&m, &draw).unwrap();
    let frozen = pt.clone();
    let (l1, g1) = objective_and_grads(&m, &sm, &draw, Some(&pt)).unwrap();
    let (l2, g2) = objective_and_grads(&m, &sm, &draw, Some(&frozen)).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1.backbone, g2.backbone);
    assert_eq!(g1.sm, g2.sm);
}

#[test]
fn sm_group_moves_by_its_own_rate() {
    let mut opt = Adam::<f64>::new(1);
    let mut params = [0.0f64];
    let mut raw = [0.0f64; 4];
    let grads = Gradients { backbone: vec![1.0], sm: [1.0; 4] };
    opt.update(&mut params, &mut raw, &grads, 1e-4, 1e-2);
    let ratio = raw[0] / params[0];
    assert!((ratio - 100.0).abs() < 1e-6, "ratio {ratio}");
}

#[test]
fn binary_only_training_ignores_sm_parameters() {
    let (w, v) = grammar_windows(16, 16);
    let mut sm = SmParams::init(-1.5, v).unwrap();
    sm.p_sm = 0.0;
    let mut tr = Trainer::new(model(v, 16), sm.clone(), TrainConfig::new(3e-3, 4, 10, 3)).unwrap();
    tr.run(&w, |_, _| Ok(())).unwrap();
    assert_eq!(tr.sm, sm);
}

#[test]
fn loss_moving_average_decreases() {
    let (w, v) = grammar_windows(200, 16);
    let mut cfg = TrainConfig::new(5e-4, 32, 1000, 4);
    cfg.grad_clip_norm = Some(1.0);
    let mut tr = Trainer::new(model(v, 16), SmParams::init(-1.5, v).unwrap(), cfg).unwrap();
    let mut losses = Vec::new();
    tr.run(&w, |_, row| {
        losses.push(row.loss);
        Ok(())
    })
    .unwrap();
    let ma: Vec<f64> = losses.windows(100).map(|x| x.iter().sum::<f64>() / 100.0).collect();
    // Each 100-step average against the one a full window earlier.
    let pairs: Vec<(f64, f64)> = (100..ma.len()).map(|k| (ma[k - 100], ma[k])).collect();
    let down = pairs.iter().filter(|(a, b)| b < a).count();
    let frac = down as f64 / pairs.len() as f64;
    assert!(frac >= 0.95, "only {frac:.3} of windows decreased; first {:.3} last {:.3}", ma[0], ma[ma.len() - 1]);
}
