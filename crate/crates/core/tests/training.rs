use lascl::corpus::{generate_synthetic, SyntheticConfig};
use lascl::training::train;
use lascl::{LossVariant, TemplateSpec, TrainConfig};

fn moving_average(xs: &[f64], window: usize) -> (f64, f64) {
    let head = xs[..window].iter().sum::<f64>() / window as f64;
    let tail = xs[xs.len() - window..].iter().sum::<f64>() / window as f64;
    (head, tail)
}

#[test]
fn lisc_on_default_corpus_learns() {
    let corpus = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let cfg = TrainConfig {
        variant: LossVariant::Lisc,
        ..TrainConfig::default()
    };
    let out = train::<f64>(
        &cfg,
        &corpus.train,
        &corpus.validation,
        &corpus.tree,
        &TemplateSpec::default(),
        None,
    )
    .unwrap();
    let best = out.best();
    assert!(best.val_node_acc > 0.9, "best validation nodeAcc {}", best.val_node_acc);
    assert!(best.val_node_acc > out.initial_val_node_acc);

    let losses: Vec<f64> = out.history().iter().map(|r| r.loss).collect();
    let (start, end) = moving_average(&losses, 50);
    assert!(end < start, "loss moving average {start} -> {end}");

    let steps: Vec<usize> = out.history().iter().map(|r| r.step).collect();
    assert!(steps.windows(2).all(|w| w[1] == w[0] + 1));
    assert!(out.history().iter().all(|r| r.lr >= 0.0 && r.lr <= cfg.lr));
}

#[test]
fn every_variant_lowers_its_loss() {
    let corpus = generate_synthetic(&SyntheticConfig {
        per_class: 40,
        ..SyntheticConfig::default()
    })
    .unwrap();
    for v in LossVariant::ALL {
        let cfg = TrainConfig {
            variant: v,
            epochs: 10,
            ..TrainConfig::default()
        };
        let out = train::<f64>(
            &cfg,
            &corpus.train,
            &corpus.validation,
            &corpus.tree,
            &TemplateSpec::default(),
            None,
        )
        .unwrap();
        let losses: Vec<f64> = out.history().iter().map(|r| r.loss).collect();
        let (start, end) = moving_average(&losses, 20);
        assert!(end < start, "{v}: {start} -> {end}");
    }
}

#[test]
fn f32_training_runs() {
    let corpus = generate_synthetic(&SyntheticConfig {
        branches: 2,
        leaves_per_branch: 2,
        per_class: 20,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let out = train::<f32>(
        &cfg,
        &corpus.train,
        &corpus.validation,
        &corpus.tree,
        &TemplateSpec::default(),
        None,
    )
    .unwrap();
    assert!(out.state.encoder.is_finite());
    assert!(out.history().iter().all(|r| r.loss.is_finite()));
}
