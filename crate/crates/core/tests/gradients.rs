//! Finite-difference checks of the full training losses on a D=16 model.

use gmsa::autodiff::Tape;
use gmsa::config::{ModelConfig, Stage, Variant};
use gmsa::data::SampleRecord;
use gmsa::gradcheck::{finite_diff_check, GradCheckReport};
use gmsa::model::Model;
use gmsa::params::ParameterStore;
use gmsa::train::{example_loss, Example, TrainableMask};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn toy(variant: Variant) -> Model {
    let mut m = Model::new(ModelConfig {
        hidden_size: 16,
        num_heads: 2,
        num_kv_heads: 2,
        intermediate_size: 24,
        decoder_layers: 2,
        encoder_layers: 2,
        lsa_layers: 1,
        lora_rank: 2,
        init_std: 0.3,
        tcp_max_tokens: 8,
        ..ModelConfig::default()
    })
    .unwrap();
    m.attach_compressor(variant).unwrap();
    // LoRA B starts at zero, which would hide the gradient of A.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let normal = Normal::new(0.0, 0.3).unwrap();
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        let p = m.store.get_mut(id);
        if p.name.ends_with("lora_b") {
            p.value.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
    }
    m
}

fn check(mut model: Model, stage: Stage, ex: Example, rate: Option<usize>, h: f64) -> GradCheckReport {
    TrainableMask::for_stage(&model, stage, false)
        .unwrap()
        .apply(&mut model.store)
        .unwrap();
    model.store.zero_grads();
    let mut tape = Tape::new();
    let loss = example_loss(&mut tape, &model, &ex, rate).unwrap();
    tape.backward(loss).unwrap();
    model.store.accumulate_grads(&tape, 1.0);

    let template = model.clone();
    let f = |store: &ParameterStore| {
        let m = Model {
            store: store.clone(),
            ..template.clone()
        };
        let mut tape = Tape::inference();
        let loss = example_loss(&mut tape, &m, &ex, rate)?;
        Ok(tape.value(loss).item())
    };
    let report = finite_diff_check(f, &mut model.store, h, 1e-4).unwrap();
    let (name, worst) = report.worst().unwrap();
    println!("{stage}: {} entries, worst {name}: {worst:?}", report.checked_entries());
    report
}

fn record() -> SampleRecord {
    let mut r = SampleRecord::restoration("g", "ab=12;cd=7");
    r.question = Some("cd?".into());
    r.answers = Some(vec!["7".into()]);
    r
}

#[test]
fn autoencoder_loss_gradients() {
    let report = check(toy(Variant::Gmsa), Stage::Ae, Example::ae(&record()), Some(3), 1e-5);
    assert!(report.passed(), "max rel err {}", report.max_rel_err());
    assert!(report.checked_entries() > 1000);
}

#[test]
fn keft_loss_gradients() {
    let report = check(toy(Variant::Gmsa), Stage::Keft, Example::keft(&record()).unwrap(), Some(4), 1e-5);
    assert!(report.passed(), "max rel err {}", report.max_rel_err());
}

#[test]
fn tcp_autoencoder_loss_gradients() {
    let report = check(toy(Variant::Tcp), Stage::Ae, Example::ae(&record()), Some(2), 1e-5);
    assert!(report.passed(), "max rel err {}", report.max_rel_err());
}

#[test]
fn pretraining_loss_gradients() {
    let ex = Example::lm(vec![1, 40, 41], vec![42, 43, 2]);
    // The head's unused vocabulary columns get gradients near 1e-7, where a
    // 1e-5 step drowns in rounding of the ~5.5 loss.
    let report = check(toy(Variant::Gmsa), Stage::Pretrain, ex, None, 1e-4);
    assert!(report.passed(), "max rel err {}", report.max_rel_err());
}
