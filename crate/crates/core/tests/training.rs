use arcvq::codebook::init_codebook;
use arcvq::config::{DataSource, TrainConfig};
use arcvq::data::synth_dataset;
use arcvq::graph::Graph;
use arcvq::losses::{arc_loss, Variant};
use arcvq::probe;
use arcvq::quantizer::{quantize, top_k_sets, QuantizeMode};
use arcvq::tensor::Tensor;
use arcvq::trainer::{
    adam_update, batch_indices, load_checkpoint, run_on, save_checkpoint, schedules, Adam,
    MetricsLog, Trainer,
};
use arcvq::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(variant: Variant, epochs: usize, out: &std::path::Path) -> TrainConfig {
    TrainConfig {
        variant,
        codebook_size: 16,
        dim: 8,
        patch: 4,
        hidden: 16,
        batch_size: 8,
        epochs,
        learning_rate: 1e-2,
        data: DataSource::Synth {
            train_count: 32,
            val_count: 16,
            side: 8,
            clusters: 4,
            seed: 3,
        },
        out_dir: out.to_path_buf(),
        ..TrainConfig::default()
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Trains `steps` steps and checks the ball invariant after each one.
fn instrumented(variant: Variant, steps: u64) -> (u64, usize) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(variant, 1, dir.path());
    let train = synth_dataset(32, 8, 4, 3).unwrap();
    let mut state = Trainer::new(cfg.clone(), 8).unwrap();
    let mut rescaled = 0;
    for t in 0..steps {
        let idx = batch_indices(cfg.seed, t, train.len(), cfg.batch_size);
        let r = state.train_step(&train.batch(&idx)).unwrap();
        let (gamma, bound) = schedules(&cfg, r.step);
        assert_eq!(r.step, t);
        assert_eq!(r.breakdown.gamma_t, Some(gamma));
        assert_eq!(r.breakdown.m_t, Some(bound));
        assert!(
            r.max_norm <= bound * (1.0 + 1e-6),
            "step {t}: max norm {} above M = {bound}",
            r.max_norm
        );
        rescaled += r.rescaled;
    }
    (state.step(), rescaled)
}

#[test]
fn ball_invariant_full_500_steps() {
    let (steps, rescaled) = instrumented(Variant::Full, 500);
    assert_eq!(steps, 500);
    assert!(rescaled > 0, "bound never became active");
}

#[test]
fn ball_invariant_fixed_bound_500_steps() {
    let (_, rescaled) = instrumented(Variant::FixedBound, 500);
    assert!(rescaled > 0);
}

#[test]
fn arc_loss_never_reaches_codebook() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let n = rng.gen_range(2..20);
        let k = rng.gen_range(1..10);
        let d = rng.gen_range(2..8);
        let z = random_tensor(&mut rng, n, d);
        let e = random_tensor(&mut rng, k, d);
        let cb = arcvq::codebook::Codebook::from_entries(
            e.clone(),
            0.0,
            arcvq::codebook::BoundMode::Unbounded,
        );
        let cos = quantize(&z, &cb, QuantizeMode::Spherical).unwrap().cos_table.unwrap();
        let sets = top_k_sets(&cos, rng.gen_range(1..6)).unwrap();
        let mut g = Graph::new();
        let zn = g.param(z);
        let en = g.param(e);
        let out = arc_loss(&mut g, zn, en, &sets, 10.0, 0.3).unwrap();
        g.backward(out.node).unwrap();
        if let Some(grad) = g.grad(en) {
            assert!(grad.data().iter().all(|&v| v == 0.0));
        }
        if sets.sets[0].len() < n {
            assert!(g.grad(zn).unwrap().data().iter().any(|&v| v != 0.0));
        }
    }
}

#[test]
fn adam_constant_gradient_step_is_lr() {
    let lr = 1e-3;
    let mut p = Tensor::from_vec(vec![0.0, 0.0]);
    let g = Tensor::from_vec(vec![0.7, -2.5]);
    let mut st = Adam::new([&p]);
    let mut prev = p.clone();
    for _ in 0..5000 {
        prev = p.clone();
        adam_update(&mut [&mut p], &[&g], &mut st, lr).unwrap();
    }
    for (a, b) in p.data().iter().zip(prev.data()) {
        assert!(((a - b).abs() - lr).abs() < 1e-7 * lr.max(1.0), "{}", (a - b).abs());
    }
}

#[test]
fn resume_matches_uninterrupted_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Variant::Full, 1, dir.path());
    let train = synth_dataset(32, 8, 4, 3).unwrap();
    let batch = |t| train.batch(&batch_indices(cfg.seed, t, train.len(), cfg.batch_size));
    let mut a = Trainer::new(cfg.clone(), 8).unwrap();
    for t in 0..5 {
        a.train_step(&batch(t)).unwrap();
    }
    let path = dir.path().join("mid.avqc");
    save_checkpoint(&a, &path).unwrap();
    let mut b = load_checkpoint(&path).unwrap();
    assert_eq!(b.step(), 5);
    assert_eq!(b.to_tensors(), a.to_tensors());

    let ra = a.train_step(&batch(5)).unwrap();
    let rb = b.train_step(&batch(5)).unwrap();
    assert_eq!(ra.breakdown, rb.breakdown);
    for ((na, ta), (nb, tb)) in a.to_tensors().iter().zip(&b.to_tensors()) {
        assert_eq!(na, nb);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb), "tensor {na} diverged");
    }
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let state = Trainer::new(small(Variant::Vanilla, 1, dir.path()), 8).unwrap();
    let path = dir.path().join("c.avqc");
    save_checkpoint(&state, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[1] ^= 0xFF;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

    bytes[1] ^= 0xFF;
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Io(_))));
}

#[test]
fn metrics_csv_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let read = |variant| {
        let cfg = small(variant, 2, dir.path());
        let train = synth_dataset(32, 8, 4, 3).unwrap();
        let val = synth_dataset(16, 8, 4, 4).unwrap();
        let s = run_on(&cfg, &train, &val, |_| {}).unwrap();
        (std::fs::read(&s.csv).unwrap(), std::fs::read(&s.checkpoint).unwrap())
    };
    for v in [Variant::Full, Variant::Vanilla] {
        let (csv_a, ckpt_a) = read(v);
        let (csv_b, ckpt_b) = read(v);
        assert_eq!(csv_a, csv_b);
        assert_eq!(ckpt_a, ckpt_b);
        let text = String::from_utf8(csv_a).unwrap();
        assert_eq!(text.lines().count(), 1 + 8);
    }
}

#[test]
fn vanilla_never_normalizes_or_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Variant::Vanilla, 2, dir.path());
    let train = synth_dataset(32, 8, 4, 3).unwrap();
    let val = synth_dataset(16, 8, 4, 4).unwrap();
    probe::reset();
    run_on(&cfg, &train, &val, |_| {}).unwrap();
    assert_eq!(probe::counts(), probe::CallCounts::default());

    let cfg = small(Variant::Full, 2, dir.path());
    probe::reset();
    run_on(&cfg, &train, &val, |_| {}).unwrap();
    let c = probe::counts();
    assert!(c.normalize_rows > 0 && c.arc_loss == 8 && c.apply_bound == 8, "{c:?}");
}

#[test]
fn variant_mechanisms() {
    let dir = tempfile::tempdir().unwrap();
    let train = synth_dataset(32, 8, 4, 3).unwrap();
    let batch = train.batch(&[0, 1, 2, 3]);
    for v in Variant::ALL {
        let mut st = Trainer::new(small(v, 1, dir.path()), 8).unwrap();
        probe::reset();
        let r = st.train_step(&batch).unwrap();
        let c = probe::counts();
        assert_eq!(r.breakdown.arc.is_some(), v.uses_arc(), "{v}");
        assert_eq!(c.arc_loss > 0, v.uses_arc(), "{v}");
        assert_eq!(c.apply_bound > 0, r.breakdown.m_t.is_some(), "{v}");
        assert_eq!(c.normalize_rows > 0, v.quantize_mode() == QuantizeMode::Spherical, "{v}");
        let norms = Trainer::new(small(v, 1, dir.path()), 8).unwrap().codebook.entries.row_norms();
        let unit = norms.iter().all(|n| (n - 1.0).abs() <= 1e-6);
        assert_eq!(unit, v.spherical_init(), "{v}");
    }
}

#[test]
fn evaluation_resets_usage_window() {
    let dir = tempfile::tempdir().unwrap();
    let mut st = Trainer::new(small(Variant::Full, 1, dir.path()), 8).unwrap();
    let val = synth_dataset(16, 8, 4, 4).unwrap();
    let first = st.evaluate(&val).unwrap();
    let second = st.evaluate(&val).unwrap();
    assert_eq!(first, second);
    let tokens = 16 * 4;
    assert_eq!(st.codebook.usage_counts.iter().sum::<u64>(), tokens);
    assert!(first.ssim_global_fallback);
}

#[test]
fn replaced_codebook_keeps_training() {
    let dir = tempfile::tempdir().unwrap();
    let train = synth_dataset(32, 8, 4, 3).unwrap();
    let mut st = Trainer::new(small(Variant::Full, 1, dir.path()), 8).unwrap();
    st.train_step(&train.batch(&[0, 1])).unwrap();
    let reduced = arcvq::codebook::kmeans_reduce(&st.codebook, 4, 5, 0).unwrap();
    st.replace_codebook(reduced);
    assert_eq!(st.codebook.len(), 4);
    st.train_step(&train.batch(&[2, 3])).unwrap();
    assert_eq!(st.step(), 2);

    let init = init_codebook(4, 8, 1).unwrap().with_bound(st.config.alpha, st.codebook.bound_mode);
    st.replace_codebook(init);
    let path = dir.path().join("r.avqc");
    st.save(&path).unwrap();
    let back = Trainer::load(&path).unwrap();
    assert_eq!(back.config.codebook_size, 4);
}

#[test]
fn metrics_log_append_writes_header_once() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    drop(MetricsLog::append(&path).unwrap());
    drop(MetricsLog::append(&path).unwrap());
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("step,total,recon,codebook,commit,arc,gamma,M,max_norm,"));
}
