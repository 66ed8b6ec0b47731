use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rejuv_core::autograd::Tensor;
use rejuv_core::data::{Pair, ParallelCorpus, Split, TaskKind, TaskSpec, Vocab};
use rejuv_core::eval::perplexity;
use rejuv_core::model::{Gradients, ModelConfig, ParameterStore, Transformer};
use rejuv_core::pruning::{compute_mask, PruneMask, PruneSpec, Scope};
use rejuv_core::train::*;
use rejuv_core::Error;

fn tiny_config() -> ModelConfig {
    ModelConfig { vocab_size: 16, d_model: 16, n_heads: 2, ffn_dim: 32, enc_layers: 1, dec_layers: 1, max_len: 10, dropout: 0.1 }
}

fn tiny_corpus() -> ParallelCorpus {
    TaskSpec::new(TaskKind::MappedReverse, Vocab::new(16).unwrap(), (2, 5), 3).unwrap().generate(Split::Train, 200).unwrap()
}

fn opts() -> TrainOptions {
    TrainOptions { batch_size: 8, clip: Some(1.0), log_every: 1 }
}

fn plan(kind: PhaseKind, steps: u64) -> PhasePlan {
    PhasePlan {
        kind,
        steps,
        prune: (kind == PhaseKind::PruTrain).then(|| PruneSpec::new(0.5, Scope::Local).unwrap()),
        rejuv_init: (kind == PhaseKind::RejTrain).then_some(RejuvInit::Zero),
        lr: match kind {
            PhaseKind::RejTrain => LrRule::FractionOfLast(0.1),
            _ => LrRule::InverseSqrt { peak: 3e-3, warmup: 10 },
        },
        seed: 5,
    }
}

fn base_state(steps: u64) -> TrainState {
    let model = Transformer::build(tiny_config(), 1).unwrap();
    run_phase(TrainState::fresh(model), &plan(PhaseKind::Base, steps), &opts(), &tiny_corpus(), None, &mut NullSink).unwrap()
}

fn scalar_store(w: f32) -> ParameterStore {
    let mut s = ParameterStore::new();
    s.insert("w", Tensor::new(vec![1, 1], vec![w]).unwrap()).unwrap();
    s
}

#[test]
fn first_adam_step_moves_by_learning_rate() {
    let mut store = scalar_store(0.0);
    let mut opt = OptimizerState::new(&store);
    let grads = Gradients::from([("w".to_string(), vec![0.5f32])]);
    adam_step(&mut store, &grads, &mut opt, 1e-3, None).unwrap();
    // t = 1: m = 0.1 g, v = 0.02 g^2; bias correction restores g and g^2.
    let (g, lr, eps) = (0.5f64, 1e-3f64, 1e-8f64);
    let m_hat = (1.0 - 0.9) * g / (1.0 - 0.9);
    let v_hat = (1.0 - 0.98) * g * g / (1.0 - 0.98);
    let want = -lr * m_hat / (v_hat.sqrt() + eps);
    let got = store.tensor("w").unwrap().data[0] as f64;
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    assert!((got + 1e-3).abs() < 1e-8);
}

#[test]
fn masked_entries_stay_zero_with_zero_moments() {
    let mut store = ParameterStore::new();
    store.insert("w", Tensor::new(vec![2, 2], vec![0.3, -0.4, 0.5, 0.6]).unwrap()).unwrap();
    let mut mask = PruneMask::new();
    mask.insert("w", vec![true, false, true, false]);
    let mut opt = OptimizerState::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let g: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        adam_step(&mut store, &Gradients::from([("w".to_string(), g)]), &mut opt, 1e-2, Some(&mask)).unwrap();
    }
    let w = &store.tensor("w").unwrap().data;
    assert_eq!((w[1], w[3]), (0.0, 0.0));
    assert!(w[0] != 0.3 && w[2] != 0.5);
    for t in [&opt.m, &opt.v] {
        assert_eq!((t["w"][1], t["w"][3]), (0.0, 0.0));
    }
}

#[test]
fn absent_mask_equals_all_ones_mask() {
    let run = |use_mask: bool| {
        let model = Transformer::build(tiny_config(), 2).unwrap();
        let mut store = model.params.clone();
        let ones = PruneMask::all_ones(&store);
        let mut opt = OptimizerState::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let grads: Gradients =
                store.iter().map(|(n, p)| (n.to_string(), (0..p.tensor.numel()).map(|_| rng.gen_range(-1.0f32..1.0)).collect())).collect();
            adam_step(&mut store, &grads, &mut opt, 1e-3, use_mask.then_some(&ones)).unwrap();
        }
        (store, opt)
    };
    assert_eq!(run(false), run(true));
}

#[test]
fn adam_rejects_nan_gradient_by_name() {
    let mut store = scalar_store(1.0);
    let mut opt = OptimizerState::new(&store);
    let grads = Gradients::from([("w".to_string(), vec![f32::NAN])]);
    let err = adam_step(&mut store, &grads, &mut opt, 1e-3, None).unwrap_err();
    assert!(matches!(err, Error::Numerical(ref m) if m.contains("`w`")), "{err}");
}

#[test]
fn global_norm_clip() {
    let mut g = Gradients::from([("a".to_string(), vec![3.0, 0.0]), ("b".to_string(), vec![4.0])]);
    let norm = clip_global_norm(&mut g, 1.0);
    assert_eq!(norm, 5.0);
    assert!((g["a"][0] - 0.6).abs() < 1e-7 && (g["b"][0] - 0.8).abs() < 1e-7);
    let mut small = Gradients::from([("a".to_string(), vec![0.1])]);
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small["a"], vec![0.1]);
}

#[test]
fn inverse_sqrt_schedule() {
    let r = LrRule::InverseSqrt { peak: 1e-3, warmup: 100 };
    assert!((r.rate(50, None).unwrap() - 5e-4).abs() < 1e-15);
    assert!((r.rate(100, None).unwrap() - 1e-3).abs() < 1e-15);
    assert!((r.rate(400, None).unwrap() - 5e-4).abs() < 1e-15);
    assert_eq!(LrRule::FractionOfLast(0.1).rate(7, Some(2e-3)).unwrap(), 0.1 * 2e-3);
    assert!(matches!(LrRule::FractionOfLast(0.1).rate(7, None), Err(Error::Config(_))));
}

/// Asserts the mask holds after every update.
struct SparsityProbe {
    steps: u64,
    nonzero: Vec<usize>,
}

impl MetricsSink for SparsityProbe {
    fn record(&mut self, rec: &LogRecord) -> rejuv_core::Result<()> {
        self.nonzero.push(rec.nonzero_params);
        Ok(())
    }

    fn observe(&mut self, _step: u64, store: &ParameterStore, mask: Option<&PruneMask>) -> rejuv_core::Result<()> {
        let mask = mask.expect("prutrain keeps its mask");
        for (name, bits) in mask.iter() {
            let t = store.tensor(name)?;
            assert!(t.data.iter().zip(bits).all(|(&v, &k)| k || v.to_bits() == 0), "{name}");
        }
        self.steps += 1;
        Ok(())
    }
}

#[test]
fn prutrain_holds_sparsity_at_every_step() {
    let start = base_state(20);
    let mut probe = SparsityProbe { steps: 0, nonzero: Vec::new() };
    let out = run_phase(start, &plan(PhaseKind::PruTrain, 60), &opts(), &tiny_corpus(), None, &mut probe).unwrap();
    assert_eq!(probe.steps, 60);
    assert_eq!(probe.nonzero.len(), 60);
    assert!(probe.nonzero.windows(2).all(|w| w[0] == w[1]));
    let mask = out.mask.as_ref().unwrap();
    let biases: usize =
        out.model.params.iter().filter(|(_, p)| !p.prunable).map(|(_, p)| p.tensor.data.iter().filter(|&&v| v != 0.0).count()).sum();
    assert_eq!(probe.nonzero[0], mask.kept() + biases);
}

#[test]
fn rejtrain_starts_from_prutrain_weights_at_reduced_rate() {
    let pru = run_phase(base_state(20), &plan(PhaseKind::PruTrain, 15), &opts(), &tiny_corpus(), None, &mut NullSink).unwrap();
    let last = pru.last_lr.unwrap();
    let mut at_start = None;
    let mut sink = MemorySink::default();
    let mut hook = |local: u64, st: &TrainState| {
        if local == 0 {
            at_start = Some(st.model.params.clone());
        }
        Ok(())
    };
    let rej = run_phase_with(pru.clone(), &plan(PhaseKind::RejTrain, 5), &opts(), &tiny_corpus(), None, &mut sink, &mut hook).unwrap();
    assert_eq!(at_start.unwrap(), pru.model.params);
    assert!((sink.records[0].lr - 0.1 * last).abs() <= 1e-12 * last);
    assert!(rej.mask.is_none());
    assert!(sink.records.iter().all(|r| r.phase == PhaseKind::RejTrain));
}

#[test]
fn external_rejuvenation_splices_base_values() {
    let base = base_state(20);
    let pru = run_phase(base.clone(), &plan(PhaseKind::PruTrain, 10), &opts(), &tiny_corpus(), None, &mut NullSink).unwrap();
    let mask = pru.mask.clone().unwrap();
    let mut p = plan(PhaseKind::RejTrain, 1);
    p.rejuv_init = Some(RejuvInit::External);
    let err = run_phase(pru.clone(), &p, &opts(), &tiny_corpus(), None, &mut NullSink).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let mut at_start = None;
    let mut hook = |local: u64, st: &TrainState| {
        if local == 0 {
            at_start = Some(st.model.params.clone());
        }
        Ok(())
    };
    run_phase_with(pru.clone(), &p, &opts(), &tiny_corpus(), Some(&base.model.params), &mut NullSink, &mut hook).unwrap();
    let start = at_start.unwrap();
    for (name, bits) in mask.iter() {
        let (s, b, q) = (
            &start.tensor(name).unwrap().data,
            &base.model.params.tensor(name).unwrap().data,
            &pru.model.params.tensor(name).unwrap().data,
        );
        for i in 0..bits.len() {
            assert_eq!(s[i], if bits[i] { q[i] } else { b[i] }, "{name}[{i}]");
        }
    }
}

#[test]
fn phase_order_is_enforced() {
    let base = base_state(2);
    let err = run_phase(base.clone(), &plan(PhaseKind::RejTrain, 2), &opts(), &tiny_corpus(), None, &mut NullSink);
    assert!(matches!(err, Err(Error::Config(_))));
    let mut bad = plan(PhaseKind::PruTrain, 2);
    bad.prune = None;
    assert!(matches!(run_phase(base.clone(), &bad, &opts(), &tiny_corpus(), None, &mut NullSink), Err(Error::Config(_))));
    let pru = run_phase(base, &plan(PhaseKind::PruTrain, 2), &opts(), &tiny_corpus(), None, &mut NullSink).unwrap();
    assert!(matches!(run_phase(pru, &plan(PhaseKind::ConTrain, 2), &opts(), &tiny_corpus(), None, &mut NullSink), Err(Error::Config(_))));
    let fresh = TrainState::fresh(Transformer::build(tiny_config(), 1).unwrap());
    assert!(matches!(run_phase(fresh, &plan(PhaseKind::Base, 0), &opts(), &tiny_corpus(), None, &mut NullSink), Err(Error::Config(_))));
}

fn single_pair() -> ParallelCorpus {
    ParallelCorpus { split: Split::Train, pairs: vec![Pair { src: vec![3, 7, 9, 4], tgt: vec![12, 5, 8] }] }
}

#[test]
fn overfits_a_single_pair() {
    let cfg = ModelConfig { dropout: 0.0, ..tiny_config() };
    let model = Transformer::build(cfg, 4).unwrap();
    let data = single_pair();
    let mut p = plan(PhaseKind::Base, 50);
    p.lr = LrRule::Constant(1e-3);
    let mut sink = MemorySink::default();
    let o = TrainOptions { batch_size: 1, clip: None, log_every: 1 };
    let state = run_phase(TrainState::fresh(model), &p, &o, &data, None, &mut sink).unwrap();
    let losses: Vec<f32> = sink.records.iter().map(|r| r.loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");

    p.steps = 250;
    let state = run_phase(state, &p, &o, &data, None, &mut NullSink).unwrap();
    assert_eq!(state.model.greedy_decode(&[3, 7, 9, 4], 10).unwrap(), vec![12, 5, 8]);
    let ppl = perplexity(&state.model, &data).unwrap();
    assert!(ppl < 1.1, "{ppl}");
}

fn tiny_pipeline(rounds: u32) -> PipelineConfig {
    PipelineConfig {
        model: tiny_config(),
        train: TrainOptions { batch_size: 8, clip: Some(1.0), log_every: 5 },
        lr: LrRule::InverseSqrt { peak: 3e-3, warmup: 10 },
        base_steps: 20,
        pru_steps: 10,
        rej_steps: 10,
        rounds,
        snapshot_every: 5,
        ..PipelineConfig::default()
    }
}

#[test]
fn pipeline_writes_expected_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_pipeline(&tiny_pipeline(1), &tiny_corpus(), dir.path()).unwrap();
    let ids: Vec<&str> = run.checkpoints.iter().map(|c| c.id.as_str()).collect();
    assert_eq!(ids, ["base", "pru1", "rej1", "con"]);
    for f in ["base.ckpt", "pru1.ckpt", "rej1.ckpt", "con.ckpt", "metrics.csv", "metrics_con.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let con = run.get("con").unwrap();
    let rej = run.get("rej1").unwrap();
    assert_eq!(con.step, rej.step);
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER);
    assert!(run.snapshots.windows(2).all(|w| (w[0].step, w[0].phase) <= (w[1].step, w[1].phase)));
    assert_eq!(run.snapshots.len(), 4 + 2 + 2 + 4);
}

#[test]
fn two_rounds_alternate_prune_and_rejuvenate() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_pipeline(2);
    cfg.control = false;
    let run = run_pipeline(&cfg, &tiny_corpus(), dir.path()).unwrap();
    let phases: Vec<PhaseKind> = run.checkpoints.iter().map(|c| c.phase).collect();
    use PhaseKind::*;
    assert_eq!(phases, [Base, PruTrain, RejTrain, PruTrain, RejTrain]);
    assert_eq!(run.checkpoints.last().unwrap().step, 20 + 2 * (10 + 10));
    assert!(!dir.path().join("con.ckpt").exists());
}

#[test]
fn pipeline_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny_pipeline(1);
    run_pipeline(&cfg, &tiny_corpus(), a.path()).unwrap();
    run_pipeline(&cfg, &tiny_corpus(), b.path()).unwrap();
    for f in ["base.ckpt", "pru1.ckpt", "rej1.ckpt", "con.ckpt", "metrics.csv", "metrics_con.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let mut c = cfg.clone();
    c.seed = 2;
    let d = tempfile::tempdir().unwrap();
    run_pipeline(&c, &tiny_corpus(), d.path()).unwrap();
    assert_ne!(fs::read(a.path().join("base.ckpt")).unwrap(), fs::read(d.path().join("base.ckpt")).unwrap());
}

#[test]
fn prutrain_mask_matches_direct_computation() {
    let base = base_state(10);
    let want = compute_mask(&base.model.params, &PruneSpec::new(0.5, Scope::Local).unwrap()).unwrap();
    let pru = run_phase(base, &plan(PhaseKind::PruTrain, 1), &opts(), &tiny_corpus(), None, &mut NullSink).unwrap();
    assert_eq!(pru.mask.unwrap(), want);
}
