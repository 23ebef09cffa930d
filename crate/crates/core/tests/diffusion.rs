use std::cell::RefCell;

use timeweaver::conditioning::{train_identity_encoder, ReferenceSet};
use timeweaver::config::Config;
use timeweaver::diffusion::{
    loss_from_prediction, loss_graph, training_loss, DistsLike, Prompt, RestorationModel, TrainState, TtabHook,
};
use timeweaver::guidance::identity_tokens;
use timeweaver::layers::image_batch;
use timeweaver::seed;
use timeweaver::synthlab::{build_dataset, Dataset};
use timeweaver_tensor::{Graph, Tensor};

fn small_config() -> Config {
    let mut c = Config::default();
    c.diffusion.batch_size = 3;
    c
}

fn fixture() -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(4, 3, dir.path(), 9).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    (dir, ds)
}

fn state(ds: &Dataset, steps: usize) -> TrainState {
    let enc = train_identity_encoder(ds, 2, 1).unwrap();
    TrainState::new(&small_config(), enc, steps, 5).unwrap()
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn untrained_adapter_ignores_control_and_identity() {
    let (_d, ds) = fixture();
    let st = state(&ds, 10);
    let m = &st.model;
    let z = Tensor::randn(&[2, 3, 32, 32], 1.0, &mut seed::rng(1));
    let lq_a = image_batch(&[&ds.samples[0].degraded, &ds.samples[1].degraded]);
    let lq_b = image_batch(&[&ds.samples[2].degraded, &ds.samples[3].degraded]);
    let refs: Vec<ReferenceSet> = (0..2).map(|i| ReferenceSet::from_dataset(&ds, i).unwrap()).collect();
    let f_id = identity_tokens(m, &[&refs[0], &refs[1]]).unwrap();
    let prompts = vec![Prompt::generic(); 2];
    let base = m.denoise(&z, &[40, 80], &lq_a, None, &prompts, None).unwrap();
    let other_lq = m.denoise(&z, &[40, 80], &lq_b, None, &prompts, None).unwrap();
    let with_id = m.denoise(&z, &[40, 80], &lq_a, Some(&f_id), &prompts, None).unwrap();
    assert_eq!(bits(&base), bits(&other_lq));
    assert_eq!(bits(&base), bits(&with_id));
    assert!(base.data().iter().any(|&v| v != 0.0));
}

#[test]
fn empty_age_set_leaves_prediction_unchanged() {
    let (_d, ds) = fixture();
    let st = state(&ds, 10);
    let m = &st.model;
    let z = Tensor::randn(&[2, 3, 32, 32], 1.0, &mut seed::rng(2));
    let lq = image_batch(&[&ds.samples[0].degraded, &ds.samples[1].degraded]);
    let prompts = vec![Prompt::aged(30).unwrap(), Prompt::aged(70).unwrap()];
    let empty = vec![Vec::new(), Vec::new()];
    let trace = RefCell::new(Vec::new());
    let hook = TtabHook { s_age: &empty, trace: Some(&trace) };
    let a = m.denoise(&z, &[60, 60], &lq, None, &prompts, Some(&hook)).unwrap();
    let b = m.denoise(&z, &[60, 60], &lq, None, &prompts, None).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert!(!trace.borrow().is_empty());
    assert!(trace.borrow().iter().all(|g| g.is_zero()));

    let full: Vec<Vec<usize>> = prompts.iter().map(|p| p.age_token_indices.clone()).collect();
    let hook = TtabHook { s_age: &full, trace: None };
    let c = m.denoise(&z, &[60, 60], &lq, None, &prompts, Some(&hook)).unwrap();
    assert_ne!(bits(&c), bits(&b));
}

#[test]
fn training_is_seed_deterministic() {
    let (_d, ds) = fixture();
    let mut a = state(&ds, 6);
    let mut b = state(&ds, 6);
    a.run(&ds, 6).unwrap();
    b.run(&ds, 6).unwrap();
    assert_eq!(a.log, b.log);
    for ((na, pa), (nb, pb)) in a.model.store.iter().zip(b.model.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(bits(&pa.value), bits(&pb.value), "{na}");
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (_d, ds) = fixture();
    // 8 planned steps: the prior phase ends at 3, the loss warm-up at 2
    let mut straight = state(&ds, 8);
    straight.run(&ds, 8).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut first = state(&ds, 8);
    first.run(&ds, 5).unwrap();
    first.save(&path).unwrap();
    let mut resumed = TrainState::load(&path).unwrap();
    assert_eq!(resumed.step, 5);
    resumed.run(&ds, 8).unwrap();

    assert_eq!(straight.log, resumed.log);
    for r in &straight.log {
        assert!((r.loss.total - (r.loss.l_diff + r.loss.lambda * r.loss.l_ea_dists)).abs() <= 1e-9);
    }
    assert_eq!(straight.drop_events, resumed.drop_events);
    for ((n, p), (_, q)) in straight.model.store.iter().zip(resumed.model.store.iter()) {
        assert_eq!(bits(&p.value), bits(&q.value), "{n}");
    }
    let model = RestorationModel::load(&path).unwrap();
    assert_eq!(model.trained_steps, 5);
}

#[test]
fn loss_parts_add_up_and_gate() {
    let (_d, ds) = fixture();
    let mut st = state(&ds, 100);
    let batch = st.make_batch(&ds, 50).unwrap();
    let (lambda, warm) = (0.5, 0.2);
    let on = training_loss(&st.model, &batch, 50, 100, warm, lambda);
    assert!(on.l_ea_dists > 0.0);
    assert_eq!(on.total, on.l_diff + on.lambda * on.l_ea_dists);
    let off = training_loss(&st.model, &batch, 10, 100, warm, lambda);
    assert_eq!(off.l_ea_dists, 0.0);
    assert_eq!(off.total, off.l_diff);
    assert_eq!(off.l_diff, on.l_diff);
    let zero = training_loss(&st.model, &batch, 50, 100, warm, 0.0);
    assert_eq!(zero.total, zero.l_diff);
}

#[test]
fn perfect_prediction_has_zero_diffusion_loss() {
    let (_d, ds) = fixture();
    let mut st = state(&ds, 100);
    let batch = st.make_batch(&ds, 60).unwrap();
    let g = Graph::detached(false);
    let eps_hat = g.constant(batch.eps.clone());
    let (total, d, e) = loss_from_prediction(&st.model, &DistsLike::default(), &batch, eps_hat, true, 0.5);
    assert_eq!(d.value().item(), 0.0);
    // the perfect noise estimate also reconstructs x0 exactly up to f32 error
    assert!(e.unwrap().value().item() < 1e-3);
    assert!(total.value().item() < 1e-3);
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let (_d, ds) = fixture();
    let mut st = state(&ds, 100);
    let mut batch = st.make_batch(&ds, 70).unwrap();
    // early timesteps keep the clean estimate well conditioned for f32 differencing
    batch.t = vec![4, 12, 20];
    let dists = DistsLike::default();
    let names = [
        ("unet.conv_out.weight", 3),
        ("unet.rb32.c2.weight", 2),
        ("unet.n_out.gamma", 1),
        ("adapter.zc32.bias", 2),
        ("adapter.zc32.weight", 2),
    ];
    let loss_at = |m: &RestorationModel| {
        let g = Graph::no_grad(&m.store);
        let (t, _, _) = loss_graph(m, &dists, &g, &batch, true, 0.5);
        t.value().item() as f64
    };
    let grads = {
        let g = Graph::new(&st.model.store);
        let (t, _, _) = loss_graph(&st.model, &dists, &g, &batch, true, 0.5);
        g.backward(t)
    };
    let mut checked = 0;
    for (name, count) in names {
        let analytic = grads.param(name).unwrap().clone();
        // largest entries, where the f32 loss resolves the slope
        let mut order: Vec<usize> = (0..analytic.numel()).collect();
        order.sort_by(|&x, &y| analytic.data()[y].abs().total_cmp(&analytic.data()[x].abs()));
        for &i in order.iter().take(count) {
            let base = st.model.store.tensor(name).unwrap().clone();
            let mut m = st.model.clone();
            let mut central = |h: f32| {
                let mut plus = base.clone();
                plus.data_mut()[i] += h;
                let mut minus = base.clone();
                minus.data_mut()[i] -= h;
                let span = plus.data()[i] as f64 - minus.data()[i] as f64;
                m.store.set(name, plus).unwrap();
                let fp = loss_at(&m);
                m.store.set(name, minus).unwrap();
                let fm = loss_at(&m);
                (fp - fm) / span
            };
            // five-point stencil, the h^2 terms cancel
            let numeric = (4.0 * central(2e-2) - central(4e-2)) / 3.0;
            let a = analytic.data()[i] as f64;
            assert!(
                (numeric - a).abs() <= 1e-3 * a.abs().max(1e-3),
                "{name}[{i}]: numeric {numeric:.6} vs analytic {a:.6}"
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 10);
}
