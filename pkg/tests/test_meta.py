"""Meta-learning oracles: partition sets, hand-iterated inner SGD, the
scalar first-order outer gradient, and isolation of the task-agnostic set."""

import numpy as np
import pytest

import leopard.autodiff as ad
from leopard.autodiff import Tensor
from leopard.checkpoint import serialize_params
from leopard.data import sample_episode
from leopard.encoder import EncoderConfig
from leopard.meta import (AdamState, MetaConfig, PartitionError, finetune_adapt,
                          init_alpha, init_model_params, inner_adapt,
                          meta_train, outer_step, partition, run_episode,
                          split_alpha)
from leopard.synthetic import make_marker_task, marker_vocabulary


def tiny_model(n_layers=2, nu=0, G=2, zero_softmax=False, seed=0, alpha_init=0.05):
    vocab = marker_vocabulary(8)
    enc = EncoderConfig(n_layers=n_layers, d_model=16, n_heads=2, d_ff=32,
                        max_len=6, vocab_size=len(vocab), class_embed_size=8)
    mc = MetaConfig(adaptation_steps=G, nu=nu, episodes=1, seed=seed,
                    alpha_init=alpha_init, zero_softmax=zero_softmax)
    rng = np.random.default_rng(seed)
    params, part = init_model_params(enc, mc, rng)
    task = make_marker_task("t", ["tok0", "tok1"], [f"tok{i}" for i in range(8)],
                            rng, n_train=24, seq_len=5, n_marker=2)
    return params, part, enc, mc, task, vocab, rng


# ---------------------------------------------------------------------------
# partition


def fake_paths(n_layers):
    paths = {"encoder.embed.tok": None, "encoder.embed.ln.g": None,
             "proj.w1": None, "proj.b2": None, "gen.w1": None, "gen.b2": None}
    for v in range(1, n_layers + 1):
        paths[f"encoder.layer{v}.attn.wq"] = None
        paths[f"encoder.layer{v}.ff.b2"] = None
    return paths


def test_partition_nu_zero_adapts_everything():
    part = partition(fake_paths(3), nu=0, n_layers=3)
    assert part.theta_paths == frozenset({"gen.w1", "gen.b2"})
    assert "encoder.embed.tok" in part.phi_paths
    assert part.phi_groups == ("layer0", "layer1", "layer2", "layer3", "proj", "softmax")


def test_partition_nu_mid():
    part = partition(fake_paths(4), nu=2, n_layers=4)
    # layers 3, 4 adapted; embeddings and layers 1, 2 agnostic
    assert "encoder.layer3.attn.wq" in part.phi_paths
    assert "encoder.layer4.ff.b2" in part.phi_paths
    assert "encoder.layer2.attn.wq" in part.theta_paths
    assert "encoder.embed.tok" in part.theta_paths
    assert part.phi_groups == ("layer3", "layer4", "proj", "softmax")


def test_partition_nu_full_freezes_encoder():
    part = partition(fake_paths(3), nu=3, n_layers=3)
    assert all(not p.startswith("encoder.") for p in part.phi_paths)
    assert part.phi_paths == frozenset({"proj.w1", "proj.b2"})
    assert part.phi_groups == ("proj", "softmax")


def test_partition_validation():
    with pytest.raises(PartitionError):
        partition(fake_paths(2), nu=3, n_layers=2)
    with pytest.raises(PartitionError):
        partition({"mystery.w": None}, nu=0, n_layers=2)


def test_group_of():
    part = partition(fake_paths(2), nu=0, n_layers=2)
    assert part.group_of("softmax.W") == "softmax"
    assert part.group_of("proj.w1") == "proj"
    assert part.group_of("encoder.embed.tok") == "layer0"
    assert part.group_of("encoder.layer2.ff.b2") == "layer2"
    with pytest.raises(PartitionError):
        part.group_of("gen.w1")


def test_init_alpha_positive_and_per_group():
    part = partition(fake_paths(2), nu=1, n_layers=2)
    alphas = init_alpha(part, 0.01)
    assert set(alphas) == {"alpha.layer2", "alpha.proj", "alpha.softmax"}
    with pytest.raises(ValueError):
        init_alpha(part, 0.0)


# ---------------------------------------------------------------------------
# inner adaptation: hand-iterated quadratic


def quad_loss(target):
    def loss_fn(phi, batch):
        d = ad.sub(phi["x"], Tensor(np.array([target])))
        return ad.scale(ad.sum_all(ad.mul(d, d)), 0.5)
    return loss_fn


def test_inner_adapt_hand_iteration():
    # f(x) = 0.5 (x - 0)^2, grad = x, lr = 0.5: 2 -> 1 -> 0.5
    phi = {"x": Tensor(np.array([2.0]), requires_grad=True)}
    out = inner_adapt(phi, [None, None], quad_loss(0.0),
                      {"g": 0.5}, lambda p: "g")
    np.testing.assert_allclose(out["x"].data, [0.5], atol=1e-12)


def test_inner_adapt_track_false_matches_track_true_values():
    for track in (True, False):
        phi = {"x": Tensor(np.array([2.0]), requires_grad=True)}
        out = inner_adapt(phi, [None] * 3, quad_loss(1.0), {"g": 0.25},
                          lambda p: "g", track=track)
        # x_{s+1} = x_s - 0.25 (x_s - 1); 2 -> 1.75 -> 1.5625 -> 1.421875
        np.testing.assert_allclose(out["x"].data, [1.421875], atol=1e-12)


def test_inner_adapt_capture_and_replay():
    phi = {"x": Tensor(np.array([2.0]), requires_grad=True)}
    cap = []
    out = inner_adapt(phi, [None, None], quad_loss(0.0), {"g": 0.5},
                      lambda p: "g", capture=cap)
    np.testing.assert_allclose(cap[0]["x"], [2.0])
    np.testing.assert_allclose(cap[1]["x"], [1.0])
    # replay from a shifted start: same constants, different chain
    phi2 = {"x": Tensor(np.array([3.0]), requires_grad=True)}
    out2 = inner_adapt(phi2, [None, None], quad_loss(0.0), {"g": 0.5},
                       lambda p: "g", frozen_grads=cap)
    np.testing.assert_allclose(out2["x"].data, [3.0 - 0.5 * 3.0], atol=1e-12)


# ---------------------------------------------------------------------------
# scalar first-order oracle


def scalar_fomaml_case(phi0, alpha0, inner_targets, val_target):
    """Run the implemented loop on a 1-parameter quadratic problem.

    Inner losses 0.5 (x - c_s)^2, validation loss 0.5 (x - c_v)^2.
    Returns (implemented dphi0, dalpha, hand dphi0, hand dalpha)."""
    x0 = Tensor(np.array([phi0]), requires_grad=True)
    a = Tensor(np.array(alpha0), requires_grad=True)
    alphas = {"g": a}
    cur = {"x": x0}
    # hand forward pass with stop-gradded step gradients
    xs, gs = phi0, []
    for c in inner_targets:
        gs.append(xs - c)
        xs = xs - alpha0 * gs[-1]

    batches = list(inner_targets)

    def loss_fn(phi, c):
        d = ad.sub(phi["x"], Tensor(np.array([c])))
        return ad.scale(ad.sum_all(ad.mul(d, d)), 0.5)

    out = inner_adapt(cur, batches, loss_fn, alphas, lambda p: "g")
    d = ad.sub(out["x"], Tensor(np.array([val_target])))
    val = ad.scale(ad.sum_all(ad.mul(d, d)), 0.5)
    ad.backward(val)
    # first-order: dL/dphi0 = (x_G - c_v); dL/dalpha = (x_G - c_v) * (-sum g_s)
    hand_dphi0 = xs - val_target
    hand_dalpha = (xs - val_target) * (-sum(gs))
    return float(x0.grad[0]), float(a.grad), hand_dphi0, hand_dalpha, xs, float(out["x"].data[0])


def test_scalar_first_order_gradient_matches_hand_derivation():
    got_dx, got_da, want_dx, want_da, hand_xG, got_xG = scalar_fomaml_case(
        phi0=2.0, alpha0=0.3, inner_targets=[0.5, -1.0, 0.25], val_target=1.5)
    assert abs(got_xG - hand_xG) < 1e-12
    assert abs(got_dx - want_dx) < 1e-10
    assert abs(got_da - want_da) < 1e-10


def test_alpha_gradient_is_minus_sum_of_step_gradients_times_val_grad():
    # single inner target makes the hand expression trivial to eyeball
    got_dx, got_da, want_dx, want_da, *_ = scalar_fomaml_case(
        phi0=1.0, alpha0=0.1, inner_targets=[0.0], val_target=0.0)
    # g_0 = 1, x_1 = 0.9, dL/dalpha = 0.9 * (-1) = -0.9
    assert abs(got_da - (-0.9)) < 1e-12
    assert abs(got_dx - 0.9) < 1e-12


# ---------------------------------------------------------------------------
# outer step


def test_outer_step_sums_task_gradients():
    p1 = {"w": Tensor(np.array([1.0, 2.0]), requires_grad=True)}
    p2 = {"w": Tensor(np.array([1.0, 2.0]), requires_grad=True)}
    g_a = {"w": np.array([0.5, -1.0])}
    g_b = {"w": np.array([0.25, 0.75])}
    g_sum = {"w": g_a["w"] + g_b["w"]}
    outer_step(p1, [g_a, g_b], 0.1, AdamState())
    outer_step(p2, [g_sum], 0.1, AdamState())
    np.testing.assert_allclose(p1["w"].data, p2["w"].data, atol=1e-15)


def test_outer_step_first_update_is_signed_lr():
    # Adam's first bias-corrected step is -beta * sign(g)
    p = {"w": Tensor(np.array([1.0, 1.0]), requires_grad=True)}
    outer_step(p, [{"w": np.array([3.0, -0.2])}], 0.01, AdamState())
    np.testing.assert_allclose(p["w"].data, [0.99, 1.01], atol=1e-6)


def test_outer_step_empty_or_zero_lr_is_noop():
    p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    st = AdamState()
    outer_step(p, [], 0.1, st)
    outer_step(p, [{"w": np.array([5.0])}], 0.0, st)
    np.testing.assert_array_equal(p["w"].data, [1.0])
    assert st.step == 0


# ---------------------------------------------------------------------------
# episodes and isolation


def test_run_episode_grads_cover_outer_set():
    params, part, enc, mc, task, vocab, rng = tiny_model()
    ep = sample_episode(task, mc.k, mc.adaptation_steps, rng)
    loss, acc, grads = run_episode(params, part, enc, mc, task, ep, vocab, train=True)
    assert set(grads) == set(params)
    assert 0 <= acc <= 1
    # the generator only influences the loss through the generated softmax
    # initialization; its gradient must still be nonzero (path retention)
    assert sum(np.abs(grads[p]).sum() for p in grads if p.startswith("gen.")) > 0
    assert sum(np.abs(grads[p]).sum() for p in grads if p.startswith("alpha.")) > 0


def test_theta_isolation_under_adaptation():
    params, part, enc, mc, task, vocab, rng = tiny_model(nu=1)
    theta = {p: params[p] for p in part.theta_paths}
    before = serialize_params(theta)
    for _ in range(3):
        ep = sample_episode(task, mc.k, mc.adaptation_steps, rng)
        run_episode(params, part, enc, mc, task, ep, vocab, train=True)
        sup = [ex for ex in task.train[:8]]
        finetune_adapt(params, part, enc, mc, task, task.train[:20], vocab, epochs=2)
    assert serialize_params(theta) == before


def test_zero_softmax_has_no_generator():
    params, part, enc, mc, task, vocab, rng = tiny_model(zero_softmax=True)
    assert not any(p.startswith("gen.") for p in params)
    ep = sample_episode(task, mc.k, mc.adaptation_steps, rng)
    loss, acc, grads = run_episode(params, part, enc, mc, task, ep, vocab, train=True)
    assert set(grads) == set(params)


def test_prose_batches_drops_one_adaptation_batch():
    params, part, enc, mc, task, vocab, rng = tiny_model(G=3)
    ep = sample_episode(task, mc.k, mc.adaptation_steps, rng)
    cap_full, cap_prose = [], []
    run_episode(params, part, enc, mc, task, ep, vocab, train=True, capture_grads=cap_full)
    from dataclasses import replace
    mc2 = replace(mc, prose_batches=True)
    run_episode(params, part, enc, mc2, task, ep, vocab, train=True, capture_grads=cap_prose)
    assert len(cap_full) == 3
    assert len(cap_prose) == 2


def test_meta_config_validation():
    with pytest.raises(ValueError):
        MetaConfig(adaptation_steps=0)
    with pytest.raises(ValueError):
        MetaConfig(outer_lr=0.0)


def test_meta_train_deterministic():
    def run():
        params, part, enc, mc, task, vocab, rng = tiny_model()
        from dataclasses import replace
        mc = replace(mc, episodes=3, tasks_per_batch=2)
        params, part, log = meta_train([task], enc, mc, vocab)
        return serialize_params(params), log

    (b1, l1), (b2, l2) = run(), run()
    assert b1 == b2
    assert [r["val_loss"] for r in l1] == [r["val_loss"] for r in l2]


def test_meta_train_writes_jsonl_log(tmp_path):
    import json
    params, part, enc, mc, task, vocab, rng = tiny_model()
    from dataclasses import replace
    mc = replace(mc, episodes=2, tasks_per_batch=2)
    log_path = tmp_path / "train.jsonl"
    meta_train([task], enc, mc, vocab, log_path=str(log_path))
    rows = [json.loads(line) for line in log_path.read_text().splitlines()]
    assert len(rows) == 4
    assert set(rows[0]) == {"episode", "task", "val_loss", "val_acc", "wallclock"}


def test_finetune_adapt_epochs_zero_is_generated_predictor():
    params, part, enc, mc, task, vocab, rng = tiny_model()
    support = task.train[:8]
    pred = finetune_adapt(params, part, enc, mc, task, support, vocab, epochs=0)
    probs = pred.predict_probs(task.train[:4])
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-9)
    # more epochs reduce (or preserve) support loss
    pred2 = finetune_adapt(params, part, enc, mc, task, support, vocab, epochs=10)
    assert pred2.accuracy(support) >= pred.accuracy(support) - 1e-9


def test_finetune_adapt_label_mismatch():
    params, part, enc, mc, task, vocab, rng = tiny_model()
    support = [ex for ex in task.train if ex.label == task.spec.labels[0]][:4]
    with pytest.raises(ValueError):
        finetune_adapt(params, part, enc, mc, task, support, vocab, epochs=1)
