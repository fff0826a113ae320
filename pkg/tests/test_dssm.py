import numpy as np
import pytest

from locdreamer.dssm import (
    DssmConfig,
    decode_distance,
    dssm_init,
    elbo_step,
    encode_posterior,
    filter_batch,
    filter_rollout,
    imagine_rollout,
    init_hidden,
    prior_transition,
    sequence_step,
)
from locdreamer.env import (
    AnchorLayout,
    MapRegion,
    TrajectoryRecord,
    records_to_batch,
    true_distance,
)
from locdreamer.numkit import DiagonalGaussian, GruCell, Tensor, backward
from locdreamer.scheduler import AcConfig, ac_init, full_action
from oracles import central_difference, relative_error

SMALL = DssmConfig(hidden=8, rnn_layers=2, embed=16, attn_heads=4, dt=0.1)


def small_params(seed=0):
    return dssm_init(SMALL, np.random.default_rng(seed))


def rand_inputs(params, B=3, seed=1):
    rng = np.random.default_rng(seed)
    z = Tensor(rng.standard_normal((B, 4)))
    h = [Tensor(rng.standard_normal((B, params.cfg.hidden))) for _ in params.cells]
    return z, h, rng


def test_sequence_step_deterministic():
    params = small_params()
    z, h, _ = rand_inputs(params)
    a = sequence_step(z, h, params)
    b = sequence_step(z, h, params)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)


def test_gru_zero_parameters_preserve_zero_state():
    # By the cell equations with all parameters zero: r = u = 1/2,
    # n = tanh(0) = 0, so h' = (1 - 1/2) * 0 + 1/2 * h = h / 2 -> 0 at h = 0.
    cell = GruCell(w_x=Tensor(np.zeros((4, 24))), w_h=Tensor(np.zeros((8, 24))),
                   b=Tensor(np.zeros(24)), hidden=8)
    h = cell(Tensor(np.ones((2, 4))), Tensor(np.zeros((2, 8))))
    np.testing.assert_array_equal(h.data, 0.0)
    # And a nonzero state halves exactly.
    h2 = cell(Tensor(np.ones((2, 4))), Tensor(np.full((2, 8), 0.6)))
    np.testing.assert_allclose(h2.data, 0.3)


def test_sequence_step_gradient_wrt_previous_latent():
    params = small_params(3)

    def run(zv):
        z = Tensor(np.asarray(zv), requires_grad=True)
        h = [Tensor(np.linspace(-1, 1, params.cfg.hidden).reshape(1, -1))
             for _ in params.cells]
        out = sequence_step(z, h, params)
        return (out[-1] * out[-1]).sum(), z

    z0 = np.random.default_rng(4).standard_normal((1, 4))
    loss, z = run(z0)
    backward(loss)
    fd = central_difference(lambda v: run(v)[0].item(), z0.copy())
    assert relative_error(z.grad, fd) < 1e-4


def test_prior_transition_pure_physics_when_residual_zero():
    params = small_params()
    last = params.dyn.layers[-1]
    last.w.data = np.zeros_like(last.w.data)
    last.b.data = np.zeros_like(last.b.data)
    z = Tensor(np.array([[0.0, 0.0, 1.0, 2.0]]))
    h = init_hidden(params, 1)
    prior = prior_transition(z, h, params)
    np.testing.assert_allclose(prior.mean.data[0], [0.1, 0.2, 1.0, 2.0], atol=1e-15)


def test_prior_transition_stddev_floor():
    params = small_params()
    for seed in range(5):
        z, h, _ = rand_inputs(params, seed=seed)
        prior = prior_transition(z, h, params)
        assert (prior.stddev.data >= SMALL.sigma_floor).all()


def test_prior_transition_mean_gradient_matches_fd():
    params = small_params(7)

    def run(zv):
        z = Tensor(np.asarray(zv), requires_grad=True)
        h = [Tensor(np.full((1, params.cfg.hidden), 0.3)) for _ in params.cells]
        prior = prior_transition(z, h, params)
        return prior.mean.sum(), z

    z0 = np.array([[0.5, -0.2, 0.8, 0.1]])
    loss, z = run(z0)
    backward(loss)
    fd = central_difference(lambda v: run(v)[0].item(), z0.copy())
    assert relative_error(z.grad, fd) < 1e-4


def test_encoder_permutation_invariance():
    params = small_params(9)
    z, h, rng = rand_inputs(params, B=2)
    S = 5
    d = rng.uniform(1, 8, (2, S))
    pos = rng.uniform(0, 9, (2, S, 2))
    out = encode_posterior(z, h, Tensor(d), pos, params)
    perm = rng.permutation(S)
    out_p = encode_posterior(z, h, Tensor(d[:, perm]), pos[:, perm], params)
    np.testing.assert_allclose(out.mean.data, out_p.mean.data, atol=1e-9)
    np.testing.assert_allclose(out.stddev.data, out_p.stddev.data, atol=1e-9)


def test_encoder_handles_duplicate_pairs():
    params = small_params(10)
    z, h, rng = rand_inputs(params, B=1)
    d = rng.uniform(1, 8, (1, 3))
    pos = rng.uniform(0, 9, (1, 3, 2))
    dup_d = np.concatenate([d, d[:, :1]], axis=1)
    dup_pos = np.concatenate([pos, pos[:, :1]], axis=1)
    out = encode_posterior(z, h, Tensor(dup_d), dup_pos, params)
    perm = np.array([3, 1, 0, 2])
    out_p = encode_posterior(z, h, Tensor(dup_d[:, perm]), dup_pos[:, perm], params)
    np.testing.assert_allclose(out.mean.data, out_p.mean.data, atol=1e-9)


def test_encoder_rejects_empty_set():
    params = small_params()
    z, h, _ = rand_inputs(params, B=1)
    with pytest.raises(ValueError):
        encode_posterior(z, h, Tensor(np.zeros((1, 0))), np.zeros((1, 0, 2)), params)


def test_encoder_weight_gradients_match_fd():
    params = small_params(11)
    z, h, rng = rand_inputs(params, B=2)
    d = rng.uniform(1, 8, (2, 4))
    pos = rng.uniform(0, 9, (4, 2))
    w = params.attn_key.w

    def f(wv):
        orig = w.data
        w.data = np.asarray(wv)
        try:
            g = encode_posterior(z, h, Tensor(d), pos, params)
            return (g.mean.sum() + g.stddev.sum()).item()
        finally:
            w.data = orig

    g = encode_posterior(z, h, Tensor(d), pos, params)
    backward(g.mean.sum() + g.stddev.sum())
    fd = central_difference(f, w.data.copy())
    assert relative_error(w.grad, fd) < 1e-4


def test_decoder_mean_is_exact_distance_any_weights():
    for seed in range(3):
        params = small_params(seed)
        z, h, _ = rand_inputs(params, B=2, seed=seed)
        anchors = np.array([[3.0, 4.0], [0.0, 0.0], [1.0, -2.0]])
        decoded = decode_distance(z, h, anchors, params)
        for b in range(2):
            for a, anchor in enumerate(anchors):
                expect = true_distance(z.data[b, :2], anchor)
                assert decoded.mean.data[b, a] == pytest.approx(expect, abs=1e-12)


def test_decoder_mean_zero_at_anchor():
    params = small_params()
    z = Tensor(np.array([[3.0, 4.0, 0.5, 0.5]]))
    h = init_hidden(params, 1)
    decoded = decode_distance(z, h, np.array([[3.0, 4.0]]), params)
    assert decoded.mean.data[0, 0] == 0.0


def test_decoder_stddev_floor():
    params = small_params(2)
    z, h, _ = rand_inputs(params, B=4, seed=5)
    decoded = decode_distance(z, h, np.array([[1.0, 1.0], [5.0, 2.0]]), params)
    assert (decoded.stddev.data >= SMALL.sigma_floor).all()


def test_decoder_mean_gradient_is_unit_bearing():
    params = small_params()
    anchor = np.array([[3.0, 4.0]])

    def run(zv):
        z = Tensor(np.asarray(zv), requires_grad=True)
        h = init_hidden(params, 1)
        return decode_distance(z, h, anchor, params).mean.sum(), z

    z0 = np.array([[1.0, 1.0, 0.0, 0.0]])
    loss, z = run(z0)
    backward(loss)
    d = true_distance([1.0, 1.0], [3.0, 4.0])
    np.testing.assert_allclose(z.grad[0, :2], (z0[0, :2] - [3.0, 4.0]) / d, atol=1e-12)
    fd = central_difference(lambda v: run(v)[0].item(), z0.copy(), h=1e-6)
    np.testing.assert_allclose(z.grad, fd, atol=1e-6)


def unit_gaussian(shape):
    return DiagonalGaussian(Tensor(np.zeros(shape)), Tensor(np.ones(shape)))


def test_elbo_step_recon_at_decoded_means():
    B, S = 2, 3
    mu = np.random.default_rng(0).uniform(1, 5, (B, S))
    decoded = DiagonalGaussian(Tensor(mu), Tensor(np.ones((B, S))))
    recon, dyn = elbo_step(decoded, mu, np.ones((B, S)), unit_gaussian((B, 4)),
                           unit_gaussian((B, 4)))
    np.testing.assert_allclose(recon.data, -S * 0.5 * np.log(2 * np.pi))
    np.testing.assert_allclose(dyn.data, 0.0)


def test_elbo_step_recon_scales_with_set_size():
    mu = np.full((1, 2), 3.0)
    targets = mu + 0.5
    recon2, _ = elbo_step(DiagonalGaussian(Tensor(mu), Tensor(np.ones((1, 2)))),
                          targets, np.ones((1, 2)), unit_gaussian((1, 4)),
                          unit_gaussian((1, 4)))
    mu4 = np.full((1, 4), 3.0)
    recon4, _ = elbo_step(DiagonalGaussian(Tensor(mu4), Tensor(np.ones((1, 4)))),
                          mu4 + 0.5, np.ones((1, 4)), unit_gaussian((1, 4)),
                          unit_gaussian((1, 4)))
    assert recon4.item() == pytest.approx(2.0 * recon2.item())


def test_elbo_step_masked_targets_contribute_zero():
    mu = np.array([[2.0, 7.0]])
    decoded = DiagonalGaussian(Tensor(mu), Tensor(np.ones((1, 2))))
    targets = np.array([[2.0, np.nan]])
    full, _ = elbo_step(decoded, np.array([[2.0, 7.0]]), np.array([[1.0, 0.0]]),
                        unit_gaussian((1, 4)), unit_gaussian((1, 4)))
    masked, _ = elbo_step(decoded, targets, np.array([[1.0, 0.0]]),
                          unit_gaussian((1, 4)), unit_gaussian((1, 4)))
    assert masked.item() == pytest.approx(full.item())


def desk_layout():
    return AnchorLayout((1, 2, 3, 4),
                        np.array([[0.5, 0.5], [8.5, 0.5], [0.5, 11.5], [8.5, 11.5]]))


def toy_record(T=32, seed=0):
    layout = desk_layout()
    rng = np.random.default_rng(seed)
    pos = np.stack([2.0 + 0.05 * np.arange(T), 3.0 + 0.03 * np.arange(T)], axis=1)
    meas = [{aid: true_distance(pos[t], layout.positions[k]) + rng.normal(0, 0.1)
             for k, aid in enumerate(layout.ids)} for t in range(T)]
    meas = [{k: max(v, 0.0) for k, v in step.items()} for step in meas]
    return TrajectoryRecord("toy", pos, meas, 0.1), layout


def test_filter_rollout_untrained_is_finite():
    rec, layout = toy_record()
    params = dssm_init(DssmConfig(hidden=16, rnn_layers=2, embed=16, attn_heads=4),
                       np.random.default_rng(0))
    res = filter_rollout(rec, layout, lambda t, s: full_action(4), params,
                         np.random.default_rng(1), collect_trace=True)
    assert np.isfinite(res.loss().item())
    assert np.isfinite(res.estimates).all()
    assert res.empty_steps == 0
    assert len(res.trace.recon) == rec.steps


def test_filter_rollout_same_seed_identical():
    rec, layout = toy_record()
    params = small_params(1)

    def run():
        return filter_rollout(rec, layout, lambda t, s: full_action(4), params,
                              np.random.default_rng(3), collect_trace=True)

    a, b = run(), run()
    np.testing.assert_array_equal(a.estimates, b.estimates)
    np.testing.assert_array_equal(np.array(a.trace.post_mean), np.array(b.trace.post_mean))
    assert a.loss().item() == b.loss().item()


def test_filter_rollout_empty_step_falls_back_to_prior():
    rec, layout = toy_record(T=5)
    rec.measurements[2] = {}
    params = small_params(1)
    res = filter_rollout(rec, layout, lambda t, s: full_action(4), params,
                         np.random.default_rng(0), collect_trace=True)
    assert res.empty_steps == 1
    np.testing.assert_array_equal(res.trace.prior_mean[2], res.trace.post_mean[2])


def test_filter_batch_matches_shapes_and_loss_finite():
    rec, layout = toy_record()
    batch = records_to_batch([rec], layout, [(0, 0)] * 4, rec.steps)
    params = small_params(2)
    res = filter_batch(batch, params, np.random.default_rng(0))
    assert res.estimates.shape == (4, rec.steps, 2)
    assert np.isfinite(res.loss().item())


def imagine_setup(seed=0):
    cfg = SMALL
    params = dssm_init(cfg, np.random.default_rng(seed))
    ac = ac_init(AcConfig(n_anchors=5, state_dim=cfg.policy_state_dim),
                 np.random.default_rng(seed + 1))
    m = MapRegion(9.18, 12.06)
    boot = np.array([[1.0, 1.0], [8.0, 1.0], [1.0, 11.0]])
    dep = np.array([[8.5, 11.5], [0.5, 6.0], [4.5, 0.5], [8.6, 6.2], [4.6, 11.5]])
    return params, ac, m, boot, dep


def test_imagine_all_anchors_selected_when_k_equals_a():
    params, ac, m, boot, dep = imagine_setup()
    _, buf, trace = imagine_rollout(params, ac, m, boot, dep, B=2, T=4, K=5,
                                    rng=np.random.default_rng(0), collect_trace=True)
    for alpha in trace.action:
        assert (alpha.sum(axis=1) == 5).all()


def test_imagine_decoded_mean_is_distance_to_anchor():
    params, ac, m, boot, dep = imagine_setup(3)
    _, _, trace = imagine_rollout(params, ac, m, boot, dep, B=2, T=3, K=3,
                                  rng=np.random.default_rng(1), collect_trace=True)
    all_pos = np.concatenate([boot, dep])
    for t in range(3):
        z = trace.z_sample[t]
        mu = trace.decoded_mean[t]
        for b in range(2):
            expect = np.linalg.norm(z[b, :2] - all_pos, axis=1)
            np.testing.assert_allclose(mu[b], expect, atol=1e-12)


def test_imagine_rewards_finite_and_buffer_aligned():
    params, ac, m, boot, dep = imagine_setup(5)
    loss, buf, _ = imagine_rollout(params, ac, m, boot, dep, B=4, T=8, K=3,
                                   rng=np.random.default_rng(2))
    assert np.isfinite(loss.item())
    assert buf.rewards.shape == (4, 8)
    assert buf.log_probs.shape == (4, 8)
    assert buf.values.shape == (4, 8)
    assert np.isfinite(buf.rewards).all()
    assert (buf.log_probs.data <= 0).all()


def test_imagine_reward_mode_selected_excludes_bootstrap():
    params, ac, m, boot, dep = imagine_setup(6)
    rng_a = np.random.default_rng(7)
    rng_b = np.random.default_rng(7)
    _, buf_union, _ = imagine_rollout(params, ac, m, boot, dep, B=2, T=3, K=3,
                                      rng=rng_a, reward_anchors="union")
    _, buf_sel, _ = imagine_rollout(params, ac, m, boot, dep, B=2, T=3, K=3,
                                    rng=rng_b, reward_anchors="selected")
    # Union rewards include three extra log-pdf terms per step.
    assert not np.allclose(buf_union.rewards, buf_sel.rewards)
