import numpy as np
import pytest

from twistsmc.errors import BadConfig, BadParameterization, DegenerateWeights, TrainingDiverged
from twistsmc.learn import (LossConfig, Weighted, cdfudge_grad, cdq_grad, ctl_exact, ctl_grad, ctl_samples,
                            dpg_grad, fit_full_batch, fudge_grad, p0_batch, pcl1_grad, rl_grad, sigma_batch,
                            sixo_grad, soft_q_grad, train)
from twistsmc.oracle import enumerate_target
from twistsmc.rng import RngStream
from twistsmc.seqmodel import SeqModel, all_sequences, prefix_codes, random_model
from twistsmc.targets import TabularTerminal, TargetSpec, Unit
from twistsmc.twist import (BaseProposal, MLPTwists, TabularTwists, TwistInducedProposal, TwistProposal,
                            ValueInducedTwists, ValueTwists)

from conftest import make_instance
from gradcheck import rel_err


def oracle_values(tab, spec):
    vt = ValueTwists(spec.V, spec.T)
    for t in range(1, spec.T):
        vt.theta[vt.offsets[t - 1]:vt.offsets[t]] = tab.log_future[t]
    vt.theta[-1] = tab.log_z
    return vt


def test_ctl_single_pair_cancels():
    spec = make_instance("classifier", 2, 3, 0)
    tw = TabularTwists(2, 3)
    x = Weighted(np.array([[1, 0, 1]]), np.ones(1))
    _, g = ctl_grad(tw, spec, x, x)
    assert np.all(g == 0.0)


def test_ctl_exact_zero_at_oracle():
    spec = make_instance("intermediate", 3, 3, 1)
    tab = enumerate_target(spec)
    loss, g = ctl_exact(tab.twists().to_tabular(), spec, tab)
    assert abs(loss) < 1e-9 and np.max(np.abs(g)) < 1e-9


def test_ctl_samples_positive_weights_use_true_potential():
    spec = make_instance("indicator", 3, 4, 2)
    tw = TabularTwists(3, 4)
    tw.theta = np.random.default_rng(0).normal(size=tw.theta.size)
    pos, neg = ctl_samples(spec, tw, 32, seed=1)
    q = TwistInducedProposal(tw, spec)
    ref = spec.log_unnormalized(pos.seqs) - q.log_prob(pos.seqs)
    ref = np.exp(ref - ref.max())
    assert np.allclose(pos.w, ref / ref.sum(), atol=1e-12)
    # negatives at t < T follow the twisted target pi_t, not sigma
    t = 2
    lt = spec.model.sequence_logprobs(neg.seqs[:, :t]) + tw.log_twist_batch(t, neg.seqs[:, :t]) \
        - q.log_prob(neg.seqs[:, :t])
    lt = np.exp(lt - lt.max())
    assert np.allclose(neg.at(t), lt / lt.sum(), atol=1e-12)


def test_rl_zero_cases():
    spec = TargetSpec(random_model(3, 3, seed=0), Unit())
    b = Weighted.uniform(all_sequences(3, 3))
    assert rl_grad(TabularTwists(3, 3), spec, b)[0] < 1e-28
    spec = make_instance("exp_reward", 3, 3, 2)
    tab = enumerate_target(spec)
    for final in ("exact", "learned"):
        loss, g = soft_q_grad(tab.twists().to_tabular(), spec, p0_batch(spec), final=final)
        assert loss < 1e-18 and np.max(np.abs(g)) < 1e-9


def test_cdq_zero_at_oracle():
    spec = make_instance("intermediate", 3, 3, 3)
    tab = enumerate_target(spec)
    loss, g = cdq_grad(tab.twists().to_tabular(), spec, p0_batch(spec), final="learned")
    assert loss < 1e-18 and np.max(np.abs(g)) < 1e-9


def test_sixo_zero_twist_value():
    spec = make_instance("classifier", 2, 3, 0)
    x = Weighted(np.array([[0, 1, 1]]), np.ones(1))
    y = Weighted(np.array([[1, 1, 0]]), np.ones(1))
    assert sixo_grad(TabularTwists(2, 3), spec, x, y)[0] == pytest.approx(2 * 3 * np.log(2))


def test_sixo_density_ratio_t1():
    m = SeqModel.iid([0.3, 0.7], 1)
    spec = TargetSpec(m, TabularTerminal(2, 1, [0.9, 0.2]))
    tab = enumerate_target(spec)
    fit = fit_full_batch(lambda w: sixo_grad(w, spec, sigma_batch(tab), p0_batch(spec)), TabularTwists(2, 1))
    ratio = np.exp(tab.log_sigma() - m.sequence_logprobs(all_sequences(2, 1)))
    assert np.allclose(np.exp(fit.theta), ratio, atol=1e-6)


def test_fudge_requires_prob_head():
    spec = make_instance("classifier", 2, 2, 0)
    with pytest.raises(BadParameterization):
        fudge_grad(TabularTwists(2, 2), spec, p0_batch(spec))


def test_fudge_zero_at_degenerate():
    m = SeqModel.iid([0.5, 0.5], 1)
    spec = TargetSpec(m, TabularTerminal(2, 1, [0.0, 1.0]))
    tw = TabularTwists(2, 1, head="prob", theta=[-800.0, 800.0])
    assert fudge_grad(tw, spec, p0_batch(spec))[0] == 0.0


def test_fudge_bad_labels():
    m = SeqModel.iid([0.5, 0.5], 1)
    spec = TargetSpec(m, TabularTerminal(2, 1, [0.5, 3.0]))
    with pytest.raises(BadParameterization):
        fudge_grad(TabularTwists(2, 1, head="prob"), spec, p0_batch(spec))


def test_cdfudge_conditional_mean():
    spec = make_instance("classifier", 2, 2, 4)
    fit = fit_full_batch(lambda w: cdfudge_grad(w, spec, p0_batch(spec)), TabularTwists(2, 2))
    tab = enumerate_target(spec)
    expect = np.exp(tab.log_psi[1])
    assert np.allclose(np.exp(fit.block(1)), expect, atol=1e-6)


def test_pcl_zero_cases():
    spec = make_instance("intermediate", 3, 3, 2)
    tab = enumerate_target(spec)
    vt = oracle_values(tab, spec)
    q = TwistInducedProposal(ValueInducedTwists(vt, spec), spec)
    assert pcl1_grad(vt, spec, q, p0_batch(spec))[0] < 1e-20
    unit = TargetSpec(spec.model, Unit())
    assert pcl1_grad(ValueTwists(3, 3), unit, BaseProposal(unit.model), p0_batch(unit))[0] == 0.0


def test_dpg_errors_and_optimum():
    spec = make_instance("classifier", 2, 2, 3)
    view = TwistProposal(TabularTwists(2, 2), spec.model)
    with pytest.raises(DegenerateWeights):
        dpg_grad(view, spec, np.array([[0, 1]]))
    with pytest.raises(DegenerateWeights):
        dpg_grad(view, spec, np.array([[0, 1], [1, 1]]), log_w=np.full(2, -np.inf))
    # learned proposal equal to sigma: xi = optimal twists with a learned last step
    tab = enumerate_target(spec)
    exact = TwistProposal(tab.twists().to_tabular(), spec.model)
    _, g = dpg_grad(exact, spec, all_sequences(2, 2), weights=np.exp(tab.log_sigma()))
    assert np.max(np.abs(g)) < 1e-12


def test_dpg_one_step_expansion():
    m = SeqModel.iid([0.2, 0.5, 0.3], 1)
    spec = TargetSpec(m, TabularTerminal(3, 1, [1.0, 0.1, 0.6]))
    xi = TabularTwists(3, 1, theta=[0.3, -0.2, 0.5])
    view = TwistProposal(xi, m)
    xs = np.array([[0], [2], [2], [1]])
    lw = np.array([0.1, -0.4, 0.2, -1.0])
    _, g = dpg_grad(view, spec, xs, log_w=lw)
    wbar = np.exp(lw - lw.max())
    wbar /= wbar.sum()
    q = np.exp(view.logprobs(1, np.zeros((1, 0), int))[0])
    # -sum_k wbar_k (e_{x_k} - q)
    hand = -(np.bincount(xs[:, 0], weights=wbar, minlength=3) - q)
    assert np.allclose(g, hand, atol=1e-14)


def test_loss_config_validation():
    with pytest.raises(BadConfig):
        LossConfig(loss="ppo")
    with pytest.raises(BadConfig):
        LossConfig(loss="dpg", K=1)


def test_train_zero_lr_and_determinism():
    spec = make_instance("classifier", 3, 3, 1)
    tab = enumerate_target(spec)
    tw0 = TabularTwists(3, 3)
    tw0.theta = np.random.default_rng(0).normal(size=tw0.theta.size)
    cfg = LossConfig(loss="ctl", K=16, steps=5, lr=0.0, seed=2)
    tw, _ = train(cfg, spec, tw0, tab)
    assert np.array_equal(tw.theta, tw0.theta)
    cfg = LossConfig(loss="ctl", K=16, steps=20, seed=2, eval_every=5)
    a, ta = train(cfg, spec, tw0, tab)
    b, tb = train(cfg, spec, tw0, tab)
    assert np.array_equal(a.theta, b.theta) and ta.loss == tb.loss and ta.kl_q_sigma == tb.kl_q_sigma


@pytest.mark.parametrize("loss", ["ctl", "rl", "softq", "sixo", "cdq", "cdfudge", "dpg"])
def test_train_each_loss_runs(loss):
    spec = make_instance("classifier", 2, 3, 1)
    tab = enumerate_target(spec)
    tw, tr = train(LossConfig(loss=loss, K=8, steps=10, eval_every=5), spec, TabularTwists(2, 3), tab)
    assert len(tr.loss) == 10 and len(tr.eval_step) == 3


def test_train_fudge_and_pcl():
    spec = make_instance("classifier", 2, 3, 1)
    tab = enumerate_target(spec)
    train(LossConfig(loss="fudge", K=8, steps=5), spec, TabularTwists(2, 3, head="prob"), tab)
    with pytest.raises(BadParameterization):
        train(LossConfig(loss="fudge", K=8, steps=5), spec, TabularTwists(2, 3), tab)
    _, tr = train(LossConfig(loss="pcl1", K=8, steps=5), spec, ValueTwists(2, 3), tab)
    assert len(tr.kl_sigma_q) == 2


def test_train_divergence():
    spec = make_instance("classifier", 2, 3, 1)
    tw = TabularTwists(2, 3)
    tw.theta[:] = np.nan
    with pytest.raises(TrainingDiverged) as ei:
        train(LossConfig(loss="rl", K=8, steps=5), spec, tw)
    assert len(ei.value.trace.loss) == 1


def test_mlp_ctl_fd():
    spec = make_instance("intermediate", 2, 3, 1)
    tab = enumerate_target(spec)
    tw = MLPTwists(2, 3, hidden=5, seed=1)
    tw.theta = tw.init_theta(2) + 0.2
    assert rel_err(lambda w: ctl_exact(w, spec, tab, "learned"), tw) < 1e-4
