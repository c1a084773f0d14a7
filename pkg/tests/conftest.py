import numpy as np
import pytest

from twistsmc.rng import counter_uniform
from twistsmc.seqmodel import SeqModel, random_model
from twistsmc.targets import (ContinuationObservation, ExpReward, IndicatorThreshold, TabularLikelihood,
                              TabularTerminal, TargetSpec, TokenCount, Unit, random_classifier,
                              random_intermediate, random_reward)

FAMILIES = ("indicator", "exp_reward", "classifier", "tabular", "intermediate", "tabular_obs", "continuation")

ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


def hand_instance(eps=0.0):
    """V=2, T=2, uniform p0, phi = indicator(s = [1, 1])."""
    m = SeqModel.uniform(2, 2)
    return TargetSpec(m, IndicatorThreshold(TokenCount(1), eta=2, eps=eps, op="ge"))


def make_instance(family, V, T, seed, kind="full_context"):
    m = random_model(V, T, kind=kind, seed=seed, concentration=1.0)
    if family == "indicator":
        return TargetSpec(m, IndicatorThreshold(random_reward(V, T, seed), eta=-0.3))
    if family == "exp_reward":
        return TargetSpec(m, ExpReward(random_reward(V, T, seed), beta=0.7))
    if family == "classifier":
        return TargetSpec(m, random_classifier(V, T, seed))
    if family == "tabular":
        vals = counter_uniform(seed, 0xAB, np.arange(V**T)) ** 3
        return TargetSpec(m, TabularTerminal(V, T, vals))
    if family == "intermediate":
        return TargetSpec(m, random_intermediate(V, T, seed))
    if family == "tabular_obs":
        u = counter_uniform(seed, 0xAC, np.arange(V**T)[:, None], np.arange(3)[None, :])
        g = -np.log(u)
        lik = TabularLikelihood(V, T, g / g.sum(axis=1, keepdims=True))
        return TargetSpec(m, Unit(), lik).condition(seed % 3)
    if family == "continuation":
        obs = ContinuationObservation(m, 1)
        return TargetSpec(m, Unit(), obs).condition(seed % V)
    raise ValueError(family)


@pytest.fixture
def hand():
    return hand_instance()
