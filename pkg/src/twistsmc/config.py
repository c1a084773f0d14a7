"""Experiment configuration: one TOML file with named sections.

``REFERENCE`` is both the documentation printed by ``config-reference`` and
the source of every default value.
"""
from __future__ import annotations

import copy
import os

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from .errors import BadConfig
from .seqmodel import model_from_config
from .targets import (ContinuationObservation, ExpReward, IndicatorThreshold, TableReward,
                      TabularLikelihood, TabularTerminal, TargetSpec, TokenCount, Unit, load_table_csv,
                      random_classifier, random_intermediate, random_reward)

OUTPUT_ENV = "TWISTSMC_OUTPUT_DIR"

REFERENCE = """\
# twistsmc experiment configuration (TOML). Every key below shows its default.
# Only the top-level seed is mandatory.
seed = 0

[model]
kind = "full_context"     # iid | markov1 | full_context
V = 4
T = 4
seed = 0                  # table generator seed
concentration = 1.0       # symmetric Dirichlet concentration of random conditionals
# init = [0.5, 0.5]       # explicit tables (iid / markov1 only)
# trans = [[0.9, 0.1], [0.1, 0.9]]

[target]
potential = "indicator"   # unit | indicator | exp_reward | classifier | tabular | intermediate
eta = -5.0                # indicator threshold
op = "le"                 # indicator condition r <= eta ("le") or r >= eta ("ge")
eps = 1e-16               # indicator smoothing, phi = eps + I[...]
beta = 1.0                # exp_reward strength, phi = exp(beta * r)
reward = "random"         # random | token_count | table
reward_seed = 0
reward_scale = 2.0
token = 0                 # token_count reward
table_csv = ""            # CSV "sequence,value" for reward = "table" or potential = "tabular"
classifier_seed = 0
sharpness = 3.0
intermediate_seed = 0
observation = "none"      # none | continuation | tabular
continuation = 1          # c, tokens observed after the sequence
likelihood_seed = 0
n_obs = 2                 # tabular likelihood alphabet size
obs = -1                  # conditioning value; -1 leaves the target unconditioned

[twist]
kind = "tabular"          # tabular | mlp | oracle | zero
head = "log"              # log | prob (prob is for fudge)
hidden = 32
window = 0                # 0 means T
seed = 0
checkpoint = ""           # load theta from this file instead of initializing

[loss]
kind = "ctl"              # ctl | rl | softq | sixo | fudge | cdq | cdfudge | pcl1 | dpg
positives = "approximate_sis"   # exact_oracle | exact_rejection | approximate_sis | approximate_smc
negatives = "twist_induced"     # base | twist_induced
K = 64
lr = 0.0                  # 0 picks 1e-3 (tabular) or 1e-4 (mlp)
steps = 1000
optimizer = "adam"        # adam | sgd
eval_every = 100
final = "exact"           # exact: true phi at the last step; learned: psi_T plus correction

[engine]
K = [1, 4, 16, 64]
n_runs = 20
schedule = "every_step"   # every_step | never | ess | ess:<frac> | at:<t1,t2,...>
upper = true              # also run the pinned-sample upper bound
exact_source = "oracle"   # oracle | rejection | bdmc | none
max_draws = 10000000      # rejection sampling budget
guard = 2000000           # enumeration limit on V**T
kl_samples = 2000

[output]
dir = "out"
"""

DEFAULTS = tomllib.loads(REFERENCE)


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise BadConfig(f"unknown config key {path}{k}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise BadConfig(f"{path}{k} must be a section")
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def load_config(path=None, text=None, require_seed=True):
    if text is None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise BadConfig(f"cannot read config: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise BadConfig(f"config is not valid TOML: {exc}") from None
    else:
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise BadConfig(f"config is not valid TOML: {exc}") from None
    if require_seed and "seed" not in raw:
        raise BadConfig("config needs a top-level seed")
    cfg = _merge(DEFAULTS, raw)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        cfg["output"]["dir"] = env
    cfg["_base_dir"] = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()
    return cfg


def _path(cfg, p):
    return p if os.path.isabs(p) else os.path.join(cfg.get("_base_dir", "."), p)


def build_model(cfg):
    m = dict(cfg["model"])
    if "init" not in m:
        m.pop("trans", None)
    return model_from_config(m)


def _reward(cfg, V, T):
    tc = cfg["target"]
    kind = tc["reward"]
    if kind == "random":
        return random_reward(V, T, tc["reward_seed"], tc["reward_scale"])
    if kind == "token_count":
        return TokenCount(int(tc["token"]))
    if kind == "table":
        if not tc["table_csv"]:
            raise BadConfig("reward = 'table' needs table_csv")
        return TableReward(V, T, load_table_csv(_path(cfg, tc["table_csv"]), V, T))
    raise BadConfig(f"unknown reward {kind!r}")


def build_spec(cfg, model=None):
    model = build_model(cfg) if model is None else model
    tc = cfg["target"]
    V, T = model.V, model.T
    kind = tc["potential"]
    if kind == "unit":
        pot = Unit()
    elif kind == "indicator":
        pot = IndicatorThreshold(_reward(cfg, V, T), float(tc["eta"]), float(tc["eps"]), tc["op"])
    elif kind == "exp_reward":
        pot = ExpReward(_reward(cfg, V, T), float(tc["beta"]))
    elif kind == "classifier":
        pot = random_classifier(V, T, tc["classifier_seed"], float(tc["sharpness"]))
    elif kind == "tabular":
        if not tc["table_csv"]:
            raise BadConfig("potential = 'tabular' needs table_csv")
        pot = TabularTerminal(V, T, load_table_csv(_path(cfg, tc["table_csv"]), V, T))
    elif kind == "intermediate":
        pot = random_intermediate(V, T, tc["intermediate_seed"])
    else:
        raise BadConfig(f"unknown potential {kind!r}")
    obs = None
    if tc["observation"] == "continuation":
        obs = ContinuationObservation(model, int(tc["continuation"]))
    elif tc["observation"] == "tabular":
        obs = random_likelihood(V, T, int(tc["n_obs"]), tc["likelihood_seed"])
    elif tc["observation"] != "none":
        raise BadConfig(f"unknown observation model {tc['observation']!r}")
    spec = TargetSpec(model, pot, obs)
    if obs is not None and int(tc["obs"]) >= 0:
        spec = spec.condition(int(tc["obs"]))
    return spec


def random_likelihood(V, T, n_obs, seed):
    from .rng import counter_uniform
    u = counter_uniform(seed, 0x0B, np.arange(V**T)[:, None], np.arange(n_obs)[None, :])
    g = -np.log(u)
    return TabularLikelihood(V, T, g / g.sum(axis=1, keepdims=True))


def output_dir(cfg):
    d = _path(cfg, cfg["output"]["dir"])
    os.makedirs(d, exist_ok=True)
    return d
