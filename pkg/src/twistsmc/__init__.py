"""Twisted sequential Monte Carlo for discrete autoregressive models."""
from .errors import *  # noqa: F401,F403
from .rng import RngStream
from .seqmodel import SeqModel, random_model
from .targets import TargetSpec
from .twist import MLPTwists, TabularTwists

__version__ = "0.1.0"
