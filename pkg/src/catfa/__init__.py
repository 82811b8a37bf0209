"""Desk-scale dual-branch transformer/ConvNeXt segmentation network in numpy.

Every operation returns its output together with a hand-written pullback;
there is no autograd tape. See ``catfa.model`` for the network and
``catfa.cli`` for the command-line tools.
"""

from .model import ModelConfig, build, forward, forward_vjp
from .params import ParamStore

__all__ = ["ModelConfig", "ParamStore", "build", "forward", "forward_vjp"]
__version__ = "0.1.0"
