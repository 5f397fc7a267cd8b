"""Dual-branch RGB-SAR segmentation with attention-based fusion, on numpy.

Modules, bottom-up: ``tensor``/``functional`` (autograd and layers),
``fusion`` (the focusing and cascade fusion blocks), ``network``,
``data`` (synthetic scenes), ``metrics``, ``optim``, ``train``,
``ablation`` and ``complexity``.
"""
from .errors import AsanetError
from .network import NetConfig, asanet_forward, init_params
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["AsanetError", "NetConfig", "Tensor", "asanet_forward", "init_params", "no_grad"]
