"""Lipschitz SortNet policies for observation-robust control.

A DQN teacher is distilled into a SortNet student whose scores are
1-Lipschitz in l_inf, so the gap between its two best action scores gives a
certified radius. Submodules: ``numerics`` (autodiff and optimizer),
``lnn`` (the SortNet policy), ``envs``, ``teacher``, ``distill``,
``adversary``, ``certify``, ``report`` and ``cli``.
"""
from .lnn import Forward, Mode, SortNetConfig, SortNetPolicy

__version__ = "0.1.0"

__all__ = ["Forward", "Mode", "SortNetConfig", "SortNetPolicy", "__version__"]
