"""Bit-exact desk-scale emulation of FP8/BF16 LLM training, plus a memory and throughput planner.

Submodules: numerics, tensorops, model, optim, comms, offload, memplan,
train, checkpoint, estimator, cli.
"""

__version__ = "0.1.0"
