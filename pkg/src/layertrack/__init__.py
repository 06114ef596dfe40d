"""Dynamics-aware trajectory generation with a learned tracking penalty.

A fixed low-layer feedback controller is rolled out on sampled references, the
resulting closed-loop tracking costs are regressed by a small MLP, and the
learned cost-to-go is then used as a regularizer when planning references for
a unicycle and a quadrotor.
"""

__version__ = "0.1.0"

GRAVITY = 9.81
