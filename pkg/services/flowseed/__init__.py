"""
FlowSeed Planner

Learning-enhanced trajectory optimization for a planar N-link arm:
- Perception: single-view 2D ray casting into a labeled point cloud
- Initializer: conditional Flow Matching velocity network (few-step Euler sampling)
- Refinement: batched particle warm-up + L-BFGS on smooth penalty costs
- Benchmark: success-rate and timing tables across seed strategies and iteration budgets
"""

__version__ = "1.0.0"
