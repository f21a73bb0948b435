"""Visual-inertial-dynamics odometry toolkit.

Subpackages: simulator (synthetic quadrotor world), learner (residual
thrust/torque networks), estimator (sliding-window MAP backend). Flat
modules: geometry, bspline, rotdyn_fit, preintegration, evaluation, cli.
"""

__version__ = "0.1.0"
