"""safenav: Dubins-planner / dual-barrier MPC navigation stack."""

__version__ = "0.1.0"
