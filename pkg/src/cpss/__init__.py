"""Budget-projected runtime safety shield with a kinematic traffic testbed."""

__version__ = "0.1.0"
