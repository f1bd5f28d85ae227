"""Joint grasp-affordance and occupancy learning on analytic tabletop scenes."""

__version__ = "0.1.0"
