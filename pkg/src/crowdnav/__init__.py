"""Crowd navigation with an RL local planner and critic-guided localization recovery."""
__version__ = "0.1.0"
