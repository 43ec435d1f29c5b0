"""AW-Opt and its parent baselines (QT-Opt-style CEM Q-learning, AWAC) in numpy."""

__version__ = "0.1.0"
