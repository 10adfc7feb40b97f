"""Bird's-eye-view imitation driving with a sparse attention bottleneck."""

__version__ = "0.1.0"
