"""Chart-structured masked language model with a pruned differentiable
inside-outside encoder. See the subpackages for the moving parts; the CLI
lives in `chartlm.cli`."""

__version__ = "0.1.0"
