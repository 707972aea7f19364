"""Deep patch learning: weakly supervised multi-label classification and
object discovery with hand-written backpropagation on numpy."""

__version__ = "0.1.0"
