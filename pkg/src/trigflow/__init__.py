"""TrigFlow diffusion and continuous-time consistency models on numpy."""
from . import autodiff, core, net, attention

__version__ = "0.1.0"
