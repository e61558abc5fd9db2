"""Learning PD-controllable latent spaces from pixels."""

__version__ = "0.1.0"
