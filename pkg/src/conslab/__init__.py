"""Conservative-loss laboratory: losses, a small numpy network engine,
synthetic two-domain data and an adversarial adaptation trainer."""

__version__ = "0.1.0"
