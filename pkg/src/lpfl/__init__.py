"""Low-parameter federated prompt learning with LoRA adapters on a micro masked LM."""

__version__ = "0.1.0"
