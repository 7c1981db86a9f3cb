"""Multi-agent RL for UAV mesh networks with advisor-guided distillation."""

__version__ = "0.1.0"
