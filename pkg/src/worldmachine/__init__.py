"""World machine: a latent-state, sensory-conditioned transformer world model
for time series, with its state-discovery training protocol, synthetic
dataset, evaluation tasks, and sweep analysis tooling."""

__version__ = "0.1.0"
