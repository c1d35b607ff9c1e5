"""Ravenforge - disentangled representations for matrix-reasoning problems.

Ravenforge provides a command-line interface for:
- Generating Raven-style matrix problems from [relation, object, attribute] triples
- Training a beta-annealed variational autoencoder on the problem panels
- Training a Wild Relation Network on frozen or finetuned panel embeddings
- Evaluating generalization regimes and inspecting the learned latent space

Everything runs on a small numpy reverse-mode autodiff engine (`ravenforge.lib`).
For detailed usage, see the README or run: `ravenforge --help`
"""

__version__ = "0.1.0"
