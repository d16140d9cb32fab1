"""Offline model-based policy optimization with an adversarial dynamics model.

Subpackages cover the numeric core (`tensor`, `nets`), environments and
offline datasets (`envs`, `data`), the two training stages (`adversarial`,
`sac`), reward reshaping (`penalty`), the exact tabular bound verifier
(`boundlab`), and the experiment harness (`config`, `harness`, `cli`).
"""

__version__ = "0.1.0"
