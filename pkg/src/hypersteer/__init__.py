"""Desk-scale lab for steering generative samplers with hypernetwork-emitted
low-rank adapters.

Subpackages and modules:

- ``numerics``: float64 tensors, reverse-mode gradient tape, counter-based RNG
- ``schedules``: variance-preserving and rectified-flow noise schedules
- ``nets``: conditional denoiser MLP with time/condition featurization
- ``diffusion``: forward noising, score-matching losses, VP and flow samplers
- ``rewards``: analytic reward families, tilted-target grids, preference data
- ``hypernet``: LoRA-emitting hypernetwork, injection, scheduling strategies
- ``baselines``: reward-gradient guidance, best-of-N, epsilon-greedy search
- ``aligntrain``: hypernetwork training objectives and loop
- ``bench``: metrics, adapter-dynamics analyses, experiment runner
- ``cli``: command-line entry points
"""

__version__ = "0.1.0"
