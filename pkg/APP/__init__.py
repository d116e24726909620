"""
HyperInvert Application Package

Modular structure:
- helpers: utility functions (config, tensor files, checkpoints, images, devices)
- models: generator layer registry, toy generator, hypernetwork, modulation, losses
- workers: training, inversion and editing pipelines
- cli: command-line entry points
"""

__version__ = "1.0.0"
