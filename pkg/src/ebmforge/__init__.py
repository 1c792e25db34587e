"""ebmforge: energy-based model training from first principles.

Modules: ``diffcore`` (reverse-mode autodiff), ``energies`` (energy models),
``sampling`` (Langevin / MALA chains), ``replay`` (chain-initialization
reservoir), ``objectives`` (gradient estimators and oracles) and ``lab``
(training, diagnostics, presets, CLI).
"""
__version__ = "0.1.0"
