"""Graph expert fusion toolkit: dense/sparse autodiff, graph experts,
entropic transport alignment, and per-class prediction fusion."""

__version__ = "0.1.0"
