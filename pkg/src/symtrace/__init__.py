"""symtrace: symbolic tensor graphs and synthesized execution traces for
distributed LLM training and inference workloads."""

__version__ = "0.1.0"
