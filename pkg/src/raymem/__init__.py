"""Ray-aware streaming scene memory with loop closure and evaluation metrics."""

__version__ = "0.1.0"
