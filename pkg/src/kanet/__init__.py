"""Knowledge adaptation network for few-shot class-incremental learning."""

__version__ = "0.1.0"
