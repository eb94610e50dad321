"""haipred: pipeline and experiment harness for comparing two
hospital-acquired-infection prediction models on synthetic ICU data."""

__version__ = "0.1.0"
