"""ensocast: practical partial total variation attribution for ENSO index regressors."""

__version__ = "0.3.0"
