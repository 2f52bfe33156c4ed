"""Graph neural forecasting with cross-graph context fusion."""

__version__ = "0.1.0"
