"""Two-party secure computation with MLP-emulated transformer proxies for
private entropy-based data selection, plus exact cost accounting and a
communication-aware schedule simulator."""

__version__ = "0.1.0"
