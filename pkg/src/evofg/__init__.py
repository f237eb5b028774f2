"""Zero-shot graph anomaly detection with a routed mixture of graph-encoder
experts and an evolved router-feature space."""

__version__ = "0.1.0"
