"""Hybrid AE/CNN/BiLSTM intrusion detection with a federated training simulator."""

__version__ = "0.1.0"
