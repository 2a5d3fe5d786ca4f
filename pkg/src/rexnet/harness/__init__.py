"""Experiment orchestration: configuration, transports, metrics and CLI plumbing."""
