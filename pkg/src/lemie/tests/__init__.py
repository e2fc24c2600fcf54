"""
Test package for lemie.

Unit tests for the models, samplers, protocol, estimators, baselines,
diagnostics, persistence and the experiment runner.
"""
