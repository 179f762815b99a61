"""Experiment runner: configs, pipeline, comparison and the acceptance suite."""
