"""Experiment harness: config parsing, run drivers, and the CLI."""
